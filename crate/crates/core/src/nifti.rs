//! Minimal NIfTI-1 single-file reader/writer (`.nii` and `.nii.gz`).
//!
//! Arrays indexed `(z, y, x)` map to NIfTI `dim[1..=3] = (x, y, z)`, so the
//! in-memory row-major layout is already NIfTI order. Displacement fields are
//! written as 5D vector images (`dim[5] = 3`, intent `NIFTI_INTENT_VECTOR`)
//! holding `(dz, dy, dx)` in voxel units.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::volume::{InstanceMask, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

struct Image {
    dims: Vec<usize>,
    pixdim: [f64; 3],
    origin: [f64; 3],
    intent: i16,
    values: Vec<f64>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn write_image(path: &Path, dims: &[usize], datatype: i16, pixdim: [f64; 3], origin: [f64; 3], intent: i16, payload: &[u8]) -> Result<()> {
    let mut hdr = vec![0u8; VOX_OFFSET];
    let le = LittleEndian::write_i16;
    LittleEndian::write_i32(&mut hdr[0..4], HEADER_SIZE as i32);
    le(&mut hdr[40..42], dims.len() as i16);
    for i in 0..7 {
        let d = dims.get(i).copied().unwrap_or(1);
        le(&mut hdr[42 + 2 * i..44 + 2 * i], d as i16);
    }
    le(&mut hdr[68..70], intent);
    le(&mut hdr[70..72], datatype);
    let bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 | DT_UINT16 => 16,
        DT_FLOAT64 => 64,
        _ => 32,
    };
    le(&mut hdr[72..74], bitpix);
    // pixdim[0] = qfac, then x, y, z spacing.
    LittleEndian::write_f32(&mut hdr[76..80], 1.0);
    for i in 0..3 {
        LittleEndian::write_f32(&mut hdr[80 + 4 * i..84 + 4 * i], pixdim[i] as f32);
    }
    LittleEndian::write_f32(&mut hdr[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..116], 1.0);
    hdr[123] = 10; // xyzt_units: mm, s
    le(&mut hdr[252..254], 1);
    for i in 0..3 {
        LittleEndian::write_f32(&mut hdr[268 + 4 * i..272 + 4 * i], origin[i] as f32);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::fast()))
    } else {
        Box::new(BufWriter::new(file))
    };
    sink.write_all(&hdr).and_then(|_| sink.write_all(payload)).and_then(|_| sink.flush()).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let read = if is_gz(path) {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    read.map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(ctx, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(&bytes, &ctx)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(&bytes, &ctx)
    } else {
        Err(Error::parse(ctx, "not a NIfTI-1 file (sizeof_hdr != 348)"))
    }
}

fn decode<B: ByteOrder>(bytes: &[u8], ctx: &str) -> Result<Image> {
    if &bytes[344..347] != b"n+1" {
        return Err(Error::parse(ctx, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = B::read_i16(&bytes[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::parse(ctx, format!("invalid dim[0] = {ndim}")));
    }
    let dims: Vec<usize> = (0..ndim as usize).map(|i| B::read_i16(&bytes[42 + 2 * i..44 + 2 * i]).max(1) as usize).collect();
    let intent = B::read_i16(&bytes[68..70]);
    let datatype = B::read_i16(&bytes[70..72]);
    let mut pixdim = [1.0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let v = B::read_f32(&bytes[80 + 4 * i..84 + 4 * i]) as f64;
        *p = if v > 0.0 { v } else { 1.0 };
    }
    let mut origin = [0.0f64; 3];
    for (i, o) in origin.iter_mut().enumerate() {
        *o = B::read_f32(&bytes[268 + 4 * i..272 + 4 * i]) as f64;
    }
    let offset = B::read_f32(&bytes[108..112]).max(VOX_OFFSET as f32) as usize;
    let slope = B::read_f32(&bytes[112..116]) as f64;
    let inter = B::read_f32(&bytes[116..120]) as f64;
    let n: usize = dims.iter().product();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::parse(ctx, format!("unsupported datatype {other}"))),
    };
    let data = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| Error::parse(ctx, format!("expected {} data bytes after offset {offset}", n * width)))?;
    let mut values: Vec<f64> = data
        .chunks_exact(width)
        .map(|c| match datatype {
            DT_UINT8 => c[0] as f64,
            DT_INT16 => B::read_i16(c) as f64,
            DT_UINT16 => B::read_u16(c) as f64,
            DT_INT32 => B::read_i32(c) as f64,
            DT_UINT32 => B::read_u32(c) as f64,
            DT_FLOAT32 => B::read_f32(c) as f64,
            _ => B::read_f64(c),
        })
        .collect();
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(Image { dims, pixdim, origin, intent, values })
}

fn spatial(img: &Image, ctx: &Path) -> Result<[usize; 3]> {
    let d = |i: usize| img.dims.get(i).copied().unwrap_or(1);
    Ok([d(2), d(1), d(0)]).and_then(|s: [usize; 3]| {
        if s.iter().product::<usize>() == 0 {
            Err(Error::parse(ctx.display().to_string(), "zero-sized image"))
        } else {
            Ok(s)
        }
    })
}

fn zyx(v: [f64; 3]) -> [f64; 3] {
    [v[2], v[1], v[0]]
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let s = volume.shape();
    let mut payload = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data().iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_image(path.as_ref(), &[s[2], s[1], s[0]], DT_FLOAT32, zyx(volume.spacing()), zyx(volume.origin()), 0, &payload)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let s = spatial(&img, path)?;
    let n: usize = s.iter().product();
    let data = Array3::from_shape_vec(s, img.values[..n].iter().map(|&v| v as f32).collect())
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Volume::with_origin(data, zyx(img.pixdim), zyx(img.origin))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &InstanceMask, spacing: [f64; 3]) -> Result<()> {
    let s = mask.shape();
    let mut payload = Vec::with_capacity(mask.labels().len() * 4);
    for v in mask.labels().iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_image(path.as_ref(), &[s[2], s[1], s[0]], DT_UINT32, zyx(spacing), [0.0; 3], 0, &payload)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let s = spatial(&img, path)?;
    let n: usize = s.iter().product();
    if img.values[..n].iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::parse(path.display().to_string(), "labels must be non-negative integers"));
    }
    let labels = Array3::from_shape_vec(s, img.values[..n].iter().map(|&v| v as u32).collect())
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Ok(InstanceMask::new(labels))
}

pub fn write_field(path: impl AsRef<Path>, field: &DeformationField, spacing: [f64; 3]) -> Result<()> {
    let s = field.shape();
    let mut payload = Vec::with_capacity(field.disp().len() * 4);
    for k in 0..3 {
        for z in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    payload.extend_from_slice(&field.disp()[[z, y, x, k]].to_le_bytes());
                }
            }
        }
    }
    write_image(path.as_ref(), &[s[2], s[1], s[0], 1, 3], DT_FLOAT32, zyx(spacing), [0.0; 3], INTENT_VECTOR, &payload)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    let img = read_image(path)?;
    let ctx = path.display().to_string();
    if img.intent != INTENT_VECTOR || img.dims.len() != 5 || img.dims[4] != 3 {
        return Err(Error::parse(ctx, "expected a 3-component vector image"));
    }
    let s = spatial(&img, path)?;
    let n: usize = s.iter().product();
    let disp = Array4::from_shape_fn((s[0], s[1], s[2], 3), |(z, y, x, k)| {
        img.values[k * n + (z * s[1] + y) * s[2] + x] as f32
    });
    DeformationField::new(disp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_mask_field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 20 + y * 5 + x) as f32 * 0.5 - 3.0);
        let v = Volume::with_origin(data, [2.0, 1.0, 0.5], [1.0, 2.0, 3.0]).unwrap();
        let p = dir.path().join("img.nii.gz");
        write_volume(&p, &v).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);

        let mut m = InstanceMask::zeros([3, 4, 5]);
        m.labels_mut()[[1, 2, 3]] = 7;
        let p = dir.path().join("mask.nii");
        write_mask(&p, &m, v.spacing()).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);

        let disp = Array4::from_shape_fn((3, 4, 5, 3), |(z, y, x, k)| (z + 2 * y + 3 * x) as f32 * (k as f32 + 1.0));
        let f = DeformationField::new(disp).unwrap();
        let p = dir.path().join("field.nii.gz");
        write_field(&p, &f, v.spacing()).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, vec![1u8; 400]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Parse { .. })));
        assert!(matches!(read_volume(dir.path().join("missing.nii")), Err(Error::Io { .. })));
    }
}
