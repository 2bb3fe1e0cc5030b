//! Single-file model checkpoints: magic, format version, a JSON header with
//! the network configuration and tensor table, then little-endian f32 data.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::graph::{Param, ParamStore};
use super::model::{Model, NetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LTRACKNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetConfig,
    tensors: Vec<Param>,
    #[serde(default)]
    metadata: serde_json::Value,
}

pub fn to_bytes(model: &Model, metadata: serde_json::Value) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: model.params().params.clone(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(json.len() + 4 * model.param_count() + 24);
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    out.extend_from_slice(&json);
    for p in &model.params().params {
        for &v in &p.data {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    out
}

/// Loads a model and the metadata stored alongside it.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let bad = |m: String| Error::parse("checkpoint", m);
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a model checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated".into()))? as usize;
    let start = r.position() as usize;
    let json = bytes.get(start..start + len).ok_or_else(|| bad("truncated header".into()))?;
    let mut header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    r.set_position((start + len) as u64);
    for t in &mut header.tensors {
        let n: usize = t.shape.iter().product();
        let mut data = vec![0.0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad(format!("truncated tensor {}", t.name)))?;
        t.data = data;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    let model = Model::from_parts(header.config, ParamStore { params: header.tensors })?;
    Ok((model, header.metadata))
}

pub fn save(model: &Model, path: &Path, metadata: serde_json::Value) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// SHA-256 over every parameter value, in layout order.
pub fn param_hash(model: &Model) -> String {
    let mut bytes = Vec::with_capacity(4 * model.param_count());
    for p in &model.params().params {
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::util::sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::FusionMode;

    #[test]
    fn round_trip() {
        let m = Model::new(NetConfig::compact(FusionMode::Concat), 9).unwrap();
        let bytes = to_bytes(&m, serde_json::json!({"epoch": 3}));
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(meta["epoch"], 3);
        assert_eq!(param_hash(&back), param_hash(&m));
    }

    #[test]
    fn corrupt_inputs() {
        let m = Model::new(NetConfig::compact(FusionMode::DiffWeighting), 9).unwrap();
        let bytes = to_bytes(&m, serde_json::Value::Null);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Parse { .. })));
        assert!(matches!(from_bytes(b"garbage!garbage!"), Err(Error::Parse { .. })));
        let mut wrong = bytes.clone();
        wrong[8] = 7;
        assert!(matches!(from_bytes(&wrong), Err(Error::Parse { .. })));
    }
}
