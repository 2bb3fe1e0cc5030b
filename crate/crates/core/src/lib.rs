//! Verified longitudinal lesion tracking at phantom scale.
//!
//! A baseline lesion click is propagated to the follow-up scan through a
//! deformation field, optionally corrected by a reader, and a dual-timepoint
//! promptable network delineates the lesion using both scans.

pub mod case;
pub mod error;
pub mod field;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod nifti;
pub mod prompts;
pub mod registration;
pub mod synth;
pub mod train;
pub mod util;
pub mod volume;

pub use case::{CaseKind, LongitudinalCase, Timepoint};
pub use error::{Error, Result};
pub use field::DeformationField;
pub use volume::{centroid, crop_pad, Coord, InstanceMask, PromptPoint, PromptRole, Volume, VoiWindow};
