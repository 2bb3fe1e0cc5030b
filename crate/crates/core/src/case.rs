use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::volume::{InstanceMask, PromptPoint, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    #[default]
    Standard,
    /// Target abutting a look-alike confounder; only the baseline tells them apart.
    Ambiguity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timepoint {
    pub volume: Volume,
    pub mask: InstanceMask,
}

impl Timepoint {
    pub fn new(volume: Volume, mask: InstanceMask) -> Result<Self> {
        mask.check_shape(&volume)?;
        Ok(Self { volume, mask })
    }
}

/// One patient: a baseline and a follow-up scan with lesion correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCase {
    pub case_id: String,
    pub kind: CaseKind,
    pub baseline: Timepoint,
    pub followup: Timepoint,
    pub truth_field: Option<DeformationField>,
    pub baseline_prompts: BTreeMap<u32, PromptPoint>,
    /// Recorded follow-up clicks. When present they are the verified prompt
    /// instead of the ground-truth centroid.
    pub followup_prompts: BTreeMap<u32, PromptPoint>,
}

impl LongitudinalCase {
    pub fn validate(&self) -> Result<()> {
        if self.baseline.volume.shape() != self.followup.volume.shape() {
            return Err(Error::Shape(format!(
                "case {}: baseline {:?} and follow-up {:?} differ",
                self.case_id,
                self.baseline.volume.shape(),
                self.followup.volume.shape()
            )));
        }
        if let Some(f) = &self.truth_field {
            if f.shape() != self.baseline.volume.shape() {
                return Err(Error::Shape(format!("case {}: truth field grid mismatch", self.case_id)));
            }
        }
        let shape = self.baseline.volume.shape();
        for (&id, p) in &self.baseline_prompts {
            if !self.baseline.mask.contains(id) {
                return Err(Error::Validation(format!("case {}: prompt for lesion {id} absent from baseline mask", self.case_id)));
            }
            p.check_within(shape)?;
        }
        for p in self.followup_prompts.values() {
            p.check_within(shape)?;
        }
        Ok(())
    }

    /// Lesions with a baseline prompt, in id order.
    pub fn lesion_ids(&self) -> Vec<u32> {
        self.baseline_prompts.keys().copied().collect()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.baseline.volume.shape()
    }
}
