use serde::{Deserialize, Serialize};

use longitrack_core::PromptPoint;

use crate::rle::RleMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Proposed,
    Verified,
    Segmented,
}

/// Reader-verification state of one lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub case_id: String,
    pub lesion_id: u32,
    pub proposed: PromptPoint,
    pub verified: Option<PromptPoint>,
    pub segmentation: Option<RleMask>,
    pub status: SessionStatus,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("session for lesion {lesion_id} is {status:?}, expected {expected:?}")]
pub struct TransitionError {
    pub lesion_id: u32,
    pub status: SessionStatus,
    pub expected: SessionStatus,
}

impl SessionState {
    pub fn new(case_id: impl Into<String>, lesion_id: u32, proposed: PromptPoint) -> Self {
        Self { case_id: case_id.into(), lesion_id, proposed, verified: None, segmentation: None, status: SessionStatus::Proposed }
    }

    fn expect(&self, expected: SessionStatus) -> Result<(), TransitionError> {
        if self.status != expected {
            return Err(TransitionError { lesion_id: self.lesion_id, status: self.status, expected });
        }
        Ok(())
    }

    pub fn verify(&mut self, point: PromptPoint) -> Result<(), TransitionError> {
        self.expect(SessionStatus::Proposed)?;
        self.verified = Some(point);
        self.status = SessionStatus::Verified;
        Ok(())
    }

    pub fn segment(&mut self, mask: RleMask) -> Result<(), TransitionError> {
        self.expect(SessionStatus::Verified)?;
        self.segmentation = Some(mask);
        self.status = SessionStatus::Segmented;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use longitrack_core::PromptRole;

    #[test]
    fn transitions_only_move_forward() {
        let p = PromptPoint::new([1, 2, 3], PromptRole::Proposed, 1);
        let mut s = SessionState::new("c", 1, p);
        let mask = RleMask { volume_shape: [1, 1, 1], offset: [0; 3], shape: [1, 1, 1], counts: vec![1] };
        assert!(s.segment(mask.clone()).is_err());
        s.verify(p.with_role(PromptRole::Verified)).unwrap();
        assert!(s.verify(p).is_err());
        s.segment(mask).unwrap();
        assert_eq!(s.status, SessionStatus::Segmented);
        assert!(s.segmentation.is_some());
    }
}
