//! Training/evaluation records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{DepthVector, Pose2D, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// 2D joints and depth labels.
    Full3d,
    /// 2D joints only.
    Weak2d,
}

/// Stand-in for image evidence: what a 2D detector sees for this sample.
///
/// `observed2d` is a noisy, domain-distorted view of the true joints and
/// `appearance` is a small vector of domain-dependent image statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub observed2d: Pose2D,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub id: String,
    pub supervision: Supervision,
    pub joints2d: Pose2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<DepthVector>,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Evidence>,
}

impl PoseSample {
    /// Check joint counts, finiteness and the supervision contract.
    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let j = skeleton.num_joints();
        let malformed = |message: String| Error::MalformedSample {
            id: self.id.clone(),
            message,
        };
        if self.joints2d.len() != j {
            return Err(malformed(format!(
                "expected {j} 2D joints, got {}",
                self.joints2d.len()
            )));
        }
        if !self.joints2d.is_finite() {
            return Err(malformed("non-finite 2D coordinate".into()));
        }
        match (&self.supervision, &self.depths) {
            (Supervision::Full3d, None) => {
                return Err(malformed("full3d sample is missing depth labels".into()))
            }
            (_, Some(d)) if d.len() != j => {
                return Err(malformed(format!("expected {j} depths, got {}", d.len())))
            }
            (_, Some(d)) if !d.is_finite() => {
                return Err(malformed("non-finite depth value".into()))
            }
            _ => {}
        }
        if let Some(ev) = &self.evidence {
            if ev.observed2d.len() != j {
                return Err(malformed(format!(
                    "expected {j} observed joints, got {}",
                    ev.observed2d.len()
                )));
            }
            if !ev.observed2d.is_finite() || ev.appearance.iter().any(|v| !v.is_finite()) {
                return Err(malformed("non-finite evidence value".into()));
            }
        }
        Ok(())
    }

    /// Depth labels of a full3d sample.
    pub fn depth_labels(&self) -> Result<&DepthVector> {
        self.depths.as_ref().ok_or_else(|| Error::MalformedSample {
            id: self.id.clone(),
            message: "sample carries no depth labels".into(),
        })
    }
}
