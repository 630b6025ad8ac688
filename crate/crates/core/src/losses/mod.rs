//! Loss terms: heatmap loss, geometric bone-ratio loss, depth supervision dispatch and the total.

pub mod geo;
pub mod heatmap;

use serde::{Deserialize, Serialize};

pub use geo::{geo_loss, geo_loss_value, GeoLossResult, GroupTerm};
pub use heatmap::{
    decode_heatmap, heatmap_loss, render_heatmap, rendered_heatmap_loss, DecodedJoints,
    HeatmapGeometry, HeatmapStack,
};

use crate::error::{Error, Result};
use crate::sample::{PoseSample, Supervision};
use crate::skeleton::{DepthVector, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_geo: f64,
    /// Also apply the geometric term to fully labelled samples.
    pub apply_geo_to_3d: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.1,
            lambda_geo: 0.01,
            apply_geo_to_3d: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_geo", self.lambda_geo),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Weighted depth loss of one sample with its components.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    /// `lambda_reg * ||d - d_hat||^2` (0 for weak samples).
    pub reg: f64,
    /// `lambda_geo * L_geo` (0 when the geometric term is inactive).
    pub geo: f64,
    pub grad_depth: DepthVector,
}

/// Regression loss for full3d samples, geometric loss for weak2d samples.
///
/// With `lambda_geo == 0` the geometric loss is never evaluated.
pub fn depth_supervision_loss(
    pred_depths: &DepthVector,
    sample: &PoseSample,
    skeleton: &Skeleton,
    weights: &LossWeights,
    depth_scale: f64,
) -> Result<DepthLoss> {
    let j = skeleton.num_joints();
    if pred_depths.len() != j {
        return Err(Error::Dimension {
            context: "predicted depths",
            expected: j,
            actual: pred_depths.len(),
        });
    }
    let mut grad = vec![0.0; j];
    let mut reg = 0.0;
    let mut geo = 0.0;
    let use_geo = weights.lambda_geo > 0.0
        && (sample.supervision == Supervision::Weak2d || weights.apply_geo_to_3d);

    if sample.supervision == Supervision::Full3d {
        let labels = sample.depth_labels()?;
        if labels.len() != j {
            return Err(Error::MalformedSample {
                id: sample.id.clone(),
                message: format!("expected {j} depths, got {}", labels.len()),
            });
        }
        let mut sq = 0.0;
        for ((g, &p), &y) in grad.iter_mut().zip(&pred_depths.0).zip(&labels.0) {
            let diff = p - y;
            sq += diff * diff;
            *g += 2.0 * weights.lambda_reg * diff;
        }
        reg = weights.lambda_reg * sq;
    }
    if use_geo {
        let r = geo_loss(pred_depths, &sample.joints2d, skeleton, depth_scale)?;
        geo = weights.lambda_geo * r.value;
        for (g, dg) in grad.iter_mut().zip(&r.grad_depth.0) {
            *g += weights.lambda_geo * dg;
        }
    }
    Ok(DepthLoss {
        value: reg + geo,
        reg,
        geo,
        grad_depth: DepthVector(grad),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub l2d: f64,
    pub reg: f64,
    pub geo: f64,
}

/// `L_2D + L_dep` for one sample; the 2D ground-truth maps are rendered with the
/// prediction's geometry.
pub fn total_loss(
    pred_maps: &HeatmapStack,
    pred_depths: &DepthVector,
    sample: &PoseSample,
    skeleton: &Skeleton,
    weights: &LossWeights,
    depth_scale: f64,
) -> Result<LossComponents> {
    let gt_maps = render_heatmap(&sample.joints2d, pred_maps.geometry)?;
    let (l2d, _) = heatmap_loss(pred_maps, &gt_maps)?;
    let dep = depth_supervision_loss(pred_depths, sample, skeleton, weights, depth_scale)?;
    Ok(LossComponents {
        total: l2d + dep.value,
        l2d,
        reg: dep.reg,
        geo: dep.geo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Pose2D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_skeleton() -> Skeleton {
        Skeleton::from_json_str(
            r#"{
            "joint_names": ["o", "a", "b"],
            "bones": [{"name": "A", "parent": 0, "child": 1},
                      {"name": "B", "parent": 0, "child": 2}],
            "groups": [{"name": "g", "bones": [0, 1]}],
            "canonical_lengths": [5.0, 5.0],
            "symmetric_pairs": [],
            "root": 0, "neck": 1, "hips": {"left": 2, "right": 2}, "head_bone": 0
        }"#,
        )
        .unwrap()
    }

    fn sample(supervision: Supervision, depths: Option<Vec<f64>>) -> PoseSample {
        PoseSample {
            id: "s".into(),
            supervision,
            joints2d: Pose2D(vec![[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]]),
            depths: depths.map(DepthVector),
            source: String::new(),
            evidence: None,
        }
    }

    #[test]
    fn regression_branch() {
        let s = pair_skeleton();
        let w = LossWeights::default();
        let smp = sample(Supervision::Full3d, Some(vec![1.0, 2.0, 3.0]));
        let perfect =
            depth_supervision_loss(&DepthVector(vec![1.0, 2.0, 3.0]), &smp, &s, &w, 1.0).unwrap();
        assert_eq!(perfect.value, 0.0);
        let off =
            depth_supervision_loss(&DepthVector(vec![1.0, 4.0, 3.0]), &smp, &s, &w, 1.0).unwrap();
        assert!((off.value - 0.4).abs() < 1e-15);
        assert!((off.grad_depth.0[1] - 0.4).abs() < 1e-15);
        assert_eq!(off.geo, 0.0);
    }

    #[test]
    fn weak_branch_scales_geo() {
        let s = pair_skeleton();
        let w = LossWeights::default();
        let smp = sample(Supervision::Weak2d, None);
        let d = DepthVector(vec![0.0, 0.0, 6.0]);
        let r = depth_supervision_loss(&d, &smp, &s, &w, 1.0).unwrap();
        assert!((r.value - 0.0001).abs() < 1e-17);
        assert_eq!(r.reg, 0.0);
        assert!((r.grad_depth.0[2] - 0.0002).abs() < 1e-17);
    }

    #[test]
    fn geo_on_3d_is_opt_in() {
        let s = pair_skeleton();
        let smp = sample(Supervision::Full3d, Some(vec![0.0, 0.0, 6.0]));
        let d = DepthVector(vec![0.0, 0.0, 6.0]);
        let off = depth_supervision_loss(&d, &smp, &s, &LossWeights::default(), 1.0).unwrap();
        assert_eq!(off.value, 0.0);
        let on = LossWeights {
            apply_geo_to_3d: true,
            ..LossWeights::default()
        };
        let r = depth_supervision_loss(&d, &smp, &s, &on, 1.0).unwrap();
        assert!((r.geo - 0.0001).abs() < 1e-17);
    }

    #[test]
    fn zero_lambda_geo_never_touches_degenerate_geometry() {
        let s = pair_skeleton();
        let mut smp = sample(Supervision::Weak2d, None);
        smp.joints2d = Pose2D(vec![[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]]);
        let d = DepthVector(vec![1.0, 0.0, 1.0]); // bone B has length 0
        let w = LossWeights {
            lambda_geo: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(
            depth_supervision_loss(&d, &smp, &s, &w, 1.0).unwrap().value,
            0.0
        );
        assert!(depth_supervision_loss(&d, &smp, &s, &LossWeights::default(), 1.0).is_err());
    }

    #[test]
    fn full3d_without_labels_is_malformed() {
        let s = pair_skeleton();
        let smp = sample(Supervision::Full3d, None);
        let r = depth_supervision_loss(
            &DepthVector(vec![0.0; 3]),
            &smp,
            &s,
            &LossWeights::default(),
            1.0,
        );
        assert!(matches!(r, Err(Error::MalformedSample { .. })));
    }

    #[test]
    fn total_is_sum_of_components() {
        let s = Skeleton::mpii16();
        let geo = HeatmapGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rest = crate::datagen::rest_pose(&s);
        // place the rest pose inside the 256-pixel field
        let joints = Pose2D(
            rest.0
                .iter()
                .map(|p| [128.0 + 0.1 * p[0], 128.0 + 0.1 * p[1]])
                .collect(),
        );
        let perfect_maps = render_heatmap(&joints, geo).unwrap();
        let canonical_2d = PoseSample {
            id: "w".into(),
            supervision: Supervision::Weak2d,
            joints2d: joints.clone(),
            depths: None,
            source: String::new(),
            evidence: None,
        };
        let scaled = Skeleton::mpii16_with_lengths(
            &s.canonical_lengths()
                .iter()
                .map(|l| l * 0.1)
                .collect::<Vec<_>>(),
            "px",
        )
        .unwrap();
        let zero_depths = DepthVector(rest.0.iter().map(|p| 0.1 * p[2]).collect());
        let l = total_loss(
            &perfect_maps,
            &zero_depths,
            &canonical_2d,
            &scaled,
            &LossWeights::default(),
            1.0,
        )
        .unwrap();
        assert!(l.total < 1e-20, "{l:?}");

        for _ in 0..20 {
            let mut maps = perfect_maps.clone();
            for v in maps.maps.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            let depths = DepthVector((0..16).map(|_| rng.random_range(-20.0..20.0)).collect());
            let labelled = PoseSample {
                supervision: Supervision::Full3d,
                depths: Some(DepthVector(
                    (0..16).map(|_| rng.random_range(-20.0..20.0)).collect(),
                )),
                ..canonical_2d.clone()
            };
            for smp in [&labelled, &canonical_2d] {
                let c =
                    total_loss(&maps, &depths, smp, &scaled, &LossWeights::default(), 1.0).unwrap();
                assert_eq!(c.total, c.l2d + (c.reg + c.geo));
            }
        }
    }
}
