//! Bone-length-ratio geometric loss on predicted depths given ground-truth 2D joints.
//!
//! For every bone group the loss is the variance of `l_e / canonical_e` over the
//! group's bones; groups are summed. Gradients flow to depths only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{DepthVector, Pose2D, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTerm {
    pub name: String,
    pub mean_ratio: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoLossResult {
    pub value: f64,
    /// dL/dd_j for every joint, in the caller's depth units.
    pub grad_depth: DepthVector,
    pub per_group: Vec<GroupTerm>,
}

struct BoneEval {
    bone: usize,
    length: f64,
    ratio: f64,
}

fn check_inputs(depths: &DepthVector, joints2d: &Pose2D, skeleton: &Skeleton) -> Result<()> {
    let j = skeleton.num_joints();
    if depths.len() != j {
        return Err(Error::Dimension {
            context: "geo loss depths",
            expected: j,
            actual: depths.len(),
        });
    }
    skeleton.check_pose2d(joints2d)?;
    if skeleton.groups().iter().all(|g| g.bones.is_empty()) {
        return Err(Error::Config(
            "geometric loss needs at least one non-empty bone group".into(),
        ));
    }
    Ok(())
}

fn evaluate_group(
    bones: &[usize],
    depths: &DepthVector,
    joints2d: &Pose2D,
    skeleton: &Skeleton,
    depth_scale: f64,
) -> (Vec<BoneEval>, f64, f64) {
    let evals: Vec<BoneEval> = bones
        .iter()
        .map(|&e| {
            let b = &skeleton.bones()[e];
            let dx = joints2d.0[b.parent][0] - joints2d.0[b.child][0];
            let dy = joints2d.0[b.parent][1] - joints2d.0[b.child][1];
            let dd = (depths.0[b.parent] - depths.0[b.child]) * depth_scale;
            let length = (dx * dx + dy * dy + dd * dd).sqrt();
            BoneEval {
                bone: e,
                length,
                ratio: length / skeleton.canonical_lengths()[e],
            }
        })
        .collect();
    let n = evals.len() as f64;
    let mean = evals.iter().map(|b| b.ratio).sum::<f64>() / n;
    let contribution = evals
        .iter()
        .map(|b| (b.ratio - mean) * (b.ratio - mean))
        .sum::<f64>()
        / n;
    (evals, mean, contribution)
}

/// Forward value and per-group breakdown. Zero-length bones contribute ratio 0.
pub fn geo_loss_value(
    depths: &DepthVector,
    joints2d: &Pose2D,
    skeleton: &Skeleton,
    depth_scale: f64,
) -> Result<(f64, Vec<GroupTerm>)> {
    check_inputs(depths, joints2d, skeleton)?;
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(skeleton.groups().len());
    for group in skeleton.groups() {
        if group.bones.is_empty() {
            continue;
        }
        let (_, mean, contribution) =
            evaluate_group(&group.bones, depths, joints2d, skeleton, depth_scale);
        value += contribution;
        terms.push(GroupTerm {
            name: group.name.clone(),
            mean_ratio: mean,
            contribution,
        });
    }
    Ok((value, terms))
}

/// Value plus analytic depth gradient.
///
/// Per bone `e` in group `R`: `dL/dr_e = 2 (r_e - mean_R) / |R|`, `dr_e/dl_e = 1 / canonical_e`,
/// and `dl_e/dd_parent = depth_scale^2 (d_parent - d_child) / l_e` (negated for the child).
pub fn geo_loss(
    depths: &DepthVector,
    joints2d: &Pose2D,
    skeleton: &Skeleton,
    depth_scale: f64,
) -> Result<GeoLossResult> {
    check_inputs(depths, joints2d, skeleton)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; skeleton.num_joints()];
    let mut per_group = Vec::with_capacity(skeleton.groups().len());
    for group in skeleton.groups() {
        if group.bones.is_empty() {
            continue;
        }
        let (evals, mean, contribution) =
            evaluate_group(&group.bones, depths, joints2d, skeleton, depth_scale);
        value += contribution;
        per_group.push(GroupTerm {
            name: group.name.clone(),
            mean_ratio: mean,
            contribution,
        });
        let n = evals.len() as f64;
        for be in &evals {
            let d_ratio = 2.0 * (be.ratio - mean) / n;
            if d_ratio == 0.0 {
                continue;
            }
            let b = &skeleton.bones()[be.bone];
            if be.length == 0.0 {
                return Err(Error::SingularBone {
                    bone: be.bone,
                    name: b.name.clone(),
                });
            }
            let d_len = d_ratio / skeleton.canonical_lengths()[be.bone];
            let dd = depths.0[b.parent] - depths.0[b.child];
            let g = d_len * depth_scale * depth_scale * dd / be.length;
            grad[b.parent] += g;
            grad[b.child] -= g;
        }
    }
    Ok(GeoLossResult {
        value,
        grad_depth: DepthVector(grad),
        per_group,
    })
}
