//! Joint/bone schema and the pure geometric transforms built on it.
//!
//! Poses carry 2D image coordinates in pixels plus a per-joint depth. Where
//! 2D and depth mix (bone lengths), depth is multiplied by a `depth_scale`
//! factor (pixels per depth unit).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// J joints as `(x, y, depth)` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D(pub Vec<[f64; 3]>);

/// J joints as `(x, y)` pixel pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose2D(pub Vec<[f64; 2]>);

/// One depth value per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepthVector(pub Vec<f64>);

impl Pose3D {
    pub fn from_parts(joints2d: &Pose2D, depths: &DepthVector) -> Result<Self> {
        if joints2d.len() != depths.len() {
            return Err(Error::Dimension {
                context: "pose assembly",
                expected: joints2d.len(),
                actual: depths.len(),
            });
        }
        Ok(Pose3D(
            joints2d
                .0
                .iter()
                .zip(&depths.0)
                .map(|(p, &d)| [p[0], p[1], d])
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_2d(&self) -> Pose2D {
        Pose2D(self.0.iter().map(|p| [p[0], p[1]]).collect())
    }

    pub fn depths(&self) -> DepthVector {
        DepthVector(self.0.iter().map(|p| p[2]).collect())
    }

    /// Multiply every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Pose3D {
        Pose3D(
            self.0
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor, p[2] * factor])
                .collect(),
        )
    }
}

impl Pose2D {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl DepthVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub name: String,
    pub parent: usize,
    pub child: usize,
}

/// A set of bones whose length-to-canonical ratios should agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneGroup {
    pub name: String,
    pub bones: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricPair {
    pub name: String,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HipJoints {
    pub left: usize,
    pub right: usize,
}

/// On-disk layout of a skeleton schema. Field order here fixes the schema hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    joint_names: Vec<String>,
    bones: Vec<Bone>,
    groups: Vec<BoneGroup>,
    canonical_lengths: Vec<f64>,
    #[serde(default = "default_length_unit")]
    length_unit: String,
    symmetric_pairs: Vec<SymmetricPair>,
    root: usize,
    neck: usize,
    hips: HipJoints,
    head_bone: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    avg_sum_len: Option<f64>,
}

fn default_length_unit() -> String {
    "px".to_string()
}

/// Validated skeleton geometry schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    file: SkeletonFile,
    mirror_map: Vec<usize>,
}

impl Skeleton {
    /// Default 16-joint skeleton (MPII joint order) with nominal lengths in millimetres.
    pub fn mpii16() -> Skeleton {
        Self::mpii16_with_lengths(&MPII16_NOMINAL_MM, "mm").expect("built-in skeleton is valid")
    }

    /// MPII-16 topology with caller-supplied canonical lengths (one per bone).
    pub fn mpii16_with_lengths(lengths: &[f64], unit: &str) -> Result<Skeleton> {
        let joint_names = MPII16_JOINTS.iter().map(|s| s.to_string()).collect();
        let bones = MPII16_BONES
            .iter()
            .map(|&(name, parent, child)| Bone {
                name: name.to_string(),
                parent,
                child,
            })
            .collect();
        let groups = [
            ("arm", vec![10, 11, 13, 14]),
            ("leg", vec![1, 2, 4, 5]),
            ("shoulder", vec![9, 12]),
            ("hip", vec![0, 3]),
        ]
        .into_iter()
        .map(|(name, bones)| BoneGroup {
            name: name.to_string(),
            bones,
        })
        .collect();
        let symmetric_pairs = [
            ("upper_arm", 13, 10),
            ("lower_arm", 14, 11),
            ("upper_leg", 4, 1),
            ("lower_leg", 5, 2),
        ]
        .into_iter()
        .map(|(name, left, right)| SymmetricPair {
            name: name.to_string(),
            left,
            right,
        })
        .collect();
        Skeleton::from_file(SkeletonFile {
            joint_names,
            bones,
            groups,
            canonical_lengths: lengths.to_vec(),
            length_unit: unit.to_string(),
            symmetric_pairs,
            root: 6,
            neck: 8,
            hips: HipJoints { left: 3, right: 2 },
            head_bone: 8,
            avg_sum_len: None,
        })
    }

    /// Parse and validate a JSON schema. Errors carry the line of the offending field.
    pub fn from_json_str(text: &str) -> Result<Skeleton> {
        let file: SkeletonFile = serde_json::from_str(text).map_err(|e| Error::Schema {
            line: Some(e.line()),
            message: e.to_string(),
        })?;
        Skeleton::from_file(file).map_err(|err| match err {
            Error::Schema {
                line: None,
                message,
            } => {
                let line = field_of(&message).and_then(|f| line_of_key(text, f));
                Error::Schema { line, message }
            }
            other => other,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Skeleton> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("skeleton serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn schema_hash(&self) -> String {
        let canonical = serde_json::to_string(&self.file).expect("skeleton serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn from_file(file: SkeletonFile) -> Result<Skeleton> {
        let j = file.joint_names.len();
        if j < 2 {
            return Err(Error::schema(format!(
                "joint_names: need at least 2 joints, got {j}"
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &file.joint_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::schema(format!(
                    "joint_names: duplicate joint '{name}'"
                )));
            }
        }
        for (i, bone) in file.bones.iter().enumerate() {
            if bone.parent >= j || bone.child >= j {
                return Err(Error::schema(format!(
                    "bones: bone {i} ('{}') endpoint out of range [0, {j})",
                    bone.name
                )));
            }
            if bone.parent == bone.child {
                return Err(Error::schema(format!(
                    "bones: bone {i} ('{}') is a self-loop",
                    bone.name
                )));
            }
        }
        let nb = file.bones.len();
        if nb == 0 {
            return Err(Error::schema("bones: skeleton has no bones"));
        }
        if file.canonical_lengths.len() != nb {
            return Err(Error::schema(format!(
                "canonical_lengths: expected {nb} entries, got {}",
                file.canonical_lengths.len()
            )));
        }
        if let Some((i, l)) = file
            .canonical_lengths
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::schema(format!(
                "canonical_lengths: entry {i} must be finite and > 0, got {l}"
            )));
        }
        let mut grouped = BTreeSet::new();
        for group in &file.groups {
            for &b in &group.bones {
                if b >= nb {
                    return Err(Error::schema(format!(
                        "groups: group '{}' references bone {b}, only {nb} bones",
                        group.name
                    )));
                }
                if !grouped.insert(b) {
                    return Err(Error::schema(format!(
                        "groups: bone {b} appears in more than one group"
                    )));
                }
            }
        }
        for pair in &file.symmetric_pairs {
            if pair.left >= nb || pair.right >= nb {
                return Err(Error::schema(format!(
                    "symmetric_pairs: pair '{}' references an invalid bone",
                    pair.name
                )));
            }
            if pair.left == pair.right {
                return Err(Error::schema(format!(
                    "symmetric_pairs: pair '{}' uses the same bone twice",
                    pair.name
                )));
            }
        }
        for (field, idx) in [
            ("root", file.root),
            ("neck", file.neck),
            ("hips", file.hips.left),
            ("hips", file.hips.right),
        ] {
            if idx >= j {
                return Err(Error::schema(format!(
                    "{field}: joint index {idx} out of range [0, {j})"
                )));
            }
        }
        if file.head_bone >= nb {
            return Err(Error::schema(format!(
                "head_bone: bone index {} out of range [0, {nb})",
                file.head_bone
            )));
        }
        if let Some(a) = file.avg_sum_len {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::schema(format!(
                    "avg_sum_len: must be finite and > 0, got {a}"
                )));
            }
        }
        let mirror_map = build_mirror_map(&file)?;
        Ok(Skeleton { file, mirror_map })
    }

    pub fn num_joints(&self) -> usize {
        self.file.joint_names.len()
    }

    pub fn num_bones(&self) -> usize {
        self.file.bones.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.file.joint_names
    }

    pub fn bones(&self) -> &[Bone] {
        &self.file.bones
    }

    pub fn groups(&self) -> &[BoneGroup] {
        &self.file.groups
    }

    pub fn canonical_lengths(&self) -> &[f64] {
        &self.file.canonical_lengths
    }

    pub fn length_unit(&self) -> &str {
        &self.file.length_unit
    }

    pub fn symmetric_pairs(&self) -> &[SymmetricPair] {
        &self.file.symmetric_pairs
    }

    pub fn root(&self) -> usize {
        self.file.root
    }

    pub fn neck(&self) -> usize {
        self.file.neck
    }

    pub fn hips(&self) -> HipJoints {
        self.file.hips
    }

    pub fn head_bone(&self) -> usize {
        self.file.head_bone
    }

    /// Total skeleton length used for scale normalization; defaults to the canonical sum.
    pub fn avg_sum_len(&self) -> f64 {
        self.file
            .avg_sum_len
            .unwrap_or_else(|| self.file.canonical_lengths.iter().sum())
    }

    pub fn with_avg_sum_len(mut self, value: f64) -> Result<Skeleton> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::schema(format!(
                "avg_sum_len: must be finite and > 0, got {value}"
            )));
        }
        self.file.avg_sum_len = Some(value);
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<BoneGroup>) -> Result<Skeleton> {
        self.file.groups = groups;
        Skeleton::from_file(self.file)
    }

    /// Joint index that a joint maps to under left/right mirroring.
    pub fn mirror_joint(&self, joint: usize) -> usize {
        self.mirror_map[joint]
    }

    /// Bone indices that belong to no group.
    pub fn ungrouped_bones(&self) -> Vec<usize> {
        let grouped: BTreeSet<usize> = self
            .file
            .groups
            .iter()
            .flat_map(|g| g.bones.iter().copied())
            .collect();
        (0..self.num_bones())
            .filter(|b| !grouped.contains(b))
            .collect()
    }

    pub fn check_pose3d(&self, pose: &Pose3D) -> Result<()> {
        if pose.len() != self.num_joints() {
            return Err(Error::Dimension {
                context: "pose joints",
                expected: self.num_joints(),
                actual: pose.len(),
            });
        }
        Ok(())
    }

    pub fn check_pose2d(&self, pose: &Pose2D) -> Result<()> {
        if pose.len() != self.num_joints() {
            return Err(Error::Dimension {
                context: "2D pose joints",
                expected: self.num_joints(),
                actual: pose.len(),
            });
        }
        Ok(())
    }

    fn bone(&self, bone: usize) -> Result<&Bone> {
        self.file.bones.get(bone).ok_or_else(|| {
            Error::schema(format!(
                "bone index {bone} out of range [0, {})",
                self.num_bones()
            ))
        })
    }
}

fn build_mirror_map(file: &SkeletonFile) -> Result<Vec<usize>> {
    let j = file.joint_names.len();
    let mut map: Vec<Option<usize>> = vec![None; j];
    let mut assign = |a: usize, b: usize, pair: &str| -> Result<()> {
        for (from, to) in [(a, b), (b, a)] {
            match map[from] {
                Some(existing) if existing != to => {
                    return Err(Error::schema(format!(
                        "symmetric_pairs: pair '{pair}' maps joint {from} inconsistently"
                    )))
                }
                _ => map[from] = Some(to),
            }
        }
        Ok(())
    };
    for pair in &file.symmetric_pairs {
        let left = &file.bones[pair.left];
        let right = &file.bones[pair.right];
        assign(left.parent, right.parent, &pair.name)?;
        assign(left.child, right.child, &pair.name)?;
    }
    Ok(map
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.unwrap_or(i))
        .collect())
}

/// Leading `field:` of a validation message, used to locate it in the source text.
fn field_of(message: &str) -> Option<&str> {
    message.split_once(':').map(|(f, _)| f.trim())
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|line| line.contains(&needle))
        .map(|i| i + 1)
}

pub const MPII16_JOINTS: [&str; 16] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

/// `(name, parent, child)` for the 15 MPII-16 bones.
pub const MPII16_BONES: [(&str, usize, usize); 15] = [
    ("r_hip", 6, 2),
    ("r_upper_leg", 2, 1),
    ("r_lower_leg", 1, 0),
    ("l_hip", 6, 3),
    ("l_upper_leg", 3, 4),
    ("l_lower_leg", 4, 5),
    ("lower_spine", 6, 7),
    ("upper_spine", 7, 8),
    ("head", 8, 9),
    ("r_shoulder", 7, 12),
    ("r_upper_arm", 12, 11),
    ("r_lower_arm", 11, 10),
    ("l_shoulder", 7, 13),
    ("l_upper_arm", 13, 14),
    ("l_lower_arm", 14, 15),
];

/// Nominal adult bone lengths in millimetres, indexed like [`MPII16_BONES`].
pub const MPII16_NOMINAL_MM: [f64; 15] = [
    130.0, 450.0, 440.0, 130.0, 450.0, 440.0, 500.0, 100.0, 200.0, 160.0, 280.0, 250.0, 160.0,
    280.0, 250.0,
];

/// Euclidean length of `bone` with depth pre-multiplied by `depth_scale`.
pub fn bone_length(
    pose: &Pose3D,
    bone: usize,
    skeleton: &Skeleton,
    depth_scale: f64,
) -> Result<f64> {
    let b = skeleton.bone(bone)?;
    skeleton.check_pose3d(pose)?;
    Ok(segment_length(
        &pose.0[b.parent],
        &pose.0[b.child],
        depth_scale,
    ))
}

pub(crate) fn segment_length(a: &[f64; 3], b: &[f64; 3], depth_scale: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dd = (a[2] - b[2]) * depth_scale;
    (dx * dx + dy * dy + dd * dd).sqrt()
}

pub fn sum_bone_lengths(pose: &Pose3D, skeleton: &Skeleton, depth_scale: f64) -> Result<f64> {
    skeleton.check_pose3d(pose)?;
    Ok(skeleton
        .bones()
        .iter()
        .map(|b| segment_length(&pose.0[b.parent], &pose.0[b.child], depth_scale))
        .sum())
}

/// Root-centre `pred`, rescale so its bone lengths sum to `avg_sum_len`, then
/// place the root at `gt_root`.
pub fn align_and_rescale(
    pred: &Pose3D,
    gt_root: [f64; 3],
    avg_sum_len: f64,
    skeleton: &Skeleton,
) -> Result<Pose3D> {
    if !(avg_sum_len.is_finite() && avg_sum_len > 0.0) {
        return Err(Error::DegeneratePose(format!(
            "average sum length must be positive, got {avg_sum_len}"
        )));
    }
    let sum = sum_bone_lengths(pred, skeleton, 1.0)?;
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::DegeneratePose(format!(
            "predicted skeleton has total bone length {sum}"
        )));
    }
    let factor = avg_sum_len / sum;
    let root = pred.0[skeleton.root()];
    Ok(Pose3D(
        pred.0
            .iter()
            .map(|p| {
                [
                    (p[0] - root[0]) * factor + gt_root[0],
                    (p[1] - root[1]) * factor + gt_root[1],
                    (p[2] - root[2]) * factor + gt_root[2],
                ]
            })
            .collect(),
    ))
}

/// Move pelvis and both hips toward the neck by `ratio` of the way.
pub fn shift_pelvis_toward_neck(pose: &Pose3D, ratio: f64, skeleton: &Skeleton) -> Result<Pose3D> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "pelvis shift ratio must be in [0, 1], got {ratio}"
        )));
    }
    skeleton.check_pose3d(pose)?;
    let neck = pose.0[skeleton.neck()];
    let hips = skeleton.hips();
    let mut out = pose.clone();
    let mut moved = BTreeSet::new();
    for joint in [skeleton.root(), hips.left, hips.right] {
        if !moved.insert(joint) {
            continue;
        }
        let p = pose.0[joint];
        out.0[joint] = [
            p[0] + ratio * (neck[0] - p[0]),
            p[1] + ratio * (neck[1] - p[1]),
            p[2] + ratio * (neck[2] - p[2]),
        ];
    }
    Ok(out)
}

/// Reflect across the vertical line `x = axis_x` and swap left/right joints.
pub fn mirror_pose(pose: &Pose3D, axis_x: f64, skeleton: &Skeleton) -> Result<Pose3D> {
    skeleton.check_pose3d(pose)?;
    Ok(Pose3D(
        (0..pose.len())
            .map(|j| {
                let src = pose.0[skeleton.mirror_joint(j)];
                [2.0 * axis_x - src[0], src[1], src[2]]
            })
            .collect(),
    ))
}
