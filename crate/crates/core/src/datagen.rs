//! Synthetic two-domain skeleton data.
//!
//! Poses are articulated in millimetres (X right, Y down, Z away from the
//! camera), rotated, then projected with a weak-perspective scale `pixels_per_mm`.
//! Depth is stored root-relative in pixels, so 2D and depth share a unit.
//!
//! Every subject scales each bone group by one factor, which keeps the
//! within-group length ratios exact. Torso and head bones get independent jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ArchiveEntry, DatasetFile, DatasetHeader, DatasetKind, Units};
use crate::error::{Error, Result};
use crate::sample::{Evidence, PoseSample, Supervision};
use crate::skeleton::{DepthVector, Pose2D, Pose3D, Skeleton, MPII16_NOMINAL_MM};

/// Inclusive `[lo, hi]` range in degrees.
pub type DegRange = [f64; 2];

/// Pose, subject and detector distribution of one capture environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPreset {
    pub name: String,
    pub scale_range: [f64; 2],
    /// Relative per-group length jitter around the subject scale.
    pub group_jitter: f64,
    /// Relative per-bone jitter for torso and head bones.
    pub torso_jitter: f64,
    pub yaw: DegRange,
    pub lean_forward: DegRange,
    pub lean_side: DegRange,
    pub head_tilt: DegRange,
    pub arm_swing: DegRange,
    pub arm_abduction: DegRange,
    pub elbow_bend: DegRange,
    pub leg_swing: DegRange,
    pub leg_abduction: DegRange,
    pub knee_bend: DegRange,
    /// Mean of the appearance feature vector.
    pub appearance_mean: Vec<f64>,
    pub appearance_std: f64,
    /// Row-major 2x2 systematic detector distortion applied to root-relative joints.
    pub detector_warp: [f64; 4],
    pub detector_noise_px: f64,
}

impl DomainPreset {
    /// Controlled capture: narrow pose ranges, clean detections.
    pub fn in_lab() -> Self {
        DomainPreset {
            name: "lab".into(),
            scale_range: [0.92, 1.08],
            group_jitter: 0.06,
            torso_jitter: 0.12,
            yaw: [-30.0, 30.0],
            lean_forward: [-5.0, 10.0],
            lean_side: [-5.0, 5.0],
            head_tilt: [-10.0, 10.0],
            arm_swing: [-30.0, 45.0],
            arm_abduction: [5.0, 40.0],
            elbow_bend: [0.0, 60.0],
            leg_swing: [-20.0, 30.0],
            leg_abduction: [0.0, 15.0],
            knee_bend: [0.0, 40.0],
            appearance_mean: vec![1.0, 0.5, -0.5, 0.0],
            appearance_std: 0.2,
            detector_warp: [0.0; 4],
            detector_noise_px: 0.5,
        }
    }

    /// Unconstrained capture: wider pose ranges, other subjects, biased detections.
    pub fn in_the_wild() -> Self {
        DomainPreset {
            name: "wild".into(),
            scale_range: [0.85, 1.15],
            group_jitter: 0.1,
            torso_jitter: 0.15,
            yaw: [-80.0, 80.0],
            lean_forward: [-15.0, 35.0],
            lean_side: [-15.0, 15.0],
            head_tilt: [-20.0, 20.0],
            arm_swing: [-60.0, 120.0],
            arm_abduction: [0.0, 80.0],
            elbow_bend: [0.0, 120.0],
            leg_swing: [-40.0, 80.0],
            leg_abduction: [0.0, 35.0],
            knee_bend: [0.0, 100.0],
            appearance_mean: vec![-0.5, 1.0, 0.5, -1.0],
            appearance_std: 0.2,
            detector_warp: [0.08, 0.04, -0.04, 0.08],
            detector_noise_px: 0.5,
        }
    }

    fn angle_ranges(&self) -> [(&'static str, DegRange); 10] {
        [
            ("yaw", self.yaw),
            ("lean_forward", self.lean_forward),
            ("lean_side", self.lean_side),
            ("head_tilt", self.head_tilt),
            ("arm_swing", self.arm_swing),
            ("arm_abduction", self.arm_abduction),
            ("elbow_bend", self.elbow_bend),
            ("leg_swing", self.leg_swing),
            ("leg_abduction", self.leg_abduction),
            ("knee_bend", self.knee_bend),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("domain '{}': {m}", self.name)));
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return err(format!(
                "scale range [{lo}, {hi}] must be positive and ordered"
            ));
        }
        for (name, v) in [
            ("group_jitter", self.group_jitter),
            ("torso_jitter", self.torso_jitter),
        ] {
            if !(v.is_finite() && (0.0..0.5).contains(&v)) {
                return err(format!("{name} must be in [0, 0.5), got {v}"));
            }
        }
        for (name, [lo, hi]) in self.angle_ranges() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return err(format!("{name} range [{lo}, {hi}] is empty"));
            }
            if lo < -180.0 || hi > 180.0 {
                return err(format!("{name} range [{lo}, {hi}] exceeds [-180, 180]"));
            }
        }
        for (name, [lo, hi]) in [
            ("elbow_bend", self.elbow_bend),
            ("knee_bend", self.knee_bend),
        ] {
            // bends at or past 170 degrees fold the lower limb back through the upper one
            if lo < 0.0 || hi >= 170.0 {
                return err(format!(
                    "{name} range [{lo}, {hi}] folds the limb onto itself (allowed [0, 170))"
                ));
            }
        }
        for (name, [lo, hi]) in [
            ("arm_abduction", self.arm_abduction),
            ("leg_abduction", self.leg_abduction),
        ] {
            if lo < -10.0 || hi > 120.0 {
                return err(format!(
                    "{name} range [{lo}, {hi}] crosses the body midline (allowed [-10, 120])"
                ));
            }
        }
        if self.appearance_mean.is_empty() {
            return err("appearance_mean must not be empty".into());
        }
        if !(self.appearance_std.is_finite() && self.appearance_std >= 0.0) {
            return err(format!(
                "appearance_std must be >= 0, got {}",
                self.appearance_std
            ));
        }
        if !(self.detector_noise_px.is_finite() && self.detector_noise_px >= 0.0) {
            return err(format!(
                "detector_noise_px must be >= 0, got {}",
                self.detector_noise_px
            ));
        }
        if self.detector_warp.iter().any(|v| !v.is_finite()) {
            return err("detector_warp must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Fully labelled domain.
    pub lab: DomainPreset,
    /// Weakly labelled domain.
    pub wild: DomainPreset,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub train_samples_per_subject: usize,
    pub test_samples_per_subject: usize,
    /// Weak-perspective projection scale.
    pub pixels_per_mm: f64,
    pub field_size: f64,
    /// Std of Gaussian noise added to depth labels, in pixels.
    pub depth_noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            lab: DomainPreset::in_lab(),
            wild: DomainPreset::in_the_wild(),
            train_subjects: 5,
            test_subjects: 2,
            train_samples_per_subject: 400,
            test_samples_per_subject: 100,
            pixels_per_mm: 0.1,
            field_size: 256.0,
            depth_noise_std: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad generator config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.lab.validate()?;
        self.wild.validate()?;
        if self.lab.appearance_mean.len() != self.wild.appearance_mean.len() {
            return Err(Error::Config(
                "both domains need appearance vectors of the same length".into(),
            ));
        }
        if self.train_subjects == 0 || self.test_subjects == 0 {
            return Err(Error::Config("subject counts must be >= 1".into()));
        }
        if self.train_samples_per_subject == 0 || self.test_samples_per_subject == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if !(self.pixels_per_mm.is_finite() && self.pixels_per_mm > 0.0) {
            return Err(Error::Config(format!(
                "pixels_per_mm must be > 0, got {}",
                self.pixels_per_mm
            )));
        }
        if !(self.field_size.is_finite() && self.field_size > 0.0) {
            return Err(Error::Config(format!(
                "field_size must be > 0, got {}",
                self.field_size
            )));
        }
        if !(self.depth_noise_std.is_finite() && self.depth_noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "depth_noise_std must be >= 0, got {}",
                self.depth_noise_std
            )));
        }
        Ok(())
    }
}

/// Joint angles of one articulated pose, in degrees.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Articulation {
    pub yaw: f64,
    pub lean_forward: f64,
    pub lean_side: f64,
    pub head_tilt: f64,
    /// `[right, left]` for each limb parameter.
    pub arm_swing: [f64; 2],
    pub arm_abduction: [f64; 2],
    pub elbow_bend: [f64; 2],
    pub leg_swing: [f64; 2],
    pub leg_abduction: [f64; 2],
    pub knee_bend: [f64; 2],
}

fn unit_dir(side: f64, swing_deg: f64, abduction_deg: f64) -> [f64; 3] {
    let (st, ct) = swing_deg.to_radians().sin_cos();
    let (sp, cp) = abduction_deg.to_radians().sin_cos();
    // straight down is +Y; positive swing brings the limb toward the camera (-Z)
    [side * sp, cp * ct, -cp * st]
}

fn add(a: [f64; 3], d: [f64; 3], len: f64) -> [f64; 3] {
    [a[0] + d[0] * len, a[1] + d[1] * len, a[2] + d[2] * len]
}

/// Build an MPII-16 pose (millimetres, pelvis at the origin) from bone lengths and angles.
pub fn articulate(lengths: &[f64], a: &Articulation) -> Pose3D {
    assert_eq!(lengths.len(), 15, "articulate expects MPII-16 bone lengths");
    let mut j = [[0.0f64; 3]; 16];
    let up = {
        let (sf, cf) = a.lean_forward.to_radians().sin_cos();
        let (ss, cs) = a.lean_side.to_radians().sin_cos();
        [ss * cf, -cs * cf, -sf]
    };
    let head_up = {
        let (sf, cf) = (a.lean_forward + a.head_tilt).to_radians().sin_cos();
        let (ss, cs) = a.lean_side.to_radians().sin_cos();
        [ss * cf, -cs * cf, -sf]
    };
    j[6] = [0.0; 3];
    j[7] = add(j[6], up, lengths[6]);
    j[8] = add(j[7], up, lengths[7]);
    j[9] = add(j[8], head_up, lengths[8]);
    // person faces the camera: their right side is image left (-X)
    for (k, side) in [(0usize, -1.0f64), (1, 1.0)] {
        let (hip, knee, ankle, b_hip, b_up, b_low) = if k == 0 {
            (2, 1, 0, 0, 1, 2)
        } else {
            (3, 4, 5, 3, 4, 5)
        };
        j[hip] = add(j[6], [side, 0.0, 0.0], lengths[b_hip]);
        let thigh = unit_dir(side, a.leg_swing[k], a.leg_abduction[k]);
        j[knee] = add(j[hip], thigh, lengths[b_up]);
        let shin = unit_dir(side, a.leg_swing[k] - a.knee_bend[k], a.leg_abduction[k]);
        j[ankle] = add(j[knee], shin, lengths[b_low]);

        let (shoulder, elbow, wrist, b_sh, b_ua, b_la) = if k == 0 {
            (12, 11, 10, 9, 10, 11)
        } else {
            (13, 14, 15, 12, 13, 14)
        };
        j[shoulder] = add(j[7], [side, 0.0, 0.0], lengths[b_sh]);
        let upper = unit_dir(side, a.arm_swing[k], a.arm_abduction[k]);
        j[elbow] = add(j[shoulder], upper, lengths[b_ua]);
        let lower = unit_dir(side, a.arm_swing[k] + a.elbow_bend[k], a.arm_abduction[k]);
        j[wrist] = add(j[elbow], lower, lengths[b_la]);
    }
    if a.yaw != 0.0 {
        let (s, c) = a.yaw.to_radians().sin_cos();
        for p in j.iter_mut() {
            *p = [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]];
        }
    }
    Pose3D(j.to_vec())
}

/// Symmetric standing pose built from the skeleton's canonical lengths
/// (MPII-16 topology), pelvis at the origin, left/right mirror images across x = 0.
pub fn rest_pose(skeleton: &Skeleton) -> Pose3D {
    let a = Articulation {
        arm_abduction: [10.0, 10.0],
        elbow_bend: [15.0, 15.0],
        knee_bend: [5.0, 5.0],
        ..Articulation::default()
    };
    articulate(skeleton.canonical_lengths(), &a)
}

fn sample_range(rng: &mut ChaCha8Rng, [lo, hi]: DegRange) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn sample_articulation(rng: &mut ChaCha8Rng, p: &DomainPreset) -> Articulation {
    let mut pair = |r: DegRange| [sample_range(rng, r), sample_range(rng, r)];
    let arm_swing = pair(p.arm_swing);
    let arm_abduction = pair(p.arm_abduction);
    let elbow_bend = pair(p.elbow_bend);
    let leg_swing = pair(p.leg_swing);
    let leg_abduction = pair(p.leg_abduction);
    let knee_bend = pair(p.knee_bend);
    Articulation {
        yaw: sample_range(rng, p.yaw),
        lean_forward: sample_range(rng, p.lean_forward),
        lean_side: sample_range(rng, p.lean_side),
        head_tilt: sample_range(rng, p.head_tilt),
        arm_swing,
        arm_abduction,
        elbow_bend,
        leg_swing,
        leg_abduction,
        knee_bend,
    }
}

/// Per-subject bone lengths in millimetres.
fn sample_subject(rng: &mut ChaCha8Rng, preset: &DomainPreset, skeleton: &Skeleton) -> Vec<f64> {
    let scale = sample_range(rng, preset.scale_range);
    let mut factor = vec![f64::NAN; skeleton.num_bones()];
    for group in skeleton.groups() {
        let f = scale * (1.0 + rng.random_range(-1.0..=1.0) * preset.group_jitter);
        for &b in &group.bones {
            factor[b] = f;
        }
    }
    for b in skeleton.ungrouped_bones() {
        factor[b] = scale * (1.0 + rng.random_range(-1.0..=1.0) * preset.torso_jitter);
    }
    MPII16_NOMINAL_MM
        .iter()
        .zip(factor)
        .map(|(l, f)| l * f)
        .collect()
}

/// One generated sample before it is split into labelled/unlabelled records.
#[derive(Debug, Clone)]
pub struct GeneratedPose {
    pub id: String,
    pub subject: String,
    pub split: &'static str,
    /// Projected 2D joints (pixels).
    pub joints2d: Pose2D,
    /// Root-relative depth in pixels (noise-free).
    pub depths: DepthVector,
    pub evidence: Evidence,
}

/// Everything `generate` produces.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub skeleton: Skeleton,
    pub dataset3d: DatasetFile,
    pub dataset2d: DatasetFile,
    pub archive: Vec<ArchiveEntry>,
    pub archive_header: DatasetHeader,
}

struct DomainOutput {
    poses: Vec<GeneratedPose>,
    train_sum_lengths_mm: Vec<f64>,
}

fn generate_domain(
    rng: &mut ChaCha8Rng,
    config: &GeneratorConfig,
    preset: &DomainPreset,
    skeleton: &Skeleton,
) -> DomainOutput {
    let f = config.pixels_per_mm;
    let centre = config.field_size / 2.0;
    let mut poses = Vec::new();
    let mut train_sum_lengths_mm = Vec::new();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let splits = [
        (
            "train",
            config.train_subjects,
            config.train_samples_per_subject,
        ),
        (
            "test",
            config.test_subjects,
            config.test_samples_per_subject,
        ),
    ];
    for (split, subjects, per_subject) in splits {
        for s in 0..subjects {
            let lengths = sample_subject(rng, preset, skeleton);
            if split == "train" {
                train_sum_lengths_mm.push(lengths.iter().sum());
            }
            let subject = format!("{}-{split}-s{s}", preset.name);
            for i in 0..per_subject {
                let art = sample_articulation(rng, preset);
                let pose = articulate(&lengths, &art);
                let shift = [rng.random_range(-8.0..=8.0), rng.random_range(-8.0..=8.0)];
                // pelvis sits slightly below the field centre
                let origin = [
                    centre + shift[0],
                    centre + 0.04 * config.field_size + shift[1],
                ];
                let joints2d = Pose2D(
                    pose.0
                        .iter()
                        .map(|p| [origin[0] + f * p[0], origin[1] + f * p[1]])
                        .collect(),
                );
                let root_z = pose.0[skeleton.root()][2];
                let depths = DepthVector(pose.0.iter().map(|p| f * (p[2] - root_z)).collect());
                let root2d = joints2d.0[skeleton.root()];
                let w = preset.detector_warp;
                let observed2d = Pose2D(
                    joints2d
                        .0
                        .iter()
                        .map(|p| {
                            let (rx, ry) = (p[0] - root2d[0], p[1] - root2d[1]);
                            [
                                p[0] + w[0] * rx
                                    + w[1] * ry
                                    + preset.detector_noise_px * noise.sample(rng),
                                p[1] + w[2] * rx
                                    + w[3] * ry
                                    + preset.detector_noise_px * noise.sample(rng),
                            ]
                        })
                        .collect(),
                );
                let appearance = preset
                    .appearance_mean
                    .iter()
                    .map(|m| m + preset.appearance_std * noise.sample(rng))
                    .collect();
                poses.push(GeneratedPose {
                    id: format!("{subject}-{i:05}"),
                    subject: subject.clone(),
                    split,
                    joints2d,
                    depths,
                    evidence: Evidence {
                        observed2d,
                        appearance,
                    },
                });
            }
        }
    }
    DomainOutput {
        poses,
        train_sum_lengths_mm,
    }
}

/// Generate the labelled (lab) set, the 2D-only (wild) set, and the wild depth archive.
pub fn generate(config: &GeneratorConfig) -> Result<GeneratedData> {
    config.validate()?;
    let topology = Skeleton::mpii16();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lab = generate_domain(&mut rng, config, &config.lab, &topology);
    let wild = generate_domain(&mut rng, config, &config.wild, &topology);

    let f = config.pixels_per_mm;
    let canonical_px: Vec<f64> = MPII16_NOMINAL_MM.iter().map(|l| l * f).collect();
    let avg_sum_mm =
        lab.train_sum_lengths_mm.iter().sum::<f64>() / lab.train_sum_lengths_mm.len() as f64;
    let skeleton =
        Skeleton::mpii16_with_lengths(&canonical_px, "px")?.with_avg_sum_len(avg_sum_mm * f)?;

    let header = |kind| DatasetHeader {
        format: DatasetHeader::FORMAT.to_string(),
        version: DatasetHeader::VERSION,
        kind,
        schema_hash: skeleton.schema_hash(),
        units: Units {
            xy: "px".into(),
            depth: "px".into(),
            pixels_per_mm: f,
        },
        field_size: config.field_size,
    };

    let depth_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records3d = Vec::with_capacity(lab.poses.len());
    for g in lab.poses {
        let depths = if config.depth_noise_std > 0.0 {
            DepthVector(
                g.depths
                    .0
                    .iter()
                    .map(|d| d + config.depth_noise_std * depth_noise.sample(&mut rng))
                    .collect(),
            )
        } else {
            g.depths
        };
        records3d.push(PoseSample {
            id: g.id,
            supervision: Supervision::Full3d,
            joints2d: g.joints2d,
            depths: Some(depths),
            source: format!("lab/{}", g.split),
            evidence: Some(g.evidence),
        });
    }
    let mut records2d = Vec::with_capacity(wild.poses.len());
    let mut archive = Vec::with_capacity(wild.poses.len());
    for g in wild.poses {
        archive.push(ArchiveEntry {
            id: g.id.clone(),
            depths: g.depths,
        });
        records2d.push(PoseSample {
            id: g.id,
            supervision: Supervision::Weak2d,
            joints2d: g.joints2d,
            depths: None,
            source: format!("wild/{}", g.split),
            evidence: Some(g.evidence),
        });
    }
    Ok(GeneratedData {
        dataset3d: DatasetFile {
            header: header(DatasetKind::Full3d),
            records: records3d,
        },
        dataset2d: DatasetFile {
            header: header(DatasetKind::Weak2d),
            records: records2d,
        },
        archive,
        archive_header: header(DatasetKind::Archive),
        skeleton,
    })
}
