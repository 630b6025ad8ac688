//! Evaluation protocol: MPJPE, PCK, AUC, PCKh@0.5 and the left/right symmetry metric.
//!
//! Threshold comparisons are strict (`error < threshold`). The AUC curve is
//! sampled on 31 evenly spaced thresholds over 0..=150 mm; its 0 mm point counts
//! only exact (zero-error) joints as correct.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::PoseSample;
use crate::skeleton::{
    align_and_rescale, segment_length, shift_pelvis_toward_neck, Pose2D, Pose3D, Skeleton,
};

/// Field size the symmetry metric normalizes 2D coordinates into.
pub const SYMMETRY_FIELD: f64 = 256.0;
pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const PCKH_FRACTION: f64 = 0.5;

pub fn auc_thresholds() -> Vec<f64> {
    (0..31).map(|i| i as f64 * 5.0).collect()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = CompensatedSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s.value() / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootAlignment {
    /// Subtract each pose's root depth from its depths.
    Depth,
    /// Subtract each pose's root joint from all joints.
    Full,
}

fn check_pair(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            context: "metric poses",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if root >= gt.len() {
        return Err(Error::Dimension {
            context: "metric root joint",
            expected: gt.len(),
            actual: root,
        });
    }
    Ok(())
}

/// Per-joint 3D distances after aligning both poses at their roots.
pub fn joint_errors(
    pred: &Pose3D,
    gt: &Pose3D,
    root: usize,
    alignment: RootAlignment,
) -> Result<Vec<f64>> {
    check_pair(pred, gt, root)?;
    let (pr, gr) = (pred.0[root], gt.0[root]);
    let offset = |r: [f64; 3]| match alignment {
        RootAlignment::Depth => [0.0, 0.0, r[2]],
        RootAlignment::Full => r,
    };
    let (po, go) = (offset(pr), offset(gr));
    Ok(pred
        .0
        .iter()
        .zip(&gt.0)
        .map(|(p, g)| {
            let d: [f64; 3] = std::array::from_fn(|k| (p[k] - po[k]) - (g[k] - go[k]));
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect())
}

/// Mean per-joint position error after root-depth alignment.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<f64> {
    Ok(mean(joint_errors(pred, gt, root, RootAlignment::Depth)?))
}

pub fn pck_from_errors(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    100.0 * hits as f64 / errors.len() as f64
}

/// Percentage of joints with error strictly below `threshold`.
pub fn pck(
    pred: &Pose3D,
    gt: &Pose3D,
    root: usize,
    threshold: f64,
    alignment: RootAlignment,
) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "PCK threshold must be > 0, got {threshold}"
        )));
    }
    Ok(pck_from_errors(
        &joint_errors(pred, gt, root, alignment)?,
        threshold,
    ))
}

/// PCK curve (fractions in [0, 1]) over the AUC threshold grid.
pub fn pck_curve(errors: &[f64]) -> Vec<f64> {
    auc_thresholds()
        .into_iter()
        .map(|t| {
            if errors.is_empty() {
                return 0.0;
            }
            let hits = errors
                .iter()
                .filter(|&&e| if t == 0.0 { e <= 0.0 } else { e < t })
                .count();
            hits as f64 / errors.len() as f64
        })
        .collect()
}

pub fn auc_from_errors(errors: &[f64]) -> f64 {
    let curve = pck_curve(errors);
    assert!(
        curve.windows(2).all(|w| w[0] <= w[1]),
        "PCK curve must be non-decreasing"
    );
    mean(curve)
}

/// Area under the PCK-vs-threshold curve for a set of poses.
pub fn auc(
    pred_set: &[Pose3D],
    gt_set: &[Pose3D],
    root: usize,
    alignment: RootAlignment,
) -> Result<f64> {
    if pred_set.is_empty() || pred_set.len() != gt_set.len() {
        return Err(Error::Dimension {
            context: "AUC pose sets",
            expected: gt_set.len().max(1),
            actual: pred_set.len(),
        });
    }
    let mut errors = Vec::new();
    for (p, g) in pred_set.iter().zip(gt_set) {
        errors.extend(joint_errors(p, g, root, alignment)?);
    }
    Ok(auc_from_errors(&errors))
}

/// Percentage of 2D joints within half the ground-truth head-bone length.
pub fn pckh(pred2d: &Pose2D, gt2d: &Pose2D, skeleton: &Skeleton) -> Result<f64> {
    skeleton.check_pose2d(pred2d)?;
    skeleton.check_pose2d(gt2d)?;
    let head = &skeleton.bones()[skeleton.head_bone()];
    let (a, b) = (gt2d.0[head.parent], gt2d.0[head.child]);
    let head_len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    if !(head_len > 0.0) {
        return Err(Error::DegeneratePose(
            "ground-truth head segment has zero length".into(),
        ));
    }
    let errors: Vec<f64> = pred2d
        .0
        .iter()
        .zip(&gt2d.0)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .collect();
    Ok(pck_from_errors(&errors, PCKH_FRACTION * head_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryTerm {
    pub name: String,
    pub difference: f64,
}

/// `| |left bone| - |right bone| |` per symmetric pair, after scaling all coordinates
/// (depth included) by `256 / field_size`.
pub fn symmetry_metric(
    pose: &Pose3D,
    skeleton: &Skeleton,
    field_size: f64,
) -> Result<Vec<SymmetryTerm>> {
    if !(field_size.is_finite() && field_size > 0.0) {
        return Err(Error::Config(format!(
            "field size must be > 0, got {field_size}"
        )));
    }
    skeleton.check_pose3d(pose)?;
    let scale = SYMMETRY_FIELD / field_size;
    let scaled = if scale == 1.0 {
        pose.clone()
    } else {
        pose.scaled(scale)
    };
    Ok(symmetry_terms(&scaled, skeleton))
}

fn symmetry_terms(pose: &Pose3D, skeleton: &Skeleton) -> Vec<SymmetryTerm> {
    let len = |b: usize| {
        let bone = &skeleton.bones()[b];
        segment_length(&pose.0[bone.parent], &pose.0[bone.child], 1.0)
    };
    skeleton
        .symmetric_pairs()
        .iter()
        .map(|p| SymmetryTerm {
            name: p.name.clone(),
            difference: (len(p.left) - len(p.right)).abs(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: &'static str,
    /// Root alignment used for PCK and AUC. MPJPE always aligns root depth.
    pub alignment: RootAlignment,
    /// Rescale predictions to the skeleton's average total length before mm metrics.
    pub rescale: bool,
    /// Move pelvis and hips of predictions toward the neck by this ratio.
    pub pelvis_shift: Option<f64>,
    pub pck_threshold_mm: f64,
}

impl Protocol {
    pub fn h36m() -> Self {
        Protocol {
            name: "h36m",
            alignment: RootAlignment::Depth,
            rescale: true,
            pelvis_shift: None,
            pck_threshold_mm: PCK_THRESHOLD_MM,
        }
    }

    pub fn mpi_inf_3dhp() -> Self {
        Protocol {
            name: "3dhp",
            alignment: RootAlignment::Full,
            rescale: false,
            pelvis_shift: Some(0.2),
            pck_threshold_mm: PCK_THRESHOLD_MM,
        }
    }

    /// Known global scale, no post-processing; the symmetry-focused setting.
    pub fn symmetry() -> Self {
        Protocol {
            name: "sym",
            alignment: RootAlignment::Depth,
            rescale: false,
            pelvis_shift: None,
            pck_threshold_mm: PCK_THRESHOLD_MM,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "h36m" => Ok(Self::h36m()),
            "3dhp" => Ok(Self::mpi_inf_3dhp()),
            "sym" => Ok(Self::symmetry()),
            other => Err(Error::Config(format!(
                "unknown protocol '{other}' (expected h36m, 3dhp or sym)"
            ))),
        }
    }
}

/// Frame of the evaluated data: pixel coordinates plus the pixel/mm conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpace {
    pub pixels_per_mm: f64,
    pub field_size: f64,
}

/// Per-sample inputs and outputs of [`evaluate`], enough to recompute every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub mpjpe_mm: f64,
    pub pck: f64,
    pub auc: f64,
    pub pckh05: f64,
    pub symmetry_px: Vec<f64>,
    pub symmetry_mm: Vec<f64>,
    /// Post-processed prediction in mm.
    pub pred_mm: Vec<[f64; 3]>,
    pub gt_mm: Vec<[f64; 3]>,
    /// Raw prediction in the pixel frame.
    pub pred_px: Vec<[f64; 3]>,
    pub gt2d_px: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub alignment: RootAlignment,
    pub rescale: bool,
    pub pelvis_shift: Option<f64>,
    pub samples: usize,
    pub excluded: usize,
    pub excluded_samples: Vec<(String, String)>,
    pub mpjpe_mm: f64,
    pub mpjpe_per_joint_mm: Vec<f64>,
    pub pck: f64,
    pub pck_threshold_mm: f64,
    pub auc: f64,
    pub auc_thresholds_mm: Vec<f64>,
    pub pckh05: f64,
    pub symmetry_field: f64,
    pub field_size: f64,
    pub symmetry_pairs: Vec<String>,
    /// Mean symmetric-bone difference in 256-normalized pixels.
    pub symmetry_px: Vec<f64>,
    /// Mean symmetric-bone difference in millimetres.
    pub symmetry_mm: Vec<f64>,
}

fn evaluate_one(
    sample: &PoseSample,
    pred_px: &Pose3D,
    skeleton: &Skeleton,
    protocol: &Protocol,
    space: EvalSpace,
) -> Result<SampleResult> {
    sample.validate(skeleton)?;
    skeleton.check_pose3d(pred_px)?;
    if !pred_px.is_finite() {
        return Err(Error::DegeneratePose("non-finite prediction".into()));
    }
    let depths = sample.depth_labels()?;
    let gt_px = Pose3D::from_parts(&sample.joints2d, depths)?;
    let to_mm = 1.0 / space.pixels_per_mm;
    let gt_mm = gt_px.scaled(to_mm);
    let mut pred_mm = pred_px.scaled(to_mm);
    if protocol.rescale {
        let avg = match skeleton.length_unit() {
            "px" => skeleton.avg_sum_len() * to_mm,
            _ => skeleton.avg_sum_len(),
        };
        pred_mm = align_and_rescale(&pred_mm, gt_mm.0[skeleton.root()], avg, skeleton)?;
    }
    if let Some(ratio) = protocol.pelvis_shift {
        pred_mm = shift_pelvis_toward_neck(&pred_mm, ratio, skeleton)?;
    }
    let root = skeleton.root();
    let mpjpe_mm = mpjpe(&pred_mm, &gt_mm, root)?;
    let aligned = joint_errors(&pred_mm, &gt_mm, root, protocol.alignment)?;
    let pck = pck_from_errors(&aligned, protocol.pck_threshold_mm);
    let auc = auc_from_errors(&aligned);
    let pckh05 = pckh(&pred_px.to_2d(), &sample.joints2d, skeleton)?;
    let symmetry_px = symmetry_metric(pred_px, skeleton, space.field_size)?
        .into_iter()
        .map(|t| t.difference)
        .collect();
    let symmetry_mm = symmetry_terms(&pred_mm, skeleton)
        .into_iter()
        .map(|t| t.difference)
        .collect();
    Ok(SampleResult {
        id: sample.id.clone(),
        mpjpe_mm,
        pck,
        auc,
        pckh05,
        symmetry_px,
        symmetry_mm,
        pred_mm: pred_mm.0,
        gt_mm: gt_mm.0,
        pred_px: pred_px.0.clone(),
        gt2d_px: sample.joints2d.0.clone(),
    })
}

/// Run `predictor` over `dataset` (samples carrying ground-truth depths) and
/// aggregate every metric. Samples that fail are excluded and listed, never dropped silently.
pub fn evaluate<F>(
    dataset: &[PoseSample],
    mut predictor: F,
    skeleton: &Skeleton,
    protocol: &Protocol,
    space: EvalSpace,
) -> Result<(MetricsReport, Vec<SampleResult>)>
where
    F: FnMut(&PoseSample) -> Result<Pose3D>,
{
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut results = Vec::with_capacity(dataset.len());
    let mut excluded = Vec::new();
    for sample in dataset {
        match predictor(sample)
            .and_then(|pred| evaluate_one(sample, &pred, skeleton, protocol, space))
        {
            Ok(r) => results.push(r),
            Err(e) => excluded.push((sample.id.clone(), e.to_string())),
        }
    }
    let j = skeleton.num_joints();
    let per_joint: Vec<f64> = (0..j)
        .map(|k| {
            mean(results.iter().map(|r| {
                joint_errors(
                    &Pose3D(r.pred_mm.clone()),
                    &Pose3D(r.gt_mm.clone()),
                    skeleton.root(),
                    RootAlignment::Depth,
                )
                .expect("validated poses")[k]
            }))
        })
        .collect();
    let pairs = skeleton.symmetric_pairs();
    let report = MetricsReport {
        protocol: protocol.name.to_string(),
        alignment: protocol.alignment,
        rescale: protocol.rescale,
        pelvis_shift: protocol.pelvis_shift,
        samples: results.len(),
        excluded: excluded.len(),
        excluded_samples: excluded,
        mpjpe_mm: mean(results.iter().map(|r| r.mpjpe_mm)),
        mpjpe_per_joint_mm: per_joint,
        pck: mean(results.iter().map(|r| r.pck)),
        pck_threshold_mm: protocol.pck_threshold_mm,
        auc: mean(results.iter().map(|r| r.auc)),
        auc_thresholds_mm: auc_thresholds(),
        pckh05: mean(results.iter().map(|r| r.pckh05)),
        symmetry_field: SYMMETRY_FIELD,
        field_size: space.field_size,
        symmetry_pairs: pairs.iter().map(|p| p.name.clone()).collect(),
        symmetry_px: (0..pairs.len())
            .map(|k| mean(results.iter().map(|r| r.symmetry_px[k])))
            .collect(),
        symmetry_mm: (0..pairs.len())
            .map(|k| mean(results.iter().map(|r| r.symmetry_mm[k])))
            .collect(),
    };
    Ok((report, results))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(text)
            .map_err(|e| Error::data(e.line(), format!("bad metrics report: {e}")))?;
        if report.symmetry_px.len() != report.symmetry_pairs.len()
            || report.symmetry_mm.len() != report.symmetry_pairs.len()
        {
            return Err(Error::data(1, "symmetry arrays do not match pair names"));
        }
        Ok(report)
    }

    /// Aligned plain-text rendering of the JSON report.
    pub fn text_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("protocol".into(), self.protocol.clone()),
            (
                "samples".into(),
                format!("{} ({} excluded)", self.samples, self.excluded),
            ),
            ("MPJPE (mm)".into(), format!("{:.3}", self.mpjpe_mm)),
            (
                format!("PCK@{}mm (%)", self.pck_threshold_mm),
                format!("{:.2}", self.pck),
            ),
            ("AUC".into(), format!("{:.4}", self.auc)),
            ("PCKh@0.5 (%)".into(), format!("{:.2}", self.pckh05)),
        ];
        for (k, name) in self.symmetry_pairs.iter().enumerate() {
            rows.push((
                format!("symmetry {name} (px / mm)"),
                format!("{:.3} / {:.3}", self.symmetry_px[k], self.symmetry_mm[k]),
            ));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

/// Header for the per-sample CSV.
pub fn sample_csv_header(skeleton: &Skeleton) -> Vec<String> {
    let mut h: Vec<String> = ["id", "mpjpe_mm", "pck", "auc", "pckh05"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for p in skeleton.symmetric_pairs() {
        h.push(format!("sym_px_{}", p.name));
    }
    for p in skeleton.symmetric_pairs() {
        h.push(format!("sym_mm_{}", p.name));
    }
    for (prefix, axes) in [
        ("pred_mm", &["x", "y", "z"][..]),
        ("gt_mm", &["x", "y", "z"][..]),
        ("pred_px", &["x", "y", "d"][..]),
        ("gt2d_px", &["x", "y"][..]),
    ] {
        for j in 0..skeleton.num_joints() {
            for a in axes {
                h.push(format!("{prefix}_{j}_{a}"));
            }
        }
    }
    h
}

impl SampleResult {
    /// CSV fields matching [`sample_csv_header`]; floats use shortest round-trip formatting.
    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.id.clone(),
            self.mpjpe_mm.to_string(),
            self.pck.to_string(),
            self.auc.to_string(),
            self.pckh05.to_string(),
        ];
        row.extend(self.symmetry_px.iter().map(f64::to_string));
        row.extend(self.symmetry_mm.iter().map(f64::to_string));
        for pose in [&self.pred_mm, &self.gt_mm, &self.pred_px] {
            row.extend(pose.iter().flatten().map(f64::to_string));
        }
        row.extend(self.gt2d_px.iter().flatten().map(f64::to_string));
        row
    }
}
