//! Seeded ablation study on the synthetic two-domain benchmark.
//!
//! For every seed a fresh dataset is generated and each requested ablation is
//! trained on it, then scored on the held-out test subjects of both domains.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, GeneratedData, GeneratorConfig};
use crate::dataset::attach_archive;
use crate::error::Result;
use crate::metrics::{evaluate, EvalSpace, MetricsReport, Protocol};
use crate::pipeline::{
    train, Ablation, Checkpoint, ModelSpec, ModelState, TrainConfig, TrainData, TrainOptions,
};
use crate::sample::PoseSample;
use crate::skeleton::Skeleton;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScores {
    pub seed: u64,
    pub ablation: Ablation,
    /// Weak-domain MPJPE of predicted depths placed on the labelled 2D joints.
    pub weak_depth_mpjpe_mm: f64,
    /// Weak-domain MPJPE of the full predicted pose (refined 2D + depth).
    pub weak_mpjpe_mm: f64,
    pub weak_pck: f64,
    pub lab_mpjpe_mm: f64,
    pub weak_symmetry_pairs: Vec<String>,
    /// Weak-domain symmetry metric of the full predicted pose, 256-normalized pixels.
    pub weak_symmetry_px: Vec<f64>,
    pub train_wall_time_s: f64,
}

/// Held-out evaluation sets of a generated benchmark.
pub struct TestSets {
    pub lab: Vec<PoseSample>,
    /// Wild test records with their archived depths attached.
    pub wild: Vec<PoseSample>,
    pub space: EvalSpace,
}

pub fn test_sets(data: &GeneratedData) -> Result<TestSets> {
    Ok(TestSets {
        lab: data.dataset3d.split("test"),
        wild: attach_archive(&data.dataset2d.split("test"), &data.archive)?,
        space: EvalSpace {
            pixels_per_mm: data.dataset3d.header.units.pixels_per_mm,
            field_size: data.dataset3d.header.field_size,
        },
    })
}

/// Score a trained state on both domains with known scale and root-depth alignment.
pub fn score(
    model: &ModelSpec,
    state: &ModelState,
    skeleton: &Skeleton,
    sets: &TestSets,
) -> Result<(MetricsReport, MetricsReport, MetricsReport)> {
    let protocol = Protocol::symmetry();
    let full = |s: &PoseSample| Ok(model.predict(state, s)?.pose());
    let depth_only = |s: &PoseSample| model.predict(state, s)?.pose_with_labels(s);
    let (weak_full, _) = evaluate(&sets.wild, full, skeleton, &protocol, sets.space)?;
    let (weak_depth, _) = evaluate(&sets.wild, depth_only, skeleton, &protocol, sets.space)?;
    let (lab_full, _) = evaluate(&sets.lab, full, skeleton, &protocol, sets.space)?;
    Ok((weak_full, weak_depth, lab_full))
}

/// Train and score each ablation on one generated benchmark.
pub fn run_trial(
    seed: u64,
    generator: &GeneratorConfig,
    base: &TrainConfig,
    ablations: &[Ablation],
) -> Result<Vec<AblationScores>> {
    let data = generate(&GeneratorConfig {
        seed,
        ..generator.clone()
    })?;
    let sets = test_sets(&data)?;
    let pool3d = data.dataset3d.split("train");
    let pool2d = data.dataset2d.split("train");
    let train_data = TrainData {
        pool3d: &pool3d,
        pool2d: &pool2d,
    };
    // Mixed ablations only differ once the geometric term switches on in stage 3,
    // so they share one stage-2 run and branch from its state.
    let mut shared_stage2: Option<Checkpoint> = None;
    let mut out = Vec::new();
    for &ablation in ablations {
        let config = TrainConfig {
            seed,
            ablation,
            ..base.clone()
        };
        let options = if ablation.uses_2d_pool() {
            let stage2 = match &shared_stage2 {
                Some(ck) => ck.state.clone(),
                None => {
                    let (state, _) = train(
                        &config,
                        &train_data,
                        &data.skeleton,
                        &TrainOptions {
                            stop_after: Some(2),
                            ..TrainOptions::default()
                        },
                    )?;
                    shared_stage2 = Some(Checkpoint::new(&config, 2, &state));
                    state
                }
            };
            TrainOptions {
                resume: Some(Checkpoint::new(&config, 2, &stage2)),
                ..TrainOptions::default()
            }
        } else {
            TrainOptions::default()
        };
        let (state, report) = train(&config, &train_data, &data.skeleton, &options)?;
        let model = config.model_spec(&data.skeleton);
        let (weak_full, weak_depth, lab) = score(&model, &state, &data.skeleton, &sets)?;
        out.push(AblationScores {
            seed,
            ablation,
            weak_depth_mpjpe_mm: weak_depth.mpjpe_mm,
            weak_mpjpe_mm: weak_full.mpjpe_mm,
            weak_pck: weak_full.pck,
            lab_mpjpe_mm: lab.mpjpe_mm,
            weak_symmetry_pairs: weak_full.symmetry_pairs.clone(),
            weak_symmetry_px: weak_full.symmetry_px.clone(),
            train_wall_time_s: report.wall_time_s,
        });
    }
    Ok(out)
}

/// Per-ablation means over seeds, in the order of `ablations`.
pub fn average(scores: &[AblationScores], ablations: &[Ablation]) -> Vec<AblationScores> {
    ablations
        .iter()
        .filter_map(|&a| {
            let rows: Vec<&AblationScores> = scores.iter().filter(|s| s.ablation == a).collect();
            let first = rows.first()?;
            let n = rows.len() as f64;
            let m = |f: &dyn Fn(&AblationScores) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(AblationScores {
                seed: 0,
                ablation: a,
                weak_depth_mpjpe_mm: m(&|r| r.weak_depth_mpjpe_mm),
                weak_mpjpe_mm: m(&|r| r.weak_mpjpe_mm),
                weak_pck: m(&|r| r.weak_pck),
                lab_mpjpe_mm: m(&|r| r.lab_mpjpe_mm),
                weak_symmetry_pairs: first.weak_symmetry_pairs.clone(),
                weak_symmetry_px: (0..first.weak_symmetry_px.len())
                    .map(|k| m(&|r| r.weak_symmetry_px[k]))
                    .collect(),
                train_wall_time_s: rows.iter().map(|r| r.train_wall_time_s).sum(),
            })
        })
        .collect()
}
