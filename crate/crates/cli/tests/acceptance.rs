//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Tolerances are fixed here and never loosened to make a run pass.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use weakpose::datagen::{generate, GeneratorConfig};
use weakpose::losses::heatmap::{decode_heatmap, heatmap_loss, render_heatmap, HeatmapGeometry};
use weakpose::losses::{geo_loss, geo_loss_value};
use weakpose::pipeline::{Ablation, TrainConfig};
use weakpose::skeleton::{align_and_rescale, sum_bone_lengths, BoneGroup};
use weakpose::study::{average, run_trial};
use weakpose::{DepthVector, Pose2D, Pose3D, Skeleton};

const GRADCHECK_TRIALS: &str = "100";
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_BUDGET_S: f64 = 30.0;
const HOMOGENEITY_TOLERANCE: f64 = 1e-9;
/// Generated ground truth is exactly consistent; only rounding can remain.
const GT_GEO_TOLERANCE: f64 = 1e-24;
const STUDY_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STUDY_BUDGET_S: f64 = 600.0;
const RESCALE_TOLERANCE: f64 = 1e-9;
const ORACLE_TOLERANCE: f64 = 1e-9;
const ORACLE_SAMPLES: usize = 200;
const ROUND_TRIP_JOINTS: usize = 10_000;
const REPRO_TOLERANCE: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn weakpose(dir: &Path, args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_weakpose"))
        .current_dir(dir)
        .env_remove("WEAKPOSE_OUTPUT_ROOT")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`weakpose {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn ac1_gradients() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    weakpose(
        dir.path(),
        &[
            "gradcheck",
            "--trials",
            GRADCHECK_TRIALS,
            "--seed",
            "1",
            "--out",
            "gc.json",
        ],
    )?;
    let secs = start.elapsed().as_secs_f64();
    let report: Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("gc.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut ok = secs < GRADCHECK_BUDGET_S;
    let mut parts = Vec::new();
    for c in report["components"].as_array().ok_or("no components")? {
        let name = c["component"].as_str().unwrap_or("?");
        let err = c["max_rel_error"].as_f64().ok_or("no error value")?;
        let n = c["instances"].as_u64().unwrap_or(0);
        ok &= err < GRADCHECK_TOLERANCE && n >= 100;
        parts.push(format!("{name} {err:.2e} over {n}"));
    }
    for needed in ["geo", "end_to_end"] {
        ok &= parts.iter().any(|p| p.starts_with(needed));
    }
    check(
        ok,
        format!(
            "max rel error {} (< {GRADCHECK_TOLERANCE:e}), {secs:.1}s (< {GRADCHECK_BUDGET_S}s)",
            parts.join(", ")
        ),
    )
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> (Pose2D, DepthVector) {
    let xy = (0..joints)
        .map(|_| {
            [
                rng.random_range(-300.0..300.0),
                rng.random_range(-300.0..300.0),
            ]
        })
        .collect();
    let d = (0..joints)
        .map(|_| rng.random_range(-200.0..200.0))
        .collect();
    (Pose2D(xy), DepthVector(d))
}

fn ac2_geo_identities() -> Outcome {
    // zero on every generated ground-truth pose, both domains
    let data = generate(&GeneratorConfig {
        seed: 1,
        ..GeneratorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let archive: HashMap<&str, &DepthVector> = data
        .archive
        .iter()
        .map(|e| (e.id.as_str(), &e.depths))
        .collect();
    let mut worst_gt: f64 = 0.0;
    let mut count = 0;
    for r in data.dataset3d.records.iter().chain(&data.dataset2d.records) {
        let depths = match &r.depths {
            Some(d) => d,
            None => archive
                .get(r.id.as_str())
                .ok_or("sample missing from archive")?,
        };
        let (v, _) =
            geo_loss_value(depths, &r.joints2d, &data.skeleton, 1.0).map_err(|e| e.to_string())?;
        worst_gt = worst_gt.max(v);
        count += 1;
    }

    // homogeneity under uniform scaling of the whole pose
    let skeleton = Skeleton::mpii16();
    let j = skeleton.num_joints();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_homog: f64 = 0.0;
    for _ in 0..100 {
        let (xy, d) = random_pose(&mut rng, j);
        let c: f64 = rng.random_range(0.1..10.0);
        let base = geo_loss_value(&d, &xy, &skeleton, 1.0)
            .map_err(|e| e.to_string())?
            .0;
        let sxy = Pose2D(xy.0.iter().map(|p| [c * p[0], c * p[1]]).collect());
        let sd = DepthVector(d.0.iter().map(|v| c * v).collect());
        let scaled = geo_loss_value(&sd, &sxy, &skeleton, 1.0)
            .map_err(|e| e.to_string())?
            .0;
        worst_homog = worst_homog.max((scaled - c * c * base).abs() / (c * c * base));
    }

    // a single left/right pair as the only group puts every touched joint on exactly
    // one grouped bone, so each joint's gradient is that bone's contribution
    let isolated: Vec<Skeleton> = skeleton
        .symmetric_pairs()
        .iter()
        .map(|p| {
            skeleton.clone().with_groups(vec![BoneGroup {
                name: p.name.clone(),
                bones: vec![p.left, p.right],
            }])
        })
        .collect::<weakpose::Result<_>>()
        .map_err(|e| e.to_string())?;
    let mut opposite = true;
    let mut balanced: f64 = 0.0;
    for _ in 0..100 {
        let (xy, d) = random_pose(&mut rng, j);
        for single in &isolated {
            let g = geo_loss(&d, &xy, single, 1.0)
                .map_err(|e| e.to_string())?
                .grad_depth;
            let mut touched = vec![false; j];
            for &b in &single.groups()[0].bones {
                let bone = &single.bones()[b];
                touched[bone.parent] = true;
                touched[bone.child] = true;
                opposite &= g.0[bone.parent] == -g.0[bone.child] && g.0[bone.parent] != 0.0;
            }
            opposite &= (0..j).all(|k| touched[k] || g.0[k] == 0.0);
        }
        // on the shared-joint default groups the contributions still cancel overall
        let full = geo_loss(&d, &xy, &skeleton, 1.0)
            .map_err(|e| e.to_string())?
            .grad_depth;
        let scale = full.0.iter().map(|v| v.abs()).fold(0.0, f64::max);
        balanced = balanced.max(full.0.iter().sum::<f64>().abs() / scale);
    }
    check(
        worst_gt < GT_GEO_TOLERANCE
            && worst_homog < HOMOGENEITY_TOLERANCE
            && opposite
            && balanced < 1e-12,
        format!(
            "GT max L_geo {worst_gt:.1e} over {count} poses (< {GT_GEO_TOLERANCE:e}); \
             homogeneity rel err {worst_homog:.1e} (< {HOMOGENEITY_TOLERANCE:e}); \
             per-bone gradients opposite: {opposite}; net gradient {balanced:.1e}"
        ),
    )
}

fn ac3_ablation_trends() -> Outcome {
    let ablations = [Ablation::ThreeD, Ablation::Mixed, Ablation::MixedGeo];
    let config = TrainConfig::default();
    let start = Instant::now();
    let mut scores = Vec::new();
    for seed in STUDY_SEEDS {
        scores.extend(
            run_trial(seed, &GeneratorConfig::default(), &config, &ablations)
                .map_err(|e| e.to_string())?,
        );
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = average(&scores, &ablations);
    let (three_d, mixed, geo) = (&mean[0], &mean[1], &mean[2]);
    let a = geo.weak_depth_mpjpe_mm < mixed.weak_depth_mpjpe_mm;
    let b = mixed.weak_mpjpe_mm < three_d.weak_mpjpe_mm;
    let better = geo
        .weak_symmetry_px
        .iter()
        .zip(&mixed.weak_symmetry_px)
        .filter(|(g, m)| g < m)
        .count();
    let c = better >= 3;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    check(
        a && b && c && secs < STUDY_BUDGET_S,
        format!(
            "(a) weak depth MPJPE mixed-geo {:.2} < mixed {:.2}: {a}; \
             (b) weak MPJPE mixed {:.2} < 3d {:.2}: {b}; \
             (c) symmetry mixed-geo [{}] vs mixed [{}]: {better}/4 lower; \
             {} seeds in {secs:.0}s (< {STUDY_BUDGET_S}s)",
            geo.weak_depth_mpjpe_mm,
            mixed.weak_depth_mpjpe_mm,
            mixed.weak_mpjpe_mm,
            three_d.weak_mpjpe_mm,
            fmt(&geo.weak_symmetry_px),
            fmt(&mixed.weak_symmetry_px),
            STUDY_SEEDS.len(),
        ),
    )
}

fn ac4_alignment() -> Outcome {
    let skeleton = Skeleton::mpii16();
    let target = skeleton.avg_sum_len();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut root_exact = true;
    for _ in 0..1000 {
        let pred = Pose3D(
            (0..skeleton.num_joints())
                .map(|_| std::array::from_fn(|_| rng.random_range(-800.0..800.0)))
                .collect(),
        );
        let gt_root: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5000.0..5000.0));
        let out =
            align_and_rescale(&pred, gt_root, target, &skeleton).map_err(|e| e.to_string())?;
        let sum = sum_bone_lengths(&out, &skeleton, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max((sum - target).abs() / target);
        root_exact &= out.0[skeleton.root()] == gt_root;
    }
    check(
        worst < RESCALE_TOLERANCE && root_exact,
        format!(
            "1000 poses: length-sum rel err {worst:.1e} (< {RESCALE_TOLERANCE:e}), root exact: {root_exact}"
        ),
    )
}

/// Metrics recomputed from the per-sample CSV with nothing but the skeleton file.
struct BruteForce {
    root: usize,
    head: (usize, usize),
    bones: Vec<(usize, usize)>,
    pairs: Vec<(usize, usize)>,
    joints: usize,
}

impl BruteForce {
    fn load(path: &Path) -> Result<Self, String> {
        let v: Value = serde_json::from_str(&fs::read_to_string(path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let idx = |x: &Value| x.as_u64().unwrap() as usize;
        let bones: Vec<(usize, usize)> = v["bones"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| (idx(&b["parent"]), idx(&b["child"])))
            .collect();
        Ok(BruteForce {
            root: idx(&v["root"]),
            head: bones[idx(&v["head_bone"])],
            pairs: v["symmetric_pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| (idx(&p["left"]), idx(&p["right"])))
                .collect(),
            joints: v["joint_names"].as_array().unwrap().len(),
            bones,
        })
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn asymmetry(&self, pose: &[[f64; 3]], scale: f64) -> Vec<f64> {
        let len = |b: usize| {
            let (p, c) = self.bones[b];
            let a: Vec<f64> = pose[p].iter().map(|v| v * scale).collect();
            let z: Vec<f64> = pose[c].iter().map(|v| v * scale).collect();
            Self::dist(&a, &z)
        };
        self.pairs
            .iter()
            .map(|&(l, r)| (len(l) - len(r)).abs())
            .collect()
    }

    /// mpjpe, pck, auc, pckh, symmetry px, symmetry mm for one CSV row.
    fn sample(&self, row: &HashMap<String, f64>, field: f64) -> Vec<f64> {
        let get3 = |prefix: &str, axes: [&str; 3]| -> Vec<[f64; 3]> {
            (0..self.joints)
                .map(|j| axes.map(|a| row[&format!("{prefix}_{j}_{a}")]))
                .collect()
        };
        let pred = get3("pred_mm", ["x", "y", "z"]);
        let gt = get3("gt_mm", ["x", "y", "z"]);
        let pred_px = get3("pred_px", ["x", "y", "d"]);
        let gt2d: Vec<[f64; 2]> = (0..self.joints)
            .map(|j| ["x", "y"].map(|a| row[&format!("gt2d_px_{j}_{a}")]))
            .collect();
        let (pz, gz) = (pred[self.root][2], gt[self.root][2]);
        let errors: Vec<f64> = (0..self.joints)
            .map(|j| {
                Self::dist(
                    &[pred[j][0], pred[j][1], pred[j][2] - pz],
                    &[gt[j][0], gt[j][1], gt[j][2] - gz],
                )
            })
            .collect();
        let n = errors.len() as f64;
        let frac_below = |t: f64| errors.iter().filter(|&&e| e < t).count() as f64 / n;
        let mpjpe = errors.iter().sum::<f64>() / n;
        let pck = 100.0 * frac_below(150.0);
        let mut auc = errors.iter().filter(|&&e| e == 0.0).count() as f64 / n;
        for k in 1..=30 {
            auc += frac_below(5.0 * k as f64);
        }
        auc /= 31.0;
        let head = Self::dist(&gt2d[self.head.0], &gt2d[self.head.1]);
        let hits = (0..self.joints)
            .filter(|&j| Self::dist(&pred_px[j][..2], &gt2d[j]) < 0.5 * head)
            .count();
        let pckh = 100.0 * hits as f64 / n;
        let mut out = vec![mpjpe, pck, auc, pckh];
        out.extend(self.asymmetry(&pred_px, 256.0 / field));
        out.extend(self.asymmetry(&pred, 1.0));
        out
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOLERANCE * b.abs().max(1.0)
}

fn ac5_metric_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = dir.path();
    // default benchmark: 2 wild test subjects x 100 samples
    weakpose(w, &["synth", "--seed", "5", "--out", "data"])?;
    weakpose(
        w,
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--set",
            "stage2_iterations=300",
            "--set",
            "stage3_iterations=100",
        ],
    )?;
    weakpose(
        w,
        &[
            "eval",
            "--data",
            "data",
            "--model",
            "run/model.json",
            "--out",
            "ev",
        ],
    )?;
    let oracle = BruteForce::load(&w.join("data/skeleton.json"))?;
    let report: Value = serde_json::from_str(
        &fs::read_to_string(w.join("ev/metrics.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let field = report["field_size"].as_f64().ok_or("no field size")?;

    let mut rdr = csv::Reader::from_path(w.join("ev/samples.csv")).map_err(|e| e.to_string())?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    let metric_cols: Vec<usize> = (1..5 + 2 * oracle.pairs.len()).collect();
    let mut sums = vec![0.0; metric_cols.len()];
    let mut rows = 0usize;
    let mut per_sample_ok = true;
    for record in rdr.records() {
        let record = record.map_err(|e| e.to_string())?;
        let row: HashMap<String, f64> = header
            .iter()
            .zip(record.iter())
            .skip(1)
            .map(|(h, v)| (h.clone(), v.parse::<f64>().unwrap()))
            .collect();
        let recomputed = oracle.sample(&row, field);
        for (k, &col) in metric_cols.iter().enumerate() {
            per_sample_ok &= close(recomputed[k], row[&header[col]]);
            sums[k] += recomputed[k];
        }
        rows += 1;
    }
    let means: Vec<f64> = sums.iter().map(|s| s / rows as f64).collect();
    let p = oracle.pairs.len();
    let reported: Vec<f64> = ["mpjpe_mm", "pck", "auc", "pckh05"]
        .iter()
        .map(|k| report[*k].as_f64().unwrap())
        .chain((0..p).map(|i| report["symmetry_px"][i].as_f64().unwrap()))
        .chain((0..p).map(|i| report["symmetry_mm"][i].as_f64().unwrap()))
        .collect();
    let worst = means
        .iter()
        .zip(&reported)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);
    check(
        rows == ORACLE_SAMPLES && per_sample_ok && worst <= ORACLE_TOLERANCE,
        format!(
            "{rows} samples (need {ORACLE_SAMPLES}); per-sample match: {per_sample_ok}; \
             aggregate max rel diff {worst:.1e} (<= {ORACLE_TOLERANCE:e}); MPJPE {:.2} mm",
            reported[0]
        ),
    )
}

fn ac6_heatmaps() -> Outcome {
    let geometry = HeatmapGeometry::default();
    let extent = [
        geometry.width as f64 * geometry.stride,
        geometry.height as f64 * geometry.stride,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let per_stack = 16;
    let mut worst: f64 = 0.0;
    let mut zero_loss = true;
    for _ in 0..ROUND_TRIP_JOINTS / per_stack {
        let joints = Pose2D(
            (0..per_stack)
                .map(|_| {
                    [
                        rng.random_range(0.0..extent[0]),
                        rng.random_range(0.0..extent[1]),
                    ]
                })
                .collect(),
        );
        let stack = render_heatmap(&joints, geometry).map_err(|e| e.to_string())?;
        let decoded = decode_heatmap(&stack).map_err(|e| e.to_string())?;
        for (d, t) in decoded.joints.0.iter().zip(&joints.0) {
            worst = worst.max((d[0] - t[0]).abs()).max((d[1] - t[1]).abs());
        }
        let (loss, grad) = heatmap_loss(&stack, &stack).map_err(|e| e.to_string())?;
        zero_loss &= loss == 0.0 && grad.maps.iter().all(|g| *g == 0.0);
    }
    let bound = geometry.stride / 2.0;
    check(
        worst <= bound && zero_loss,
        format!(
            "{ROUND_TRIP_JOINTS} joints: max per-axis error {worst:.3} px (<= {bound}); \
             loss(gt, gt) == 0: {zero_loss}"
        ),
    )
}

fn numbers_close(a: &Value, b: &Value, path: &str, worst: &mut f64) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            *worst = worst.max((x - y).abs());
            Ok(())
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .try_for_each(|(i, (x, y))| numbers_close(x, y, &format!("{path}[{i}]"), worst)),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
            x.iter().try_for_each(|(k, v)| {
                numbers_close(
                    v,
                    y.get(k).ok_or(format!("{path}.{k} missing"))?,
                    &format!("{path}.{k}"),
                    worst,
                )
            })
        }
        _ if a == b => Ok(()),
        _ => Err(format!("reports differ at {path}")),
    }
}

fn ac7_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = dir.path();
    for run in ["a", "b"] {
        let data = format!("{run}/data");
        let model = format!("{run}/train");
        weakpose(w, &["synth", "--seed", "11", "--out", &data])?;
        weakpose(
            w,
            &[
                "train",
                "--data",
                &data,
                "--out",
                &model,
                "--seed",
                "3",
                "--set",
                "stage2_iterations=1000",
                "--set",
                "stage3_iterations=300",
            ],
        )?;
        weakpose(
            w,
            &[
                "eval",
                "--data",
                &data,
                "--model",
                &format!("{model}/model.json"),
                "--out",
                &format!("{run}/eval"),
            ],
        )?;
    }
    let mut identical = Vec::new();
    for f in [
        "full3d.jsonl",
        "weak2d.jsonl",
        "archive.jsonl",
        "skeleton.json",
    ] {
        let a = fs::read(w.join("a/data").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(w.join("b/data").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("dataset file {f} differs between runs"));
        }
        identical.push(f);
    }
    let load = |run: &str| -> Result<Value, String> {
        serde_json::from_str(
            &fs::read_to_string(w.join(run).join("eval/metrics.json"))
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())
    };
    let mut worst = 0.0;
    numbers_close(&load("a")?, &load("b")?, "metrics", &mut worst)?;
    check(
        worst <= REPRO_TOLERANCE,
        format!(
            "{} byte-identical; metric reports max diff {worst:e} (<= {REPRO_TOLERANCE:e})",
            identical.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("AC1", "gradient certification", ac1_gradients),
        ("AC2", "geometric-loss identities", ac2_geo_identities),
        ("AC3", "ablation trends", ac3_ablation_trends),
        ("AC4", "alignment formula", ac4_alignment),
        ("AC5", "metric oracle equivalence", ac5_metric_oracle),
        ("AC6", "heatmap round trip", ac6_heatmaps),
        ("AC7", "reproducibility", ac7_reproducibility),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC"))
        .collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("check panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
