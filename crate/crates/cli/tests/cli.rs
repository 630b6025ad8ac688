use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use weakpose::metrics::MetricsReport;
use weakpose::pipeline::RunReport;
use weakpose::skeleton::{sum_bone_lengths, Skeleton};
use weakpose::Pose3D;
use weakpose_cli::commands::PredictionLine;
use weakpose_cli::manifest::{RunManifest, OUTPUT_ROOT_ENV};

const SMALL: &str = "train_subjects = 2\ntest_subjects = 1\ntrain_samples_per_subject = 40\ntest_samples_per_subject = 20\n";
const SHORT: [&str; 4] = [
    "--set",
    "stage2_iterations=120",
    "--set",
    "stage3_iterations=60",
];

fn weakpose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakpose"))
        .current_dir(dir)
        .env_remove(OUTPUT_ROOT_ENV)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A temp dir with a small synthetic benchmark in `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.toml"), SMALL).unwrap();
    ok(&weakpose(
        dir.path(),
        &[
            "synth", "--seed", "7", "--config", "gen.toml", "--out", "data",
        ],
    ));
    dir
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data", "data", "--out", out];
    v.extend_from_slice(&SHORT);
    v.extend_from_slice(extra);
    v
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_writes_the_dataset_files_and_a_manifest() {
    let w = workspace();
    for f in [
        "full3d.jsonl",
        "weak2d.jsonl",
        "archive.jsonl",
        "skeleton.json",
        "manifest.json",
    ] {
        assert!(w.path().join("data").join(f).is_file(), "{f}");
    }
    let m = RunManifest::load(&w.path().join("data/manifest.json")).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seeds, vec![7]);
    assert_eq!(m.config["train_samples_per_subject"], 40);
}

#[test]
fn synth_is_deterministic_and_reproducible_from_its_manifest() {
    let w = workspace();
    ok(&weakpose(
        w.path(),
        &[
            "synth", "--seed", "7", "--config", "gen.toml", "--out", "again",
        ],
    ));
    // rebuild the generator config from the manifest alone
    let m = RunManifest::load(&w.path().join("data/manifest.json")).unwrap();
    let config: weakpose::datagen::GeneratorConfig = serde_json::from_value(m.config).unwrap();
    fs::write(w.path().join("from_manifest.toml"), config.to_toml()).unwrap();
    ok(&weakpose(
        w.path(),
        &[
            "synth",
            "--config",
            "from_manifest.toml",
            "--out",
            "replayed",
        ],
    ));
    for f in [
        "full3d.jsonl",
        "weak2d.jsonl",
        "archive.jsonl",
        "skeleton.json",
    ] {
        let a = read(w.path().join("data").join(f));
        assert_eq!(a, read(w.path().join("again").join(f)), "{f}");
        assert_eq!(a, read(w.path().join("replayed").join(f)), "{f}");
    }
}

#[test]
fn bad_flag_value_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = weakpose(dir.path(), &["synth", "--seed", "seven", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--help"), "{}", stderr(&out));
    let out = weakpose(
        dir.path(),
        &["train", "--data", "d", "--out", "r", "--ablation", "2d"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_2() {
    let w = workspace();
    let out = weakpose(w.path(), &train_args("run", &["--set", "batch_size=5"]));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = weakpose(w.path(), &train_args("run", &["--set", "unknown_key=1"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_dataset_exits_4_with_line_number() {
    let w = workspace();
    let path = w.path().join("data/full3d.jsonl");
    let text = String::from_utf8(read(&path)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[5] = "{\"id\": \"broken\"";
    fs::write(&path, lines.join("\n")).unwrap();
    let out = weakpose(w.path(), &train_args("run", &[]));
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("line 6"), "{}", stderr(&out));
}

#[test]
fn three_d_training_never_opens_the_2d_file() {
    let w = workspace();
    fs::remove_file(w.path().join("data/weak2d.jsonl")).unwrap();
    ok(&weakpose(
        w.path(),
        &train_args("run3d", &["--ablation", "3d"]),
    ));
    let m = RunManifest::load(&w.path().join("run3d/manifest.json")).unwrap();
    assert!(m.inputs.iter().all(|p| !p.ends_with("weak2d.jsonl")));

    let out = weakpose(w.path(), &train_args("runmix", &["--ablation", "mixed"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mixed_geo_switches_the_geometric_term_on_in_stage_three() {
    let w = workspace();
    ok(&weakpose(
        w.path(),
        &train_args("run", &["--ablation", "mixed-geo"]),
    ));
    let run: RunReport =
        serde_json::from_slice(&read(w.path().join("run/run_report.json"))).unwrap();
    let stage = |k| run.stages.iter().find(|s| s.stage == k).unwrap();
    assert!(stage(2).log.iter().all(|r| r.geo == 0.0));
    assert!(stage(3).log.iter().all(|r| r.geo > 0.0));
    let jsonl = String::from_utf8(read(w.path().join("run/log.jsonl"))).unwrap();
    assert_eq!(jsonl.lines().count(), run.log_records().count());
    assert!(w.path().join("run/log.csv").is_file());
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let w = workspace();
    ok(&weakpose(w.path(), &train_args("full", &[])));
    ok(&weakpose(
        w.path(),
        &train_args(
            "resumed",
            &["--resume", "full/checkpoints/stage2.ckpt.json"],
        ),
    ));
    assert_eq!(
        read(w.path().join("full/model.json")),
        read(w.path().join("resumed/model.json"))
    );
    // a checkpoint taken under another config is refused
    let out = weakpose(
        w.path(),
        &train_args(
            "other",
            &[
                "--resume",
                "full/checkpoints/stage2.ckpt.json",
                "--set",
                "learning_rate=0.01",
            ],
        ),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn divergence_exits_3_and_names_the_last_checkpoint() {
    let w = workspace();
    let out = weakpose(w.path(), &train_args("run", &["--inject-nan-at", "150"]));
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("step 150"), "{err}");
    assert!(err.contains("stage2.ckpt.json"), "{err}");
}

#[test]
fn oracle_evaluation_is_perfect() {
    let w = workspace();
    for domain in ["lab", "wild"] {
        let out_dir = format!("oracle_{domain}");
        ok(&weakpose(
            w.path(),
            &[
                "eval", "--data", "data", "--oracle", "--domain", domain, "--out", &out_dir,
            ],
        ));
        let r = MetricsReport::from_json(
            &fs::read_to_string(w.path().join(&out_dir).join("metrics.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(r.samples, 20);
        assert_eq!(r.mpjpe_mm, 0.0);
        assert_eq!(r.pck, 100.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.pckh05, 100.0);
        // GT bones are symmetric, so only rounding remains
        assert!(
            r.symmetry_px.iter().all(|v| *v < 1e-9),
            "{:?}",
            r.symmetry_px
        );
    }
}

fn csv_rows(path: PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn pelvis_shift_moves_only_pelvis_and_hips() {
    let w = workspace();
    ok(&weakpose(
        w.path(),
        &[
            "eval",
            "--data",
            "data",
            "--oracle",
            "--protocol",
            "3dhp",
            "--out",
            "shifted",
        ],
    ));
    let skel = Skeleton::load(&w.path().join("data/skeleton.json")).unwrap();
    let hips = skel.hips();
    let moved = [skel.root(), hips.left, hips.right];
    let (header, rows) = csv_rows(w.path().join("shifted/samples.csv"));
    let col = |name: String| header.iter().position(|h| *h == name).unwrap();
    for row in &rows {
        for j in 0..skel.num_joints() {
            let differs = ["x", "y", "z"].iter().any(|a| {
                row[col(format!("pred_mm_{j}_{a}"))] != row[col(format!("gt_mm_{j}_{a}"))]
            });
            assert_eq!(differs, moved.contains(&j), "joint {j}");
        }
    }
}

#[test]
fn evaluation_reports_are_reproducible() {
    let w = workspace();
    ok(&weakpose(w.path(), &train_args("run", &[])));
    for out in ["e1", "e2"] {
        ok(&weakpose(
            w.path(),
            &[
                "eval",
                "--data",
                "data",
                "--model",
                "run/model.json",
                "--out",
                out,
            ],
        ));
    }
    for f in ["metrics.json", "metrics.txt", "samples.csv"] {
        assert_eq!(
            read(w.path().join("e1").join(f)),
            read(w.path().join("e2").join(f)),
            "{f}"
        );
    }
    let m = RunManifest::load(&w.path().join("e1/manifest.json")).unwrap();
    assert_eq!(m.config["protocol"], "sym");
    assert_eq!(m.config["model_config"]["seed"], 1);
}

#[test]
fn predictions_reproduce_the_logged_training_outputs() {
    let w = workspace();
    ok(&weakpose(w.path(), &train_args("run", &[])));
    ok(&weakpose(
        w.path(),
        &[
            "predict",
            "--model",
            "run/model.json",
            "--input",
            "data/full3d.jsonl",
            "--out",
            "pred.jsonl",
        ],
    ));
    let run: RunReport =
        serde_json::from_slice(&read(w.path().join("run/run_report.json"))).unwrap();
    let preds: Vec<PredictionLine> = fs::read_to_string(w.path().join("pred.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!run.probes.is_empty());
    for probe in &run.probes {
        let p = preds.iter().find(|p| p.id == probe.id).unwrap();
        assert_eq!(p.raw, probe.output);
    }
    assert!(w.path().join("pred.jsonl.manifest.json").is_file());
}

#[test]
fn rescaled_predictions_match_the_average_length_sum() {
    let w = workspace();
    ok(&weakpose(w.path(), &train_args("run", &[])));
    ok(&weakpose(
        w.path(),
        &[
            "predict",
            "--model",
            "run/model.json",
            "--input",
            "data/weak2d.jsonl",
            "--rescale",
            "--out",
            "pred.jsonl",
        ],
    ));
    let skel = Skeleton::load(&w.path().join("data/skeleton.json")).unwrap();
    let target = skel.avg_sum_len();
    for line in fs::read_to_string(w.path().join("pred.jsonl"))
        .unwrap()
        .lines()
    {
        let p: PredictionLine = serde_json::from_str(line).unwrap();
        assert!(p.rescaled);
        let sum = sum_bone_lengths(&Pose3D(p.joints), &skel, 1.0).unwrap();
        assert!(((sum - target) / target).abs() < 1e-9, "{sum} vs {target}");
    }
}

#[test]
fn predict_without_checkpoint_exits_2() {
    let w = workspace();
    let out = weakpose(
        w.path(),
        &[
            "predict",
            "--model",
            "nope.json",
            "--input",
            "data/full3d.jsonl",
            "--out",
            "p.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_sign() {
    let dir = tempfile::tempdir().unwrap();
    let out = weakpose(dir.path(), &["gradcheck", "--trials", "20"]);
    assert!(ok(&out).contains("end_to_end"));
    let out = weakpose(
        dir.path(),
        &["gradcheck", "--trials", "5", "--flip-sign", "end_to_end"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("end_to_end"), "{}", stderr(&out));
}

#[test]
fn gradcheck_maxima_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.json", "b.json"] {
        ok(&weakpose(
            dir.path(),
            &["gradcheck", "--trials", "1000", "--seed", "1", "--out", out],
        ));
    }
    assert_eq!(
        read(dir.path().join("a.json")),
        read(dir.path().join("b.json"))
    );
    assert!(dir.path().join("a.json.manifest.json").is_file());
}

#[test]
fn report_renders_each_kind_and_rejects_garbage() {
    let w = workspace();
    ok(&weakpose(w.path(), &train_args("run", &[])));
    ok(&weakpose(
        w.path(),
        &["eval", "--data", "data", "--oracle", "--out", "ev"],
    ));
    ok(&weakpose(
        w.path(),
        &["gradcheck", "--trials", "3", "--out", "gc.json"],
    ));
    assert!(ok(&weakpose(w.path(), &["report", "ev/metrics.json"])).contains("MPJPE"));
    assert!(ok(&weakpose(w.path(), &["report", "run/run_report.json"])).contains("stage"));
    assert!(ok(&weakpose(w.path(), &["report", "gc.json"])).contains("geo"));
    fs::write(w.path().join("junk.json"), "{\"hello\": 1}").unwrap();
    assert_eq!(
        weakpose(w.path(), &["report", "junk.json"]).status.code(),
        Some(4)
    );
}

#[test]
fn output_root_override_applies_to_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    fs::write(dir.path().join("gen.toml"), SMALL).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_weakpose"))
        .current_dir(dir.path())
        .env(OUTPUT_ROOT_ENV, &root)
        .args(["synth", "--config", "gen.toml", "--out", "data"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("data/full3d.jsonl").is_file());
    assert!(!dir.path().join("data").exists());
}
