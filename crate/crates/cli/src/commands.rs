use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use weakpose::datagen::{generate, GeneratorConfig};
use weakpose::dataset::{
    archive_in_pixels, archive_to_jsonl, attach_archive, load_archive, DatasetFile,
};
use weakpose::gradcheck::{self, Component, GradcheckConfig, GradcheckReport};
use weakpose::metrics::{evaluate, sample_csv_header, EvalSpace, MetricsReport, Protocol};
use weakpose::pipeline::{
    train, Ablation, Checkpoint, InjectNan, RunReport, TrainConfig, TrainData, TrainOptions,
};
use weakpose::skeleton::align_and_rescale;
use weakpose::{Error, Pose3D, PoseSample, Result, Skeleton};

use crate::manifest::{ensure_dir, output_path, version_string, RunManifest, MANIFEST_FILE};

pub const SKELETON_FILE: &str = "skeleton.json";
pub const FULL3D_FILE: &str = "full3d.jsonl";
pub const WEAK2D_FILE: &str = "weak2d.jsonl";
pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const MODEL_FILE: &str = "model.json";

/// Exit status of a gradient check whose errors exceed the tolerance.
pub const EXIT_CHECK_FAILED: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "weakpose",
    version,
    about = "Weakly supervised 3D pose depth training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain benchmark.
    Synth(SynthArgs),
    /// Train a model through the three-stage schedule.
    Train(TrainArgs),
    /// Evaluate a trained model (or the ground-truth oracle) on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write per-sample 3D predictions as JSON lines.
    Predict(PredictArgs),
    /// Print a JSON report as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator configuration (TOML); missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue after the stage stored in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_nan_at: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Lab,
    Wild,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Final checkpoint written by `train`.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub model: Option<PathBuf>,
    /// Predict the ground truth itself.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value = "wild")]
    pub domain: Domain,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// sym (known scale, no post-processing), h36m (rescaled) or 3dhp (pelvis shift).
    #[arg(long, default_value = "sym")]
    pub protocol: String,
    /// Place predicted depths on the labelled 2D joints instead of the refined ones.
    #[arg(long)]
    pub depth_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the report as JSON (a manifest goes next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true, value_parser = parse_component)]
    pub flip_sign: Option<Component>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file of 2D records.
    #[arg(long)]
    pub input: PathBuf,
    /// Skeleton schema; defaults to `skeleton.json` next to the input.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Rescale each prediction to the schema's average bone-length sum.
    #[arg(long)]
    pub rescale: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A metrics, run or gradcheck report (JSON).
    pub path: PathBuf,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn parse_component(s: &str) -> std::result::Result<Component, String> {
    Component::ALL
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown component '{s}'"))
}

/// Run a parsed command; `argv` is recorded in the manifest.
pub fn run(cli: Cli, argv: &[String]) -> Result<i32> {
    let start = Instant::now();
    match cli.command {
        Command::Synth(a) => synth(&a, argv, start),
        Command::Train(a) => cmd_train(&a, argv, start),
        Command::Eval(a) => eval(&a, argv, start),
        Command::Gradcheck(a) => cmd_gradcheck(&a, argv, start),
        Command::Predict(a) => predict(&a, argv, start),
        Command::Report(a) => report(&a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn synth(a: &SynthArgs, argv: &[String], start: Instant) -> Result<i32> {
    let mut config = match &a.config {
        Some(p) => GeneratorConfig::from_toml(&read_text(p)?)?,
        None => GeneratorConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let data = generate(&config)?;
    let out = output_path(&a.out);
    ensure_dir(&out)?;
    let files = [SKELETON_FILE, FULL3D_FILE, WEAK2D_FILE, ARCHIVE_FILE].map(|f| out.join(f));
    write_text(&files[0], &(data.skeleton.to_json_string() + "\n"))?;
    data.dataset3d.save(&files[1])?;
    data.dataset2d.save(&files[2])?;
    write_text(
        &files[3],
        &archive_to_jsonl(&data.archive_header, &data.archive),
    )?;
    RunManifest {
        command: "synth".into(),
        args: argv.to_vec(),
        version: version_string(),
        config: to_value(&config),
        seeds: vec![config.seed],
        inputs: a.config.iter().cloned().collect(),
        outputs: files.to_vec(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
    .write(&out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} labelled and {} 2D-only records to {}",
        data.dataset3d.records.len(),
        data.dataset2d.records.len(),
        out.display()
    );
    Ok(0)
}

/// Files of a `synth` output directory.
struct DataDir<'a>(&'a Path);

impl DataDir<'_> {
    fn skeleton(&self) -> Result<Skeleton> {
        Skeleton::load(&self.0.join(SKELETON_FILE))
    }

    fn samples(&self, file: &str, skeleton: &Skeleton) -> Result<DatasetFile> {
        DatasetFile::load(&self.0.join(file), skeleton)?
            .0
            .into_pixel_depths()
    }

    fn wild_with_archive(
        &self,
        skeleton: &Skeleton,
        split: &str,
    ) -> Result<(DatasetFile, Vec<PoseSample>)> {
        let weak = self.samples(WEAK2D_FILE, skeleton)?;
        let (header, entries) = load_archive(&self.0.join(ARCHIVE_FILE), skeleton)?;
        let entries = archive_in_pixels(&header, entries)?;
        let records = attach_archive(&weak.split(split), &entries)?;
        Ok((weak, records))
    }
}

fn train_config(a: &TrainArgs, resume: Option<&Checkpoint>) -> Result<TrainConfig> {
    let mut config = match (&a.config, resume) {
        (Some(p), _) => TrainConfig::from_toml(&read_text(p)?)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(ablation) = a.ablation {
        config.ablation = ablation;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override '{kv}' is not KEY=VALUE")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: &TrainArgs, argv: &[String], start: Instant) -> Result<i32> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let config = train_config(a, resume.as_ref())?;
    let dir = DataDir(&a.data);
    let skeleton = dir.skeleton()?;
    let mut inputs = vec![a.data.join(SKELETON_FILE), a.data.join(FULL3D_FILE)];
    let pool3d = dir.samples(FULL3D_FILE, &skeleton)?.split("train");
    // 3D-only ablations never open the 2D file
    let pool2d = if config.ablation.uses_2d_pool() {
        inputs.push(a.data.join(WEAK2D_FILE));
        dir.samples(WEAK2D_FILE, &skeleton)?.split("train")
    } else {
        Vec::new()
    };
    inputs.extend(a.config.iter().cloned());
    inputs.extend(a.resume.iter().cloned());

    let out = output_path(&a.out);
    ensure_dir(&out)?;
    let options = TrainOptions {
        checkpoint_dir: Some(out.join("checkpoints")),
        resume,
        inject_nan: a.inject_nan_at.map(|at_step| InjectNan { at_step }),
        stop_after: None,
    };
    let data = TrainData {
        pool3d: &pool3d,
        pool2d: &pool2d,
    };
    let (state, run) = train(&config, &data, &skeleton, &options)?;

    let model = out.join(MODEL_FILE);
    Checkpoint::new(&config, 3, &state).save(&model)?;
    let files = [
        model,
        out.join("run_report.json"),
        out.join("log.jsonl"),
        out.join("log.csv"),
    ];
    write_text(
        &files[1],
        &(serde_json::to_string_pretty(&run).expect("report serializes") + "\n"),
    )?;
    write_text(&files[2], &run.log_jsonl())?;
    write_text(&files[3], &run.log_csv())?;
    let mut outputs = files.to_vec();
    outputs.extend(run.stages.iter().filter_map(|s| s.checkpoint.clone()));
    RunManifest {
        command: "train".into(),
        args: argv.to_vec(),
        version: version_string(),
        config: to_value(&config),
        seeds: vec![config.seed],
        inputs,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
    .write(&out.join(MANIFEST_FILE))?;
    if let Some(last) = run.log_records().last() {
        println!(
            "{}: step {} total {:.6} (l2d {:.6}, reg {:.6}, geo {:.6}) in {:.1}s",
            config.ablation.name(),
            last.step,
            last.total,
            last.l2d,
            last.reg,
            last.geo,
            run.wall_time_s
        );
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    domain: Domain,
    split: &'a str,
    protocol: &'a str,
    depth_only: bool,
    oracle: bool,
    model_config: Option<&'a TrainConfig>,
}

fn eval(a: &EvalArgs, argv: &[String], start: Instant) -> Result<i32> {
    let protocol = Protocol::by_name(&a.protocol)?;
    let dir = DataDir(&a.data);
    let skeleton = dir.skeleton()?;
    let mut inputs = vec![a.data.join(SKELETON_FILE)];
    let (file, records) = match a.domain {
        Domain::Lab => {
            inputs.push(a.data.join(FULL3D_FILE));
            let f = dir.samples(FULL3D_FILE, &skeleton)?;
            let r = f.split(&a.split);
            (f, r)
        }
        Domain::Wild => {
            inputs.push(a.data.join(WEAK2D_FILE));
            inputs.push(a.data.join(ARCHIVE_FILE));
            dir.wild_with_archive(&skeleton, &a.split)?
        }
    };
    if records.is_empty() {
        return Err(Error::Config(format!("split '{}' has no records", a.split)));
    }
    let space = EvalSpace {
        pixels_per_mm: file.header.units.pixels_per_mm,
        field_size: file.header.field_size,
    };
    let checkpoint = a.model.as_deref().map(Checkpoint::load).transpose()?;
    inputs.extend(a.model.iter().cloned());

    let (report, samples) = match &checkpoint {
        Some(ck) => {
            let model = ck.config.model_spec(&skeleton);
            ck.state.check_shapes(&ck.config.model_config(&skeleton))?;
            let predictor = |s: &PoseSample| {
                let p = model.predict(&ck.state, s)?;
                if a.depth_only {
                    p.pose_with_labels(s)
                } else {
                    Ok(p.pose())
                }
            };
            evaluate(&records, predictor, &skeleton, &protocol, space)?
        }
        None => {
            let oracle = |s: &PoseSample| Pose3D::from_parts(&s.joints2d, s.depth_labels()?);
            evaluate(&records, oracle, &skeleton, &protocol, space)?
        }
    };

    let out = output_path(&a.out);
    ensure_dir(&out)?;
    let files = [
        out.join("metrics.json"),
        out.join("metrics.txt"),
        out.join("samples.csv"),
    ];
    write_text(&files[0], &(report.to_json() + "\n"))?;
    write_text(&files[1], &report.text_table())?;
    let mut csv = csv::Writer::from_path(&files[2]).map_err(|e| csv_error(&files[2], e))?;
    csv.write_record(sample_csv_header(&skeleton))
        .map_err(|e| csv_error(&files[2], e))?;
    for s in &samples {
        csv.write_record(s.csv_row())
            .map_err(|e| csv_error(&files[2], e))?;
    }
    csv.flush().map_err(|e| Error::io(&files[2], e))?;

    RunManifest {
        command: "eval".into(),
        args: argv.to_vec(),
        version: version_string(),
        config: to_value(&EvalSettings {
            domain: a.domain,
            split: &a.split,
            protocol: &a.protocol,
            depth_only: a.depth_only,
            oracle: a.oracle,
            model_config: checkpoint.as_ref().map(|c| &c.config),
        }),
        seeds: checkpoint.iter().map(|c| c.config.seed).collect(),
        inputs,
        outputs: files.to_vec(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
    .write(&out.join(MANIFEST_FILE))?;
    print!("{}", report.text_table());
    Ok(0)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Usage(format!("csv writer: {other:?}")),
    }
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn cmd_gradcheck(a: &GradcheckArgs, argv: &[String], start: Instant) -> Result<i32> {
    if a.trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    let config = GradcheckConfig {
        trials: a.trials,
        seed: a.seed,
        flip_sign: a.flip_sign,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&config)?;
    print!("{}", report.text());
    if let Some(path) = &a.out {
        let path = output_path(path);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_text(&path, &(report.to_json() + "\n"))?;
        RunManifest {
            command: "gradcheck".into(),
            args: argv.to_vec(),
            version: version_string(),
            config: serde_json::json!({
                "trials": config.trials,
                "seed": config.seed,
                "step": config.step,
                "tolerance": config.tolerance,
            }),
            seeds: vec![config.seed],
            inputs: vec![],
            outputs: vec![path.clone()],
            wall_time_s: start.elapsed().as_secs_f64(),
        }
        .write(&sibling_manifest(&path))?;
    }
    if report.passed {
        Ok(0)
    } else {
        let names: Vec<&str> = report
            .failed_components()
            .iter()
            .map(|c| c.name())
            .collect();
        eprintln!("gradcheck failed: {}", names.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PredictionLine {
    pub id: String,
    /// `[x, y, depth]` per joint, pixels.
    pub joints: Vec<[f64; 3]>,
    /// Depth regressor output in network units.
    pub raw: Vec<f64>,
    pub rescaled: bool,
}

fn predict(a: &PredictArgs, argv: &[String], start: Instant) -> Result<i32> {
    let checkpoint = Checkpoint::load(&a.model)?;
    let skeleton_path = match &a.skeleton {
        Some(p) => p.clone(),
        None => a
            .input
            .parent()
            .unwrap_or(Path::new("."))
            .join(SKELETON_FILE),
    };
    let skeleton = Skeleton::load(&skeleton_path)?;
    let model = checkpoint.config.model_spec(&skeleton);
    checkpoint
        .state
        .check_shapes(&checkpoint.config.model_config(&skeleton))?;
    let (file, _) = DatasetFile::load(&a.input, &skeleton)?;

    let mut text = String::new();
    for s in &file.records {
        let p = model.predict(&checkpoint.state, s)?;
        let mut pose = p.pose();
        if a.rescale {
            // root-relative depths: the labelled 2D root at depth zero anchors the pose
            let r = s.joints2d.0[skeleton.root()];
            pose = align_and_rescale(&pose, [r[0], r[1], 0.0], skeleton.avg_sum_len(), &skeleton)?;
        }
        let line = PredictionLine {
            id: s.id.clone(),
            joints: pose.0,
            raw: p.raw,
            rescaled: a.rescale,
        };
        text.push_str(&serde_json::to_string(&line).expect("prediction serializes"));
        text.push('\n');
    }
    let out = output_path(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_text(&out, &text)?;
    RunManifest {
        command: "predict".into(),
        args: argv.to_vec(),
        version: version_string(),
        config: serde_json::json!({ "rescale": a.rescale, "model_config": checkpoint.config }),
        seeds: vec![checkpoint.config.seed],
        inputs: vec![a.model.clone(), a.input.clone(), skeleton_path],
        outputs: vec![out.clone()],
        wall_time_s: start.elapsed().as_secs_f64(),
    }
    .write(&sibling_manifest(&out))?;
    println!(
        "wrote {} predictions to {}",
        file.records.len(),
        out.display()
    );
    Ok(0)
}

fn report(a: &ReportArgs) -> Result<i32> {
    let text = read_text(&a.path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::data(e.line(), format!("not JSON: {e}")).with_path(&a.path))?;
    let has = |k: &str| value.get(k).is_some();
    let rendered = if has("mpjpe_mm") {
        MetricsReport::from_json(&text)
            .map_err(|e| e.with_path(&a.path))?
            .text_table()
    } else if has("stages") {
        let run: RunReport = serde_json::from_value(value)
            .map_err(|e| Error::data(1, format!("bad run report: {e}")).with_path(&a.path))?;
        run_table(&run)
    } else if has("components") {
        let gc: GradcheckReport = serde_json::from_value(value)
            .map_err(|e| Error::data(1, format!("bad gradcheck report: {e}")).with_path(&a.path))?;
        gc.text()
    } else {
        return Err(Error::data(1, "unrecognized report kind").with_path(&a.path));
    };
    print!("{rendered}");
    Ok(0)
}

fn run_table(run: &RunReport) -> String {
    let mut out = format!(
        "ablation {}  seed {}  config {}  wall {:.1}s\n",
        run.config.ablation.name(),
        run.config.seed,
        &run.config_hash[..12.min(run.config_hash.len())],
        run.wall_time_s
    );
    out.push_str("stage  iterations  final total      l2d          reg          geo\n");
    for s in &run.stages {
        match s.log.last() {
            Some(r) => out.push_str(&format!(
                "{:>5}  {:>10}  {:<12.6} {:<12.6} {:<12.6} {:<12.6}\n",
                s.stage, s.iterations, r.total, r.l2d, r.reg, r.geo
            )),
            None => out.push_str(&format!("{:>5}  {:>10}  -\n", s.stage, s.iterations)),
        }
    }
    out
}
