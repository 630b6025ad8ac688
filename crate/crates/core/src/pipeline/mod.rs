//! Mixed 3D/2D batch sampling, the three-stage schedule and the training loop.
//!
//! Stage 1 initializes the 2D pathway (at this scale: skipped, or a render/decode
//! identity check). Stage 2 trains end to end with the geometric term off.
//! Stage 3 switches it on. Each stage draws from its own RNG stream, seeded from
//! `(seed, stage)`, so a run resumed from a stage checkpoint matches an
//! uninterrupted one bit for bit.

pub mod checkpoint;
pub mod model;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{decode_heatmap, render_heatmap, HeatmapGeometry, LossWeights};
use crate::regressor::Activation;
use crate::sample::{PoseSample, Supervision};
use crate::skeleton::Skeleton;

pub use checkpoint::Checkpoint;
pub use model::{ModelConfig, ModelGradients, ModelSpec, ModelState, NetSettings, Prediction};

/// The four training configurations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// 3D-labelled data only, no geometric term.
    #[serde(rename = "3d")]
    ThreeD,
    /// 3D-labelled data only, geometric term applied to the labelled samples.
    #[serde(rename = "3d-geo")]
    ThreeDGeo,
    /// Half 3D, half 2D-only batches, no geometric term.
    #[serde(rename = "mixed")]
    Mixed,
    /// Half 3D, half 2D-only batches, geometric term on 2D-only samples in stage 3.
    #[serde(rename = "mixed-geo")]
    MixedGeo,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::ThreeD,
        Ablation::ThreeDGeo,
        Ablation::Mixed,
        Ablation::MixedGeo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::ThreeD => "3d",
            Ablation::ThreeDGeo => "3d-geo",
            Ablation::Mixed => "mixed",
            Ablation::MixedGeo => "mixed-geo",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation '{name}' (expected 3d, 3d-geo, mixed or mixed-geo)"
                ))
            })
    }

    pub fn uses_2d_pool(self) -> bool {
        matches!(self, Ablation::Mixed | Ablation::MixedGeo)
    }

    pub fn uses_geo(self) -> bool {
        matches!(self, Ablation::ThreeDGeo | Ablation::MixedGeo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Mode {
    Skip,
    IdentityCheck,
}

/// Flat training configuration; every key can be overridden from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub stage1_mode: Stage1Mode,
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub stage3_iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_reg: f64,
    /// Weight of the geometric term wherever it is active.
    pub lambda_geo: f64,
    /// Hidden layer widths of the depth regressor.
    pub hidden_dims: Vec<usize>,
    /// Hidden layer widths of the 2D refinement module.
    pub refine_hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Pixels per network depth unit. Sets how strongly the geometric term
    /// pulls relative to the depth regression term.
    pub depth_scale: f64,
    pub feature_scale: f64,
    pub offset_scale: f64,
    pub two_d_head: bool,
    pub heatmap_features: bool,
    pub heatmap_size: usize,
    pub heatmap_stride: f64,
    pub heatmap_sigma: f64,
    pub appearance_dim: usize,
    pub log_every: u64,
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            ablation: Ablation::MixedGeo,
            stage1_mode: Stage1Mode::Skip,
            stage1_iterations: 0,
            stage2_iterations: 20_000,
            stage3_iterations: 5_000,
            batch_size: 6,
            learning_rate: 2.5e-3,
            momentum: 0.9,
            lambda_reg: 0.1,
            lambda_geo: 0.01,
            hidden_dims: vec![128, 128],
            refine_hidden_dims: vec![64],
            activation: Activation::Relu,
            depth_scale: 64.0,
            feature_scale: 64.0,
            offset_scale: 4.0,
            two_d_head: true,
            heatmap_features: false,
            heatmap_size: 64,
            heatmap_stride: 4.0,
            heatmap_sigma: 1.0,
            appearance_dim: 4,
            log_every: 250,
            probe_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad training config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply a `key=value` override using the same parser as the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            // bare words such as `mixed-geo` or `relu`
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        *self = toml::from_str(&toml::to_string(&table).expect("table serializes"))
            .map_err(|e| Error::Config(format!("bad value for '{key}': {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and > 0, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be > 0".into()));
        }
        self.loss_weights().validate()?;
        self.geometry().validate()?;
        Ok(())
    }

    /// Loss weights for the whole run; the geometric weight is zeroed by ablations without it.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: self.lambda_reg,
            lambda_geo: if self.ablation.uses_geo() {
                self.lambda_geo
            } else {
                0.0
            },
            apply_geo_to_3d: self.ablation == Ablation::ThreeDGeo,
        }
    }

    pub fn geometry(&self) -> HeatmapGeometry {
        HeatmapGeometry {
            height: self.heatmap_size,
            width: self.heatmap_size,
            stride: self.heatmap_stride,
            sigma: self.heatmap_sigma,
        }
    }

    pub fn model_spec(&self, skeleton: &Skeleton) -> ModelSpec {
        ModelSpec {
            joints: skeleton.num_joints(),
            root: skeleton.root(),
            appearance_dim: self.appearance_dim,
            feature_scale: self.feature_scale,
            depth_scale: self.depth_scale,
            offset_scale: self.offset_scale,
            two_d_head: self.two_d_head,
            heatmap_features: self.heatmap_features,
            geometry: self.geometry(),
        }
    }

    pub fn model_config(&self, skeleton: &Skeleton) -> ModelConfig {
        self.model_spec(skeleton).config(&NetSettings {
            depth_hidden: self.hidden_dims.clone(),
            refine_hidden: self.refine_hidden_dims.clone(),
            activation: self.activation,
            seed: self.seed,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        })
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan {
            batch_size: self.batch_size,
            stage1_mode: self.stage1_mode,
            stages: vec![
                StageSpec {
                    index: 1,
                    iterations: self.stage1_iterations,
                    train_2d_head: true,
                    lambda_geo_active: false,
                    use_2d_pool: self.ablation.uses_2d_pool(),
                },
                StageSpec {
                    index: 2,
                    iterations: self.stage2_iterations,
                    train_2d_head: true,
                    lambda_geo_active: false,
                    use_2d_pool: self.ablation.uses_2d_pool(),
                },
                StageSpec {
                    index: 3,
                    iterations: self.stage3_iterations,
                    train_2d_head: true,
                    lambda_geo_active: true,
                    use_2d_pool: self.ablation.uses_2d_pool(),
                },
            ],
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1-based stage number.
    pub index: usize,
    pub iterations: u64,
    pub train_2d_head: bool,
    pub lambda_geo_active: bool,
    pub use_2d_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub batch_size: usize,
    pub stage1_mode: Stage1Mode,
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config("batch size must be even and > 0".into()));
        }
        let flags: Vec<(usize, bool)> = self
            .stages
            .iter()
            .map(|s| (s.index, s.lambda_geo_active))
            .collect();
        if flags != [(1, false), (2, false), (3, true)] {
            return Err(Error::Config(format!(
                "stages must be 1, 2 (geometric term off), 3 (on); got {flags:?}"
            )));
        }
        Ok(())
    }

    /// Loss weights in effect during `stage`.
    pub fn stage_weights(&self, stage: &StageSpec, weights: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_geo: if stage.lambda_geo_active {
                weights.lambda_geo
            } else {
                0.0
            },
            ..*weights
        }
    }
}

/// Loss terms that can receive gradient in one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveTerms {
    pub stage: usize,
    pub heatmap_on_3d: bool,
    pub heatmap_on_2d: bool,
    pub regression: bool,
    pub geo_on_2d: bool,
    pub geo_on_3d: bool,
}

/// Which loss terms each trained stage actually optimizes.
pub fn effective_terms(config: &TrainConfig) -> Vec<EffectiveTerms> {
    let plan = config.plan();
    let weights = config.loss_weights();
    plan.stages
        .iter()
        .filter(|s| s.index > 1)
        .map(|s| {
            let w = plan.stage_weights(s, &weights);
            let geo = w.lambda_geo > 0.0;
            let head = config.two_d_head && s.train_2d_head;
            EffectiveTerms {
                stage: s.index,
                heatmap_on_3d: head,
                heatmap_on_2d: head && s.use_2d_pool,
                regression: w.lambda_reg > 0.0,
                geo_on_2d: geo && s.use_2d_pool,
                geo_on_3d: geo && w.apply_geo_to_3d,
            }
        })
        .collect()
}

/// Draw a batch: half from each pool with replacement, or all 3D when the 2D pool is disabled.
pub fn sample_batch<'a, R: Rng>(
    pool3d: &'a [PoseSample],
    pool2d: Option<&'a [PoseSample]>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a PoseSample>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch size must be even and > 0, got {batch_size}"
        )));
    }
    if pool3d.is_empty() {
        return Err(Error::Config("the 3D-labelled pool is empty".into()));
    }
    let mut batch = Vec::with_capacity(batch_size);
    match pool2d {
        Some(p2) => {
            if p2.is_empty() {
                return Err(Error::Config("the 2D-only pool is empty".into()));
            }
            for _ in 0..batch_size / 2 {
                batch.push(&pool3d[rng.random_range(0..pool3d.len())]);
            }
            for _ in 0..batch_size / 2 {
                batch.push(&p2[rng.random_range(0..p2.len())]);
            }
        }
        None => {
            for _ in 0..batch_size {
                batch.push(&pool3d[rng.random_range(0..pool3d.len())]);
            }
        }
    }
    Ok(batch)
}

/// RNG stream of one stage.
pub fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Mean loss components over one logging interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    /// Iterations completed in this stage at the end of the interval.
    pub iteration: u64,
    /// Global optimizer step at the end of the interval.
    pub step: u64,
    pub total: f64,
    pub l2d: f64,
    pub reg: f64,
    pub geo: f64,
    /// Samples of each kind drawn during the interval.
    pub full3d: u64,
    pub weak2d: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub iterations: u64,
    pub wall_time_s: f64,
    pub log: Vec<LogRecord>,
    /// Largest render/decode error seen by the stage-1 identity check, in pixels.
    pub identity_check_max_error: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Raw network output on a training sample after the final stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub id: String,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub resumed_after_stage: Option<usize>,
    pub wall_time_s: f64,
    pub stages: Vec<StageReport>,
    pub probes: Vec<Probe>,
}

/// Training data: the labelled pool and the 2D-only pool (ignored by 3D-only ablations).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub pool3d: &'a [PoseSample],
    pub pool2d: &'a [PoseSample],
}

/// Test hook: corrupt the loss at a given global step to exercise the divergence path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectNan {
    pub at_step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where stage-boundary checkpoints go; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue after the stage recorded in this checkpoint.
    pub resume: Option<Checkpoint>,
    pub inject_nan: Option<InjectNan>,
    /// Stop after this stage instead of running the whole plan.
    pub stop_after: Option<usize>,
}

/// Everything a stage needs besides the state it mutates.
pub struct StageContext<'a> {
    pub config: &'a TrainConfig,
    pub model: &'a ModelSpec,
    pub model_config: &'a ModelConfig,
    pub skeleton: &'a Skeleton,
    pub weights: LossWeights,
    pub last_good: Option<&'a Path>,
    pub inject_nan: Option<InjectNan>,
}

fn check_pools(data: &TrainData, use_2d: bool) -> Result<()> {
    if let Some(bad) = data
        .pool3d
        .iter()
        .find(|s| s.supervision != Supervision::Full3d)
    {
        return Err(Error::Config(format!(
            "3D pool contains non-full3d sample {}",
            bad.id
        )));
    }
    if use_2d {
        if let Some(bad) = data
            .pool2d
            .iter()
            .find(|s| s.supervision != Supervision::Weak2d)
        {
            return Err(Error::Config(format!(
                "2D pool contains non-weak2d sample {}",
                bad.id
            )));
        }
    }
    Ok(())
}

/// Run one stage in place. Pools must already carry depth labels in network units.
pub fn run_stage(
    stage: &StageSpec,
    state: &mut ModelState,
    data: &TrainData,
    ctx: &StageContext,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LogRecord>> {
    let mut log = Vec::new();
    if stage.iterations == 0 {
        return Ok(log);
    }
    let pool2d = stage.use_2d_pool.then_some(data.pool2d);
    let mut acc = [0.0f64; 4];
    let mut counts = [0u64; 2];
    let mut in_interval = 0u64;
    let diverged = |step: u64, message: String| Error::Divergence {
        step,
        message,
        last_good: ctx.last_good.map(Path::to_path_buf),
    };
    for it in 1..=stage.iterations {
        let batch = sample_batch(data.pool3d, pool2d, batch_size, rng)?;
        let mut grads = ModelGradients::zeros_like(state);
        let mut sums = [0.0f64; 4];
        for s in &batch {
            match s.supervision {
                Supervision::Full3d => counts[0] += 1,
                Supervision::Weak2d => counts[1] += 1,
            }
            let c = ctx.model.accumulate_loss(
                state,
                s,
                ctx.skeleton,
                &ctx.weights,
                stage.train_2d_head,
                &mut grads,
            )?;
            for (a, v) in sums.iter_mut().zip([c.total, c.l2d, c.reg, c.geo]) {
                *a += v;
            }
        }
        if ctx.inject_nan.is_some_and(|f| f.at_step == state.step()) {
            sums[0] = f64::NAN;
        }
        if !sums[0].is_finite() {
            return Err(diverged(state.step(), "non-finite training loss".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        state
            .sgd_step(&grads, ctx.model_config)
            .map_err(|e| match e {
                Error::Divergence { step, message, .. } => diverged(step, message),
                other => other,
            })?;
        for (a, s) in acc.iter_mut().zip(sums) {
            *a += s * inv;
        }
        in_interval += 1;
        if it % ctx.config.log_every == 0 || it == stage.iterations {
            let n = in_interval as f64;
            log.push(LogRecord {
                stage: stage.index,
                iteration: it,
                step: state.step(),
                total: acc[0] / n,
                l2d: acc[1] / n,
                reg: acc[2] / n,
                geo: acc[3] / n,
                full3d: counts[0],
                weak2d: counts[1],
            });
            acc = [0.0; 4];
            counts = [0; 2];
            in_interval = 0;
        }
    }
    Ok(log)
}

/// Stage-1 identity check: render each sampled label and decode it again.
fn identity_check(
    stage: &StageSpec,
    data: &TrainData,
    geometry: HeatmapGeometry,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let pool2d = stage.use_2d_pool.then_some(data.pool2d);
    for _ in 0..stage.iterations {
        for s in sample_batch(data.pool3d, pool2d, batch_size, rng)? {
            let decoded = decode_heatmap(&render_heatmap(&s.joints2d, geometry)?)?;
            for (p, q) in decoded.joints.0.iter().zip(&s.joints2d.0) {
                if geometry.in_field(*q) {
                    worst = worst.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs());
                }
            }
        }
    }
    if worst > geometry.stride / 2.0 {
        return Err(Error::Config(format!(
            "render/decode identity check failed: error {worst} px exceeds half a stride"
        )));
    }
    Ok(worst)
}

/// Run the full plan (or its remainder after a resumed checkpoint).
pub fn train(
    config: &TrainConfig,
    data: &TrainData,
    skeleton: &Skeleton,
    options: &TrainOptions,
) -> Result<(ModelState, RunReport)> {
    config.validate()?;
    let plan = config.plan();
    plan.validate()?;
    let model = config.model_spec(skeleton);
    model.validate()?;
    let model_config = config.model_config(skeleton);
    check_pools(data, config.ablation.uses_2d_pool())?;
    let hash = config.config_hash();

    let (mut state, done, mut last_good) = match &options.resume {
        Some(ck) => {
            ck.verify(&hash, &model_config)?;
            (ck.state.clone(), ck.stage_completed, None)
        }
        None => (model_config.init()?, 0, None),
    };

    let pool3d: Vec<PoseSample> = data
        .pool3d
        .iter()
        .map(|s| model.to_network_units(s))
        .collect();
    let pool2d: &[PoseSample] = if config.ablation.uses_2d_pool() {
        data.pool2d
    } else {
        &[]
    };
    let net_data = TrainData {
        pool3d: &pool3d,
        pool2d,
    };
    let weights = config.loss_weights();
    let start = Instant::now();
    let mut stages = Vec::new();
    let last = options.stop_after.unwrap_or(usize::MAX);
    for spec in plan
        .stages
        .iter()
        .filter(|s| s.index > done && s.index <= last)
    {
        let t0 = Instant::now();
        let mut rng = stage_rng(config.seed, spec.index);
        let mut report = StageReport {
            stage: spec.index,
            iterations: spec.iterations,
            wall_time_s: 0.0,
            log: Vec::new(),
            identity_check_max_error: None,
            checkpoint: None,
        };
        if spec.index == 1 {
            if plan.stage1_mode == Stage1Mode::IdentityCheck {
                report.identity_check_max_error = Some(identity_check(
                    spec,
                    &net_data,
                    config.geometry(),
                    plan.batch_size,
                    &mut rng,
                )?);
            }
        } else {
            let ctx = StageContext {
                config,
                model: &model,
                model_config: &model_config,
                skeleton,
                weights: plan.stage_weights(spec, &weights),
                last_good: last_good.as_deref(),
                inject_nan: options.inject_nan,
            };
            report.log = run_stage(spec, &mut state, &net_data, &ctx, plan.batch_size, &mut rng)?;
        }
        if let Some(dir) = &options.checkpoint_dir {
            let path = dir.join(format!("stage{}.ckpt.json", spec.index));
            Checkpoint::new(config, spec.index, &state).save(&path)?;
            report.checkpoint = Some(path.clone());
            last_good = Some(path);
        }
        report.wall_time_s = t0.elapsed().as_secs_f64();
        stages.push(report);
    }

    let probes = data
        .pool3d
        .iter()
        .take(config.probe_samples)
        .map(|s| {
            Ok(Probe {
                id: s.id.clone(),
                output: model.predict(&state, s)?.raw,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        config: config.clone(),
        config_hash: hash,
        resumed_after_stage: options.resume.as_ref().map(|c| c.stage_completed),
        wall_time_s: start.elapsed().as_secs_f64(),
        stages,
        probes,
    };
    Ok((state, report))
}

impl RunReport {
    pub fn log_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.stages.iter().flat_map(|s| &s.log)
    }

    pub fn log_jsonl(&self) -> String {
        self.log_records()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("stage,iteration,step,total,l2d,reg,geo,full3d,weak2d\n");
        for r in self.log_records() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.stage, r.iteration, r.step, r.total, r.l2d, r.reg, r.geo, r.full3d, r.weak2d
            ));
        }
        out
    }
}
