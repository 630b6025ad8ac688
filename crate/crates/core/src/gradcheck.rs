//! Finite-difference certification of the analytic gradients.
//!
//! Each trial draws a random instance, evaluates the analytic gradient and
//! compares it with central differences. The error of one instance is
//! `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`, so
//! entries that are tiny next to the rest of the gradient do not dominate.
//!
//! Three components are checked:
//! * `geo`: the geometric loss with respect to depths on the 16-joint skeleton;
//! * `heatmap`: the rendered heatmap loss with respect to predicted joints;
//! * `end_to_end`: the full training loss of a small two-module model (4 joints,
//!   one hidden layer of 8 units in each module) with respect to every parameter.
//!
//! The model check uses a tanh activation because central differences across a
//! rectifier kink measure the kink, not the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    geo_loss, geo_loss_value, rendered_heatmap_loss, HeatmapGeometry, LossWeights,
};
use crate::pipeline::{ModelGradients, ModelSpec, NetSettings};
use crate::regressor::Activation;
use crate::sample::{Evidence, PoseSample, Supervision};
use crate::skeleton::{DepthVector, Pose2D, Skeleton};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Geo,
    Heatmap,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Geo, Component::Heatmap, Component::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Component::Geo => "geo",
            Component::Heatmap => "heatmap",
            Component::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: negate the analytic gradient of this component.
    pub flip_sign: Option<Component>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            seed: 1,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            flip_sign: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Trial index holding the maximum.
    pub worst_trial: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn text(&self) -> String {
        let mut out = format!(
            "gradcheck: {} trials, seed {}, h = {:e}, tolerance {:e}\n",
            self.trials, self.seed, self.step, self.tolerance
        );
        for c in &self.components {
            out.push_str(&format!(
                "  {:<11} max rel error {:.3e} (trial {:>4})  {}\n",
                c.component.name(),
                c.max_rel_error,
                c.worst_trial,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }

    pub fn failed_components(&self) -> Vec<Component> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component)
            .collect()
    }
}

/// Error of one analytic gradient against its numeric estimate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
pub fn central_differences(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Four joints: a root with two limbs, one of them two bones long.
pub fn tiny_skeleton() -> Skeleton {
    Skeleton::from_json_str(TINY_SKELETON).expect("built-in tiny skeleton is valid")
}

const TINY_SKELETON: &str = r#"{
  "joint_names": ["root", "left", "right", "tip"],
  "bones": [
    {"name": "root_left", "parent": 0, "child": 1},
    {"name": "root_right", "parent": 0, "child": 2},
    {"name": "right_tip", "parent": 2, "child": 3}
  ],
  "groups": [{"name": "all", "bones": [0, 1, 2]}],
  "canonical_lengths": [30.0, 30.0, 20.0],
  "length_unit": "px",
  "symmetric_pairs": [{"name": "limb", "left": 0, "right": 1}],
  "root": 0,
  "neck": 3,
  "hips": {"left": 1, "right": 2},
  "head_bone": 2
}"#;

fn geo_instance(rng: &mut ChaCha8Rng, skeleton: &Skeleton) -> (Pose2D, Vec<f64>, f64) {
    let j = skeleton.num_joints();
    let joints = Pose2D(
        (0..j)
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect(),
    );
    let depths = (0..j).map(|_| rng.random_range(-60.0..60.0)).collect();
    (joints, depths, rng.random_range(0.5..2.0))
}

fn check_geo(rng: &mut ChaCha8Rng, skeleton: &Skeleton, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (joints, depths, scale) = geo_instance(rng, skeleton);
    let analytic = geo_loss(&DepthVector(depths.clone()), &joints, skeleton, scale)?
        .grad_depth
        .0;
    let numeric = central_differences(&depths, h, |d| {
        Ok(geo_loss_value(&DepthVector(d.to_vec()), &joints, skeleton, scale)?.0)
    })?;
    Ok((analytic, numeric))
}

fn check_heatmap(rng: &mut ChaCha8Rng, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let geometry = HeatmapGeometry::default();
    let j = 16;
    let gt = Pose2D(
        (0..j)
            .map(|_| [rng.random_range(8.0..248.0), rng.random_range(8.0..248.0)])
            .collect(),
    );
    let pred = Pose2D(
        gt.0.iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(-8.0..8.0),
                    p[1] + rng.random_range(-8.0..8.0),
                ]
            })
            .collect(),
    );
    let (_, grad) = rendered_heatmap_loss(&pred, &gt, geometry)?;
    let analytic: Vec<f64> = grad.iter().flat_map(|g| [g[0], g[1]]).collect();
    let flat: Vec<f64> = pred.0.iter().flat_map(|p| [p[0], p[1]]).collect();
    let numeric = central_differences(&flat, h, |x| {
        let p = Pose2D(x.chunks(2).map(|c| [c[0], c[1]]).collect());
        Ok(rendered_heatmap_loss(&p, &gt, geometry)?.0)
    })?;
    Ok((analytic, numeric))
}

fn model_instance(rng: &mut ChaCha8Rng, skeleton: &Skeleton) -> PoseSample {
    let j = skeleton.num_joints();
    let root = [rng.random_range(96.0..160.0), rng.random_range(96.0..160.0)];
    let joints = Pose2D(
        (0..j)
            .map(|k| {
                if k == skeleton.root() {
                    root
                } else {
                    [
                        root[0] + rng.random_range(-40.0..40.0),
                        root[1] + rng.random_range(-40.0..40.0),
                    ]
                }
            })
            .collect(),
    );
    let observed = Pose2D(
        joints
            .0
            .iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(-3.0..3.0),
                    p[1] + rng.random_range(-3.0..3.0),
                ]
            })
            .collect(),
    );
    let full = rng.random_bool(0.5);
    PoseSample {
        id: "gradcheck".into(),
        supervision: if full {
            Supervision::Full3d
        } else {
            Supervision::Weak2d
        },
        joints2d: joints,
        depths: full.then(|| DepthVector((0..j).map(|_| rng.random_range(-40.0..40.0)).collect())),
        source: String::new(),
        evidence: Some(Evidence {
            observed2d: observed,
            appearance: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }),
    }
}

fn check_end_to_end(
    rng: &mut ChaCha8Rng,
    skeleton: &Skeleton,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let model = ModelSpec {
        joints: skeleton.num_joints(),
        root: skeleton.root(),
        appearance_dim: 2,
        feature_scale: 64.0,
        depth_scale: [1.0, 16.0, 64.0][rng.random_range(0..3)],
        offset_scale: 4.0,
        two_d_head: true,
        heatmap_features: false,
        geometry: HeatmapGeometry::default(),
    };
    let config = model.config(&NetSettings {
        depth_hidden: vec![8],
        refine_hidden: vec![8],
        activation: Activation::Tanh,
        seed: rng.random(),
        learning_rate: 0.01,
        momentum: 0.9,
    });
    let mut state = config.init()?;
    // move biases off zero so every parameter matters
    for p in state.parameters_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let sample = model.to_network_units(&model_instance(rng, skeleton));
    let weights = LossWeights {
        lambda_reg: 0.1,
        lambda_geo: 1.0,
        apply_geo_to_3d: rng.random_bool(0.5),
    };
    let mut grads = ModelGradients::zeros_like(&state);
    model.accumulate_loss(&state, &sample, skeleton, &weights, true, &mut grads)?;
    let analytic = grads.values();
    let params: Vec<f64> = state.parameters_mut().map(|p| *p).collect();
    let mut probe = state.clone();
    let numeric = central_differences(&params, h, |x| {
        for (p, v) in probe.parameters_mut().zip(x) {
            *p = *v;
        }
        let mut scratch = ModelGradients::zeros_like(&probe);
        Ok(model
            .accumulate_loss(&probe, &sample, skeleton, &weights, true, &mut scratch)?
            .total)
    })?;
    Ok((analytic, numeric))
}

/// Run every component over `config.trials` random instances.
pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let full = Skeleton::mpii16();
    let tiny = tiny_skeleton();
    let mut components = Vec::new();
    for (stream, component) in Component::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream as u64);
        let mut worst = (0.0f64, 0usize);
        for trial in 0..config.trials {
            let (mut analytic, numeric) = match component {
                Component::Geo => check_geo(&mut rng, &full, config.step)?,
                Component::Heatmap => check_heatmap(&mut rng, config.step)?,
                Component::EndToEnd => check_end_to_end(&mut rng, &tiny, config.step)?,
            };
            if config.flip_sign == Some(component) {
                analytic.iter_mut().for_each(|a| *a = -*a);
            }
            let err = relative_error(&analytic, &numeric);
            // NaN must never pass
            if !(err <= worst.0) {
                worst = (err, trial);
            }
        }
        components.push(ComponentResult {
            component,
            instances: config.trials,
            max_rel_error: worst.0,
            worst_trial: worst.1,
            passed: worst.0 < config.tolerance,
        });
    }
    Ok(GradcheckReport {
        trials: config.trials,
        seed: config.seed,
        step: config.step,
        tolerance: config.tolerance,
        passed: components.iter().all(|c| c.passed),
        components,
    })
}
