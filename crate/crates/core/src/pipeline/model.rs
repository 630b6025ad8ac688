//! The trained model: a 2D module that refines the observed joints and a depth
//! regressor that lifts the refined joints to per-joint depth.
//!
//! The 2D module sees the root-centred observed joints plus the appearance vector
//! and predicts a per-joint correction, supervised by the heatmap loss against the
//! labelled joints. The depth regressor sees only the root-centred refined joints
//! (optionally with a pooled heatmap of the observation), so improvements of the
//! 2D module on a new domain carry over to depth. Gradients of the depth loss
//! flow back through the refined joints into the 2D module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    depth_supervision_loss, render_heatmap, rendered_heatmap_loss, HeatmapGeometry, LossComponents,
    LossWeights,
};
use crate::regressor::{self, Activation, Gradients, RegressorConfig, RegressorState};
use crate::sample::PoseSample;
use crate::skeleton::{DepthVector, Pose2D, Pose3D, Skeleton};

/// Side of the pooled heatmap grid used as optional extra input.
pub const POOLED_GRID: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub joints: usize,
    pub root: usize,
    pub appearance_dim: usize,
    /// Pixels per input unit of the root-centred 2D features.
    pub feature_scale: f64,
    /// Pixels per network depth unit.
    pub depth_scale: f64,
    /// Pixels per output unit of the 2D module.
    pub offset_scale: f64,
    /// Use the 2D refinement module; without it the depth regressor reads the observation directly.
    pub two_d_head: bool,
    /// Append an area-pooled 8x8 heatmap of the observed joints to the depth input.
    pub heatmap_features: bool,
    pub geometry: HeatmapGeometry,
}

/// Network hyper-parameters shared by both modules.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSettings {
    pub depth_hidden: Vec<usize>,
    pub refine_hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Regressor configurations of both modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub refine: Option<RegressorConfig>,
    pub depth: RegressorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub refine: Option<RegressorState>,
    pub depth: RegressorState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub refine: Option<Gradients>,
    pub depth: Gradients,
}

impl ModelConfig {
    pub fn init(&self) -> Result<ModelState> {
        Ok(ModelState {
            refine: self.refine.as_ref().map(regressor::init).transpose()?,
            depth: regressor::init(&self.depth)?,
        })
    }
}

impl ModelState {
    pub fn step(&self) -> u64 {
        self.depth.step
    }

    pub fn is_finite(&self) -> bool {
        self.depth.is_finite() && self.refine.as_ref().is_none_or(|r| r.is_finite())
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        self.depth.check_shapes(&config.depth)?;
        match (&self.refine, &config.refine) {
            (Some(s), Some(c)) => s.check_shapes(c),
            (None, None) => Ok(()),
            _ => Err(Error::Config(
                "2D module presence differs between state and configuration".into(),
            )),
        }
    }

    /// Every trainable parameter, in the order of [`ModelGradients::values`].
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.refine
            .iter_mut()
            .flat_map(|r| r.layers.iter_mut())
            .chain(self.depth.layers.iter_mut())
            .flat_map(|l| l.values_mut())
    }

    /// Apply one momentum-SGD update to both modules.
    pub fn sgd_step(&mut self, grads: &ModelGradients, config: &ModelConfig) -> Result<()> {
        if let (Some(s), Some(g), Some(c)) = (&mut self.refine, &grads.refine, &config.refine) {
            regressor::sgd_step(s, g, c)?;
        }
        regressor::sgd_step(&mut self.depth, &grads.depth, &config.depth)
    }
}

impl ModelGradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        ModelGradients {
            refine: state.refine.as_ref().map(Gradients::zeros_like),
            depth: Gradients::zeros_like(&state.depth),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.depth.scale(factor);
        if let Some(r) = &mut self.refine {
            r.scale(factor);
        }
    }

    /// All entries, 2D module first.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.refine.iter().flat_map(|g| g.iter().copied()).collect();
        v.extend(self.depth.iter().copied());
        v
    }
}

fn root_centred(pose: &Pose2D, root: usize, scale: f64, out: &mut Vec<f64>) {
    let r = pose.0[root];
    for p in &pose.0 {
        out.push((p[0] - r[0]) / scale);
        out.push((p[1] - r[1]) / scale);
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_scale", self.feature_scale),
            ("depth_scale", self.depth_scale),
            ("offset_scale", self.offset_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.joints == 0 || self.root >= self.joints {
            return Err(Error::Config(format!(
                "root joint {} out of range for {} joints",
                self.root, self.joints
            )));
        }
        self.geometry.validate()?;
        if self.heatmap_features
            && (!self.geometry.height.is_multiple_of(POOLED_GRID)
                || !self.geometry.width.is_multiple_of(POOLED_GRID))
        {
            return Err(Error::Config(format!(
                "heatmap features need a heatmap size divisible by {POOLED_GRID}"
            )));
        }
        Ok(())
    }

    pub fn refine_input_dim(&self) -> usize {
        2 * self.joints + self.appearance_dim
    }

    pub fn depth_input_dim(&self) -> usize {
        let pooled = if self.heatmap_features {
            self.joints * POOLED_GRID * POOLED_GRID
        } else {
            0
        };
        2 * self.joints + pooled
    }

    pub fn config(&self, net: &NetSettings) -> ModelConfig {
        let make = |input_dim, hidden: &Vec<usize>, output_dim, seed| RegressorConfig {
            input_dim,
            hidden_dims: hidden.clone(),
            output_dim,
            activation: net.activation,
            seed,
            learning_rate: net.learning_rate,
            momentum: net.momentum,
            frozen_layers: vec![],
        };
        ModelConfig {
            refine: self.two_d_head.then(|| {
                make(
                    self.refine_input_dim(),
                    &net.refine_hidden,
                    2 * self.joints,
                    net.seed.wrapping_add(1),
                )
            }),
            depth: make(
                self.depth_input_dim(),
                &net.depth_hidden,
                self.joints,
                net.seed,
            ),
        }
    }

    /// 2D joints the model sees: detector output when present, else the labels.
    pub fn observed<'a>(&self, sample: &'a PoseSample) -> &'a Pose2D {
        sample
            .evidence
            .as_ref()
            .map(|e| &e.observed2d)
            .unwrap_or(&sample.joints2d)
    }

    fn check_observed(&self, sample: &PoseSample) -> Result<()> {
        let n = self.observed(sample).len();
        if n != self.joints {
            return Err(Error::Dimension {
                context: "observed joints",
                expected: self.joints,
                actual: n,
            });
        }
        Ok(())
    }

    pub fn refine_features(&self, sample: &PoseSample) -> Result<Vec<f64>> {
        self.check_observed(sample)?;
        let mut x = Vec::with_capacity(self.refine_input_dim());
        root_centred(self.observed(sample), self.root, self.feature_scale, &mut x);
        match sample.evidence.as_ref().map(|e| &e.appearance) {
            Some(a) if a.len() == self.appearance_dim => x.extend_from_slice(a),
            Some(a) => {
                return Err(Error::MalformedSample {
                    id: sample.id.clone(),
                    message: format!(
                        "appearance has {} values, model expects {}",
                        a.len(),
                        self.appearance_dim
                    ),
                })
            }
            None => x.extend(std::iter::repeat_n(0.0, self.appearance_dim)),
        }
        Ok(x)
    }

    /// Depth input for given refined joints.
    pub fn depth_features(&self, refined: &Pose2D, sample: &PoseSample) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.depth_input_dim());
        root_centred(refined, self.root, self.feature_scale, &mut x);
        if self.heatmap_features {
            // pooled from the observation, so it carries no gradient
            let maps = render_heatmap(self.observed(sample), self.geometry)?;
            let (bh, bw) = (
                self.geometry.height / POOLED_GRID,
                self.geometry.width / POOLED_GRID,
            );
            let norm = 1.0 / (bh * bw) as f64;
            for j in 0..self.joints {
                let map = maps.map(j);
                for gr in 0..POOLED_GRID {
                    for gc in 0..POOLED_GRID {
                        let mut s = 0.0;
                        for r in gr * bh..(gr + 1) * bh {
                            let row = &map[r * self.geometry.width..];
                            s += row[gc * bw..(gc + 1) * bw].iter().sum::<f64>();
                        }
                        x.push(s * norm);
                    }
                }
            }
        }
        Ok(x)
    }

    fn refine(
        &self,
        state: &ModelState,
        sample: &PoseSample,
    ) -> Result<(Pose2D, Option<regressor::ForwardCache>)> {
        self.check_observed(sample)?;
        let obs = self.observed(sample);
        match &state.refine {
            Some(net) => {
                let (out, cache) = regressor::forward(net, &self.refine_features(sample)?)?;
                let refined = Pose2D(
                    obs.0
                        .iter()
                        .enumerate()
                        .map(|(k, p)| {
                            [
                                p[0] + self.offset_scale * out[2 * k],
                                p[1] + self.offset_scale * out[2 * k + 1],
                            ]
                        })
                        .collect(),
                );
                Ok((refined, Some(cache)))
            }
            None => Ok((obs.clone(), None)),
        }
    }

    pub fn predict(&self, state: &ModelState, sample: &PoseSample) -> Result<Prediction> {
        let (joints2d, _) = self.refine(state, sample)?;
        let (out, _) = regressor::forward(&state.depth, &self.depth_features(&joints2d, sample)?)?;
        Ok(Prediction {
            depths: DepthVector(out.iter().map(|d| d * self.depth_scale).collect()),
            joints2d,
            raw: out,
        })
    }

    /// Copy of a labelled sample with depths converted to network units.
    pub fn to_network_units(&self, sample: &PoseSample) -> PoseSample {
        PoseSample {
            depths: sample
                .depths
                .as_ref()
                .map(|d| DepthVector(d.0.iter().map(|v| v / self.depth_scale).collect())),
            ..sample.clone()
        }
    }

    /// Loss of one sample (labels already in network units) and the parameter gradient.
    pub fn sample_loss(
        &self,
        state: &ModelState,
        sample: &PoseSample,
        skeleton: &Skeleton,
        weights: &LossWeights,
        train_2d: bool,
    ) -> Result<(LossComponents, ModelGradients)> {
        let mut grads = ModelGradients::zeros_like(state);
        let c = self.accumulate_loss(state, sample, skeleton, weights, train_2d, &mut grads)?;
        Ok((c, grads))
    }

    /// [`Self::sample_loss`] adding the parameter gradient into `grads`.
    /// With `train_2d` unset the 2D module receives no gradient at all.
    pub fn accumulate_loss(
        &self,
        state: &ModelState,
        sample: &PoseSample,
        skeleton: &Skeleton,
        weights: &LossWeights,
        train_2d: bool,
        grads: &mut ModelGradients,
    ) -> Result<LossComponents> {
        let (refined, refine_cache) = self.refine(state, sample)?;
        let (depth_out, depth_cache) =
            regressor::forward(&state.depth, &self.depth_features(&refined, sample)?)?;
        let depth = DepthVector(depth_out);
        let dep = depth_supervision_loss(&depth, sample, skeleton, weights, self.depth_scale)?;
        let grad_in = regressor::backward_into(
            &state.depth,
            &depth_cache,
            &dep.grad_depth.0,
            &mut grads.depth,
        )?;
        let mut l2d = 0.0;
        if let (Some(net), Some(cache), Some(g), true) =
            (&state.refine, &refine_cache, &mut grads.refine, train_2d)
        {
            let (v, mut grad_refined) =
                rendered_heatmap_loss(&refined, &sample.joints2d, self.geometry)?;
            l2d = v;
            // chain through the root-centred depth input
            let mut root_sum = [0.0; 2];
            for (k, gr) in grad_refined.iter_mut().enumerate() {
                for a in 0..2 {
                    let gi = grad_in[2 * k + a] / self.feature_scale;
                    gr[a] += gi;
                    root_sum[a] += gi;
                }
            }
            grad_refined[self.root][0] -= root_sum[0];
            grad_refined[self.root][1] -= root_sum[1];
            let grad_out: Vec<f64> = grad_refined
                .iter()
                .flat_map(|g| [self.offset_scale * g[0], self.offset_scale * g[1]])
                .collect();
            regressor::backward_into(net, cache, &grad_out, g)?;
        }
        Ok(LossComponents {
            total: l2d + dep.value,
            l2d,
            reg: dep.reg,
            geo: dep.geo,
        })
    }
}

/// Model output for one sample, depths converted back to pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub joints2d: Pose2D,
    pub depths: DepthVector,
    /// Depth regressor output in network units.
    pub raw: Vec<f64>,
}

impl Prediction {
    pub fn pose(&self) -> Pose3D {
        Pose3D::from_parts(&self.joints2d, &self.depths).expect("heads agree on joint count")
    }

    /// Predicted depths attached to the sample's labelled 2D joints.
    pub fn pose_with_labels(&self, sample: &PoseSample) -> Result<Pose3D> {
        Pose3D::from_parts(&sample.joints2d, &self.depths)
    }
}
