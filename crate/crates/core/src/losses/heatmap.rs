//! Gaussian heatmap rendering, the summed squared heatmap loss, and argmax decoding.
//!
//! Cell `(row, col)` has its centre at input pixel `((col + 0.5) * stride, (row + 0.5) * stride)`.
//! A joint is in the field when `0 <= x < width * stride` and `0 <= y < height * stride`;
//! joints outside render as all-zero maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Pose2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGeometry {
    pub height: usize,
    pub width: usize,
    /// Input pixels per heatmap cell.
    pub stride: f64,
    /// Gaussian standard deviation in cells.
    pub sigma: f64,
}

impl Default for HeatmapGeometry {
    fn default() -> Self {
        HeatmapGeometry {
            height: 64,
            width: 64,
            stride: 4.0,
            sigma: 1.0,
        }
    }
}

impl HeatmapGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("heatmap resolution must be non-zero".into()));
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return Err(Error::Config(format!(
                "heatmap stride must be > 0, got {}",
                self.stride
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "heatmap sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn in_field(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] < self.width as f64 * self.stride
            && p[1] < self.height as f64 * self.stride
    }

    /// Continuous cell-index coordinates `(col, row)` of an input-pixel location.
    fn to_cells(&self, p: [f64; 2]) -> (f64, f64) {
        (p[0] / self.stride - 0.5, p[1] / self.stride - 0.5)
    }

    /// 1D Gaussian profile along one axis, centred at cell coordinate `centre`.
    ///
    /// Built outward from the cell nearest the centre with the ratio recurrence
    /// `e[i+1] / e[i] = exp(-(2 (i - c) + 1) / 2s^2)`, whose ratios themselves shrink
    /// by `exp(-1/s^2)` per cell. Three `exp` calls instead of `len`.
    fn profile(&self, len: usize, centre: f64) -> Vec<f64> {
        let denom = 2.0 * self.sigma * self.sigma;
        let mut out = vec![0.0; len];
        if len == 0 {
            return out;
        }
        let i0 = centre.round().clamp(0.0, (len - 1) as f64) as usize;
        let t0 = i0 as f64 - centre;
        out[i0] = (-t0 * t0 / denom).exp();
        let q = (-2.0 / denom).exp();
        let mut e = out[i0];
        let mut r = (-(2.0 * t0 + 1.0) / denom).exp();
        for v in &mut out[i0 + 1..] {
            e *= r;
            r *= q;
            *v = e;
        }
        let mut e = out[i0];
        let mut r = (-(1.0 - 2.0 * t0) / denom).exp();
        for v in out[..i0].iter_mut().rev() {
            e *= r;
            r *= q;
            *v = e;
        }
        out
    }
}

/// J maps of `height x width` cells stored row-major, one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub geometry: HeatmapGeometry,
    pub maps: Vec<f64>,
    /// Set for joints whose rendered map is empty because the joint lies outside the field.
    pub out_of_field: Vec<bool>,
}

impl HeatmapStack {
    pub fn zeros(joints: usize, geometry: HeatmapGeometry) -> Self {
        HeatmapStack {
            geometry,
            maps: vec![0.0; joints * geometry.height * geometry.width],
            out_of_field: vec![false; joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.out_of_field.len()
    }

    pub fn map(&self, joint: usize) -> &[f64] {
        let n = self.geometry.height * self.geometry.width;
        &self.maps[joint * n..(joint + 1) * n]
    }

    pub fn map_mut(&mut self, joint: usize) -> &mut [f64] {
        let n = self.geometry.height * self.geometry.width;
        &mut self.maps[joint * n..(joint + 1) * n]
    }

    pub fn at(&self, joint: usize, row: usize, col: usize) -> f64 {
        self.map(joint)[row * self.geometry.width + col]
    }
}

/// Render one peak-1 Gaussian bump per joint.
pub fn render_heatmap(joints: &Pose2D, geometry: HeatmapGeometry) -> Result<HeatmapStack> {
    geometry.validate()?;
    let mut stack = HeatmapStack::zeros(joints.len(), geometry);
    for (j, &p) in joints.0.iter().enumerate() {
        if !geometry.in_field(p) {
            stack.out_of_field[j] = true;
            continue;
        }
        let (u, v) = geometry.to_cells(p);
        let gx = geometry.profile(geometry.width, u);
        let gy = geometry.profile(geometry.height, v);
        let map = stack.map_mut(j);
        for (row, &wy) in gy.iter().enumerate() {
            for (col, &wx) in gx.iter().enumerate() {
                map[row * geometry.width + col] = wy * wx;
            }
        }
    }
    Ok(stack)
}

/// Sum of squared differences over all maps and cells, with gradient `2 (pred - gt)`.
pub fn heatmap_loss(pred: &HeatmapStack, gt: &HeatmapStack) -> Result<(f64, HeatmapStack)> {
    let pg = &pred.geometry;
    let gg = &gt.geometry;
    if pg.height != gg.height || pg.width != gg.width {
        return Err(Error::Dimension {
            context: "heatmap cells",
            expected: gg.height * gg.width,
            actual: pg.height * pg.width,
        });
    }
    if pred.maps.len() != gt.maps.len() {
        return Err(Error::Dimension {
            context: "heatmap values",
            expected: gt.maps.len(),
            actual: pred.maps.len(),
        });
    }
    let mut value = 0.0;
    let mut grad = HeatmapStack::zeros(pred.num_joints(), pred.geometry);
    for ((g, &a), &b) in grad.maps.iter_mut().zip(&pred.maps).zip(&gt.maps) {
        let diff = a - b;
        value += diff * diff;
        *g = 2.0 * diff;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedJoints {
    pub joints: Pose2D,
    /// Set where the map had no positive value; the joint is then reported at the origin.
    pub low_confidence: Vec<bool>,
}

/// Argmax per map, mapped back to the centre of the winning cell in input pixels.
/// Ties go to the lowest row-major index.
pub fn decode_heatmap(stack: &HeatmapStack) -> Result<DecodedJoints> {
    let geo = stack.geometry;
    if stack.num_joints() == 0 || geo.height * geo.width == 0 {
        return Err(Error::Dimension {
            context: "heatmap decode",
            expected: 1,
            actual: 0,
        });
    }
    let mut joints = Vec::with_capacity(stack.num_joints());
    let mut low_confidence = Vec::with_capacity(stack.num_joints());
    for j in 0..stack.num_joints() {
        let map = stack.map(j);
        let mut best = 0usize;
        for (i, &v) in map.iter().enumerate() {
            if v > map[best] {
                best = i;
            }
        }
        if map[best] <= 0.0 || !map[best].is_finite() {
            joints.push([0.0, 0.0]);
            low_confidence.push(true);
            continue;
        }
        let (row, col) = (best / geo.width, best % geo.width);
        joints.push([
            (col as f64 + 0.5) * geo.stride,
            (row as f64 + 0.5) * geo.stride,
        ]);
        low_confidence.push(false);
    }
    Ok(DecodedJoints {
        joints: Pose2D(joints),
        low_confidence,
    })
}

fn self_dot(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Inner products along one axis between the predicted profile `p`, its derivative
/// `dp` (up to the constant factor) and the ground-truth profile `g`.
struct AxisTerms {
    pp: f64,
    p_dp: f64,
    pg: f64,
    dp_g: f64,
}

impl AxisTerms {
    fn new(p: &[f64], g: Option<&[f64]>, centre: f64) -> Self {
        let mut t = AxisTerms {
            pp: 0.0,
            p_dp: 0.0,
            pg: 0.0,
            dp_g: 0.0,
        };
        for (i, &e) in p.iter().enumerate() {
            let de = e * (i as f64 - centre);
            t.pp += e * e;
            t.p_dp += e * de;
            if let Some(g) = g {
                t.pg += e * g[i];
                t.dp_g += de * g[i];
            }
        }
        t
    }
}

/// `heatmap_loss(render(pred), render(gt))` and its gradient with respect to the
/// predicted joint coordinates, evaluated through the separable Gaussian profile
/// in O(J (H + W)) rather than O(J H W).
pub fn rendered_heatmap_loss(
    pred: &Pose2D,
    gt: &Pose2D,
    geometry: HeatmapGeometry,
) -> Result<(f64, Vec<[f64; 2]>)> {
    geometry.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            context: "rendered heatmap loss",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    let s2 = geometry.sigma * geometry.sigma;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 2]; pred.len()];
    for (j, (&p, &g)) in pred.0.iter().zip(&gt.0).enumerate() {
        let p_in = geometry.in_field(p);
        let g_in = geometry.in_field(g);
        let axes_g = g_in.then(|| {
            let (u, v) = geometry.to_cells(g);
            (
                geometry.profile(geometry.width, u),
                geometry.profile(geometry.height, v),
            )
        });
        let gt_energy = axes_g
            .as_ref()
            .map_or(0.0, |(gx, gy)| self_dot(gx) * self_dot(gy));
        if !p_in {
            value += gt_energy;
            continue;
        }
        let (u, v) = geometry.to_cells(p);
        let ax = AxisTerms::new(
            &geometry.profile(geometry.width, u),
            axes_g.as_ref().map(|a| a.0.as_slice()),
            u,
        );
        let ay = AxisTerms::new(
            &geometry.profile(geometry.height, v),
            axes_g.as_ref().map(|a| a.1.as_slice()),
            v,
        );
        // profile derivatives carry a factor 1 / (sigma^2 * stride) per input pixel
        let k = 1.0 / (s2 * geometry.stride);
        value += ax.pp * ay.pp + gt_energy - 2.0 * ax.pg * ay.pg;
        grad[j] = [
            2.0 * k * (ax.p_dp * ay.pp - ax.dp_g * ay.pg),
            2.0 * k * (ay.p_dp * ax.pp - ay.dp_g * ax.pg),
        ];
    }
    Ok((value.max(0.0), grad))
}
