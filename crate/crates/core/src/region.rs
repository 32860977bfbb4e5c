//! Safety assessment over the simplified space and the induced hypothesis.

use serde::{Deserialize, Serialize};

use crate::corrective::FeedbackGain;
use crate::dynamics::SystemState;
use crate::embedding::{map_state, Embedding};
use crate::error::{Error, Result};
use crate::safety::StateRanges;

pub const DEFAULT_P_T: f64 = 0.8;
/// Default kernel width as a fraction of the embedded bounding-box diagonal.
pub const DEFAULT_BANDWIDTH_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeRegionModel {
    pub embedding: Embedding,
    pub gamma_bandwidth: f64,
    pub p_t: f64,
    pub ranges: StateRanges,
    /// Corrective gain used to label the training set.
    pub gain: FeedbackGain,
}

/// Per-axis `(min, max)` of the embedded points.
pub fn bounding_box(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let dim = points.first().map_or(0, Vec::len);
    (0..dim)
        .map(|c| {
            points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[c]), hi.max(p[c]))
            })
        })
        .collect()
}

pub fn default_bandwidth(points: &[Vec<f64>], fraction: f64) -> f64 {
    let diag = bounding_box(points)
        .iter()
        .map(|(lo, hi)| (hi - lo) * (hi - lo))
        .sum::<f64>()
        .sqrt();
    fraction * diag
}

impl SafeRegionModel {
    pub fn new(
        embedding: Embedding,
        gamma_bandwidth: Option<f64>,
        p_t: f64,
        ranges: StateRanges,
        gain: FeedbackGain,
    ) -> Result<Self> {
        embedding.validate()?;
        let bandwidth =
            gamma_bandwidth.unwrap_or_else(|| default_bandwidth(&embedding.points, DEFAULT_BANDWIDTH_FRACTION));
        let model = SafeRegionModel {
            embedding,
            gamma_bandwidth: bandwidth,
            p_t,
            ranges,
            gain,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if !(self.gamma_bandwidth.is_finite() && self.gamma_bandwidth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma bandwidth must be positive, got {}",
                self.gamma_bandwidth
            )));
        }
        if !(self.p_t > 0.0 && self.p_t < 1.0) {
            return Err(Error::InvalidParameter(format!("p_t must lie in (0, 1), got {}", self.p_t)));
        }
        let safe = self.embedding.labels.iter().filter(|l| **l == 1).count();
        if safe == 0 {
            return Err(Error::SingleClass { label: 0 });
        }
        if safe == self.embedding.labels.len() {
            return Err(Error::SingleClass { label: 1 });
        }
        Ok(())
    }

    /// Kernel-smoothed safe-label frequency around `y`.
    pub fn gamma(&self, y: &[f64]) -> f64 {
        gamma(y, self)
    }

    /// `y = psi(x)`.
    pub fn map_state(&self, x: &SystemState) -> Vec<f64> {
        map_state(x, &self.embedding, &self.ranges)
    }

    /// Hypothesis `h(x)`: 1 iff `gamma(psi(x)) > p_t`.
    pub fn predict(&self, x: &SystemState) -> u8 {
        u8::from(self.gamma(&self.map_state(x)) > self.p_t)
    }

    pub fn predicted_safe_fraction(&self, states: &[SystemState]) -> f64 {
        if states.is_empty() {
            return 0.0;
        }
        states.iter().filter(|s| self.predict(s) == 1).count() as f64 / states.len() as f64
    }
}

pub fn gamma(y: &[f64], model: &SafeRegionModel) -> f64 {
    let h2 = 2.0 * model.gamma_bandwidth * model.gamma_bandwidth;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut nearest = (f64::INFINITY, 0usize);
    for (i, p) in model.embedding.points.iter().enumerate() {
        let d2: f64 = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < nearest.0 {
            nearest = (d2, i);
        }
        let w = (-d2 / h2).exp();
        den += w;
        if model.embedding.labels[i] == 1 {
            num += w;
        }
    }
    if den > 0.0 && den.is_finite() {
        (num / den).clamp(0.0, 1.0)
    } else {
        f64::from(model.embedding.labels[nearest.1])
    }
}

pub fn predict(x: &SystemState, model: &SafeRegionModel) -> u8 {
    model.predict(x)
}

/// `gamma` sampled on a regular grid over the embedded bounding box, widened by
/// 10% (5% per side). Values are row major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl RegionGrid {
    /// Grid coordinates of flat index `idx`.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut coords = vec![0.0; self.axes.len()];
        for c in (0..self.axes.len()).rev() {
            let n = self.axes[c].len();
            coords[c] = self.axes[c][idx % n];
            idx /= n;
        }
        coords
    }

    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

pub fn grid_axes(points: &[Vec<f64>], resolution: usize) -> Vec<Vec<f64>> {
    bounding_box(points)
        .into_iter()
        .map(|(lo, hi)| {
            let pad = 0.05 * (hi - lo);
            let (lo, hi) = (lo - pad, hi + pad);
            (0..resolution)
                .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
                .collect()
        })
        .collect()
}

pub fn region_grid(model: &SafeRegionModel, resolution: usize) -> Result<RegionGrid> {
    region_grid_on(model, grid_axes(&model.embedding.points, resolution.max(2)), resolution)
}

/// Same as [`region_grid`] on caller-supplied axes.
pub fn region_grid_on(model: &SafeRegionModel, axes: Vec<Vec<f64>>, resolution: usize) -> Result<RegionGrid> {
    if resolution < 2 {
        return Err(Error::InvalidParameter(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let total: usize = axes.iter().map(Vec::len).product();
    let mut grid = RegionGrid {
        axes,
        values: Vec::with_capacity(total),
    };
    for idx in 0..total {
        let y = grid.point(idx);
        grid.values.push(gamma(&y, model));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TsneConfig;

    fn embedding(points: Vec<Vec<f64>>, labels: Vec<u8>) -> Embedding {
        let k = points.len();
        Embedding {
            source_states: (0..k).map(|i| SystemState([i as f64 * 0.1, 0.0, 0.0, 0.0, 0.0, 0.0])).collect(),
            labels,
            points,
            bandwidths: vec![0.05; k],
            final_kl: 0.0,
            kl_trace: vec![],
            config: TsneConfig::default(),
        }
    }

    fn gain() -> FeedbackGain {
        FeedbackGain { k: [[0.0; 6]; 3] }
    }

    fn model(points: Vec<Vec<f64>>, labels: Vec<u8>, bw: f64) -> SafeRegionModel {
        SafeRegionModel::new(embedding(points, labels), Some(bw), 0.8, StateRanges::default(), gain()).unwrap()
    }

    #[test]
    fn single_class_is_rejected() {
        let e = embedding(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![1, 1]);
        let err = SafeRegionModel::new(e, Some(1.0), 0.8, StateRanges::default(), gain()).unwrap_err();
        assert!(matches!(err, Error::SingleClass { label: 1 }));
    }

    #[test]
    fn invalid_threshold_and_bandwidth() {
        let e = embedding(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![1, 0]);
        assert!(SafeRegionModel::new(e.clone(), Some(1.0), 1.0, StateRanges::default(), gain()).is_err());
        assert!(SafeRegionModel::new(e, Some(0.0), 0.8, StateRanges::default(), gain()).is_err());
    }

    #[test]
    fn narrow_kernel_returns_nearest_label() {
        let m = model(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![1, 0], 1e-4);
        assert_eq!(m.gamma(&[0.0, 0.0]), 1.0);
        assert_eq!(m.gamma(&[1.0, 0.0]), 0.0);
        // Far enough that every weight underflows.
        assert_eq!(m.gamma(&[0.2, 0.0]), 1.0);
    }

    #[test]
    fn midpoint_is_one_half() {
        let m = model(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![1, 0], 0.3);
        assert!((m.gamma(&[0.5, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn threshold_is_strict() {
        // gamma at the midpoint of (safe, safe, safe, safe, unsafe) stacked points is 0.8 exactly.
        let pts = vec![vec![0.0, 0.0]; 5];
        let m = model(pts, vec![1, 1, 1, 1, 0], 1.0);
        assert_eq!(m.gamma(&[0.0, 0.0]), 0.8);
        assert_eq!(u8::from(m.gamma(&[0.0, 0.0]) > m.p_t), 0);
    }

    #[test]
    fn grid_contains_model_points() {
        let m = model(vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![0.5, 1.0]], vec![1, 0, 1], 0.2);
        let grid = region_grid(&m, 11).unwrap();
        assert_eq!(grid.values.len(), 121);
        assert!(grid.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(region_grid(&m, 1).is_err());
        let axes = grid_axes(&m.embedding.points, 11);
        assert!((axes[0][0] + 0.05).abs() < 1e-12 && (axes[0][10] - 1.05).abs() < 1e-12);
        assert!((axes[1][0] + 0.1).abs() < 1e-12 && (axes[1][10] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn default_bandwidth_tracks_scale() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert!((default_bandwidth(&pts, 0.02) - 0.1).abs() < 1e-15);
    }
}
