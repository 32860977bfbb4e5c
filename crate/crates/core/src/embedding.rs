//! Exact t-SNE over range-normalized pendulum states, and the out-of-sample
//! state map `y = psi(x)` built on the calibrated input bandwidths.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::rng::{task_rng, DOMAIN_TSNE};
use crate::safety::{normalized_sq_distance, StateRanges};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub output_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// Standard deviation of the initial coordinates.
    pub init_std: f64,
    pub min_gain: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            output_dim: 2,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-2,
            min_gain: 0.01,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if k < 3 {
            return Err(Error::InsufficientData { needed: 3, got: k });
        }
        if !(self.perplexity > 1.0 && self.perplexity < k as f64) {
            return Err(Error::InvalidParameter(format!(
                "perplexity must lie in (1, {k}), got {}",
                self.perplexity
            )));
        }
        if self.output_dim == 0 || self.iterations == 0 {
            return Err(Error::InvalidParameter("output_dim and iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.init_std > 0.0 && self.early_exaggeration >= 1.0) {
            return Err(Error::InvalidParameter("learning rate, init std and exaggeration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub source_states: Vec<SystemState>,
    pub labels: Vec<u8>,
    /// `k` rows of `output_dim` coordinates.
    pub points: Vec<Vec<f64>>,
    /// Gaussian widths in normalized state units, one per source state.
    pub bandwidths: Vec<f64>,
    pub final_kl: f64,
    /// KL objective (against the unexaggerated affinities) before every update.
    pub kl_trace: Vec<f64>,
    pub config: TsneConfig,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.points.len();
        if self.source_states.len() != k || self.labels.len() != k || self.bandwidths.len() != k {
            return Err(Error::Format("embedding arrays have inconsistent lengths".into()));
        }
        if k == 0 {
            return Err(Error::Format("embedding is empty".into()));
        }
        let dim = self.output_dim();
        if dim == 0 || self.points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format("embedding coordinates must be finite with a common dimension".into()));
        }
        if self.bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Format("bandwidths must be positive".into()));
        }
        if self.labels.iter().any(|l| *l > 1) {
            return Err(Error::Format("labels must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Row-calibrated conditional affinities `p_{j|i}` (row major, `k x k`).
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    pub k: usize,
    pub rows: Vec<f64>,
    /// Precision `beta_i` of each row's Gaussian, `p_{j|i} ~ exp(-beta_i d_ij^2)`.
    pub betas: Vec<f64>,
}

impl ConditionalAffinities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        self.betas.iter().map(|b| (0.5 / b).sqrt()).collect()
    }
}

/// Symmetric joint affinities `p_ij`, summing to 1, with the row bandwidths.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub k: usize,
    pub p: Vec<f64>,
    pub bandwidths: Vec<f64>,
}

const CALIBRATION_STEPS: usize = 100;
const PERPLEXITY_TOL: f64 = 1e-5;

fn squared_distances(states: &[SystemState], ranges: &StateRanges) -> Vec<f64> {
    let k = states.len();
    let mut d = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = normalized_sq_distance(&states[i], &states[j], ranges);
            d[i * k + j] = v;
            d[j * k + i] = v;
        }
    }
    d
}

/// Fills `out` with the row distribution for precision `beta` and returns its
/// perplexity `exp(H)`.
fn row_distribution(dist: &[f64], skip: usize, beta: f64, out: &mut [f64]) -> f64 {
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (o, d)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == skip { 0.0 } else { (-beta * (d - d_min)).exp() };
        z += *o;
    }
    let mut weighted = 0.0;
    for (j, (o, d)) in out.iter_mut().zip(dist).enumerate() {
        *o /= z;
        if j != skip {
            weighted += *o * (d - d_min);
        }
    }
    (z.ln() + beta * weighted).exp()
}

fn calibrate_row(dist: &[f64], i: usize, perplexity: f64, out: &mut [f64]) -> Result<f64> {
    let mut beta = 1.0;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    for _ in 0..CALIBRATION_STEPS {
        let perp = row_distribution(dist, i, beta, out);
        if !perp.is_finite() {
            break;
        }
        if (perp - perplexity).abs() < PERPLEXITY_TOL {
            return Ok(beta);
        }
        // Perplexity falls as the precision grows.
        if perp > perplexity {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (lo + hi);
        }
        if !beta.is_finite() || beta <= 0.0 {
            break;
        }
    }
    Err(Error::Calibration { point: i })
}

pub fn conditional_affinities(
    states: &[SystemState],
    ranges: &StateRanges,
    perplexity: f64,
) -> Result<ConditionalAffinities> {
    let k = states.len();
    if k < 3 {
        return Err(Error::InsufficientData { needed: 3, got: k });
    }
    let dist = squared_distances(states, ranges);
    let mut rows = vec![0.0; k * k];
    let mut betas = Vec::with_capacity(k);
    for i in 0..k {
        let beta = calibrate_row(&dist[i * k..(i + 1) * k], i, perplexity, &mut rows[i * k..(i + 1) * k])?;
        betas.push(beta);
    }
    Ok(ConditionalAffinities { k, rows, betas })
}

/// Achieved perplexity `2^H` of one conditional row, `H` in bits.
pub fn row_perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|p| **p > 0.0).map(|p| -p * p.log2()).sum();
    2f64.powf(h)
}

pub fn compute_affinities(states: &[SystemState], ranges: &StateRanges, perplexity: f64) -> Result<Affinities> {
    let cond = conditional_affinities(states, ranges, perplexity)?;
    let k = cond.k;
    let mut p = vec![0.0; k * k];
    let denom = 2.0 * k as f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let v = (cond.rows[i * k + j] + cond.rows[j * k + i]) / denom;
            p[i * k + j] = v;
            p[j * k + i] = v;
        }
    }
    Ok(Affinities {
        k,
        bandwidths: cond.bandwidths(),
        p,
    })
}

/// `KL(P || Q)` with Student-t low-dimensional affinities `Q`.
pub fn kl_divergence(p: &[f64], points: &[Vec<f64>]) -> f64 {
    let k = points.len();
    let mut z = 0.0;
    let mut cross = 0.0;
    let mut neg_entropy = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            let num = 1.0 / (1.0 + d2);
            z += 2.0 * num;
            let pij = p[i * k + j];
            if pij > 0.0 {
                cross += 2.0 * pij * num.ln();
                neg_entropy += 2.0 * pij * pij.ln();
            }
        }
    }
    neg_entropy - cross + z.ln()
}

/// Gradient descent on `KL(P || Q)`: early exaggeration, momentum, and
/// per-coordinate adaptive gains.
pub fn run_tsne(
    states: &[SystemState],
    labels: &[u8],
    ranges: &StateRanges,
    config: &TsneConfig,
) -> Result<Embedding> {
    let k = states.len();
    config.validate(k)?;
    if labels.len() != k {
        return Err(Error::InvalidParameter(format!("{} labels for {k} states", labels.len())));
    }
    let aff = compute_affinities(states, ranges, config.perplexity)?;
    let p = &aff.p;
    let dim = config.output_dim;

    let neg_entropy: f64 = p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum();

    let mut rng = task_rng(config.seed, DOMAIN_TSNE, 0);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut y: Vec<f64> = (0..k * dim).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; k * dim];
    let mut gains = vec![1.0f64; k * dim];
    let mut grad = vec![0.0; k * dim];
    let mut num = vec![0.0; k * k];
    let mut trace = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        let mut z = 0.0;
        let mut cross = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                let mut d2 = 0.0;
                for c in 0..dim {
                    let diff = y[i * dim + c] - y[j * dim + c];
                    d2 += diff * diff;
                }
                let n = 1.0 / (1.0 + d2);
                num[i * k + j] = n;
                z += 2.0 * n;
                cross -= 2.0 * p[i * k + j] * (1.0 + d2).ln();
            }
        }
        let kl = neg_entropy - cross + z.ln();
        if !kl.is_finite() {
            return Err(Error::OptimizationFailure(format!("non-finite KL at iteration {iter}")));
        }
        trace.push(kl);

        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..k {
            for j in (i + 1)..k {
                let n = num[i * k + j];
                let coeff = 4.0 * (exaggeration * p[i * k + j] - n / z) * n;
                for c in 0..dim {
                    let diff = y[i * dim + c] - y[j * dim + c];
                    grad[i * dim + c] += coeff * diff;
                    grad[j * dim + c] -= coeff * diff;
                }
            }
        }

        for idx in 0..k * dim {
            let same_sign = (grad[idx] > 0.0) == (update[idx] > 0.0);
            gains[idx] = if same_sign { gains[idx] * 0.8 } else { gains[idx] + 0.2 };
            gains[idx] = gains[idx].max(config.min_gain);
            update[idx] = momentum * update[idx] - config.learning_rate * gains[idx] * grad[idx];
            y[idx] += update[idx];
        }
        for c in 0..dim {
            let mean = (0..k).map(|i| y[i * dim + c]).sum::<f64>() / k as f64;
            for i in 0..k {
                y[i * dim + c] -= mean;
            }
        }
    }

    let points: Vec<Vec<f64>> = y.chunks(dim).map(<[f64]>::to_vec).collect();
    let final_kl = kl_divergence(p, &points);
    if !final_kl.is_finite() || points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::OptimizationFailure("non-finite final embedding".into()));
    }
    Ok(Embedding {
        source_states: states.to_vec(),
        labels: labels.to_vec(),
        points,
        bandwidths: aff.bandwidths,
        final_kl,
        kl_trace: trace,
        config: config.clone(),
    })
}

const EXACT_MATCH: f64 = 1e-12;

/// Out-of-sample map: the stored coordinate for a training state, otherwise a
/// Nadaraya-Watson average of the embedded points with each source state's
/// calibrated bandwidth.
pub fn map_state(x: &SystemState, embedding: &Embedding, ranges: &StateRanges) -> Vec<f64> {
    let k = embedding.len();
    let dim = embedding.output_dim();
    let mut log_w = Vec::with_capacity(k);
    let mut nearest = (f64::INFINITY, 0usize);
    for (i, src) in embedding.source_states.iter().enumerate() {
        let d2 = normalized_sq_distance(x, src, ranges);
        if d2.sqrt() < EXACT_MATCH {
            return embedding.points[i].clone();
        }
        if d2 < nearest.0 {
            nearest = (d2, i);
        }
        let s = embedding.bandwidths[i];
        log_w.push(-d2 / (2.0 * s * s));
    }
    // Weights are shifted by their maximum in log space, so they only vanish
    // together when the input itself is not finite.
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y = vec![0.0; dim];
    let mut total = 0.0;
    if max.is_finite() {
        for (i, lw) in log_w.iter().enumerate() {
            let w = (lw - max).exp();
            total += w;
            for (c, v) in y.iter_mut().enumerate() {
                *v += w * embedding.points[i][c];
            }
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return embedding.points[nearest.1].clone();
    }
    y.iter_mut().for_each(|v| *v /= total);
    y
}

/// Leave-one-out k-nearest-neighbor label accuracy of the embedded points.
pub fn loo_knn_accuracy(points: &[Vec<f64>], labels: &[u8], neighbors: usize) -> f64 {
    let k = points.len();
    if k < 2 || neighbors == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(k - 1);
    for i in 0..k {
        dists.clear();
        for j in 0..k {
            if j != i {
                let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                dists.push((d2, j));
            }
        }
        let m = neighbors.min(dists.len());
        dists.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let safe_votes = dists[..m].iter().filter(|(_, j)| labels[*j] == 1).count();
        let predicted = u8::from(2 * safe_votes > m);
        if predicted == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_ud;
    use crate::rng::DOMAIN_UD;

    fn ud_states(n: usize, seed: u64) -> Vec<SystemState> {
        sample_ud(n, &StateRanges::default(), &mut task_rng(seed, DOMAIN_UD, 0))
    }

    #[test]
    fn conditional_rows_normalize_and_hit_perplexity() {
        let states = ud_states(200, 1);
        let cond = conditional_affinities(&states, &StateRanges::default(), 30.0).unwrap();
        for i in 0..cond.k {
            let row = cond.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(row[i], 0.0);
            assert!((row_perplexity(row) - 30.0).abs() < 1e-3);
        }
    }

    #[test]
    fn joint_affinities_are_symmetric_and_normalized() {
        let states = ud_states(100, 2);
        let aff = compute_affinities(&states, &StateRanges::default(), 20.0).unwrap();
        let k = aff.k;
        assert!((aff.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k {
            assert_eq!(aff.p[i * k + i], 0.0);
            for j in 0..k {
                assert_eq!(aff.p[i * k + j], aff.p[j * k + i]);
            }
        }
        assert!(aff.bandwidths.iter().all(|b| *b > 0.0));
    }

    #[test]
    fn identical_states_are_rejected() {
        let states = vec![SystemState([0.1; 6]); 50];
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 5,
            ..TsneConfig::default()
        };
        let err = run_tsne(&states, &[1; 50], &StateRanges::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Calibration { .. }));
    }

    #[test]
    fn too_few_points() {
        let states = ud_states(2, 3);
        assert!(run_tsne(&states, &[0, 1], &StateRanges::default(), &TsneConfig::default()).is_err());
    }

    #[test]
    fn deterministic_and_translation_invariant() {
        let states = ud_states(60, 4);
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let r = StateRanges::default();
        let a = run_tsne(&states, &labels, &r, &cfg).unwrap();
        let b = run_tsne(&states, &labels, &r, &cfg).unwrap();
        assert_eq!(a, b);

        let aff = compute_affinities(&states, &r, 10.0).unwrap();
        let shifted: Vec<Vec<f64>> = a.points.iter().map(|p| vec![p[0] + 3.5, p[1] - 7.25]).collect();
        let kl0 = kl_divergence(&aff.p, &a.points);
        assert!((kl0 - a.final_kl).abs() < 1e-12);
        assert!((kl_divergence(&aff.p, &shifted) - kl0).abs() < 1e-9);
    }

    fn toy_embedding() -> Embedding {
        let mut s0 = SystemState::UPRIGHT;
        let mut s1 = SystemState::UPRIGHT;
        let mut far = SystemState::UPRIGHT;
        s0.0[0] = -0.1;
        s1.0[0] = 0.1;
        far.0[3] = 9.0;
        far.0[0] = 1.4;
        Embedding {
            source_states: vec![s0, s1, far],
            labels: vec![1, 0, 0],
            points: vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![-50.0, 9.0]],
            bandwidths: vec![0.02, 0.02, 0.02],
            final_kl: 0.0,
            kl_trace: vec![],
            config: TsneConfig::default(),
        }
    }

    #[test]
    fn map_state_exact_match_and_midpoint() {
        let e = toy_embedding();
        let r = StateRanges::default();
        assert_eq!(map_state(&e.source_states[1], &e, &r), e.points[1]);
        let y = map_state(&SystemState::UPRIGHT, &e, &r);
        assert!((y[0] - 1.0).abs() < 1e-6 && (y[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn map_state_far_away_stays_finite() {
        let e = toy_embedding();
        let y = map_state(&SystemState([1e6; 6]), &e, &StateRanges::default());
        assert!(y.iter().all(|v| v.is_finite()));
        let nan = map_state(&SystemState([f64::NAN; 6]), &e, &StateRanges::default());
        assert!(nan.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn knn_accuracy_on_separated_clusters() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            pts.push(vec![i as f64 * 0.01, 0.0]);
            labels.push(1);
            pts.push(vec![10.0 + i as f64 * 0.01, 0.0]);
            labels.push(0);
        }
        assert_eq!(loo_knn_accuracy(&pts, &labels, 5), 1.0);
    }
}
