//! Estimates of the terms of the generalization-error bound
//!
//! `eps(h, l) <= eps_n(h, l_n) + d_HdH(D, D_n) / 2 + min{E1, E2}`
//!
//! on the pendulum (Monte-Carlo, with a discriminator proxy for the divergence)
//! and exactly on small finite instances.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemState;
use crate::error::{Error, Result};
use crate::rng::{task_rng, DOMAIN_PROXY, DOMAIN_TOY};
use crate::safety::StateRanges;

pub const PROXY_NEIGHBORS: usize = 5;
pub const TOY_STATE_LIMIT: usize = 32;

/// Monte-Carlo frequencies of the error terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimates {
    /// `h` against the real labels over samples of `D`.
    pub eps_hat: f64,
    /// `h` against the nominal labels over samples of `D_n`.
    pub eps_n_hat: f64,
    /// Real/nominal label disagreement over samples of `D_n`.
    pub e1_hat: f64,
    /// Real/nominal label disagreement over samples of `D`.
    pub e2_hat: f64,
    /// Predicted safe, actually unsafe (share of all samples of `D`).
    pub fp_rate: f64,
    /// Predicted unsafe, actually safe.
    pub fn_rate: f64,
    pub n_d: usize,
    pub n_dn: usize,
}

fn rate(count: usize, n: usize) -> f64 {
    count as f64 / n as f64
}

pub fn estimate_errors<T>(
    h: impl Fn(&T) -> u8,
    samples_d: &[T],
    samples_dn: &[T],
    oracle_real: impl Fn(&T) -> u8,
    oracle_nominal: impl Fn(&T) -> u8,
) -> Result<ErrorEstimates> {
    if samples_d.is_empty() {
        return Err(Error::EmptySamples("samples of D"));
    }
    if samples_dn.is_empty() {
        return Err(Error::EmptySamples("samples of D_n"));
    }
    let (mut fp, mut fneg, mut e2) = (0, 0, 0);
    for x in samples_d {
        let (pred, l) = (h(x), oracle_real(x));
        match (pred, l) {
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
        if l != oracle_nominal(x) {
            e2 += 1;
        }
    }
    let (mut err_n, mut e1) = (0, 0);
    for x in samples_dn {
        let ln = oracle_nominal(x);
        if h(x) != ln {
            err_n += 1;
        }
        if oracle_real(x) != ln {
            e1 += 1;
        }
    }
    let (n_d, n_dn) = (samples_d.len(), samples_dn.len());
    Ok(ErrorEstimates {
        eps_hat: rate(fp + fneg, n_d),
        eps_n_hat: rate(err_n, n_dn),
        e1_hat: rate(e1, n_dn),
        e2_hat: rate(e2, n_d),
        fp_rate: rate(fp, n_d),
        fn_rate: rate(fneg, n_d),
        n_d,
        n_dn,
    })
}

/// Finite-sample stand-in for `d_HdH`: `2 (1 - 2 err)` for the balanced
/// validation error `err` of a 5-nearest-neighbour discriminator trained on a
/// seeded half of each set (normalized state metric), clamped to `[0, 2]`.
/// Averaged over both argument orders so it is exactly symmetric.
pub fn divergence_proxy(
    samples_d: &[SystemState],
    samples_dn: &[SystemState],
    ranges: &StateRanges,
    seed: u64,
) -> Result<f64> {
    for (set, name) in [(samples_d, "samples of D"), (samples_dn, "samples of D_n")] {
        if set.is_empty() {
            return Err(Error::EmptySamples(name));
        }
        if set.len() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: set.len() });
        }
    }
    let a = proxy_once(samples_d, samples_dn, ranges, seed);
    let b = proxy_once(samples_dn, samples_d, ranges, seed);
    Ok(0.5 * (a + b))
}

fn proxy_once(first: &[SystemState], second: &[SystemState], ranges: &StateRanges, seed: u64) -> f64 {
    let mut train: Vec<([f64; 6], u8)> = Vec::new();
    let mut validation: [Vec<[f64; 6]>; 2] = [Vec::new(), Vec::new()];
    for (class, set) in [first, second].into_iter().enumerate() {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut task_rng(seed, DOMAIN_PROXY, class as u64));
        let (tr, va) = order.split_at(set.len() / 2);
        train.extend(tr.iter().map(|&i| (ranges.normalize(&set[i]), class as u8)));
        validation[class].extend(va.iter().map(|&i| ranges.normalize(&set[i])));
    }
    let k = PROXY_NEIGHBORS.min(train.len());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut class_error = [0.0; 2];
    for (class, points) in validation.iter().enumerate() {
        let mut wrong = 0;
        for x in points {
            dist.clear();
            dist.extend(train.iter().enumerate().map(|(i, (p, _))| {
                let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            }));
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let votes = dist[..k].iter().filter(|(_, i)| train[*i].1 == 1).count();
            let predicted = usize::from(2 * votes > k);
            if predicted != class {
                wrong += 1;
            }
        }
        class_error[class] = wrong as f64 / points.len() as f64;
    }
    let balanced = 0.5 * (class_error[0] + class_error[1]);
    (2.0 * (1.0 - 2.0 * balanced)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_hat: f64,
    pub eps_n_hat: f64,
    pub e1_hat: f64,
    pub e2_hat: f64,
    /// Discriminator proxy, not the supremum-based distance.
    pub div_proxy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    /// `eps_n_hat + div_proxy / 2 + min(e1_hat, e2_hat)`.
    pub rhs: f64,
    pub rhs_holds: bool,
    pub n_d: usize,
    pub n_dn: usize,
    pub proxy_seed: u64,
    pub inequality: String,
}

impl BoundReport {
    pub fn new(est: &ErrorEstimates, div_proxy: f64, proxy_seed: u64) -> Self {
        let min_e = est.e1_hat.min(est.e2_hat);
        let rhs = est.eps_n_hat + 0.5 * div_proxy + min_e;
        let mut inequality = String::new();
        let _ = write!(
            inequality,
            "eps(h,l) <= eps_n(h,l_n) + d/2 + min{{E1,E2}}: {:.6} <= {:.6} + {:.6}/2 + min{{{:.6},{:.6}}} = {:.6} ({}; d is a {}-NN discriminator proxy)",
            est.eps_hat,
            est.eps_n_hat,
            div_proxy,
            est.e1_hat,
            est.e2_hat,
            rhs,
            if est.eps_hat <= rhs { "holds" } else { "violated" },
            PROXY_NEIGHBORS,
        );
        BoundReport {
            eps_hat: est.eps_hat,
            eps_n_hat: est.eps_n_hat,
            e1_hat: est.e1_hat,
            e2_hat: est.e2_hat,
            div_proxy,
            fp_rate: est.fp_rate,
            fn_rate: est.fn_rate,
            rhs,
            rhs_holds: est.eps_hat <= rhs,
            n_d: est.n_d,
            n_dn: est.n_dn,
            proxy_seed,
            inequality,
        }
    }
}

/// Finite instance: integer weights define `D` and `D_n`, labels and
/// hypotheses are tabulated per state. `h` indexes into `hypotheses`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub d: Vec<u64>,
    pub d_n: Vec<u64>,
    pub l: Vec<u8>,
    pub l_n: Vec<u8>,
    pub hypotheses: Vec<Vec<u8>>,
    pub h: usize,
}

impl ToySpec {
    pub fn states(&self) -> usize {
        self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.d.len();
        if n > TOY_STATE_LIMIT {
            return Err(Error::ToyTooLarge { states: n, limit: TOY_STATE_LIMIT });
        }
        if n == 0 {
            return Err(Error::EmptySamples("toy states"));
        }
        let tables = [&self.d_n.len(), &self.l.len(), &self.l_n.len()];
        if tables.iter().any(|len| **len != n) || self.hypotheses.iter().any(|h| h.len() != n) {
            return Err(Error::InvalidParameter("toy tables must all cover the same states".into()));
        }
        if self.d.iter().sum::<u64>() == 0 || self.d_n.iter().sum::<u64>() == 0 {
            return Err(Error::InvalidParameter("toy distributions need positive total weight".into()));
        }
        if self.h >= self.hypotheses.len() {
            return Err(Error::InvalidParameter(format!(
                "hypothesis index {} out of {}",
                self.h,
                self.hypotheses.len()
            )));
        }
        let binary = |v: &Vec<u8>| v.iter().all(|b| *b <= 1);
        if !(binary(&self.l) && binary(&self.l_n) && self.hypotheses.iter().all(binary)) {
            return Err(Error::InvalidParameter("toy labels must be 0 or 1".into()));
        }
        Ok(())
    }
}

/// Every term as an exact numerator over `denominator = |D| |D_n|` (total
/// weights), plus the decimal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub denominator: i128,
    pub lhs: i128,
    pub eps_n: i128,
    pub e1: i128,
    pub e2: i128,
    /// `d_HdH / 2`, maximized over pairs of the class extended by `l` and `l_n`.
    pub half_divergence: i128,
    pub rhs: i128,
    pub rhs_e1: i128,
    pub rhs_e2: i128,
    pub bound_holds: bool,
    /// The branch through `E1`.
    pub bound_e1_holds: bool,
    /// The branch through `E2`.
    pub bound_e2_holds: bool,
    pub lhs_value: f64,
    pub rhs_value: f64,
}

fn mass(weights: &[u64], pred: impl Fn(usize) -> bool) -> i128 {
    weights
        .iter()
        .enumerate()
        .filter(|(i, _)| pred(*i))
        .map(|(_, w)| *w as i128)
        .sum()
}

pub fn verify_bound_toy(toy: &ToySpec) -> Result<ToyReport> {
    toy.validate()?;
    let total_d = mass(&toy.d, |_| true);
    let total_dn = mass(&toy.d_n, |_| true);
    let den = total_d * total_dn;
    // Probability under D (resp. D_n) of `a != b`, scaled to `den`.
    let under_d = |a: &[u8], b: &[u8]| mass(&toy.d, |i| a[i] != b[i]) * total_dn;
    let under_dn = |a: &[u8], b: &[u8]| mass(&toy.d_n, |i| a[i] != b[i]) * total_d;

    let h = &toy.hypotheses[toy.h];
    let lhs = under_d(h, &toy.l);
    let eps_n = under_dn(h, &toy.l_n);
    let e1 = under_dn(&toy.l, &toy.l_n);
    let e2 = under_d(&toy.l, &toy.l_n);

    let mut class: Vec<&[u8]> = toy.hypotheses.iter().map(Vec::as_slice).collect();
    class.push(&toy.l);
    class.push(&toy.l_n);
    let mut half_divergence = 0;
    for (i, a) in class.iter().enumerate() {
        for b in &class[i + 1..] {
            half_divergence = half_divergence.max((under_d(a, b) - under_dn(a, b)).abs());
        }
    }

    let rhs_e1 = eps_n + half_divergence + e1;
    let rhs_e2 = eps_n + half_divergence + e2;
    let rhs = eps_n + half_divergence + e1.min(e2);
    Ok(ToyReport {
        denominator: den,
        lhs,
        eps_n,
        e1,
        e2,
        half_divergence,
        rhs,
        rhs_e1,
        rhs_e2,
        bound_holds: lhs <= rhs,
        bound_e1_holds: lhs <= rhs_e1,
        bound_e2_holds: lhs <= rhs_e2,
        lhs_value: lhs as f64 / den as f64,
        rhs_value: rhs as f64 / den as f64,
    })
}

/// Seeded random instance with 4 to 32 states.
pub fn random_toy(seed: u64) -> ToySpec {
    let mut rng = task_rng(seed, DOMAIN_TOY, 0);
    let n = rng.random_range(4..=TOY_STATE_LIMIT);
    let weights = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut w: Vec<u64> = (0..n).map(|_| rng.random_range(0..=10)).collect();
        if w.iter().all(|v| *v == 0) {
            w[0] = 1;
        }
        w
    };
    let d = weights(&mut rng);
    let d_n = if rng.random_bool(0.2) { d.clone() } else { weights(&mut rng) };
    let bits = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u8> { (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect() };
    let l = bits(&mut rng);
    let flip = rng.random_range(0.0..0.4);
    let l_n = l.iter().map(|b| if rng.random_bool(flip) { 1 - b } else { *b }).collect();
    let size = rng.random_range(1..=8);
    let hypotheses: Vec<Vec<u8>> = (0..size).map(|_| bits(&mut rng)).collect();
    let h = rng.random_range(0..size);
    ToySpec { d, d_n, l, l_n, hypotheses, h }
}
