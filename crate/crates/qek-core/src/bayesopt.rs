//! Constrained Bayesian optimization of the five waveform durations.
//!
//! A Matern-5/2 Gaussian process over the raw nanosecond durations drives
//! UCB acquisition inside the feasible polytope {each duration > 5 ns,
//! total < 500 ns}. Hyperparameters are refit periodically by maximizing
//! the marginal likelihood penalized with log-normal priors centered on
//! the defaults. The loop caches objective values by exact bit pattern, so
//! a re-proposed point never re-runs the emulation pipeline.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pulse::{WaveformParams, MAX_TOTAL_NS, MIN_SEGMENT_NS};
use crate::seeding;
use crate::{Error, Result};

pub const DEFAULT_LENGTH_SCALE_NS: f64 = 10.0;
pub const DEFAULT_SIGNAL_STD: f64 = 10.0;
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Margin keeping projected points strictly inside the open constraints.
const PROJ_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub length_scale: f64,
    pub signal_std: f64,
    /// Constant prior mean. Its hyperprior is Normal(0, 10); the center is
    /// used directly and never refit.
    pub prior_mean: f64,
    pub jitter: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        GpHyperparams {
            length_scale: DEFAULT_LENGTH_SCALE_NS,
            signal_std: DEFAULT_SIGNAL_STD,
            prior_mean: 0.0,
            jitter: DEFAULT_JITTER,
        }
    }
}

impl GpHyperparams {
    fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Config(format!("length scale must be positive, got {}", self.length_scale)));
        }
        if !(self.signal_std > 0.0 && self.signal_std.is_finite()) {
            return Err(Error::Config(format!("signal std must be positive, got {}", self.signal_std)));
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be positive, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Standard Matern-5/2: sigma^2 (1 + s + s^2/3) e^{-s}, s = sqrt(5) r / l.
pub fn matern52(x: &[f64; 5], x_prime: &[f64; 5], hp: &GpHyperparams) -> f64 {
    let r2: f64 = x.iter().zip(x_prime).map(|(a, b)| (a - b) * (a - b)).sum();
    let s = 5.0f64.sqrt() * r2.sqrt() / hp.length_scale;
    hp.signal_std * hp.signal_std * (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone)]
pub struct GpState {
    hp: GpHyperparams,
    x: Vec<[f64; 5]>,
    y: Vec<f64>,
    factor: Option<Fitted>,
}

#[derive(Debug, Clone)]
struct Fitted {
    chol: Cholesky<f64, Dyn>,
    /// (K + jitter I)^-1 (y - prior_mean), cached for mean evaluation.
    alpha: DVector<f64>,
}

impl GpState {
    pub fn new(hp: GpHyperparams) -> Result<Self> {
        hp.validate()?;
        Ok(GpState {
            hp,
            x: Vec::new(),
            y: Vec::new(),
            factor: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn hyperparams(&self) -> GpHyperparams {
        self.hp
    }

    pub fn observations(&self) -> (&[[f64; 5]], &[f64]) {
        (&self.x, &self.y)
    }

    pub fn observe(&mut self, x: [f64; 5], y: f64) -> Result<()> {
        if !(x.iter().all(|v| v.is_finite()) && y.is_finite()) {
            return Err(Error::Numerical(format!("non-finite observation ({x:?}, {y})")));
        }
        self.x.push(x);
        self.y.push(y);
        self.refit()
    }

    pub fn set_hyperparams(&mut self, hp: GpHyperparams) -> Result<()> {
        hp.validate()?;
        self.hp = hp;
        self.refit()
    }

    fn refit(&mut self) -> Result<()> {
        if self.x.is_empty() {
            self.factor = None;
            return Ok(());
        }
        let (chol, _) = factorize(&self.x, &self.hp)?;
        let resid = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v - self.hp.prior_mean));
        let alpha = chol.solve(&resid);
        self.factor = Some(Fitted { chol, alpha });
        Ok(())
    }

    /// Posterior (mean, variance) at `x`. Variance is clamped at zero; the
    /// raw value can only dip below by solve round-off (order 1e-12 sigma^2).
    pub fn posterior(&self, x: &[f64; 5]) -> Result<(f64, f64)> {
        let fitted = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::EmptyInput("GP posterior needs at least one observation".into()))?;
        let n = self.x.len();
        let k_star = DVector::from_iterator(n, self.x.iter().map(|xi| matern52(xi, x, &self.hp)));
        let mean = self.hp.prior_mean + k_star.dot(&fitted.alpha);
        let solved = fitted.chol.solve(&k_star);
        let var = matern52(x, x, &self.hp) - k_star.dot(&solved);
        Ok((mean, var.max(0.0)))
    }

    /// Upper confidence bound mean + k * std.
    pub fn ucb(&self, x: &[f64; 5], k: f64) -> Result<f64> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("UCB exploration weight must be >= 0, got {k}")));
        }
        let (mean, var) = self.posterior(x)?;
        Ok(mean + k * var.sqrt())
    }
}

/// Cholesky of K + jitter I, escalating jitter tenfold on failure. Returns
/// the factor and the jitter that succeeded.
fn factorize(x: &[[f64; 5]], hp: &GpHyperparams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = matern52(&x[i], &x[j], hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut jitter = hp.jitter;
    for _ in 0..9 {
        let mut kj = k.clone();
        for d in 0..n {
            kj[(d, d)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "covariance Cholesky failed for {n} observations even at jitter {jitter:.1e}"
    )))
}

/// Marginal log-likelihood plus log-normal priors (centered on the default
/// length scale and signal std, scale 1 in log-space). None when the
/// covariance cannot be factorized.
fn penalized_lml(x: &[[f64; 5]], y: &[f64], hp: &GpHyperparams) -> Option<f64> {
    let n = x.len();
    let (chol, _) = factorize(x, hp).ok()?;
    let resid = DVector::from_iterator(n, y.iter().map(|v| v - hp.prior_mean));
    let alpha = chol.solve(&resid);
    let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let ll = -0.5 * resid.dot(&alpha) - log_det_half - 0.5 * n as f64 * (std::f64::consts::TAU).ln();

    let log_normal = |v: f64, center: f64| -> f64 {
        let z = v.ln() - center.ln();
        -0.5 * z * z - v.ln() - 0.5 * std::f64::consts::TAU.ln()
    };
    Some(ll + log_normal(hp.length_scale, DEFAULT_LENGTH_SCALE_NS) + log_normal(hp.signal_std, DEFAULT_SIGNAL_STD))
}

/// MAP refit of (length scale, signal std) by multi-start compass search in
/// log-space. Deterministic; never returns hyperparameters with a lower
/// penalized likelihood than the incumbent, and falls back to the incumbent
/// with fewer than 3 observations or on numerical failure.
pub fn map_refit(state: &GpState) -> GpHyperparams {
    let incumbent = state.hp;
    let (x, y) = state.observations();
    if x.len() < 3 {
        return incumbent;
    }
    let objective = |log_l: f64, log_s: f64| -> f64 {
        let hp = GpHyperparams {
            length_scale: log_l.exp(),
            signal_std: log_s.exp(),
            ..incumbent
        };
        penalized_lml(x, y, &hp).unwrap_or(f64::NEG_INFINITY)
    };

    let d0 = DEFAULT_LENGTH_SCALE_NS.ln();
    let s0 = DEFAULT_SIGNAL_STD.ln();
    let starts = [
        (incumbent.length_scale.ln(), incumbent.signal_std.ln()),
        (d0, s0),
        (d0 + 1.0, s0 + 1.0),
        (d0 + 1.0, s0 - 1.0),
        (d0 - 1.0, s0 + 1.0),
        (d0 - 1.0, s0 - 1.0),
    ];

    let mut best = (incumbent.length_scale.ln(), incumbent.signal_std.ln());
    let mut best_v = objective(best.0, best.1);
    for &(mut l, mut s) in &starts {
        let mut v = objective(l, s);
        let mut step = 0.6;
        let mut evals = 0;
        while step > 1e-4 && evals < 400 {
            let mut moved = false;
            for (dl, ds) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                let cand = objective(l + dl, s + ds);
                evals += 1;
                if cand > v + 1e-12 {
                    l += dl;
                    s += ds;
                    v = cand;
                    moved = true;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if v > best_v {
            best_v = v;
            best = (l, s);
        }
    }
    if !best_v.is_finite() {
        return incumbent;
    }
    GpHyperparams {
        length_scale: best.0.exp(),
        signal_std: best.1.exp(),
        ..incumbent
    }
}

/// Clip each duration to the open lower bound, then scale the excess above
/// it so the total stays strictly under the cap.
pub fn project_feasible(raw: &[f64; 5]) -> [f64; 5] {
    let lo = MIN_SEGMENT_NS + PROJ_EPS;
    let mut v = raw.map(|c| if c.is_finite() { c.max(lo) } else { lo });
    let cap = MAX_TOTAL_NS - PROJ_EPS;
    let total: f64 = v.iter().sum();
    if total > cap {
        let scale = (cap - 5.0 * lo) / (total - 5.0 * lo);
        for c in v.iter_mut() {
            *c = lo + (*c - lo) * scale;
        }
    }
    v
}

fn random_feasible(rng: &mut ChaCha12Rng) -> [f64; 5] {
    let lo = MIN_SEGMENT_NS + PROJ_EPS;
    let total = rng.random_range((5.0 * lo + 1.0)..(MAX_TOTAL_NS - PROJ_EPS));
    let mut sticks = [0.0f64; 5];
    for s in sticks.iter_mut() {
        *s = rng.random_range(1e-6..1.0);
    }
    let sum: f64 = sticks.iter().sum();
    let spread = total - 5.0 * lo;
    sticks.map(|s| lo + s / sum * spread)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub max_iterations: usize,
    pub ucb_k: f64,
    pub refit_period: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            max_iterations: 50,
            ucb_k: 2.0,
            refit_period: 10,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("BO needs at least one iteration".into()));
        }
        if self.refit_period < 1 {
            return Err(Error::Config("refit period must be >= 1".into()));
        }
        if !(self.ucb_k >= 0.0 && self.ucb_k.is_finite()) {
            return Err(Error::Config(format!("ucb_k must be >= 0, got {}", self.ucb_k)));
        }
        Ok(())
    }
}

/// Compass walk on the UCB surface, projecting every trial move.
fn polish(state: &GpState, k: f64, start: [f64; 5]) -> Result<([f64; 5], f64)> {
    let mut cur = start;
    let mut cur_v = state.ucb(&cur, k)?;
    let mut step = 20.0;
    let mut evals = 0;
    while step >= 0.05 && evals < 400 {
        let mut moved = false;
        for d in 0..5 {
            for sgn in [1.0, -1.0] {
                let mut raw = cur;
                raw[d] += sgn * step;
                let cand = project_feasible(&raw);
                let v = state.ucb(&cand, k)?;
                evals += 1;
                if v > cur_v + 1e-12 {
                    cur = cand;
                    cur_v = v;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Ok((cur, cur_v))
}

/// Next point to evaluate: the best of 40 seeded multi-start UCB climbs
/// (32 random feasible, 8 perturbations of the best observation). With no
/// observations, a seeded random feasible point.
pub fn propose_next(state: &GpState, config: &BoConfig) -> Result<WaveformParams> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seeding::stream_seed(config.seed, "propose", &[state.len() as u64]));
    if state.is_empty() {
        return WaveformParams::from_array(random_feasible(&mut rng));
    }

    let mut candidates: Vec<[f64; 5]> = (0..32).map(|_| random_feasible(&mut rng)).collect();
    let (xs, ys) = state.observations();
    let best_obs = (0..ys.len())
        .max_by(|&a, &b| ys[a].partial_cmp(&ys[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
        .expect("non-empty state");
    for _ in 0..8 {
        let mut p = xs[best_obs];
        for c in p.iter_mut() {
            *c += rng.random_range(-25.0..25.0);
        }
        candidates.push(project_feasible(&p));
    }

    let polished: Vec<(usize, [f64; 5], f64)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, &c)| polish(state, config.ucb_k, c).map(|(p, v)| (i, p, v)))
        .collect::<Result<_>>()?;
    let mut best = &polished[0];
    for cand in &polished[1..] {
        if cand.2 > best.2 {
            best = cand;
        }
    }
    WaveformParams::from_array(best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub params: WaveformParams,
    /// None when the objective failed at this point.
    pub value: Option<f64>,
    /// Best successful value so far; None before the first success.
    pub incumbent: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BoResult {
    pub best_params: WaveformParams,
    pub best_value: f64,
    pub trace: Vec<TraceRow>,
}

/// Propose / evaluate / update loop with periodic MAP refits. Objective
/// failures are recorded in the trace and the iteration is skipped; values
/// are cached by exact bit pattern so duplicate proposals cost nothing.
pub fn optimize<F>(mut objective: F, config: &BoConfig) -> Result<BoResult>
where
    F: FnMut(&WaveformParams) -> Result<f64>,
{
    config.validate()?;
    let mut state = GpState::new(GpHyperparams::default())?;
    let mut cache: HashMap<[u64; 5], f64> = HashMap::new();
    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.max_iterations);
    let mut best: Option<([f64; 5], f64)> = None;

    for iteration in 0..config.max_iterations {
        if iteration > 0 && iteration % config.refit_period == 0 && state.len() >= 3 {
            let hp = map_refit(&state);
            state.set_hyperparams(hp)?;
        }
        // Fresh proposal stream per iteration: a cache hit or a failed
        // evaluation leaves the state unchanged, and reusing its stream
        // would re-propose the same point until the budget ran out.
        let iter_config = BoConfig {
            seed: seeding::stream_seed(config.seed, "bo-iter", &[iteration as u64]),
            ..*config
        };
        let params = propose_next(&state, &iter_config)?;
        let key = params.as_array().map(f64::to_bits);
        let outcome = match cache.get(&key) {
            Some(&v) => Ok(v),
            None => match objective(&params) {
                Ok(v) if v.is_finite() => {
                    cache.insert(key, v);
                    state.observe(params.as_array(), v)?;
                    Ok(v)
                }
                Ok(v) => Err(Error::Numerical(format!("objective returned non-finite value {v}"))),
                Err(e) => Err(e),
            },
        };
        match outcome {
            Ok(v) => {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((params.as_array(), v));
                }
                trace.push(TraceRow {
                    iteration,
                    params,
                    value: Some(v),
                    incumbent: best.map(|(_, b)| b),
                    error: None,
                });
            }
            Err(e) => trace.push(TraceRow {
                iteration,
                params,
                value: None,
                incumbent: best.map(|(_, b)| b),
                error: Some(e.to_string()),
            }),
        }
    }

    let (bp, bv) = best.ok_or_else(|| Error::Numerical("objective never succeeded during optimization".into()))?;
    Ok(BoResult {
        best_params: WaveformParams::from_array(bp)?,
        best_value: bv,
        trace,
    })
}

/// CSV with one row per iteration; failed evaluations print NaN.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "iter,tau0,t0,tau1,t1,tau2,f1_mean,incumbent")?;
    for row in trace {
        let p = row.params.as_array();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.iteration,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            row.value.unwrap_or(f64::NAN),
            row.incumbent.unwrap_or(f64::NAN),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pt(tau0: f64) -> [f64; 5] {
        [tau0, 30.0, 30.0, 30.0, 30.0]
    }

    fn normal(rng: &mut ChaCha12Rng) -> f64 {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn matern_matches_closed_form_values() {
        let hp = GpHyperparams::default();
        let zero = [0.0; 5];
        assert_relative_eq!(matern52(&zero, &zero, &hp), 100.0);

        // r = length scale.
        let at_l = [10.0, 0.0, 0.0, 0.0, 0.0];
        let direct = 100.0 * (1.0 + 5.0f64.sqrt() + 5.0 / 3.0) * (-(5.0f64.sqrt())).exp();
        assert_relative_eq!(direct, 52.39941088318203, max_relative = 1e-13);
        assert_relative_eq!(matern52(&at_l, &zero, &hp), direct, max_relative = 1e-13);

        // Decay to zero at large r.
        let far = [5000.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matern52(&far, &zero, &hp) < 1e-100);

        // Isotropy: only the distance matters.
        let a = [3.0, 4.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 5.0, 0.0, 0.0];
        assert_relative_eq!(matern52(&a, &zero, &hp), matern52(&b, &zero, &hp), max_relative = 1e-14);
    }

    #[test]
    fn matern_grams_are_psd_after_jitter() {
        for seed in [1u64, 2, 3, 4, 5] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 30;
            let pts: Vec<[f64; 5]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(5.0..200.0)))
                .collect();
            let hp = GpHyperparams::default();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] = matern52(&pts[i], &pts[j], &hp);
                }
                k[(i, i)] += 1e-8;
            }
            let min_eig = k
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-8, "min eigenvalue {min_eig} under seed {seed}");
        }
    }

    #[test]
    fn posterior_interpolates_and_reverts_to_prior() {
        let mut state = GpState::new(GpHyperparams::default()).unwrap();
        assert!(state.posterior(&pt(50.0)).is_err());

        let data = [(pt(20.0), 3.0), (pt(45.0), -1.5), (pt(70.0), 0.5)];
        for (x, y) in data {
            state.observe(x, y).unwrap();
        }
        for (x, y) in data {
            let (mean, var) = state.posterior(&x).unwrap();
            assert!((mean - y).abs() < 1e-6, "mean {mean} vs observed {y}");
            assert!((0.0..=1e-6 * 100.0).contains(&var), "variance {var}");
        }

        // Far from the data the prior takes over.
        let (mean, var) = state.posterior(&pt(400.0)).unwrap();
        assert!(mean.abs() < 1e-9, "prior mean reversion, got {mean}");
        assert_relative_eq!(var, 100.0, max_relative = 1e-9);
    }

    #[test]
    fn posterior_mean_beats_prior_on_a_sinusoid_slice() {
        let mut state = GpState::new(GpHyperparams::default()).unwrap();
        let truth = |t: f64| 6.0 * (t / 25.0).sin();
        for i in 0..20 {
            let t = 10.0 + 240.0 * i as f64 / 19.0;
            state.observe(pt(t), truth(t)).unwrap();
        }
        let mut post_sq = 0.0;
        let mut prior_sq = 0.0;
        let grid = 200;
        for g in 0..grid {
            let t = 10.0 + 240.0 * g as f64 / (grid - 1) as f64;
            let (mean, _) = state.posterior(&pt(t)).unwrap();
            post_sq += (mean - truth(t)).powi(2);
            prior_sq += truth(t).powi(2);
        }
        let (post_rmse, prior_rmse) = ((post_sq / grid as f64).sqrt(), (prior_sq / grid as f64).sqrt());
        assert!(
            post_rmse < 0.5 * prior_rmse,
            "posterior RMSE {post_rmse} vs prior {prior_rmse}"
        );
    }

    #[test]
    fn ucb_reduces_to_mean_and_grows_with_k() {
        let mut state = GpState::new(GpHyperparams::default()).unwrap();
        state.observe(pt(50.0), 2.0).unwrap();
        state.observe(pt(90.0), -1.0).unwrap();

        let x = pt(120.0);
        let (mean, var) = state.posterior(&x).unwrap();
        assert!(var > 1.0);
        assert_relative_eq!(state.ucb(&x, 0.0).unwrap(), mean);
        let u1 = state.ucb(&x, 1.0).unwrap();
        let u2 = state.ucb(&x, 2.0).unwrap();
        assert!(mean < u1 && u1 < u2);
        assert_relative_eq!(u2, mean + 2.0 * var.sqrt(), max_relative = 1e-12);

        // Zero-variance point: UCB equals the mean for any k.
        let (m_obs, v_obs) = state.posterior(&pt(50.0)).unwrap();
        assert!(v_obs < 1e-6);
        assert!((state.ucb(&pt(50.0), 2.0).unwrap() - m_obs).abs() < 1e-2);

        assert!(state.ucb(&x, -1.0).is_err());
    }

    #[test]
    fn refit_recovers_the_generating_length_scale() {
        // Median over seeds of data drawn from the prior at l = 10.
        let mut recovered = Vec::new();
        for seed in [11u64, 22, 33, 44, 55] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let xs: Vec<[f64; 5]> = (0..12).map(|i| pt(10.0 + 4.0 * i as f64)).collect();
            let hp = GpHyperparams::default();
            let n = xs.len();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] = matern52(&xs[i], &xs[j], &hp);
                }
                k[(i, i)] += 1e-10;
            }
            let l = Cholesky::new(k).unwrap();
            let z = DVector::from_iterator(n, (0..n).map(|_| normal(&mut rng)));
            let ys = l.l() * z;

            let mut state = GpState::new(GpHyperparams {
                length_scale: 40.0,
                signal_std: 3.0,
                ..GpHyperparams::default()
            })
            .unwrap();
            for (x, y) in xs.iter().zip(ys.iter()) {
                state.observe(*x, *y).unwrap();
            }
            recovered.push(map_refit(&state).length_scale);
        }
        recovered.sort_by(f64::total_cmp);
        let median = recovered[recovered.len() / 2];
        assert!((5.0..=20.0).contains(&median), "median recovered length scale {median}");
    }

    #[test]
    fn refit_shrinks_sigma_on_constant_repeats() {
        let mut state = GpState::new(GpHyperparams::default()).unwrap();
        for _ in 0..3 {
            state.observe(pt(100.0), 0.5).unwrap();
        }
        let hp = map_refit(&state);
        assert!(
            hp.signal_std < DEFAULT_SIGNAL_STD,
            "sigma should shrink below the default, got {}",
            hp.signal_std
        );
    }

    #[test]
    fn refit_never_decreases_penalized_likelihood() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut state = GpState::new(GpHyperparams::default()).unwrap();
        for _ in 0..8 {
            let x = random_feasible(&mut rng);
            let y = (x[0] / 40.0).sin() * 3.0 + normal(&mut rng) * 0.2;
            state.observe(x, y).unwrap();
        }
        let (xs, ys) = state.observations();
        let before = penalized_lml(xs, ys, &state.hyperparams()).unwrap();
        let hp = map_refit(&state);
        let after = penalized_lml(xs, ys, &hp).unwrap();
        assert!(after >= before - 1e-9, "penalized LML fell from {before} to {after}");

        // Fewer than 3 observations: refit is the identity.
        let mut small = GpState::new(GpHyperparams::default()).unwrap();
        small.observe(pt(40.0), 1.0).unwrap();
        assert_eq!(map_refit(&small), small.hyperparams());
    }

    #[test]
    fn projection_always_lands_feasible() {
        let cases = [
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [-50.0, 3.0, 700.0, 5.0, 5.0],
            [200.0, 200.0, 200.0, 200.0, 200.0],
            [f64::INFINITY, 10.0, 10.0, 10.0, f64::NAN],
            [499.0, 5.1, 5.1, 5.1, 5.1],
        ];
        for raw in cases {
            let p = project_feasible(&raw);
            assert!(
                WaveformParams::constraint_violations(&p).is_empty(),
                "projection of {raw:?} gave infeasible {p:?}"
            );
        }
        // Already-feasible points are untouched.
        let ok = [50.0, 60.0, 70.0, 80.0, 90.0];
        assert_eq!(project_feasible(&ok), ok);
    }

    #[test]
    fn proposals_are_feasible_and_cold_start_is_random_but_seeded() {
        let state = GpState::new(GpHyperparams::default()).unwrap();
        let config = BoConfig { seed: 5, ..BoConfig::default() };
        let cold = propose_next(&state, &config).unwrap();
        let again = propose_next(&state, &config).unwrap();
        assert_eq!(cold, again);
        let other = propose_next(&state, &BoConfig { seed: 6, ..BoConfig::default() }).unwrap();
        assert_ne!(cold, other);

        let mut fitted = GpState::new(GpHyperparams::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..6 {
            let x = random_feasible(&mut rng);
            fitted.observe(x, x[0] / 10.0).unwrap();
        }
        for seed in 0..5u64 {
            let p = propose_next(&fitted, &BoConfig { seed, ..BoConfig::default() }).unwrap();
            assert!(WaveformParams::constraint_violations(&p.as_array()).is_empty());
        }
    }

    #[test]
    fn proposal_lands_in_the_top_percentile_of_ucb() {
        // Surrogate with a unique interior peak.
        let center = [80.0, 90.0, 100.0, 85.0, 75.0];
        let value = |x: &[f64; 5]| -> f64 {
            let d2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            10.0 - 0.002 * d2
        };
        let mut state = GpState::new(GpHyperparams {
            length_scale: 40.0,
            ..GpHyperparams::default()
        })
        .unwrap();
        state.observe(center, value(&center)).unwrap();
        for d in 0..5 {
            let mut x = center;
            x[d] += 30.0;
            state.observe(x, value(&x)).unwrap();
            x[d] -= 60.0;
            state.observe(x, value(&x)).unwrap();
        }

        let config = BoConfig { seed: 9, ..BoConfig::default() };
        let proposal = propose_next(&state, &config).unwrap();
        let proposal_ucb = state.ucb(&proposal.as_array(), config.ucb_k).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        let mut sampled: Vec<f64> = (0..100_000)
            .map(|_| state.ucb(&random_feasible(&mut rng), config.ucb_k).unwrap())
            .collect();
        sampled.sort_by(f64::total_cmp);
        let p99 = sampled[(sampled.len() as f64 * 0.99) as usize];
        assert!(
            proposal_ucb >= p99,
            "proposal UCB {proposal_ucb} below the 99th percentile {p99}"
        );
    }

    #[test]
    fn optimize_replays_identically_and_respects_the_cache() {
        use std::cell::RefCell;
        let center = [60.0, 80.0, 100.0, 90.0, 70.0];
        let f = |p: &WaveformParams| -> f64 {
            let a = p.as_array();
            -a.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()
        };
        let config = BoConfig {
            max_iterations: 12,
            seed: 21,
            ..BoConfig::default()
        };
        let calls = RefCell::new(0usize);
        let run = |count: &RefCell<usize>| {
            optimize(
                |p| {
                    *count.borrow_mut() += 1;
                    Ok(f(p))
                },
                &config,
            )
            .unwrap()
        };
        let a = run(&calls);
        let first_calls = *calls.borrow();
        *calls.borrow_mut() = 0;
        let b = run(&calls);
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.best_value, b.best_value);
        assert_eq!(a.trace, b.trace);

        assert_eq!(a.trace.len(), 12);
        let distinct: std::collections::HashSet<[u64; 5]> = a
            .trace
            .iter()
            .map(|r| r.params.as_array().map(f64::to_bits))
            .collect();
        assert_eq!(first_calls, distinct.len(), "objective ran once per distinct point");

        // Incumbent is non-decreasing and every trace point is feasible.
        let mut last = f64::NEG_INFINITY;
        for row in &a.trace {
            assert!(WaveformParams::constraint_violations(&row.params.as_array()).is_empty());
            let inc = row.incumbent.unwrap();
            assert!(inc >= last);
            last = inc;
        }
    }

    #[test]
    fn optimize_skips_failed_evaluations_but_keeps_them_in_the_trace() {
        let config = BoConfig {
            max_iterations: 15,
            seed: 2,
            ..BoConfig::default()
        };
        let result = optimize(
            |p| {
                if p.tau0 > 150.0 {
                    Err(Error::Numerical("detector saturated".into()))
                } else {
                    Ok(-p.tau0)
                }
            },
            &config,
        )
        .unwrap();
        assert_eq!(result.trace.len(), 15);
        let failures = result.trace.iter().filter(|r| r.value.is_none()).count();
        let successes = result.trace.iter().filter(|r| r.value.is_some()).count();
        assert!(failures > 0, "seed 2 should hit the failing region");
        assert!(successes > 0);
        for row in &result.trace {
            assert_eq!(row.value.is_none(), row.error.is_some());
        }
        assert!(result.best_params.tau0 <= 150.0);
        assert_relative_eq!(result.best_value, -result.best_params.tau0);
    }

    #[test]
    fn constant_objective_runs_to_the_iteration_budget() {
        let config = BoConfig {
            max_iterations: 10,
            seed: 4,
            ..BoConfig::default()
        };
        let result = optimize(|_| Ok(1.25), &config).unwrap();
        assert_eq!(result.trace.len(), 10);
        assert_relative_eq!(result.best_value, 1.25);
        assert!(WaveformParams::constraint_violations(&result.best_params.as_array()).is_empty());
    }

    #[test]
    fn optimizer_approaches_a_concave_quadratic_optimum() {
        let center = [60.0, 80.0, 100.0, 90.0, 70.0];
        let f = |a: &[f64; 5]| -> f64 {
            -a.iter().zip(&center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()
        };
        let config = BoConfig { seed: 17, ..BoConfig::default() };
        let result = optimize(|p| Ok(f(&p.as_array())), &config).unwrap();

        // Random-search oracle with a million feasible draws.
        let mut rng = ChaCha12Rng::seed_from_u64(1_000_000_007);
        let mut oracle_best = f64::NEG_INFINITY;
        for _ in 0..1_000_000 {
            oracle_best = oracle_best.max(f(&random_feasible(&mut rng)));
        }
        assert!(
            result.best_value >= oracle_best - 0.05 * oracle_best.abs(),
            "BO best {} vs oracle {oracle_best}",
            result.best_value
        );
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let trace = vec![
            TraceRow {
                iteration: 0,
                params: WaveformParams::new(50.0, 60.0, 70.0, 80.0, 90.0).unwrap(),
                value: Some(0.5),
                incumbent: Some(0.5),
                error: None,
            },
            TraceRow {
                iteration: 1,
                params: WaveformParams::new(20.0, 30.0, 40.0, 50.0, 60.0).unwrap(),
                value: None,
                incumbent: Some(0.5),
                error: Some("boom".into()),
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iter,tau0,t0,tau1,t1,tau2,f1_mean,incumbent");
        assert_eq!(lines[1], "0,50,60,70,80,90,0.5,0.5");
        assert_eq!(lines[2], "1,20,30,40,50,60,NaN,0.5");
    }
}
