//! IIA-HMM: maximum-likelihood demixing with hidden Markov state modulation,
//! fit by generalised EM.
//!
//! Emissions are `log N(h(x_t, x_{t−1}); m_c, diag v_c) + ln|det ∂h/∂x_t|`.
//! The first `p` observations are conditioned on.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{extract_innovations, train_tcl, NetArch, TclConfig};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{Activation, Mlp, ParamSet};
use crate::series::TimeSeries;
use crate::simgen::segment_labels;
use crate::train::SgdConfig;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Variance floor of the state Gaussians.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// States whose total responsibility falls below this are reinitialised.
pub const MIN_STATE_MASS: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

/// Demixing network plus Markov chain and per-state Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub h_net: Mlp,
    pub order: usize,
    /// Row-stochastic `C × C`.
    pub transition: Matrix,
    pub initial: Vec<f64>,
    /// `C × n`.
    pub means: Matrix,
    /// `C × n`, strictly positive.
    pub vars: Matrix,
    pub num_states: usize,
    pub restart_seed: u64,
    pub final_loglik: f64,
}

/// State posteriors of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriors {
    /// `T × C`.
    pub gamma: Matrix,
    /// `(T − 1)·C·C`, entry `(t, i, j)` at `(t·C + i)·C + j`.
    pub xi: Vec<f64>,
    pub num_states: usize,
    pub loglik: f64,
}

impl Posteriors {
    pub fn xi(&self, t: usize, i: usize, j: usize) -> f64 {
        let c = self.num_states;
        self.xi[(t * c + i) * c + j]
    }
}

/// Discrete parameters produced by the closed-form M-step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteParams {
    pub transition: Matrix,
    pub initial: Vec<f64>,
    pub means: Matrix,
    pub vars: Matrix,
    /// States reinitialised from a random data point.
    pub reinitialized: Vec<usize>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_stochastic(a: &Matrix, pi: &[f64]) -> Result<()> {
    let c = pi.len();
    if a.shape() != (c, c) {
        return Err(shape_err(
            format!("{c}x{c} transition matrix"),
            format!("{:?}", a.shape()),
        ));
    }
    let bad = |row: &[f64]| {
        row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
    };
    if (0..c).any(|i| bad(a.row(i))) || bad(pi) {
        return Err(Error::InvalidConfig(
            "transition rows and initial distribution must be probability vectors".into(),
        ));
    }
    Ok(())
}

impl HmmModel {
    pub fn n(&self) -> usize {
        self.h_net.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.num_states, self.n());
        if c == 0 || self.initial.len() != c {
            return Err(shape_err(format!("{c} initial probabilities"), self.initial.len()));
        }
        check_stochastic(&self.transition, &self.initial)?;
        if self.means.shape() != (c, n) || self.vars.shape() != (c, n) {
            return Err(shape_err(
                format!("{c}x{n} state moments"),
                format!("{:?}", self.means.shape()),
            ));
        }
        if self.vars.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("state variances must be positive".into()));
        }
        if self.h_net.input_dim() != (self.order + 1) * n {
            return Err(shape_err((self.order + 1) * n, self.h_net.input_dim()));
        }
        Ok(())
    }

    fn x_cols(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }

    /// `log N(y; m_c, diag v_c)`.
    fn gaussian(&self, y: &[f64], c: usize) -> f64 {
        let (m, v) = (self.means.row(c), self.vars.row(c));
        y.iter()
            .zip(m)
            .zip(v)
            .map(|((y, m), v)| -0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v))
            .sum()
    }

    /// Emission log-density of state `c` at `(x_t, [x_{t−1}, …, x_{t−p}])`.
    pub fn emission_loglik(&self, x_t: &[f64], x_prev: &[f64], c: usize) -> Result<f64> {
        let n = self.n();
        if x_t.len() != n || x_prev.len() != self.order * n {
            return Err(shape_err(
                format!("x_t of {n} and lags of {}", self.order * n),
                format!("{} and {}", x_t.len(), x_prev.len()),
            ));
        }
        if c >= self.num_states {
            return Err(Error::InvalidConfig(format!("state {c} out of range")));
        }
        let row: Vec<f64> = x_t.iter().chain(x_prev).copied().collect();
        let input = Matrix::from_vec(1, row.len(), row)?;
        let y = self.h_net.predict(&input)?;
        let ld = self.h_net.logdets(&input, &self.x_cols())?[0];
        Ok(self.gaussian(y.row(0), c) + ld)
    }

    /// `T × C` log-emissions over lag-embedded `inputs`, the extracted
    /// innovations, and the number of singular Jacobians.
    pub fn emissions(&self, inputs: &Matrix) -> Result<(Matrix, Matrix, usize)> {
        let y = self.h_net.predict(inputs)?;
        let logdets = self.h_net.logdets(inputs, &self.x_cols())?;
        let singular = logdets.iter().filter(|v| v.is_infinite()).count();
        let e = Matrix::from_fn(inputs.rows(), self.num_states, |t, c| {
            self.gaussian(y.row(t), c) + logdets[t]
        });
        Ok((e, y, singular))
    }

    /// Extracted innovations for `t = p..N`.
    pub fn extract(&self, x: &TimeSeries) -> Result<TimeSeries> {
        extract_innovations(&self.h_net, x, self.order)
    }

    /// Most probable state path for `t = p..N`.
    pub fn decode(&self, x: &TimeSeries) -> Result<Vec<usize>> {
        let (e, _, _) = self.emissions(&x.lagged(self.order, true)?)?;
        viterbi(&e, &self.transition, &self.initial)
    }

    /// Log-likelihood of `x` conditioned on the first `p` points.
    pub fn loglik(&self, x: &TimeSeries) -> Result<f64> {
        let (e, _, _) = self.emissions(&x.lagged(self.order, true)?)?;
        Ok(forward_backward(&e, &self.transition, &self.initial)?.loglik)
    }
}

/// Log-space forward–backward over `T × C` log-emissions.
pub fn forward_backward(emissions: &Matrix, a: &Matrix, pi: &[f64]) -> Result<Posteriors> {
    let (len, c) = emissions.shape();
    check_stochastic(a, pi)?;
    if len == 0 {
        return Err(shape_err("at least one time point", 0));
    }
    for t in 0..len {
        let row = emissions.row(t);
        if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite(format!("emission at t={t}")));
        }
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Singular(format!("no state explains t={t}")));
        }
    }
    let log_a = Matrix::from_fn(c, c, |i, j| a[(i, j)].ln());
    let mut alpha = Matrix::zeros(len, c);
    for j in 0..c {
        alpha[(0, j)] = pi[j].ln() + emissions[(0, j)];
    }
    let mut buf = vec![0.0; c];
    for t in 1..len {
        for j in 0..c {
            for i in 0..c {
                buf[i] = alpha[(t - 1, i)] + log_a[(i, j)];
            }
            alpha[(t, j)] = log_sum_exp(&buf) + emissions[(t, j)];
        }
    }
    let loglik = log_sum_exp(alpha.row(len - 1));
    if !loglik.is_finite() {
        return Err(Error::Singular("sequence has zero likelihood".into()));
    }
    let mut beta = Matrix::zeros(len, c);
    for t in (0..len - 1).rev() {
        for i in 0..c {
            for j in 0..c {
                buf[j] = log_a[(i, j)] + emissions[(t + 1, j)] + beta[(t + 1, j)];
            }
            beta[(t, i)] = log_sum_exp(&buf);
        }
    }
    let mut gamma = Matrix::zeros(len, c);
    for t in 0..len {
        for i in 0..c {
            buf[i] = alpha[(t, i)] + beta[(t, i)];
        }
        let z = log_sum_exp(&buf);
        for i in 0..c {
            gamma[(t, i)] = (buf[i] - z).exp();
        }
    }
    let mut xi = vec![0.0; len.saturating_sub(1) * c * c];
    let mut pair = vec![0.0; c * c];
    for t in 0..len.saturating_sub(1) {
        for i in 0..c {
            for j in 0..c {
                pair[i * c + j] = alpha[(t, i)] + log_a[(i, j)] + emissions[(t + 1, j)] + beta[(t + 1, j)];
            }
        }
        let z = log_sum_exp(&pair);
        for (dst, p) in xi[t * c * c..(t + 1) * c * c].iter_mut().zip(&pair) {
            *dst = (p - z).exp();
        }
    }
    Ok(Posteriors {
        gamma,
        xi,
        num_states: c,
        loglik,
    })
}

/// Most probable state path (max-product in log space).
pub fn viterbi(emissions: &Matrix, a: &Matrix, pi: &[f64]) -> Result<Vec<usize>> {
    let (len, c) = emissions.shape();
    check_stochastic(a, pi)?;
    if len == 0 {
        return Ok(Vec::new());
    }
    let log_a = Matrix::from_fn(c, c, |i, j| a[(i, j)].ln());
    let mut delta: Vec<f64> = (0..c).map(|j| pi[j].ln() + emissions[(0, j)]).collect();
    let mut back = vec![0usize; len * c];
    for t in 1..len {
        let mut next = vec![f64::NEG_INFINITY; c];
        for j in 0..c {
            let (arg, best) = (0..c)
                .map(|i| (i, delta[i] + log_a[(i, j)]))
                .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
            next[j] = best + emissions[(t, j)];
            back[t * c + j] = arg;
        }
        delta = next;
    }
    let mut state = (0..c)
        .fold((0, f64::NEG_INFINITY), |acc, j| {
            if delta[j] > acc.1 {
                (j, delta[j])
            } else {
                acc
            }
        })
        .0;
    let mut path = vec![0; len];
    for t in (0..len).rev() {
        path[t] = state;
        if t > 0 {
            state = back[t * c + state];
        }
    }
    Ok(path)
}

/// Baum–Welch closed-form update of the chain and the state Gaussians from
/// the current innovation estimates.
pub fn m_step_discrete<R: Rng + ?Sized>(post: &Posteriors, s_hat: &Matrix, rng: &mut R) -> Result<DiscreteParams> {
    let (len, c) = post.gamma.shape();
    let n = s_hat.cols();
    if s_hat.rows() != len {
        return Err(shape_err(len, s_hat.rows()));
    }
    let mut counts = Matrix::zeros(c, c);
    for t in 0..len.saturating_sub(1) {
        for i in 0..c {
            for j in 0..c {
                counts[(i, j)] += post.xi(t, i, j);
            }
        }
    }
    let mut transition = Matrix::zeros(c, c);
    for i in 0..c {
        let total: f64 = counts.row(i).iter().sum();
        for j in 0..c {
            transition[(i, j)] = if total > 0.0 {
                counts[(i, j)] / total
            } else {
                1.0 / c as f64
            };
        }
    }
    let initial = post.gamma.row(0).to_vec();
    let mut means = Matrix::zeros(c, n);
    let mut vars = Matrix::zeros(c, n);
    let mut reinitialized = Vec::new();
    let global_var: Vec<f64> = {
        let cov = s_hat.covariance();
        (0..n).map(|i| cov[(i, i)].max(VARIANCE_FLOOR)).collect()
    };
    for k in 0..c {
        let mass: f64 = (0..len).map(|t| post.gamma[(t, k)]).sum();
        if mass < MIN_STATE_MASS {
            let t = rng.gen_range(0..len);
            means.row_mut(k).copy_from_slice(s_hat.row(t));
            vars.row_mut(k).copy_from_slice(&global_var);
            reinitialized.push(k);
            continue;
        }
        for t in 0..len {
            let g = post.gamma[(t, k)];
            for (m, s) in means.row_mut(k).iter_mut().zip(s_hat.row(t)) {
                *m += g * s;
            }
        }
        means.row_mut(k).iter_mut().for_each(|m| *m /= mass);
        for t in 0..len {
            let g = post.gamma[(t, k)];
            let mk = means.row(k).to_vec();
            for ((v, s), m) in vars.row_mut(k).iter_mut().zip(s_hat.row(t)).zip(&mk) {
                *v += g * (s - m) * (s - m);
            }
        }
        vars.row_mut(k)
            .iter_mut()
            .for_each(|v| *v = (*v / mass).max(VARIANCE_FLOOR));
    }
    Ok(DiscreteParams {
        transition,
        initial,
        means,
        vars,
        reinitialized,
    })
}

/// `Q(h) = Σ_t Σ_c γ_t(c)·[log N(h_t; m_c, v_c) + ln|det ∂h/∂x_t|]`, the
/// network part of the EM lower bound.
pub fn q_value(model: &HmmModel, inputs: &Matrix, gamma: &Matrix) -> Result<f64> {
    if gamma.shape() != (inputs.rows(), model.num_states) {
        return Err(shape_err(
            format!("{:?}", (inputs.rows(), model.num_states)),
            format!("{:?}", gamma.shape()),
        ));
    }
    let (e, _, _) = model.emissions(inputs)?;
    let mut q = 0.0;
    for t in 0..inputs.rows() {
        for c in 0..model.num_states {
            let g = gamma[(t, c)];
            if g > 0.0 {
                q += g * e[(t, c)];
            }
        }
    }
    Ok(if q.is_nan() { f64::NEG_INFINITY } else { q })
}

/// `Q` and its gradient with respect to the demixing network parameters.
pub fn q_grad(model: &HmmModel, inputs: &Matrix, gamma: &Matrix) -> Result<(f64, Mlp)> {
    let (len, c) = (inputs.rows(), model.num_states);
    if gamma.shape() != (len, c) {
        return Err(shape_err(format!("{:?}", (len, c)), format!("{:?}", gamma.shape())));
    }
    let net = &model.h_net;
    let cache = net.forward(inputs)?;
    let y = cache.output();
    let n = model.n();
    // descent direction of −Q: upstream = −∂Q/∂h
    let mut upstream = Matrix::zeros(len, n);
    let mut weights = vec![0.0; len];
    let mut q = 0.0;
    for t in 0..len {
        for k in 0..c {
            let g = gamma[(t, k)];
            if g == 0.0 {
                continue;
            }
            weights[t] += g;
            q += g * model.gaussian(y.row(t), k);
            for i in 0..n {
                upstream[(t, i)] += g * (y[(t, i)] - model.means[(k, i)]) / model.vars[(k, i)];
            }
        }
    }
    let mut grads = net.zeros_like();
    net.backward_into(&cache, &upstream, None, &mut grads)?;
    let mut ascent = net.zeros_like();
    let logdets = net.logdet_jacobian_grad_cached(&cache, &model.x_cols(), &weights, &mut ascent)?;
    q += logdets.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>();
    ascent.add_scaled(&grads, -1.0);
    Ok((q, ascent))
}

/// Outcome of one network M-step.
#[derive(Clone, Debug, PartialEq)]
pub struct NetStepReport {
    pub q_before: f64,
    pub q_after: f64,
    pub accepted_steps: usize,
    pub step_size: f64,
}

/// Gradient ascent on `Q` with backtracking; every accepted step does not
/// decrease `Q`. `step_size` carries over between calls.
pub fn m_step_network(
    model: &mut HmmModel,
    inputs: &Matrix,
    gamma: &Matrix,
    steps: usize,
    step_size: f64,
) -> Result<NetStepReport> {
    let len = inputs.rows().max(1) as f64;
    let (mut q, mut g) = q_grad(model, inputs, gamma)?;
    let q_before = q;
    let mut eta = step_size;
    let mut accepted = 0;
    while accepted < steps {
        if g.sq_norm() == 0.0 || !g.all_finite() {
            break;
        }
        let mut found = false;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = model.clone();
            cand.h_net.add_scaled(&g, eta / len);
            let q_new = match q_value(&cand, inputs, gamma) {
                Ok(v) => v,
                Err(Error::Singular(_)) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            if q_new.is_finite() && q_new >= q {
                *model = cand;
                q = q_new;
                found = true;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
        if !found {
            break;
        }
        accepted += 1;
        if accepted < steps {
            g = q_grad(model, inputs, gamma)?.1;
        }
    }
    Ok(NetStepReport {
        q_before,
        q_after: q,
        accepted_steps: accepted,
        step_size: eta,
    })
}

/// Initialisation of the demixing network by a short IIA-TCL run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TclInitConfig {
    pub segment_len: usize,
    pub sgd: SgdConfig,
}

impl Default for TclInitConfig {
    fn default() -> Self {
        Self {
            segment_len: 32,
            sgd: SgdConfig {
                epochs: 20,
                lr: 0.1,
                ..SgdConfig::default()
            },
        }
    }
}

/// EM settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub num_states: usize,
    pub arch: NetArch,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the per-sample log-likelihood improves by less than this.
    pub tol: f64,
    /// Gradient steps per network M-step.
    pub net_steps: usize,
    pub net_step_size: f64,
    /// Diagonal of the initial transition matrix.
    pub init_stay: f64,
    pub tcl_init: TclInitConfig,
    pub mean_init: MeanInit,
    pub seed: u64,
    /// Worker threads for restarts; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            num_states: 2,
            arch: NetArch {
                width_factor: 2,
                activation: Activation::smooth_leaky_relu(0.2),
                ..NetArch::default()
            },
            restarts: 20,
            max_iters: 100,
            tol: 1e-6,
            net_steps: 5,
            net_step_size: 0.1,
            init_stay: 0.9,
            tcl_init: TclInitConfig::default(),
            mean_init: MeanInit::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.nica {
            return Err(Error::InvalidConfig("IIA-HMM has no NICA mode".into()));
        }
        if self.num_states < 1 || self.restarts < 1 || self.max_iters < 1 {
            return Err(Error::InvalidConfig(
                "num_states, restarts and max_iters must be >= 1".into(),
            ));
        }
        if !(0.0 < self.init_stay && self.init_stay <= 1.0) {
            return Err(Error::InvalidConfig("init_stay must lie in (0, 1]".into()));
        }
        if self.tcl_init.segment_len < 2 {
            return Err(Error::InvalidConfig("TCL init segment length must be >= 2".into()));
        }
        self.tcl_init.sgd.validate()
    }
}

/// How the initial state means are drawn from the TCL-extracted innovations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanInit {
    /// Distinct random time points.
    Points,
    /// Averages over distinct random blocks of `segment_len` points.
    Segments,
    /// Block averages drawn one at a time with probability proportional to
    /// the squared distance from the nearest block already chosen.
    #[default]
    SpreadSegments,
}

/// One EM iteration of one restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmRecord {
    pub restart: usize,
    pub iter: usize,
    pub loglik: f64,
    pub q: f64,
    pub accepted_net_step: bool,
}

/// Summary of one restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub seed: u64,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub reinitialized_states: usize,
    pub error: Option<String>,
}

/// Best model over restarts plus the full EM log.
#[derive(Clone, Debug)]
pub struct HmmOutcome {
    pub model: HmmModel,
    pub log: Vec<EmRecord>,
    pub restarts: Vec<RestartSummary>,
    pub best_restart: usize,
}

impl HmmOutcome {
    /// Writes the EM log as CSV `restart,iter,loglik,Q,accepted_net_step`.
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["restart", "iter", "loglik", "Q", "accepted_net_step"])?;
        for r in &self.log {
            w.write_record([
                r.restart.to_string(),
                r.iter.to_string(),
                r.loglik.to_string(),
                r.q.to_string(),
                r.accepted_net_step.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn block_means(s_hat: &TimeSeries, block: usize) -> Vec<Vec<f64>> {
    let n = s_hat.dim();
    (0..s_hat.len() / block)
        .map(|b| {
            let mut m = vec![0.0; n];
            for t in b * block..(b + 1) * block {
                m.iter_mut().zip(s_hat.at(t)).for_each(|(a, v)| *a += v / block as f64);
            }
            m
        })
        .collect()
}

fn initial_means(s_hat: &TimeSeries, c: usize, how: MeanInit, block: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let candidates: Vec<Vec<f64>> = match how {
        MeanInit::Points => (0..s_hat.len()).map(|t| s_hat.at(t).to_vec()).collect(),
        _ if s_hat.len() / block >= c => block_means(s_hat, block),
        _ => (0..s_hat.len()).map(|t| s_hat.at(t).to_vec()).collect(),
    };
    if candidates.is_empty() {
        return Err(shape_err("at least one extracted point", 0));
    }
    let picks: Vec<usize> = if how == MeanInit::SpreadSegments {
        let mut picks = vec![rng.gen_range(0..candidates.len())];
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut d2: Vec<f64> = candidates.iter().map(|v| dist(v, &candidates[picks[0]])).collect();
        while picks.len() < c.min(candidates.len()) {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.gen::<f64>() * total;
                d2.iter()
                    .position(|&w| {
                        u -= w;
                        u < 0.0
                    })
                    .unwrap_or(d2.len() - 1)
            } else {
                rng.gen_range(0..candidates.len())
            };
            picks.push(next);
            for (d, v) in d2.iter_mut().zip(&candidates) {
                *d = d.min(dist(v, &candidates[next]));
            }
        }
        picks
    } else {
        sample(rng, candidates.len(), c.min(candidates.len())).into_vec()
    };
    let mut rows: Vec<Vec<f64>> = picks.iter().map(|&i| candidates[i].clone()).collect();
    while rows.len() < c {
        rows.push(rows[rows.len() % picks.len()].clone());
    }
    Matrix::from_rows(&rows)
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    rng.gen()
}

/// Initial model of one restart: TCL-trained network, near-diagonal chain,
/// uniform initial distribution, means at random extracted points and the
/// global variance for every state.
fn init_restart(x: &TimeSeries, cfg: &HmmConfig, seed: u64) -> Result<HmmModel> {
    let (n, c, p) = (x.dim(), cfg.num_states, cfg.arch.order);
    let segments = (x.len() / cfg.tcl_init.segment_len).max(2);
    let labels = segment_labels(x.len(), segments)?;
    let tcl_cfg = TclConfig {
        arch: cfg.arch.clone(),
        sgd: SgdConfig {
            seed,
            ..cfg.tcl_init.sgd.clone()
        },
        init_seed: seed,
    };
    let h_net = train_tcl(x, &labels, &tcl_cfg)?.model.h_net;
    let s_hat = extract_innovations(&h_net, x, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d4d);
    let means = initial_means(&s_hat, c, cfg.mean_init, cfg.tcl_init.segment_len, &mut rng)?;
    let (_, sd) = s_hat.standardization();
    let vars = Matrix::from_fn(c, n, |_, i| (sd[i] * sd[i]).max(VARIANCE_FLOOR));
    let off = if c > 1 {
        (1.0 - cfg.init_stay) / (c - 1) as f64
    } else {
        0.0
    };
    let transition = Matrix::from_fn(c, c, |i, j| {
        if c == 1 {
            1.0
        } else if i == j {
            cfg.init_stay
        } else {
            off
        }
    });
    Ok(HmmModel {
        h_net,
        order: p,
        transition,
        initial: vec![1.0 / c as f64; c],
        means,
        vars,
        num_states: c,
        restart_seed: seed,
        final_loglik: f64::NEG_INFINITY,
    })
}

/// Generalised EM from a given starting model; appends to `log`.
pub fn run_em(
    mut model: HmmModel,
    x: &TimeSeries,
    cfg: &HmmConfig,
    restart: usize,
    log: &mut Vec<EmRecord>,
) -> Result<(HmmModel, usize, usize)> {
    model.validate()?;
    let inputs = x.lagged(model.order, true)?;
    let len = inputs.rows() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(model.restart_seed ^ 0xe5);
    let mut step_size = cfg.net_step_size;
    let mut prev = f64::NEG_INFINITY;
    let mut reinit = 0;
    let mut iters = 0;
    // the last pass only evaluates the returned parameters
    for iter in 0..=cfg.max_iters {
        let (e, s_hat, _) = model.emissions(&inputs)?;
        let post = forward_backward(&e, &model.transition, &model.initial)?;
        if !post.loglik.is_finite() {
            return Err(Error::Divergence {
                epoch: iter,
                reason: "non-finite log-likelihood".into(),
            });
        }
        let converged = iter > 0 && (post.loglik - prev) / len < cfg.tol;
        prev = post.loglik;
        model.final_loglik = post.loglik;
        iters = iter;
        if converged || iter == cfg.max_iters {
            log.push(EmRecord {
                restart,
                iter,
                loglik: post.loglik,
                q: f64::NAN,
                accepted_net_step: false,
            });
            break;
        }
        let d = m_step_discrete(&post, &s_hat, &mut rng)?;
        reinit += d.reinitialized.len();
        model.transition = d.transition;
        model.initial = d.initial;
        model.means = d.means;
        model.vars = d.vars;
        let report = m_step_network(&mut model, &inputs, &post.gamma, cfg.net_steps, step_size)?;
        step_size = report.step_size;
        log.push(EmRecord {
            restart,
            iter,
            loglik: post.loglik,
            q: report.q_after,
            accepted_net_step: report.accepted_steps > 0,
        });
    }
    Ok((model, iters, reinit))
}

/// IIA-HMM: independent restarts (each initialised by IIA-TCL) of
/// generalised EM; the restart with the highest log-likelihood wins.
pub fn train_hmm_em(x: &TimeSeries, cfg: &HmmConfig) -> Result<HmmOutcome> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("observations".into()));
    }
    if x.len() < cfg.arch.order + 2 * cfg.num_states.max(cfg.tcl_init.segment_len) {
        return Err(shape_err(
            format!(
                "more than {} time points",
                2 * cfg.num_states.max(cfg.tcl_init.segment_len)
            ),
            x.len(),
        ));
    }
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |v| v.get()),
        t => t,
    }
    .min(cfg.restarts);
    let next = AtomicUsize::new(0);
    type Slot = Option<(Result<(HmmModel, usize, usize)>, Vec<EmRecord>)>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..cfg.restarts).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let r = next.fetch_add(1, Ordering::Relaxed);
                if r >= cfg.restarts {
                    break;
                }
                let seed = restart_seed(cfg.seed, r);
                let mut log = Vec::new();
                let res = init_restart(x, cfg, seed).and_then(|m| run_em(m, x, cfg, r, &mut log));
                results.lock().expect("restart results lock")[r] = Some((res, log));
            });
        }
    });
    let mut log = Vec::new();
    let mut summaries = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(usize, HmmModel)> = None;
    for (r, slot) in results
        .into_inner()
        .expect("restart results lock")
        .into_iter()
        .enumerate()
    {
        let (res, mut rlog) = slot.expect("every restart ran");
        log.append(&mut rlog);
        let seed = restart_seed(cfg.seed, r);
        match res {
            Ok((model, iterations, reinit)) => {
                summaries.push(RestartSummary {
                    restart: r,
                    seed,
                    loglik: Some(model.final_loglik),
                    iterations,
                    reinitialized_states: reinit,
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| model.final_loglik > b.final_loglik) {
                    best = Some((r, model));
                }
            }
            Err(e) => summaries.push(RestartSummary {
                restart: r,
                seed,
                loglik: None,
                iterations: 0,
                reinitialized_states: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    let (best_restart, model) = best.ok_or_else(|| Error::Divergence {
        epoch: 0,
        reason: format!("all {} restarts failed", cfg.restarts),
    })?;
    Ok(HmmOutcome {
        model,
        log,
        restarts: summaries,
        best_restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{slogdet, Lu};
    use crate::nnet::grad_check;

    fn random_stochastic(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn random_chain(rng: &mut ChaCha8Rng, c: usize) -> (Matrix, Vec<f64>) {
        let rows: Vec<Vec<f64>> = (0..c).map(|_| random_stochastic(rng, c)).collect();
        (Matrix::from_rows(&rows).unwrap(), random_stochastic(rng, c))
    }

    /// log Σ over all state paths, by enumeration.
    fn brute_loglik(e: &Matrix, a: &Matrix, pi: &[f64]) -> f64 {
        let (len, c) = e.shape();
        let mut terms = Vec::new();
        for code in 0..c.pow(len as u32) {
            let path: Vec<usize> = (0..len).map(|t| code / c.pow(t as u32) % c).collect();
            let mut lp = pi[path[0]].ln() + e[(0, path[0])];
            for t in 1..len {
                lp += a[(path[t - 1], path[t])].ln() + e[(t, path[t])];
            }
            terms.push(lp);
        }
        log_sum_exp(&terms)
    }

    fn small_model(n: usize, c: usize, layers: usize, seed: u64) -> HmmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = NetArch {
            layers,
            width_factor: 2,
            activation: Activation::smooth_leaky_relu(0.2),
            ..NetArch::default()
        };
        let h_net = arch.h_net(n, seed).unwrap();
        let (transition, initial) = random_chain(&mut rng, c);
        HmmModel {
            h_net,
            order: 1,
            transition,
            initial,
            means: Matrix::from_fn(c, n, |_, _| rng.gen_range(-1.0..1.0)),
            vars: Matrix::from_fn(c, n, |_, _| rng.gen_range(0.5..2.0)),
            num_states: c,
            restart_seed: seed,
            final_loglik: f64::NEG_INFINITY,
        }
    }

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn emission_of_standard_normal_at_zero() {
        let n = 3;
        let w = Matrix::identity(n).hcat(&Matrix::zeros(n, n)).unwrap();
        let h_net = Mlp::from_parts(vec![2 * n, n], Activation::Linear, vec![w], vec![vec![0.0; n]]).unwrap();
        let model = HmmModel {
            h_net,
            order: 1,
            transition: Matrix::identity(1),
            initial: vec![1.0],
            means: Matrix::zeros(1, n),
            vars: Matrix::from_fn(1, n, |_, _| 1.0),
            num_states: 1,
            restart_seed: 0,
            final_loglik: 0.0,
        };
        let e = model.emission_loglik(&[0.0; 3], &[0.4, -2.0, 1.0], 0).unwrap();
        assert!((e - (-0.918_938_533_204_672_7 * n as f64)).abs() < 1e-12);
    }

    #[test]
    fn linear_logdet_is_ln_det_w() {
        let mut model = small_model(3, 2, 1, 4);
        let w = model.h_net.weights()[0].select_cols(&[0, 1, 2]);
        let expected = slogdet(&w).unwrap().1;
        let inputs = random_inputs(5, 6, 1);
        let lds = model.h_net.logdets(&inputs, &[0, 1, 2]).unwrap();
        assert!(lds.iter().all(|l| (l - expected).abs() < 1e-12));
        model.h_net.weights_mut()[0]
            .row_mut(2)
            .iter_mut()
            .take(3)
            .for_each(|v| *v = 0.0);
        let lds = model.h_net.logdets(&inputs, &[0, 1, 2]).unwrap();
        assert!(lds.iter().all(|l| *l == f64::NEG_INFINITY));
    }

    #[test]
    fn logdet_matches_finite_difference_jacobian() {
        for seed in 0..5 {
            let model = small_model(3, 2, 3, seed);
            let point = random_inputs(1, 6, seed + 10).into_vec();
            let eps = 1e-6;
            let fd = Matrix::from_fn(3, 3, |i, j| {
                let eval = |d: f64| {
                    let mut p = point.clone();
                    p[j] += d;
                    model.h_net.predict(&Matrix::from_vec(1, 6, p).unwrap()).unwrap()[(0, i)]
                };
                (eval(eps) - eval(-eps)) / (2.0 * eps)
            });
            let ld = model
                .h_net
                .logdets(&Matrix::from_vec(1, 6, point).unwrap(), &[0, 1, 2])
                .unwrap()[0];
            let (_, fd_ld) = Lu::new(&fd).unwrap().slogdet();
            let rel = ((ld.exp() - fd_ld.exp()) / fd_ld.exp()).abs();
            assert!(rel < 1e-5, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn linear_logdet_gradient_is_inverse_transpose() {
        let model = small_model(3, 1, 1, 2);
        let inputs = random_inputs(4, 6, 3);
        let mut g = model.h_net.zeros_like();
        model
            .h_net
            .logdet_jacobian_grad(&inputs, &[0, 1, 2], &[0.5; 4], &mut g)
            .unwrap();
        let w = model.h_net.weights()[0].select_cols(&[0, 1, 2]);
        let inv_t = Lu::new(&w).unwrap().inverse().unwrap().transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.weights()[0][(i, j)] - 2.0 * inv_t[(i, j)]).abs() < 1e-12);
            }
            for j in 3..6 {
                assert_eq!(g.weights()[0][(i, j)], 0.0);
            }
        }
        let mut z = model.h_net.zeros_like();
        model
            .h_net
            .logdet_jacobian_grad(&inputs, &[0, 1, 2], &[0.0; 4], &mut z)
            .unwrap();
        assert_eq!(z.sq_norm(), 0.0);
    }

    #[test]
    fn logdet_gradient_matches_finite_differences() {
        let model = small_model(3, 1, 2, 7);
        let inputs = random_inputs(6, 6, 8);
        let weights = [1.0, 0.5, -0.3, 2.0, 0.0, 1.2];
        let report = grad_check(&model.h_net, 1e-6, |net| {
            let mut g = net.zeros_like();
            let lds = net.logdet_jacobian_grad(&inputs, &[0, 1, 2], &weights, &mut g).unwrap();
            (lds.iter().zip(&weights).map(|(l, w)| l * w).sum(), g)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn single_state_posteriors() {
        let e = random_inputs(5, 1, 1);
        let post = forward_backward(&e, &Matrix::identity(1), &[1.0]).unwrap();
        assert!(post.gamma.as_slice().iter().all(|&g| (g - 1.0).abs() < 1e-15));
        let total: f64 = e.as_slice().iter().sum();
        assert!((post.loglik - total).abs() < 1e-12);
    }

    #[test]
    fn forward_backward_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let c = 2 + trial % 2;
            let len = 1 + trial % 6;
            let (a, pi) = random_chain(&mut rng, c);
            let e = Matrix::from_fn(len, c, |_, _| rng.gen_range(-8.0..2.0));
            let post = forward_backward(&e, &a, &pi).unwrap();
            assert!((post.loglik - brute_loglik(&e, &a, &pi)).abs() < 1e-9);
            for t in 0..len {
                assert!((post.gamma.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for t in 0..len - 1 {
                let slice: f64 = post.xi[t * c * c..(t + 1) * c * c].iter().sum();
                assert!((slice - 1.0).abs() < 1e-12);
                for i in 0..c {
                    let m: f64 = (0..c).map(|j| post.xi(t, i, j)).sum();
                    assert!((m - post.gamma[(t, i)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn forward_backward_rejects_unexplained_point() {
        let mut e = Matrix::zeros(3, 2);
        e[(1, 0)] = f64::NEG_INFINITY;
        let a = Matrix::from_fn(2, 2, |_, _| 0.5);
        assert!(forward_backward(&e, &a, &[0.5, 0.5]).is_ok());
        e[(1, 1)] = f64::NEG_INFINITY;
        assert!(matches!(forward_backward(&e, &a, &[0.5, 0.5]), Err(Error::Singular(_))));
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let (c, len) = (3, 5);
            let (a, pi) = random_chain(&mut rng, c);
            let e = Matrix::from_fn(len, c, |_, _| rng.gen_range(-5.0..1.0));
            let path = viterbi(&e, &a, &pi).unwrap();
            let score = |p: &[usize]| {
                pi[p[0]].ln() + e[(0, p[0])] + (1..len).map(|t| a[(p[t - 1], p[t])].ln() + e[(t, p[t])]).sum::<f64>()
            };
            let best = (0..c.pow(len as u32))
                .map(|code| {
                    let p: Vec<usize> = (0..len).map(|t| code / c.pow(t as u32) % c).collect();
                    score(&p)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((score(&path) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_m_step_single_state_is_sample_moments() {
        let s = random_inputs(40, 2, 3);
        let e = Matrix::zeros(40, 1);
        let post = forward_backward(&e, &Matrix::identity(1), &[1.0]).unwrap();
        let d = m_step_discrete(&post, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let means = s.col_means();
        let cov = s.covariance();
        for i in 0..2 {
            assert!((d.means[(0, i)] - means[i]).abs() < 1e-14);
            assert!((d.vars[(0, i)] - cov[(i, i)]).abs() < 1e-12);
        }
        assert_eq!(d.transition[(0, 0)], 1.0);
    }

    #[test]
    fn discrete_m_step_hand_computed() {
        let s = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let gamma = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        // xi consistent with gamma
        let xi = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.5];
        let post = Posteriors {
            gamma,
            xi,
            num_states: 2,
            loglik: 0.0,
        };
        let d = m_step_discrete(&post, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // state 0: weights (1, .5, 0) -> mean 4/3, var (1·(1/3)² + .5·(2/3)²)/1.5 = 2/9
        assert!((d.means[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!((d.vars[(0, 0)] - 2.0 / 9.0).abs() < 1e-14);
        // state 1: weights (0, .5, 1) -> mean 10/3, var (.5·(4/3)² + (2/3)²)/1.5 = 8/9
        assert!((d.means[(1, 0)] - 10.0 / 3.0).abs() < 1e-14);
        assert!((d.vars[(1, 0)] - 8.0 / 9.0).abs() < 1e-14);
        // xi counts: row 0 = (.5, 1), row 1 = (0, .5)
        assert_eq!(d.transition.to_rows(), vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![0.0, 1.0]]);
        assert_eq!(d.initial, vec![1.0, 0.0]);
    }

    #[test]
    fn initial_means_come_from_the_data() {
        // four well separated plateaus of 8 points each
        let levels = [-6.0, -2.0, 2.0, 6.0];
        let rows: Vec<Vec<f64>> = (0..32).map(|t| vec![levels[t / 8] + 0.01 * (t % 8) as f64]).collect();
        let s_hat = TimeSeries::from_rows(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let pts = initial_means(&s_hat, 3, MeanInit::Points, 8, &mut rng).unwrap();
        for r in 0..3 {
            assert!(rows.iter().any(|x| x[0] == pts[(r, 0)]));
        }

        let block_avgs: Vec<f64> = (0..4).map(|b| levels[b] + 0.035).collect();
        for how in [MeanInit::Segments, MeanInit::SpreadSegments] {
            let m = initial_means(&s_hat, 4, how, 8, &mut rng).unwrap();
            let mut got: Vec<f64> = (0..4).map(|r| m[(r, 0)]).collect();
            got.sort_by(f64::total_cmp);
            for (g, want) in got.iter().zip(&block_avgs) {
                assert!((g - want).abs() < 1e-12, "{how:?}: {got:?}");
            }
        }

        // more states than blocks falls back to single points
        let m = initial_means(&s_hat, 5, MeanInit::Segments, 8, &mut rng).unwrap();
        assert_eq!(m.rows(), 5);
    }

    #[test]
    fn spread_seeding_never_repeats_a_block_while_others_differ() {
        let rows: Vec<Vec<f64>> = (0..64).map(|t| vec![(t / 16) as f64, 0.0]).collect();
        let s_hat = TimeSeries::from_rows(&rows).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = initial_means(&s_hat, 4, MeanInit::SpreadSegments, 16, &mut rng).unwrap();
            let mut got: Vec<f64> = (0..4).map(|r| m[(r, 0)]).collect();
            got.sort_by(f64::total_cmp);
            assert_eq!(got, vec![0.0, 1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn empty_state_is_reinitialised() {
        let s = random_inputs(10, 2, 1);
        let gamma = Matrix::from_fn(10, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let xi: Vec<f64> = (0..9).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        let post = Posteriors {
            gamma,
            xi,
            num_states: 2,
            loglik: 0.0,
        };
        let d = m_step_discrete(&post, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(d.reinitialized, vec![1]);
        assert!((0..10).any(|t| s.row(t) == d.means.row(1)));
        for i in 0..2 {
            assert!((d.transition.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q_gradient_matches_finite_differences() {
        let model = small_model(3, 2, 2, 9);
        let inputs = random_inputs(8, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma = Matrix::from_rows(&(0..8).map(|_| random_stochastic(&mut rng, 2)).collect::<Vec<_>>()).unwrap();
        let (q, _) = q_grad(&model, &inputs, &gamma).unwrap();
        assert!((q - q_value(&model, &inputs, &gamma).unwrap()).abs() < 1e-10);
        let report = grad_check(&model.h_net, 1e-6, |net| {
            let mut m = model.clone();
            m.h_net = net.clone();
            q_grad(&m, &inputs, &gamma).unwrap()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn network_step_never_decreases_q() {
        let mut model = small_model(2, 2, 2, 3);
        let inputs = random_inputs(50, 4, 6);
        let gamma = Matrix::from_fn(50, 2, |t, c| if (t / 10 + c) % 2 == 0 { 0.9 } else { 0.1 });
        let mut eta = 1.0;
        let mut q = q_value(&model, &inputs, &gamma).unwrap();
        for _ in 0..5 {
            let r = m_step_network(&mut model, &inputs, &gamma, 3, eta).unwrap();
            assert!(r.q_after >= r.q_before);
            assert!((r.q_before - q).abs() < 1e-9);
            q = r.q_after;
            eta = r.step_size;
        }
        let zero = Matrix::zeros(50, 2);
        let before = model.h_net.clone();
        let r = m_step_network(&mut model, &inputs, &zero, 3, eta).unwrap();
        assert_eq!(r.accepted_steps, 0);
        assert_eq!(model.h_net, before);
    }

    #[test]
    fn em_loglik_is_monotone_and_best_restart_wins() {
        use crate::simgen::{generate_dataset, DatasetConfig, InnovationKind, NvarConfig};
        let d = generate_dataset(
            &DatasetConfig {
                nvar: NvarConfig::new(2, 1),
                len: 2048,
                innovations: InnovationKind::Hmm { num_states: 3 },
            },
            5,
        )
        .unwrap();
        let cfg = HmmConfig {
            num_states: 3,
            restarts: 3,
            max_iters: 15,
            threads: 2,
            tcl_init: TclInitConfig {
                segment_len: 32,
                sgd: SgdConfig {
                    epochs: 3,
                    ..TclInitConfig::default().sgd
                },
            },
            ..HmmConfig::default()
        };
        let out = train_hmm_em(&d.x, &cfg).unwrap();
        for r in 0..3 {
            let ll: Vec<f64> = out.log.iter().filter(|e| e.restart == r).map(|e| e.loglik).collect();
            assert!(ll.len() >= 2);
            assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-6), "{ll:?}");
        }
        let best = out
            .restarts
            .iter()
            .filter_map(|s| s.loglik)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.model.final_loglik, best);
        assert_eq!(out.restarts[out.best_restart].loglik, Some(best));
        assert!((out.model.loglik(&d.x).unwrap() - best).abs() < 1e-6 * best.abs());
        let again = train_hmm_em(&d.x, &HmmConfig { threads: 1, ..cfg }).unwrap();
        assert_eq!(again.model, out.model);
        let mut csv = Vec::new();
        out.write_log_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("restart,iter,loglik,Q,accepted_net_step\n"));
    }
}
