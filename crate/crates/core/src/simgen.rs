//! Ground-truth generators: modulated and hidden-Markov innovations, random
//! invertible NVAR mixing networks, and observation rollout
//! `x_t = f(x_{t−1}, …, x_{t−p}, s_t)`.
//!
//! Innovations are Gaussian with the conditional log-density
//! `−λ₁·s² − λ₁·λ₂·s`, i.e. mean `−λ₂/2` and variance `1/(2λ₁)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{condition_number, dot, spectral_norm, Lu, Matrix};
use crate::nnet::{Activation, Mlp};
use crate::series::TimeSeries;

pub const GENERATOR_VERSION: &str = "iia-simgen/1";

/// Distribution of the random Fourier weights, recorded in ground truth files.
pub const FOURIER_WEIGHT_DISTRIBUTION: &str = "uniform(-1,1)";

/// Random sine/cosine weights for one modulation trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierWeights {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl FourierWeights {
    pub fn random<R: Rng + ?Sized>(num_freq: usize, rng: &mut R) -> Self {
        let cos = (0..num_freq).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sin = (0..num_freq).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { cos, sin }
    }

    pub fn num_freq(&self) -> usize {
        self.cos.len()
    }

    /// Evaluates the combination over frequencies `1..=F` spanning one
    /// period `[0, 2π)` across `len` points, rescaled to `[−2, 2]`
    /// (exponentiated when `exponentiate`).
    ///
    /// A constant combination maps to all zeros (all ones when exponentiated).
    pub fn render(&self, len: usize, exponentiate: bool) -> Vec<f64> {
        let mut raw = vec![0.0; len];
        for (t, r) in raw.iter_mut().enumerate() {
            let base = 2.0 * PI * t as f64 / len as f64;
            for f in 0..self.num_freq() {
                let ang = base * (f + 1) as f64;
                *r += self.cos[f] * ang.cos() + self.sin[f] * ang.sin();
            }
        }
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        let scaled: Vec<f64> = if range > 0.0 && range.is_finite() {
            raw.iter().map(|v| (v - lo) / range * 4.0 - 2.0).collect()
        } else {
            vec![0.0; len]
        };
        if exponentiate {
            scaled.into_iter().map(f64::exp).collect()
        } else {
            scaled
        }
    }
}

/// Smooth random trajectory rescaled to `[−2, 2]` (or its exponential).
pub fn fourier_modulation(num_freq: usize, len: usize, seed: u64, exponentiate: bool) -> Result<Vec<f64>> {
    if num_freq == 0 || len < 2 {
        return Err(Error::InvalidConfig(format!(
            "fourier modulation needs num_freq >= 1 and N >= 2 (got {num_freq}, {len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FourierWeights::random(num_freq, &mut rng).render(len, exponentiate))
}

/// Per-component, per-time modulation parameters (`k = 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    /// `n × N`, strictly positive; controls the spread.
    pub lambda1: Matrix,
    /// `n × N`, in `[−2, 2]`; controls the location.
    pub lambda2: Matrix,
}

/// Compact generator record that re-renders a [`Modulation`] exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub len: usize,
    pub num_freq: usize,
    pub weight_distribution: String,
    pub lambda1: Vec<FourierWeights>,
    pub lambda2: Vec<FourierWeights>,
}

impl ModulationSpec {
    pub fn random(n: usize, len: usize, num_freq: usize, seed: u64) -> Result<Self> {
        if n == 0 || num_freq == 0 || len < 2 {
            return Err(Error::InvalidConfig(format!(
                "modulation needs n >= 1, num_freq >= 1, N >= 2 (got {n}, {num_freq}, {len})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda1 = (0..n).map(|_| FourierWeights::random(num_freq, &mut rng)).collect();
        let lambda2 = (0..n).map(|_| FourierWeights::random(num_freq, &mut rng)).collect();
        Ok(Self {
            len,
            num_freq,
            weight_distribution: FOURIER_WEIGHT_DISTRIBUTION.to_string(),
            lambda1,
            lambda2,
        })
    }

    pub fn render(&self) -> Modulation {
        let rows = |ws: &[FourierWeights], exp: bool| {
            let rendered: Vec<Vec<f64>> = ws.iter().map(|w| w.render(self.len, exp)).collect();
            Matrix::from_rows(&rendered).expect("equal-length renders")
        };
        Modulation {
            lambda1: rows(&self.lambda1, true),
            lambda2: rows(&self.lambda2, false),
        }
    }
}

impl Modulation {
    pub fn new(lambda1: Matrix, lambda2: Matrix) -> Result<Self> {
        if lambda1.shape() != lambda2.shape() {
            return Err(shape_err(
                format!("{:?}", lambda1.shape()),
                format!("{:?}", lambda2.shape()),
            ));
        }
        if lambda1.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("lambda1 must be strictly positive".into()));
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// Constant modulation over `len` points.
    pub fn constant(n: usize, len: usize, lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::new(
            Matrix::from_fn(n, len, |_, _| lambda1),
            Matrix::from_fn(n, len, |_, _| lambda2),
        )
    }

    pub fn dim(&self) -> usize {
        self.lambda1.rows()
    }

    pub fn len(&self) -> usize {
        self.lambda1.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self, i: usize, t: usize) -> f64 {
        -self.lambda2[(i, t)] / 2.0
    }

    pub fn variance(&self, i: usize, t: usize) -> f64 {
        1.0 / (2.0 * self.lambda1[(i, t)])
    }

    /// Natural parameters `(−λ₁, −λ₁λ₂)` per component at time `t`,
    /// paired with the sufficient statistics `(s², s)`; length `2n`.
    pub fn natural_params(&self, t: usize) -> Vec<f64> {
        (0..self.dim())
            .flat_map(|i| {
                let l1 = self.lambda1[(i, t)];
                let l2 = self.lambda2[(i, t)];
                [-l1, -l1 * l2]
            })
            .collect()
    }

    /// `ln Z_i(t) = ½·ln(π/λ₁) + λ₁λ₂²/4`.
    pub fn log_normalizer(&self, i: usize, t: usize) -> f64 {
        let l1 = self.lambda1[(i, t)];
        let l2 = self.lambda2[(i, t)];
        0.5 * (PI / l1).ln() + l1 * l2 * l2 / 4.0
    }
}

/// `s_i(t) ~ N(−λ₂/2, 1/(2λ₁))`, independent over components and time.
pub fn sample_nonstationary_innovations(modulation: &Modulation, seed: u64) -> Result<TimeSeries> {
    if modulation.lambda1.as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidConfig("lambda1 must be strictly positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, len) = (modulation.dim(), modulation.len());
    let mut s = Matrix::zeros(len, n);
    for t in 0..len {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            s[(t, i)] = modulation.mean(i, t) + modulation.variance(i, t).sqrt() * z;
        }
    }
    Ok(TimeSeries::new(s))
}

fn check_stochastic(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(shape_err("square transition matrix", format!("{:?}", a.shape())));
    }
    for i in 0..a.rows() {
        let row = a.row(i);
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("transition row {i} has negative entries")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("transition row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Markov chain path: `u₀ ~ π`, `u_{t+1} ~ A[u_t, ·]`.
pub fn sample_hmm_states(a: &Matrix, pi: &[f64], len: usize, seed: u64) -> Result<Vec<usize>> {
    check_stochastic(a)?;
    if pi.len() != a.rows() {
        return Err(shape_err(a.rows(), pi.len()));
    }
    if ((pi.iter().sum::<f64>()) - 1.0).abs() > 1e-12 || pi.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidConfig(
            "initial distribution is not a simplex vector".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = Vec::with_capacity(len);
    if len == 0 {
        return Ok(path);
    }
    let mut u = draw_categorical(pi, &mut rng);
    path.push(u);
    for _ in 1..len {
        u = draw_categorical(a.row(u), &mut rng);
        path.push(u);
    }
    Ok(path)
}

/// Cyclic transition matrix: stay with probability `stay`, else move to the next state.
pub fn cyclic_transition(num_states: usize, stay: f64) -> Matrix {
    let mut a = Matrix::zeros(num_states, num_states);
    for i in 0..num_states {
        if num_states == 1 {
            a[(i, i)] = 1.0;
        } else {
            a[(i, i)] = stay;
            a[(i, (i + 1) % num_states)] = 1.0 - stay;
        }
    }
    a
}

/// Ground truth of a hidden-Markov innovation process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmTruth {
    pub transition: Matrix,
    pub initial: Vec<f64>,
    /// `C × n`.
    pub means: Matrix,
    /// `C × n`, strictly positive.
    pub variances: Matrix,
    pub states: Vec<usize>,
}

impl HmmTruth {
    pub fn num_states(&self) -> usize {
        self.transition.rows()
    }

    /// Cyclic chain with 0.99 self-transition, uniform initial distribution,
    /// means uniform on `[−4, 4]` and variances log-uniform on `[0.25, 4]`.
    /// Draws whose state means are closer than 0.5 in ℓ∞ are rejected.
    pub fn random_cyclic(num_states: usize, n: usize, len: usize, seed: u64) -> Result<Self> {
        if num_states == 0 || n == 0 {
            return Err(Error::InvalidConfig("need at least one state and one component".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = loop {
            let m = Matrix::from_fn(num_states, n, |_, _| rng.gen_range(-4.0..=4.0));
            let distinct = (0..num_states).all(|a| {
                (a + 1..num_states).all(|b| {
                    m.row(a)
                        .iter()
                        .zip(m.row(b))
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max)
                        >= 0.5
                })
            });
            if distinct {
                break m;
            }
        };
        let (lo, hi) = (0.25f64.ln(), 4.0f64.ln());
        let variances = Matrix::from_fn(num_states, n, |_, _| rng.gen_range(lo..=hi).exp());
        let transition = cyclic_transition(num_states, 0.99);
        let initial = vec![1.0 / num_states as f64; num_states];
        let states = sample_hmm_states(&transition, &initial, len, rng.gen())?;
        Ok(Self {
            transition,
            initial,
            means,
            variances,
            states,
        })
    }

    fn validate(&self) -> Result<()> {
        check_stochastic(&self.transition)?;
        let c = self.num_states();
        if self.means.rows() != c || self.variances.shape() != self.means.shape() {
            return Err(shape_err(
                format!("{c} x n means and variances"),
                format!("{:?} / {:?}", self.means.shape(), self.variances.shape()),
            ));
        }
        if self.variances.as_slice().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig("state variances must be positive".into()));
        }
        if let Some(&bad) = self.states.iter().find(|&&u| u >= c) {
            return Err(Error::InvalidConfig(format!("state {bad} out of range")));
        }
        Ok(())
    }
}

/// `s_t ~ N(means[u_t], diag variances[u_t])`.
pub fn sample_hmm_innovations(truth: &HmmTruth, seed: u64) -> Result<TimeSeries> {
    truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = truth.means.cols();
    let mut s = Matrix::zeros(truth.states.len(), n);
    for (t, &u) in truth.states.iter().enumerate() {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            s[(t, i)] = truth.means[(u, i)] + truth.variances[(u, i)].sqrt() * z;
        }
    }
    Ok(TimeSeries::new(s))
}

/// Architecture knobs of the random mixing network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvarConfig {
    pub n: usize,
    pub layers: usize,
    /// Autoregressive order `p`.
    #[serde(default = "default_order")]
    pub order: usize,
    /// Sum of the spectral norms of the (orthogonal, scaled) lag blocks of
    /// the first layer; below 1 the rollout is contractive. Zero gives an
    /// instantaneous mixture.
    #[serde(default = "default_ar_gain")]
    pub ar_gain: f64,
    #[serde(default = "default_leak")]
    pub leak: f64,
}

fn default_order() -> usize {
    1
}
fn default_ar_gain() -> f64 {
    0.7
}
fn default_leak() -> f64 {
    0.2
}

impl NvarConfig {
    pub fn new(n: usize, layers: usize) -> Self {
        Self {
            n,
            layers,
            order: default_order(),
            ar_gain: default_ar_gain(),
            leak: default_leak(),
        }
    }
}

/// NVAR mixing model: an MLP from `[x_{t−1}; …; x_{t−p}; s_t]` to `x_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NvarModel {
    pub config: NvarConfig,
    pub mlp: Mlp,
    /// Seed of the accepted draw.
    pub seed: u64,
}

/// Largest condition number accepted for any square weight block.
const MAX_BLOCK_CONDITION: f64 = 10.0;
const INVERTIBILITY_PROBES: usize = 100;
/// Floor on the geometric-mean gain `|det ∂f/∂s_t|^{1/(L·n)}`; each leaky
/// layer can shrink the determinant by `leak^n`, so the bound is per layer
/// and per dimension.
const MIN_UNIT_GAIN: f64 = 1e-3;
const MAX_DRAWS: usize = 50;
const MAX_BLOCK_REDRAWS: usize = 10_000;

impl NvarModel {
    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    /// Columns of the network input holding `s_t`.
    pub fn innovation_cols(&self) -> Vec<usize> {
        let start = self.order() * self.n();
        (start..start + self.n()).collect()
    }

    /// `min |det ∂f/∂s_t|` over seeded random probe points.
    pub fn min_innovation_det(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = self.innovation_cols();
        let width = self.mlp.input_dim();
        let mut min_det = f64::INFINITY;
        for _ in 0..probes {
            let point: Vec<f64> = (0..width).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let j = self.mlp.input_jacobian(&point, &cols)?;
            min_det = min_det.min(Lu::new(&j)?.det().abs());
        }
        Ok(min_det)
    }

    /// Exact inverse `h(x_t, x_{t−1}, …, x_{t−p}) = s_t` of a single-layer
    /// (affine) model, as a linear network over `[x_t, x_{t−1}, …, x_{t−p}]`.
    pub fn analytic_inverse(&self) -> Result<Mlp> {
        if self.mlp.num_layers() != 1 {
            return Err(Error::InvalidConfig(
                "analytic inverse exists only for single-layer models".into(),
            ));
        }
        let (n, p) = (self.n(), self.order());
        let w = &self.mlp.weights()[0];
        let b_inv = Lu::new(&w.select_cols(&self.innovation_cols()))?.inverse()?;
        let mut inv = Matrix::zeros(n, (p + 1) * n);
        for r in 0..n {
            for c in 0..n {
                inv[(r, c)] = b_inv[(r, c)];
            }
        }
        for lag in 0..p {
            let a = w.select_cols(&(lag * n..(lag + 1) * n).collect::<Vec<_>>());
            let prod = b_inv.matmul(&a)?;
            for r in 0..n {
                for c in 0..n {
                    inv[(r, (lag + 1) * n + c)] = -prod[(r, c)];
                }
            }
        }
        let bias: Vec<f64> = b_inv.matvec(&self.mlp.biases()[0])?.into_iter().map(|v| -v).collect();
        Mlp::from_parts(vec![(p + 1) * n, n], Activation::Linear, vec![inv], vec![bias])
    }

    /// One step `x_t = f(x_{t−1}, …, x_{t−p}, s_t)`; `lags[0]` is `x_{t−1}`.
    pub fn step(&self, lags: &[&[f64]], s: &[f64]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        for l in lags {
            input.extend_from_slice(l);
        }
        input.extend_from_slice(s);
        let x = Matrix::from_vec(1, input.len(), input)?;
        Ok(self.mlp.predict(&x)?.into_vec())
    }
}

fn random_square<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Gram–Schmidt orthonormalisation of a uniform random square matrix.
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in &rows {
            let d = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("square rows")
}

/// Uniform `n × n` block redrawn until its condition number is at most
/// [`MAX_BLOCK_CONDITION`]; `None` after [`MAX_BLOCK_REDRAWS`] attempts.
fn well_conditioned_square<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<Matrix> {
    (0..MAX_BLOCK_REDRAWS)
        .map(|_| random_square(n, rng))
        .find(|m| condition_number(m) <= MAX_BLOCK_CONDITION)
}

fn normalized(mut m: Matrix, target: f64) -> Matrix {
    let norm = spectral_norm(&m);
    if norm > 0.0 {
        m.scale(target / norm);
    }
    m
}

fn draw_nvar(config: &NvarConfig, seed: u64) -> Result<Option<NvarModel>> {
    let (n, p) = (config.n, config.order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(s_block) = well_conditioned_square(n, &mut rng) else {
        return Ok(None);
    };
    let s_block = normalized(s_block, 1.0);
    // offsets the average variance loss of a leaky ReLU on symmetric inputs
    let hidden_gain = (2.0 / (1.0 + config.leak * config.leak)).sqrt();
    let lag_scale = config.ar_gain / p as f64 / hidden_gain.powi(config.layers as i32 - 1);
    let mut first = Matrix::zeros(n, 0);
    for _ in 0..p {
        let mut q = random_orthogonal(n, &mut rng);
        q.scale(lag_scale);
        first = first.hcat(&q)?;
    }
    let first = first.hcat(&s_block)?;
    let mut weights = vec![first];
    for _ in 1..config.layers {
        let mut w = random_orthogonal(n, &mut rng);
        w.scale(hidden_gain);
        weights.push(w);
    }
    let biases = vec![vec![0.0; n]; config.layers];
    let mut dims = vec![(p + 1) * n];
    dims.extend(std::iter::repeat_n(n, config.layers));
    let mlp = Mlp::from_parts(dims, Activation::leaky_relu(config.leak), weights, biases)?;
    let model = NvarModel {
        config: config.clone(),
        mlp,
        seed,
    };
    let floor = (config.layers * config.n) as f64 * MIN_UNIT_GAIN.ln();
    if model.min_innovation_det(INVERTIBILITY_PROBES, seed ^ 0x9e37_79b9)?.ln() > floor {
        Ok(Some(model))
    } else {
        Ok(None)
    }
}

/// Random NVAR mixing network whose augmented map is invertible.
///
/// Every square block (the `s_t` block of the first layer and each later
/// `n × n` layer) is drawn uniformly, redrawn while its condition number
/// exceeds 10, and rescaled to unit spectral norm. Later layers are random
/// orthogonal matrices times `g = √(2/(1 + leak²))`, which keeps the signal
/// scale roughly constant through the leaky units. Each lag block is a random
/// orthogonal matrix times `ar_gain/(p·g^{L−1})`, so `f` is an `ar_gain`
/// contraction in the lags. A draw is accepted when `|det ∂f/∂s_t|^{1/(L·n)}`
/// exceeds 1e-3 at 100 probe points. Up to 50 derived seeds are tried.
pub fn build_nvar_mlp(config: &NvarConfig, seed: u64) -> Result<NvarModel> {
    if config.n == 0 || config.layers == 0 || config.order == 0 || config.order > 3 {
        return Err(Error::InvalidConfig(format!(
            "NVAR needs n >= 1, L >= 1 and order in 1..=3 (got n={}, L={}, p={})",
            config.n, config.layers, config.order
        )));
    }
    if !(config.ar_gain >= 0.0 && config.ar_gain.is_finite()) {
        return Err(Error::InvalidConfig(
            "ar_gain must be a finite non-negative number".into(),
        ));
    }
    for k in 0..MAX_DRAWS as u64 {
        let draw_seed = seed.wrapping_add(k.wrapping_mul(0x2545_f491_4f6c_dd1d));
        if let Some(model) = draw_nvar(config, draw_seed)? {
            return Ok(model);
        }
    }
    Err(Error::NotInvertible {
        tries: MAX_DRAWS,
        first_seed: seed,
        last_seed: seed.wrapping_add((MAX_DRAWS as u64 - 1).wrapping_mul(0x2545_f491_4f6c_dd1d)),
    })
}

/// Rolls out the NVAR model over the innovations.
///
/// `initial` holds the `p` pre-sample states, most recent first
/// (`initial[0] = x_{−1}`). Output has the same length as `s`.
pub fn generate_series(model: &NvarModel, s: &TimeSeries, initial: &[Vec<f64>]) -> Result<TimeSeries> {
    let (n, p) = (model.n(), model.order());
    if s.dim() != n {
        return Err(shape_err(format!("{n} innovation components"), s.dim()));
    }
    if initial.len() != p || initial.iter().any(|x| x.len() != n) {
        return Err(shape_err(format!("{p} initial states of length {n}"), initial.len()));
    }
    let mut x = Matrix::zeros(s.len(), n);
    for t in 0..s.len() {
        let lags: Vec<&[f64]> = (1..=p)
            .map(|lag| {
                if t >= lag {
                    x.row(t - lag)
                } else {
                    initial[lag - t - 1].as_slice()
                }
            })
            .collect();
        let xt = model.step(&lags, s.at(t))?;
        if xt.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnstableRollout { t });
        }
        x.row_mut(t).copy_from_slice(&xt);
    }
    Ok(TimeSeries::new(x))
}

/// Contiguous equal blocks; the last block absorbs the remainder.
pub fn segment_labels(len: usize, num_segments: usize) -> Result<Vec<usize>> {
    if num_segments == 0 || num_segments > len {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= segments <= N (got {num_segments} for N = {len})"
        )));
    }
    let block = len / num_segments;
    Ok((0..len).map(|t| (t / block).min(num_segments - 1)).collect())
}

/// Kind of innovation process in a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnovationTruth {
    /// Time-indexed Fourier modulation (`u_t = t`).
    Nonstationary(ModulationSpec),
    /// Hidden Markov chain (`u_t` = latent state).
    Hmm(HmmTruth),
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub generator_version: String,
    pub seed: u64,
    pub model: NvarModel,
    pub innovations: InnovationTruth,
    pub innovation_seed: u64,
    pub initial: Vec<Vec<f64>>,
}

/// A generated dataset: observations, innovations, auxiliary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: TimeSeries,
    pub s: TimeSeries,
    pub u: Vec<usize>,
    pub truth: GroundTruth,
}

/// Which innovation process to simulate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnovationKind {
    Nonstationary { num_freq: usize },
    Hmm { num_states: usize },
}

/// Full generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub nvar: NvarConfig,
    pub len: usize,
    pub innovations: InnovationKind,
}

fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

/// Generates a dataset deterministically from `seed`. The initial state is zero.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    let model = build_nvar_mlp(&config.nvar, split_seed(seed, 1))?;
    let n = config.nvar.n;
    let innovation_seed = split_seed(seed, 2);
    let (innovations, s, u) = match config.innovations {
        InnovationKind::Nonstationary { num_freq } => {
            let spec = ModulationSpec::random(n, config.len, num_freq, split_seed(seed, 3))?;
            let s = sample_nonstationary_innovations(&spec.render(), innovation_seed)?;
            (InnovationTruth::Nonstationary(spec), s, (0..config.len).collect())
        }
        InnovationKind::Hmm { num_states } => {
            let truth = HmmTruth::random_cyclic(num_states, n, config.len, split_seed(seed, 3))?;
            let s = sample_hmm_innovations(&truth, innovation_seed)?;
            let u = truth.states.clone();
            (InnovationTruth::Hmm(truth), s, u)
        }
    };
    let initial = vec![vec![0.0; n]; config.nvar.order];
    let x = generate_series(&model, &s, &initial)?;
    Ok(Dataset {
        x,
        s,
        u,
        truth: GroundTruth {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            model,
            innovations,
            innovation_seed,
            initial,
        },
    })
}

impl GroundTruth {
    /// Replays the stored generator state.
    pub fn regenerate(&self) -> Result<(TimeSeries, TimeSeries)> {
        let s = match &self.innovations {
            InnovationTruth::Nonstationary(spec) => {
                sample_nonstationary_innovations(&spec.render(), self.innovation_seed)?
            }
            InnovationTruth::Hmm(truth) => sample_hmm_innovations(truth, self.innovation_seed)?,
        };
        let x = generate_series(&self.model, &s, &self.initial)?;
        Ok((x, s))
    }
}
