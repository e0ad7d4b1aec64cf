//! Recovery metrics, the variability (rank) check and post-hoc forward-model fits.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{singular_values, Matrix};
use crate::nnet::{Activation, Mlp};
use crate::series::TimeSeries;
use crate::train::{r_squared, train_regressor, SgdConfig, TrainLog};

fn pearson_columns(a: &Matrix, b: &Matrix) -> Matrix {
    let (ma, mb) = (a.col_means(), b.col_means());
    let (na, nb) = (a.cols(), b.cols());
    let mut cross = Matrix::zeros(na, nb);
    let mut va = vec![0.0; na];
    let mut vb = vec![0.0; nb];
    let mut ca = vec![0.0; na];
    let mut cb = vec![0.0; nb];
    for t in 0..a.rows() {
        for (c, (x, m)) in ca.iter_mut().zip(a.row(t).iter().zip(&ma)) {
            *c = x - m;
        }
        for (c, (x, m)) in cb.iter_mut().zip(b.row(t).iter().zip(&mb)) {
            *c = x - m;
        }
        for i in 0..na {
            va[i] += ca[i] * ca[i];
            let row = cross.row_mut(i);
            for j in 0..nb {
                row[j] += ca[i] * cb[j];
            }
        }
        for j in 0..nb {
            vb[j] += cb[j] * cb[j];
        }
    }
    for i in 0..na {
        for j in 0..nb {
            let denom = (va[i] * vb[j]).sqrt();
            let r = if denom > 0.0 { cross[(i, j)] / denom } else { 0.0 };
            cross[(i, j)] = r.clamp(-1.0, 1.0);
        }
    }
    cross
}

fn check_pair(s_true: &TimeSeries, s_hat: &TimeSeries) -> Result<()> {
    if s_true.len() != s_hat.len() {
        return Err(shape_err(format!("{} time points", s_true.len()), s_hat.len()));
    }
    if s_true.len() < 3 {
        return Err(Error::InvalidConfig("correlation needs at least 3 time points".into()));
    }
    Ok(())
}

/// Drops leading points of the longer series so both end at the same time.
///
/// Estimates start after the lag window, so the true series is usually the
/// longer one.
pub fn align_tail(s_true: &TimeSeries, s_hat: &TimeSeries) -> (TimeSeries, TimeSeries) {
    let len = s_true.len().min(s_hat.len());
    (s_true.skip(s_true.len() - len), s_hat.skip(s_hat.len() - len))
}

/// Pearson correlations, rows indexed by true components and columns by
/// estimates. A constant series correlates 0 with everything.
pub fn correlation_matrix(s_true: &TimeSeries, s_hat: &TimeSeries) -> Result<Matrix> {
    check_pair(s_true, s_hat)?;
    Ok(pearson_columns(s_true.values(), s_hat.values()))
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn rank_columns(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..m.cols() {
        for (t, r) in ranks(&m.col(j)).into_iter().enumerate() {
            out[(t, j)] = r;
        }
    }
    out
}

/// Spearman rank correlations (Pearson on ranks).
pub fn spearman_matrix(s_true: &TimeSeries, s_hat: &TimeSeries) -> Result<Matrix> {
    check_pair(s_true, s_hat)?;
    Ok(pearson_columns(
        &rank_columns(s_true.values()),
        &rank_columns(s_hat.values()),
    ))
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(shape_err("square cost matrix", format!("{:?}", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let n = cost.rows();
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Permutation maximising `Σ_i |corr[i, perm[i]]|`.
pub fn match_components(corr: &Matrix) -> Result<Vec<usize>> {
    let mut cost = corr.clone();
    cost.as_mut_slice().iter_mut().for_each(|v| *v = -v.abs());
    hungarian(&cost)
}

/// Mean of the matched absolute correlations.
pub fn mcc(corr: &Matrix, perm: &[usize]) -> Result<f64> {
    if perm.len() != corr.rows() || perm.iter().any(|&p| p >= corr.cols()) {
        return Err(shape_err(corr.rows(), perm.len()));
    }
    let sum: f64 = perm.iter().enumerate().map(|(i, &j)| corr[(i, j)].abs()).sum();
    Ok(sum / perm.len() as f64)
}

/// Recovery summary for one estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corr: Matrix,
    pub perm: Vec<usize>,
    pub mcc: f64,
    pub mcc_spearman: f64,
}

/// Aligns, correlates, matches and scores an estimate against the truth.
pub fn evaluate(s_true: &TimeSeries, s_hat: &TimeSeries) -> Result<EvalReport> {
    if s_true.dim() != s_hat.dim() {
        return Err(shape_err(format!("{} components", s_true.dim()), s_hat.dim()));
    }
    let (t, h) = align_tail(s_true, s_hat);
    let corr = correlation_matrix(&t, &h)?;
    let perm = match_components(&corr)?;
    let score = mcc(&corr, &perm)?;
    let spear = spearman_matrix(&t, &h)?;
    let spear_perm = match_components(&spear)?;
    Ok(EvalReport {
        mcc: score,
        mcc_spearman: mcc(&spear, &spear_perm)?,
        corr,
        perm,
    })
}

/// Fraction of time points whose decoded state maps to the true state
/// under the best one-to-one relabelling.
pub fn state_accuracy(truth: &[usize], decoded: &[usize], num_states: usize) -> Result<f64> {
    if truth.len() != decoded.len() || truth.is_empty() {
        return Err(shape_err(truth.len(), decoded.len()));
    }
    if truth.iter().chain(decoded).any(|&c| c >= num_states) {
        return Err(Error::InvalidConfig("state label out of range".into()));
    }
    let mut counts = Matrix::zeros(num_states, num_states);
    for (&a, &b) in truth.iter().zip(decoded) {
        counts[(a, b)] += 1.0;
    }
    let perm = match_components(&counts)?;
    let hits: f64 = perm.iter().enumerate().map(|(i, &j)| counts[(i, j)]).sum();
    Ok(hits / truth.len() as f64)
}

/// Outcome of the rank test on modulation differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    /// `λ(u_l) − λ(u_0)` for `l = 1..P`, one column each.
    pub l_matrix: Matrix,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub smallest_singular_value: f64,
    pub pass: bool,
}

/// Relative singular-value threshold used for the numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Checks that the differences of the parameter columns span the full
/// `nk`-dimensional space. Column `l` of `lambda_samples` is `λ(u_l)`.
pub fn variability_check(lambda_samples: &Matrix) -> Result<VariabilityReport> {
    let (rows, p) = lambda_samples.shape();
    if p < 2 || rows == 0 {
        return Err(Error::InvalidConfig(format!(
            "variability check needs at least 2 points and 1 parameter (got {rows}x{p})"
        )));
    }
    if !lambda_samples.is_finite() {
        return Err(Error::NonFinite("modulation samples".into()));
    }
    let l_matrix = Matrix::from_fn(rows, p - 1, |i, j| lambda_samples[(i, j + 1)] - lambda_samples[(i, 0)]);
    let sv = singular_values(&l_matrix);
    let top = sv.first().copied().unwrap_or(0.0);
    let rank = if top > 0.0 {
        sv.iter().filter(|&&s| s > RANK_TOLERANCE * top).count()
    } else {
        0
    };
    let smallest = sv.last().copied().unwrap_or(0.0);
    Ok(VariabilityReport {
        pass: rank == rows,
        rank,
        smallest_singular_value: smallest,
        singular_values: sv,
        l_matrix,
    })
}

/// Settings of the post-hoc forward model `x_t ≈ F(x_{t−1}, ŝ_t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForwardFitConfig {
    /// Number of affine layers; 1 gives a linear fit.
    pub layers: usize,
    /// Hidden width as a multiple of `n`.
    pub width_factor: usize,
    pub sgd: SgdConfig,
}

impl Default for ForwardFitConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width_factor: 4,
            sgd: SgdConfig::default(),
        }
    }
}

/// Trained forward model and its held-out fit quality.
#[derive(Clone, Debug)]
pub struct ForwardFit {
    pub net: Mlp,
    /// Per-dimension R² on the held-out tail.
    pub r2: Vec<f64>,
    pub log: TrainLog,
}

/// Fits `x_t` from `[x_{t−1}; ŝ_t]` by MSE and reports R² on the tail.
///
/// `s_hat` is aligned to the end of `x` (its last row pairs with the last
/// observation) and must be shorter than `x`.
pub fn fit_forward_model(x: &TimeSeries, s_hat: &TimeSeries, cfg: &ForwardFitConfig) -> Result<ForwardFit> {
    let n = x.dim();
    if s_hat.len() >= x.len() || s_hat.len() < 3 {
        return Err(shape_err(
            format!("between 3 and {} estimated points", x.len() - 1),
            s_hat.len(),
        ));
    }
    if cfg.layers == 0 {
        return Err(Error::InvalidConfig("forward model needs at least one layer".into()));
    }
    let offset = x.len() - s_hat.len();
    let m = s_hat.len();
    let mut inputs = Matrix::zeros(m, n + s_hat.dim());
    let mut targets = Matrix::zeros(m, n);
    for r in 0..m {
        let t = offset + r;
        let row = inputs.row_mut(r);
        row[..n].copy_from_slice(x.at(t - 1));
        row[n..].copy_from_slice(s_hat.at(r));
        targets.row_mut(r).copy_from_slice(x.at(t));
    }
    let mut dims = vec![n + s_hat.dim()];
    dims.extend(std::iter::repeat_n(cfg.width_factor * n, cfg.layers - 1));
    dims.push(n);
    let net = Mlp::new(&dims, Activation::leaky_relu(0.2), cfg.sgd.seed)?;
    let (net, log) = train_regressor(net, &inputs, &targets, &cfg.sgd)?;
    let start = cfg.sgd.train_len(m);
    let tail_in = inputs.slice_rows(start, m);
    let tail_out = targets.slice_rows(start, m);
    let r2 = r_squared(&net.predict(&tail_in)?, &tail_out)?;
    Ok(ForwardFit { net, r2, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(len: usize, n: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new(Matrix::from_fn(len, n, |_, _| rng.sample(StandardNormal)))
    }

    fn brute_force(corr: &Matrix) -> f64 {
        fn rec(corr: &Matrix, i: usize, used: &mut Vec<bool>) -> f64 {
            if i == corr.rows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..corr.cols() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(corr[(i, j)].abs() + rec(corr, i + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(corr, 0, &mut vec![false; corr.cols()])
    }

    #[test]
    fn self_and_negated_correlation() {
        let s = noise(500, 3, 1);
        let c = correlation_matrix(&s, &s).unwrap();
        for i in 0..3 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-12);
        }
        let neg = TimeSeries::new(Matrix::from_fn(500, 3, |t, i| -s.at(t)[i]));
        let c = correlation_matrix(&s, &neg).unwrap();
        for i in 0..3 {
            assert!((c[(i, i)] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let c = correlation_matrix(&noise(100_000, 3, 2), &noise(100_000, 3, 3)).unwrap();
        assert!(c.max_abs() < 0.02);
    }

    #[test]
    fn constant_series_gives_zero() {
        let s = noise(20, 2, 4);
        let k = TimeSeries::new(Matrix::from_fn(20, 2, |_, j| j as f64));
        let c = correlation_matrix(&s, &k).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn matching_examples() {
        let c = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let p = match_components(&c).unwrap();
        assert_eq!(p, vec![0, 1]);
        assert!((mcc(&c, &p).unwrap() - 0.85).abs() < 1e-15);
        let anti = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(match_components(&anti).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn matching_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let c = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let p = match_components(&c).unwrap();
            let got: f64 = p.iter().enumerate().map(|(i, &j)| c[(i, j)].abs()).sum();
            assert!((got - brute_force(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn mcc_invariances() {
        let s = noise(1000, 3, 5);
        let h = noise(1000, 3, 6);
        let mixed = TimeSeries::new(Matrix::from_fn(1000, 3, |t, i| s.at(t)[i] + 0.7 * h.at(t)[i]));
        let base = evaluate(&s, &mixed).unwrap().mcc;
        let src = [2, 0, 1];
        let flipped = TimeSeries::new(Matrix::from_fn(1000, 3, |t, i| {
            let v = mixed.at(t)[src[i]];
            if i == 1 {
                -v
            } else {
                v
            }
        }));
        assert_eq!(evaluate(&s, &flipped).unwrap().mcc, base);
        let affine = TimeSeries::new(Matrix::from_fn(1000, 3, |t, i| {
            let (a, b) = [(-3.0, 1.0), (0.5, -2.0), (7.0, 0.0)][i];
            a * mixed.at(t)[src[i]] + b
        }));
        assert!((evaluate(&s, &affine).unwrap().mcc - base).abs() < 1e-14);
    }

    #[test]
    fn spearman_ignores_monotone_warps() {
        let s = noise(300, 2, 7);
        let w = TimeSeries::new(Matrix::from_fn(300, 2, |t, i| s.at(t)[i].powi(3)));
        let r = evaluate(&s, &w).unwrap();
        assert!((r.mcc_spearman - 1.0).abs() < 1e-12);
        assert!(r.mcc < 1.0);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn state_accuracy_is_label_free() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let decoded = vec![2, 2, 0, 0, 1, 0];
        assert!((state_accuracy(&truth, &decoded, 3).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn variability_rank() {
        let constant = Matrix::from_fn(4, 5, |i, _| i as f64);
        let r = variability_check(&constant).unwrap();
        assert_eq!(r.rank, 0);
        assert!(!r.pass);
        let dup = Matrix::from_fn(3, 4, |i, j| if j == 0 { 0.0 } else { (i + 1) as f64 });
        let r = variability_check(&dup).unwrap();
        assert_eq!(r.rank, 1);
        assert!(!r.pass);
        let full = Matrix::from_fn(2, 3, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        assert!(variability_check(&full).unwrap().pass);
    }

    #[test]
    fn forward_fit_zero_epochs_is_mean_predictor() {
        let x = noise(400, 2, 8);
        let s = x.skip(1);
        let cfg = ForwardFitConfig {
            layers: 1,
            sgd: SgdConfig {
                epochs: 0,
                ..SgdConfig::default()
            },
            ..ForwardFitConfig::default()
        };
        let fit = fit_forward_model(&x, &s, &cfg).unwrap();
        let m = s.len();
        let start = cfg.sgd.train_len(m);
        let targets = x.values().slice_rows(1, x.len());
        let means = targets.slice_rows(0, start).col_means();
        let tail = targets.slice_rows(start, m);
        let pred = Matrix::from_fn(tail.rows(), 2, |_, j| means[j]);
        let expect = r_squared(&pred, &tail).unwrap();
        for (a, b) in fit.r2.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
