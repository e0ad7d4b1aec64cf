//! Comparison methods: NVAR with additive innovations (AD-NVAR) and linear
//! ICA from nonstationary variance (NSVICA).

use serde::{Deserialize, Serialize};

use crate::contrastive::NetArch;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::nnet::Mlp;
use crate::series::TimeSeries;
use crate::simgen::segment_labels;
use crate::train::{train_regressor, SgdConfig, TrainLog};

/// Jacobi sweeps stop once every rotation angle is below this.
pub const JACOBI_ANGLE_TOL: f64 = 1e-8;
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Whitening followed by an orthogonal rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsvicaModel {
    pub mean: Vec<f64>,
    pub whitening: Matrix,
    pub rotation: Matrix,
    pub num_segments: usize,
    /// Sum of squared off-diagonals of the rotated segment covariances,
    /// before the first sweep and after each sweep.
    pub objective: Vec<f64>,
}

impl NsvicaModel {
    /// `rotation · whitening`.
    pub fn unmixing(&self) -> Result<Matrix> {
        self.rotation.matmul(&self.whitening)
    }

    pub fn transform(&self, x: &TimeSeries) -> Result<TimeSeries> {
        if x.dim() != self.mean.len() {
            return Err(shape_err(self.mean.len(), x.dim()));
        }
        let w = self.unmixing()?;
        let mut centred = x.values().clone();
        for t in 0..centred.rows() {
            centred.row_mut(t).iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        Ok(TimeSeries::new(centred.matmul_t(&w)?))
    }
}

fn off_diagonal(covs: &[Matrix]) -> f64 {
    covs.iter()
        .map(|c| {
            let n = c.rows();
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| c[(i, j)] * c[(i, j)])
                .sum::<f64>()
        })
        .sum()
}

/// Linear ICA by whitening with the total covariance and orthogonal joint
/// diagonalisation (Jacobi rotations) of the segment covariances.
pub fn nsvica(series: &TimeSeries, num_segments: usize) -> Result<(NsvicaModel, TimeSeries)> {
    let (len, n) = (series.len(), series.dim());
    if num_segments < 2 {
        return Err(Error::InvalidConfig("NSVICA needs at least 2 segments".into()));
    }
    if n == 0 || len / num_segments < n.max(2) {
        return Err(Error::InvalidConfig(format!(
            "segment length {} is below the dimension {n}",
            len / num_segments
        )));
    }
    if !series.is_finite() {
        return Err(Error::NonFinite("NSVICA input".into()));
    }
    let values = series.values();
    let mean = values.col_means();
    let (evals, evecs) = symmetric_eigen(&values.covariance())?;
    let top = evals[0].abs().max(f64::MIN_POSITIVE);
    if evals.iter().any(|&e| e <= 1e-12 * top) {
        return Err(Error::Singular(format!(
            "covariance is rank deficient (eigenvalues {evals:?})"
        )));
    }
    let whitening = Matrix::from_fn(n, n, |i, j| evecs[(j, i)] / evals[i].sqrt());
    let mut z = values.clone();
    for t in 0..len {
        z.row_mut(t).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let z = z.matmul_t(&whitening)?;
    let labels = segment_labels(len, num_segments)?;
    let mut covs = Vec::with_capacity(num_segments);
    let mut start = 0;
    for k in 0..num_segments {
        let end = labels[start..].iter().position(|&l| l != k).map_or(len, |p| start + p);
        covs.push(z.slice_rows(start, end).covariance());
        start = end;
    }
    let mut v = Matrix::identity(n);
    let mut objective = vec![off_diagonal(&covs)];
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut max_angle: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let (mut g00, mut g01, mut g11) = (0.0, 0.0, 0.0);
                for c in &covs {
                    let a = c[(p, p)] - c[(q, q)];
                    let b = c[(p, q)] + c[(q, p)];
                    g00 += a * a;
                    g01 += a * b;
                    g11 += b * b;
                }
                let (ton, toff) = (g00 - g11, 2.0 * g01);
                let theta = 0.5 * toff.atan2(ton + (ton * ton + toff * toff).sqrt());
                if !theta.is_finite() {
                    continue;
                }
                max_angle = max_angle.max(theta.abs());
                if theta.abs() < JACOBI_ANGLE_TOL {
                    continue;
                }
                let (cs, sn) = (theta.cos(), theta.sin());
                let rotate_cols = |m: &mut Matrix| {
                    for r in 0..m.rows() {
                        let (a, b) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = cs * a + sn * b;
                        m[(r, q)] = -sn * a + cs * b;
                    }
                };
                for c in covs.iter_mut() {
                    rotate_cols(c);
                    // rows: C ← Gᵀ C with the same rotation
                    for col in 0..n {
                        let (a, b) = (c[(p, col)], c[(q, col)]);
                        c[(p, col)] = cs * a + sn * b;
                        c[(q, col)] = -sn * a + cs * b;
                    }
                }
                rotate_cols(&mut v);
            }
        }
        objective.push(off_diagonal(&covs));
        if max_angle < JACOBI_ANGLE_TOL {
            break;
        }
    }
    let model = NsvicaModel {
        mean,
        whitening,
        rotation: v.transpose(),
        num_segments,
        objective,
    };
    let sources = model.transform(series)?;
    Ok((model, sources))
}

/// AD-NVAR settings: predictor shape and training, plus the NSVICA segment
/// count used on the residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdnvarConfig {
    pub arch: NetArch,
    pub sgd: SgdConfig,
    pub init_seed: u64,
    pub num_segments: usize,
}

impl Default for AdnvarConfig {
    fn default() -> Self {
        Self {
            arch: NetArch::default(),
            sgd: SgdConfig::default(),
            init_seed: 0,
            num_segments: 256,
        }
    }
}

/// Predictor `x_t ≈ f̂(x_{t−1}, …, x_{t−p})` and the residual unmixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdnvarModel {
    pub predictor: Mlp,
    pub order: usize,
    pub unmixing: NsvicaModel,
    pub final_mse: f64,
}

impl AdnvarModel {
    /// Unmixed residuals for `t = p..N`.
    pub fn extract(&self, x: &TimeSeries) -> Result<TimeSeries> {
        self.unmixing
            .transform(&adnvar_residuals(&self.predictor, x, self.order)?)
    }
}

/// Mean squared prediction error of `net` on `x`.
pub fn prediction_mse(net: &Mlp, x: &TimeSeries, order: usize) -> Result<f64> {
    let r = adnvar_residuals(net, x, order)?;
    let v = r.values().as_slice();
    Ok(v.iter().map(|e| e * e).sum::<f64>() / v.len().max(1) as f64)
}

/// Fits the one-step predictor by MSE. Returns the network, its validation
/// MSE (training MSE without a validation split) and the log.
pub fn train_adnvar(x: &TimeSeries, cfg: &AdnvarConfig) -> Result<(Mlp, f64, TrainLog)> {
    cfg.arch.validate()?;
    let p = cfg.arch.order;
    if x.len() < (p + 2).max(3) {
        return Err(shape_err(format!("at least {} time points", (p + 2).max(3)), x.len()));
    }
    let n = x.dim();
    let inputs = x.lagged(p, false)?;
    let targets = x.values().slice_rows(p, x.len());
    let mut dims = vec![p * n];
    dims.extend(std::iter::repeat_n(cfg.arch.width_factor * n, cfg.arch.layers - 1));
    dims.push(n);
    let net = Mlp::new(&dims, cfg.arch.activation, cfg.init_seed)?;
    let (net, log) = train_regressor(net, &inputs, &targets, &cfg.sgd)?;
    let best = log.records.iter().find(|r| r.epoch == log.best_epoch);
    let mse = best.map_or(f64::NAN, |r| r.val_loss);
    Ok((net, mse, log))
}

/// `r_t = x_t − f̂(x_{t−1}, …, x_{t−p})` for `t = p..N`.
pub fn adnvar_residuals(net: &Mlp, x: &TimeSeries, order: usize) -> Result<TimeSeries> {
    if net.input_dim() != order * x.dim() || net.output_dim() != x.dim() {
        return Err(shape_err(
            format!("{} -> {}", order * x.dim(), x.dim()),
            format!("{} -> {}", net.input_dim(), net.output_dim()),
        ));
    }
    let pred = net.predict(&x.lagged(order, false)?)?;
    let mut r = x.values().slice_rows(order, x.len());
    for (v, p) in r.as_mut_slice().iter_mut().zip(pred.as_slice()) {
        *v -= p;
    }
    Ok(TimeSeries::new(r))
}

/// Full AD-NVAR baseline: predictor, residuals, NSVICA on the residuals.
pub fn fit_adnvar(x: &TimeSeries, cfg: &AdnvarConfig) -> Result<(AdnvarModel, TrainLog)> {
    let (predictor, final_mse, log) = train_adnvar(x, cfg)?;
    let residuals = adnvar_residuals(&predictor, x, cfg.arch.order)?;
    let (unmixing, _) = nsvica(&residuals, cfg.num_segments)?;
    Ok((
        AdnvarModel {
            predictor,
            order: cfg.arch.order,
            unmixing,
            final_mse,
        },
        log,
    ))
}
