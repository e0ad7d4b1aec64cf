//! Minibatch SGD-with-momentum driver, input/output standardisation and
//! plain mean-squared-error regression.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{Mlp, Momentum, ParamSet};

/// Optimiser settings shared by every trainable estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate after the last epoch relative to `lr`; the rate decays
    /// geometrically in between.
    pub final_lr_fraction: f64,
    /// Fraction of samples held out at the end of the series.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 256,
            epochs: 50,
            final_lr_fraction: 0.1,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidConfig("final_lr_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Number of leading samples used for training.
    pub fn train_len(&self, total: usize) -> usize {
        let val = (total as f64 * self.val_fraction).floor() as usize;
        total - val
    }
}

/// One row of a training log. Epoch 0 holds the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.train_loss)
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "accuracy"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A differentiable loss over indexed samples.
pub trait Objective<M> {
    /// Mean loss over `idx`; the gradient of that mean is written to `grads`.
    fn loss_grad(&self, model: &M, idx: &[usize], grads: &mut M) -> Result<f64>;

    /// Summed loss and summed correct count (when meaningful) over `idx`.
    fn evaluate(&self, model: &M, idx: &[usize]) -> Result<(f64, Option<f64>)>;
}

const EVAL_CHUNK: usize = 4096;

/// Mean loss and accuracy (when the objective reports one) over `idx`.
pub fn evaluate_objective<M, O: Objective<M>>(obj: &O, model: &M, idx: &[usize]) -> Result<(f64, Option<f64>)> {
    if idx.is_empty() {
        return Ok((f64::NAN, None));
    }
    let mut loss = 0.0;
    let mut correct: Option<f64> = None;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (l, c) = obj.evaluate(model, chunk)?;
        loss += l;
        if let Some(c) = c {
            *correct.get_or_insert(0.0) += c;
        }
    }
    let count = idx.len() as f64;
    Ok((loss / count, correct.map(|c| c / count)))
}

/// Leading samples for training and the trailing `val_fraction` for validation.
pub fn tail_split(total: usize, cfg: &SgdConfig) -> (Vec<usize>, Vec<usize>) {
    let n_train = cfg.train_len(total);
    ((0..n_train).collect(), (n_train..total).collect())
}

/// A seeded random `val_fraction` of `0..total` for validation, the rest
/// for training; both sorted.
pub fn random_split(total: usize, cfg: &SgdConfig) -> (Vec<usize>, Vec<usize>) {
    let n_train = cfg.train_len(total);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5017));
    let mut val = idx.split_off(n_train);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Minibatch SGD with momentum over samples `0..total`, holding out the
/// trailing `val_fraction`. See [`run_sgd_split`].
pub fn run_sgd<M: ParamSet, O: Objective<M>>(
    model: M,
    obj: &O,
    total: usize,
    cfg: &SgdConfig,
) -> Result<(M, TrainLog)> {
    let (train, val) = tail_split(total, cfg);
    run_sgd_split(model, obj, train, &val, cfg)
}

/// Minibatch SGD with momentum over the `train` samples.
///
/// The returned model is the snapshot with the lowest loss on `val`
/// (training loss when `val` is empty).
pub fn run_sgd_split<M: ParamSet, O: Objective<M>>(
    mut model: M,
    obj: &O,
    mut order: Vec<usize>,
    val: &[usize],
    cfg: &SgdConfig,
) -> Result<(M, TrainLog)> {
    cfg.validate()?;
    if order.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let has_val = !val.is_empty();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Momentum::new(&model, cfg.lr, cfg.momentum)?;
    let decay = if cfg.epochs > 1 {
        cfg.final_lr_fraction.powf(1.0 / (cfg.epochs - 1) as f64)
    } else {
        1.0
    };

    let (train0, acc0) = evaluate_objective(obj, &model, &order)?;
    let (val0, vacc0) = if has_val {
        evaluate_objective(obj, &model, val)?
    } else {
        (train0, acc0)
    };
    if !train0.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            reason: "non-finite initial loss".into(),
        });
    }
    let mut log = TrainLog {
        records: vec![EpochRecord {
            epoch: 0,
            train_loss: train0,
            val_loss: val0,
            accuracy: vacc0,
        }],
        best_epoch: 0,
    };
    let mut best = model.clone();
    let mut best_loss = val0;

    let mut grads = model.zeros_like();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            grads.fill_zero();
            let loss = obj.loss_grad(&model, chunk, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss after {batches} batches"),
                });
            }
            opt.step(&mut model, &grads).map_err(|e| Error::Divergence {
                epoch,
                reason: e.to_string(),
            })?;
            sum += loss;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let (val_loss, accuracy) = if has_val {
            evaluate_objective(obj, &model, val)?
        } else {
            (train_loss, None)
        };
        if !val_loss.is_finite() || !model.all_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite validation loss or parameters".into(),
            });
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            accuracy,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            log.best_epoch = epoch;
        }
        opt.lr *= decay;
    }
    Ok((best, log))
}

/// Per-column affine standardisation `(v − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; constant columns get scale 1.
    pub fn fit(data: &Matrix) -> Self {
        let mean = data.col_means();
        let mut var = vec![0.0; data.cols()];
        for i in 0..data.rows() {
            for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let rows = data.rows().max(1) as f64;
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / rows).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// The same statistics tiled `k` times (for lag-embedded inputs).
    pub fn tile(&self, k: usize) -> Self {
        Self {
            mean: self.mean.repeat(k),
            scale: self.scale.repeat(k),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.dim() {
            return Err(shape_err(self.dim(), data.cols()));
        }
        let mut out = data.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Rewrites the first layer so that `net'(x) = net(standardised x)`.
    pub fn fold_into_input(&self, net: &mut Mlp) -> Result<()> {
        if net.input_dim() != self.dim() {
            return Err(shape_err(self.dim(), net.input_dim()));
        }
        let w = &mut net.weights_mut()[0];
        let mut shift = vec![0.0; w.rows()];
        for (r, sh) in shift.iter_mut().enumerate() {
            for (c, (m, s)) in self.mean.iter().zip(&self.scale).enumerate() {
                let v = w[(r, c)] / s;
                w[(r, c)] = v;
                *sh += v * m;
            }
        }
        for (bias, sh) in net.biases_mut()[0].iter_mut().zip(shift) {
            *bias -= sh;
        }
        Ok(())
    }

    /// Rewrites the last layer so that `net'(x) = scale ⊙ net(x) + mean`.
    pub fn fold_into_output(&self, net: &mut Mlp) -> Result<()> {
        if net.output_dim() != self.dim() {
            return Err(shape_err(self.dim(), net.output_dim()));
        }
        let last = net.num_layers() - 1;
        let w = &mut net.weights_mut()[last];
        for (r, s) in self.scale.iter().enumerate() {
            w.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        for ((bias, m), s) in net.biases_mut()[last].iter_mut().zip(&self.mean).zip(&self.scale) {
            *bias = *bias * s + m;
        }
        Ok(())
    }
}

/// Mean squared error over all entries of a regression target.
pub struct MseObjective<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a Matrix,
}

impl MseObjective<'_> {
    fn batch(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (self.inputs.select_rows(idx), self.targets.select_rows(idx))
    }
}

impl Objective<Mlp> for MseObjective<'_> {
    fn loss_grad(&self, model: &Mlp, idx: &[usize], grads: &mut Mlp) -> Result<f64> {
        let (x, y) = self.batch(idx);
        let cache = model.forward(&x)?;
        let out = cache.output();
        let denom = (idx.len() * y.cols()) as f64;
        let mut upstream = out.clone();
        let mut loss = 0.0;
        for (u, t) in upstream.as_mut_slice().iter_mut().zip(y.as_slice()) {
            let d = *u - t;
            loss += d * d;
            *u = 2.0 * d / denom;
        }
        model.backward_into(&cache, &upstream, None, grads)?;
        Ok(loss / denom)
    }

    fn evaluate(&self, model: &Mlp, idx: &[usize]) -> Result<(f64, Option<f64>)> {
        let (x, y) = self.batch(idx);
        let out = model.predict(&x)?;
        let sse: f64 = out
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((sse / y.cols() as f64, None))
    }
}

/// Trains `net` to map `inputs` to `targets` by MSE.
///
/// Inputs and targets are standardised for training and the statistics are
/// folded back into the returned network, which therefore acts on raw
/// values. The last layer of `net` is zeroed first, so an untrained
/// network predicts the training-set target mean.
pub fn train_regressor(mut net: Mlp, inputs: &Matrix, targets: &Matrix, cfg: &SgdConfig) -> Result<(Mlp, TrainLog)> {
    if inputs.rows() != targets.rows() {
        return Err(shape_err(inputs.rows(), targets.rows()));
    }
    if net.output_dim() != targets.cols() || net.input_dim() != inputs.cols() {
        return Err(shape_err(
            format!("{} -> {}", inputs.cols(), targets.cols()),
            format!("{} -> {}", net.input_dim(), net.output_dim()),
        ));
    }
    if !inputs.is_finite() || !targets.is_finite() {
        return Err(Error::NonFinite("regression data".into()));
    }
    let n_train = cfg.train_len(inputs.rows());
    let in_std = Standardizer::fit(&inputs.slice_rows(0, n_train));
    let out_std = Standardizer::fit(&targets.slice_rows(0, n_train));
    let x = in_std.apply(inputs)?;
    let y = out_std.apply(targets)?;
    let last = net.num_layers() - 1;
    net.weights_mut()[last].scale(0.0);
    net.biases_mut()[last].iter_mut().for_each(|b| *b = 0.0);
    let obj = MseObjective {
        inputs: &x,
        targets: &y,
    };
    let (mut best, log) = run_sgd(net, &obj, x.rows(), cfg)?;
    in_std.fold_into_input(&mut best)?;
    out_std.fold_into_output(&mut best)?;
    Ok((best, log))
}

/// Per-column coefficient of determination `1 − SSE/SST`.
///
/// A constant target column yields 1 for an exact fit and 0 otherwise.
pub fn r_squared(pred: &Matrix, target: &Matrix) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let means = target.col_means();
    let mut sse = vec![0.0; target.cols()];
    let mut sst = vec![0.0; target.cols()];
    for i in 0..target.rows() {
        for j in 0..target.cols() {
            let (p, t) = (pred[(i, j)], target[(i, j)]);
            sse[j] += (p - t) * (p - t);
            sst[j] += (t - means[j]) * (t - means[j]);
        }
    }
    Ok(sse
        .into_iter()
        .zip(sst)
        .map(|(e, t)| {
            if t > 0.0 {
                1.0 - e / t
            } else if e == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{grad_check, Activation};

    #[test]
    fn standardizer_folds_exactly() {
        let data = Matrix::from_fn(50, 3, |i, j| {
            (i as f64 * 0.37 + j as f64).sin() * (j + 1) as f64 + j as f64
        });
        let st = Standardizer::fit(&data);
        let net = Mlp::new(&[3, 4, 2], Activation::leaky_relu(0.2), 3).unwrap();
        let expect = net.predict(&st.apply(&data).unwrap()).unwrap();
        let mut folded = net.clone();
        st.fold_into_input(&mut folded).unwrap();
        let got = folded.predict(&data).unwrap();
        for (a, b) in got.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let out_st = Standardizer {
            mean: vec![1.0, -2.0],
            scale: vec![3.0, 0.5],
        };
        out_st.fold_into_output(&mut folded).unwrap();
        let got = folded.predict(&data).unwrap();
        for i in 0..50 {
            for j in 0..2 {
                let e = expect[(i, j)] * out_st.scale[j] + out_st.mean[j];
                assert!((got[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let x = Matrix::from_fn(12, 3, |i, j| ((i * 3 + j) as f64 * 0.7).cos());
        let y = Matrix::from_fn(12, 2, |i, j| ((i + 2 * j) as f64 * 0.3).sin());
        let obj = MseObjective {
            inputs: &x,
            targets: &y,
        };
        let net = Mlp::new(&[3, 5, 5, 2], Activation::smooth_leaky_relu(0.2), 9).unwrap();
        let idx: Vec<usize> = (0..12).collect();
        let report = grad_check(&net, 1e-5, |m| {
            let mut g = m.zeros_like();
            let l = obj.loss_grad(m, &idx, &mut g).unwrap();
            (l, g)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_regression_recovers_map() {
        let x = Matrix::from_fn(2000, 2, |i, j| ((i * 7 + j * 13) as f64 * 0.917).sin());
        let y = Matrix::from_fn(2000, 1, |i, _| 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)] + 1.0);
        let net = Mlp::new(&[2, 1], Activation::Linear, 0).unwrap();
        let cfg = SgdConfig {
            lr: 0.05,
            epochs: 30,
            ..SgdConfig::default()
        };
        let (fit, log) = train_regressor(net, &x, &y, &cfg).unwrap();
        assert!(log.final_record().unwrap().val_loss < 1e-8);
        let w = &fit.weights()[0];
        assert!((w[(0, 0)] - 2.0).abs() < 1e-4 && (w[(0, 1)] + 0.5).abs() < 1e-4);
        assert!((fit.biases()[0][0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn r_squared_edges() {
        let t = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(r_squared(&t, &t).unwrap(), vec![1.0]);
        let mean = Matrix::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(r_squared(&mean, &t).unwrap(), vec![0.0]);
    }

    #[test]
    fn csv_log_layout() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                val_loss: 0.25,
                accuracy: None,
            }],
            best_epoch: 0,
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_loss,accuracy\n0,0.5,0.25,\n"
        );
    }
}
