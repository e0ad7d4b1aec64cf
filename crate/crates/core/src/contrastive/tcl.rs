use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fold_standardizer, psi, psi_backward, NetArch};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{Mlp, ParamSet};
use crate::series::TimeSeries;
use crate::train::{evaluate_objective, run_sgd_split, Objective, SgdConfig, Standardizer, TrainLog};

/// IIA-TCL multinomial classifier with logits
///
/// `z_l = Σ w_{l,ij} ψ_j(h_i) + Σ w^φ_{l,ij} ψ_j(φ_i) + b_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TclModel {
    pub n: usize,
    pub k: usize,
    pub order: usize,
    pub nica: bool,
    pub num_classes: usize,
    pub h_net: Mlp,
    pub phi_net: Option<Mlp>,
    /// `T × 2n`; column `2i + j` pairs with `ψ_j(h_i)`.
    pub class_weights: Matrix,
    pub phi_class_weights: Option<Matrix>,
    pub class_biases: Vec<f64>,
}

impl ParamSet for TclModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.h_net.param_slices();
        if let Some(phi) = &self.phi_net {
            v.extend(phi.param_slices());
        }
        v.push(self.class_weights.as_slice());
        if let Some(w) = &self.phi_class_weights {
            v.push(w.as_slice());
        }
        v.push(&self.class_biases);
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.h_net.param_slices_mut();
        if let Some(phi) = &mut self.phi_net {
            v.extend(phi.param_slices_mut());
        }
        v.push(self.class_weights.as_mut_slice());
        if let Some(w) = &mut self.phi_class_weights {
            v.push(w.as_mut_slice());
        }
        v.push(&mut self.class_biases);
        v
    }
}

fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

impl TclModel {
    /// Random feature networks and zero class weights (uniform posteriors).
    pub fn new(n: usize, num_classes: usize, arch: &NetArch, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "TCL needs at least 2 classes, got {num_classes}"
            )));
        }
        let h_net = arch.h_net(n, seed)?;
        let phi_net = arch.phi_net(n, seed.wrapping_add(1))?;
        let with_phi = phi_net.is_some();
        Ok(Self {
            n,
            k: 2,
            order: arch.order,
            nica: arch.nica,
            num_classes,
            h_net,
            phi_net,
            class_weights: Matrix::zeros(num_classes, 2 * n),
            phi_class_weights: with_phi.then(|| Matrix::zeros(num_classes, 2 * n)),
            class_biases: vec![0.0; num_classes],
        })
    }

    /// Class logits for each row of lag-embedded inputs `[x_t, x_{t−1}, …]`.
    pub fn logits(&self, rows: &Matrix) -> Result<Matrix> {
        Ok(self.forward(rows)?.logits)
    }

    /// Posterior over classes at `(x_t, [x_{t−1}, …, x_{t−p}])`.
    pub fn posterior(&self, x_t: &[f64], x_prev: &[f64]) -> Result<Vec<f64>> {
        if x_t.len() != self.n || x_prev.len() != self.order * self.n {
            return Err(shape_err(
                format!("x_t of {} and lags of {}", self.n, self.order * self.n),
                format!("{} and {}", x_t.len(), x_prev.len()),
            ));
        }
        let row: Vec<f64> = x_t.iter().chain(x_prev).copied().collect();
        let mut z = self.logits(&Matrix::from_vec(1, row.len(), row)?)?.into_vec();
        softmax_in_place(&mut z);
        Ok(z)
    }

    pub fn extract(&self, x: &TimeSeries) -> Result<TimeSeries> {
        super::extract_innovations(&self.h_net, x, self.order)
    }

    fn forward(&self, rows: &Matrix) -> Result<TclForward> {
        let width = (self.order + 1) * self.n;
        if rows.cols() != width {
            return Err(shape_err(format!("{width} input columns"), rows.cols()));
        }
        let h_cols: Vec<usize> = (0..self.h_net.input_dim()).collect();
        let h_cache = self.h_net.forward(&rows.select_cols(&h_cols))?;
        let psi_h = psi(h_cache.output());
        let mut logits = psi_h.matmul_t(&self.class_weights)?;
        let phi = match (&self.phi_net, &self.phi_class_weights) {
            (Some(net), Some(w)) => {
                let cols: Vec<usize> = (self.n..width).collect();
                let cache = net.forward(&rows.select_cols(&cols))?;
                let psi_phi = psi(cache.output());
                logits.add_assign_scaled(&psi_phi.matmul_t(w)?, 1.0);
                Some((cache, psi_phi))
            }
            _ => None,
        };
        for r in 0..logits.rows() {
            for (z, b) in logits.row_mut(r).iter_mut().zip(&self.class_biases) {
                *z += b;
            }
        }
        Ok(TclForward {
            h_cache,
            psi_h,
            phi,
            logits,
        })
    }
}

struct TclForward {
    h_cache: crate::nnet::ForwardCache,
    psi_h: Matrix,
    phi: Option<(crate::nnet::ForwardCache, Matrix)>,
    logits: Matrix,
}

/// Mean cross-entropy over `rows` of `inputs` (lag-embedded, one label per
/// row) and the number of correct predictions. With `grads`, the gradient
/// of the mean loss is accumulated into it.
pub fn tcl_loss_grad(
    model: &TclModel,
    inputs: &Matrix,
    labels: &[usize],
    rows: &[usize],
    grads: Option<&mut TclModel>,
) -> Result<(f64, f64)> {
    if labels.len() != inputs.rows() {
        return Err(shape_err(inputs.rows(), labels.len()));
    }
    if rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let batch = inputs.select_rows(rows);
    let mut fwd = model.forward(&batch)?;
    let count = rows.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0.0;
    for (r, &row) in rows.iter().enumerate() {
        let y = labels[row];
        if y >= model.num_classes {
            return Err(Error::InvalidConfig(format!("label {y} out of range")));
        }
        let z = fwd.logits.row_mut(r);
        let argmax = z
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (l, &v)| if v > acc.1 { (l, v) } else { acc },
            )
            .0;
        if argmax == y {
            correct += 1.0;
        }
        let zy = z[y];
        let lse = softmax_in_place(z);
        loss += lse - zy;
        // z now holds probabilities; turn it into dL/dz of the mean loss
        z[y] -= 1.0;
        z.iter_mut().for_each(|v| *v /= count);
    }
    if let Some(grads) = grads {
        let g = &fwd.logits;
        let n2 = 2 * model.n;
        let mut d_psi_h = g.matmul(&model.class_weights)?;
        for r in 0..rows.len() {
            let gr = g.row(r);
            let ph = fwd.psi_h.row(r);
            for (l, &gl) in gr.iter().enumerate() {
                grads.class_biases[l] += gl;
                let wrow = grads.class_weights.row_mut(l);
                for k in 0..n2 {
                    wrow[k] += gl * ph[k];
                }
            }
        }
        let up = psi_backward(fwd.h_cache.output(), &d_psi_h);
        model.h_net.backward_into(&fwd.h_cache, &up, None, &mut grads.h_net)?;
        if let (Some((cache, psi_phi)), Some(net), Some(w), Some(gnet), Some(gw)) = (
            &fwd.phi,
            &model.phi_net,
            &model.phi_class_weights,
            grads.phi_net.as_mut(),
            grads.phi_class_weights.as_mut(),
        ) {
            d_psi_h = g.matmul(w)?;
            for r in 0..rows.len() {
                let gr = g.row(r);
                let pp = psi_phi.row(r);
                for (l, &gl) in gr.iter().enumerate() {
                    let wrow = gw.row_mut(l);
                    for k in 0..n2 {
                        wrow[k] += gl * pp[k];
                    }
                }
            }
            let up = psi_backward(cache.output(), &d_psi_h);
            net.backward_into(cache, &up, None, gnet)?;
        }
    }
    Ok((loss / count, correct))
}

/// Training settings of IIA-TCL (and NICA-TCL with `arch.nica`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TclConfig {
    pub arch: NetArch,
    pub sgd: SgdConfig,
    pub init_seed: u64,
}

/// Trained classifier, its log and the final training-set accuracy.
#[derive(Clone, Debug)]
pub struct TclOutcome {
    pub model: TclModel,
    pub log: TrainLog,
    pub train_accuracy: f64,
}

struct TclObjective<'a> {
    inputs: &'a Matrix,
    labels: &'a [usize],
}

impl Objective<TclModel> for TclObjective<'_> {
    fn loss_grad(&self, model: &TclModel, idx: &[usize], grads: &mut TclModel) -> Result<f64> {
        Ok(tcl_loss_grad(model, self.inputs, self.labels, idx, Some(grads))?.0)
    }

    fn evaluate(&self, model: &TclModel, idx: &[usize]) -> Result<(f64, Option<f64>)> {
        let (loss, correct) = tcl_loss_grad(model, self.inputs, self.labels, idx, None)?;
        Ok((loss * idx.len() as f64, Some(correct)))
    }
}

/// Holds out a seeded random `val_fraction` of every class.
fn per_class_split(labels: &[usize], num_classes: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (r, &l) in labels.iter().enumerate() {
        members[l].push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut m in members {
        m.shuffle(&mut rng);
        let held = (m.len() as f64 * val_fraction).floor() as usize;
        val.extend_from_slice(&m[..held]);
        train.extend_from_slice(&m[held..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains the segment classifier on `x` with one integer label per time point.
///
/// Observations are standardised for training and the statistics are
/// folded back into the returned networks. The last `val_fraction` of the
/// samples of each class is held out for snapshot selection.
pub fn train_tcl(x: &TimeSeries, labels: &[usize], cfg: &TclConfig) -> Result<TclOutcome> {
    cfg.arch.validate()?;
    if labels.len() != x.len() {
        return Err(shape_err(format!("{} labels", x.len()), labels.len()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("observations".into()));
    }
    let p = cfg.arch.order;
    let inputs = x.lagged(p, true)?;
    let row_labels = &labels[p..];
    let num_classes = row_labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; num_classes];
    row_labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidConfig(format!("class {empty} has no samples")));
    }
    let (train, val) = per_class_split(row_labels, num_classes, cfg.sgd.val_fraction, cfg.sgd.seed ^ 0x7c1);
    let current: Vec<usize> = (0..x.dim()).collect();
    let st = Standardizer::fit(&inputs.select_rows(&train).select_cols(&current));
    let scaled = st.tile(p + 1).apply(&inputs)?;
    let model = TclModel::new(x.dim(), num_classes, &cfg.arch, cfg.init_seed)?;
    let obj = TclObjective {
        inputs: &scaled,
        labels: row_labels,
    };
    let (mut best, log) = run_sgd_split(model, &obj, train.clone(), &val, &cfg.sgd)?;
    let train_accuracy = evaluate_objective(&obj, &best, &train)?.1.unwrap_or(0.0);
    fold_standardizer(&st, &cfg.arch, &mut best.h_net, best.phi_net.as_mut())?;
    Ok(TclOutcome {
        model: best,
        log,
        train_accuracy,
    })
}
