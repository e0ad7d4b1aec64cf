use serde::{Deserialize, Serialize};

use super::{fold_standardizer, psi, psi_backward, ContrastiveDataset, NetArch};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nnet::{sigmoid, softplus, Mlp, ParamSet};
use crate::series::TimeSeries;
use crate::train::{random_split, run_sgd_split, Objective, SgdConfig, Standardizer, TrainLog};

/// Real Fourier basis `[1, cos θ, sin θ, …, cos Fθ, sin Fθ]` with
/// `θ = 2π·u / period`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis {
    pub num_freq: usize,
    pub period: f64,
}

impl FourierBasis {
    pub fn len(&self) -> usize {
        2 * self.num_freq + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eval_into(&self, u: f64, out: &mut [f64]) {
        let theta = 2.0 * std::f64::consts::PI * u / self.period;
        let (s1, c1) = theta.sin_cos();
        out[0] = 1.0;
        let (mut c, mut s) = (c1, s1);
        for f in 0..self.num_freq {
            out[1 + 2 * f] = c;
            out[2 + 2 * f] = s;
            // angle addition keeps this to one sin_cos per sample
            let next_c = c * c1 - s * s1;
            s = s * c1 + c * s1;
            c = next_c;
        }
    }

    pub fn eval(&self, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(u, &mut out);
        out
    }
}

/// IIA-GCL regression function
///
/// `r = Σ ψ(h)·μ(u) + Σ ψ(φ)·μ^φ(u) + α(u) + Σ β_i h_i² + Σ γ_i φ_i²`
///
/// with `ψ(y) = (y², y)`, and `μ`, `μ^φ`, `α` expanded in a Fourier basis of `u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GclModel {
    pub n: usize,
    /// Sufficient statistics per component (always 2).
    pub k: usize,
    pub order: usize,
    pub nica: bool,
    pub basis: FourierBasis,
    pub h_net: Mlp,
    pub phi_net: Option<Mlp>,
    /// `2n × B`; row `2i + j` holds the coefficients of `μ_{ij}`.
    pub mu_weights: Matrix,
    pub phi_mu_weights: Option<Matrix>,
    pub alpha_weights: Vec<f64>,
    pub beta_weights: Vec<f64>,
    pub gamma_weights: Option<Vec<f64>>,
}

impl ParamSet for GclModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.h_net.param_slices();
        if let Some(phi) = &self.phi_net {
            v.extend(phi.param_slices());
        }
        v.push(self.mu_weights.as_slice());
        if let Some(m) = &self.phi_mu_weights {
            v.push(m.as_slice());
        }
        v.push(&self.alpha_weights);
        v.push(&self.beta_weights);
        if let Some(g) = &self.gamma_weights {
            v.push(g);
        }
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.h_net.param_slices_mut();
        if let Some(phi) = &mut self.phi_net {
            v.extend(phi.param_slices_mut());
        }
        v.push(self.mu_weights.as_mut_slice());
        if let Some(m) = &mut self.phi_mu_weights {
            v.push(m.as_mut_slice());
        }
        v.push(&mut self.alpha_weights);
        v.push(&mut self.beta_weights);
        if let Some(g) = &mut self.gamma_weights {
            v.push(g);
        }
        v
    }
}

/// The five additive parts of `r` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GclTerms {
    pub h_coupling: f64,
    pub phi_coupling: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GclTerms {
    pub fn total(&self) -> f64 {
        self.h_coupling + self.phi_coupling + self.alpha + self.beta + self.gamma
    }
}

impl GclModel {
    /// Random feature networks, all coupling weights zero (so `r ≡ 0`).
    pub fn new(n: usize, arch: &NetArch, basis: FourierBasis, seed: u64) -> Result<Self> {
        if basis.num_freq == 0 || !(basis.period > 0.0) {
            return Err(Error::InvalidConfig(
                "Fourier basis needs num_freq >= 1 and period > 0".into(),
            ));
        }
        let h_net = arch.h_net(n, seed)?;
        let phi_net = arch.phi_net(n, seed.wrapping_add(1))?;
        let b = basis.len();
        let with_phi = phi_net.is_some();
        Ok(Self {
            n,
            k: 2,
            order: arch.order,
            nica: arch.nica,
            h_net,
            phi_net,
            mu_weights: Matrix::zeros(2 * n, b),
            phi_mu_weights: with_phi.then(|| Matrix::zeros(2 * n, b)),
            alpha_weights: vec![0.0; b],
            beta_weights: vec![0.0; n],
            gamma_weights: with_phi.then(|| vec![0.0; n]),
            basis,
        })
    }

    fn h_width(&self) -> usize {
        self.h_net.input_dim()
    }

    /// Decomposed regression function at `(x_t, [x_{t−1}, …, x_{t−p}], u)`.
    pub fn terms(&self, x_t: &[f64], x_prev: &[f64], u: usize) -> Result<GclTerms> {
        if x_t.len() != self.n || x_prev.len() != self.order * self.n {
            return Err(shape_err(
                format!("x_t of {} and lags of {}", self.n, self.order * self.n),
                format!("{} and {}", x_t.len(), x_prev.len()),
            ));
        }
        let e = self.basis.eval(u as f64);
        let h_in: Vec<f64> = if self.nica {
            x_t.to_vec()
        } else {
            x_t.iter().chain(x_prev).copied().collect()
        };
        let h = self.h_net.predict(&Matrix::from_vec(1, h_in.len(), h_in)?)?;
        let psi_h = psi(&h);
        let mu = self.mu_weights.matvec(&e)?;
        let mut terms = GclTerms {
            h_coupling: dot(psi_h.row(0), &mu),
            phi_coupling: 0.0,
            alpha: dot(&self.alpha_weights, &e),
            beta: h.row(0).iter().zip(&self.beta_weights).map(|(v, b)| b * v * v).sum(),
            gamma: 0.0,
        };
        if let (Some(phi_net), Some(pm), Some(g)) = (&self.phi_net, &self.phi_mu_weights, &self.gamma_weights) {
            let phi = phi_net.predict(&Matrix::from_vec(1, x_prev.len(), x_prev.to_vec())?)?;
            terms.phi_coupling = dot(psi(&phi).row(0), &pm.matvec(&e)?);
            terms.gamma = phi.row(0).iter().zip(g).map(|(v, c)| c * v * v).sum();
        }
        Ok(terms)
    }

    /// `r(x_t, x_{t−1}, u)`.
    pub fn regression(&self, x_t: &[f64], x_prev: &[f64], u: usize) -> Result<f64> {
        Ok(self.terms(x_t, x_prev, u)?.total())
    }

    /// Posterior probability of the real class, `σ(r)`.
    pub fn posterior(&self, x_t: &[f64], x_prev: &[f64], u: usize) -> Result<f64> {
        Ok(sigmoid(self.regression(x_t, x_prev, u)?))
    }

    /// Estimated innovations `h(x_t, …)` for `t = p..N`.
    pub fn extract(&self, x: &TimeSeries) -> Result<TimeSeries> {
        super::extract_innovations(&self.h_net, x, self.order)
    }
}

/// Mean binary cross-entropy over the real and shuffled triples of `rows`
/// and the number of correctly classified triples. With `grads`, the
/// gradient of the mean loss is accumulated into it.
pub fn gcl_loss_grad(
    model: &GclModel,
    data: &ContrastiveDataset,
    rows: &[usize],
    grads: Option<&mut GclModel>,
) -> Result<(f64, f64)> {
    if data.n != model.n || data.order != model.order {
        return Err(shape_err(
            format!("n = {}, p = {}", model.n, model.order),
            format!("n = {}, p = {}", data.n, data.order),
        ));
    }
    if rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = model.n;
    let batch = data.inputs.select_rows(rows);
    let h_in = batch.select_cols(&(0..model.h_width()).collect::<Vec<_>>());
    let h_cache = model.h_net.forward(&h_in)?;
    let h = h_cache.output();
    let psi_h = psi(h);
    let phi_part = match &model.phi_net {
        Some(net) => {
            let cols: Vec<usize> = (n..(model.order + 1) * n).collect();
            let cache = net.forward(&batch.select_cols(&cols))?;
            let psi_phi = psi(cache.output());
            Some((cache, psi_phi))
        }
        None => None,
    };
    let b = model.basis.len();
    let mut e = vec![0.0; b];
    let mut mu = vec![0.0; 2 * n];
    let mut mu_phi = vec![0.0; 2 * n];
    let examples = 2.0 * rows.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0.0;
    let want_grad = grads.is_some();
    let mut d_psi_h = Matrix::zeros(rows.len(), 2 * n);
    let mut d_psi_phi = Matrix::zeros(rows.len(), 2 * n);
    let mut g_mu = Matrix::zeros(if want_grad { 2 * n } else { 0 }, b);
    let mut g_phi_mu = Matrix::zeros(if want_grad { 2 * n } else { 0 }, b);
    let mut g_alpha = vec![0.0; b];
    let mut g_beta = vec![0.0; n];
    let mut g_gamma = vec![0.0; n];

    for (r, &row) in rows.iter().enumerate() {
        for (label, u) in [(1.0, data.u[row]), (0.0, data.u_perm[row])] {
            model.basis.eval_into(u as f64, &mut e);
            for (k, m) in mu.iter_mut().enumerate() {
                *m = dot(model.mu_weights.row(k), &e);
            }
            let ph = psi_h.row(r);
            let mut z = dot(ph, &mu) + dot(&model.alpha_weights, &e);
            for i in 0..n {
                z += model.beta_weights[i] * ph[2 * i];
            }
            if let (Some((_, psi_phi)), Some(pm), Some(gw)) = (&phi_part, &model.phi_mu_weights, &model.gamma_weights) {
                for (k, m) in mu_phi.iter_mut().enumerate() {
                    *m = dot(pm.row(k), &e);
                }
                let pp = psi_phi.row(r);
                z += dot(pp, &mu_phi);
                for i in 0..n {
                    z += gw[i] * pp[2 * i];
                }
            }
            loss += softplus(z) - label * z;
            if (z > 0.0) == (label == 1.0) {
                correct += 1.0;
            }
            if !want_grad {
                continue;
            }
            let g = (sigmoid(z) - label) / examples;
            let dh = d_psi_h.row_mut(r);
            for k in 0..2 * n {
                dh[k] += g * mu[k];
                let coef = g * ph[k];
                for (w, &ev) in g_mu.row_mut(k).iter_mut().zip(&e) {
                    *w += coef * ev;
                }
            }
            for i in 0..n {
                dh[2 * i] += g * model.beta_weights[i];
                g_beta[i] += g * ph[2 * i];
            }
            for (a, &ev) in g_alpha.iter_mut().zip(&e) {
                *a += g * ev;
            }
            if let (Some((_, psi_phi)), Some(gw)) = (&phi_part, &model.gamma_weights) {
                let pp = psi_phi.row(r);
                let dp = d_psi_phi.row_mut(r);
                for k in 0..2 * n {
                    dp[k] += g * mu_phi[k];
                    let coef = g * pp[k];
                    for (w, &ev) in g_phi_mu.row_mut(k).iter_mut().zip(&e) {
                        *w += coef * ev;
                    }
                }
                for i in 0..n {
                    dp[2 * i] += g * gw[i];
                    g_gamma[i] += g * pp[2 * i];
                }
            }
        }
    }

    if let Some(grads) = grads {
        let up_h = psi_backward(h, &d_psi_h);
        model.h_net.backward_into(&h_cache, &up_h, None, &mut grads.h_net)?;
        grads.mu_weights.add_assign_scaled(&g_mu, 1.0);
        grads.alpha_weights.iter_mut().zip(&g_alpha).for_each(|(a, g)| *a += g);
        grads.beta_weights.iter_mut().zip(&g_beta).for_each(|(a, g)| *a += g);
        if let (Some((cache, _)), Some(net), Some(gnet)) = (&phi_part, &model.phi_net, &mut grads.phi_net) {
            let up = psi_backward(cache.output(), &d_psi_phi);
            net.backward_into(cache, &up, None, gnet)?;
            if let Some(m) = &mut grads.phi_mu_weights {
                m.add_assign_scaled(&g_phi_mu, 1.0);
            }
            if let Some(gg) = &mut grads.gamma_weights {
                gg.iter_mut().zip(&g_gamma).for_each(|(a, g)| *a += g);
            }
        }
    }
    Ok((loss / examples, correct))
}

/// Training settings of IIA-GCL (and NICA-GCL with `arch.nica`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GclConfig {
    pub arch: NetArch,
    pub num_freq: usize,
    /// Period of the Fourier basis in units of `u`; defaults to the series length.
    pub period: Option<f64>,
    pub sgd: SgdConfig,
    pub init_seed: u64,
}

impl Default for GclConfig {
    fn default() -> Self {
        Self {
            arch: NetArch::default(),
            num_freq: 64,
            period: None,
            sgd: SgdConfig::default(),
            init_seed: 0,
        }
    }
}

struct GclObjective<'a> {
    data: &'a ContrastiveDataset,
}

impl Objective<GclModel> for GclObjective<'_> {
    fn loss_grad(&self, model: &GclModel, idx: &[usize], grads: &mut GclModel) -> Result<f64> {
        Ok(gcl_loss_grad(model, self.data, idx, Some(grads))?.0)
    }

    fn evaluate(&self, model: &GclModel, idx: &[usize]) -> Result<(f64, Option<f64>)> {
        let (loss, correct) = gcl_loss_grad(model, self.data, idx, None)?;
        Ok((loss * idx.len() as f64, Some(correct / 2.0)))
    }
}

/// Trains the logistic discriminator between real and shuffled triples.
///
/// Observations are standardised for training and the statistics are
/// folded into the returned networks. The validation set is a seeded random
/// `sgd.val_fraction` of the triples; the lowest-validation-loss snapshot
/// is returned.
pub fn train_gcl(data: &ContrastiveDataset, cfg: &GclConfig) -> Result<(GclModel, TrainLog)> {
    if cfg.arch.order != data.order {
        return Err(Error::InvalidConfig(format!(
            "config order {} differs from dataset order {}",
            cfg.arch.order, data.order
        )));
    }
    if !data.inputs.is_finite() {
        return Err(Error::NonFinite("observations".into()));
    }
    let n = data.n;
    let (train, val) = random_split(data.len(), &cfg.sgd);
    let current: Vec<usize> = (0..n).collect();
    let st = Standardizer::fit(&data.inputs.select_rows(&train).select_cols(&current));
    let mut scaled = data.clone();
    scaled.inputs = st.tile(data.order + 1).apply(&data.inputs)?;
    let period = cfg.period.unwrap_or((data.len() + data.order) as f64);
    let basis = FourierBasis {
        num_freq: cfg.num_freq,
        period,
    };
    let model = GclModel::new(n, &cfg.arch, basis, cfg.init_seed)?;
    let obj = GclObjective { data: &scaled };
    let (mut best, log) = run_sgd_split(model, &obj, train, &val, &cfg.sgd)?;
    fold_standardizer(&st, &cfg.arch, &mut best.h_net, best.phi_net.as_mut())?;
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::build_contrastive_dataset;
    use crate::nnet::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(len: usize, n: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TimeSeries::new(Matrix::from_fn(len, n, |_, _| rng.gen_range(-1.5..1.5)))
    }

    fn randomize(model: &mut GclModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in model.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    fn basis() -> FourierBasis {
        FourierBasis {
            num_freq: 3,
            period: 20.0,
        }
    }

    #[test]
    fn basis_matches_direct_trig() {
        let b = FourierBasis {
            num_freq: 64,
            period: 1000.0,
        };
        let e = b.eval(317.0);
        for f in 1..=64 {
            let ang = 2.0 * std::f64::consts::PI * f as f64 * 317.0 / 1000.0;
            assert!((e[2 * f - 1] - ang.cos()).abs() < 1e-12);
            assert!((e[2 * f] - ang.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let arch = NetArch {
            layers: 2,
            ..NetArch::default()
        };
        let m = GclModel::new(2, &arch, basis(), 1).unwrap();
        assert_eq!(m.regression(&[0.3, -1.0], &[1.0, 2.0], 4).unwrap(), 0.0);
        assert_eq!(m.posterior(&[0.3, -1.0], &[1.0, 2.0], 4).unwrap(), 0.5);
    }

    #[test]
    fn regression_is_sum_of_terms() {
        let arch = NetArch {
            layers: 2,
            ..NetArch::default()
        };
        let mut m = GclModel::new(2, &arch, basis(), 1).unwrap();
        randomize(&mut m, 2);
        let (xt, xp, u) = ([0.3, -1.0], [1.0, 2.0], 7);
        let t = m.terms(&xt, &xp, u).unwrap();
        // independent evaluation of each term
        let e = basis().eval(u as f64);
        let h = m
            .h_net
            .predict(&Matrix::from_rows(&[vec![0.3, -1.0, 1.0, 2.0]]).unwrap())
            .unwrap();
        let phi = m
            .phi_net
            .as_ref()
            .unwrap()
            .predict(&Matrix::from_rows(&[xp.to_vec()]).unwrap())
            .unwrap();
        let mut hc = 0.0;
        let mut pc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let k = 2 * i + j;
                let (hv, pv) = (h[(0, i)], phi[(0, i)]);
                let (sh, sp) = if j == 0 { (hv * hv, pv * pv) } else { (hv, pv) };
                hc += sh * dot(m.mu_weights.row(k), &e);
                pc += sp * dot(m.phi_mu_weights.as_ref().unwrap().row(k), &e);
            }
        }
        let beta: f64 = (0..2).map(|i| m.beta_weights[i] * h[(0, i)].powi(2)).sum();
        let gamma: f64 = (0..2)
            .map(|i| m.gamma_weights.as_ref().unwrap()[i] * phi[(0, i)].powi(2))
            .sum();
        let alpha = dot(&m.alpha_weights, &e);
        assert!((t.h_coupling - hc).abs() < 1e-12);
        assert!((t.phi_coupling - pc).abs() < 1e-12);
        assert!((t.beta - beta).abs() < 1e-12 && (t.gamma - gamma).abs() < 1e-12);
        assert!((t.alpha - alpha).abs() < 1e-12);
        let r = m.regression(&xt, &xp, u).unwrap();
        assert!((r - (hc + pc + alpha + beta + gamma)).abs() < 1e-12);
        // batched path agrees with the pointwise one
        let x = TimeSeries::from_rows(&[xp.to_vec(), xt.to_vec(), xt.to_vec()]).unwrap();
        let mut d = build_contrastive_dataset(&x, &[0, u, 0], 1, 0).unwrap();
        d.u_perm[0] = u;
        let (loss, _) = gcl_loss_grad(&m, &d, &[0], None).unwrap();
        let expect = (softplus(r) - r + softplus(r)) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (layers, nica) in [(2, false), (1, false), (2, true)] {
            let x = random_series(30, 2, 4);
            let u: Vec<usize> = (0..30).collect();
            let d = build_contrastive_dataset(&x, &u, 1, 9).unwrap();
            let arch = NetArch {
                layers,
                nica,
                activation: crate::nnet::Activation::smooth_leaky_relu(0.2),
                ..NetArch::default()
            };
            let mut m = GclModel::new(2, &arch, basis(), 3).unwrap();
            randomize(&mut m, 5);
            let rows: Vec<usize> = (0..d.len()).collect();
            let report = grad_check(&m, 1e-5, |p| {
                let mut g = p.zeros_like();
                let (l, _) = gcl_loss_grad(p, &d, &rows, Some(&mut g)).unwrap();
                (l, g)
            });
            assert!(report.max_rel_error < 1e-5, "{layers} {nica}: {report:?}");
        }
    }

    #[test]
    fn initial_loss_is_ln2_and_training_decreases() {
        use crate::simgen::{
            build_nvar_mlp, generate_series, sample_nonstationary_innovations, ModulationSpec, NvarConfig,
        };
        let len = 4096;
        let model = build_nvar_mlp(&NvarConfig::new(2, 1), 1).unwrap();
        let spec = ModulationSpec::random(2, len, 8, 2).unwrap();
        let s = sample_nonstationary_innovations(&spec.render(), 3).unwrap();
        let x = generate_series(&model, &s, &[vec![0.0; 2]]).unwrap();
        let u: Vec<usize> = (0..len).collect();
        let d = build_contrastive_dataset(&x, &u, 1, 4).unwrap();
        let cfg = GclConfig {
            num_freq: 8,
            sgd: SgdConfig {
                epochs: 10,
                lr: 0.01,
                ..SgdConfig::default()
            },
            ..GclConfig::default()
        };
        let (_, log) = train_gcl(&d, &cfg).unwrap();
        assert!((log.initial_loss().unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let losses: Vec<f64> = log.records.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
