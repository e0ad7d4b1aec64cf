//! Dense multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! An [`Mlp`] is a stack of affine layers. Hidden layers share one
//! activation; the last layer is always linear. Maxout hidden layers carry
//! two stacked affine groups (`2·out × in` weights, group A in the first
//! `out` rows) and emit the elementwise maximum. Ties and kinks use the
//! right derivative: leaky ReLU has slope 1 at 0 and maxout picks group A.
//!
//! Batches are row-major matrices, one sample per row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, Lu, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    LeakyRelu {
        leak: f64,
    },
    /// `a·x + (1 − a)·ln(1 + eˣ)`.
    SmoothLeakyRelu {
        leak: f64,
    },
    /// Maximum over two affine groups.
    Maxout,
}

impl Activation {
    pub fn leaky_relu(leak: f64) -> Self {
        Activation::LeakyRelu { leak }
    }

    pub fn smooth_leaky_relu(leak: f64) -> Self {
        Activation::SmoothLeakyRelu { leak }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { leak } | Activation::SmoothLeakyRelu { leak } if !(leak > 0.0 && leak < 1.0) => {
                Err(Error::InvalidConfig(format!(
                    "leak coefficient must lie in (0, 1), got {leak}"
                )))
            }
            _ => Ok(()),
        }
    }

    fn groups(&self) -> usize {
        if matches!(self, Activation::Maxout) {
            2
        } else {
            1
        }
    }

    /// Elementwise value, first and second derivative (non-maxout only).
    #[inline]
    fn eval(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            Activation::Linear | Activation::Maxout => (z, 1.0, 0.0),
            Activation::LeakyRelu { leak } => {
                if z >= 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    (leak * z, leak, 0.0)
                }
            }
            Activation::SmoothLeakyRelu { leak } => {
                let sig = sigmoid(z);
                (
                    leak * z + (1.0 - leak) * softplus(z),
                    leak + (1.0 - leak) * sig,
                    (1.0 - leak) * sig * (1.0 - sig),
                )
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Uniform access to every trainable scalar of a model.
///
/// A model type doubles as its own gradient container: gradients are held
/// in a value of the same type with identical shapes.
pub trait ParamSet: Clone {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let len = s.len();
            s.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, slice by slice.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn sq_norm(&self) -> f64 {
        self.param_slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }
}

/// `ln(1e-300)`: smaller Jacobian determinants count as singular.
const MIN_LN_ABS_DET: f64 = -690.775_527_898_213_7;

/// Multilayer perceptron parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr")]
pub struct Mlp {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct MlpRepr {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;
    fn try_from(r: MlpRepr) -> Result<Self> {
        Mlp::from_parts(r.layer_dims, r.activation, r.weights, r.biases)
    }
}

/// Cached intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Pre-activations per layer (maxout layers hold both groups).
    pub pre: Vec<Matrix>,
    /// `post[0]` is the input; `post[l + 1]` the output of layer `l`.
    pub post: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("forward cache always holds the input")
    }
}

impl Mlp {
    /// Random initialisation: weights i.i.d. uniform on `±√(3/fan_in)` (unit
    /// variance gain), zero biases.
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(layer_dims, activation, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(layer_dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        activation.validate()?;
        let nl = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(nl);
        let mut biases = Vec::with_capacity(nl);
        for l in 0..nl {
            let fan_in = layer_dims[l];
            let rows = Self::rows_for(layer_dims, activation, l);
            let limit = (3.0 / fan_in as f64).sqrt();
            let w = Matrix::from_fn(rows, fan_in, |_, _| rng.gen_range(-limit..=limit));
            weights.push(w);
            biases.push(vec![0.0; rows]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    /// All-zero parameters of the given architecture.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        let mut m = Self::new(layer_dims, activation, 0)?;
        m.fill_zero();
        Ok(m)
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        activation: Activation,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::check_dims(&layer_dims)?;
        activation.validate()?;
        let nl = layer_dims.len() - 1;
        if weights.len() != nl || biases.len() != nl {
            return Err(shape_err(
                format!("{nl} layers"),
                format!("{} weights, {} biases", weights.len(), biases.len()),
            ));
        }
        for l in 0..nl {
            let rows = Self::rows_for(&layer_dims, activation, l);
            if weights[l].shape() != (rows, layer_dims[l]) {
                return Err(shape_err(
                    format!("layer {l} weights {rows}x{}", layer_dims[l]),
                    format!("{:?}", weights[l].shape()),
                ));
            }
            if biases[l].len() != rows {
                return Err(shape_err(format!("layer {l} bias length {rows}"), biases[l].len()));
            }
        }
        Ok(Self {
            layer_dims,
            activation,
            weights,
            biases,
        })
    }

    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn rows_for(layer_dims: &[usize], activation: Activation, l: usize) -> usize {
        let hidden = l + 2 < layer_dims.len();
        if hidden {
            activation.groups() * layer_dims[l + 1]
        } else {
            layer_dims[l + 1]
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    fn is_hidden(&self, l: usize) -> bool {
        l + 1 < self.weights.len()
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(shape_err(format!("input width {}", self.input_dim()), inputs.cols()));
        }
        Ok(())
    }

    fn affine(&self, l: usize, inputs: &Matrix) -> Matrix {
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = Matrix::zeros(inputs.rows(), w.rows());
        for i in 0..inputs.rows() {
            let x = inputs.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = dot(w.row(j), x) + b[j];
            }
        }
        out
    }

    fn activate(&self, l: usize, pre: &Matrix) -> Matrix {
        if !self.is_hidden(l) {
            return pre.clone();
        }
        match self.activation {
            Activation::Maxout => {
                let width = self.layer_dims[l + 1];
                Matrix::from_fn(pre.rows(), width, |i, j| pre[(i, j)].max(pre[(i, j + width)]))
            }
            act => {
                let mut post = pre.clone();
                post.as_mut_slice().iter_mut().for_each(|v| *v = act.eval(*v).0);
                post
            }
        }
    }

    /// Batched forward pass keeping every intermediate for [`Mlp::backward`].
    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardCache> {
        self.check_input(inputs)?;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut post = Vec::with_capacity(self.num_layers() + 1);
        post.push(inputs.clone());
        for l in 0..self.num_layers() {
            let z = self.affine(l, &post[l]);
            let a = self.activate(l, &z);
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache { pre, post })
    }

    /// Forward pass without retaining intermediates.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut a = inputs.clone();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &a);
            a = self.activate(l, &z);
        }
        Ok(a)
    }

    /// Gradients of `⟨upstream, output⟩`: parameter gradients and input gradients.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<(Mlp, Matrix)> {
        let mut grads = self.zeros_like();
        let dx = self.backward_into(cache, upstream, None, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    ///
    /// `inject` optionally adds extra gradients on the hidden
    /// pre-activations (one matrix per hidden layer, non-maxout only);
    /// this is how the log-determinant term reaches the parameters.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        inject: Option<&[Matrix]>,
        grads: &mut Mlp,
    ) -> Result<Matrix> {
        let nl = self.num_layers();
        if cache.pre.len() != nl || cache.post.len() != nl + 1 {
            return Err(shape_err(format!("cache for {nl} layers"), cache.pre.len()));
        }
        let batch = cache.post[0].rows();
        if upstream.shape() != (batch, self.output_dim()) {
            return Err(shape_err(
                format!("upstream {}x{}", batch, self.output_dim()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut dpost = upstream.clone();
        for l in (0..nl).rev() {
            let z = &cache.pre[l];
            let mut dpre = if !self.is_hidden(l) {
                dpost
            } else {
                match self.activation {
                    Activation::Maxout => {
                        let width = self.layer_dims[l + 1];
                        let mut d = Matrix::zeros(batch, 2 * width);
                        for i in 0..batch {
                            for j in 0..width {
                                let g = dpost[(i, j)];
                                if z[(i, j)] >= z[(i, j + width)] {
                                    d[(i, j)] = g;
                                } else {
                                    d[(i, j + width)] = g;
                                }
                            }
                        }
                        d
                    }
                    act => {
                        let mut d = dpost;
                        for (g, &zv) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
                            *g *= act.eval(zv).1;
                        }
                        d
                    }
                }
            };
            if let Some(extra) = inject {
                if self.is_hidden(l) && !matches!(self.activation, Activation::Maxout) {
                    let e = &extra[l];
                    if e.shape() != dpre.shape() {
                        return Err(shape_err(format!("{:?}", dpre.shape()), format!("{:?}", e.shape())));
                    }
                    for (d, v) in dpre.as_mut_slice().iter_mut().zip(e.as_slice()) {
                        *d += v;
                    }
                }
            }
            let a_prev = &cache.post[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for i in 0..batch {
                let a = a_prev.row(i);
                for (j, &g) in dpre.row(i).iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[j] += g;
                    for (w, &av) in gw.row_mut(j).iter_mut().zip(a) {
                        *w += g * av;
                    }
                }
            }
            dpost = dpre.matmul(&self.weights[l])?;
        }
        Ok(dpost)
    }

    /// Exact Jacobian of the output at `point`, restricted to input columns `cols`.
    pub fn input_jacobian(&self, point: &[f64], cols: &[usize]) -> Result<Matrix> {
        let x = Matrix::from_vec(1, point.len(), point.to_vec())?;
        let cache = self.forward(&x)?;
        self.jacobian_from_cache(&cache, 0, cols).map(|chain| chain.jacobian)
    }

    /// Layer-Jacobian chain product for sample `i` of a cached batch.
    fn jacobian_from_cache(&self, cache: &ForwardCache, i: usize, cols: &[usize]) -> Result<JacobianChain> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.input_dim()) {
            return Err(shape_err(format!("column < {}", self.input_dim()), bad));
        }
        let nl = self.num_layers();
        // products[l] = W_l · M_{l-1}, with M_{-1} the column selector
        let mut products: Vec<Matrix> = Vec::with_capacity(nl);
        let mut scales: Vec<LayerScale> = Vec::with_capacity(nl);
        let mut m = self.weights[0].select_cols(cols);
        for l in 0..nl {
            if l > 0 {
                m = self.weights[l].matmul(&m)?;
            }
            products.push(m.clone());
            if !self.is_hidden(l) {
                break;
            }
            let z = cache.pre[l].row(i);
            let scale = match self.activation {
                Activation::Maxout => {
                    let width = self.layer_dims[l + 1];
                    let active: Vec<usize> = (0..width)
                        .map(|j| if z[j] >= z[j + width] { j } else { j + width })
                        .collect();
                    m = m.select_rows(&active);
                    LayerScale::Select(active)
                }
                act => {
                    let (d1, d2): (Vec<f64>, Vec<f64>) = z
                        .iter()
                        .map(|&zv| {
                            let (_, a, b) = act.eval(zv);
                            (a, b)
                        })
                        .unzip();
                    for r in 0..m.rows() {
                        let s = d1[r];
                        m.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    LayerScale::Diag { d1, d2 }
                }
            };
            scales.push(scale);
        }
        Ok(JacobianChain {
            jacobian: m,
            products,
            scales,
        })
    }

    /// Per-sample `ln|det ∂h/∂x_cols|`; `−∞` where `|det| < 1e-300`.
    pub fn logdets(&self, inputs: &Matrix, cols: &[usize]) -> Result<Vec<f64>> {
        if cols.len() != self.output_dim() {
            return Err(shape_err(
                format!("{} Jacobian columns (square)", self.output_dim()),
                cols.len(),
            ));
        }
        let cache = self.forward(inputs)?;
        (0..inputs.rows())
            .map(|i| {
                let chain = self.jacobian_from_cache(&cache, i, cols)?;
                let (sign, ld) = Lu::new(&chain.jacobian)?.slogdet();
                Ok(if sign == 0.0 || ld < MIN_LN_ABS_DET {
                    f64::NEG_INFINITY
                } else {
                    ld
                })
            })
            .collect()
    }

    /// Per-sample `ln|det ∂h/∂x_cols|` over a batch and the accumulated
    /// gradient of `Σ_t w_t·ln|det J_t|` into `grads`.
    ///
    /// The adjoint of `ln|det J|` is `J⁻ᵀ`; it is pushed back through the
    /// chain product and, for smooth activations, into the pre-activations
    /// via the activation's second derivative.
    pub fn logdet_jacobian_grad(
        &self,
        inputs: &Matrix,
        cols: &[usize],
        sample_weights: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        let cache = self.forward(inputs)?;
        self.logdet_jacobian_grad_cached(&cache, cols, sample_weights, grads)
    }

    pub fn logdet_jacobian_grad_cached(
        &self,
        cache: &ForwardCache,
        cols: &[usize],
        sample_weights: &[f64],
        grads: &mut Mlp,
    ) -> Result<Vec<f64>> {
        let batch = cache.post[0].rows();
        if sample_weights.len() != batch {
            return Err(shape_err(batch, sample_weights.len()));
        }
        if cols.len() != self.output_dim() {
            return Err(shape_err(
                format!("{} Jacobian columns (square)", self.output_dim()),
                cols.len(),
            ));
        }
        let nl = self.num_layers();
        let smooth_inject = matches!(self.activation, Activation::SmoothLeakyRelu { .. });
        let mut inject: Vec<Matrix> = (0..nl)
            .map(|l| {
                if smooth_inject && self.is_hidden(l) {
                    Matrix::zeros(batch, self.layer_dims[l + 1])
                } else {
                    Matrix::zeros(0, 0)
                }
            })
            .collect();
        let mut logdets = Vec::with_capacity(batch);
        for i in 0..batch {
            let chain = self.jacobian_from_cache(cache, i, cols)?;
            let lu = Lu::new(&chain.jacobian)?;
            let (sign, ld) = lu.slogdet();
            if sign == 0.0 || !ld.is_finite() {
                return Err(Error::Singular(format!("Jacobian of sample {i}")));
            }
            logdets.push(ld);
            let w = sample_weights[i];
            if w == 0.0 {
                continue;
            }
            let mut g = lu.inverse()?.transpose();
            g.scale(w);
            for l in (0..nl).rev() {
                // gradient wrt W_l from J-path: G_l · M_{l-1}ᵀ
                if l == 0 {
                    let rows_idx = self.row_map(&chain, 0);
                    let gw = &mut grads.weights[0];
                    for (r, &wr) in rows_idx.iter().enumerate() {
                        for (k, &c) in cols.iter().enumerate() {
                            gw[(wr, c)] += g[(r, k)];
                        }
                    }
                    break;
                }
                let m_prev = self.chain_input(&chain, l - 1);
                let gw = &mut grads.weights[l];
                let rows_idx = self.row_map(&chain, l);
                for (r, &wr) in rows_idx.iter().enumerate() {
                    let gr = g.row(r);
                    let wrow = gw.row_mut(wr);
                    for (c, wv) in wrow.iter_mut().enumerate() {
                        *wv += dot(gr, m_prev.row(c));
                    }
                }
                // dM_{l-1} = W_lᵀ G_l (rows of W restricted to active rows)
                let wl = &self.weights[l];
                let in_dim = wl.cols();
                let mut dm = Matrix::zeros(in_dim, g.cols());
                for (r, &wr) in rows_idx.iter().enumerate() {
                    let wrow = wl.row(wr);
                    let gr = g.row(r);
                    for (c, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dm.row_mut(c).iter_mut().zip(gr) {
                            *d += wv * gv;
                        }
                    }
                }
                // through the activation of layer l-1
                g = match &chain.scales[l - 1] {
                    LayerScale::Diag { d1, d2 } => {
                        let p = &chain.products[l - 1];
                        for r in 0..dm.rows() {
                            if smooth_inject {
                                inject[l - 1][(i, r)] += d2[r] * dot(dm.row(r), p.row(r));
                            }
                            let s = d1[r];
                            dm.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        dm
                    }
                    LayerScale::Select(_) => dm,
                };
            }
        }
        if smooth_inject && nl > 1 {
            let zero_up = Matrix::zeros(batch, self.output_dim());
            self.backward_into(cache, &zero_up, Some(&inject), grads)?;
        }
        Ok(logdets)
    }

    /// Input to layer `l + 1` of the Jacobian chain, i.e. `M_l`.
    fn chain_input(&self, chain: &JacobianChain, l: usize) -> Matrix {
        let p = &chain.products[l];
        match &chain.scales[l] {
            LayerScale::Diag { d1, .. } => {
                let mut m = p.clone();
                for r in 0..m.rows() {
                    let s = d1[r];
                    m.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                m
            }
            LayerScale::Select(active) => p.select_rows(active),
        }
    }

    /// Weight rows of layer `l` that feed the chain (active maxout group rows
    /// when layer `l` is a maxout layer, otherwise all rows).
    fn row_map(&self, chain: &JacobianChain, l: usize) -> Vec<usize> {
        match chain.scales.get(l) {
            Some(LayerScale::Select(active)) => active.clone(),
            _ => (0..chain.products[l].rows()).collect(),
        }
    }
}

enum LayerScale {
    Diag { d1: Vec<f64>, d2: Vec<f64> },
    Select(Vec<usize>),
}

struct JacobianChain {
    jacobian: Matrix,
    /// `products[l] = W_l · M_{l-1}` before the activation of layer `l`.
    products: Vec<Matrix>,
    scales: Vec<LayerScale>,
}

impl ParamSet for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(w.as_slice());
            v.push(b);
        }
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            v.push(w.as_mut_slice());
            v.push(b);
        }
        v
    }
}

/// Classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new<P: ParamSet>(params: &P, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let velocity = params.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(Self { lr, momentum, velocity })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// state changes.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let slices = params.param_slices_mut();
        let gslices = grads.param_slices();
        if slices.len() != self.velocity.len() || gslices.len() != self.velocity.len() {
            return Err(shape_err(self.velocity.len(), slices.len()));
        }
        for ((p, g), v) in slices.into_iter().zip(gslices).zip(self.velocity.iter_mut()) {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(shape_err(v.len(), p.len()));
            }
            for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

const GRAD_CHECK_LIMIT: usize = 10_000;

/// Compares the analytic gradient returned by `loss_and_grad` against
/// central differences with step `eps`.
///
/// Relative error per coordinate is `|a − n| / max(|a| + |n|, 1e-8)`.
/// Above 10⁴ parameters a fixed-seed subsample of 10⁴ coordinates is used.
pub fn grad_check<P: ParamSet>(params: &P, eps: f64, loss_and_grad: impl Fn(&P) -> (f64, P)) -> GradCheck {
    let (_, analytic) = loss_and_grad(params);
    let flat_grad = analytic.flatten();
    let base = params.flatten();
    let total = base.len();
    let indices: Vec<usize> = if total > GRAD_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        rand::seq::index::sample(&mut rng, total, GRAD_CHECK_LIMIT).into_vec()
    } else {
        (0..total).collect()
    };
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for &k in &indices {
        flat[k] = base[k] + eps;
        probe.assign_flat(&flat);
        let plus = loss_and_grad(&probe).0;
        flat[k] = base[k] - eps;
        probe.assign_flat(&flat);
        let minus = loss_and_grad(&probe).0;
        flat[k] = base[k];
        let numeric = (plus - minus) / (2.0 * eps);
        let a = flat_grad[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: k,
                analytic: a,
                numeric,
                checked: indices.len(),
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = Mlp::new(&[4, 4], Activation::Linear, 7).unwrap();
        let b = Mlp::new(&[4, 4], Activation::Linear, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights().len(), 1);
        assert_eq!(a.weights()[0].shape(), (4, 4));
        assert!(a.biases()[0].iter().all(|&v| v == 0.0));
        let c = Mlp::new(&[4, 4], Activation::Linear, 8).unwrap();
        assert_ne!(a.weights()[0], c.weights()[0]);
        assert!(a.weights()[0].max_abs() <= (3.0f64 / 4.0).sqrt());
    }

    #[test]
    fn maxout_hidden_layers_are_doubled() {
        let m = Mlp::new(&[3, 5, 2], Activation::Maxout, 1).unwrap();
        assert_eq!(m.weights()[0].shape(), (10, 3));
        assert_eq!(m.weights()[1].shape(), (2, 5));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(Mlp::new(&[], Activation::Linear, 0).is_err());
        assert!(Mlp::new(&[3], Activation::Linear, 0).is_err());
        assert!(Mlp::new(&[3, 0, 2], Activation::Linear, 0).is_err());
        assert!(Mlp::new(&[3, 2], Activation::leaky_relu(1.5), 0).is_err());
    }

    #[test]
    fn identity_forward() {
        let m = Mlp::from_parts(
            vec![3, 3],
            Activation::Linear,
            vec![Matrix::identity(3)],
            vec![vec![0.0; 3]],
        )
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
        assert!(m.predict(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let m = Mlp::from_parts(
            vec![1, 1, 1],
            Activation::leaky_relu(0.2),
            vec![Matrix::identity(1), Matrix::identity(1)],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let out = m.predict(&Matrix::from_rows(&[vec![-1.0]]).unwrap()).unwrap();
        assert!((out[(0, 0)] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn maxout_picks_larger_group() {
        let m = Mlp::from_parts(
            vec![1, 1, 1],
            Activation::Maxout,
            vec![
                Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
                Matrix::identity(1),
            ],
            vec![vec![0.0, 0.0], vec![0.0]],
        )
        .unwrap();
        let out = m.predict(&Matrix::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(out[(0, 0)], 3.0);
        let out = m.predict(&Matrix::from_rows(&[vec![-3.0]]).unwrap()).unwrap();
        assert_eq!(out[(0, 0)], 3.0);
    }

    #[test]
    fn linear_backward_is_transpose() {
        let m = Mlp::new(&[3, 2], Activation::Linear, 3).unwrap();
        let x = random_batch(1, 3, 1);
        let cache = m.forward(&x).unwrap();
        let up = Matrix::from_rows(&[vec![0.7, -1.3]]).unwrap();
        let (_, dx) = m.backward(&cache, &up).unwrap();
        let expect = m.weights()[0].transpose().matvec(up.row(0)).unwrap();
        for (a, b) in dx.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let (g, dx) = m.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(g.sq_norm(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
        assert!(m.backward(&cache, &Matrix::zeros(2, 2)).is_err());
    }

    fn weighted_output_loss(m: &Mlp, x: &Matrix, up: &Matrix) -> (f64, Mlp) {
        let cache = m.forward(x).unwrap();
        let loss = dot(cache.output().as_slice(), up.as_slice());
        let (g, _) = m.backward(&cache, up).unwrap();
        (loss, g)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [
            Activation::smooth_leaky_relu(0.1),
            Activation::leaky_relu(0.2),
            Activation::Maxout,
        ] {
            let m = Mlp::new(&[4, 6, 5, 3], act, 11).unwrap();
            let x = random_batch(5, 4, 2);
            let up = random_batch(5, 3, 3);
            let report = grad_check(&m, 1e-5, |p| weighted_output_loss(p, &x, &up));
            assert!(report.max_rel_error < 1e-6, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let m = Mlp::new(&[3, 4, 2], Activation::smooth_leaky_relu(0.3), 5).unwrap();
        let x = random_batch(1, 3, 9);
        let up = Matrix::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let (_, dx) = m.backward(&m.forward(&x).unwrap(), &up).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut xp = x.clone();
            xp[(0, k)] += eps;
            let mut xm = x.clone();
            xm[(0, k)] -= eps;
            let fp = dot(m.predict(&xp).unwrap().as_slice(), up.as_slice());
            let fm = dot(m.predict(&xm).unwrap().as_slice(), up.as_slice());
            assert!(((fp - fm) / (2.0 * eps) - dx[(0, k)]).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_jacobian_is_weight_product() {
        let m = Mlp::new(&[4, 3, 2], Activation::Linear, 21).unwrap();
        let j = m.input_jacobian(&[0.3, -0.1, 2.0, 1.0], &[1, 3]).unwrap();
        let full = m.weights()[1].matmul(&m.weights()[0]).unwrap();
        assert_eq!(j, full.select_cols(&[1, 3]));
    }

    #[test]
    fn smooth_leaky_relu_derivative_at_zero() {
        let a = 0.3;
        let (_, d, _) = Activation::smooth_leaky_relu(a).eval(0.0);
        assert!((d - (1.0 + a) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for act in [Activation::smooth_leaky_relu(0.2), Activation::Maxout] {
            let m = Mlp::new(&[4, 6, 6, 3], act, 4).unwrap();
            let x = [0.2, -0.7, 1.1, 0.4];
            let cols = [0, 2, 3];
            let j = m.input_jacobian(&x, &cols).unwrap();
            let eps = 1e-6;
            let mut fd = Matrix::zeros(3, 3);
            for (k, &c) in cols.iter().enumerate() {
                let mut xp = x.to_vec();
                xp[c] += eps;
                let mut xm = x.to_vec();
                xm[c] -= eps;
                let yp = m.predict(&Matrix::from_vec(1, 4, xp).unwrap()).unwrap();
                let ym = m.predict(&Matrix::from_vec(1, 4, xm).unwrap()).unwrap();
                for r in 0..3 {
                    fd[(r, k)] = (yp[(0, r)] - ym[(0, r)]) / (2.0 * eps);
                }
            }
            let mut diff = j.clone();
            diff.add_assign_scaled(&fd, -1.0);
            assert!(diff.frobenius_norm() / fd.frobenius_norm() < 1e-6);
        }
    }

    #[test]
    fn logdet_gradient_matches_finite_differences() {
        for act in [
            Activation::smooth_leaky_relu(0.2),
            Activation::Linear,
            Activation::Maxout,
        ] {
            let m = Mlp::new(&[6, 6, 3], act, 13).unwrap();
            let x = random_batch(4, 6, 17);
            let w = [0.5, 1.0, 0.0, 2.0];
            let cols = [0, 1, 2];
            let report = grad_check(&m, 1e-5, |p| {
                let mut g = p.zeros_like();
                let ld = p.logdet_jacobian_grad(&x, &cols, &w, &mut g).unwrap();
                (ld.iter().zip(&w).map(|(l, w)| l * w).sum(), g)
            });
            assert!(report.max_rel_error < 1e-4, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut p = Mlp::zeros(&[1, 1], Activation::Linear).unwrap();
        let mut g = p.zeros_like();
        g.weights_mut()[0][(0, 0)] = 1.0;
        let mut opt = Momentum::new(&p, 0.1, 0.9).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.weights()[0][(0, 0)] + 0.1).abs() < 1e-15);
        opt.step(&mut p, &g).unwrap();
        assert!((p.weights()[0][(0, 0)] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_lr_and_nan_rejection() {
        let mut p = Mlp::new(&[2, 2], Activation::Linear, 1).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weights_mut()[0][(1, 1)] = 2.0;
        let mut opt = Momentum::new(&p, 0.0, 0.5).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.velocity()[0][3], 2.0);
        g.weights_mut()[0][(0, 0)] = f64::NAN;
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.velocity()[0][3], 2.0);
    }

    #[test]
    fn vanilla_step_without_momentum() {
        let mut p = Mlp::new(&[2, 1], Activation::Linear, 2).unwrap();
        let before = p.flatten();
        let mut g = p.zeros_like();
        g.assign_flat(&[0.5, -1.0, 2.0]);
        Momentum::new(&p, 0.1, 0.0).unwrap().step(&mut p, &g).unwrap();
        let after = p.flatten();
        for ((a, b), gv) in after.iter().zip(&before).zip(&[0.5, -1.0, 2.0]) {
            assert!((a - (b - 0.1 * gv)).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_grad_check() {
        let m = Mlp::new(&[3, 4, 2], Activation::leaky_relu(0.1), 3).unwrap();
        let report = grad_check(&m, 1e-5, |p| (0.5 * p.sq_norm(), p.clone()));
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = Mlp::new(&[3, 5, 2], Activation::smooth_leaky_relu(0.1), 99).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kind\":\"smooth_leaky_relu\""));
        let back: Mlp = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let bad = s.replace("[3,5,2]", "[3,4,2]");
        assert!(serde_json::from_str::<Mlp>(&bad).is_err());
    }
}
