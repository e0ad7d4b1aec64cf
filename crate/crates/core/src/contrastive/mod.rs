//! Self-supervised innovation estimators: IIA-GCL (real vs. u-shuffled
//! triples) and IIA-TCL (segment classification), with NICA ablations that
//! drop every dependence on past observations.

mod dataset;
mod gcl;
mod tcl;

pub use dataset::{build_contrastive_dataset, ContrastiveDataset};
pub use gcl::{gcl_loss_grad, train_gcl, FourierBasis, GclConfig, GclModel};
pub use tcl::{tcl_loss_grad, train_tcl, TclConfig, TclModel, TclOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{Activation, Mlp};
use crate::series::TimeSeries;
use crate::train::Standardizer;

/// Shape of the feature networks `h` and `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetArch {
    /// Affine layers per network; 1 makes both networks linear.
    pub layers: usize,
    /// Hidden width as a multiple of `n`.
    pub width_factor: usize,
    pub activation: Activation,
    /// Autoregressive order `p` of the inputs.
    pub order: usize,
    /// Drop `x_{t−1..t−p}` from `h` and remove `φ` entirely.
    pub nica: bool,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            layers: 1,
            width_factor: 4,
            activation: Activation::Maxout,
            order: 1,
            nica: false,
        }
    }
}

impl NetArch {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width_factor == 0 {
            return Err(Error::InvalidConfig("layers and width_factor must be >= 1".into()));
        }
        if self.order == 0 || self.order > 3 {
            return Err(Error::InvalidConfig(format!(
                "order must lie in 1..=3, got {}",
                self.order
            )));
        }
        Ok(())
    }

    fn dims(&self, input: usize, n: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.width_factor * n, self.layers - 1));
        dims.push(n);
        dims
    }

    /// Input width of `h`: `(p + 1)·n`, or `n` in NICA mode.
    pub fn h_input(&self, n: usize) -> usize {
        if self.nica {
            n
        } else {
            (self.order + 1) * n
        }
    }

    pub fn h_net(&self, n: usize, seed: u64) -> Result<Mlp> {
        self.validate()?;
        Mlp::new(&self.dims(self.h_input(n), n), self.activation, seed)
    }

    /// `φ` takes the `p` lagged observations; absent in NICA mode.
    pub fn phi_net(&self, n: usize, seed: u64) -> Result<Option<Mlp>> {
        self.validate()?;
        if self.nica {
            return Ok(None);
        }
        Mlp::new(&self.dims(self.order * n, n), self.activation, seed).map(Some)
    }
}

/// Fixed sufficient statistics `ψ(y) = (y², y)` per unit, interleaved.
pub(crate) fn psi(y: &Matrix) -> Matrix {
    let n = y.cols();
    let mut out = Matrix::zeros(y.rows(), 2 * n);
    for r in 0..y.rows() {
        let src = y.row(r);
        let dst = out.row_mut(r);
        for i in 0..n {
            dst[2 * i] = src[i] * src[i];
            dst[2 * i + 1] = src[i];
        }
    }
    out
}

/// Chain rule through `ψ`: `∂/∂y_i = 2·y_i·g_{i1} + g_{i2}`.
pub(crate) fn psi_backward(y: &Matrix, dpsi: &Matrix) -> Matrix {
    Matrix::from_fn(y.rows(), y.cols(), |r, i| {
        2.0 * y[(r, i)] * dpsi[(r, 2 * i)] + dpsi[(r, 2 * i + 1)]
    })
}

/// Folds the observation standardisation into trained networks.
pub(crate) fn fold_standardizer(st: &Standardizer, arch: &NetArch, h: &mut Mlp, phi: Option<&mut Mlp>) -> Result<()> {
    let h_tiles = if arch.nica { 1 } else { arch.order + 1 };
    st.tile(h_tiles).fold_into_input(h)?;
    if let Some(phi) = phi {
        st.tile(arch.order).fold_into_input(phi)?;
    }
    Ok(())
}

/// `ŝ_t = h(x_t, x_{t−1}, …, x_{t−p})` for `t = p..N`; `h`'s input width
/// decides between NICA (`n`) and lagged inputs (`(p + 1)·n`).
pub fn extract_innovations(h_net: &Mlp, x: &TimeSeries, order: usize) -> Result<TimeSeries> {
    let n = x.dim();
    let width = h_net.input_dim();
    if width != n && width != (order + 1) * n {
        return Err(shape_err(format!("h input width {n} or {}", (order + 1) * n), width));
    }
    if x.len() <= order {
        return Err(shape_err(format!("more than {order} time points"), x.len()));
    }
    let rows = x.lagged(order, true)?;
    let inputs = if width == n {
        rows.select_cols(&(0..n).collect::<Vec<_>>())
    } else {
        rows
    };
    Ok(TimeSeries::new(h_net.predict(&inputs)?))
}
