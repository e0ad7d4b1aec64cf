use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::series::TimeSeries;

/// Real triples `(x_t, x_{t−1}, u_t)` (class 1) paired with copies whose
/// `u` column is permuted (class 0).
///
/// Both classes share the observation part, so a row index `r` names one
/// real and one shuffled triple.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveDataset {
    /// Row `r` is `[x_t, x_{t−1}, …, x_{t−p}]` for `t = p + r`.
    pub inputs: Matrix,
    pub n: usize,
    pub order: usize,
    /// Auxiliary label of each real triple.
    pub u: Vec<usize>,
    /// Auxiliary label attached to the shuffled copy of each triple.
    pub u_perm: Vec<usize>,
}

impl ContrastiveDataset {
    /// Triples per class.
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// All labelled triples as `(row, u, class)`: real ones first.
    pub fn labelled(&self) -> impl Iterator<Item = (usize, usize, u8)> + '_ {
        let real = self.u.iter().enumerate().map(|(r, &u)| (r, u, 1u8));
        let fake = self.u_perm.iter().enumerate().map(|(r, &u)| (r, u, 0u8));
        real.chain(fake)
    }
}

/// Builds the real and `u`-shuffled triple sets with lag order `p`.
///
/// The shuffled labels are a seeded permutation of the real label column;
/// the identity permutation is rejected and redrawn.
pub fn build_contrastive_dataset(x: &TimeSeries, u: &[usize], order: usize, seed: u64) -> Result<ContrastiveDataset> {
    if u.len() != x.len() {
        return Err(shape_err(format!("{} labels", x.len()), u.len()));
    }
    if x.len() < 3 || x.len() < order + 2 {
        return Err(Error::InvalidConfig(format!(
            "contrastive dataset needs at least max(3, p + 2) points, got {}",
            x.len()
        )));
    }
    let inputs = x.lagged(order, true)?;
    let labels: Vec<usize> = u[order..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    let u_perm = perm.iter().map(|&p| labels[p]).collect();
    Ok(ContrastiveDataset {
        inputs,
        n: x.dim(),
        order,
        u: labels,
        u_perm,
    })
}
