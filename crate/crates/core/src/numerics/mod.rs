//! Dense linear algebra, decompositions and the seeded random source.
//!
//! Everything here is pure and single-threaded; results are bitwise
//! reproducible for identical inputs.

mod matrix;
mod rng;
mod svd;

pub use matrix::{l1_entrywise, matmul, softmax_rows, Matrix};
pub use rng::Rng;
pub use svd::{explained_variance_ratio, svd, SvdResult, MAX_SWEEPS};

use crate::error::{PegoError, Result};

/// `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(PegoError::Shape {
            op: "cosine_similarity",
            left: (u.len(), 1),
            right: (v.len(), 1),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(PegoError::Degenerate("cosine similarity with a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
