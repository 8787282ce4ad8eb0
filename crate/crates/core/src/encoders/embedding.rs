use crate::{Error, Result};

/// Floor on the norm used by l2 normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Accepted deviation of an embedding's norm from 1.
pub const UNIT_TOL: f64 = 1e-6;

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps `values`, rejecting vectors whose norm is not 1 within [`UNIT_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes arbitrary values; see [`l2_normalize`].
    pub fn normalized(values: &[f64]) -> Self {
        l2_normalize(values).0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `v / max(|v|, NORM_EPS)` together with `|v|`.
pub fn l2_normalize(v: &[f64]) -> (Embedding, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(NORM_EPS);
    (Embedding(v.iter().map(|x| x / denom).collect()), norm)
}
