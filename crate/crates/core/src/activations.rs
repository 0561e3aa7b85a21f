//! Fixed (input-independent) activation functions: ReLU, polynomial
//! evaluation by Horner's scheme, and truncated-Taylor presets for
//! sigmoid and tanh.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A polynomial `Σ_k coeffs[k]·u^k`; index is the order, so the vector
/// has `K+1` entries for order `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs<S> {
    coeffs: Vec<S>,
}

impl<S: Scalar> PolyCoeffs<S> {
    pub fn new(coeffs: Vec<S>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Config("polynomial needs at least one coefficient".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("polynomial coefficients must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    /// `y = x` padded to order `k`: `[0, 1, 0, ...]`.
    pub fn identity(k: usize) -> Self {
        let mut coeffs = vec![S::zero(); k + 1];
        if k >= 1 {
            coeffs[1] = S::one();
        }
        Self { coeffs }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    /// Horner evaluation at a single point.
    pub fn eval_scalar(&self, u: S) -> S {
        let mut acc = self.coeffs[self.coeffs.len() - 1];
        for &c in self.coeffs.iter().rev().skip(1) {
            acc = acc * u + c;
        }
        acc
    }

    /// Elementwise Horner evaluation.
    pub fn eval(&self, u: &Tensor<S>) -> Tensor<S> {
        u.map(|v| self.eval_scalar(v))
    }

    pub fn coeffs_f64(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.as_f64()).collect()
    }
}

/// Activation functions with a known truncated Taylor expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaylorPreset {
    Sigmoid,
    Tanh,
}

impl std::str::FromStr for TaylorPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation preset {other:?}"))),
        }
    }
}

/// Truncated Taylor coefficients of sigmoid or tanh around zero,
/// zero-padded to order `k`.
///
/// sigmoid: `1/2 + u/4 - u^3/48 + u^5/480`
/// tanh:    `u - u^3/3 + 2u^5/15 - 17u^7/315`
pub fn taylor_preset<S: Scalar>(preset: TaylorPreset, k: usize) -> Result<PolyCoeffs<S>> {
    if k < 5 {
        return Err(Error::Config(format!(
            "taylor preset needs order >= 5, got {k}"
        )));
    }
    let mut coeffs = vec![0.0f64; k + 1];
    match preset {
        TaylorPreset::Sigmoid => {
            coeffs[0] = 0.5;
            coeffs[1] = 0.25;
            coeffs[3] = -1.0 / 48.0;
            coeffs[5] = 1.0 / 480.0;
        }
        TaylorPreset::Tanh => {
            coeffs[1] = 1.0;
            coeffs[3] = -1.0 / 3.0;
            coeffs[5] = 2.0 / 15.0;
            if k >= 7 {
                coeffs[7] = -17.0 / 315.0;
            }
        }
    }
    PolyCoeffs::new(coeffs.into_iter().map(S::from_f64).collect())
}

/// `max(u, 0)` elementwise; the subgradient at 0 is taken as 0.
pub fn relu<S: Scalar>(u: &Tensor<S>) -> Tensor<S> {
    u.map(|v| if v > S::zero() { v } else { S::zero() })
}
