use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Partitioned parameter theta_k = (phi, lambda_k), stored flat with the
/// common part first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    flat: Vec<f64>,
    p1: usize,
}

impl ParameterVector {
    pub fn new(common: &[f64], block: &[f64]) -> Result<Self, ModelError> {
        if common.is_empty() {
            return Err(ModelError::InvalidDimensions {
                detail: "common dimension p1 must be at least 1".into(),
            });
        }
        let mut flat = Vec::with_capacity(common.len() + block.len());
        flat.extend_from_slice(common);
        flat.extend_from_slice(block);
        Ok(ParameterVector {
            flat,
            p1: common.len(),
        })
    }

    pub fn from_flat(flat: Vec<f64>, p1: usize) -> Result<Self, ModelError> {
        if p1 == 0 || p1 > flat.len() {
            return Err(ModelError::InvalidDimensions {
                detail: format!("p1 = {p1} incompatible with flat length {}", flat.len()),
            });
        }
        Ok(ParameterVector { flat, p1 })
    }

    pub fn p(&self) -> usize {
        self.flat.len()
    }

    pub fn p1(&self) -> usize {
        self.p1
    }

    pub fn p2(&self) -> usize {
        self.flat.len() - self.p1
    }

    /// The common part phi (first p1 coordinates).
    pub fn common(&self) -> &[f64] {
        &self.flat[..self.p1]
    }

    /// The block-specific part lambda_k.
    pub fn block(&self) -> &[f64] {
        &self.flat[self.p1..]
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.flat)
    }
}

/// Box constraints for the full parameter and (possibly tighter) for the
/// common part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    common_lower: Vec<f64>,
    common_upper: Vec<f64>,
}

impl ParameterBox {
    /// Box [-radius, radius]^p with the common box as its projection.
    pub fn symmetric(p: usize, p1: usize, radius: f64) -> Self {
        assert!(p1 >= 1 && p1 <= p && radius > 0.0);
        ParameterBox {
            lower: vec![-radius; p],
            upper: vec![radius; p],
            common_lower: vec![-radius; p1],
            common_upper: vec![radius; p1],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, p1: usize) -> Result<Self, ModelError> {
        if lower.len() != upper.len() || p1 == 0 || p1 > lower.len() {
            return Err(ModelError::InvalidDimensions {
                detail: "box bounds must share a length of at least p1".into(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(ModelError::InvalidDimensions {
                detail: "box requires lower < upper elementwise".into(),
            });
        }
        let common_lower = lower[..p1].to_vec();
        let common_upper = upper[..p1].to_vec();
        Ok(ParameterBox {
            lower,
            upper,
            common_lower,
            common_upper,
        })
    }

    /// Replaces the common-part box by a tighter one.
    pub fn with_common_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        let p1 = self.common_lower.len();
        if lower.len() != p1 || upper.len() != p1 {
            return Err(ModelError::InvalidDimensions {
                detail: "common box must have length p1".into(),
            });
        }
        for j in 0..p1 {
            if lower[j] < self.lower[j] || upper[j] > self.upper[j] || !(lower[j] < upper[j]) {
                return Err(ModelError::InvalidDimensions {
                    detail: "common box must be a nonempty subset of the full box projection"
                        .into(),
                });
            }
        }
        self.common_lower = lower;
        self.common_upper = upper;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.lower.len()
    }

    pub fn p1(&self) -> usize {
        self.common_lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.lower.len()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    pub fn contains_common(&self, phi: &[f64]) -> bool {
        phi.len() == self.common_lower.len()
            && phi
                .iter()
                .zip(self.common_lower.iter().zip(&self.common_upper))
                .all(|(t, (l, u))| *t >= *l && *t <= *u)
    }

    /// Projects theta onto the box in place; returns true if any coordinate
    /// was clamped.
    pub fn project(&self, theta: &mut [f64]) -> bool {
        debug_assert_eq!(theta.len(), self.lower.len());
        let mut clamped = false;
        for j in 0..theta.len() {
            let t = theta[j].clamp(self.lower[j], self.upper[j]);
            if t != theta[j] {
                clamped = true;
                theta[j] = t;
            }
        }
        clamped
    }

    /// Uniform draw inside the box, for randomized derivative checks.
    pub fn sample_interior(&self, rng: &mut crate::rng::CounterRng) -> Vec<f64> {
        (0..self.p())
            .map(|j| {
                let u = rng.next_f64();
                self.lower[j] + u * (self.upper[j] - self.lower[j])
            })
            .collect()
    }
}
