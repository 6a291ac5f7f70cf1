//! Affine baseline model C(u) = w^T u + b, fit by least squares.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{AtlasError, Result};

use super::Surrogate;

const RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    w: Vec<f64>,
    b: f64,
}

impl LinearModel {
    pub fn from_parts(w: Vec<f64>, b: f64) -> Self {
        Self { w, b }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> f64 {
        self.b
    }
}

impl Surrogate for LinearModel {
    fn n_controls(&self) -> usize {
        self.w.len()
    }

    fn predict_one(&self, controls: &[f64]) -> Result<f64> {
        if controls.len() != self.w.len() {
            return Err(AtlasError::Model(format!(
                "input has {} controls, model expects {}",
                controls.len(),
                self.w.len()
            )));
        }
        Ok(self.b + self.w.iter().zip(controls).map(|(w, u)| w * u).sum::<f64>())
    }
}

/// Solves the normal equations (A^T A + ridge I) theta = A^T y for the
/// design matrix A = [U | 1]. Requires at least N + 1 records.
pub fn fit_linear(train: &Dataset) -> Result<LinearModel> {
    let n = train.n_controls();
    let m = train.len();
    if m < n + 1 {
        return Err(AtlasError::Model(format!(
            "linear fit needs at least N + 1 = {} records, got {m}",
            n + 1
        )));
    }
    let mut a = DMatrix::zeros(m, n + 1);
    let mut y = DVector::zeros(m);
    for (i, rec) in train.records().iter().enumerate() {
        for (j, &u) in rec.controls.iter().enumerate() {
            a[(i, j)] = u;
        }
        a[(i, n)] = 1.0;
        y[i] = rec.infidelity;
    }
    let mut ata = a.tr_mul(&a);
    for i in 0..=n {
        ata[(i, i)] += RIDGE;
    }
    let aty = a.tr_mul(&y);
    let theta = ata
        .cholesky()
        .map(|c| c.solve(&aty))
        .ok_or_else(|| AtlasError::Model("normal equations are not positive definite".into()))?;
    let w = theta.as_slice()[..n].to_vec();
    Ok(LinearModel { w, b: theta[n] })
}
