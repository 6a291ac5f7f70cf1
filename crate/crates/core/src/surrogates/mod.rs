//! Landscape surrogates: linear least squares, Gaussian-process regression,
//! and a deep feedforward network, under one predict/evaluate contract.

mod gp;
mod io;
mod linear;
mod nn;

pub use gp::{fit_gp, GpModel, GP_RECORD_GUARD};
pub use io::{load_model, save_model, ModelFamily};
pub use linear::{fit_linear, LinearModel};
pub use nn::{fit_nn, training_size_curve, NeuralNet, TrainConfig, TrainingSizeCurve};

use crate::dataset::Dataset;
use crate::error::{AtlasError, Result};

/// Common prediction surface. Predictions are pure: same input, same output.
pub trait Surrogate {
    fn n_controls(&self) -> usize;

    fn predict_one(&self, controls: &[f64]) -> Result<f64>;

    fn predict(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        batch.iter().map(|u| self.predict_one(u)).collect()
    }
}

/// A fitted model of any family.
#[derive(Debug, Clone)]
pub enum Model {
    Linear(LinearModel),
    Gp(GpModel),
    Nn(NeuralNet),
}

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Linear(_) => ModelFamily::Linear,
            Model::Gp(_) => ModelFamily::Gp,
            Model::Nn(_) => ModelFamily::Nn,
        }
    }
}

impl Surrogate for Model {
    fn n_controls(&self) -> usize {
        match self {
            Model::Linear(m) => m.n_controls(),
            Model::Gp(m) => m.n_controls(),
            Model::Nn(m) => m.n_controls(),
        }
    }

    fn predict_one(&self, controls: &[f64]) -> Result<f64> {
        match self {
            Model::Linear(m) => m.predict_one(controls),
            Model::Gp(m) => m.predict_one(controls),
            Model::Nn(m) => m.predict_one(controls),
        }
    }

    fn predict(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Model::Linear(m) => m.predict(batch),
            Model::Gp(m) => m.predict(batch),
            Model::Nn(m) => m.predict(batch),
        }
    }
}

/// Mean absolute error between predicted and actual infidelities.
pub fn evaluate<S: Surrogate + ?Sized>(model: &S, valid: &Dataset) -> Result<f64> {
    if valid.is_empty() {
        return Err(AtlasError::Model("validation set is empty".into()));
    }
    if valid.n_controls() != model.n_controls() {
        return Err(AtlasError::Model(format!(
            "validation set has N = {}, model expects {}",
            valid.n_controls(),
            model.n_controls()
        )));
    }
    let mut total = 0.0;
    for rec in valid.records() {
        total += (model.predict_one(&rec.controls)? - rec.infidelity).abs();
    }
    Ok(total / valid.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use test_support::synthetic_dataset;

    #[test]
    fn evaluate_is_zero_for_a_perfect_predictor() {
        let ds = synthetic_dataset(3, 50, 1, |u| 0.4 + 0.1 * u[0]);
        let model = fit_linear(&ds).unwrap();
        let mae = evaluate(&model, &ds).unwrap();
        assert!(mae < 1e-10, "mae = {mae}");
    }

    #[test]
    fn evaluate_reports_a_constant_offset_exactly() {
        let ds = synthetic_dataset(2, 30, 2, |_| 0.5);
        let delta = 0.07;
        let model = LinearModel::from_parts(vec![0.0, 0.0], 0.5 + delta);
        let mae = evaluate(&model, &ds).unwrap();
        assert!((mae - delta).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty_validation() {
        let ds = synthetic_dataset(2, 30, 3, |_| 0.5);
        let model = fit_linear(&ds).unwrap();
        let empty = ds.subsample(0, 0).unwrap();
        assert!(evaluate(&model, &empty).is_err());
    }
}
