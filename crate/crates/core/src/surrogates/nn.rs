//! Deep feedforward surrogate: a linear input layer, five ReLU hidden
//! layers of width 20N, and a linear scalar output, trained with mini-batch
//! Adam on the mean squared error. Controls are scaled to u/u_max before
//! entering the network; targets are raw infidelities.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{AtlasError, Result};
use crate::rng::tagged_stream;

use super::Surrogate;

/// Training hyperparameters. The learning rate, batch size, and loss follow
/// the reference protocol; the early-stopping rule (10% internal holdout,
/// patience in epochs) and the seeds are documented choices of this crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub shuffle_seed: u64,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 16,
            max_epochs: 2000,
            patience: 20,
            holdout_fraction: 0.1,
            shuffle_seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(AtlasError::Model("training config values must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(AtlasError::Model("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct NeuralNet {
    weights: Vec<Array2<f64>>, // (fan_in, fan_out) per layer
    biases: Vec<Array1<f64>>,
    relu: Vec<bool>,
    u_max: f64,
    adam: Option<AdamState>,
}

pub const HIDDEN_LAYERS: usize = 5;
pub const WIDTH_PER_STEP: usize = 20;

impl NeuralNet {
    /// Standard architecture for an N-step control problem: N -> 20N
    /// (linear), five 20N -> 20N ReLU layers, 20N -> 1 (linear).
    pub fn for_problem(n: usize, u_max: f64, init_seed: u64) -> Self {
        let width = WIDTH_PER_STEP * n;
        let mut dims = vec![n, width];
        dims.extend(std::iter::repeat(width).take(HIDDEN_LAYERS));
        dims.push(1);
        let mut relu = vec![false];
        relu.extend(std::iter::repeat(true).take(HIDDEN_LAYERS));
        relu.push(false);
        Self::initialized(&dims, relu, u_max, init_seed)
    }

    /// Arbitrary layer sizes; used by tests and the model loader.
    pub fn initialized(dims: &[usize], relu: Vec<bool>, u_max: f64, init_seed: u64) -> Self {
        assert!(dims.len() >= 2 && relu.len() == dims.len() - 1);
        let mut rng = tagged_stream(init_seed, "nn-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            // He-style scaled uniform fan-in initialization.
            let bound = (6.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Self { weights, biases, relu, u_max, adam: None }
    }

    pub fn from_layers(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        relu: Vec<bool>,
        u_max: f64,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != relu.len() {
            return Err(AtlasError::Model("inconsistent layer lists".into()));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(AtlasError::Model(format!("layer {i}: bias/width mismatch")));
            }
            if i > 0 && weights[i - 1].ncols() != w.nrows() {
                return Err(AtlasError::Model(format!("layer {i}: fan-in mismatch")));
            }
        }
        if weights.last().unwrap().ncols() != 1 {
            return Err(AtlasError::Model("output layer must be scalar".into()));
        }
        Ok(Self { weights, biases, relu, u_max, adam: None })
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut dims = vec![self.weights[0].nrows()];
        dims.extend(self.weights.iter().map(|w| w.ncols()));
        dims
    }

    pub fn relu_flags(&self) -> &[bool] {
        &self.relu
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub(crate) fn layers(&self) -> (&[Array2<f64>], &[Array1<f64>]) {
        (&self.weights, &self.biases)
    }

    pub fn set_zero_weights(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn output_bias(&self) -> f64 {
        self.biases.last().unwrap()[0]
    }

    /// Forward pass on pre-scaled inputs (rows are u/u_max).
    fn forward_scaled(&self, x: &Array2<f64>) -> Array1<f64> {
        let mut a = x.clone();
        for ((w, b), &is_relu) in self.weights.iter().zip(&self.biases).zip(&self.relu) {
            let mut z = a.dot(w);
            z += b;
            a = if is_relu { z.mapv(|v| v.max(0.0)) } else { z };
        }
        a.index_axis(Axis(1), 0).to_owned()
    }

    /// Loss and parameter gradients for one mini-batch of scaled inputs.
    fn backward(&self, x: &Array2<f64>, y: &Array1<f64>) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut pre_acts = Vec::with_capacity(layers);
        activations.push(x.clone());
        for ((w, b), &is_relu) in self.weights.iter().zip(&self.biases).zip(&self.relu) {
            let mut z = activations.last().unwrap().dot(w);
            z += b;
            let a = if is_relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre_acts.push(z);
            activations.push(a);
        }
        let batch = x.nrows() as f64;
        let pred = activations.last().unwrap().index_axis(Axis(1), 0);
        let residual = &pred - y;
        let loss = residual.mapv(|r| r * r).sum() / batch;

        // delta for the output layer: dL/dz = 2 r / batch (output is linear).
        let mut delta = residual
            .mapv(|r| 2.0 * r / batch)
            .insert_axis(Axis(1));
        let mut grads_w = vec![Array2::zeros((0, 0)); layers];
        let mut grads_b = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            grads_w[l] = activations[l].t().dot(&delta);
            grads_b[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l].t());
                if self.relu[l - 1] {
                    back.zip_mut_with(&pre_acts[l - 1], |d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                delta = back;
            }
        }
        (loss, grads_w, grads_b)
    }

    fn adam_step(&mut self, lr: f64, grads_w: Vec<Array2<f64>>, grads_b: Vec<Array1<f64>>) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if self.adam.is_none() {
            self.adam = Some(AdamState {
                m_w: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
                v_w: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
                m_b: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
                v_b: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
                step: 0,
            });
        }
        let state = self.adam.as_mut().unwrap();
        state.step += 1;
        let bc1 = 1.0 - BETA1.powi(state.step as i32);
        let bc2 = 1.0 - BETA2.powi(state.step as i32);
        for l in 0..self.weights.len() {
            state.m_w[l].zip_mut_with(&grads_w[l], |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            state.v_w[l].zip_mut_with(&grads_w[l], |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            ndarray::Zip::from(&mut self.weights[l])
                .and(&state.m_w[l])
                .and(&state.v_w[l])
                .for_each(|w, &m, &v| *w -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS));
            state.m_b[l].zip_mut_with(&grads_b[l], |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            state.v_b[l].zip_mut_with(&grads_b[l], |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            ndarray::Zip::from(&mut self.biases[l])
                .and(&state.m_b[l])
                .and(&state.v_b[l])
                .for_each(|b, &m, &v| *b -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS));
        }
    }

    fn mse_on(&self, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let pred = self.forward_scaled(x);
        (&pred - y).mapv(|r| r * r).mean().unwrap_or(f64::NAN)
    }
}

impl Surrogate for NeuralNet {
    fn n_controls(&self) -> usize {
        self.weights[0].nrows()
    }

    fn predict_one(&self, controls: &[f64]) -> Result<f64> {
        if controls.len() != self.n_controls() {
            return Err(AtlasError::Model(format!(
                "input has {} controls, model expects {}",
                controls.len(),
                self.n_controls()
            )));
        }
        let scaled: Vec<f64> = controls.iter().map(|u| u / self.u_max).collect();
        let x = Array2::from_shape_vec((1, controls.len()), scaled).unwrap();
        Ok(self.forward_scaled(&x)[0])
    }

    fn predict(&self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.n_controls();
        let mut x = Array2::zeros((batch.len(), n));
        for (i, row) in batch.iter().enumerate() {
            if row.len() != n {
                return Err(AtlasError::Model(format!(
                    "batch row {i} has {} controls, model expects {n}",
                    row.len()
                )));
            }
            for (j, &u) in row.iter().enumerate() {
                x[(i, j)] = u / self.u_max;
            }
        }
        Ok(self.forward_scaled(&x).to_vec())
    }
}

fn dataset_arrays(ds: &Dataset) -> (Array2<f64>, Array1<f64>) {
    let n = ds.n_controls();
    let u_max = ds.u_max();
    let mut x = Array2::zeros((ds.len(), n));
    let mut y = Array1::zeros(ds.len());
    for (i, rec) in ds.records().iter().enumerate() {
        for (j, &u) in rec.controls.iter().enumerate() {
            x[(i, j)] = u / u_max;
        }
        y[i] = rec.infidelity;
    }
    (x, y)
}

fn gather(x: &Array2<f64>, y: &Array1<f64>, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
    let mut xs = Array2::zeros((idx.len(), x.ncols()));
    let mut ys = Array1::zeros(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        xs.row_mut(row).assign(&x.row(i));
        ys[row] = y[i];
    }
    (xs, ys)
}

/// Trains the standard architecture on `train`, with early stopping on an
/// internal holdout. Deterministic given the config seeds; returns the
/// weights with the best monitored loss.
pub fn fit_nn(train: &Dataset, config: &TrainConfig) -> Result<NeuralNet> {
    config.validate()?;
    if train.is_empty() {
        return Err(AtlasError::Model("NN fit needs a nonempty training set".into()));
    }
    let (x_all, y_all) = dataset_arrays(train);
    let m = x_all.nrows();

    let mut rng = tagged_stream(config.shuffle_seed, "nn-shuffle");
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_hold = ((config.holdout_fraction * m as f64).round() as usize).min(m - 1);
    let (hold_idx, fit_idx) = order.split_at(n_hold);
    let (x_fit, y_fit) = gather(&x_all, &y_all, fit_idx);
    let holdout = if n_hold > 0 { Some(gather(&x_all, &y_all, hold_idx)) } else { None };

    let mut net = NeuralNet::for_problem(train.n_controls(), train.u_max(), config.init_seed);
    let m_fit = x_fit.nrows();
    let mut best_loss = f64::INFINITY;
    let mut best_net = net.clone();
    let mut epochs_without_improvement = 0usize;
    let mut batch_order: Vec<usize> = (0..m_fit).collect();

    for epoch in 0..config.max_epochs {
        for i in (1..m_fit).rev() {
            batch_order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in batch_order.chunks(config.batch_size) {
            let (xb, yb) = gather(&x_fit, &y_fit, chunk);
            let (loss, gw, gb) = net.backward(&xb, &yb);
            if !loss.is_finite() {
                return Err(AtlasError::Model(format!(
                    "training diverged (non-finite loss) at epoch {epoch}"
                )));
            }
            net.adam_step(config.learning_rate, gw, gb);
        }
        let monitored = match &holdout {
            Some((xh, yh)) => net.mse_on(xh, yh),
            None => net.mse_on(&x_fit, &y_fit),
        };
        if !monitored.is_finite() {
            return Err(AtlasError::Model(format!(
                "training diverged (non-finite holdout loss) at epoch {epoch}"
            )));
        }
        if monitored < best_loss {
            best_loss = monitored;
            best_net = net.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= config.patience {
                break;
            }
        }
    }
    best_net.adam = None;
    Ok(best_net)
}

/// One point of the training-size scaling curve.
#[derive(Debug, Clone, Serialize)]
pub struct TrainingSizeCurve {
    pub points: Vec<(usize, f64)>,
    /// Least-squares slope of log(error) vs log(M), excluding the smallest M.
    pub slope: Option<f64>,
}

/// Fits the network at each training-set size in `sizes` (subsampled with a
/// fixed seed) and evaluates on the common validation set.
pub fn training_size_curve(
    train: &Dataset,
    valid: &Dataset,
    sizes: &[usize],
    config: &TrainConfig,
    subsample_seed: u64,
) -> Result<TrainingSizeCurve> {
    if sizes.is_empty() {
        return Err(AtlasError::Model("no training sizes given".into()));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let subset = train.subsample(m, subsample_seed)?;
        let net = fit_nn(&subset, config)?;
        let mae = super::evaluate(&net, valid)?;
        points.push((m, mae));
    }
    let mut sorted = points.clone();
    sorted.sort_by_key(|&(m, _)| m);
    let slope = if sorted.len() >= 3 {
        let tail = &sorted[1..];
        let xs: Vec<f64> = tail.iter().map(|&(m, _)| (m as f64).ln()).collect();
        let ys: Vec<f64> = tail.iter().map(|&(_, e)| e.max(1e-300).ln()).collect();
        let xm = xs.iter().sum::<f64>() / xs.len() as f64;
        let ym = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        let den: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
        Some(num / den)
    } else {
        None
    };
    Ok(TrainingSizeCurve { points, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::test_support::synthetic_dataset;

    #[test]
    fn architecture_matches_contract() {
        let net = NeuralNet::for_problem(20, 1.0, 0);
        assert_eq!(net.layer_widths(), vec![20, 400, 400, 400, 400, 400, 400, 1]);
        assert_eq!(net.relu_flags(), &[false, true, true, true, true, true, false]);
    }

    #[test]
    fn zero_weights_output_the_output_bias() {
        let mut net = NeuralNet::for_problem(4, 1.0, 0);
        net.set_zero_weights();
        net.biases.last_mut().unwrap()[0] = 0.73;
        for probe in [[0.0; 4], [0.5; 4], [-1.0; 4]] {
            assert_eq!(net.predict_one(&probe).unwrap(), 0.73);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut net = NeuralNet::initialized(&[3, 4, 4, 1], vec![false, true, false], 1.0, 5);
        // Nonzero biases so no ReLU sits exactly at its kink.
        for b in &mut net.biases {
            b.fill(0.17);
        }
        let x = Array2::from_shape_vec((5, 3), vec![
            0.3, -0.2, 0.5, 0.1, 0.9, -0.7, -0.4, 0.2, 0.6, 0.8, -0.1, 0.05, -0.9, 0.4, 0.3,
        ])
        .unwrap();
        let y = Array1::from_vec(vec![0.2, 0.6, 0.1, 0.9, 0.4]);
        let (_, gw, gb) = net.backward(&x, &y);
        let h = 1e-6;
        for l in 0..net.weights.len() {
            for idx in [(0, 0), (net.weights[l].nrows() - 1, net.weights[l].ncols() - 1)] {
                let orig = net.weights[l][idx];
                net.weights[l][idx] = orig + h;
                let up = net.mse_on(&x, &y);
                net.weights[l][idx] = orig - h;
                let dn = net.mse_on(&x, &y);
                net.weights[l][idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let rel = (gw[l][idx] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "layer {l} weight {idx:?}: {} vs fd {fd}", gw[l][idx]);
            }
            let orig = net.biases[l][0];
            net.biases[l][0] = orig + h;
            let up = net.mse_on(&x, &y);
            net.biases[l][0] = orig - h;
            let dn = net.mse_on(&x, &y);
            net.biases[l][0] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((gb[l][0] - fd).abs() / fd.abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn memorizes_a_tiny_dataset() {
        let ds = synthetic_dataset(2, 10, 30, |u| 0.5 + 0.3 * u[0] - 0.2 * u[1] * u[1]);
        let config = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 4000,
            patience: usize::MAX,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let net = fit_nn(&ds, &config).unwrap();
        let (x, y) = dataset_arrays(&ds);
        let mse = net.mse_on(&x, &y);
        assert!(mse < 1e-6, "training mse = {mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synthetic_dataset(2, 40, 31, |u| 0.5 + 0.2 * u[0]);
        let config = TrainConfig { max_epochs: 5, learning_rate: 1e-3, ..Default::default() };
        let a = fit_nn(&ds, &config).unwrap();
        let b = fit_nn(&ds, &config).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn curve_is_deterministic_per_subsample() {
        let ds = synthetic_dataset(2, 60, 32, |u| 0.5 + 0.1 * u[0] * u[1]);
        let valid = synthetic_dataset(2, 20, 33, |u| 0.5 + 0.1 * u[0] * u[1]);
        let config = TrainConfig { max_epochs: 3, learning_rate: 1e-3, ..Default::default() };
        let c1 = training_size_curve(&ds, &valid, &[20, 40], &config, 9).unwrap();
        let c2 = training_size_curve(&ds, &valid, &[20, 40], &config, 9).unwrap();
        assert_eq!(c1.points, c2.points);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let ds = synthetic_dataset(2, 5, 34, |_| 0.5).subsample(0, 0).unwrap();
        assert!(fit_nn(&ds, &TrainConfig::default()).is_err());
    }
}
