//! Gaussian-process regression with an RBF kernel.
//!
//! The kernel is `k(x, x') = exp(-||x - x'||^2 / (2 l^2))` with no amplitude
//! hyperparameter; the only fitted quantities are the length scale `l` and
//! the constant mean `mu`, chosen to maximize the log marginal likelihood by
//! bounded quasi-Newton on `(log l, mu)` from five random restarts. A fixed
//! numerical jitter keeps the kernel matrix positive definite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{AtlasError, Result};
use crate::optim::{self, LbfgsOptions};
use crate::rng::tagged_stream;

use super::Surrogate;

/// Hard cap on training points for the dense factorization.
pub const GP_RECORD_GUARD: usize = 5000;

const BASE_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GpModel {
    x_train: DMatrix<f64>, // M x N
    y_train: DVector<f64>,
    length_scale: f64,
    mean: f64,
    jitter: f64,
    alpha: DVector<f64>, // (K + jitter I)^{-1} (y - mu)
}

impl GpModel {
    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn training_size(&self) -> usize {
        self.x_train.nrows()
    }

    pub(crate) fn parts(&self) -> (&DMatrix<f64>, &DVector<f64>, f64, f64, f64) {
        (&self.x_train, &self.y_train, self.length_scale, self.mean, self.jitter)
    }

    /// Rebuilds the cached factorization from stored parameters.
    pub(crate) fn from_parts(
        x_train: DMatrix<f64>,
        y_train: DVector<f64>,
        length_scale: f64,
        mean: f64,
        jitter: f64,
    ) -> Result<Self> {
        let d2 = squared_distances(&x_train);
        let kernel = rbf_kernel(&d2, length_scale);
        let chol = cholesky_with_jitter(&kernel, jitter)
            .ok_or_else(|| AtlasError::Model("kernel matrix is not positive definite".into()))?;
        let r = y_train.map(|v| v - mean);
        let alpha = chol.0.solve(&r);
        Ok(Self { x_train, y_train, length_scale, mean, jitter: chol.1, alpha })
    }
}

impl Surrogate for GpModel {
    fn n_controls(&self) -> usize {
        self.x_train.ncols()
    }

    fn predict_one(&self, controls: &[f64]) -> Result<f64> {
        if controls.len() != self.n_controls() {
            return Err(AtlasError::Model(format!(
                "input has {} controls, model expects {}",
                controls.len(),
                self.n_controls()
            )));
        }
        let inv_2l2 = 0.5 / (self.length_scale * self.length_scale);
        let mut acc = self.mean;
        for i in 0..self.x_train.nrows() {
            let mut d2 = 0.0;
            for j in 0..controls.len() {
                let d = self.x_train[(i, j)] - controls[j];
                d2 += d * d;
            }
            acc += (-d2 * inv_2l2).exp() * self.alpha[i];
        }
        Ok(acc)
    }
}

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows();
    let mut d2 = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let mut acc = 0.0;
            for c in 0..x.ncols() {
                let d = x[(i, c)] - x[(j, c)];
                acc += d * d;
            }
            d2[(i, j)] = acc;
            d2[(j, i)] = acc;
        }
    }
    d2
}

fn rbf_kernel(d2: &DMatrix<f64>, length_scale: f64) -> DMatrix<f64> {
    let inv_2l2 = 0.5 / (length_scale * length_scale);
    d2.map(|v| (-v * inv_2l2).exp())
}

/// Cholesky of K + jitter I, escalating the jitter tenfold up to the cap.
fn cholesky_with_jitter(kernel: &DMatrix<f64>, start: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = start.max(BASE_JITTER);
    while jitter <= MAX_JITTER {
        let mut k = kernel.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Some((chol, jitter));
        }
        jitter *= 10.0;
    }
    None
}

struct LmlEvaluation {
    neg_lml: f64,
    grad_log_l: f64,
    grad_mu: f64,
    jitter: f64,
}

/// Negative log marginal likelihood and its gradient in (log l, mu).
fn neg_lml(d2: &DMatrix<f64>, y: &DVector<f64>, log_l: f64, mu: f64) -> Result<LmlEvaluation> {
    let m = y.len() as f64;
    let l = log_l.exp();
    let kernel = rbf_kernel(d2, l);
    let (chol, jitter) = cholesky_with_jitter(&kernel, BASE_JITTER)
        .ok_or_else(|| AtlasError::Model("kernel matrix is not positive definite after jitter escalation".into()))?;
    let r = y.map(|v| v - mu);
    let alpha = chol.solve(&r);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let lml = -0.5 * r.dot(&alpha) - 0.5 * logdet - 0.5 * m * (2.0 * std::f64::consts::PI).ln();

    // dK/dl = K_rbf o D^2 / l^3 (zero on the diagonal).
    let kinv = chol.inverse();
    let inv_l3 = 1.0 / (l * l * l);
    let mut quad = 0.0;
    let mut trace = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            let dk = kernel[(i, j)] * d2[(i, j)] * inv_l3;
            quad += alpha[i] * dk * alpha[j];
            trace += kinv[(i, j)] * dk;
        }
    }
    let dlml_dl = 0.5 * quad - 0.5 * trace;
    let dlml_dmu = alpha.sum();
    Ok(LmlEvaluation {
        neg_lml: -lml,
        grad_log_l: -dlml_dl * l,
        grad_mu: -dlml_dmu,
        jitter,
    })
}

/// Fits (l, mu) by maximizing the marginal likelihood from `restarts` random
/// starts with l log-uniform in [1e-2, 1e2] * sqrt(N) * u_max.
pub fn fit_gp(train: &Dataset, restarts: usize, fit_seed: u64) -> Result<GpModel> {
    let m = train.len();
    let n = train.n_controls();
    if m == 0 {
        return Err(AtlasError::Model("GP fit needs a nonempty training set".into()));
    }
    if m > GP_RECORD_GUARD {
        return Err(AtlasError::Model(format!(
            "GP fit limited to {GP_RECORD_GUARD} records for dense factorization, got {m}; subsample first"
        )));
    }

    let mut x_train = DMatrix::zeros(m, n);
    let mut y_train = DVector::zeros(m);
    for (i, rec) in train.records().iter().enumerate() {
        for (j, &u) in rec.controls.iter().enumerate() {
            x_train[(i, j)] = u;
        }
        y_train[i] = rec.infidelity;
    }
    let d2 = squared_distances(&x_train);
    let y_mean = y_train.mean();

    let scale = (n as f64).sqrt() * train.u_max();
    let (log_lo, log_hi) = ((1e-2 * scale).ln(), (1e2 * scale).ln());
    let lower = [log_lo, -10.0];
    let upper = [log_hi, 10.0];
    let opts = LbfgsOptions { max_iterations: 60, gradient_tolerance: 1e-6, history_size: 10 };

    let mut rng = tagged_stream(fit_seed, "gp-fit");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..restarts.max(1) {
        let start = [rng.gen_range(log_lo..log_hi), y_mean];
        let outcome = optim::minimize(
            |p: &[f64]| {
                let eval = neg_lml(&d2, &y_train, p[0], p[1])?;
                Ok((eval.neg_lml, vec![eval.grad_log_l, eval.grad_mu]))
            },
            &start,
            &lower,
            &upper,
            &opts,
            |_, _| {},
        );
        match outcome {
            Ok(out) => {
                if best.as_ref().map_or(true, |(f, _)| out.f < *f) {
                    best = Some((out.f, out.x));
                }
            }
            Err(e) => log::warn!("GP restart failed: {e}"),
        }
    }
    let (_, params) = best.ok_or_else(|| AtlasError::Model("all GP restarts failed".into()))?;
    let jitter = neg_lml(&d2, &y_train, params[0], params[1])?.jitter;
    GpModel::from_parts(x_train, y_train, params[0].exp(), params[1], jitter)
}
