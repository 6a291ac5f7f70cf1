//! Landscape-structure analysis: 2D cuts through the infidelity landscape,
//! per-duration difficulty measures, and the speed-limit estimate.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::grape::Trajectory;
use crate::spin::{self, Pulse, SpinChainSpec};
use crate::surrogates::Surrogate;

/// Threshold under which two normalized pulses count as the same optimum.
pub const DISTINCT_THRESHOLD: f64 = 1e-9;

/// Default infidelity threshold for the speed-limit estimate.
pub const QSL_EPSILON: f64 = 1e-3;

/// A planar slice spanned by three anchor pulses:
/// v(alpha, beta) = v1 + alpha (v2 - v1) + beta (v3 - v1).
#[derive(Debug, Clone)]
pub struct CutSpec {
    pub v1: Pulse,
    pub v2: Pulse,
    pub v3: Pulse,
    pub grid: (usize, usize),
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
}

impl CutSpec {
    pub fn new(v1: Pulse, v2: Pulse, v3: Pulse) -> Result<Self> {
        let n = v1.n_steps();
        if v2.n_steps() != n || v3.n_steps() != n {
            return Err(AtlasError::Landscape(format!(
                "cut anchors must share N: got {n}, {}, {}",
                v2.n_steps(),
                v3.n_steps()
            )));
        }
        Ok(Self {
            v1,
            v2,
            v3,
            grid: (100, 100),
            alpha_range: (-0.2, 1.2),
            beta_range: (-0.2, 1.2),
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.v1.n_steps();
        if self.v2.n_steps() != n || self.v3.n_steps() != n {
            return Err(AtlasError::Landscape("cut anchors must share N".into()));
        }
        let finite = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 < r.1;
        if !finite(self.alpha_range) || !finite(self.beta_range) {
            return Err(AtlasError::Landscape("cut ranges must be finite and increasing".into()));
        }
        if self.grid.0 < 2 || self.grid.1 < 2 {
            return Err(AtlasError::Landscape("cut grid must be at least 2 x 2".into()));
        }
        Ok(())
    }

    /// Amplitudes at (alpha, beta); may leave the control box.
    pub fn point(&self, alpha: f64, beta: f64) -> Vec<f64> {
        let (u1, u2, u3) = (self.v1.amplitudes(), self.v2.amplitudes(), self.v3.amplitudes());
        (0..u1.len())
            .map(|k| u1[k] + alpha * (u2[k] - u1[k]) + beta * (u3[k] - u1[k]))
            .collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        linspace(self.alpha_range, self.grid.0)
    }

    pub fn betas(&self) -> Vec<f64> {
        linspace(self.beta_range, self.grid.1)
    }
}

fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + i as f64 * step).collect()
}

/// How a cut grid point is scored.
pub enum CutEvaluator<'a> {
    Exact(&'a SpinChainSpec),
    Model(&'a dyn Surrogate),
}

/// Grid of infidelities over the cut; `None` marks out-of-bounds pulses.
#[derive(Debug, Clone)]
pub struct CutGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major over (alpha index, beta index).
    pub values: Vec<Option<f64>>,
}

impl CutGrid {
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.betas.len() + j]
    }

    pub fn masked_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// CSV with a header row of beta values; masked cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha\\beta");
        for b in &self.betas {
            out.push_str(&format!(",{b}"));
        }
        out.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            out.push_str(&format!("{a}"));
            for j in 0..self.betas.len() {
                match self.value(i, j) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Anchor pulses recorded next to an exported cut grid.
#[derive(Debug, Serialize)]
pub struct CutSidecar<'a> {
    pub v1: &'a [f64],
    pub v2: &'a [f64],
    pub v3: &'a [f64],
    #[serde(rename = "T_J")]
    pub t_j: f64,
    pub u_max: f64,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
}

impl CutSpec {
    pub fn sidecar(&self) -> CutSidecar<'_> {
        CutSidecar {
            v1: self.v1.amplitudes(),
            v2: self.v2.amplitudes(),
            v3: self.v3.amplitudes(),
            t_j: self.v1.duration(),
            u_max: self.v1.u_max(),
            alpha_range: self.alpha_range,
            beta_range: self.beta_range,
        }
    }
}

/// Scores every grid point of the cut. Points where any |u_k| > u_max are
/// masked rather than clipped.
pub fn evaluate_cut(cut: &CutSpec, evaluator: CutEvaluator<'_>) -> Result<CutGrid> {
    cut.validate()?;
    if let CutEvaluator::Model(m) = &evaluator {
        if m.n_controls() != cut.v1.n_steps() {
            return Err(AtlasError::Landscape(format!(
                "model expects {} controls, cut anchors have {}",
                m.n_controls(),
                cut.v1.n_steps()
            )));
        }
    }
    let alphas = cut.alphas();
    let betas = cut.betas();
    let u_max = cut.v1.u_max();
    let t = cut.v1.duration();

    let points: Vec<(usize, Vec<f64>)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .enumerate()
        .map(|(idx, (a, b))| (idx, cut.point(a, b)))
        .collect();

    let mut values = vec![None; points.len()];
    match evaluator {
        CutEvaluator::Exact(spec) => {
            let scored: Vec<(usize, Option<f64>)> = points
                .par_iter()
                .map(|(idx, u)| {
                    if u.iter().any(|v| v.abs() > u_max) {
                        return Ok((*idx, None));
                    }
                    let pulse = Pulse::new(u.clone(), t, u_max)?;
                    Ok((*idx, Some(spin::infidelity(spec, &pulse)?)))
                })
                .collect::<Result<_>>()?;
            for (idx, v) in scored {
                values[idx] = v;
            }
        }
        CutEvaluator::Model(model) => {
            for (idx, u) in &points {
                if u.iter().any(|v| v.abs() > u_max) {
                    continue;
                }
                values[*idx] = Some(model.predict_one(u)?);
            }
        }
    }
    Ok(CutGrid { alphas, betas, values })
}

/// Per-duration difficulty bundle.
#[derive(Debug, Clone, Serialize)]
pub struct LandscapeMeasures {
    #[serde(rename = "T_J")]
    pub t_j: f64,
    #[serde(rename = "F_star")]
    pub best_fidelity: f64,
    #[serde(rename = "D_attr_I")]
    pub attractor_distance_i: f64,
    #[serde(rename = "D_attr_II")]
    pub attractor_distance_ii: f64,
    pub repeated_fraction: f64,
    pub ruggedness: f64,
    pub trap_density: f64,
}

/// Computes all six measures from a nonempty trajectory set at one duration.
///
/// - best fidelity: max over final fidelities
/// - attractor distance I: mean of ||u_opt - u_init|| / (N u_max)
/// - attractor distance II: variant I divided by sqrt(T J) — a
///   duration-relative rescaling of this crate, not a standard quantity
/// - repeated fraction: 1 - |distinct optima| / |trajectories|, where optima
///   closer than 1e-9 in ||.|| / (u_max sqrt(N)) merge by single linkage
/// - ruggedness: mean diagonal Hessian element of C at the optima
/// - trap density: population variance of the final fidelities
pub fn measures(trajectories: &[Trajectory], spec: &SpinChainSpec) -> Result<LandscapeMeasures> {
    let first = trajectories
        .first()
        .ok_or_else(|| AtlasError::Landscape("measures need at least one trajectory".into()))?;
    let pulse0 = first.final_pulse();
    let (n, u_max, t_j) = (pulse0.n_steps(), pulse0.u_max(), pulse0.duration() * spec.j());
    let count = trajectories.len() as f64;

    let mut best_fidelity = 0.0f64;
    let mut dist_sum = 0.0;
    for traj in trajectories {
        best_fidelity = best_fidelity.max(1.0 - traj.final_infidelity());
        let d2: f64 = traj
            .initial()
            .0
            .amplitudes()
            .iter()
            .zip(traj.final_pulse().amplitudes())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        dist_sum += d2.sqrt();
    }
    let attractor_distance_i = dist_sum / (n as f64 * u_max * count);
    let attractor_distance_ii = attractor_distance_i / t_j.sqrt();

    let repeated_fraction = {
        let finals: Vec<&[f64]> = trajectories.iter().map(|t| t.final_pulse().amplitudes()).collect();
        let distinct = cluster_count(&finals, u_max * (n as f64).sqrt() * DISTINCT_THRESHOLD);
        1.0 - distinct as f64 / count
    };

    let diag_sums: Vec<f64> = trajectories
        .par_iter()
        .map(|traj| {
            let diag = spin::infidelity_hessian_diag(spec, traj.final_pulse())?;
            Ok(diag.iter().sum::<f64>() / diag.len() as f64)
        })
        .collect::<Result<_>>()?;
    let ruggedness = diag_sums.iter().sum::<f64>() / count;

    let mean_f: f64 =
        trajectories.iter().map(|t| 1.0 - t.final_infidelity()).sum::<f64>() / count;
    let trap_density = trajectories
        .iter()
        .map(|t| (1.0 - t.final_infidelity() - mean_f).powi(2))
        .sum::<f64>()
        / count;

    Ok(LandscapeMeasures {
        t_j,
        best_fidelity,
        attractor_distance_i,
        attractor_distance_ii,
        repeated_fraction,
        ruggedness,
        trap_density,
    })
}

/// Number of single-linkage clusters under the absolute distance threshold.
fn cluster_count(points: &[&[f64]], threshold: f64) -> usize {
    // Union-find over pairwise links.
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    (0..points.len()).filter(|&i| find(&mut parent, i) == i).count()
}

/// Smallest duration where the best infidelity 1 - F* drops below `epsilon`,
/// interpolated linearly in log-infidelity between the bracketing grid points.
pub fn estimate_qsl(per_duration: &[(f64, LandscapeMeasures)], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(AtlasError::Landscape(format!("threshold {epsilon} must lie in (0, 1)")));
    }
    if per_duration.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(AtlasError::Landscape("durations must be strictly increasing".into()));
    }
    let floor = 1e-300;
    let infid = |m: &LandscapeMeasures| (1.0 - m.best_fidelity).max(floor);
    let cross = per_duration
        .windows(2)
        .find(|w| infid(&w[0].1) >= epsilon && infid(&w[1].1) < epsilon);
    match cross {
        Some(w) => {
            let (t0, c0) = (w[0].0, infid(&w[0].1));
            let (t1, c1) = (w[1].0, infid(&w[1].1));
            let frac = (epsilon.ln() - c0.ln()) / (c1.ln() - c0.ln());
            Ok(t0 + frac * (t1 - t0))
        }
        None => Err(AtlasError::Landscape(format!(
            "best infidelity never crosses {epsilon} from above within the duration grid"
        ))),
    }
}

/// Grid durations of the two structural transitions: the peak of attractor
/// distance II and the peak of the trap density. Ties break toward smaller T.
pub fn phase_markers(per_duration: &[(f64, LandscapeMeasures)]) -> Result<(f64, f64)> {
    if per_duration.len() < 5 {
        return Err(AtlasError::Landscape(format!(
            "phase markers need at least 5 durations, got {}",
            per_duration.len()
        )));
    }
    let argmax = |f: &dyn Fn(&LandscapeMeasures) -> f64, label: &str| -> f64 {
        let mut best = (per_duration[0].0, f(&per_duration[0].1));
        let mut tied = false;
        for (t, m) in &per_duration[1..] {
            let v = f(m);
            if v > best.1 + 1e-12 {
                best = (*t, v);
                tied = false;
            } else if (v - best.1).abs() <= 1e-12 {
                tied = true;
            }
        }
        if tied {
            log::warn!("{label} peak is not unique; keeping the smallest duration");
        }
        best.0
    };
    let t1 = argmax(&|m| m.attractor_distance_ii, "attractor distance II");
    let t2 = argmax(&|m| m.trap_density, "trap density");
    Ok((t1, t2))
}
