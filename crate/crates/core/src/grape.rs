//! Second-order GRAPE: bounded quasi-Newton minimization of the infidelity
//! from random seeds, logging every accepted iterate as a landscape sample.

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Manifest, TrajectoryRecord};
use crate::error::{AtlasError, Result};
use crate::optim::{self, LbfgsOptions};
use crate::rng::stream;
use crate::spin::{self, Pulse, SpinChainSpec};

/// GRAPE stopping and memory settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrapeConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub history_size: usize,
}

impl Default for GrapeConfig {
    fn default() -> Self {
        Self { max_iterations: 500, gradient_tolerance: 1e-8, history_size: 10 }
    }
}

impl GrapeConfig {
    fn validate(&self) -> Result<()> {
        if self.gradient_tolerance <= 0.0 {
            return Err(AtlasError::Optimization("gradient tolerance must be positive".into()));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            history_size: self.history_size,
        }
    }
}

/// One optimization run: the ordered accepted iterates and the final pulse.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub seed_id: u32,
    pub iterates: Vec<(Pulse, f64)>,
    pub converged: bool,
}

impl Trajectory {
    pub fn initial(&self) -> &(Pulse, f64) {
        self.iterates.first().expect("trajectory records at least the initial point")
    }

    pub fn last(&self) -> &(Pulse, f64) {
        self.iterates.last().expect("trajectory records at least the initial point")
    }

    pub fn final_pulse(&self) -> &Pulse {
        &self.last().0
    }

    pub fn final_infidelity(&self) -> f64 {
        self.last().1
    }
}

/// Draws each amplitude i.i.d. uniform on [-u_max, +u_max].
pub fn random_pulse(rng: &mut impl Rng, n: usize, t: f64, u_max: f64) -> Result<Pulse> {
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-u_max..=u_max)).collect();
    Pulse::new(u, t, u_max)
}

/// Minimizes C = 1 - F from `initial` with the exact gradient, recording
/// every accepted iterate. Pulses stay inside the box |u_k| <= u_max.
pub fn optimize(
    spec: &SpinChainSpec,
    initial: &Pulse,
    config: &GrapeConfig,
) -> Result<Trajectory> {
    optimize_seeded(spec, initial, config, 0)
}

pub fn optimize_seeded(
    spec: &SpinChainSpec,
    initial: &Pulse,
    config: &GrapeConfig,
    seed_id: u32,
) -> Result<Trajectory> {
    config.validate()?;
    let n = initial.n_steps();
    let u_max = initial.u_max();
    let lower = vec![-u_max; n];
    let upper = vec![u_max; n];
    let mut iterates: Vec<(Pulse, f64)> = Vec::new();

    let objective = |u: &[f64]| -> Result<(f64, Vec<f64>)> {
        let pulse = initial.with_amplitudes(u.to_vec())?;
        spin::infidelity_value_and_gradient(spec, &pulse)
    };
    let outcome = optim::minimize(
        objective,
        initial.amplitudes(),
        &lower,
        &upper,
        &config.lbfgs(),
        |u, c| {
            let pulse = initial
                .with_amplitudes(u.to_vec())
                .expect("accepted iterates stay inside the box");
            iterates.push((pulse, c));
        },
    )
    .map_err(|e| AtlasError::Optimization(format!("seed {seed_id}: {e}")))?;

    Ok(Trajectory { seed_id, iterates, converged: outcome.converged() })
}

/// Output of a collection run: one dataset per control duration, plus the
/// raw trajectories for landscape analysis.
#[derive(Debug)]
pub struct Collection {
    pub datasets: Vec<Dataset>,
    pub trajectories: Vec<Vec<Trajectory>>,
}

/// Runs `optimize` from `seeds_per_duration` random pulses at every duration
/// in `duration_grid`. Deterministic given `master_seed`: each (duration,
/// seed) pair draws from its own counter-based stream and results are merged
/// in index order, independent of worker scheduling.
pub fn collect(
    spec: &SpinChainSpec,
    n_steps: usize,
    u_max: f64,
    duration_grid: &[f64],
    seeds_per_duration: u32,
    master_seed: u64,
    config: &GrapeConfig,
) -> Result<Collection> {
    let indexed: Vec<(u32, f64)> =
        duration_grid.iter().enumerate().map(|(i, &t)| (i as u32, t)).collect();
    collect_indexed(spec, n_steps, u_max, &indexed, seeds_per_duration, master_seed, config)
}

/// Like [`collect`], but with explicit duration indices, so a run restricted
/// to part of the grid draws the same random streams — and produces the same
/// bytes — as the corresponding slice of a full run.
pub fn collect_indexed(
    spec: &SpinChainSpec,
    n_steps: usize,
    u_max: f64,
    indexed_grid: &[(u32, f64)],
    seeds_per_duration: u32,
    master_seed: u64,
    config: &GrapeConfig,
) -> Result<Collection> {
    if seeds_per_duration < 1 {
        return Err(AtlasError::Optimization("seeds_per_duration must be >= 1".into()));
    }
    config.validate()?;
    let mut datasets = Vec::with_capacity(indexed_grid.len());
    let mut all_trajectories = Vec::with_capacity(indexed_grid.len());

    for &(duration_index, t_j) in indexed_grid {
        let results: Vec<Result<Trajectory>> = (0..seeds_per_duration)
            .into_par_iter()
            .map(|seed_id| {
                let mut rng = stream(master_seed, duration_index, seed_id);
                let initial = random_pulse(&mut rng, n_steps, t_j, u_max)?;
                optimize_seeded(spec, &initial, config, seed_id)
            })
            .collect();

        let mut trajectories = Vec::new();
        let mut skipped = Vec::new();
        for (seed_id, res) in results.into_iter().enumerate() {
            match res {
                Ok(traj) => trajectories.push(traj),
                Err(e) => {
                    log::warn!("duration {t_j}: seed {seed_id} skipped: {e}");
                    skipped.push(seed_id as u32);
                }
            }
        }
        if trajectories.is_empty() {
            return Err(AtlasError::Optimization(format!(
                "all {seeds_per_duration} seeds failed at duration T*J = {t_j}"
            )));
        }

        let mut manifest = Manifest::new(
            spec.l() as u32,
            n_steps as u32,
            t_j,
            spec.g(),
            spec.boundary(),
            u_max,
        );
        manifest.master_seed = Some(master_seed);
        manifest.duration_index = Some(duration_index);
        manifest.skipped_seeds = skipped;

        let records: Vec<TrajectoryRecord> = trajectories
            .iter()
            .flat_map(|traj| {
                traj.iterates.iter().enumerate().map(move |(i, (pulse, c))| TrajectoryRecord {
                    seed_id: traj.seed_id,
                    iterate_index: i as u32,
                    controls: pulse.amplitudes().to_vec(),
                    infidelity: c.clamp(0.0, 1.0),
                })
            })
            .collect();
        datasets.push(Dataset::new(manifest, records)?);
        all_trajectories.push(trajectories);
    }

    Ok(Collection { datasets, trajectories: all_trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::Boundary;

    #[test]
    fn random_pulse_is_deterministic_per_stream() {
        let mut a = stream(9, 0, 3);
        let mut b = stream(9, 0, 3);
        let pa = random_pulse(&mut a, 8, 2.0, 1.0).unwrap();
        let pb = random_pulse(&mut b, 8, 2.0, 1.0).unwrap();
        assert_eq!(pa.amplitudes(), pb.amplitudes());

        let mut c = stream(9, 0, 4);
        let pc = random_pulse(&mut c, 8, 2.0, 1.0).unwrap();
        assert_ne!(pa.amplitudes(), pc.amplitudes());
    }

    #[test]
    fn random_pulse_mean_is_near_zero() {
        let mut rng = stream(1, 0, 0);
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            sum += random_pulse(&mut rng, 1, 1.0, 1.0).unwrap().amplitudes()[0];
        }
        let mean = sum / draws as f64;
        let sigma = 1.0 / (3.0 * draws as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
    }

    #[test]
    fn rabi_single_step_converges_to_analytic_optimum() {
        let spec = SpinChainSpec::new(1, 0.0, Boundary::Open).unwrap();
        let t = 3.33;
        let initial = Pulse::new(vec![0.1], t, 1.0).unwrap();
        let config = GrapeConfig {
            gradient_tolerance: 1e-12,
            max_iterations: 2000,
            ..Default::default()
        };
        let traj = optimize(&spec, &initial, &config).unwrap();
        assert!(traj.converged);
        let u_star = std::f64::consts::FRAC_PI_2 / t;
        assert!((traj.final_pulse().amplitudes()[0] - u_star).abs() < 1e-9);
        assert!(traj.final_infidelity() < 1e-10);
    }

    #[test]
    fn restart_at_optimum_is_a_fixed_point() {
        let spec = SpinChainSpec::new(2, 0.0, Boundary::Open).unwrap();
        let initial = Pulse::new(vec![0.3, -0.2, 0.6, 0.1], 2.5, 1.0).unwrap();
        let config = GrapeConfig::default();
        let traj = optimize(&spec, &initial, &config).unwrap();
        let restarted = optimize(&spec, traj.final_pulse(), &config).unwrap();
        assert!(restarted.iterates.len() <= 2);
        let drift: f64 = restarted
            .final_pulse()
            .amplitudes()
            .iter()
            .zip(traj.final_pulse().amplitudes())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-8, "drift {drift}");
    }

    #[test]
    fn trajectories_are_monotone_and_feasible() {
        let spec = SpinChainSpec::new(3, 0.1, Boundary::Periodic).unwrap();
        let config = GrapeConfig { max_iterations: 100, ..Default::default() };
        for seed in 0..5u32 {
            let mut rng = stream(3, 0, seed);
            let initial = random_pulse(&mut rng, 6, 2.0, 1.0).unwrap();
            let traj = optimize_seeded(&spec, &initial, &config, seed).unwrap();
            for w in traj.iterates.windows(2) {
                assert!(w[1].1 <= w[0].1 + 1e-12);
            }
            for (pulse, _) in &traj.iterates {
                for &u in pulse.amplitudes() {
                    assert!(u.abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_iteration_collect_yields_initial_points_only() {
        let spec = SpinChainSpec::new(2, 0.0, Boundary::Periodic).unwrap();
        let config = GrapeConfig { max_iterations: 0, ..Default::default() };
        let out = collect(&spec, 4, 1.0, &[1.5], 1, 7, &config).unwrap();
        assert_eq!(out.datasets[0].len(), 1);
        assert_eq!(out.datasets[0].records()[0].iterate_index, 0);
    }

    #[test]
    fn collect_is_deterministic() {
        let spec = SpinChainSpec::new(2, 0.0, Boundary::Periodic).unwrap();
        let config = GrapeConfig { max_iterations: 20, ..Default::default() };
        let a = collect(&spec, 4, 1.0, &[1.0, 2.0], 3, 11, &config).unwrap();
        let b = collect(&spec, 4, 1.0, &[1.0, 2.0], 3, 11, &config).unwrap();
        for (da, db) in a.datasets.iter().zip(&b.datasets) {
            assert_eq!(da, db);
        }
    }
}
