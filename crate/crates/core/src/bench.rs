//! Wall-time comparison of exact Schrödinger evaluation against surrogate
//! forward passes, plus the break-even arithmetic between the two pipelines.

use std::time::Instant;

use serde::Serialize;

use crate::error::{AtlasError, Result};
use crate::grape::random_pulse;
use crate::rng::tagged_stream;
use crate::spin::{self, SpinChainSpec};
use crate::surrogates::Surrogate;

/// Median wall time of evaluating a batch of random in-bounds pulses.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub method: String,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[serde(rename = "N")]
    pub n: usize,
    pub batch: usize,
    pub wall_seconds: f64,
    pub repeats: usize,
    /// Set when the timer resolution exceeds 1% of the measured interval.
    pub warning: Option<String>,
}

impl BenchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bench result serializes")
    }

    pub fn csv_header() -> &'static str {
        "method,L,N,batch,wall_seconds,repeats"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.l.map(|l| l.to_string()).unwrap_or_default(),
            self.n,
            self.batch,
            self.wall_seconds,
            self.repeats
        )
    }
}

const BENCH_T_J: f64 = 2.0;
const BENCH_U_MAX: f64 = 1.0;
const TIMER_RESOLUTION_FRACTION: f64 = 0.01;

fn check_preconditions(batch: usize, repeats: usize) -> Result<()> {
    if batch < 1 {
        return Err(AtlasError::Bench("batch must be at least 1".into()));
    }
    if repeats < 3 {
        return Err(AtlasError::Bench("repeats must be at least 3".into()));
    }
    Ok(())
}

fn random_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = tagged_stream(seed, "bench-pulses");
    (0..batch)
        .map(|_| {
            random_pulse(&mut rng, n, BENCH_T_J, BENCH_U_MAX)
                .expect("bench parameters are valid")
                .amplitudes()
                .to_vec()
        })
        .collect()
}

/// Timer resolution estimated from the shortest observable nonzero interval.
fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..10 {
        let start = Instant::now();
        let mut elapsed;
        loop {
            elapsed = start.elapsed().as_secs_f64();
            if elapsed > 0.0 {
                break;
            }
        }
        best = best.min(elapsed);
    }
    best
}

/// Runs `work` once to warm up, then `repeats` timed runs; returns the
/// median interval and a resolution warning if the timing is too coarse.
fn timed_median(repeats: usize, mut work: impl FnMut()) -> (f64, Option<String>) {
    work();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        work();
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let median = if repeats % 2 == 1 {
        times[repeats / 2]
    } else {
        0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
    };
    let resolution = timer_resolution();
    let warning = if median <= 0.0 || resolution > TIMER_RESOLUTION_FRACTION * median {
        Some(format!(
            "timer resolution {resolution:.3e} s exceeds 1% of the measured interval {median:.3e} s"
        ))
    } else {
        None
    };
    (median, warning)
}

/// Times exact infidelity evaluation of `batch` random pulses.
/// Single-threaded during the timed sections.
pub fn bench_exact(spec: &SpinChainSpec, n: usize, batch: usize, repeats: usize) -> Result<BenchResult> {
    check_preconditions(batch, repeats)?;
    let pulses = random_batches(n, batch, spec.l() as u64);
    let mut sink = 0.0;
    let (wall_seconds, warning) = timed_median(repeats, || {
        for u in &pulses {
            let pulse = spin::Pulse::new(u.clone(), BENCH_T_J, BENCH_U_MAX)
                .expect("bench pulses are in bounds");
            sink += spin::infidelity(spec, &pulse).expect("bench evaluation succeeds");
        }
    });
    std::hint::black_box(sink);
    Ok(BenchResult {
        method: "exact".into(),
        l: Some(spec.l()),
        n,
        batch,
        wall_seconds,
        repeats,
        warning,
    })
}

/// Times surrogate forward passes over `batch` random pulses.
pub fn bench_model(model: &dyn Surrogate, batch: usize, repeats: usize) -> Result<BenchResult> {
    check_preconditions(batch, repeats)?;
    let n = model.n_controls();
    let pulses = random_batches(n, batch, n as u64);
    let mut sink = 0.0;
    let (wall_seconds, warning) = timed_median(repeats, || {
        let preds = model.predict(&pulses).expect("bench prediction succeeds");
        sink += preds.iter().sum::<f64>();
    });
    std::hint::black_box(sink);
    Ok(BenchResult {
        method: "nn".into(),
        l: None,
        n,
        batch,
        wall_seconds,
        repeats,
        warning,
    })
}

/// Evaluations needed before surrogate overhead (collection + training)
/// pays for itself: overhead / (per-eval exact - per-eval model).
pub fn crossover_estimate(
    collect_seconds: f64,
    train_seconds: f64,
    per_eval_exact: f64,
    per_eval_model: f64,
) -> Result<f64> {
    for (name, v) in [
        ("collect_seconds", collect_seconds),
        ("train_seconds", train_seconds),
        ("per_eval_exact", per_eval_exact),
        ("per_eval_model", per_eval_model),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(AtlasError::Bench(format!("{name} must be finite and nonnegative")));
        }
    }
    if per_eval_exact <= 0.0 || per_eval_model <= 0.0 {
        return Err(AtlasError::Bench("per-evaluation times must be positive".into()));
    }
    let gain = per_eval_exact - per_eval_model;
    if gain <= 0.0 {
        return Err(AtlasError::Bench(
            "no crossover: the model is not faster than exact evaluation".into(),
        ));
    }
    Ok((collect_seconds + train_seconds) / gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::Boundary;
    use crate::surrogates::LinearModel;

    #[test]
    fn preconditions_are_enforced() {
        let spec = SpinChainSpec::new(2, 0.0, Boundary::Periodic).unwrap();
        assert!(bench_exact(&spec, 4, 0, 5).is_err());
        assert!(bench_exact(&spec, 4, 10, 2).is_err());
        let model = LinearModel::from_parts(vec![0.1; 4], 0.5);
        assert!(bench_model(&model, 0, 5).is_err());
    }

    #[test]
    fn bench_runs_and_reports_positive_time() {
        let spec = SpinChainSpec::new(2, 0.0, Boundary::Periodic).unwrap();
        let res = bench_exact(&spec, 4, 20, 3).unwrap();
        assert!(res.wall_seconds > 0.0);
        assert_eq!(res.method, "exact");
        assert_eq!(res.l, Some(2));

        let model = LinearModel::from_parts(vec![0.1; 4], 0.5);
        let res = bench_model(&model, 100, 3).unwrap();
        assert!(res.wall_seconds > 0.0);
        assert_eq!(res.method, "nn");
    }

    #[test]
    fn json_and_csv_outputs_are_well_formed() {
        let res = BenchResult {
            method: "exact".into(),
            l: Some(4),
            n: 10,
            batch: 1000,
            wall_seconds: 0.125,
            repeats: 5,
            warning: None,
        };
        let json: serde_json::Value = serde_json::from_str(&res.to_json()).unwrap();
        assert_eq!(json["method"], "exact");
        assert_eq!(json["L"], 4);
        assert_eq!(json["batch"], 1000);
        assert_eq!(res.to_csv_row(), "exact,4,10,1000,0.125,5");
    }

    #[test]
    fn crossover_matches_direct_arithmetic() {
        // 1000 s overhead, 1e-3 vs 1e-5 s per evaluation.
        let x = crossover_estimate(600.0, 400.0, 1e-3, 1e-5).unwrap();
        assert!((x - 1000.0 / (1e-3 - 1e-5)).abs() < 1e-6);
        assert!((x - 1.0101e6).abs() < 1e3);
    }

    #[test]
    fn crossover_at_zero_overhead_is_zero() {
        assert_eq!(crossover_estimate(0.0, 0.0, 1e-3, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn paper_scale_arithmetic_lands_in_the_millions() {
        // 22 h collection + 37 h training; exact evaluation ~0.1 s per pulse
        // against a ~1e-4 s forward pass puts break-even in the millions.
        let overhead = (22.0 + 37.0) * 3600.0;
        let x = crossover_estimate(22.0 * 3600.0, 37.0 * 3600.0, 0.1, 1e-4).unwrap();
        assert!((x - overhead / (0.1 - 1e-4)).abs() < 1.0);
        assert!((1e6..1e7).contains(&x), "crossover {x}");
    }

    #[test]
    fn slower_model_reports_no_crossover() {
        assert!(crossover_estimate(10.0, 10.0, 1e-5, 1e-3).is_err());
        assert!(crossover_estimate(-1.0, 0.0, 1e-3, 1e-5).is_err());
    }
}
