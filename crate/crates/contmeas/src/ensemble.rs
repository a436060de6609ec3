//! Rayon-backed versions of the ensemble, pool and oracle drivers.
//!
//! Every result is keyed by stream index and reduced in index order, so the
//! output does not depend on the number of workers.

use contmeas_core::fock::{run_oracle, OracleComparison, OracleConfig};
use contmeas_core::postselect::{pool_from_indices, ClusterSpec, Pool, TrajectorySource};
use contmeas_core::trajectory::{simulate_final_state, simulate_trajectory, EnsembleResult, SimOptions};
use contmeas_core::{Error, GaussianState, MeasurementConfig, Result};
use rayon::prelude::*;

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "CONTMEAS_WORKERS";

/// Stream positions screened per parallel batch while filling a pool.
const POOL_BATCH: u64 = 4096;

/// Worker count from `CONTMEAS_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn simulate_ensemble_par(
    init: &GaussianState,
    cfg: &MeasurementConfig,
    opts: SimOptions,
    n: usize,
    master_seed: u64,
    keep_records: bool,
    workers: usize,
) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    with_workers(workers, || {
        if keep_records {
            let records = (0..n as u64)
                .into_par_iter()
                .map(|i| simulate_trajectory(init, cfg, opts, master_seed, i))
                .collect::<Result<Vec<_>>>()?;
            let finals = records
                .iter()
                .map(|r| {
                    let f = r.final_state();
                    [f.q1, f.q2]
                })
                .collect();
            Ok(EnsembleResult { count: n, finals, records: Some(records), master_seed, init: *init, cfg: *cfg, options: opts })
        } else {
            let finals = (0..n as u64)
                .into_par_iter()
                .map(|i| simulate_final_state(init, cfg, opts, master_seed, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(EnsembleResult { count: n, finals, records: None, master_seed, init: *init, cfg: *cfg, options: opts })
        }
    })?
}

/// Same pool as [`contmeas_core::postselect::postselect_pool`]: endpoints are
/// screened in parallel batches, acceptance is decided in index order.
pub fn postselect_pool_par<S: TrajectorySource + Sync>(source: &S, spec: &ClusterSpec, workers: usize) -> Result<Pool> {
    spec.validate()?;
    with_workers(workers, || {
        let mut indices = Vec::with_capacity(spec.pool_size);
        let mut start = 0u64;
        while indices.len() < spec.pool_size {
            if start >= spec.max_trials {
                return Err(Error::PoolExhausted {
                    trials: start,
                    accepted: indices.len(),
                    rate: indices.len() as f64 / start.max(1) as f64,
                });
            }
            let end = (start + POOL_BATCH).min(spec.max_trials);
            let hits = (start..end)
                .into_par_iter()
                .map(|i| source.final_state(i).map(|f| spec.accepts(f)))
                .collect::<Result<Vec<bool>>>()?;
            for (k, hit) in hits.into_iter().enumerate() {
                if hit {
                    indices.push(start + k as u64);
                    if indices.len() == spec.pool_size {
                        break;
                    }
                }
            }
            start = end;
        }
        let trials = indices.last().map_or(0, |&i| i + 1);
        let members = indices.par_iter().map(|&i| source.trajectory(i)).collect::<Result<Vec<_>>>()?;
        Ok(Pool { indices, members, trials })
    })?
}

/// Materializes a pool of known members in parallel.
pub fn pool_from_indices_par<S: TrajectorySource + Sync>(
    source: &S,
    indices: Vec<u64>,
    trials: u64,
    workers: usize,
) -> Result<Pool> {
    if workers <= 1 {
        return pool_from_indices(source, indices, trials);
    }
    with_workers(workers, || {
        let members = indices.par_iter().map(|&i| source.trajectory(i)).collect::<Result<Vec<_>>>()?;
        Ok(Pool { indices, members, trials })
    })?
}

/// Independent oracle runs, one per config.
pub fn run_oracles_par(configs: &[OracleConfig], workers: usize) -> Result<Vec<Result<OracleComparison>>> {
    with_workers(workers, || configs.par_iter().map(run_oracle).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use contmeas_core::postselect::{postselect_pool, SimulationSource};
    use contmeas_core::trajectory::simulate_ensemble;
    use contmeas_core::{Strengths, Vec2};

    fn cfg() -> MeasurementConfig {
        MeasurementConfig::new(Strengths::equal(1.0).unwrap(), 1e-2, 2.0).unwrap()
    }

    #[test]
    fn ensembles_match_the_sequential_driver() {
        let init = GaussianState::coherent(3.0, 4.0);
        let seq = simulate_ensemble(&init, &cfg(), SimOptions::default(), 37, 11, false).unwrap();
        for w in [1, 3] {
            let par = simulate_ensemble_par(&init, &cfg(), SimOptions::default(), 37, 11, false, w).unwrap();
            assert_eq!(par, seq);
        }
        let with_rec = simulate_ensemble_par(&init, &cfg(), SimOptions::default(), 5, 11, true, 2).unwrap();
        assert_eq!(with_rec.finals[..], seq.finals[..5]);
    }

    #[test]
    fn pools_match_the_sequential_driver() {
        let source =
            SimulationSource { init: GaussianState::coherent(3.0, 4.0), cfg: cfg(), options: SimOptions::default(), master_seed: 3 };
        let target = contmeas_core::optimal_path::globally_most_likely_endpoint(Vec2::new(3.0, 4.0), 2.0);
        let mut spec = ClusterSpec::new(target);
        spec.epsilon = 1.0;
        spec.pool_size = 12;
        spec.cluster_size = 4;
        let seq = postselect_pool(&source, &spec).unwrap();
        for w in [1, 4] {
            assert_eq!(postselect_pool_par(&source, &spec, w).unwrap(), seq);
        }
        spec.max_trials = 10;
        spec.target = Vec2::new(40.0, 40.0);
        assert!(matches!(postselect_pool_par(&source, &spec, 2), Err(Error::PoolExhausted { trials: 10, .. })));
    }
}
