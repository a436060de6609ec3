//! Post-selection of simulated trajectories on their endpoints and greedy
//! extraction of the tightest cluster, whose average approximates the
//! optimal path between the boundary values.

use alloc::vec::Vec;

// inherent f64 methods shadow these whenever std is in the build graph
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianState, MeasurementConfig};
use crate::optimal_path::OptimalPathSolution;
use crate::trajectory::{simulate_final_state, simulate_trajectory, SimOptions, TrajectoryRecord};
use crate::Vec2;

pub const DEFAULT_POOL_SIZE: usize = 500;
pub const DEFAULT_CLUSTER_SIZE: usize = 50;
pub const DEFAULT_EPSILON: f64 = 0.35;
pub const DEFAULT_MAX_TRIALS: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub target: Vec2,
    /// Half-width of the acceptance box, per quadrature.
    pub epsilon: f64,
    pub pool_size: usize,
    pub cluster_size: usize,
    /// Trajectories to try before giving up on filling the pool.
    pub max_trials: u64,
}

impl ClusterSpec {
    pub fn new(target: Vec2) -> Self {
        Self {
            target,
            epsilon: DEFAULT_EPSILON,
            pool_size: DEFAULT_POOL_SIZE,
            cluster_size: DEFAULT_CLUSTER_SIZE,
            max_trials: DEFAULT_MAX_TRIALS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.cluster_size < 2 || self.cluster_size > self.pool_size {
            return Err(Error::InvalidArgument(alloc::format!(
                "need 2 <= cluster size ({}) <= pool size ({})",
                self.cluster_size,
                self.pool_size
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, end: [f64; 2]) -> bool {
        (end[0] - self.target[0]).abs() <= self.epsilon && (end[1] - self.target[1]).abs() <= self.epsilon
    }
}

/// Indexed supply of trajectories.
pub trait TrajectorySource {
    /// Final means of member `index`; must agree with the last point of
    /// [`TrajectorySource::trajectory`].
    fn final_state(&self, index: u64) -> Result<[f64; 2]>;
    fn trajectory(&self, index: u64) -> Result<TrajectoryRecord>;
}

/// Ensemble members `(master_seed, index)` of a fixed simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationSource {
    pub init: GaussianState,
    pub cfg: MeasurementConfig,
    pub options: SimOptions,
    pub master_seed: u64,
}

impl TrajectorySource for SimulationSource {
    fn final_state(&self, index: u64) -> Result<[f64; 2]> {
        simulate_final_state(&self.init, &self.cfg, self.options, self.master_seed, index)
    }

    fn trajectory(&self, index: u64) -> Result<TrajectoryRecord> {
        simulate_trajectory(&self.init, &self.cfg, self.options, self.master_seed, index)
    }
}

/// Accepted trajectories in stream order.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub indices: Vec<u64>,
    pub members: Vec<TrajectoryRecord>,
    /// Stream positions consumed, including the last accepted one.
    pub trials: u64,
}

impl Pool {
    pub fn acceptance_rate(&self) -> f64 {
        self.indices.len() as f64 / self.trials.max(1) as f64
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Fills a pool with the first `pool_size` members, in index order, whose
/// endpoints fall inside the acceptance box.
pub fn postselect_pool<S: TrajectorySource + ?Sized>(source: &S, spec: &ClusterSpec) -> Result<Pool> {
    spec.validate()?;
    let mut indices = Vec::with_capacity(spec.pool_size);
    let mut trials = 0u64;
    while indices.len() < spec.pool_size {
        if trials >= spec.max_trials {
            return Err(Error::PoolExhausted {
                trials,
                accepted: indices.len(),
                rate: indices.len() as f64 / trials.max(1) as f64,
            });
        }
        if spec.accepts(source.final_state(trials)?) {
            indices.push(trials);
        }
        trials += 1;
    }
    pool_from_indices(source, indices, trials)
}

/// Materializes the records of already selected members.
pub fn pool_from_indices<S: TrajectorySource + ?Sized>(source: &S, indices: Vec<u64>, trials: u64) -> Result<Pool> {
    let members = indices.iter().map(|&i| source.trajectory(i)).collect::<Result<Vec<_>>>()?;
    Ok(Pool { indices, members, trials })
}

/// Symmetric pairwise distances, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Time-averaged Euclidean distance between two paths on a shared grid.
pub fn path_distance(a: &TrajectoryRecord, b: &TrajectoryRecord) -> f64 {
    let n = a.q1.len();
    let mut acc = 0.0;
    for k in 0..n {
        let dx = a.q1[k] - b.q1[k];
        let dy = a.q2[k] - b.q2[k];
        acc += (dx * dx + dy * dy).sqrt();
    }
    acc / n as f64
}

fn check_grids(members: &[TrajectoryRecord]) -> Result<()> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidArgument("empty pool".into()));
    };
    for m in members {
        if m.times.len() != first.times.len() {
            return Err(Error::GridMismatch(alloc::format!(
                "{} vs {} grid points",
                m.times.len(),
                first.times.len()
            )));
        }
    }
    Ok(())
}

pub fn distance_matrix(members: &[TrajectoryRecord]) -> Result<DistanceMatrix> {
    check_grids(members)?;
    let n = members.len();
    let mut values = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = path_distance(&members[i], &members[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

/// Greedy agglomeration: start from the closest pair, then repeatedly add
/// the candidate with the least summed distance to the current members.
/// Ties go to the lower position. Returns pool positions in insertion order.
pub fn greedy_cluster(dist: &DistanceMatrix, size: usize) -> Vec<usize> {
    let n = dist.n;
    let size = size.min(n);
    if n == 0 || size == 0 {
        return Vec::new();
    }
    if size == 1 || n == 1 {
        return alloc::vec![0];
    }
    let mut best = (f64::INFINITY, 0, 1);
    for i in 0..n {
        for j in i + 1..n {
            let d = dist.get(i, j);
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    let mut members = alloc::vec![best.1, best.2];
    let mut in_cluster = alloc::vec![false; n];
    in_cluster[best.1] = true;
    in_cluster[best.2] = true;
    let mut score: Vec<f64> = (0..n).map(|k| dist.get(k, best.1) + dist.get(k, best.2)).collect();
    while members.len() < size {
        let mut pick = usize::MAX;
        let mut pick_score = f64::INFINITY;
        for k in 0..n {
            if !in_cluster[k] && score[k] < pick_score {
                pick = k;
                pick_score = score[k];
            }
        }
        in_cluster[pick] = true;
        members.push(pick);
        for k in 0..n {
            score[k] += dist.get(k, pick);
        }
    }
    members
}

/// Sum of pairwise distances within a subset.
pub fn cluster_objective(dist: &DistanceMatrix, members: &[usize]) -> f64 {
    let mut acc = 0.0;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            acc += dist.get(i, j);
        }
    }
    acc
}

/// Objectives of `count` uniformly random `size`-subsets, for quality control.
pub fn random_subset_objectives<R: Rng + ?Sized>(dist: &DistanceMatrix, size: usize, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let members = rand::seq::index::sample(rng, dist.n, size).into_vec();
            cluster_objective(dist, &members)
        })
        .collect()
}

/// Averaged path of a cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredPath {
    /// Stream indices of the members.
    pub members: Vec<u64>,
    /// Positions of the members in the pool.
    pub positions: Vec<usize>,
    pub times: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    /// Root-mean-square distance of the members from the average at each time.
    pub spread: Vec<f64>,
    pub objective: f64,
}

/// Pointwise mean and spread of the selected pool members.
pub fn average_members(pool: &Pool, positions: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let first = &pool.members[positions[0]];
    let n = first.q1.len();
    let k = positions.len() as f64;
    let mut q1 = alloc::vec![0.0; n];
    let mut q2 = alloc::vec![0.0; n];
    for &p in positions {
        let m = &pool.members[p];
        for t in 0..n {
            q1[t] += m.q1[t];
            q2[t] += m.q2[t];
        }
    }
    for t in 0..n {
        q1[t] /= k;
        q2[t] /= k;
    }
    let mut spread = alloc::vec![0.0; n];
    for &p in positions {
        let m = &pool.members[p];
        for t in 0..n {
            spread[t] += (m.q1[t] - q1[t]).powi(2) + (m.q2[t] - q2[t]).powi(2);
        }
    }
    for s in &mut spread {
        *s = (*s / k).sqrt();
    }
    (q1, q2, spread)
}

pub fn cluster_least_distance(pool: &Pool, spec: &ClusterSpec) -> Result<ClusteredPath> {
    let dist = distance_matrix(&pool.members)?;
    if pool.len() < spec.cluster_size {
        return Err(Error::InvalidArgument(alloc::format!(
            "pool has {} members, cluster needs {}",
            pool.len(),
            spec.cluster_size
        )));
    }
    let positions = greedy_cluster(&dist, spec.cluster_size);
    Ok(cluster_from_positions(pool, &dist, positions))
}

pub fn cluster_from_positions(pool: &Pool, dist: &DistanceMatrix, positions: Vec<usize>) -> ClusteredPath {
    let (q1, q2, spread) = average_members(pool, &positions);
    ClusteredPath {
        members: positions.iter().map(|&p| pool.indices[p]).collect(),
        objective: cluster_objective(dist, &positions),
        times: pool.members[positions[0]].times.clone(),
        positions,
        q1,
        q2,
        spread,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpComparison {
    pub rms_q1: f64,
    pub rms_q2: f64,
    pub max_q1: f64,
    pub max_q2: f64,
    /// Root-mean-square Euclidean deviation.
    pub rms: f64,
}

impl MlpComparison {
    pub fn passes(&self, threshold: f64) -> bool {
        self.rms <= threshold
    }
}

/// Deviation between averaged and analytic paths on the averaged path's grid.
pub fn compare_to_mlp(path: &ClusteredPath, analytic: &OptimalPathSolution) -> Result<MlpComparison> {
    let tf = analytic.tf();
    match path.times.last() {
        Some(&last) if (last - tf).abs() <= 1e-9 * tf.max(1.0) => {}
        other => {
            return Err(Error::GridMismatch(alloc::format!("path ends at {other:?}, analytic path at {tf}")));
        }
    }
    let mut out = MlpComparison { rms_q1: 0.0, rms_q2: 0.0, max_q1: 0.0, max_q2: 0.0, rms: 0.0 };
    for (k, &t) in path.times.iter().enumerate() {
        let q = analytic.q_unchecked(t.min(tf));
        let d1 = (path.q1[k] - q[0]).abs();
        let d2 = (path.q2[k] - q[1]).abs();
        out.rms_q1 += d1 * d1;
        out.rms_q2 += d2 * d2;
        out.max_q1 = out.max_q1.max(d1);
        out.max_q2 = out.max_q2.max(d2);
    }
    let n = path.times.len() as f64;
    out.rms = ((out.rms_q1 + out.rms_q2) / n).sqrt();
    out.rms_q1 = (out.rms_q1 / n).sqrt();
    out.rms_q2 = (out.rms_q2 / n).sqrt();
    Ok(out)
}
