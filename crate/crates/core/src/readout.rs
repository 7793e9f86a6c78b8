//! Train/test splits, closed-form ridge readouts and R² scoring.
//!
//! States are augmented with a trailing constant 1 so the intercept is the
//! last coefficient. Ridge uses the (N+1)×(N+1) Gram formulation
//! `β = (X Xᵀ + λI)⁻¹ X y`; the penalty applies to the intercept as well.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::StateMatrix;
use crate::linalg::{gemm_acc, View};
use crate::seed;

pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReadoutError {
    #[error("plan needs {needed} samples but only {available} are available")]
    InsufficientData { needed: usize, available: usize },
    #[error("states and targets are not aligned: {0}")]
    Alignment(String),
    #[error("score is undefined for a constant test target")]
    UndefinedScore,
    #[error("ridge system is unsolvable: {0}")]
    SolverFailure(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Layout of training regions and the shared test region on the sample
/// axis. Each region carries a margin split evenly before and after its
/// central block so shifted targets stay inside the simulated window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_neurons: usize,
    pub dt: f64,
    pub tau_y: f64,
    pub tau_u: f64,
    pub trials: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub margin: usize,
    pub l_train: usize,
    pub l_test: usize,
}

pub fn plan_splits(n: usize, dt: f64, tau_y: f64, tau_u: f64, trials: usize) -> Result<SplitPlan, ReadoutError> {
    if n == 0 || trials == 0 || !(dt > 0.0) || !(tau_y > 0.0) || !(tau_u >= 0.0) {
        return Err(ReadoutError::InvalidParameter(format!(
            "need N >= 1, trials >= 1 and positive timescales (N={n}, trials={trials}, dt={dt})"
        )));
    }
    let n_train = ((n + 1) as f64 * 20.0 * tau_y / dt).round() as usize;
    let n_test = (10.0 * tau_y / dt).round() as usize;
    let margin = (4.0 * tau_u / dt).round() as usize;
    Ok(SplitPlan {
        n_neurons: n,
        dt,
        tau_y,
        tau_u,
        trials,
        n_train,
        n_test,
        margin,
        l_train: n_train + margin,
        l_test: n_test + margin,
    })
}

impl SplitPlan {
    /// Total samples spanned by all regions.
    pub fn total_len(&self) -> usize {
        self.trials * self.l_train + self.l_test
    }

    /// Central sample range of training region `trial`.
    pub fn train_range(&self, trial: usize) -> std::ops::Range<usize> {
        let start = trial * self.l_train + self.margin / 2;
        start..start + self.n_train
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        let start = self.trials * self.l_train + self.margin / 2;
        start..start + self.n_test
    }

    /// Which region a sample belongs to, if it is central to one.
    pub fn region_of(&self, sample: usize) -> Region {
        if self.test_range().contains(&sample) {
            return Region::Test;
        }
        let trial = sample / self.l_train;
        if trial < self.trials && self.train_range(trial).contains(&sample) {
            Region::Train(trial)
        } else {
            Region::Margin
        }
    }

    pub fn check_length(&self, available: usize) -> Result<(), ReadoutError> {
        if available < self.total_len() {
            return Err(ReadoutError::InsufficientData { needed: self.total_len(), available });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Train(usize),
    Test,
    Margin,
}

/// Targets stored one row per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    rows: Vec<Vec<f64>>,
}

impl TargetMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, ReadoutError> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(ReadoutError::Alignment("target rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ReadoutError::InvalidParameter("targets must be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }
}

/// Samples with the intercept column appended, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    /// `samples × dim`, last column = 1.
    pub x: Vec<f64>,
    /// `samples × tasks`.
    pub y: Vec<f64>,
    pub dim: usize,
    pub tasks: usize,
    /// Source sample index of each row.
    pub indices: Vec<usize>,
}

impl DataPair {
    pub fn samples(&self) -> usize {
        self.indices.len()
    }

    pub fn target(&self, task: usize) -> Vec<f64> {
        self.y.iter().skip(task).step_by(self.tasks).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DataPair>,
    pub test: DataPair,
}

fn gather(x: &StateMatrix, y: &TargetMatrix, indices: Vec<usize>) -> DataPair {
    let n = x.n();
    let dim = n + 1;
    let tasks = y.tasks();
    let mut xs = Vec::with_capacity(indices.len() * dim);
    let mut ys = Vec::with_capacity(indices.len() * tasks);
    for &i in &indices {
        xs.extend_from_slice(x.sample(i));
        xs.push(1.0);
        ys.extend((0..tasks).map(|t| y.row(t)[i]));
    }
    DataPair { x: xs, y: ys, dim, tasks, indices }
}

/// Extracts the central blocks of each region. With `shuffle_seed`, each
/// block's sample order is permuted identically for states and targets.
pub fn build_dataset(
    x: &StateMatrix,
    y: &TargetMatrix,
    plan: &SplitPlan,
    shuffle_seed: Option<u64>,
) -> Result<Dataset, ReadoutError> {
    if x.len() != y.len() {
        return Err(ReadoutError::Alignment(format!("{} state samples vs {} target samples", x.len(), y.len())));
    }
    plan.check_length(x.len())?;
    let mut rng = shuffle_seed.map(seed::rng);
    let mut order = |range: std::ops::Range<usize>| -> Vec<usize> {
        let mut idx: Vec<usize> = range.collect();
        if let Some(r) = rng.as_mut() {
            idx.shuffle(r);
        }
        idx
    };
    let train = (0..plan.trials).map(|t| gather(x, y, order(plan.train_range(t)))).collect();
    let test = gather(x, y, order(plan.test_range()));
    Ok(Dataset { train, test })
}

/// Streaming sufficient statistics for ridge regression on augmented
/// samples: `Σ x xᵀ`, `Σ x yᵀ` and `Σ y²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    dim: usize,
    tasks: usize,
    count: u64,
    /// `dim × dim`, column-major.
    gram: Vec<f64>,
    /// `dim × tasks`, column-major.
    cross: Vec<f64>,
    sum_yy: Vec<f64>,
}

impl GramAccumulator {
    pub fn new(dim: usize, tasks: usize) -> Self {
        Self {
            dim,
            tasks,
            count: 0,
            gram: vec![0.0; dim * dim],
            cross: vec![0.0; dim * tasks],
            sum_yy: vec![0.0; tasks],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    pub fn cross(&self) -> &[f64] {
        &self.cross
    }

    pub fn sum_yy(&self) -> &[f64] {
        &self.sum_yy
    }

    /// Adds `b` samples: `x` is `b × dim` and `y` is `b × tasks`, both
    /// sample-major.
    pub fn add_block(&mut self, x: &[f64], y: &[f64]) {
        let b = x.len() / self.dim;
        assert_eq!(x.len(), b * self.dim, "x block shape");
        assert_eq!(y.len(), b * self.tasks, "y block shape");
        if b == 0 {
            return;
        }
        // As a dim×b column-major matrix, x has strides (1, dim).
        let xt = View { data: x, rows: self.dim, cols: b, rs: 1, cs: self.dim };
        let xs = View { data: x, rows: b, cols: self.dim, rs: self.dim, cs: 1 };
        gemm_acc(xt, xs, &mut self.gram, 1, self.dim);
        if self.tasks > 0 {
            let ys = View { data: y, rows: b, cols: self.tasks, rs: self.tasks, cs: 1 };
            gemm_acc(xt, ys, &mut self.cross, 1, self.dim);
            for row in y.chunks_exact(self.tasks) {
                for (acc, v) in self.sum_yy.iter_mut().zip(row) {
                    *acc += v * v;
                }
            }
        }
        self.count += b as u64;
    }

    pub fn merge(&mut self, other: &GramAccumulator) {
        assert_eq!((self.dim, self.tasks), (other.dim, other.tasks), "accumulator shapes");
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
        for (a, b) in self.sum_yy.iter_mut().zip(&other.sum_yy) {
            *a += b;
        }
        self.count += other.count;
    }

    /// Solves all tasks at once. Returns `dim × tasks` coefficients
    /// (column-major) and whether the eigendecomposition fallback was used.
    pub fn solve(&self, lambda: f64) -> Result<RidgeSolution, ReadoutError> {
        solve_ridge(&self.gram, &self.cross, self.dim, self.tasks, lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    /// `dim × tasks`, column-major; column `t` is β for task `t`.
    pub beta: Vec<f64>,
    pub dim: usize,
    pub tasks: usize,
    pub eigen_fallback: bool,
}

impl RidgeSolution {
    pub fn column(&self, task: usize) -> &[f64] {
        &self.beta[task * self.dim..(task + 1) * self.dim]
    }
}

fn solve_ridge(gram: &[f64], cross: &[f64], dim: usize, tasks: usize, lambda: f64) -> Result<RidgeSolution, ReadoutError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ReadoutError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let mut a = DMatrix::from_column_slice(dim, dim, gram);
    // Symmetrize: the blocked product is exact only up to rounding.
    for j in 0..dim {
        for i in 0..j {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
        a[(j, j)] += lambda;
    }
    let rhs = DMatrix::from_column_slice(dim, tasks, cross);
    if a.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(ReadoutError::SolverFailure("non-finite Gram entries".into()));
    }
    if let Some(chol) = a.clone().cholesky() {
        let beta = chol.solve(&rhs);
        if beta.iter().all(|v| v.is_finite()) {
            return Ok(RidgeSolution { beta: beta.as_slice().to_vec(), dim, tasks, eigen_fallback: false });
        }
    }
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = max * dim as f64 * f64::EPSILON;
    let proj = eig.eigenvectors.transpose() * &rhs;
    let mut scaled = proj;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let inv = if ev > cutoff { 1.0 / ev } else { 0.0 };
        scaled.row_mut(i).scale_mut(inv);
    }
    let beta = &eig.eigenvectors * scaled;
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(ReadoutError::SolverFailure("eigendecomposition produced non-finite weights".into()));
    }
    Ok(RidgeSolution { beta: beta.as_slice().to_vec(), dim, tasks, eigen_fallback: true })
}

/// Linear readout; the last coefficient is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub eigen_fallback: bool,
}

impl Readout {
    pub fn weights(&self) -> &[f64] {
        &self.beta[..self.beta.len() - 1]
    }

    pub fn intercept(&self) -> f64 {
        self.beta[self.beta.len() - 1]
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        x.chunks_exact(self.beta.len()).map(|row| row.iter().zip(&self.beta).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Fits one task from augmented samples `x` (`samples × dim`).
pub fn fit_ridge(x: &[f64], dim: usize, y: &[f64], lambda: f64) -> Result<Readout, ReadoutError> {
    if dim == 0 || x.len() != y.len() * dim {
        return Err(ReadoutError::Alignment(format!("{} values for {} samples of width {dim}", x.len(), y.len())));
    }
    if y.len() <= dim {
        return Err(ReadoutError::InsufficientData { needed: dim + 1, available: y.len() });
    }
    let mut acc = GramAccumulator::new(dim, 1);
    for (xb, yb) in x.chunks(512 * dim).zip(y.chunks(512)) {
        acc.add_block(xb, yb);
    }
    let sol = acc.solve(lambda)?;
    Ok(Readout { beta: sol.beta, lambda, eigen_fallback: sol.eigen_fallback })
}

/// Coefficient of determination of predictions `y_hat` against `y`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64, ReadoutError> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(ReadoutError::UndefinedScore);
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

pub fn score(readout: &Readout, x_test: &[f64], y_test: &[f64]) -> Result<f64, ReadoutError> {
    if x_test.len() != y_test.len() * readout.beta.len() {
        return Err(ReadoutError::Alignment("test matrix width differs from the readout".into()));
    }
    r_squared(y_test, &readout.predict(x_test))
}

/// Scores every task of `sol` on a test pair; constant targets yield errors.
pub fn score_all(sol: &RidgeSolution, test: &DataPair) -> Vec<Result<f64, ReadoutError>> {
    let n = test.samples();
    let mut pred = vec![0.0; n * sol.tasks];
    gemm_acc(
        View { data: &test.x, rows: n, cols: sol.dim, rs: sol.dim, cs: 1 },
        View { data: &sol.beta, rows: sol.dim, cols: sol.tasks, rs: 1, cs: sol.dim },
        &mut pred,
        sol.tasks,
        1,
    );
    (0..sol.tasks)
        .map(|t| {
            let y = test.target(t);
            let yh: Vec<f64> = pred.iter().skip(t).step_by(sol.tasks).copied().collect();
            r_squared(&y, &yh)
        })
        .collect()
}

/// Per-task scores across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across trials.
    pub std: f64,
}

impl ScoreRecord {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        // Shifted by the first score so identical trials give exactly zero.
        let s0 = scores.first().copied().unwrap_or(0.0);
        let d_mean = scores.iter().map(|s| s - s0).sum::<f64>() / n;
        let d_sq = scores.iter().map(|s| (s - s0).powi(2)).sum::<f64>() / n;
        let std = (d_sq - d_mean * d_mean).max(0.0).sqrt();
        Self { scores, mean, std }
    }
}

/// Fits each training region separately and scores all on the shared test
/// set. Entry `t` is the record for task `t`.
pub fn multi_trial_score(data: &Dataset, lambda: f64) -> Result<Vec<ScoreRecord>, ReadoutError> {
    let tasks = data.test.tasks;
    let mut per_task: Vec<Vec<f64>> = vec![Vec::with_capacity(data.train.len()); tasks];
    for train in &data.train {
        let mut acc = GramAccumulator::new(train.dim, train.tasks);
        for (xb, yb) in train.x.chunks(512 * train.dim).zip(train.y.chunks(512 * train.tasks.max(1))) {
            acc.add_block(xb, yb);
        }
        let sol = acc.solve(lambda)?;
        for (t, s) in score_all(&sol, &data.test).into_iter().enumerate() {
            per_task[t].push(s?);
        }
    }
    Ok(per_task.into_iter().map(ScoreRecord::from_scores).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_plan_lengths() {
        let p = plan_splits(250, 0.01, 1.0, 1.0, 3).unwrap();
        assert_eq!((p.n_train, p.n_test, p.l_train, p.l_test), (502_000, 1_000, 502_400, 1_400));
        assert_eq!(p.margin, 400);
        assert_eq!(plan_splits(1, 0.01, 1.0, 1.0, 1).unwrap().n_train, 4000);
    }

    #[test]
    fn regions_are_disjoint_and_ordered() {
        let p = plan_splits(3, 0.1, 1.0, 1.0, 3).unwrap();
        let mut seen = vec![false; p.total_len()];
        for t in 0..3 {
            for i in p.train_range(t) {
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(p.region_of(i), Region::Train(t));
            }
        }
        for i in p.test_range() {
            assert!(!seen[i]);
            assert_eq!(p.region_of(i), Region::Test);
        }
        assert!(p.test_range().start > p.train_range(2).end);
        assert!(p.test_range().end <= p.total_len());
    }

    #[test]
    fn constant_target_gives_intercept() {
        let n = 300;
        let x: Vec<f64> = (0..n).flat_map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 1.0]).collect();
        let y = vec![2.5; n];
        let r = fit_ridge(&x, 3, &y, 1e-6).unwrap();
        assert!(r.weights().iter().map(|w| w * w).sum::<f64>().sqrt() < 1e-6);
        assert!((r.intercept() - 2.5).abs() < 1e-6);
    }

    #[test]
    fn r_squared_reference_points() {
        let y = [1.0, 2.0, 4.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&y, &[2.5; 4]).unwrap(), 0.0);
        assert_eq!(r_squared(&[1.0; 4], &y), Err(ReadoutError::UndefinedScore));
    }

    #[test]
    fn identical_trials_have_zero_spread() {
        let rec = ScoreRecord::from_scores(vec![0.7, 0.7, 0.7]);
        assert_eq!(rec.std, 0.0);
        let rec = ScoreRecord::from_scores(vec![0.1, 0.2, 0.6]);
        assert!((rec.mean - 0.3).abs() < 1e-15);
    }
}
