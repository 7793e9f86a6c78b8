//! The task family `y = u_k(t + Δ)^d`, its complexity and similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimgen::Stimulus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("component index {k} is outside 1..={dim}")]
    IndexOutOfRange { k: usize, dim: usize },
    #[error("complexity is undefined for a zero-norm series")]
    UndefinedComplexity,
    #[error("similarity is undefined for a constant series")]
    UndefinedSimilarity,
    #[error("invalid task grid: {0}")]
    InvalidGrid(String),
}

/// One task: component `k` (1-based), shift `delta`, exponent `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub k: usize,
    pub delta: f64,
    pub d: u32,
}

impl TaskSpec {
    pub fn new(k: usize, delta: f64, d: u32) -> Self {
        Self { k, delta, d }
    }

    pub fn identity(k: usize) -> Self {
        Self { k, delta: 0.0, d: 1 }
    }

    fn check(&self, dim: usize) -> Result<(), TaskError> {
        if self.k == 0 || self.k > dim {
            return Err(TaskError::IndexOutOfRange { k: self.k, dim });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGrid {
    pub k_set: Vec<usize>,
    pub d_set: Vec<u32>,
    pub delta_count: usize,
    pub delta_range: (f64, f64),
}

impl Default for TaskGrid {
    fn default() -> Self {
        Self { k_set: vec![1, 2, 3], d_set: (1..=6).collect(), delta_count: 49, delta_range: (-2.0, 2.0) }
    }
}

impl TaskGrid {
    /// The reduced grid used for quick comparisons: k ∈ {1,2}, d ∈ {1,2,3},
    /// 21 shifts on [−2, 2].
    pub fn reduced() -> Self {
        Self { k_set: vec![1, 2], d_set: vec![1, 2, 3], delta_count: 21, delta_range: (-2.0, 2.0) }
    }

    pub fn deltas(&self) -> Vec<f64> {
        linspace(self.delta_range.0, self.delta_range.1, self.delta_count)
    }
}

/// `count` evenly spaced points including both ends.
pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..count).map(|i| a + (b - a) * i as f64 / (count - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<TaskSpec>,
    pub grid: TaskGrid,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Cartesian product ordered by k, then d, then Δ.
pub fn generate_task_grid(grid: &TaskGrid) -> Result<TaskSet, TaskError> {
    if grid.delta_count == 0 {
        return Err(TaskError::InvalidGrid("at least one shift is required".into()));
    }
    if grid.d_set.contains(&0) || grid.k_set.contains(&0) {
        return Err(TaskError::InvalidGrid("k and d are 1-based".into()));
    }
    let deltas = grid.deltas();
    let mut tasks = Vec::with_capacity(grid.k_set.len() * grid.d_set.len() * deltas.len());
    for &k in &grid.k_set {
        for &d in &grid.d_set {
            for &delta in &deltas {
                tasks.push(TaskSpec { k, delta, d });
            }
        }
    }
    Ok(TaskSet { tasks, grid: grid.clone() })
}

/// `u_k(t + Δ)` at each time in `times`.
pub fn shifted_input(k: usize, delta: f64, stim: &Stimulus, times: &[f64]) -> Result<Vec<f64>, TaskError> {
    TaskSpec::new(k, delta, 1).check(stim.dim())?;
    Ok(times.iter().map(|&t| stim.sample(t + delta, k - 1)).collect())
}

pub fn eval_task(spec: &TaskSpec, stim: &Stimulus, times: &[f64]) -> Result<Vec<f64>, TaskError> {
    spec.check(stim.dim())?;
    let d = spec.d as i32;
    Ok(times.iter().map(|&t| stim.sample(t + spec.delta, spec.k - 1).powi(d)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − |cos(y, y0)|` between raw (uncentred) series.
pub fn complexity_of(y: &[f64], y0: &[f64]) -> Result<f64, TaskError> {
    let (ny, n0) = (dot(y, y).sqrt(), dot(y0, y0).sqrt());
    if !(ny > 0.0 && n0 > 0.0) {
        return Err(TaskError::UndefinedComplexity);
    }
    let cos = (dot(y, y0) / (ny * n0)).clamp(-1.0, 1.0);
    Ok(1.0 - cos.abs())
}

pub fn complexity(spec: &TaskSpec, stim: &Stimulus, times: &[f64]) -> Result<f64, TaskError> {
    let y = eval_task(spec, stim, times)?;
    if spec.delta == 0.0 && spec.d == 1 {
        // Identical series; skip the rounding in the cosine.
        let n = dot(&y, &y);
        return if n > 0.0 { Ok(0.0) } else { Err(TaskError::UndefinedComplexity) };
    }
    let y0 = eval_task(&TaskSpec::identity(spec.k), stim, times)?;
    complexity_of(&y, &y0)
}

/// Cosine between mean-subtracted series.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, TaskError> {
    let center = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        v.iter().map(|x| x - m).collect()
    };
    let (ca, cb) = (center(a), center(b));
    let (na, nb) = (dot(&ca, &ca).sqrt(), dot(&cb, &cb).sqrt());
    if !(na > 0.0 && nb > 0.0) {
        return Err(TaskError::UndefinedSimilarity);
    }
    // Symmetric by construction: the product is computed in one order.
    Ok((dot(&ca, &cb) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn name(&self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Half-open thirds: `[0, 1/3)`, `[1/3, 2/3)`, `[2/3, 1]`.
pub fn complexity_tier(c: f64) -> Tier {
    if c < 1.0 / 3.0 {
        Tier::Easy
    } else if c < 2.0 / 3.0 {
        Tier::Medium
    } else {
        Tier::Hard
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_stimulus() -> Stimulus {
        let c0: Vec<f64> = (0..101).map(|i| (i as f64 * 0.1).sin()).collect();
        let c1: Vec<f64> = (0..101).map(|i| -1.0 + 0.0 * i as f64).collect();
        Stimulus::from_parts(vec![c0, c1], 0.1, 1.0, 1.0, vec![1.0, 1.0], vec![]).unwrap()
    }

    #[test]
    fn default_grid_has_882_tasks() {
        let set = generate_task_grid(&TaskGrid::default()).unwrap();
        assert_eq!(set.len(), 882);
        let d = TaskGrid::default().deltas();
        assert!((d[1] - d[0] - 4.0 / 48.0).abs() < 1e-15);
        assert_eq!(generate_task_grid(&TaskGrid::reduced()).unwrap().len(), 126);
    }

    #[test]
    fn singleton_grid() {
        let g = TaskGrid { k_set: vec![2], d_set: vec![3], delta_count: 1, delta_range: (0.5, 0.5) };
        let set = generate_task_grid(&g).unwrap();
        assert_eq!(set.tasks, vec![TaskSpec::new(2, 0.5, 3)]);
    }

    #[test]
    fn identity_and_even_power() {
        let stim = ramp_stimulus();
        let times: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.1).collect();
        let y = eval_task(&TaskSpec::identity(1), &stim, &times).unwrap();
        for (v, &t) in y.iter().zip(&times) {
            assert_eq!(*v, stim.sample(t, 0));
        }
        let sq = eval_task(&TaskSpec::new(2, 0.3, 2), &stim, &times).unwrap();
        assert!(sq.iter().all(|&v| v == 1.0));
        assert!(matches!(
            eval_task(&TaskSpec::new(3, 0.0, 1), &stim, &times),
            Err(TaskError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn identity_complexity_is_zero() {
        let stim = ramp_stimulus();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        assert_eq!(complexity(&TaskSpec::identity(1), &stim, &times).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_and_antipodal_series() {
        let n = 1000;
        let s: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64 * 3.0).sin()).collect();
        let c: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / n as f64 * 3.0).cos()).collect();
        assert!((complexity_of(&s, &c).unwrap() - 1.0).abs() < 1e-10);
        assert!(similarity(&s, &c).unwrap().abs() < 1e-10);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        assert!((similarity(&s, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((similarity(&s, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(complexity_of(&s, &c).unwrap(), complexity_of(&neg, &c).unwrap());
        assert_eq!(similarity(&[1.0, 1.0], &s[..2]), Err(TaskError::UndefinedSimilarity));
    }

    #[test]
    fn tiers() {
        assert_eq!(complexity_tier(0.0), Tier::Easy);
        assert_eq!(complexity_tier(1.0 / 3.0), Tier::Medium);
        assert_eq!(complexity_tier(0.5), Tier::Medium);
        assert_eq!(complexity_tier(2.0 / 3.0), Tier::Hard);
        assert_eq!(complexity_tier(1.0), Tier::Hard);
    }
}
