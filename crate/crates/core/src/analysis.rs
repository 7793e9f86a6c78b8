//! Task–state overlap and participation ratio.
//!
//! Two routes share one decomposition: the direct route works on a
//! materialized [`StateMatrix`], the moments route on the sufficient
//! statistics of a [`GramAccumulator`] built from augmented states
//! `[x, 1]`, so the full state never has to be kept in memory.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::StateMatrix;
use crate::linalg::{gemm_acc, View};
use crate::readout::GramAccumulator;

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("state has zero variance after centering")]
    DegenerateState,
    #[error("overlap is undefined for a constant target")]
    UndefinedOverlap,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Principal directions of a centered state, ordered by decreasing
/// variance. Each direction's largest-magnitude loading is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Scatter eigenvalues (sums of squares, not divided by the count).
    pub eigenvalues: Vec<f64>,
    /// `n × n`, column-major; column `i` is direction `i`.
    pub directions: Vec<f64>,
    pub n: usize,
    pub retained: usize,
    pub variance_captured: f64,
}

impl Decomposition {
    pub fn direction(&self, i: usize) -> &[f64] {
        &self.directions[i * self.n..(i + 1) * self.n]
    }

    pub fn participation_ratio(&self) -> f64 {
        participation_ratio_from_variances(&self.eigenvalues)
    }
}

fn decompose_scatter(scatter: DMatrix<f64>, variance_target: f64) -> Result<Decomposition, AnalysisError> {
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(AnalysisError::InvalidParameter(format!("variance target {variance_target} not in (0, 1]")));
    }
    let n = scatter.nrows();
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(AnalysisError::DegenerateState);
    }
    let mut directions = Vec::with_capacity(n * n);
    for &i in &order {
        let col = eig.eigenvectors.column(i);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        directions.extend(col.iter().map(|v| sign * v));
    }
    let mut cum = 0.0;
    let mut retained = n;
    for (i, ev) in eigenvalues.iter().enumerate() {
        cum += ev;
        if cum >= variance_target * total {
            retained = i + 1;
            break;
        }
    }
    let captured = eigenvalues[..retained].iter().sum::<f64>() / total;
    Ok(Decomposition { eigenvalues, directions, n, retained, variance_captured: captured })
}

/// Retained components as time series, component-major (`retained × len`).
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub series: Vec<f64>,
    pub len: usize,
    pub decomposition: Decomposition,
}

impl Components {
    pub fn count(&self) -> usize {
        self.series.len() / self.len.max(1)
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.series[i * self.len..(i + 1) * self.len]
    }

    /// Builds components from explicit orthogonal series (for example after
    /// re-mixing). The decomposition is carried along unchanged.
    pub fn with_series(&self, series: Vec<f64>) -> Result<Self, AnalysisError> {
        if series.len() % self.len.max(1) != 0 {
            return Err(AnalysisError::Shape("series length is not a multiple of the sample count".into()));
        }
        Ok(Self { series, len: self.len, decomposition: self.decomposition.clone() })
    }
}

fn centered(x: &StateMatrix) -> Result<(Vec<f64>, Vec<f64>), AnalysisError> {
    let (n, l) = (x.n(), x.len());
    if n == 0 || l == 0 {
        return Err(AnalysisError::DegenerateState);
    }
    let mut mean = vec![0.0; n];
    for s in 0..l {
        for (m, v) in mean.iter_mut().zip(x.sample(s)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= l as f64);
    let mut c = x.as_slice().to_vec();
    for row in c.chunks_exact_mut(n) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((c, mean))
}

fn scatter_of(c: &[f64], n: usize, l: usize) -> DMatrix<f64> {
    let mut s = vec![0.0; n * n];
    let ct = View { data: c, rows: n, cols: l, rs: 1, cs: n };
    let cs = View { data: c, rows: l, cols: n, rs: n, cs: 1 };
    gemm_acc(ct, cs, &mut s, 1, n);
    let mut m = DMatrix::from_column_slice(n, n, &s);
    symmetrize(&mut m);
    m
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Principal-component time series of the centered state.
pub fn decorrelate_state(x: &StateMatrix, variance_target: f64) -> Result<Components, AnalysisError> {
    let (n, l) = (x.n(), x.len());
    let (c, _) = centered(x)?;
    let dec = decompose_scatter(scatter_of(&c, n, l), variance_target)?;
    let r = dec.retained;
    // series (r × l, row-major) = Eᵣᵀ (r × n) · Cᵀ (n × l)
    let mut series = vec![0.0; r * l];
    gemm_acc(
        View { data: &dec.directions, rows: r, cols: n, rs: n, cs: 1 },
        View { data: &c, rows: n, cols: l, rs: 1, cs: n },
        &mut series,
        l,
        1,
    );
    Ok(Components { series, len: l, decomposition: dec })
}

/// Sum of squared cosines between the mean-subtracted target and each
/// component.
pub fn task_state_overlap(y: &[f64], comps: &Components) -> Result<f64, AnalysisError> {
    if y.len() != comps.len {
        return Err(AnalysisError::Shape(format!("target has {} samples, components {}", y.len(), comps.len)));
    }
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let yy: f64 = yc.iter().map(|v| v * v).sum();
    if !(yy > 0.0) {
        return Err(AnalysisError::UndefinedOverlap);
    }
    let mut total = 0.0;
    for i in 0..comps.count() {
        let z = comps.component(i);
        let zz: f64 = z.iter().map(|v| v * v).sum();
        if zz > 0.0 {
            let yz: f64 = yc.iter().zip(z).map(|(a, b)| a * b).sum();
            total += yz * yz / (yy * zz);
        }
    }
    Ok(total)
}

/// `(Σσ²)² / Σσ⁴` from singular values.
pub fn participation_ratio_from_singular(sigma: &[f64]) -> f64 {
    let sq: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    participation_ratio_from_variances(&sq)
}

/// `(Σλ)² / Σλ²` from squared singular values.
pub fn participation_ratio_from_variances(lambda: &[f64]) -> f64 {
    let s1: f64 = lambda.iter().sum();
    let s2: f64 = lambda.iter().map(|v| v * v).sum();
    s1 * s1 / s2
}

pub fn participation_ratio(x: &StateMatrix) -> Result<f64, AnalysisError> {
    let (n, l) = (x.n(), x.len());
    let (c, _) = centered(x)?;
    Ok(decompose_scatter(scatter_of(&c, n, l), 1.0)?.participation_ratio())
}

/// Centered second moments recovered from a Gram accumulator over
/// augmented samples whose last coordinate is the constant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub count: f64,
    pub mean_x: Vec<f64>,
    /// `Σ (x − x̄)(x − x̄)ᵀ`, column-major.
    pub scatter: Vec<f64>,
}

pub fn moments_from_gram(acc: &GramAccumulator) -> Result<Moments, AnalysisError> {
    let dim = acc.dim();
    if dim < 2 || acc.count() == 0 {
        return Err(AnalysisError::DegenerateState);
    }
    let n = dim - 1;
    let g = acc.gram();
    let count = g[n * dim + n];
    if (count - acc.count() as f64).abs() > 1e-6 * count {
        return Err(AnalysisError::Shape("last coordinate is not the constant 1".into()));
    }
    let mean_x: Vec<f64> = (0..n).map(|i| g[n * dim + i] / count).collect();
    let mut scatter = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            scatter[j * n + i] = g[j * dim + i] - count * mean_x[i] * mean_x[j];
        }
    }
    Ok(Moments { n, count, mean_x, scatter })
}

pub fn analyze_moments(m: &Moments, variance_target: f64) -> Result<Decomposition, AnalysisError> {
    let mut s = DMatrix::from_column_slice(m.n, m.n, &m.scatter);
    symmetrize(&mut s);
    decompose_scatter(s, variance_target)
}

/// Overlap of task `task` computed from the accumulator's cross moments.
pub fn overlap_from_moments(
    acc: &GramAccumulator,
    m: &Moments,
    dec: &Decomposition,
    task: usize,
) -> Result<f64, AnalysisError> {
    if task >= acc.tasks() || dec.n != m.n {
        return Err(AnalysisError::Shape(format!("task {task} of {}", acc.tasks())));
    }
    let dim = acc.dim();
    let n = m.n;
    let cross = &acc.cross()[task * dim..(task + 1) * dim];
    let sum_y = cross[n];
    let mean_y = sum_y / m.count;
    let syy = acc.sum_yy()[task] - m.count * mean_y * mean_y;
    if !(syy > 1e-300) || syy <= 1e-12 * acc.sum_yy()[task] {
        return Err(AnalysisError::UndefinedOverlap);
    }
    let sxy: Vec<f64> = (0..n).map(|i| cross[i] - m.count * m.mean_x[i] * mean_y).collect();
    let mut total = 0.0;
    for i in 0..dec.retained {
        let lam = dec.eigenvalues[i];
        if lam > 0.0 {
            let p: f64 = dec.direction(i).iter().zip(&sxy).map(|(a, b)| a * b).sum();
            total += p * p / (syy * lam);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub overlaps: Vec<f64>,
    pub participation_ratio: f64,
    pub retained: usize,
    pub variance_captured: f64,
}

/// Overlaps for every task in the accumulator plus d_PR of the full state.
/// Tasks whose target is constant get `NaN`.
pub fn alignment_from_gram(acc: &GramAccumulator, variance_target: f64) -> Result<AlignmentReport, AnalysisError> {
    let m = moments_from_gram(acc)?;
    let dec = analyze_moments(&m, variance_target)?;
    let overlaps = (0..acc.tasks())
        .map(|t| overlap_from_moments(acc, &m, &dec, t).unwrap_or(f64::NAN))
        .collect();
    Ok(AlignmentReport {
        overlaps,
        participation_ratio: dec.participation_ratio(),
        retained: dec.retained,
        variance_captured: dec.variance_captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, rows: &[Vec<f64>]) -> StateMatrix {
        let l = rows[0].len();
        let data: Vec<f64> = (0..l).flat_map(|s| rows.iter().map(move |r| r[s])).collect();
        StateMatrix::new(n, 0.1, 0.0, data).unwrap()
    }

    fn wave(l: usize, f: f64, phase: f64) -> Vec<f64> {
        (0..l).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / l as f64 + phase).sin()).collect()
    }

    #[test]
    fn participation_ratio_reference_values() {
        assert!((participation_ratio_from_singular(&[2.0, 1.0]) - 25.0 / 17.0).abs() < 1e-12);
        assert_eq!(participation_ratio_from_singular(&[3.0, 3.0, 3.0, 3.0]), 4.0);
        assert_eq!(participation_ratio_from_singular(&[5.0, 0.0, 0.0]), 1.0);
    }

    #[test]
    fn orthogonal_rows_are_recovered() {
        let l = 400;
        let a: Vec<f64> = wave(l, 3.0, 0.0).iter().map(|v| 3.0 * v).collect();
        let b = wave(l, 7.0, 0.0);
        let x = state(2, &[b.clone(), a.clone()]);
        let c = decorrelate_state(&x, 0.999).unwrap();
        assert_eq!(c.count(), 2);
        for (comp, want) in [(c.component(0), &a), (c.component(1), &b)] {
            let err: f64 = comp.iter().zip(want.iter()).map(|(p, q)| (p.abs() - q.abs()).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "err {err}");
        }
    }

    #[test]
    fn small_third_direction_is_dropped() {
        let l = 1000;
        let a = wave(l, 2.0, 0.0);
        let b = wave(l, 5.0, 0.3);
        let tiny: Vec<f64> = wave(l, 11.0, 0.0).iter().map(|v| v * 0.01).collect();
        let mix = |i: usize| a[i] + 0.5 * b[i] + tiny[i];
        let rows = vec![a.clone(), b.clone(), (0..l).map(mix).collect()];
        let c = decorrelate_state(&state(3, &rows), 0.999).unwrap();
        assert_eq!(c.decomposition.retained, 2);
        let g01: f64 = c.component(0).iter().zip(c.component(1)).map(|(p, q)| p * q).sum();
        assert!(g01.abs() < 1e-8 * c.decomposition.eigenvalues[0]);
    }

    #[test]
    fn overlap_extremes() {
        let l = 600;
        let a = wave(l, 2.0, 0.0);
        let b = wave(l, 4.0, 1.0);
        let c = decorrelate_state(&state(2, &[a.clone(), b]), 0.999).unwrap();
        let y: Vec<f64> = c.component(0).iter().map(|v| 2.0 * v + 5.0).collect();
        assert!((task_state_overlap(&y, &c).unwrap() - 1.0).abs() < 1e-9);
        let out = wave(l, 9.0, 0.0);
        assert!(task_state_overlap(&out, &c).unwrap() < 1e-9);
        assert_eq!(task_state_overlap(&vec![1.0; l], &c), Err(AnalysisError::UndefinedOverlap));
    }

    #[test]
    fn zero_state_is_degenerate() {
        let x = StateMatrix::new(2, 0.1, 0.0, vec![0.5; 20]).unwrap();
        assert_eq!(participation_ratio(&x), Err(AnalysisError::DegenerateState));
    }
}
