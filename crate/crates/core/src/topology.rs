//! Balanced random connectivity, feedforward weights and time-constant draws.

use rand::RngExt;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid network parameter: {0}")]
    InvalidParameter(String),
    #[error("profile {profile:?} with h = {h} cannot produce time constants above the floor {floor}")]
    InfeasibleFloor { profile: TauProfile, h: f64, floor: f64 },
}

/// Shape of the time-constant distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TauProfile {
    #[default]
    #[serde(alias = "log-normal")]
    Lognormal,
    Gamma,
    Normal,
    Uniform,
}

impl TauProfile {
    pub const ALL: [TauProfile; 4] = [Self::Lognormal, Self::Gamma, Self::Normal, Self::Uniform];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Lognormal => "lognormal",
            Self::Gamma => "gamma",
            Self::Normal => "normal",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lognormal" | "log-normal" => Some(Self::Lognormal),
            "gamma" => Some(Self::Gamma),
            "normal" => Some(Self::Normal),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSeeds {
    pub connectivity: u64,
    pub input: u64,
    pub tau: u64,
}

impl NetworkSeeds {
    pub fn from_scheme(scheme: &seed::SeedScheme, replicate: usize) -> Self {
        Self {
            connectivity: scheme.derive(&format!("topology/W/rep-{replicate}")),
            input: scheme.derive(&format!("topology/Wu/rep-{replicate}")),
            tau: scheme.derive(&format!("topology/tau/rep-{replicate}")),
        }
    }
}

impl Default for NetworkSeeds {
    fn default() -> Self {
        Self::from_scheme(&seed::SeedScheme::new(0), 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n: usize,
    pub p: f64,
    pub f_exc: f64,
    pub sigma0: f64,
    pub j: f64,
    pub j_u: f64,
    pub j_n: f64,
    pub k: usize,
    pub tau_mean: f64,
    pub h: f64,
    pub profile: TauProfile,
    /// Lower truncation bound for the symmetric profiles.
    pub tau_floor: f64,
    pub seeds: NetworkSeeds,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            n: 250,
            p: 0.1,
            f_exc: 0.8,
            sigma0: 1.0,
            j: 1.0,
            j_u: 1.0,
            j_n: 0.1,
            k: 3,
            tau_mean: 1.0,
            h: 0.0,
            profile: TauProfile::Lognormal,
            tau_floor: 0.02,
            seeds: NetworkSeeds::default(),
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |msg: String| Err(TopologyError::InvalidParameter(msg));
        if self.n < 2 {
            return bad(format!("N must be at least 2, got {}", self.n));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        if !(self.f_exc > 0.0 && self.f_exc < 1.0) {
            return bad(format!("f_exc must lie in (0, 1), got {}", self.f_exc));
        }
        for (name, v) in [("sigma0", self.sigma0), ("J", self.j), ("Ju", self.j_u), ("Jn", self.j_n)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.tau_mean > 0.0 && self.tau_mean.is_finite()) {
            return bad(format!("tau_mean must be positive, got {}", self.tau_mean));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return bad(format!("h must be non-negative, got {}", self.h));
        }
        Ok(())
    }

    pub fn n_exc(&self) -> usize {
        (self.f_exc * self.n as f64).round() as usize
    }

    /// Population means (excitatory, inhibitory) satisfying
    /// `f·μ_E + (1−f)·μ_I = 0` with `μ_E = 1`.
    pub fn population_means(&self) -> (f64, f64) {
        (1.0, -self.f_exc / (1.0 - self.f_exc))
    }

    pub fn recurrent_scale(&self) -> f64 {
        if self.p == 0.0 {
            0.0
        } else {
            self.j / (self.n as f64 * self.p).sqrt()
        }
    }

    pub fn input_scale(&self) -> f64 {
        self.j_u / (self.k as f64).sqrt()
    }
}

/// Compressed sparse row matrix; row `i` holds the inputs onto neuron `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, row_ptr: vec![0; n_rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, TopologyError> {
        if let Some(t) = triplets.iter().find(|t| t.0 >= n_rows || t.1 >= n_cols) {
            return Err(TopologyError::InvalidParameter(format!(
                "entry ({}, {}) outside a {n_rows}x{n_cols} matrix",
                t.0, t.1
            )));
        }
        let mut sorted = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut dedup: Vec<(usize, usize, f64)> = Vec::with_capacity(sorted.len());
        for (r, c, v) in sorted {
            match dedup.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => dedup.push((r, c, v)),
            }
        }
        let mut m = Self::empty(n_rows, n_cols);
        for &(r, c, v) in &dedup {
            m.row_ptr[r + 1] += 1;
            m.col_idx.push(c as u32);
            m.values.push(v);
        }
        for r in 0..n_rows {
            m.row_ptr[r + 1] += m.row_ptr[r];
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().map(|&c| c as usize).zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n_rows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `out = self · x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        for (i, o) in out.iter_mut().enumerate().take(self.n_rows) {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            let mut acc = 0.0;
            for (&c, &v) in self.col_idx[range.clone()].iter().zip(&self.values[range]) {
                acc += v * x[c as usize];
            }
            *o = acc;
        }
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<(usize, usize, f64)> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, &t).expect("transposed indices are in range")
    }
}

/// Recurrent weights and population labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    pub w: CsrMatrix,
    pub is_exc: Vec<bool>,
    pub warnings: Vec<String>,
}

pub fn build_connectivity(spec: &NetworkSpec) -> Result<Connectivity, TopologyError> {
    spec.validate()?;
    let n = spec.n;
    let n_exc = spec.n_exc();
    let is_exc: Vec<bool> = (0..n).map(|i| i < n_exc).collect();
    let mut warnings = Vec::new();
    if (n as f64) * spec.p < 1.0 {
        warnings.push(format!("sparse network: N·p = {} < 1", n as f64 * spec.p));
    }
    let (mu_e, mu_i) = spec.population_means();
    let scale = spec.recurrent_scale();
    let mut rng = seed::rng(spec.seeds.connectivity);
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        if spec.p > 0.0 {
            for j in 0..n {
                if i == j || !rng.random_bool(spec.p) {
                    continue;
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                let mu = if is_exc[j] { mu_e } else { mu_i };
                col_idx.push(j as u32);
                values.push((mu + spec.sigma0 * z) * scale);
            }
        }
        row_ptr.push(values.len());
    }
    let w = CsrMatrix { n_rows: n, n_cols: n, row_ptr, col_idx, values };
    Ok(Connectivity { w, is_exc, warnings })
}

/// Dense N×K feedforward matrix, row-major.
pub fn build_input_weights(spec: &NetworkSpec) -> Result<Vec<f64>, TopologyError> {
    spec.validate()?;
    let scale = spec.input_scale();
    let mut rng = seed::rng(spec.seeds.input);
    Ok((0..spec.n * spec.k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSample {
    pub values: Vec<f64>,
    /// Draws discarded for falling below the floor or being non-positive.
    pub rejections: usize,
}

/// Moment-matched parameters `(μ, σ)` of the underlying normal for a
/// lognormal with mean `m` and variance `v`.
pub fn lognormal_params(m: f64, v: f64) -> (f64, f64) {
    ((m * m / (m * m + v).sqrt()).ln(), (1.0 + v / (m * m)).ln().sqrt())
}

/// Moment-matched `(shape, scale)` of a gamma with mean `m` and variance `v`.
pub fn gamma_params(m: f64, v: f64) -> (f64, f64) {
    (m * m / v, v / m)
}

/// Draws `n` time constants with mean `tau_mean` and variance `h·tau_mean²`.
pub fn sample_time_constants(
    n: usize,
    tau_mean: f64,
    h: f64,
    profile: TauProfile,
    floor: f64,
    seed: u64,
) -> Result<TauSample, TopologyError> {
    if !(tau_mean > 0.0) || !(h >= 0.0) {
        return Err(TopologyError::InvalidParameter(format!(
            "need tau_mean > 0 and h >= 0, got {tau_mean} and {h}"
        )));
    }
    if h == 0.0 {
        return Ok(TauSample { values: vec![tau_mean; n], rejections: 0 });
    }
    let m = tau_mean;
    let v = h * m * m;
    let sd = v.sqrt();
    let mut rng = seed::rng(seed);
    let mut rejections = 0;
    let mut values = Vec::with_capacity(n);
    match profile {
        TauProfile::Lognormal => {
            let (mu, sigma) = lognormal_params(m, v);
            let dist = LogNormal::new(mu, sigma).map_err(|e| TopologyError::InvalidParameter(e.to_string()))?;
            while values.len() < n {
                let x: f64 = dist.sample(&mut rng);
                if x > 0.0 && x.is_finite() {
                    values.push(x);
                } else {
                    rejections += 1;
                }
            }
        }
        TauProfile::Gamma => {
            let (shape, scale) = gamma_params(m, v);
            let dist = Gamma::new(shape, scale).map_err(|e| TopologyError::InvalidParameter(e.to_string()))?;
            while values.len() < n {
                let x: f64 = dist.sample(&mut rng);
                if x > 0.0 && x.is_finite() {
                    values.push(x);
                } else {
                    rejections += 1;
                }
            }
        }
        TauProfile::Normal | TauProfile::Uniform => {
            let half_width = (3.0 * v).sqrt();
            if profile == TauProfile::Uniform && m + half_width <= floor {
                return Err(TopologyError::InfeasibleFloor { profile, h, floor });
            }
            while values.len() < n {
                let x = if profile == TauProfile::Normal {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sd * z
                } else {
                    rng.random_range(m - half_width..m + half_width)
                };
                if x >= floor && x > 0.0 {
                    values.push(x);
                } else {
                    rejections += 1;
                    if rejections > 1000 * n.max(1) {
                        return Err(TopologyError::InfeasibleFloor { profile, h, floor });
                    }
                }
            }
        }
    }
    Ok(TauSample { values, rejections })
}

/// Immutable network instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub w: CsrMatrix,
    /// N×K row-major.
    pub w_in: Vec<f64>,
    pub tau: Vec<f64>,
    pub is_exc: Vec<bool>,
    pub tau_rejections: usize,
    pub warnings: Vec<String>,
}

impl Network {
    pub fn build(spec: &NetworkSpec) -> Result<Self, TopologyError> {
        let conn = build_connectivity(spec)?;
        let w_in = build_input_weights(spec)?;
        let taus = sample_time_constants(spec.n, spec.tau_mean, spec.h, spec.profile, spec.tau_floor, spec.seeds.tau)?;
        let mut warnings = conn.warnings;
        if taus.rejections > 0 {
            warnings.push(format!("{} time-constant draws rejected below the floor", taus.rejections));
        }
        Ok(Self {
            spec: spec.clone(),
            w: conn.w,
            w_in,
            tau: taus.values,
            is_exc: conn.is_exc,
            tau_rejections: taus.rejections,
            warnings,
        })
    }

    /// Assembles a network from explicit parts (deserialization, tests).
    pub fn from_parts(
        spec: NetworkSpec,
        w: CsrMatrix,
        w_in: Vec<f64>,
        tau: Vec<f64>,
    ) -> Result<Self, TopologyError> {
        let n = spec.n;
        if w.n_rows() != n || w.n_cols() != n || w_in.len() != n * spec.k || tau.len() != n {
            return Err(TopologyError::InvalidParameter("part shapes disagree with the spec".into()));
        }
        if tau.iter().any(|&t| !(t > 0.0)) {
            return Err(TopologyError::InvalidParameter("time constants must be positive".into()));
        }
        let n_exc = spec.n_exc();
        Ok(Self {
            is_exc: (0..n).map(|i| i < n_exc).collect(),
            spec,
            w,
            w_in,
            tau,
            tau_rejections: 0,
            warnings: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn tau_min(&self) -> f64 {
        self.tau.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.spec.h > 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> NetworkSpec {
        NetworkSpec { n, ..Default::default() }
    }

    #[test]
    fn baseline_synapse_count_is_binomial() {
        let net = Network::build(&spec(250)).unwrap();
        let trials = 250.0 * 249.0;
        let mean = trials * 0.1;
        let sd = (trials * 0.1 * 0.9f64).sqrt();
        assert!((net.w.nnz() as f64 - mean).abs() < 3.0 * sd, "nnz {}", net.w.nnz());
        assert_eq!(net.is_exc.iter().filter(|&&e| e).count(), 200);
    }

    #[test]
    fn no_autapses() {
        let net = Network::build(&NetworkSpec { p: 1.0, n: 30, ..Default::default() }).unwrap();
        for i in 0..30 {
            assert_eq!(net.w.get(i, i), 0.0);
        }
        assert_eq!(net.w.nnz(), 30 * 29);
    }

    #[test]
    fn empty_graph_when_p_is_zero() {
        let conn = build_connectivity(&NetworkSpec { p: 0.0, ..Default::default() }).unwrap();
        assert_eq!(conn.w.nnz(), 0);
        assert!(!conn.warnings.is_empty());
    }

    #[test]
    fn balance_means() {
        let (e, i) = spec(10).population_means();
        assert_eq!(e, 1.0);
        assert!((i + 4.0).abs() < 1e-12);
        assert!((0.8 * e + 0.2 * i).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gain_gives_zero_matrix() {
        let w = build_input_weights(&NetworkSpec { j_u: 0.0, ..Default::default() }).unwrap();
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_form_profile_parameters() {
        let (shape, scale) = gamma_params(1.0, 10.0);
        assert!((shape - 0.1).abs() < 1e-15 && (scale - 10.0).abs() < 1e-15);
        let (mu, sigma) = lognormal_params(1.0, 1.0);
        assert!((mu - (-0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((sigma * sigma - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_taus_are_constant() {
        let s = sample_time_constants(100, 1.0, 0.0, TauProfile::Gamma, 0.02, 1).unwrap();
        assert!(s.values.iter().all(|&t| t == 1.0));
        assert_eq!(s.rejections, 0);
    }

    #[test]
    fn symmetric_profiles_respect_floor() {
        for profile in [TauProfile::Normal, TauProfile::Uniform] {
            let s = sample_time_constants(2000, 1.0, 10.0, profile, 0.02, 9).unwrap();
            assert!(s.values.iter().all(|&t| t >= 0.02));
            assert!(s.rejections > 0);
        }
    }

    #[test]
    fn csr_triplet_round_trip_and_product() {
        let t = vec![(0, 1, 2.0), (2, 0, -1.0), (1, 2, 0.5), (0, 1, 1.0)];
        let m = CsrMatrix::from_triplets(3, 3, &t).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), 3.0);
        let mut out = vec![0.0; 3];
        m.mul_vec(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!(out, vec![6.0, 1.5, -1.0]);
        assert_eq!(m.transpose().get(1, 0), 3.0);
        assert_eq!(CsrMatrix::from_triplets(3, 3, &m.triplets()).unwrap(), m);
    }

    #[test]
    fn construction_is_deterministic() {
        let s = NetworkSpec { h: 10.0, ..Default::default() };
        assert_eq!(Network::build(&s).unwrap(), Network::build(&s).unwrap());
    }
}
