//! Static and dynamic cost models, the score remap and the minimal-cost
//! frontier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostUnit {
    FlopWords,
    Atp,
    Joules,
}

impl CostUnit {
    pub fn name(&self) -> &'static str {
        match self {
            CostUnit::FlopWords => "flop+words",
            CostUnit::Atp => "ATP",
            CostUnit::Joules => "joules",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "static")]
    pub static_cost: f64,
    pub dynamic: f64,
    pub total: f64,
    pub unit: CostUnit,
    pub model: String,
    pub params: Vec<(String, f64)>,
    /// Caveats about the model, carried into exported metadata.
    pub notes: Vec<String>,
}

/// Per-step FLOP multipliers for the neuron update, recurrent and
/// feed-forward products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopConstants {
    pub c_v: f64,
    pub c_r: f64,
    pub c_f: f64,
}

impl Default for FlopConstants {
    fn default() -> Self {
        Self { c_v: 4.0, c_r: 2.0, c_f: 2.0 }
    }
}

/// Memory words and FLOPs of a simulated rate network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCost {
    pub memory_words: f64,
    pub flops: f64,
}

impl RateCost {
    /// Memory is the static term and FLOPs the dynamic one.
    pub fn report(&self, params: Vec<(String, f64)>) -> CostReport {
        CostReport {
            static_cost: self.memory_words,
            dynamic: self.flops,
            total: self.memory_words + self.flops,
            unit: CostUnit::FlopWords,
            model: "rate-flops".into(),
            params,
            notes: Vec::new(),
        }
    }
}

pub fn rate_cost(n: usize, k: usize, p: f64, steps: u64, heterogeneous: bool, c: &FlopConstants) -> RateCost {
    let (nf, kf) = (n as f64, k as f64);
    let synapses = (nf * nf * p).round();
    let taus = if heterogeneous { nf } else { 1.0 };
    let memory_words = nf + kf + synapses + nf * kf + taus;
    let flops = steps as f64 * (c.c_v * nf + c.c_r * nf * nf * p + c.c_f * nf * kf);
    RateCost { memory_words, flops }
}

pub const ATP_GLIA_RESTING: f64 = 102e6;
pub const ATP_NEURON_RESTING: f64 = 342e6;
pub const ATP_ACTION_POTENTIAL: f64 = 120e6;
pub const ATP_SYNAPTIC: f64 = 12.4e3;
pub const ATP_GLUTAMATE_RECYCLING: f64 = 140e3;
pub const ATP_PRESYNAPTIC_CALCIUM: f64 = 11e3;
pub const HOUSEKEEPING_FACTOR: f64 = 4.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtpInputs {
    pub n: usize,
    pub p: f64,
    /// Mean firing rate in Hz.
    pub nu: f64,
    pub j: f64,
    /// Duration in seconds.
    pub t: f64,
    pub n_glia: usize,
    pub release_probability: f64,
}

impl AtpInputs {
    /// Glia count equal to the neuron count and deterministic release.
    pub fn new(n: usize, p: f64, nu: f64, j: f64, t: f64) -> Self {
        Self { n, p, nu, j, t, n_glia: n, release_probability: 1.0 }
    }
}

/// Resting and activity terms of the ATP consumption rate, per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtpRate {
    pub resting: f64,
    pub action_potentials: f64,
    pub synaptic: f64,
}

impl AtpRate {
    pub fn total(&self) -> f64 {
        self.resting + self.action_potentials + self.synaptic
    }
}

pub fn atp_rate(a: &AtpInputs) -> Result<AtpRate, EnergyError> {
    for (name, v) in [("p", a.p), ("nu", a.nu), ("J", a.j), ("T", a.t), ("r", a.release_probability)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(EnergyError::Domain(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    let n = a.n as f64;
    let resting = ATP_GLIA_RESTING * a.n_glia as f64 + ATP_NEURON_RESTING * n;
    let action_potentials = ATP_ACTION_POTENTIAL * n * a.nu;
    let per_event = ATP_SYNAPTIC + ATP_GLUTAMATE_RECYCLING + ATP_PRESYNAPTIC_CALCIUM;
    let synaptic = per_event * n * n * a.p * a.nu * a.release_probability * a.j.sqrt();
    Ok(AtpRate { resting, action_potentials, synaptic })
}

/// ATP over the run. The static part is resting consumption; the
/// housekeeping surcharge on resting is counted as dynamic.
pub fn atp_cost(a: &AtpInputs) -> Result<CostReport, EnergyError> {
    let rate = atp_rate(a)?;
    let total = HOUSEKEEPING_FACTOR * rate.total() * a.t;
    let static_cost = rate.resting * a.t;
    Ok(CostReport {
        static_cost,
        dynamic: total - static_cost,
        total,
        unit: CostUnit::Atp,
        model: "atp".into(),
        params: vec![
            ("N".into(), a.n as f64),
            ("p".into(), a.p),
            ("nu".into(), a.nu),
            ("J".into(), a.j),
            ("T".into(), a.t),
            ("N_glia".into(), a.n_glia as f64),
            ("r".into(), a.release_probability),
        ],
        notes: vec!["resting terms: 102e6 per glial cell and 342e6 per neuron, as in the rate equation; \
                     the per-cell labels in the source list are swapped"
            .into()],
    })
}

/// Constant drive above reset that makes a refractory-free LIF neuron with
/// membrane time `tau_m` fire at `nu`.
pub fn emulation_bias(nu: f64, v_thr: f64, tau_m: f64) -> Result<f64, EnergyError> {
    if !(nu > 0.0) || !nu.is_finite() || !(tau_m > 0.0) {
        return Err(EnergyError::Domain(format!("need nu > 0 and tau_m > 0, got nu={nu}, tau_m={tau_m}")));
    }
    Ok(v_thr / -(-1.0 / (nu * tau_m)).exp_m1())
}

pub fn remap_score(s: f64) -> f64 {
    (s - 1.0).exp()
}

/// Remapped score per unit cost. The quantity is a convention, not a
/// physical efficiency.
pub fn efficiency(score: f64, total_cost: f64) -> f64 {
    remap_score(score) / total_cost
}

/// Externally measured hardware constants for a joule-based estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JouleModel {
    /// Watts.
    pub static_power: f64,
    pub energy_per_synaptic_event: f64,
    pub energy_per_spike: f64,
}

/// Activity counts of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub duration: f64,
    pub spikes: f64,
    pub synaptic_events: f64,
}

pub trait CostModel {
    fn cost(&self, activity: &Activity) -> Result<CostReport, EnergyError>;
}

impl CostModel for JouleModel {
    fn cost(&self, a: &Activity) -> Result<CostReport, EnergyError> {
        let vals = [self.static_power, self.energy_per_synaptic_event, self.energy_per_spike, a.duration, a.spikes, a.synaptic_events];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(EnergyError::Domain("joule model inputs must be finite and non-negative".into()));
        }
        let static_cost = self.static_power * a.duration;
        let dynamic = self.energy_per_spike * a.spikes + self.energy_per_synaptic_event * a.synaptic_events;
        Ok(CostReport {
            static_cost,
            dynamic,
            total: static_cost + dynamic,
            unit: CostUnit::Joules,
            model: "joule".into(),
            params: vec![
                ("static_power".into(), self.static_power),
                ("energy_per_synaptic_event".into(), self.energy_per_synaptic_event),
                ("energy_per_spike".into(), self.energy_per_spike),
            ],
            notes: Vec::new(),
        })
    }
}

pub const DEFAULT_FRONTIER_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub bin: usize,
    pub center: f64,
    pub min_cost: f64,
    pub count: usize,
}

/// Bin of `score` among `bins` uniform bins on `[lo, hi]`; the top edge
/// belongs to the last bin.
pub fn score_bin(score: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((score - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Minimum total cost per score bin over `(score, cost)` records. Records
/// with non-finite entries are ignored; empty bins are omitted.
pub fn min_cost_frontier(records: &[(f64, f64)], bins: usize) -> Vec<FrontierPoint> {
    let valid: Vec<(f64, f64)> = records.iter().copied().filter(|(s, c)| s.is_finite() && c.is_finite()).collect();
    if valid.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = valid.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = valid.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { bins } else { 1 };
    let mut best = vec![(f64::INFINITY, 0usize); bins];
    for &(s, c) in &valid {
        let b = score_bin(s, lo, hi, bins);
        best[b].0 = best[b].0.min(c);
        best[b].1 += 1;
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
    best.into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(b, (min_cost, count))| FrontierPoint { bin: b, center: lo + (b as f64 + 0.5) * width, min_cost, count })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_memory_split() {
        let c = FlopConstants::default();
        let het = rate_cost(250, 3, 0.1, 503_800, true, &c);
        let hom = rate_cost(250, 3, 0.1, 503_800, false, &c);
        assert_eq!(het.flops, hom.flops);
        assert_eq!(het.memory_words - hom.memory_words, 249.0);
        assert_eq!(rate_cost(250, 3, 0.1, 0, true, &c).flops, 0.0);
    }

    #[test]
    fn atp_zero_duration_and_silence() {
        let zero = atp_cost(&AtpInputs::new(100, 0.1, 5.0, 1.0, 0.0)).unwrap();
        assert_eq!((zero.static_cost, zero.dynamic, zero.total), (0.0, 0.0, 0.0));
        let silent = atp_cost(&AtpInputs::new(100, 0.1, 0.0, 1.0, 2.0)).unwrap();
        let resting = (102e6 + 342e6) * 100.0 * 2.0;
        assert!((silent.dynamic - resting / 3.0).abs() < 1e-6 * resting);
        assert!(atp_cost(&AtpInputs::new(100, 0.1, -1.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn emulation_bias_bounds() {
        let v = emulation_bias(100.0, 0.01, 0.01).unwrap();
        assert!(v > 0.01);
        assert!((emulation_bias(1e-3, 0.01, 0.01).unwrap() - 0.01).abs() < 1e-15);
        assert!(emulation_bias(0.0, 0.01, 0.01).is_err());
    }

    #[test]
    fn remap_endpoints() {
        assert_eq!(remap_score(1.0), 1.0);
        assert!((remap_score(0.0) - (-1.0f64).exp()).abs() < 1e-16);
        assert!(remap_score(-50.0) < 1e-22);
    }

    #[test]
    fn frontier_singleton_and_dominated() {
        let f = min_cost_frontier(&[(0.4, 7.0)], 20);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].min_cost, 7.0);
        let base = [(0.1, 5.0), (0.9, 3.0), (0.5, 4.0)];
        let mut more = base.to_vec();
        more.push((0.5, 9.0));
        let a: Vec<f64> = min_cost_frontier(&base, 4).iter().map(|p| p.min_cost).collect();
        let b: Vec<f64> = min_cost_frontier(&more, 4).iter().map(|p| p.min_cost).collect();
        assert_eq!(a, b);
        assert!(min_cost_frontier(&[], 20).is_empty());
    }
}
