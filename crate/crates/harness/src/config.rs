//! Run configuration and its expansion into individual network points.

use std::path::Path;

use hetres_core::dynamics::LifParams;
use hetres_core::energy::FlopConstants;
use hetres_core::seed::SeedScheme;
use hetres_core::stimgen::StimulusRecipe;
use hetres_core::taskbench::TaskGrid;
use hetres_core::topology::{NetworkSeeds, NetworkSpec, TauProfile};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown sweep axis '{0}' (expected one of N, J, Ju, Jn, p, f, sigma0, h, profile)")]
    UnknownAxis(String),
    #[error("invalid value '{value}' for axis {axis}")]
    BadValue { axis: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    #[default]
    Li,
    Lif,
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Li => "li",
            Model::Lif => "lif",
        }
    }
}

/// Network hyperparameters; every field is a list and the run covers
/// their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkAxes {
    pub n: Vec<usize>,
    pub p: Vec<f64>,
    pub f: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub j: Vec<f64>,
    pub ju: Vec<f64>,
    pub jn: Vec<f64>,
    pub h: Vec<f64>,
    pub profile: Vec<TauProfile>,
    pub tau_mean: f64,
    pub tau_floor: f64,
}

impl Default for NetworkAxes {
    fn default() -> Self {
        let base = NetworkSpec::default();
        Self {
            n: vec![base.n],
            p: vec![base.p],
            f: vec![base.f_exc],
            sigma0: vec![base.sigma0],
            j: vec![base.j],
            ju: vec![base.j_u],
            jn: vec![base.j_n],
            h: vec![0.0, 0.1, 1.0, 10.0],
            profile: vec![TauProfile::Lognormal],
            tau_mean: base.tau_mean,
            tau_floor: base.tau_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub model: Model,
    /// Sampling step of states and targets.
    pub dt: f64,
    /// Transient simulated before the first region.
    pub warmup: f64,
    /// Stimulus grid points per state step.
    pub stim_oversample: usize,
    /// Relative and absolute step tolerance of the adaptive scheme used to
    /// reintegrate anomalous rate runs.
    pub fallback_rtol: f64,
    pub fallback_atol: f64,
    pub lif: LifConfig,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            model: Model::Li,
            dt: 0.01,
            warmup: 10.0,
            stim_oversample: 4,
            fallback_rtol: 1e-3,
            fallback_atol: 1e-4,
            lif: LifConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifConfig {
    pub e: f64,
    pub v_reset: f64,
    pub v_thr: f64,
    pub tau_ref: f64,
    pub nu0: f64,
    /// Filter time constant in units of `dt`.
    pub tau_phi_steps: f64,
    /// Minimum number of integration substeps per sampling step.
    pub substeps: usize,
}

impl Default for LifConfig {
    fn default() -> Self {
        let p = LifParams::default();
        Self { e: p.e, v_reset: p.v_reset, v_thr: p.v_thr, tau_ref: p.tau_ref, nu0: p.nu0, tau_phi_steps: 10.0, substeps: 1 }
    }
}

impl LifConfig {
    pub fn params(&self) -> LifParams {
        LifParams { e: self.e, v_reset: self.v_reset, v_thr: self.v_thr, tau_ref: self.tau_ref, nu0: self.nu0, bg_offset: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub tau_y: f64,
    pub tau_u: f64,
    pub trials: usize,
    pub lambda: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { tau_y: 1.0, tau_u: 1.0, trials: 3, lambda: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub enabled: bool,
    pub variance_target: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { enabled: true, variance_target: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Glial cells per neuron in the ATP budget.
    pub glia_per_neuron: f64,
    pub release_probability: f64,
    pub flops: FlopConstants,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { flops: FlopConstants::default(), glia_per_neuron: 1.0, release_probability: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Independent network/noise draws per hyperparameter point.
    pub replicates: usize,
    pub workers: usize,
    pub out: String,
    pub stimulus: StimulusRecipe,
    pub network: NetworkAxes,
    pub dynamics: DynamicsConfig,
    pub tasks: TaskGrid,
    pub split: SplitConfig,
    pub analysis: AnalysisConfig,
    pub energy: EnergyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: 1,
            workers: 1,
            out: "out".into(),
            stimulus: StimulusRecipe::default(),
            network: NetworkAxes::default(),
            dynamics: DynamicsConfig::default(),
            tasks: TaskGrid::default(),
            split: SplitConfig::default(),
            analysis: AnalysisConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

/// One network to simulate: a hyperparameter point and a replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPoint {
    pub id: usize,
    pub replicate: usize,
    pub spec: NetworkSpec,
    pub noise_seed: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// The config with execution-only settings (worker count, output
    /// directory) reset, as echoed into results and matched on resume.
    /// Results never depend on those settings.
    pub fn results_toml(&self) -> String {
        RunConfig { workers: 1, out: String::new(), ..self.clone() }.to_toml()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.dynamics.dt > 0.0) || !(self.dynamics.warmup >= 0.0) || self.dynamics.stim_oversample == 0 {
            return bad("dt must be positive, warmup non-negative and stim_oversample at least 1");
        }
        if !(self.dynamics.fallback_rtol > 0.0) || !(self.dynamics.fallback_atol > 0.0) {
            return bad("fallback tolerances must be positive");
        }
        if self.split.trials == 0 || !(self.split.lambda > 0.0) {
            return bad("trials must be at least 1 and lambda positive");
        }
        let a = &self.network;
        if [a.n.len(), a.p.len(), a.f.len(), a.sigma0.len(), a.j.len(), a.ju.len(), a.jn.len(), a.h.len(), a.profile.len()]
            .contains(&0)
        {
            return bad("every network axis needs at least one value");
        }
        let max_shift = self.tasks.delta_range.0.abs().max(self.tasks.delta_range.1.abs());
        if max_shift > 2.0 * self.split.tau_u + 1e-12 {
            return bad("task shifts exceed the 2·tau_u margin");
        }
        if self.tasks.k_set.iter().any(|&k| k == 0 || k > self.stimulus.dim()) {
            return bad("task component index outside the stimulus dimension");
        }
        Ok(())
    }

    pub fn scheme(&self) -> SeedScheme {
        SeedScheme::new(self.seed)
    }

    /// Cartesian expansion in a fixed order: N, p, f, sigma0, J, Ju, Jn,
    /// profile, h, then replicate (innermost). Network and noise seeds depend
    /// only on the replicate, so points that differ only in hyperparameters
    /// share their random draws.
    pub fn expand(&self) -> Vec<NetworkPoint> {
        let a = &self.network;
        let scheme = self.scheme();
        let mut out = Vec::new();
        for &n in &a.n {
            for &p in &a.p {
                for &f in &a.f {
                    for &sigma0 in &a.sigma0 {
                        for &j in &a.j {
                            for &ju in &a.ju {
                                for &jn in &a.jn {
                                    for &profile in &a.profile {
                                        for &h in &a.h {
                                            for r in 0..self.replicates {
                                                let spec = NetworkSpec {
                                                    n,
                                                    p,
                                                    f_exc: f,
                                                    sigma0,
                                                    j,
                                                    j_u: ju,
                                                    j_n: jn,
                                                    k: self.stimulus.dim(),
                                                    tau_mean: a.tau_mean,
                                                    h,
                                                    profile,
                                                    tau_floor: a.tau_floor,
                                                    seeds: NetworkSeeds::from_scheme(&scheme, r),
                                                };
                                                out.push(NetworkPoint {
                                                    id: out.len(),
                                                    replicate: r,
                                                    spec,
                                                    noise_seed: scheme.derive(&format!("dynamics/noise/rep-{r}")),
                                                });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Replaces one axis with `values`.
    pub fn with_axis(&self, axis: &str, values: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        let err = |v: &str| ConfigError::BadValue { axis: axis.into(), value: v.into() };
        let floats = || -> Result<Vec<f64>, ConfigError> {
            values.iter().map(|v| v.trim().parse::<f64>().map_err(|_| err(v))).collect()
        };
        let a = &mut cfg.network;
        match axis {
            "N" | "n" => a.n = values.iter().map(|v| v.trim().parse().map_err(|_| err(v))).collect::<Result<_, _>>()?,
            "J" | "j" => a.j = floats()?,
            "Ju" | "ju" => a.ju = floats()?,
            "Jn" | "jn" => a.jn = floats()?,
            "p" => a.p = floats()?,
            "f" => a.f = floats()?,
            "sigma0" => a.sigma0 = floats()?,
            "h" => a.h = floats()?,
            "profile" => {
                a.profile = values.iter().map(|v| TauProfile::parse(v.trim()).ok_or_else(|| err(v))).collect::<Result<_, _>>()?
            }
            other => return Err(ConfigError::UnknownAxis(other.into())),
        }
        if values.is_empty() {
            return Err(ConfigError::Invalid(format!("axis {axis} needs at least one value")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Canonical name of a sweep axis as used in result tables.
pub fn axis_value(axis: &str, spec: &NetworkSpec) -> Option<String> {
    Some(match axis {
        "N" | "n" => spec.n.to_string(),
        "J" | "j" => spec.j.to_string(),
        "Ju" | "ju" => spec.j_u.to_string(),
        "Jn" | "jn" => spec.j_n.to_string(),
        "p" => spec.p.to_string(),
        "f" => spec.f_exc.to_string(),
        "sigma0" => spec.sigma0.to_string(),
        "h" => spec.h.to_string(),
        "profile" => spec.profile.name().to_string(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[network]\nn = [50]\nh = [0.0, 10.0]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.network.p, vec![0.1]);
        assert_eq!(cfg.expand().len(), 2);
        assert!(RunConfig::from_toml("[network]\nbogus = 1\n").is_err());
    }

    #[test]
    fn sweep_axis_cardinality() {
        let cfg = RunConfig::default().with_axis("N", &["50", "100", "250", "500"].map(String::from)).unwrap();
        assert_eq!(cfg.expand().len(), 16);
        assert!(matches!(RunConfig::default().with_axis("tau", &["1".into()]), Err(ConfigError::UnknownAxis(_))));
    }

    #[test]
    fn replicates_share_draws_across_h() {
        let mut cfg = RunConfig::default();
        cfg.replicates = 2;
        let pts = cfg.expand();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].spec.seeds, pts[2].spec.seeds);
        assert_ne!(pts[0].spec.seeds, pts[1].spec.seeds);
        assert_eq!(pts[0].noise_seed, pts[6].noise_seed);
    }
}
