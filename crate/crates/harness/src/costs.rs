//! Cost reports for configured networks.

use hetres_core::energy::{atp_cost, rate_cost, AtpInputs, CostReport};
use hetres_core::topology::NetworkSpec;
use serde::Serialize;

use crate::config::{Model, RunConfig};
use crate::pipeline::total_steps;

/// FLOP and memory cost of a rate network simulated for `steps` steps.
pub fn li_cost(cfg: &RunConfig, spec: &NetworkSpec, steps: u64) -> CostReport {
    rate_cost(spec.n, spec.k, spec.p, steps, spec.h > 0.0, &cfg.energy.flops).report(vec![
        ("N".into(), spec.n as f64),
        ("K".into(), spec.k as f64),
        ("p".into(), spec.p),
        ("L".into(), steps as f64),
    ])
}

/// ATP cost of a spiking network firing at `nu` Hz for `duration` seconds.
pub fn lif_cost(cfg: &RunConfig, spec: &NetworkSpec, nu: f64, duration: f64) -> anyhow::Result<CostReport> {
    let mut atp = AtpInputs::new(spec.n, spec.p, nu, spec.j, duration);
    atp.n_glia = (cfg.energy.glia_per_neuron * spec.n as f64).round() as usize;
    atp.release_probability = cfg.energy.release_probability;
    Ok(atp_cost(&atp)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub network_id: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub h: f64,
    pub profile: String,
    pub model: String,
    pub unit: String,
    #[serde(rename = "static")]
    pub static_cost: f64,
    pub dynamic: f64,
    pub total: f64,
    pub notes: String,
}

/// Cost of every network of `cfg` over the run length the benchmark would
/// simulate. Spiking networks are assumed to fire at `nu` (default: the
/// background rate).
pub fn energy_table(cfg: &RunConfig, nu: Option<f64>) -> anyhow::Result<Vec<EnergyRow>> {
    cfg.expand()
        .into_iter()
        .map(|p| {
            let steps = total_steps(cfg, p.spec.n)?;
            let report = match cfg.dynamics.model {
                Model::Li => li_cost(cfg, &p.spec, steps),
                Model::Lif => {
                    let nu = nu.unwrap_or(cfg.dynamics.lif.nu0);
                    lif_cost(cfg, &p.spec, nu, steps as f64 * cfg.dynamics.dt)?
                }
            };
            Ok(EnergyRow {
                network_id: p.id,
                n: p.spec.n,
                h: p.spec.h,
                profile: p.spec.profile.name().into(),
                model: report.model.clone(),
                unit: report.unit.name().into(),
                static_cost: report.static_cost,
                dynamic: report.dynamic,
                total: report.total,
                notes: report.notes.join("; "),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_table_covers_every_network() {
        let rows = energy_table(&RunConfig::default(), None).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].unit, "flop+words");
        // Homogeneous networks store one shared time constant.
        assert_eq!(rows[1].static_cost - rows[0].static_cost, 249.0);
        let mut cfg = RunConfig::default();
        cfg.dynamics.model = Model::Lif;
        let rows = energy_table(&cfg, Some(5.0)).unwrap();
        assert_eq!(rows[0].unit, "ATP");
        assert!(rows[0].dynamic > 0.0);
    }
}
