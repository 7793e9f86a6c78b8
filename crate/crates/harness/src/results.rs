//! Flat results table: one row per (network, task), or one error row per
//! failed network.

use std::io::{BufRead, Write};
use std::path::Path;

use hetres_core::topology::NetworkSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Model, NetworkPoint};

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_TAG: &str = "# hetres-results schema ";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("results schema {found} is not supported (expected {SCHEMA_VERSION})")]
    Schema { found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    /// The network ran but this task could not be scored.
    TaskError,
    /// The network failed; the row carries no task.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub network_id: usize,
    pub replicate: usize,
    pub model: Model,
    pub h: f64,
    pub profile: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "Ju")]
    pub ju: f64,
    #[serde(rename = "Jn")]
    pub jn: f64,
    pub p: f64,
    pub f: f64,
    pub sigma0: f64,
    pub k: Option<usize>,
    pub delta: Option<f64>,
    pub d: Option<u32>,
    pub complexity: Option<f64>,
    pub tier: Option<String>,
    pub score_mean: Option<f64>,
    pub score_std: Option<f64>,
    /// Per-trial scores joined by `;`.
    pub trial_scores: String,
    pub overlap: Option<f64>,
    pub d_pr: Option<f64>,
    pub cost_model: String,
    pub cost_unit: String,
    pub cost_static: Option<f64>,
    pub cost_dynamic: Option<f64>,
    pub cost_total: Option<f64>,
    pub mean_rate: Option<f64>,
    pub scheme: String,
    pub anomaly: bool,
    pub status: Status,
    pub error: String,
}

impl ResultRow {
    /// Row with the network columns filled and everything else empty.
    pub fn for_network(point: &NetworkPoint, model: Model) -> Self {
        let s: &NetworkSpec = &point.spec;
        Self {
            network_id: point.id,
            replicate: point.replicate,
            model,
            h: s.h,
            profile: s.profile.name().into(),
            n: s.n,
            j: s.j,
            ju: s.j_u,
            jn: s.j_n,
            p: s.p,
            f: s.f_exc,
            sigma0: s.sigma0,
            k: None,
            delta: None,
            d: None,
            complexity: None,
            tier: None,
            score_mean: None,
            score_std: None,
            trial_scores: String::new(),
            overlap: None,
            d_pr: None,
            cost_model: String::new(),
            cost_unit: String::new(),
            cost_static: None,
            cost_dynamic: None,
            cost_total: None,
            mean_rate: None,
            scheme: String::new(),
            anomaly: false,
            status: Status::Error,
            error: String::new(),
        }
    }

    pub fn trials(&self) -> Vec<f64> {
        self.trial_scores.split(';').filter(|s| !s.is_empty()).filter_map(|s| s.parse().ok()).collect()
    }

    /// Value of a sweep axis for grouping.
    pub fn axis(&self, axis: &str) -> Option<String> {
        Some(match axis {
            "N" | "n" => self.n.to_string(),
            "J" | "j" => self.j.to_string(),
            "Ju" | "ju" => self.ju.to_string(),
            "Jn" | "jn" => self.jn.to_string(),
            "p" => self.p.to_string(),
            "f" => self.f.to_string(),
            "sigma0" => self.sigma0.to_string(),
            "h" => self.h.to_string(),
            "profile" => self.profile.clone(),
            "model" => self.model.name().into(),
            _ => return None,
        })
    }
}

pub fn join_scores(scores: &[f64]) -> String {
    scores.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    /// Config that produced the table, echoed into the file header.
    pub config: String,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TableError> {
        writeln!(w, "{SCHEMA_TAG}{SCHEMA_VERSION}")?;
        for line in self.config.lines() {
            writeln!(w, "#| {line}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            csv.write_record(HEADER)?;
        }
        for r in &self.rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<(), TableError> {
        let tmp = path.with_extension("csv.tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TableError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, TableError> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let version = first.trim_end().strip_prefix(SCHEMA_TAG).unwrap_or("").to_string();
        if version != SCHEMA_VERSION.to_string() {
            return Err(TableError::Schema { found: first.trim_end().into() });
        }
        let mut config = String::new();
        let mut body = String::new();
        for line in r.lines() {
            let line = line?;
            match line.strip_prefix("#| ") {
                Some(c) => {
                    config.push_str(c);
                    config.push('\n');
                }
                None if line == "#|" => config.push('\n'),
                None => {
                    body.push_str(&line);
                    body.push('\n');
                }
            }
        }
        let mut csv = csv::Reader::from_reader(body.as_bytes());
        let rows = csv.deserialize().collect::<Result<Vec<ResultRow>, _>>()?;
        Ok(Self { config, rows })
    }

    pub fn ok_rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.status == Status::Ok)
    }
}

const HEADER: &[&str] = &[
    "network_id", "replicate", "model", "h", "profile", "N", "J", "Ju", "Jn", "p", "f", "sigma0", "k", "delta", "d",
    "complexity", "tier", "score_mean", "score_std", "trial_scores", "overlap", "d_pr", "cost_model", "cost_unit",
    "cost_static", "cost_dynamic", "cost_total", "mean_rate", "scheme", "anomaly", "status", "error",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn sample_rows() -> Vec<ResultRow> {
        let pt = &RunConfig::default().expand()[1];
        let mut a = ResultRow::for_network(pt, Model::Li);
        a.k = Some(2);
        a.delta = Some(-0.2);
        a.d = Some(3);
        a.score_mean = Some(0.1 + 0.2);
        a.trial_scores = join_scores(&[0.3, 1.0 / 3.0, -2.5e-17]);
        a.overlap = Some(f64::NAN);
        a.status = Status::Ok;
        let mut b = ResultRow::for_network(pt, Model::Lif);
        b.error = "solver failed, \"quoted\"".into();
        vec![a, b]
    }

    #[test]
    fn header_matches_row_fields() {
        let table = ResultsTable { config: String::new(), rows: Vec::new() };
        let empty = table.to_csv_string();
        let with_rows = ResultsTable { config: String::new(), rows: sample_rows() }.to_csv_string();
        assert_eq!(empty.lines().nth(1), with_rows.lines().nth(1));
    }

    #[test]
    fn csv_round_trip_preserves_bits() {
        let table = ResultsTable { config: "seed = 3\n\n[network]\nn = [10]\n".into(), rows: sample_rows() };
        let text = table.to_csv_string();
        let back = ResultsTable::read_from(text.as_bytes()).unwrap();
        assert_eq!(back.config, table.config);
        assert_eq!(back.to_csv_string(), text);
        assert_eq!(back.rows[0].trials()[1].to_bits(), (1.0f64 / 3.0).to_bits());
        assert!(back.rows[0].overlap.unwrap().is_nan());
        assert_eq!(back.rows[1].error, table.rows[1].error);
    }

    #[test]
    fn foreign_schema_is_rejected() {
        assert!(matches!(ResultsTable::read_from("# other 1\na,b\n".as_bytes()), Err(TableError::Schema { .. })));
    }
}
