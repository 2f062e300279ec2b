//! Per-iteration run records and their CSV / JSON forms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 5] = ["iter", "loss", "secs_per_iter", "fwd_count", "bwd_count"];

/// Columns that depend on the machine rather than on (config, seed).
pub const WALL_CLOCK_COLUMNS: [&str; 1] = ["secs_per_iter"];

#[derive(Debug, Clone, PartialEq)]
pub struct IterRow {
    pub iter: u64,
    pub loss: f64,
    pub secs_per_iter: f64,
    pub fwd_count: u64,
    pub bwd_count: u64,
    /// Radii in the order of `RunRecord::gamma_names`.
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub gamma_names: Vec<String>,
    pub rows: Vec<IterRow>,
}

impl RunRecord {
    pub fn new(gamma_names: Vec<String>) -> Self {
        Self {
            gamma_names,
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        FIXED_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.gamma_names.iter().map(|n| format!("gamma.{n}")))
            .collect()
    }

    /// Trajectory of one radius.
    pub fn gamma_series(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.gamma_names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.gammas[i]).collect())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    fn cells(row: &IterRow) -> Vec<String> {
        let mut out = vec![
            row.iter.to_string(),
            row.loss.to_string(),
            row.secs_per_iter.to_string(),
            row.fwd_count.to_string(),
            row.bwd_count.to_string(),
        ];
        out.extend(row.gammas.iter().map(|g| g.to_string()));
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns())?;
        for row in &self.rows {
            w.write_record(Self::cells(row))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::persistence(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of ASCII numbers"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let gamma_names = parse_columns(&headers)?;
        let mut record = RunRecord::new(gamma_names);
        for line in r.records() {
            let line = line?;
            let cells: Vec<&str> = line.iter().collect();
            let num = |i: usize| -> Result<f64> {
                cells[i]
                    .parse()
                    .map_err(|_| Error::persistence(format!("bad number `{}`", cells[i])))
            };
            let int = |i: usize| -> Result<u64> {
                cells[i]
                    .parse()
                    .map_err(|_| Error::persistence(format!("bad integer `{}`", cells[i])))
            };
            record.rows.push(IterRow {
                iter: int(0)?,
                loss: num(1)?,
                secs_per_iter: num(2)?,
                fwd_count: int(3)?,
                bwd_count: int(4)?,
                gammas: (5..cells.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(record)
    }

    /// CSV with the wall-clock columns removed, for determinism checks.
    pub fn to_csv_without_wall_clock(&self) -> Result<String> {
        let mut stripped = self.clone();
        for row in &mut stripped.rows {
            row.secs_per_iter = 0.0;
        }
        stripped.to_csv()
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let mut m = Map::new();
                m.insert("iter".into(), row.iter.into());
                m.insert("loss".into(), number(row.loss));
                m.insert("secs_per_iter".into(), number(row.secs_per_iter));
                m.insert("fwd_count".into(), row.fwd_count.into());
                m.insert("bwd_count".into(), row.bwd_count.into());
                for (name, g) in self.gamma_names.iter().zip(&row.gammas) {
                    m.insert(format!("gamma.{name}"), number(*g));
                }
                Value::Object(m)
            })
            .collect();
        serde_json::json!({ "columns": self.columns(), "rows": rows })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let bad = || Error::persistence("malformed metrics JSON");
        let columns: Vec<String> = value
            .get("columns")
            .and_then(Value::as_array)
            .ok_or_else(bad)?
            .iter()
            .map(|c| c.as_str().map(String::from).ok_or_else(bad))
            .collect::<Result<_>>()?;
        let mut record = RunRecord::new(parse_columns(&columns)?);
        for row in value
            .get("rows")
            .and_then(Value::as_array)
            .ok_or_else(bad)?
        {
            let f = |k: &str| -> Result<f64> {
                match row.get(k) {
                    Some(Value::Null) => Ok(f64::NAN),
                    Some(v) => v.as_f64().ok_or_else(bad),
                    None => Err(bad()),
                }
            };
            let u = |k: &str| row.get(k).and_then(Value::as_u64).ok_or_else(bad);
            record.rows.push(IterRow {
                iter: u("iter")?,
                loss: f("loss")?,
                secs_per_iter: f("secs_per_iter")?,
                fwd_count: u("fwd_count")?,
                bwd_count: u("bwd_count")?,
                gammas: columns[FIXED_COLUMNS.len()..]
                    .iter()
                    .map(|c| f(c))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(record)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("metrics.csv"), &self.to_csv()?)?;
        write_text(
            &dir.join("metrics.json"),
            &serde_json::to_string_pretty(&self.to_json())?,
        )
    }
}

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn parse_columns(columns: &[String]) -> Result<Vec<String>> {
    if columns.len() < FIXED_COLUMNS.len() || columns[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::persistence(format!(
            "unexpected metric columns {columns:?}"
        )));
    }
    columns[FIXED_COLUMNS.len()..]
        .iter()
        .map(|c| {
            c.strip_prefix("gamma.")
                .map(String::from)
                .ok_or_else(|| Error::persistence(format!("unexpected column `{c}`")))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Top-1 accuracies on the clean split and every shifted split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub id: f64,
    /// Keyed by shift kind, then severity.
    pub ood: BTreeMap<String, BTreeMap<u8, f64>>,
    /// Mean over kinds of the mean over severities.
    pub ood_average: f64,
}

impl AccuracyTable {
    pub fn kind_means(&self) -> BTreeMap<String, f64> {
        self.ood
            .iter()
            .map(|(k, by_sev)| {
                (
                    k.clone(),
                    by_sev.values().sum::<f64>() / by_sev.len() as f64,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub iterations: u64,
    pub final_loss: f64,
    pub fwd_count: u64,
    pub bwd_count: u64,
    pub mean_secs_per_iter: f64,
    pub final_gammas: BTreeMap<String, f64>,
    pub accuracy: AccuracyTable,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
