//! Run directory writer: config echo, deterministic results, long-format
//! CSV tables and run metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

/// One long-format table row; `t` and `s` stay empty when the statistic is
/// not indexed by a grid time.
struct Row {
    statistic: String,
    t: Option<f64>,
    s: Option<f64>,
    value: f64,
}

pub struct RunWriter {
    dir: PathBuf,
    run_id: String,
    started: Instant,
    tables: BTreeMap<String, Vec<Row>>,
}

impl RunWriter {
    /// Creates the run directory and writes the effective configuration.
    /// Fails if the directory already contains a run.
    pub fn create(dir: &Path, run_id: &str, config_echo: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let echo = dir.join("config.echo");
        if echo.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} already holds a run", dir.display()),
            )));
        }
        fs::write(&echo, config_echo)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            run_id: run_id.to_string(),
            started: Instant::now(),
            tables: BTreeMap::new(),
        })
    }

    pub fn row(&mut self, table: &str, statistic: &str, t: Option<f64>, s: Option<f64>, value: f64) {
        self.tables.entry(table.to_string()).or_default().push(Row {
            statistic: statistic.to_string(),
            t,
            s,
            value,
        });
    }

    /// Adds one row per grid time from a slice of values.
    pub fn series(&mut self, table: &str, statistic: &str, times: &[f64], values: &[f64]) {
        for (&t, &v) in times.iter().zip(values) {
            self.row(table, statistic, Some(t), None, v);
        }
    }

    /// Writes results.json, tables/*.csv and meta.json.
    pub fn finish<R: Serialize>(self, results: &R, seed: u64, command: &str) -> Result<()> {
        let json = serde_json::to_vec_pretty(results)
            .map_err(|e| Error::Serde(format!("results: {e}")))?;
        fs::write(self.dir.join("results.json"), json)?;
        if !self.tables.is_empty() {
            let tdir = self.dir.join("tables");
            fs::create_dir_all(&tdir)?;
            for (name, rows) in &self.tables {
                let mut csv = String::from("run_id,statistic,t,s,value\n");
                for r in rows {
                    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.12}")).unwrap_or_default();
                    csv.push_str(&format!(
                        "{},{},{},{},{:.17e}\n",
                        self.run_id,
                        r.statistic,
                        fmt(r.t),
                        fmt(r.s),
                        r.value
                    ));
                }
                fs::write(tdir.join(format!("{name}.csv")), csv)?;
            }
        }
        let meta = serde_json::json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "run_id": self.run_id,
            "command": command,
            "seed": seed,
            "elapsed_ms": self.started.elapsed().as_millis() as u64,
        });
        let meta_json =
            serde_json::to_vec_pretty(&meta).map_err(|e| Error::Serde(format!("meta: {e}")))?;
        fs::write(self.dir.join("meta.json"), meta_json)?;
        Ok(())
    }
}
