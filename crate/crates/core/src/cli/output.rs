use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Protocol, RunConfig};
use crate::abft::FlagRow;
use crate::error::{Error, Result};
use crate::inject::FaultEvent;
use crate::lockstep::{
    CalibrationRow, EventRow, Rq1LayerRow, Rq1Row, Rq2Row, Rq3Row, ShadowRow, Sink,
};
use crate::model::{write_snapshot, Params};

pub const RQ1: &str = "rq1.csv";
pub const RQ1_LAYERS: &str = "rq1_layers.csv";
pub const RQ2: &str = "rq2.csv";
pub const RQ3: &str = "rq3.csv";
pub const SHADOW: &str = "shadow.csv";
pub const ABFT: &str = "abft.csv";
pub const CALIBRATE: &str = "calibrate.csv";
pub const EVENTS: &str = "events.csv";
pub const GRADCHECK: &str = "gradcheck.csv";
pub const MANIFEST: &str = "manifest.json";
pub const PLOTDATA: &str = "plotdata.csv";

/// Column headers, written up front so a file exists even with no rows.
pub fn header(file: &str) -> &'static [&'static str] {
    match file {
        RQ1 => &["step", "microstep", "site", "freq", "sev", "zero_ref_count"],
        RQ1_LAYERS => &[
            "step",
            "microstep",
            "site",
            "layer",
            "mismatches",
            "freq",
            "sev",
            "zero_ref_count",
        ],
        RQ2 => &["step", "diff_l2", "truth_l2", "ratio", "wcnts"],
        RQ3 => &[
            "step",
            "param_diff_l2",
            "loss_healthy",
            "loss_unhealthy",
            "gnorm_healthy",
            "gnorm_unhealthy",
        ],
        SHADOW => &["step", "alarm", "first_diff_tensor"],
        ABFT => &[
            "step", "layer", "site", "checks", "flags", "max_lhs", "max_rhs",
        ],
        CALIBRATE => &[
            "microsteps",
            "elements",
            "mismatches",
            "measured_rate",
            "expected_rate",
            "ci_lo",
            "ci_hi",
            "within_ci",
        ],
        EVENTS => &[
            "step",
            "microstep",
            "site",
            "layer",
            "rank",
            "index",
            "factor",
        ],
        GRADCHECK => &["name", "analytic_norm", "numeric_norm", "rel_err"],
        _ => &[],
    }
}

/// Metric files a protocol produces.
pub fn files_for(p: Protocol) -> &'static [&'static str] {
    match p {
        Protocol::Rq1 => &[RQ1, RQ1_LAYERS, EVENTS],
        Protocol::Rq2 => &[RQ2, EVENTS],
        Protocol::Rq3 => &[RQ3, EVENTS],
        Protocol::Shadow => &[SHADOW, EVENTS],
        Protocol::Abft => &[ABFT, EVENTS],
        Protocol::Calibrate => &[RQ1, RQ1_LAYERS, CALIBRATE, EVENTS],
        Protocol::Gradcheck => &[GRADCHECK],
    }
}

/// Writes protocol output as CSV files in a run directory.
pub struct CsvSink {
    dir: PathBuf,
    writers: BTreeMap<&'static str, csv::Writer<File>>,
}

impl CsvSink {
    pub fn create(dir: &Path, protocol: Protocol) -> Result<CsvSink> {
        fs::create_dir_all(dir)?;
        let mut writers = BTreeMap::new();
        for &f in files_for(protocol) {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(dir.join(f))?;
            w.write_record(header(f))?;
            writers.insert(f, w);
        }
        Ok(CsvSink {
            dir: dir.to_path_buf(),
            writers,
        })
    }

    pub fn write<T: Serialize>(&mut self, file: &'static str, row: &T) -> Result<()> {
        let w = self
            .writers
            .get_mut(file)
            .ok_or_else(|| Error::contract(format!("{file} is not an output of this protocol")))?;
        w.serialize(row)?;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        for (_, mut w) in self.writers {
            w.flush()?;
        }
        Ok(())
    }
}

impl Sink for CsvSink {
    fn rq1(&mut self, row: &Rq1Row) -> Result<()> {
        self.write(RQ1, row)
    }
    fn rq1_layer(&mut self, row: &Rq1LayerRow) -> Result<()> {
        self.write(RQ1_LAYERS, row)
    }
    fn rq2(&mut self, row: &Rq2Row) -> Result<()> {
        self.write(RQ2, row)
    }
    fn rq3(&mut self, row: &Rq3Row) -> Result<()> {
        self.write(RQ3, row)
    }
    fn shadow(&mut self, row: &ShadowRow) -> Result<()> {
        self.write(SHADOW, row)
    }
    fn abft(&mut self, row: &FlagRow) -> Result<()> {
        self.write(ABFT, row)
    }
    fn calibration(&mut self, row: &CalibrationRow) -> Result<()> {
        self.write(CALIBRATE, row)
    }
    fn events(&mut self, events: &[FaultEvent]) -> Result<()> {
        for e in events {
            self.write(EVENTS, &EventRow::from(e))?;
        }
        Ok(())
    }
    fn checkpoint(
        &mut self,
        step: u64,
        healthy: &Params,
        unhealthy: Option<&Params>,
    ) -> Result<()> {
        let dir = self.dir.join("snapshots");
        fs::create_dir_all(&dir)?;
        match unhealthy {
            None => write_snapshot(&dir.join(format!("step_{step}.bin")), healthy),
            Some(u) => {
                write_snapshot(&dir.join(format!("step_{step}_healthy.bin")), healthy)?;
                write_snapshot(&dir.join(format!("step_{step}_unhealthy.bin")), u)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub protocol: Protocol,
    pub seed: u64,
    /// SHA-256 of the resolved config (output directory excluded).
    pub config_hash: String,
    pub config: RunConfig,
    pub start_unix: u64,
    pub end_unix: u64,
    pub status: String,
    pub exit_code: i32,
    pub message: Option<String>,
    pub steps_run: Option<u64>,
    pub fault_events: Option<u64>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = None;
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

/// `(file, x column, value columns, optional label column)`.
const PLOT_SOURCES: [(&str, &str, &[&str], Option<&str>); 5] = [
    (
        RQ1,
        "microstep",
        &["freq", "sev", "zero_ref_count"],
        Some("site"),
    ),
    (
        RQ2,
        "step",
        &["diff_l2", "truth_l2", "ratio", "wcnts"],
        None,
    ),
    (
        RQ3,
        "step",
        &[
            "param_diff_l2",
            "loss_healthy",
            "loss_unhealthy",
            "gnorm_healthy",
            "gnorm_unhealthy",
        ],
        None,
    ),
    (SHADOW, "step", &["alarm"], None),
    (ABFT, "step", &["checks", "flags"], Some("site")),
];

/// Merges the run's metric CSVs into `plotdata.csv` with columns
/// `step,series,value`. Values are copied verbatim, so numbers round-trip.
pub fn export_plotdata(run_dir: &Path) -> Result<PathBuf> {
    let out_path = run_dir.join(PLOTDATA);
    let mut rows: Vec<[String; 3]> = Vec::new();
    let mut found = false;
    for (file, x, cols, label) in PLOT_SOURCES {
        let path = run_dir.join(file);
        if !path.is_file() {
            continue;
        }
        found = true;
        let mut rd = csv::Reader::from_path(&path)?;
        let hdr = rd.headers()?.clone();
        let idx = |name: &str| {
            hdr.iter().position(|h| h == name).ok_or_else(|| {
                Error::config(
                    path.display().to_string(),
                    format!("missing column `{name}`"),
                )
            })
        };
        let xi = idx(x)?;
        let li = label.map(idx).transpose()?;
        let layer_i = hdr.iter().position(|h| h == "layer");
        let ci: Vec<(usize, &str)> = cols
            .iter()
            .map(|c| Ok((idx(c)?, *c)))
            .collect::<Result<_>>()?;
        for rec in rd.records() {
            let rec = rec?;
            let mut prefix = String::new();
            if let Some(li) = li {
                prefix.push_str(&rec[li]);
                if let Some(l) = layer_i {
                    prefix.push_str(&format!(".layer{}", &rec[l]));
                }
                prefix.push('.');
            }
            for &(i, name) in &ci {
                let v = match &rec[i] {
                    "true" => "1".to_string(),
                    "false" => "0".to_string(),
                    s => s.to_string(),
                };
                rows.push([rec[xi].to_string(), format!("{prefix}{name}"), v]);
            }
        }
    }
    if !found {
        return Err(Error::config(
            "run_dir",
            format!("no metric files in {}", run_dir.display()),
        ));
    }
    let mut w = csv::Writer::from_path(&out_path)?;
    w.write_record(["step", "series", "value"])?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(out_path)
}
