//! Artifact files: CSV tables, JSON verdicts, atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::simulator::{BoundaryEvent, ParticleState, RunRecord};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Shortest decimal text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out.into_bytes()
    }
}

fn indexed(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |j| format!("{prefix}{j}"))
}

fn floats(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| fmt_f64(x))
}

pub fn events_csv(events: &[BoundaryEvent], dim: usize) -> Csv {
    let header: Vec<String> = ["t".to_string(), "id".to_string()]
        .into_iter()
        .chain(indexed("hit_", dim))
        .chain(indexed("u_minus_", dim))
        .chain(indexed("u_plus_", dim))
        .collect();
    let mut csv = Csv::new(header);
    for e in events {
        let row = [fmt_f64(e.t), e.id.to_string()]
            .into_iter()
            .chain(floats(&e.hit))
            .chain(floats(&e.u_minus))
            .chain(floats(&e.u_plus))
            .collect();
        csv.push(row);
    }
    csv
}

pub fn particles_csv(particles: &[ParticleState], dim: usize) -> Csv {
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain(indexed("x_", dim))
        .chain(indexed("u_", dim))
        .chain(indexed("k_", dim))
        .chain(std::iter::once("jumps".to_string()))
        .collect();
    let mut csv = Csv::new(header);
    for (i, p) in particles.iter().enumerate() {
        let row = std::iter::once(i.to_string())
            .chain(floats(&p.x))
            .chain(floats(&p.u))
            .chain(floats(&p.k))
            .chain(std::iter::once(p.jumps.to_string()))
            .collect();
        csv.push(row);
    }
    csv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Monitor,
}

impl Status {
    pub fn from_pass(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub statistics: Value,
    pub tolerances: Value,
    pub seeds: Vec<u64>,
    pub wall_time_s: f64,
}

/// A finished experiment: verdicts plus the files to write, relative to the output directory.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub verdicts: Vec<Verdict>,
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    pub fn add_csv(&mut self, name: impl Into<PathBuf>, csv: &Csv) {
        self.files.push((name.into(), csv.to_bytes()));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<PathBuf>, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
    }

    pub fn any_failed(&self) -> bool {
        self.verdicts.iter().any(|v| v.status == Status::Fail)
    }

    /// Writes every file plus `verdict.json` under `dir`, one at a time.
    pub fn write(&self, dir: &Path, config_echo: &Value) -> std::io::Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            atomic_write(&path, bytes)?;
            written.push(path);
        }
        let doc = serde_json::json!({
            "version": VERSION,
            "config": config_echo,
            "verdicts": self.verdicts,
        });
        let path = dir.join("verdict.json");
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("serializable verdicts");
        bytes.push(b'\n');
        atomic_write(&path, &bytes)?;
        written.push(path);
        Ok(written)
    }
}

/// Files produced by a plain simulation run.
pub fn simulation_artifacts(record: &RunRecord, wall_time_s: f64) -> Vec<(PathBuf, Vec<u8>)> {
    let d = record.config.dim();
    let mut files = Vec::new();
    if record.config.record_events {
        files.push((PathBuf::from("events.csv"), events_csv(&record.events, d).to_bytes()));
    }
    for c in &record.checkpoints {
        files.push((PathBuf::from("checkpoints").join(format!("{}.csv", fmt_f64(c.time))), particles_csv(&c.particles, d).to_bytes()));
    }
    files.push((PathBuf::from("final.csv"), particles_csv(&record.final_particles, d).to_bytes()));
    let summary = serde_json::json!({
        "version": VERSION,
        "config": record.config,
        "steps": record.steps,
        "final_time": record.final_time(),
        "events": record.events.len(),
        "jump_histogram": record.jump_histogram(),
        "wall_time_s": wall_time_s,
    });
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("serializable summary");
    bytes.push(b'\n');
    files.push((PathBuf::from("summary.json"), bytes));
    files
}
