//! File emission: atomic writes and the CSV row schemas.

use std::fs;
use std::path::{Path, PathBuf};

use xlmimo_core::tasks::{EpisodeLog, Method, MethodRun};

use crate::error::{CliError, CliResult};
use crate::run::CurvePoint;

/// Version of the CSV column layouts documented in `docs/schema.md`.
pub const SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn split(field: &str) -> CliResult<Vec<f64>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(parse_f64).collect()
}

fn parse_f64(s: &str) -> CliResult<f64> {
    s.parse()
        .map_err(|_| CliError::Parse(format!("bad number `{s}`")))
}

fn parse_u64(s: &str) -> CliResult<u64> {
    s.parse()
        .map_err(|_| CliError::Parse(format!("bad integer `{s}`")))
}

/// One held-out drop of one method on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub drop_index: usize,
    pub drop_seed: u64,
    pub sum_se: f64,
    pub ee: f64,
    pub total_power: f64,
    pub active_antennas: usize,
    pub se_per_stream: Vec<f64>,
    /// Per-stream SE over an equal share of the consumed power.
    pub ee_per_stream: Vec<f64>,
}

pub const RESULTS_HEADER: [&str; 11] = [
    "config_hash",
    "seed",
    "method",
    "drop_index",
    "drop_seed",
    "sum_se",
    "ee",
    "total_power_w",
    "active_antennas",
    "se_per_stream",
    "ee_per_stream",
];

pub fn result_rows(config_hash: &str, bandwidth: f64, runs: &[MethodRun]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for run in runs {
        for (i, (m, &ds)) in run.metrics.iter().zip(&run.drop_seeds).enumerate() {
            rows.push(ResultRow {
                config_hash: config_hash.to_string(),
                seed: run.seed,
                method: run.method,
                drop_index: i,
                drop_seed: ds,
                sum_se: m.sum_se,
                ee: m.ee,
                total_power: m.total_power,
                active_antennas: m.active_antennas,
                se_per_stream: m.se_per_stream.clone(),
                ee_per_stream: m.ee_per_stream(bandwidth),
            });
        }
    }
    rows
}

pub fn results_csv(rows: &[ResultRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.config_hash.clone(),
            r.seed.to_string(),
            r.method.to_string(),
            r.drop_index.to_string(),
            r.drop_seed.to_string(),
            r.sum_se.to_string(),
            r.ee.to_string(),
            r.total_power.to_string(),
            r.active_antennas.to_string(),
            join(&r.se_per_stream),
            join(&r.ee_per_stream),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

pub fn parse_results_csv(bytes: &[u8]) -> CliResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(CliError::Parse(format!(
            "unexpected results header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(ResultRow {
            config_hash: f(0).to_string(),
            seed: parse_u64(f(1))?,
            method: f(2)
                .parse()
                .map_err(|e: xlmimo_core::Error| CliError::Parse(e.to_string()))?,
            drop_index: parse_u64(f(3))? as usize,
            drop_seed: parse_u64(f(4))?,
            sum_se: parse_f64(f(5))?,
            ee: parse_f64(f(6))?,
            total_power: parse_f64(f(7))?,
            active_antennas: parse_u64(f(8))? as usize,
            se_per_stream: split(f(9))?,
            ee_per_stream: split(f(10))?,
        });
    }
    Ok(rows)
}

pub fn curve_csv(
    config_hash: &str,
    seed: u64,
    method: Method,
    logs: &[EpisodeLog],
) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash",
        "seed",
        "method",
        "episode",
        "reward",
        "sum_se",
        "ee",
        "critic_loss",
        "error",
    ])?;
    for l in logs {
        w.write_record([
            config_hash.to_string(),
            seed.to_string(),
            method.to_string(),
            l.episode.to_string(),
            l.reward.to_string(),
            l.sum_se.to_string(),
            l.ee.to_string(),
            l.critic_loss.map(|c| c.to_string()).unwrap_or_default(),
            l.error.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

pub fn eval_curve_csv(
    config_hash: &str,
    seed: u64,
    method: Method,
    points: &[CurvePoint],
) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config_hash",
        "seed",
        "method",
        "episode",
        "eval_drops",
        "mean_sum_se",
        "mean_ee",
    ])?;
    for p in points {
        w.write_record([
            config_hash.to_string(),
            seed.to_string(),
            method.to_string(),
            p.episode.to_string(),
            p.drops.to_string(),
            p.mean_sum_se.to_string(),
            p.mean_ee.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

/// Conventional file names inside an output directory.
pub fn checkpoint_path(dir: &Path, tag: &str, seed: u64) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("{tag}_seed{seed}.json"))
}

pub fn curve_path(dir: &Path, tag: &str, seed: u64) -> PathBuf {
    dir.join("curves").join(format!("{tag}_seed{seed}.csv"))
}

pub fn eval_curve_path(dir: &Path, tag: &str, seed: u64) -> PathBuf {
    dir.join("curves")
        .join(format!("{tag}_seed{seed}_eval.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn results_round_trip_exactly() {
        let rows = vec![ResultRow {
            config_hash: "abc".into(),
            seed: 7,
            method: Method::LsfSelection,
            drop_index: 0,
            drop_seed: u64::MAX,
            sum_se: 0.1 + 0.2,
            ee: 1.0 / 3.0,
            total_power: 5.4,
            active_antennas: 3,
            se_per_stream: vec![1e-300, 2.5],
            ee_per_stream: vec![],
        }];
        let bytes = results_csv(&rows).unwrap();
        assert_eq!(parse_results_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_a_parse_error() {
        let err = parse_results_csv(b"a,b\n1,2\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
