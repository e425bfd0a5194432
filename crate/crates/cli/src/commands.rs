//! The five subcommands, callable in-process.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use xlmimo_core::geometry::{
    classify_field_region, edof_planar, fresnel_distance, rayleigh_distance, FieldRegion,
};
use xlmimo_core::tasks::{Checkpoint, Method, MethodRun};

use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::{CliError, CliResult};
use crate::output::{
    checkpoint_path, curve_csv, curve_path, eval_curve_csv, eval_curve_path, parse_results_csv,
    result_rows, results_csv, write_atomic, write_json,
};
use crate::run::{
    build_scenario, evaluate_baseline, evaluate_trained, make_task, method_for_tag, parallel_map,
    run_seed, task_tag, train_method, Trained,
};
use crate::summary::{median, summarize, Summary};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Options {
    pub out: PathBuf,
    pub jobs: usize,
    pub checkpoint: Option<PathBuf>,
    /// Suppresses progress lines on stderr.
    pub quiet: bool,
}

impl Options {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            jobs: 1,
            checkpoint: None,
            quiet: true,
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Loads a config file, replacing its seed list when `seeds` is non-empty.
pub fn load_config(path: &Path, seeds: &[u64]) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub command: String,
    pub start_time_unix_s: f64,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
}

fn write_manifest(
    opts: &Options,
    cfg: &ExperimentConfig,
    command: &str,
    outputs: Vec<PathBuf>,
) -> CliResult<()> {
    let start = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let m = Manifest {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        start_time_unix_s: start,
        seeds: cfg.seeds.clone(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&opts.out.join("manifest.json"), &m)
}

fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn first_error<T>(results: Vec<CliResult<T>>) -> CliResult<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    let mut err = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    }
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

// ---------------------------------------------------------------- topology

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelReport {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub diagonal_m: f64,
    pub rayleigh_distance_m: f64,
    pub fresnel_distance_m: f64,
    pub edof: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkReport {
    pub bs: usize,
    pub distance_m: f64,
    pub region: FieldRegion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UeReport {
    pub ue: usize,
    pub links: Vec<LinkReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamReport {
    pub stream: usize,
    pub ue: usize,
    pub position_m: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTopology {
    pub seed: u64,
    pub topology: xlmimo_core::geometry::NetworkTopology,
    pub bs_panels: Vec<PanelReport>,
    pub ue_panels: Vec<PanelReport>,
    pub ues: Vec<UeReport>,
    pub streams: Vec<StreamReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyReport {
    pub config_hash: String,
    pub seeds: Vec<SeedTopology>,
}

fn panel_report(
    i: usize,
    p: &xlmimo_core::geometry::Panel,
    wavelength: f64,
) -> CliResult<PanelReport> {
    let d = p.diagonal();
    let (a, b) = p.side_lengths();
    Ok(PanelReport {
        index: i,
        rows: p.rows,
        cols: p.cols,
        diagonal_m: d,
        rayleigh_distance_m: rayleigh_distance(d, wavelength)?,
        fresnel_distance_m: fresnel_distance(d, wavelength)?,
        edof: edof_planar(a, b, wavelength)?,
    })
}

pub fn cmd_topology(cfg: &ExperimentConfig, opts: &Options) -> CliResult<TopologyReport> {
    let path = opts.out.join("topology.json");
    write_manifest(opts, cfg, "topology", vec![path.clone()])?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let topo = build_scenario(cfg, seed)?.topology;
        let lambda = topo.wavelength;
        let bs_panels = topo
            .bs_panels
            .iter()
            .enumerate()
            .map(|(i, p)| panel_report(i, p, lambda))
            .collect::<CliResult<Vec<_>>>()?;
        let ue_panels = topo
            .ue_panels
            .iter()
            .enumerate()
            .map(|(i, p)| panel_report(i, p, lambda))
            .collect::<CliResult<Vec<_>>>()?;
        let mut ues = Vec::new();
        for (k, ue) in topo.ue_panels.iter().enumerate() {
            let mut links = Vec::new();
            for (m, bs) in topo.bs_panels.iter().enumerate() {
                let distance = (ue.center - bs.center).norm();
                links.push(LinkReport {
                    bs: m,
                    distance_m: distance,
                    region: classify_field_region(distance, bs.diagonal(), lambda)?,
                });
            }
            ues.push(UeReport { ue: k, links });
        }
        let streams = topo
            .stream_positions()
            .iter()
            .enumerate()
            .map(|(u, p)| StreamReport {
                stream: u,
                ue: topo.stream_owner(u),
                position_m: [p.x, p.y, p.z],
            })
            .collect();
        seeds.push(SeedTopology {
            seed,
            topology: topo,
            bs_panels,
            ue_panels,
            ues,
            streams,
        });
    }
    let report = TopologyReport {
        config_hash: cfg.hash(),
        seeds,
    };
    write_json(&path, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- train

/// Files and results of a training command.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub curves: Vec<PathBuf>,
    /// Present when no learned method ran.
    pub baseline_summary: Option<Summary>,
}

fn resume_checkpoint(opts: &Options, tag: &str, seed: u64) -> CliResult<Option<Checkpoint>> {
    let Some(p) = &opts.checkpoint else {
        return Ok(None);
    };
    let path = resolve_checkpoint(p, tag, seed)?;
    Ok(Some(Checkpoint::from_json(&std::fs::read_to_string(
        path,
    )?)?))
}

/// A checkpoint file, an output directory, or a `checkpoints/` directory.
pub fn resolve_checkpoint(p: &Path, tag: &str, seed: u64) -> CliResult<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    let candidates = [
        checkpoint_path(p, tag, seed),
        p.join(format!("{tag}_seed{seed}.json")),
    ];
    candidates.into_iter().find(|c| c.is_file()).ok_or_else(|| {
        xlmimo_core::Error::Checkpoint(format!(
            "no `{tag}` checkpoint for seed {seed} under {}",
            p.display()
        ))
        .into()
    })
}

fn write_baselines(
    cfg: &ExperimentConfig,
    opts: &Options,
    methods: &[Method],
) -> CliResult<Summary> {
    let runs: Vec<Vec<MethodRun>> = first_error(parallel_map(&cfg.seeds, opts.jobs, |&seed| {
        let scn = build_scenario(cfg, seed)?;
        methods
            .iter()
            .map(|&m| evaluate_baseline(cfg, &scn, m))
            .collect::<CliResult<Vec<_>>>()
    }))?;
    emit_results(cfg, &opts.out, &runs.concat())
}

fn emit_results(cfg: &ExperimentConfig, dir: &Path, runs: &[MethodRun]) -> CliResult<Summary> {
    let hash = cfg.hash();
    let rows = result_rows(&hash, cfg.signal.bandwidth_hz, runs);
    write_atomic(&dir.join("results.csv"), &results_csv(&rows)?)?;
    let summary = summarize(&hash, &rows, Some(config_echo(cfg)));
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Trains the learned methods (one of them when `task` is given).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    opts: &Options,
    task: Option<&str>,
) -> CliResult<TrainReport> {
    let methods: Vec<Method> = match task {
        Some(t) => vec![method_for_tag(t)?],
        None => cfg
            .methods()
            .into_iter()
            .filter(|m| m.is_learned())
            .collect(),
    };
    if let Some(&m) = methods.first() {
        if !cfg.methods().contains(&m) && !cfg.methods.is_empty() {
            return Err(CliError::config(
                "methods",
                format!("{m} is not listed in the config"),
            ));
        }
    }
    let hash = cfg.hash();
    if cfg.run.episodes == 0 || methods.is_empty() {
        let baselines: Vec<Method> = cfg
            .methods()
            .into_iter()
            .filter(|m| !m.is_learned())
            .collect();
        write_manifest(
            opts,
            cfg,
            "train",
            vec![opts.out.join("results.csv"), opts.out.join("summary.json")],
        )?;
        let summary = write_baselines(cfg, opts, &baselines)?;
        return Ok(TrainReport {
            baseline_summary: Some(summary),
            ..Default::default()
        });
    }
    let jobs: Vec<(u64, Method)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| methods.iter().map(move |&m| (s, m)))
        .collect();
    let mut planned = Vec::new();
    for &(s, m) in &jobs {
        let tag = task_tag(m).expect("learned");
        planned.push(checkpoint_path(&opts.out, tag, s));
        planned.push(curve_path(&opts.out, tag, s));
        if cfg.run.eval_every > 0 {
            planned.push(eval_curve_path(&opts.out, tag, s));
        }
    }
    write_manifest(opts, cfg, "train", planned)?;
    let results = parallel_map(
        &jobs,
        opts.jobs,
        |&(seed, method)| -> CliResult<(PathBuf, Vec<PathBuf>)> {
            let tag = task_tag(method).expect("learned");
            let ck_path = checkpoint_path(&opts.out, tag, seed);
            let resume = resume_checkpoint(opts, tag, seed)?;
            let trained = train_method(cfg, seed, method, resume, &mut |ck| {
                write_atomic(&ck_path, ck.to_json()?.as_bytes())
            })?;
            let mut curves = vec![curve_path(&opts.out, tag, seed)];
            write_atomic(&curves[0], &curve_csv(&hash, seed, method, &trained.logs)?)?;
            if cfg.run.eval_every > 0 {
                let p = eval_curve_path(&opts.out, tag, seed);
                write_atomic(&p, &eval_curve_csv(&hash, seed, method, &trained.curve)?)?;
                curves.push(p);
            }
            opts.note(format!(
                "trained {method} seed {seed}: {} episodes, final reward {:.4}",
                trained.trainer.episodes(),
                trained.logs.last().map(|l| l.reward).unwrap_or(f64::NAN)
            ));
            Ok((ck_path, curves))
        },
    );
    let mut report = TrainReport::default();
    for (ck, curves) in first_error(results)? {
        report.checkpoints.push(ck);
        report.curves.extend(curves);
    }
    Ok(report)
}

// ---------------------------------------------------------------- evaluate

fn load_trained(
    cfg: &ExperimentConfig,
    opts: &Options,
    method: Method,
    seed: u64,
) -> CliResult<Trained> {
    let tag = task_tag(method).expect("learned");
    let path = resolve_checkpoint(opts.checkpoint.as_deref().unwrap_or(&opts.out), tag, seed)?;
    let ck = Checkpoint::from_json(&std::fs::read_to_string(&path)?)?;
    let hash = cfg.hash();
    if ck.config_hash != hash {
        return Err(xlmimo_core::Error::Checkpoint(format!(
            "{} was trained under config {} but the current config hashes to {hash}",
            path.display(),
            ck.config_hash
        ))
        .into());
    }
    let mut task = make_task(cfg, build_scenario(cfg, seed)?, method)?;
    let trainer = ck.restore(tag, task.as_mut())?;
    if trainer.task_seed() != seed {
        return Err(xlmimo_core::Error::Checkpoint(format!(
            "{} belongs to seed {}, not {seed}",
            path.display(),
            trainer.task_seed()
        ))
        .into());
    }
    Ok(Trained {
        method,
        trainer,
        task,
        logs: Vec::new(),
        curve: Vec::new(),
    })
}

/// Evaluates every configured method on the held-out drops of every seed.
pub fn cmd_evaluate(cfg: &ExperimentConfig, opts: &Options) -> CliResult<Summary> {
    write_manifest(
        opts,
        cfg,
        "evaluate",
        vec![opts.out.join("results.csv"), opts.out.join("summary.json")],
    )?;
    let methods = cfg.methods();
    let runs = first_error(parallel_map(
        &cfg.seeds,
        opts.jobs,
        |&seed| -> CliResult<Vec<MethodRun>> {
            let scn = build_scenario(cfg, seed)?;
            let mut out = Vec::new();
            for &m in &methods {
                if m.is_learned() {
                    let mut t = load_trained(cfg, opts, m, seed)?;
                    out.push(evaluate_trained(cfg, seed, &mut t)?);
                } else {
                    out.push(evaluate_baseline(cfg, &scn, m)?);
                }
            }
            Ok(out)
        },
    ))?;
    emit_results(cfg, &opts.out, &runs.concat())
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub config_hash: String,
    pub num_bs: usize,
    pub antennas_per_bs: usize,
    pub num_ue: usize,
    pub seeds_ok: usize,
    /// Per method, median over seeds of the per-seed mean sum SE.
    pub median_sum_se: Vec<(Method, f64)>,
    pub median_ee: Vec<(Method, f64)>,
    /// `Some(true)` when D-MADDPG falls below equal power on this row.
    pub dmaddpg_below_equal_power: Option<bool>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_hash: String,
    pub axis: SweepAxis,
    pub methods: Vec<Method>,
    pub rows: Vec<SweepRow>,
}

fn axis_name(a: SweepAxis) -> &'static str {
    match a {
        SweepAxis::M => "M",
        SweepAxis::N => "N",
        SweepAxis::K => "K",
    }
}

pub fn sweep_dir(out: &Path, axis: SweepAxis, value: usize) -> PathBuf {
    out.join(format!("{}{value}", axis_name(axis)))
}

/// Train + evaluate per axis value per seed; failures are recorded, not fatal.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    opts: &Options,
    axis: Option<SweepAxis>,
    values: Option<Vec<usize>>,
) -> CliResult<SweepTable> {
    let section = cfg.sweep.clone();
    let axis = axis
        .or(section.as_ref().map(|s| s.axis))
        .ok_or_else(|| CliError::config("sweep.axis", "no sweep axis given"))?;
    let values = values
        .or(section.map(|s| s.values))
        .ok_or_else(|| CliError::config("sweep.values", "no sweep values given"))?;
    if values.is_empty() {
        return Err(CliError::config("sweep.values", "must not be empty"));
    }
    let cells: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| cfg.with_axis(axis, v))
        .collect::<CliResult<_>>()?;
    let mut planned = vec![opts.out.join("sweep.csv"), opts.out.join("sweep.json")];
    for &v in &values {
        planned.push(sweep_dir(&opts.out, axis, v).join("results.csv"));
        planned.push(sweep_dir(&opts.out, axis, v).join("summary.json"));
    }
    write_manifest(opts, cfg, "sweep", planned)?;

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes = parallel_map(&jobs, opts.jobs, |&(i, seed)| {
        let r = run_seed(&cells[i], seed).map(|o| o.runs);
        match &r {
            Ok(_) => opts.note(format!(
                "{}={} seed {seed} done",
                axis_name(axis),
                values[i]
            )),
            Err(e) => opts.note(format!(
                "{}={} seed {seed} failed: {e}",
                axis_name(axis),
                values[i]
            )),
        }
        r
    });

    let methods = cfg.methods();
    let mut rows = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let mut runs = Vec::new();
        let mut errors = Vec::new();
        for ((ci, seed), r) in jobs.iter().zip(&outcomes) {
            if *ci != i {
                continue;
            }
            match r {
                Ok(v) => runs.extend(v.iter().cloned()),
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        let seeds_ok = cfg.seeds.len() - errors.len();
        let dir = sweep_dir(&opts.out, axis, values[i]);
        let summary = emit_results(cell, &dir, &runs)?;
        let pick = |f: fn(&crate::summary::MethodSummary) -> f64| -> Vec<(Method, f64)> {
            methods
                .iter()
                .map(|&m| (m, summary.method(m).map(f).unwrap_or(f64::NAN)))
                .collect()
        };
        let median_sum_se = pick(|s| s.median_seed_sum_se);
        let lookup = |m: Method| median_sum_se.iter().find(|(x, _)| *x == m).map(|&(_, v)| v);
        let flag = match (lookup(Method::DMaddpg), lookup(Method::EqualPower)) {
            (Some(d), Some(e)) if d.is_finite() && e.is_finite() => Some(d < e),
            _ => None,
        };
        rows.push(SweepRow {
            value: values[i],
            config_hash: cell.hash(),
            num_bs: cell.topology.num_bs,
            antennas_per_bs: cell.topology.antennas_per_bs(),
            num_ue: cell.topology.num_ue,
            seeds_ok,
            median_ee: pick(|s| s.median_seed_ee),
            median_sum_se,
            dmaddpg_below_equal_power: flag,
            errors,
        });
    }
    let table = SweepTable {
        config_hash: cfg.hash(),
        axis,
        methods: methods.clone(),
        rows,
    };
    write_atomic(&opts.out.join("sweep.csv"), &sweep_csv(&table)?)?;
    write_json(&opts.out.join("sweep.json"), &table)?;
    Ok(table)
}

pub fn sweep_csv(table: &SweepTable) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "config_hash".to_string(),
        "axis".into(),
        "value".into(),
        "cell_config_hash".into(),
        "num_bs".into(),
        "antennas_per_bs".into(),
        "num_ue".into(),
        "seeds_ok".into(),
    ];
    for m in &table.methods {
        header.push(format!("{m}_median_sum_se"));
    }
    for m in &table.methods {
        header.push(format!("{m}_median_ee"));
    }
    header.push("dmaddpg_below_equal_power".into());
    header.push("errors".into());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            table.config_hash.clone(),
            axis_name(table.axis).to_string(),
            r.value.to_string(),
            r.config_hash.clone(),
            r.num_bs.to_string(),
            r.antennas_per_bs.to_string(),
            r.num_ue.to_string(),
            r.seeds_ok.to_string(),
        ];
        rec.extend(r.median_sum_se.iter().map(|(_, v)| v.to_string()));
        rec.extend(r.median_ee.iter().map(|(_, v)| v.to_string()));
        rec.push(
            r.dmaddpg_below_equal_power
                .map(|b| b.to_string())
                .unwrap_or_default(),
        );
        rec.push(r.errors.join(" | "));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

// ---------------------------------------------------------------- report

/// Regenerates `summary.json` from `results.csv` in the output directory.
pub fn cmd_report(cfg: Option<&ExperimentConfig>, opts: &Options) -> CliResult<Summary> {
    let rows = parse_results_csv(&std::fs::read(opts.out.join("results.csv"))?)?;
    let hash = match rows.first() {
        Some(r) => r.config_hash.clone(),
        None => return Err(CliError::Parse("results.csv has no rows".into())),
    };
    if let Some(bad) = rows.iter().find(|r| r.config_hash != hash) {
        return Err(CliError::Parse(format!(
            "results.csv mixes config hashes {hash} and {}",
            bad.config_hash
        )));
    }
    let echo = match cfg {
        Some(c) => {
            if c.hash() != hash {
                return Err(CliError::config(
                    "config",
                    format!(
                        "config hashes to {} but results were produced under {hash}",
                        c.hash()
                    ),
                ));
            }
            Some(config_echo(c))
        }
        None => std::fs::read_to_string(opts.out.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<Summary>(&t).ok())
            .and_then(|s| s.config),
    };
    let summary = summarize(&hash, &rows, echo);
    write_json(&opts.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Median over seeds of `f` applied to each run of `method`.
pub fn median_over_seeds(runs: &[MethodRun], method: Method, f: impl Fn(&MethodRun) -> f64) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.method == method).map(f).collect();
    median(&v)
}
