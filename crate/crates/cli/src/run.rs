//! In-memory orchestration: build scenarios, train, evaluate.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use xlmimo_core::tasks::{
    baseline_equal_power, baseline_lsf_selection, baseline_no_selection, eval_drop_seeds, AsEnv,
    Checkpoint, EpisodeLog, ExperimentResult, MarlTask, Method, MethodRun, PcEnv, PcLayers,
    Scenario, Trainer,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub fn build_scenario(cfg: &ExperimentConfig, seed: u64) -> CliResult<Scenario> {
    Ok(Scenario::build(
        &cfg.topology,
        &cfg.channel,
        &cfg.signal,
        seed,
    )?)
}

/// Checkpoint tag of a learned method.
pub fn task_tag(method: Method) -> Option<&'static str> {
    match method {
        Method::MaddpgAs => Some("as"),
        Method::Maddpg => Some("pc"),
        Method::DMaddpg => Some("dpc"),
        _ => None,
    }
}

pub fn method_for_tag(tag: &str) -> CliResult<Method> {
    match tag {
        "as" => Ok(Method::MaddpgAs),
        "pc" => Ok(Method::Maddpg),
        "dpc" => Ok(Method::DMaddpg),
        other => Err(CliError::Usage(format!(
            "unknown task `{other}` (use as, pc or dpc)"
        ))),
    }
}

/// Environment that trains `method` on `scenario`.
pub fn make_task(
    cfg: &ExperimentConfig,
    scenario: Scenario,
    method: Method,
) -> CliResult<Box<dyn MarlTask + Send>> {
    Ok(match method {
        Method::MaddpgAs => Box::new(AsEnv::reset(scenario, cfg.task.as_config())?),
        Method::Maddpg => Box::new(PcEnv::reset(
            scenario,
            cfg.task.pc_config(),
            PcLayers::Single,
        )?),
        Method::DMaddpg => Box::new(PcEnv::reset(
            scenario,
            cfg.task.pc_config(),
            PcLayers::Double,
        )?),
        other => return Err(CliError::Usage(format!("{other} is not a learned method"))),
    })
}

/// Greedy-policy evaluation point on the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub drops: usize,
    pub mean_sum_se: f64,
    pub mean_ee: f64,
}

/// A trained method with everything needed to evaluate or checkpoint it.
pub struct Trained {
    pub method: Method,
    pub trainer: Trainer,
    pub task: Box<dyn MarlTask + Send>,
    pub logs: Vec<EpisodeLog>,
    pub curve: Vec<CurvePoint>,
}

impl Trained {
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint::new(
            task_tag(self.method).expect("learned"),
            config_hash,
            self.task.as_ref(),
            &self.trainer,
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Trains `method` for the configured number of episodes (minus any already
/// done by `resume`). `on_checkpoint` receives the cadence checkpoints, the
/// final one, and, before a numerical abort propagates, the last good state.
pub fn train_method(
    cfg: &ExperimentConfig,
    seed: u64,
    method: Method,
    resume: Option<Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> CliResult<()>,
) -> CliResult<Trained> {
    let tag =
        task_tag(method).ok_or_else(|| CliError::Usage(format!("{method} is not trainable")))?;
    let hash = cfg.hash();
    let scenario = build_scenario(cfg, seed)?;
    let mut task = make_task(cfg, scenario, method)?;
    let mut trainer = match resume {
        Some(ck) => {
            let t = ck.restore(tag, task.as_mut())?;
            if t.task_seed() != seed {
                return Err(xlmimo_core::Error::Checkpoint(format!(
                    "checkpoint belongs to seed {}, not {seed}",
                    t.task_seed()
                ))
                .into());
            }
            t
        }
        None => Trainer::new(task.as_ref(), cfg.train.clone(), seed)?,
    };
    let curve_drops = eval_drop_seeds(seed, cfg.run.curve_eval_drops);
    let mut logs = Vec::new();
    let mut curve = Vec::new();
    while trainer.episodes() < cfg.run.episodes {
        let log = match trainer.train_episode(task.as_mut()) {
            Ok(l) => l,
            Err(e) => {
                on_checkpoint(&Checkpoint::new(tag, &hash, task.as_ref(), &trainer))?;
                return Err(e.into());
            }
        };
        logs.push(log);
        let done = trainer.episodes();
        if cfg.run.eval_every > 0 && done % cfg.run.eval_every == 0 {
            let m = trainer.evaluate(task.as_mut(), &curve_drops)?;
            curve.push(CurvePoint {
                episode: done,
                drops: m.len(),
                mean_sum_se: mean(m.iter().map(|x| x.sum_se)),
                mean_ee: mean(m.iter().map(|x| x.ee)),
            });
        }
        if cfg.run.checkpoint_every > 0
            && done % cfg.run.checkpoint_every == 0
            && done < cfg.run.episodes
        {
            on_checkpoint(&Checkpoint::new(tag, &hash, task.as_ref(), &trainer))?;
        }
    }
    on_checkpoint(&Checkpoint::new(tag, &hash, task.as_ref(), &trainer))?;
    Ok(Trained {
        method,
        trainer,
        task,
        logs,
        curve,
    })
}

/// Held-out evaluation of a non-learned method.
pub fn evaluate_baseline(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    method: Method,
) -> CliResult<MethodRun> {
    let drops = eval_drop_seeds(scenario.seed, cfg.run.eval_drops);
    Ok(match method {
        Method::NoSelection => baseline_no_selection(scenario, &drops)?,
        Method::LsfSelection => baseline_lsf_selection(scenario, &drops)?,
        Method::EqualPower => baseline_equal_power(scenario, &drops, cfg.task.fill_fraction)?,
        other => return Err(CliError::Usage(format!("{other} needs a trained policy"))),
    })
}

/// Held-out evaluation of a trained method.
pub fn evaluate_trained(
    cfg: &ExperimentConfig,
    seed: u64,
    trained: &mut Trained,
) -> CliResult<MethodRun> {
    let drops = eval_drop_seeds(seed, cfg.run.eval_drops);
    let metrics = trained.trainer.evaluate(trained.task.as_mut(), &drops)?;
    Ok(MethodRun {
        method: trained.method,
        seed,
        drop_seeds: drops,
        metrics,
    })
}

/// Everything produced for one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub runs: Vec<MethodRun>,
    pub trained: Vec<Trained>,
}

/// Trains (when episodes > 0) and evaluates every configured method for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedOutcome> {
    let scenario = build_scenario(cfg, seed)?;
    let mut runs = Vec::new();
    let mut trained = Vec::new();
    for method in cfg.methods() {
        if method.is_learned() {
            if cfg.run.episodes == 0 {
                continue;
            }
            let mut t = train_method(cfg, seed, method, None, &mut |_| Ok(()))?;
            runs.push(evaluate_trained(cfg, seed, &mut t)?);
            trained.push(t);
        } else {
            runs.push(evaluate_baseline(cfg, &scenario, method)?);
        }
    }
    Ok(SeedOutcome {
        seed,
        runs,
        trained,
    })
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Runs every configured seed in memory, `jobs` seeds at a time.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> CliResult<ExperimentResult> {
    let mut result = ExperimentResult {
        config_hash: cfg.hash(),
        ..Default::default()
    };
    for outcome in parallel_map(&cfg.seeds, jobs, |&s| run_seed(cfg, s)) {
        let o = outcome?;
        result.runs.extend(o.runs);
        result
            .curves
            .extend(o.trained.into_iter().map(|t| (t.method, o.seed, t.logs)));
    }
    Ok(result)
}
