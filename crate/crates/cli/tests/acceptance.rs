//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test -p xlmimo-cli --test acceptance` (append `-- 1 3 8` to run a subset).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use xlmimo_cli::commands::cmd_sweep;
use xlmimo_cli::run::build_scenario;
use xlmimo_cli::summary::Summary;
use xlmimo_cli::{cmd_evaluate, cmd_train, ExperimentConfig, Options};
use xlmimo_core::channel::{generate_visibility_mask, ChannelConfig, VrConfig, VrMode};
use xlmimo_core::geometry::{edof_planar, generate_topology, rayleigh_distance, TopologyConfig};
use xlmimo_core::marl::{soft_update, Mlp, MlpGrads, OutputActivation, ReplayBuffer, Transition};
use xlmimo_core::signal::{
    spectral_efficiency, CombinerKind, FusionMode, PowerAllocation, Receiver, SelectionAssignment,
    SignalConfig,
};
use xlmimo_core::tasks::{
    brute_force_selection_oracle, count_assignments, decode_scores, drop_seed, eval_drop_seeds,
    split_budget, Method, Scenario, SeedStream,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn recipe(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../recipes")
        .join(name);
    ExperimentConfig::from_path(&path).unwrap()
}

fn opts(dir: &Path) -> Options {
    Options::new(dir)
}

// 1 ---------------------------------------------------------------------------

fn geometry_golden() -> Outcome {
    let r = rayleigh_distance(10.0, 0.1).unwrap();
    let e = edof_planar(2.25, 2.25, 0.1).unwrap();
    let rel = (e - 1600.0).abs() / 1600.0;
    Outcome {
        pass: r == 2000.0 && rel <= 0.05,
        detail: format!("rayleigh(10 m, 0.1 m) = {r} m; edof(2.25 m, 2.25 m, 0.1 m) = {e:.1} ({:.2}% from 1600)", 100.0 * rel),
    }
}

// 2 ---------------------------------------------------------------------------

fn flat(g: &MlpGrads) -> Vec<f64> {
    g.weights
        .iter()
        .zip(&g.biases)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect()
}

/// Smallest |pre-activation| over hidden units, recomputed from the raw layers.
fn hidden_margin(net: &Mlp, x: &DMatrix<f64>) -> f64 {
    let mut a = x.clone();
    let mut margin = f64::INFINITY;
    for l in &net.layers[..net.layers.len() - 1] {
        let mut z = &l.weight * &a;
        for mut col in z.column_iter_mut() {
            col += &l.bias;
        }
        margin = margin.min(z.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        a = z.map(|v| v.max(0.0));
    }
    margin
}

fn fd_worst(seed: u64) -> f64 {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let depth = rng.random_range(2..=4);
    let caps = [10, 16, 12, 5];
    let dims: Vec<usize> = (0..depth).map(|i| rng.random_range(1..=caps[i])).collect();
    let act = if rng.random_bool(0.5) {
        OutputActivation::Tanh
    } else {
        OutputActivation::Identity
    };
    let net = Mlp::new(&dims, act, &mut rng).unwrap();
    let batch = rng.random_range(1..=4);
    // Central differences are only meaningful away from ReLU kinks, so redraw
    // inputs until every hidden pre-activation clears the probe step by far.
    let x = loop {
        let x = DMatrix::from_fn(dims[0], batch, |_, _| rng.random_range(-1.0..1.0));
        if hidden_margin(&net, &x) > 1e-3 {
            break x;
        }
    };
    let up = DMatrix::from_fn(*dims.last().unwrap(), batch, |_, _| {
        rng.random_range(-1.0..1.0)
    });
    let f = |n: &Mlp, x: &DMatrix<f64>| n.predict_batch(x).unwrap().component_mul(&up).sum();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

    let (_, cache) = net.forward_batch(&x).unwrap();
    let (grads, dx) = net.backward_batch(&cache, &up).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = net.clone();
    for (i, g) in flat(&grads).into_iter().enumerate() {
        let v = *p.param_mut(i);
        *p.param_mut(i) = v + EPS;
        let hi = f(&p, &x);
        *p.param_mut(i) = v - EPS;
        let lo = f(&p, &x);
        *p.param_mut(i) = v;
        worst = worst.max(rel(g, (hi - lo) / (2.0 * EPS)));
    }
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += EPS;
        b[i] -= EPS;
        worst = worst.max(rel(dx[i], (f(&net, &a) - f(&net, &b)) / (2.0 * EPS)));
    }
    worst
}

fn gradient_oracle() -> Outcome {
    let worst = (0..100).map(fd_worst).fold(0.0, f64::max);
    Outcome {
        pass: worst < 1e-4,
        detail: format!("max relative error over 100 networks = {worst:.3e} (< 1e-4)"),
    }
}

// 3 ---------------------------------------------------------------------------

fn dominance_scenario() -> Scenario {
    let topo = TopologyConfig {
        num_bs: 2,
        bs_rows: 4,
        bs_cols: 4,
        num_ue: 6,
        ue_rows: 1,
        ue_cols: 1,
        area_side: 200.0,
        ..Default::default()
    };
    Scenario::build(
        &topo,
        &ChannelConfig::default(),
        &SignalConfig::default(),
        17,
    )
    .unwrap()
}

fn combiner_dominance() -> Outcome {
    let scn = dominance_scenario();
    let noise = scn.signal.noise_power();
    let rx = |combiner, fusion| Receiver {
        combiner,
        fusion,
        noise_power: noise,
    };
    let all =
        SelectionAssignment::all_active(scn.num_bs(), scn.antennas_per_bs(), scn.num_streams());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut se_gap, mut sinr_gap) = (f64::INFINITY, f64::INFINITY);
    for i in 0..100 {
        let h = scn.realize(drop_seed(99, SeedStream::EvalDrops, i));
        let p: Vec<f64> = (0..scn.num_streams())
            .map(|_| rng.random_range(0.01..=0.2))
            .collect();
        let powers = PowerAllocation::new(p, 0.2).unwrap();
        let sinr = |c, f| rx(c, f).sinr(&h, &all.active, &powers).unwrap();
        let (se_mmse, _) =
            spectral_efficiency(&sinr(CombinerKind::Mmse, FusionMode::LsfdOptimal)).unwrap();
        let (se_mr, _) =
            spectral_efficiency(&sinr(CombinerKind::Mr, FusionMode::LsfdOptimal)).unwrap();
        for (a, b) in se_mmse.iter().zip(&se_mr) {
            se_gap = se_gap.min(a - b);
        }
        for c in [CombinerKind::Mr, CombinerKind::Mmse] {
            let opt = sinr(c, FusionMode::LsfdOptimal);
            let eq = sinr(c, FusionMode::EqualWeight);
            for (a, b) in opt.iter().zip(&eq) {
                sinr_gap = sinr_gap.min(a - b);
            }
        }
    }
    Outcome {
        pass: se_gap >= -1e-9 && sinr_gap >= -1e-9,
        detail: format!(
            "100 drops, M=2, N_r=16, 6 streams: min SE(MMSE)-SE(MR) = {se_gap:.3e}, min SINR(LSFD)-SINR(equal) = {sinr_gap:.3e}"
        ),
    }
}

// 4 ---------------------------------------------------------------------------

fn as_oracle_match(dirs: &mut Vec<TempDir>) -> Outcome {
    let base = recipe("as_oracle_desk.toml");
    let mut ok = 0;
    let mut parts = Vec::new();
    for &seed in &base.seeds {
        let mut cfg = base.clone();
        cfg.seeds = vec![seed];
        let dir = tempfile::tempdir().unwrap();
        cmd_train(&cfg, &opts(dir.path()), None).unwrap();
        let summary = cmd_evaluate(&cfg, &opts(dir.path())).unwrap();
        let policy = summary.method(Method::MaddpgAs).unwrap().median_seed_sum_se;
        let scn = build_scenario(&cfg, seed).unwrap();
        let drops: Vec<_> = eval_drop_seeds(seed, cfg.run.eval_drops)
            .iter()
            .map(|&d| scn.realize(d))
            .collect();
        let oracle = brute_force_selection_oracle(&scn, &drops, cfg.task.oracle_cap)
            .unwrap()
            .sum_se;
        let ratio = policy / oracle;
        ok += usize::from(ratio >= 0.95);
        parts.push(format!("{ratio:.4}"));
        dirs.push(dir);
    }
    Outcome {
        pass: ok >= 4,
        detail: format!(
            "{} episodes, {} held-out drops; policy/oracle sum SE per seed [{}]; {ok}/5 seeds >= 0.95 (need 4)",
            base.run.episodes,
            base.run.eval_drops,
            parts.join(", ")
        ),
    }
}

// 5 ---------------------------------------------------------------------------

fn ee_direction() -> Outcome {
    let cfg = recipe("ee_selection_desk.toml");
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, &opts(dir.path()), None).unwrap();
    let s: Summary = cmd_evaluate(&cfg, &opts(dir.path())).unwrap();
    let get = |m| s.method(m).unwrap();
    let (no, lsf, rl) = (
        get(Method::NoSelection),
        get(Method::LsfSelection),
        get(Method::MaddpgAs),
    );
    let ratio = rl.median_seed_ee / no.median_seed_ee;
    let pass = ratio >= 1.10
        && lsf.median_seed_ee > no.median_seed_ee
        && lsf.median_seed_sum_se <= no.median_seed_sum_se;
    Outcome {
        pass,
        detail: format!(
            "{} episodes, medians over 5 seeds: EE uplift MaddpgAs {:+.2}% (need >= +10%), LsfSelection {:+.2}% (need > 0); \
             sum SE LsfSelection {:.3} <= NoSelection {:.3}",
            cfg.run.episodes,
            100.0 * (ratio - 1.0),
            100.0 * (lsf.median_seed_ee / no.median_seed_ee - 1.0),
            lsf.median_seed_sum_se,
            no.median_seed_sum_se
        ),
    }
}

// 6 ---------------------------------------------------------------------------

fn power_ordering() -> Outcome {
    let mut ordered = 0;
    let mut cells = Vec::new();
    for name in ["pc_sweep_desk.toml", "pc_sweep_desk_m2.toml"] {
        let cfg = recipe(name);
        let dir = tempfile::tempdir().unwrap();
        let table = cmd_sweep(&cfg, &opts(dir.path()), None, None).unwrap();
        for row in &table.rows {
            let v = |m: Method| row.median_sum_se.iter().find(|(x, _)| *x == m).unwrap().1;
            let (e, m, d) = (v(Method::EqualPower), v(Method::Maddpg), v(Method::DMaddpg));
            let ok = row.errors.is_empty() && d >= m && m >= e;
            ordered += usize::from(ok);
            cells.push(format!(
                "M={} N={}: {d:.2}/{m:.2}/{e:.2}{}",
                row.num_bs,
                row.antennas_per_bs,
                if ok { "" } else { " (out of order)" }
            ));
        }
    }
    Outcome {
        pass: ordered >= 3,
        detail: format!(
            "median sum SE D-MADDPG/MADDPG/EqualPower: {}; {ordered}/4 cells ordered (need 3)",
            cells.join("; ")
        ),
    }
}

// 7 ---------------------------------------------------------------------------

fn determinism(first: Option<&TempDir>) -> Outcome {
    let mut cfg = recipe("as_oracle_desk.toml");
    cfg.seeds = vec![cfg.seeds[0]];
    let runs: Vec<TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut compare: Vec<&Path> = runs.iter().map(|d| d.path()).collect();
    if let Some(d) = first {
        compare[1] = d.path();
    }
    for d in &runs[..if first.is_some() { 1 } else { 2 }] {
        cmd_train(&cfg, &opts(d.path()), None).unwrap();
        cmd_evaluate(&cfg, &opts(d.path())).unwrap();
    }
    let files = [
        "results.csv",
        &format!("curves/as_seed{}.csv", cfg.seeds[0]),
    ];
    let same = files
        .iter()
        .all(|f| fs::read(compare[0].join(f)).unwrap() == fs::read(compare[1].join(f)).unwrap());
    Outcome {
        pass: same,
        detail: format!("as_oracle_desk seed {} run twice single-worker: results.csv and training curve byte-identical = {same}", cfg.seeds[0]),
    }
}

// 8 ---------------------------------------------------------------------------

fn decode_fuzz() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut infeasible = 0;
    for case in 0..10_000u64 {
        // Sample only configs with at least as many BS antennas as streams;
        // topology validation rejects the rest before decoding is reached.
        let topo_cfg = loop {
            let c = TopologyConfig {
                num_bs: rng.random_range(1..=2),
                bs_rows: rng.random_range(1..=3),
                bs_cols: rng.random_range(1..=3),
                num_ue: rng.random_range(1..=4),
                ue_rows: 1,
                ue_cols: rng.random_range(1..=2),
                area_side: 100.0,
                ..Default::default()
            };
            if c.num_ue * c.antennas_per_ue() <= c.num_bs * c.antennas_per_bs() {
                break c;
            }
        };
        let topo = generate_topology(&topo_cfg, case).map_err(|e| e.to_string())?;
        let vr = VrConfig {
            mode: if rng.random_bool(0.5) {
                VrMode::Full
            } else {
                VrMode::RandomBlocks
            },
            block_fraction: rng.random_range(0.2..=1.0),
        };
        let mask = generate_visibility_mask(&topo, &vr, case).map_err(|e| e.to_string())?;
        let total = topo.num_bs() * topo.antennas_per_bs();
        let scores: Vec<Vec<f64>> = (0..topo.num_streams())
            .map(|_| (0..total).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        match decode_scores(&scores, &topo, &mask) {
            Ok(sel) => {
                let mut used = vec![false; total];
                for (u, a) in sel.assign.iter().enumerate() {
                    let a = a.ok_or(format!("case {case}: stream {u} unassigned"))?;
                    let flat_idx = a.bs * topo.antennas_per_bs() + a.antenna;
                    if used[flat_idx] || !mask.is_visible(topo.stream_owner(u), a.bs, a.antenna) {
                        return Err(format!("case {case}: conflict or invisible antenna"));
                    }
                    used[flat_idx] = true;
                }
            }
            Err(xlmimo_core::Error::Infeasible(_)) => {
                if count_assignments(&topo, &mask, 1) != Some(0) {
                    return Err(format!(
                        "case {case}: reported infeasible but a matching exists"
                    ));
                }
                infeasible += 1;
            }
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    Ok(infeasible)
}

fn invariants() -> Outcome {
    let mut fails = Vec::new();
    let mut notes = Vec::new();

    match decode_fuzz() {
        Ok(n) => notes.push(format!("decode fuzz 1e4 ok ({n} infeasible, confirmed)")),
        Err(e) => fails.push(e),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst_budget: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=9);
        let p_max = rng.random_range(0.01..1.0);
        let budget = rng.random_range(0.0..=1.0) * p_max * n as f64;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = split_budget(budget, &scores, rng.random_range(0.1..10.0), p_max).unwrap();
        let sum: f64 = out.iter().sum();
        worst_budget = worst_budget.max((sum - budget).abs() / budget.max(1e-300));
        if out
            .iter()
            .any(|&p| !(0.0..=p_max * (1.0 + 1e-12)).contains(&p))
        {
            fails.push("budget share outside [0, p_max]".into());
            break;
        }
    }
    if worst_budget > 1e-12 {
        fails.push(format!("budget conservation error {worst_budget:e}"));
    } else {
        notes.push(format!("budget conservation 1e4 ok ({worst_budget:.1e})"));
    }

    let mut buf = ReplayBuffer::new(5).unwrap();
    for i in 0..12 {
        buf.push(Transition {
            joint_obs: vec![i as f64],
            joint_actions: vec![],
            rewards: vec![0.0],
            joint_next_obs: vec![],
            done: true,
        });
    }
    let kept: Vec<f64> = buf.iter().map(|t| t.joint_obs[0]).collect();
    if kept != [7.0, 8.0, 9.0, 10.0, 11.0] {
        fails.push(format!("FIFO eviction kept {kept:?}"));
    } else {
        notes.push("FIFO eviction ok".into());
    }

    let mut worst_contraction: f64 = 0.0;
    for s in 0..200 {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let online = Mlp::new(&[4, 6, 2], OutputActivation::Tanh, &mut r).unwrap();
        let mut target = Mlp::new(&[4, 6, 2], OutputActivation::Tanh, &mut r).unwrap();
        let tau = r.random_range(0.0..=1.0);
        let before = target.max_abs_diff(&online);
        soft_update(&mut target, &online, tau).unwrap();
        let after = target.max_abs_diff(&online);
        worst_contraction = worst_contraction.max(after - (1.0 - tau) * before);
    }
    if worst_contraction > 1e-12 {
        fails.push(format!(
            "soft update expands distance by {worst_contraction:e}"
        ));
    } else {
        notes.push("soft-update contraction ok".into());
    }

    let scn = dominance_scenario();
    let rx = scn.receiver();
    let mut worst_ee: f64 = 0.0;
    for i in 0..200 {
        let h = scn.realize(drop_seed(5, SeedStream::EvalDrops, i));
        let p: Vec<f64> = (0..scn.num_streams())
            .map(|_| rng.random_range(0.0..=0.2))
            .collect();
        let powers = PowerAllocation::new(p, 0.2).unwrap();
        let mut active =
            SelectionAssignment::all_active(scn.num_bs(), scn.antennas_per_bs(), scn.num_streams())
                .active;
        for a in active.iter_mut().flatten() {
            *a = rng.random_bool(0.7);
        }
        for a in active.iter_mut() {
            a[0] = true;
        }
        let m = scn.evaluate(&rx, &h, &active, &powers).unwrap();
        let lhs = m.ee * m.total_power;
        let rhs = scn.signal.bandwidth_hz * m.sum_se;
        worst_ee = worst_ee.max((lhs - rhs).abs() / rhs.abs().max(1e-300));
    }
    if worst_ee > 1e-9 {
        fails.push(format!("EE identity error {worst_ee:e}"));
    } else {
        notes.push(format!("EE identity ok ({worst_ee:.1e})"));
    }

    Outcome {
        pass: fails.is_empty(),
        detail: if fails.is_empty() {
            notes.join("; ")
        } else {
            fails.join("; ")
        },
    }
}

// -----------------------------------------------------------------------------

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let mut keep = Vec::new();
    let mut failed = 0;
    let mut report = |id: usize, title: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        if !want(id) {
            return;
        }
        let t = Instant::now();
        let out = f();
        let took = t.elapsed();
        let in_time = took <= limit;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "[{}] {id}. {title}: {} ({:.1} s, limit {} s{})",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    report(
        1,
        "geometry golden values",
        Duration::from_secs(1),
        &mut geometry_golden,
    );
    report(
        2,
        "gradient oracle",
        Duration::from_secs(30),
        &mut gradient_oracle,
    );
    report(
        3,
        "combiner dominance",
        Duration::from_secs(30),
        &mut combiner_dominance,
    );
    report(4, "AS oracle match", min(10), &mut || {
        as_oracle_match(&mut keep)
    });
    report(5, "EE direction", min(15), &mut ee_direction);
    report(6, "power-control ordering", min(30), &mut power_ordering);
    report(7, "determinism", min(10), &mut || determinism(keep.first()));
    report(8, "invariant suite", min(2), &mut invariants);
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
