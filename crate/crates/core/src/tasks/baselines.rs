//! Non-learning reference methods evaluated on a fixed drop batch.

use super::scenario::{Method, MethodRun, Scenario};
use super::selection::lsf_assignment;
use crate::error::{Error, Result};
use crate::signal::{PowerAllocation, SelectionAssignment};

fn run(
    scenario: &Scenario,
    method: Method,
    drop_seeds: &[u64],
    active: &[Vec<bool>],
    powers: &PowerAllocation,
) -> Result<MethodRun> {
    let rx = scenario.receiver();
    let metrics = drop_seeds
        .iter()
        .map(|&s| scenario.evaluate(&rx, &scenario.realize(s), active, powers))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodRun {
        method,
        seed: scenario.seed,
        drop_seeds: drop_seeds.to_vec(),
        metrics,
    })
}

/// Every antenna active, every stream at `p_max`.
pub fn baseline_no_selection(scenario: &Scenario, drop_seeds: &[u64]) -> Result<MethodRun> {
    let all = SelectionAssignment::all_active(
        scenario.num_bs(),
        scenario.antennas_per_bs(),
        scenario.num_streams(),
    );
    let powers = PowerAllocation::uniform(scenario.num_streams(), scenario.signal.p_max_w);
    run(
        scenario,
        Method::NoSelection,
        drop_seeds,
        &all.active,
        &powers,
    )
}

/// Greedy mean-gain selection; only the selected antennas are active.
pub fn baseline_lsf_selection(scenario: &Scenario, drop_seeds: &[u64]) -> Result<MethodRun> {
    let sel = lsf_assignment(scenario)?;
    let powers = PowerAllocation::uniform(scenario.num_streams(), scenario.signal.p_max_w);
    run(
        scenario,
        Method::LsfSelection,
        drop_seeds,
        &sel.active,
        &powers,
    )
}

/// Every antenna active, every stream at `p_max * fill`.
pub fn baseline_equal_power(
    scenario: &Scenario,
    drop_seeds: &[u64],
    fill: f64,
) -> Result<MethodRun> {
    if !(fill > 0.0 && fill <= 1.0) {
        return Err(Error::config("task.fill_fraction", "must lie in (0, 1]"));
    }
    let all = SelectionAssignment::all_active(
        scenario.num_bs(),
        scenario.antennas_per_bs(),
        scenario.num_streams(),
    );
    let powers = PowerAllocation::uniform(scenario.num_streams(), scenario.signal.p_max_w * fill);
    run(
        scenario,
        Method::EqualPower,
        drop_seeds,
        &all.active,
        &powers,
    )
}
