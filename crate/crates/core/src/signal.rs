//! Uplink receive processing, LSFD fusion at the CPU, and the SE/EE metrics.
//!
//! Each UE antenna is an independent single-antenna transmitter ("stream").
//! A BS applies a local combiner over its active antennas; the CPU fuses
//! the per-BS soft estimates with large-scale fading decoding weights.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, VisibilityMask};
use crate::error::{Error, Result};
use crate::geometry::NetworkTopology;

const LSFD_RIDGE: f64 = 1e-12;

/// Transmit power per stream, watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    p: Vec<f64>,
}

impl PowerAllocation {
    pub fn new(p: Vec<f64>, p_max: f64) -> Result<Self> {
        for (u, &x) in p.iter().enumerate() {
            if !(x >= 0.0) || !x.is_finite() {
                return Err(Error::invalid(format!(
                    "power of stream {u} must be >= 0, got {x}"
                )));
            }
            if x > p_max * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "power of stream {u} exceeds p_max: {x} > {p_max}"
                )));
            }
        }
        Ok(Self { p })
    }

    pub fn uniform(num_streams: usize, power: f64) -> Self {
        Self {
            p: vec![power; num_streams],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

/// Global BS antenna id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AntennaId {
    pub bs: usize,
    pub antenna: usize,
}

/// Stream-to-antenna assignment plus the resulting per-BS active sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionAssignment {
    pub assign: Vec<Option<AntennaId>>,
    pub active: Vec<Vec<bool>>,
}

impl SelectionAssignment {
    /// Every antenna on every BS switched on; no stream-specific assignment.
    pub fn all_active(num_bs: usize, antennas_per_bs: usize, num_streams: usize) -> Self {
        Self {
            assign: vec![None; num_streams],
            active: vec![vec![true; antennas_per_bs]; num_bs],
        }
    }

    /// Validates "no reuse" and visibility; the active set is the set of assigned antennas.
    pub fn from_assignments(
        assign: Vec<Option<AntennaId>>,
        topology: &NetworkTopology,
        mask: &VisibilityMask,
    ) -> Result<Self> {
        let num_bs = topology.num_bs();
        let n_r = topology.antennas_per_bs();
        if assign.len() != topology.num_streams() {
            return Err(Error::shape("assignment length differs from stream count"));
        }
        let mut active = vec![vec![false; n_r]; num_bs];
        for (u, a) in assign.iter().enumerate() {
            let Some(id) = a else { continue };
            if id.bs >= num_bs || id.antenna >= n_r {
                return Err(Error::invalid(format!(
                    "stream {u} assigned to nonexistent antenna {id:?}"
                )));
            }
            if !mask.is_visible(topology.stream_owner(u), id.bs, id.antenna) {
                return Err(Error::invalid(format!(
                    "stream {u} assigned to invisible antenna {id:?}"
                )));
            }
            if active[id.bs][id.antenna] {
                return Err(Error::invalid(format!("antenna {id:?} reused")));
            }
            active[id.bs][id.antenna] = true;
        }
        Ok(Self { assign, active })
    }

    pub fn active_count(&self) -> usize {
        self.active
            .iter()
            .map(|a| a.iter().filter(|&&x| x).count())
            .sum()
    }

    /// True when no antenna is claimed twice and every claim is visible.
    pub fn is_valid(&self, topology: &NetworkTopology, mask: &VisibilityMask) -> bool {
        Self::from_assignments(self.assign.clone(), topology, mask).is_ok()
    }
}

/// Consumption model `P = sum p / eta + N_active P_ant + P_fixed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    pub amplifier_efficiency: f64,
    pub antenna_power: f64,
    pub fixed_power: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            amplifier_efficiency: 0.4,
            antenna_power: 0.2,
            fixed_power: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    #[default]
    Mr,
    Mmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    EqualWeight,
    #[default]
    LsfdOptimal,
}

/// Signal section of an experiment: link budget, power model and receiver chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// Per-stream transmit power cap, also the data power of the selection task.
    pub p_max_w: f64,
    pub amplifier_efficiency: f64,
    pub antenna_power_w: f64,
    pub fixed_power_w: f64,
    pub combiner: CombinerKind,
    pub fusion: FusionMode,
}

impl Default for SignalConfig {
    fn default() -> Self {
        let pm = PowerModel::default();
        Self {
            bandwidth_hz: 20e6,
            noise_figure_db: 7.0,
            p_max_w: 0.2,
            amplifier_efficiency: pm.amplifier_efficiency,
            antenna_power_w: pm.antenna_power,
            fixed_power_w: pm.fixed_power,
            combiner: CombinerKind::Mr,
            fusion: FusionMode::LsfdOptimal,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("signal.{name}"), msg))
            }
        };
        check(
            "bandwidth_hz",
            self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite(),
            "must be > 0",
        )?;
        check(
            "noise_figure_db",
            self.noise_figure_db.is_finite(),
            "must be finite",
        )?;
        check(
            "p_max_w",
            self.p_max_w > 0.0 && self.p_max_w.is_finite(),
            "must be > 0",
        )?;
        check(
            "amplifier_efficiency",
            self.amplifier_efficiency > 0.0 && self.amplifier_efficiency <= 1.0,
            "must lie in (0, 1]",
        )?;
        check(
            "antenna_power_w",
            self.antenna_power_w >= 0.0 && self.antenna_power_w.is_finite(),
            "must be >= 0",
        )?;
        check(
            "fixed_power_w",
            self.fixed_power_w >= 0.0 && self.fixed_power_w.is_finite(),
            "must be >= 0",
        )?;
        Ok(())
    }

    pub fn noise_power(&self) -> f64 {
        thermal_noise_watts(self.bandwidth_hz, self.noise_figure_db)
    }

    pub fn power_model(&self) -> PowerModel {
        PowerModel {
            amplifier_efficiency: self.amplifier_efficiency,
            antenna_power: self.antenna_power_w,
            fixed_power: self.fixed_power_w,
        }
    }

    pub fn receiver(&self) -> Receiver {
        Receiver {
            combiner: self.combiner,
            fusion: self.fusion,
            noise_power: self.noise_power(),
        }
    }
}

/// Per-realization outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub se_per_stream: Vec<f64>,
    pub sum_se: f64,
    pub total_power: f64,
    pub ee: f64,
    pub active_antennas: usize,
}

impl EpisodeMetrics {
    pub fn new(
        sinr: &[f64],
        powers: &PowerAllocation,
        active_antennas: usize,
        model: &PowerModel,
        bandwidth: f64,
    ) -> Result<Self> {
        let (se_per_stream, sum_se) = spectral_efficiency(sinr)?;
        let total = total_power(powers, active_antennas, model)?;
        let ee = energy_efficiency(sum_se, bandwidth, total)?;
        Ok(Self {
            se_per_stream,
            sum_se,
            total_power: total,
            ee,
            active_antennas,
        })
    }

    /// EE attributed to each stream: its SE over an equal share of the consumed power.
    pub fn ee_per_stream(&self, bandwidth: f64) -> Vec<f64> {
        let share = self.total_power / self.se_per_stream.len().max(1) as f64;
        self.se_per_stream
            .iter()
            .map(|se| bandwidth * se / share)
            .collect()
    }
}

fn active_rows(h: &DMatrix<Complex64>, active: &[bool]) -> Result<DMatrix<Complex64>> {
    if active.len() != h.nrows() {
        return Err(Error::shape(format!(
            "active set has {} entries for {} antennas",
            active.len(),
            h.nrows()
        )));
    }
    let rows: Vec<usize> = (0..active.len()).filter(|&n| active[n]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("empty active set"));
    }
    Ok(h.select_rows(rows.iter()))
}

/// Maximum-ratio combiner: the conjugate channel is applied as `v^H y`, so the
/// returned column `u` equals `h_u` restricted to the active antennas.
pub fn mr_combiner(
    channel: &ChannelRealization,
    bs: usize,
    active: &[bool],
) -> Result<DMatrix<Complex64>> {
    active_rows(&channel.h[bs], active)
}

/// Local MMSE combiner `(sum_u' p_u' h_u' h_u'^H + sigma^2 I)^-1 h_u`.
pub fn mmse_combiner(
    channel: &ChannelRealization,
    bs: usize,
    active: &[bool],
    powers: &PowerAllocation,
    noise_power: f64,
) -> Result<DMatrix<Complex64>> {
    if !(noise_power > 0.0) {
        return Err(Error::invalid(format!(
            "noise power must be > 0, got {noise_power}"
        )));
    }
    let h = active_rows(&channel.h[bs], active)?;
    if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite channel entry".into()));
    }
    if powers.len() != h.ncols() {
        return Err(Error::shape("power vector does not match stream count"));
    }
    let n = h.nrows();
    let mut scaled = h.clone();
    for (u, &p) in powers.as_slice().iter().enumerate() {
        scaled.column_mut(u).scale_mut(p.sqrt());
    }
    let mut cov = &scaled * scaled.adjoint();
    for i in 0..n {
        cov[(i, i)] += Complex64::new(noise_power, 0.0);
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("MMSE covariance is not positive definite".into()))?;
    Ok(chol.solve(&h))
}

/// Combiner for `kind`, or `None` when the BS has no active antenna.
pub fn local_combiner(
    kind: CombinerKind,
    channel: &ChannelRealization,
    bs: usize,
    active: &[bool],
    powers: &PowerAllocation,
    noise_power: f64,
) -> Result<Option<DMatrix<Complex64>>> {
    if !active.iter().any(|&a| a) {
        return Ok(None);
    }
    Ok(Some(match kind {
        CombinerKind::Mr => mr_combiner(channel, bs, active)?,
        CombinerKind::Mmse => mmse_combiner(channel, bs, active, powers, noise_power)?,
    }))
}

/// Effective scalars one BS forwards to the CPU for one realization:
/// `gain[(u, u')] = v_u^H h_u'` and `noise_amp[u] = ||v_u||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGains {
    pub gain: DMatrix<Complex64>,
    pub noise_amp: DVector<f64>,
}

impl LocalGains {
    pub fn zeros(num_streams: usize) -> Self {
        Self {
            gain: DMatrix::zeros(num_streams, num_streams),
            noise_amp: DVector::zeros(num_streams),
        }
    }

    pub fn num_streams(&self) -> usize {
        self.noise_amp.len()
    }
}

pub fn local_gains(
    channel: &ChannelRealization,
    bs: usize,
    active: &[bool],
    combiner: Option<&DMatrix<Complex64>>,
) -> Result<LocalGains> {
    let u = channel.num_streams();
    let Some(v) = combiner else {
        return Ok(LocalGains::zeros(u));
    };
    let h = active_rows(&channel.h[bs], active)?;
    if v.nrows() != h.nrows() || v.ncols() != u {
        return Err(Error::shape(
            "combiner shape does not match the active channel",
        ));
    }
    let gain = v.adjoint() * h;
    let noise_amp = DVector::from_iterator(u, v.column_iter().map(|c| c.norm_squared()));
    Ok(LocalGains { gain, noise_amp })
}

/// CPU-fused effective scalars for one realization, same layout as [`LocalGains`].
pub type FusedGains = LocalGains;

/// Fuses per-BS estimates. `batch[b][m]` holds BS `m`'s scalars for realization `b`.
///
/// `EqualWeight` sums the local estimates. `LsfdOptimal` uses
/// `w_u = Lambda_u^-1 g_u` with `g_u` the batch-mean desired gains and `Lambda_u`
/// the batch interference-plus-noise covariance (including the desired-gain
/// fluctuation around its mean). The same weights are applied to every
/// realization of the batch.
pub fn cpu_fuse_lsfd(
    batch: &[Vec<LocalGains>],
    powers: &PowerAllocation,
    noise_power: f64,
    mode: FusionMode,
) -> Result<Vec<FusedGains>> {
    let Some(first) = batch.first() else {
        return Err(Error::invalid("empty realization batch"));
    };
    let m = first.len();
    if m == 0 {
        return Err(Error::invalid("fusion needs at least one BS"));
    }
    let u_count = first[0].num_streams();
    if batch
        .iter()
        .any(|r| r.len() != m || r.iter().any(|g| g.num_streams() != u_count))
    {
        return Err(Error::shape("inconsistent per-BS contributions"));
    }
    if powers.len() != u_count {
        return Err(Error::shape("power vector does not match stream count"));
    }
    let p = powers.as_slice();
    let weights = fusion_weights(batch, p, noise_power, mode, m, u_count)?;
    let fused = batch
        .iter()
        .map(|per_bs| {
            let mut out = LocalGains::zeros(u_count);
            for u in 0..u_count {
                for (mi, g) in per_bs.iter().enumerate() {
                    let w = weights[u][mi];
                    if w == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    for up in 0..u_count {
                        out.gain[(u, up)] += w.conj() * g.gain[(u, up)];
                    }
                    out.noise_amp[u] += w.norm_sqr() * g.noise_amp[u];
                }
            }
            out
        })
        .collect();
    Ok(fused)
}

fn fusion_weights(
    batch: &[Vec<LocalGains>],
    p: &[f64],
    noise_power: f64,
    mode: FusionMode,
    m: usize,
    u_count: usize,
) -> Result<Vec<Vec<Complex64>>> {
    let one = Complex64::new(1.0, 0.0);
    if mode == FusionMode::EqualWeight || m == 1 {
        return Ok(vec![vec![one; m]; u_count]);
    }
    let nb = batch.len() as f64;
    let mut weights = Vec::with_capacity(u_count);
    for u in 0..u_count {
        let desired = |b: usize| DVector::from_iterator(m, batch[b].iter().map(|g| g.gain[(u, u)]));
        let mean_g = (0..batch.len())
            .fold(DVector::<Complex64>::zeros(m), |acc, b| acc + desired(b))
            / Complex64::new(nb, 0.0);
        if mean_g.iter().all(|z| z.norm_sqr() == 0.0) {
            weights.push(vec![Complex64::new(0.0, 0.0); m]);
            continue;
        }
        let mut lambda = DMatrix::<Complex64>::zeros(m, m);
        for per_bs in batch {
            for up in 0..u_count {
                let coeff = if up == u { 0.0 } else { p[up] };
                if coeff == 0.0 {
                    continue;
                }
                let iota = DVector::from_iterator(m, per_bs.iter().map(|g| g.gain[(u, up)]));
                lambda += (&iota * iota.adjoint()) * Complex64::new(coeff / nb, 0.0);
            }
            let dev = DVector::from_iterator(m, per_bs.iter().map(|g| g.gain[(u, u)])) - &mean_g;
            lambda += (&dev * dev.adjoint()) * Complex64::new(p[u] / nb, 0.0);
            for (mi, g) in per_bs.iter().enumerate() {
                lambda[(mi, mi)] += Complex64::new(noise_power * g.noise_amp[u] / nb, 0.0);
            }
        }
        let trace: f64 = (0..m).map(|i| lambda[(i, i)].re).sum();
        let ridge = LSFD_RIDGE * trace / m as f64;
        let ridge = if ridge > 0.0 { ridge } else { LSFD_RIDGE };
        for i in 0..m {
            lambda[(i, i)] += Complex64::new(ridge, 0.0);
        }
        let w = match lambda.clone().cholesky() {
            Some(ch) => ch.solve(&mean_g),
            None => lambda
                .lu()
                .solve(&mean_g)
                .ok_or_else(|| Error::Numerical("singular LSFD covariance".into()))?,
        };
        if w.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical("non-finite LSFD weights".into()));
        }
        weights.push(w.iter().copied().collect());
    }
    Ok(weights)
}

/// `SINR_u = p_u |s_u|^2 / (sum_{u' != u} p_u' |i_{u,u'}|^2 + sigma^2 nu_u)`.
pub fn sinr_from_gains(
    fused: &FusedGains,
    powers: &PowerAllocation,
    noise_power: f64,
) -> Result<Vec<f64>> {
    let p = powers.as_slice();
    if p.len() != fused.num_streams() {
        return Err(Error::shape("power vector does not match stream count"));
    }
    if p.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("negative transmit power"));
    }
    let u_count = p.len();
    Ok((0..u_count)
        .map(|u| {
            let signal = p[u] * fused.gain[(u, u)].norm_sqr();
            if signal == 0.0 {
                return 0.0;
            }
            let interference: f64 = (0..u_count)
                .filter(|&up| up != u)
                .map(|up| p[up] * fused.gain[(u, up)].norm_sqr())
                .sum();
            let denom = interference + noise_power * fused.noise_amp[u];
            if denom > 0.0 {
                signal / denom
            } else {
                0.0
            }
        })
        .collect())
}

/// Uplink SINR of every stream for one realization given per-BS combiners
/// (`None` for a BS without active antennas).
pub fn uplink_sinr(
    channel: &ChannelRealization,
    active: &[Vec<bool>],
    combiners: &[Option<DMatrix<Complex64>>],
    mode: FusionMode,
    powers: &PowerAllocation,
    noise_power: f64,
) -> Result<Vec<f64>> {
    if powers.as_slice().iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("negative transmit power"));
    }
    if active.len() != channel.num_bs() || combiners.len() != channel.num_bs() {
        return Err(Error::shape("one active set and combiner per BS expected"));
    }
    let per_bs = (0..channel.num_bs())
        .map(|m| local_gains(channel, m, &active[m], combiners[m].as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let fused = cpu_fuse_lsfd(&[per_bs], powers, noise_power, mode)?;
    sinr_from_gains(&fused[0], powers, noise_power)
}

/// Receiver chain settings shared by every evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub combiner: CombinerKind,
    pub fusion: FusionMode,
    pub noise_power: f64,
}

impl Receiver {
    /// SINR of every stream on one realization with the given active sets.
    pub fn sinr(
        &self,
        channel: &ChannelRealization,
        active: &[Vec<bool>],
        powers: &PowerAllocation,
    ) -> Result<Vec<f64>> {
        let combiners = (0..channel.num_bs())
            .map(|m| {
                local_combiner(
                    self.combiner,
                    channel,
                    m,
                    &active[m],
                    powers,
                    self.noise_power,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        uplink_sinr(
            channel,
            active,
            &combiners,
            self.fusion,
            powers,
            self.noise_power,
        )
    }
}

/// `se_u = log2(1 + sinr_u)` and their sum.
pub fn spectral_efficiency(sinr: &[f64]) -> Result<(Vec<f64>, f64)> {
    if let Some(bad) = sinr.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("SINR must be >= 0, got {bad}")));
    }
    let se: Vec<f64> = sinr
        .iter()
        .map(|s| s.ln_1p() / std::f64::consts::LN_2)
        .collect();
    let sum = se.iter().sum();
    Ok((se, sum))
}

pub fn total_power(
    powers: &PowerAllocation,
    active_antennas: usize,
    model: &PowerModel,
) -> Result<f64> {
    let eta = model.amplifier_efficiency;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!(
            "amplifier efficiency must lie in (0, 1], got {eta}"
        )));
    }
    Ok(powers.total() / eta + active_antennas as f64 * model.antenna_power + model.fixed_power)
}

pub fn energy_efficiency(sum_se: f64, bandwidth: f64, total_power: f64) -> Result<f64> {
    if !(total_power > 0.0) {
        return Err(Error::invalid(format!(
            "total power must be > 0, got {total_power}"
        )));
    }
    Ok(bandwidth * sum_se / total_power)
}

/// Thermal noise `-174 dBm/Hz + NF + 10 log10(B)` in watts.
pub fn thermal_noise_watts(bandwidth: f64, noise_figure_db: f64) -> f64 {
    let dbm = -174.0 + noise_figure_db + 10.0 * bandwidth.log10();
    10f64.powf((dbm - 30.0) / 10.0)
}
