//! Near-field channel synthesis.
//!
//! Index conventions: streams `u` enumerate UE antennas UE-major
//! (`u = k * N_s + s`); BS antennas are indexed per panel in row-major order.
//! A [`ChannelRealization`] stores one `N_r x U` matrix per BS.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{antenna_positions, NetworkTopology, Vec3};

/// Received power at the 1 m reference distance, dB.
pub const PATHLOSS_REF_DB: f64 = -30.5;
/// Pathloss slope, dB per decade (exponent 3.67).
pub const PATHLOSS_SLOPE_DB: f64 = 36.7;
/// Ricean factors at or above this value are treated as pure line-of-sight.
pub const LOS_ONLY_KAPPA: f64 = 1e6;

pub fn pathloss_db(distance: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::invalid(format!(
            "pathloss needs a positive distance, got {distance} (co-located transceivers)"
        )));
    }
    Ok(PATHLOSS_REF_DB - PATHLOSS_SLOPE_DB * distance.log10())
}

/// Linear large-scale gains per (stream, BS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleFading {
    num_streams: usize,
    num_bs: usize,
    beta: Vec<f64>,
    shadowing_db: Vec<f64>,
}

impl LargeScaleFading {
    /// Builds from row-major `[stream][bs]` linear gains.
    pub fn from_linear(num_streams: usize, num_bs: usize, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != num_streams * num_bs {
            return Err(Error::shape(format!(
                "expected {} gains, got {}",
                num_streams * num_bs,
                beta.len()
            )));
        }
        if beta.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::invalid(
                "large-scale gains must be positive and finite",
            ));
        }
        Ok(Self {
            num_streams,
            num_bs,
            shadowing_db: vec![0.0; beta.len()],
            beta,
        })
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn beta(&self, stream: usize, bs: usize) -> f64 {
        self.beta[stream * self.num_bs + bs]
    }

    pub fn beta_db(&self, stream: usize, bs: usize) -> f64 {
        10.0 * self.beta(stream, bs).log10()
    }

    pub fn shadowing_db(&self, stream: usize, bs: usize) -> f64 {
        self.shadowing_db[stream * self.num_bs + bs]
    }
}

/// `beta_dB = -30.5 - 36.7 log10(d) + shadowing` with `d` the distance from each
/// UE antenna to each BS panel center.
pub fn large_scale_fading(
    topology: &NetworkTopology,
    shadowing_std_db: f64,
    seed: u64,
) -> Result<LargeScaleFading> {
    if !(shadowing_std_db >= 0.0) || !shadowing_std_db.is_finite() {
        return Err(Error::invalid(format!(
            "shadowing std must be >= 0, got {shadowing_std_db}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams = topology.stream_positions();
    let num_bs = topology.num_bs();
    let mut beta = Vec::with_capacity(streams.len() * num_bs);
    let mut shadowing = Vec::with_capacity(streams.len() * num_bs);
    for pos in &streams {
        for bs in &topology.bs_panels {
            let z: f64 = rng.sample(StandardNormal);
            let sh = shadowing_std_db * z;
            let db = pathloss_db((pos - bs.center).norm())? + sh;
            beta.push(10f64.powf(db / 10.0));
            shadowing.push(sh);
        }
    }
    Ok(LargeScaleFading {
        num_streams: streams.len(),
        num_bs,
        beta,
        shadowing_db: shadowing,
    })
}

/// Spherical-wave array response `(d_ref / d_n) exp(-i 2 pi d_n / lambda)`, where
/// `d_ref` is the distance from `src` to the centroid of `rx_positions`.
pub fn spherical_wave_response(
    src: &Vec3,
    rx_positions: &[Vec3],
    wavelength: f64,
) -> Result<Vec<Complex64>> {
    if rx_positions.is_empty() {
        return Err(Error::invalid("no receive positions"));
    }
    let centroid =
        rx_positions.iter().fold(Vec3::zeros(), |acc, p| acc + p) / rx_positions.len() as f64;
    spherical_wave_response_from(src, rx_positions, &centroid, wavelength)
}

pub(crate) fn spherical_wave_response_from(
    src: &Vec3,
    rx_positions: &[Vec3],
    reference: &Vec3,
    wavelength: f64,
) -> Result<Vec<Complex64>> {
    if !(wavelength > 0.0) {
        return Err(Error::invalid(format!(
            "wavelength must be > 0, got {wavelength}"
        )));
    }
    let d_ref = (src - reference).norm();
    if d_ref <= f64::EPSILON {
        return Err(Error::invalid(
            "source coincides with the array reference point",
        ));
    }
    let k = 2.0 * std::f64::consts::PI / wavelength;
    rx_positions
        .iter()
        .map(|rx| {
            let d = (src - rx).norm();
            if d <= f64::EPSILON {
                return Err(Error::invalid("source coincides with a receive element"));
            }
            Ok(Complex64::from_polar(d_ref / d, -k * d))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VrMode {
    #[default]
    Full,
    RandomBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VrConfig {
    pub mode: VrMode,
    /// Fraction of each panel a UE sees in `RandomBlocks` mode, in `(0, 1]`.
    pub block_fraction: f64,
}

impl Default for VrConfig {
    fn default() -> Self {
        Self {
            mode: VrMode::Full,
            block_fraction: 1.0,
        }
    }
}

/// Channel section of an experiment: Ricean factor, shadowing and visibility regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Ricean factor in dB; values at or above 60 dB behave as LoS-only.
    pub kappa_db: f64,
    pub shadowing_std_db: f64,
    pub vr_mode: VrMode,
    pub vr_block_fraction: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            kappa_db: 3.0,
            shadowing_std_db: 8.0,
            vr_mode: VrMode::Full,
            vr_block_fraction: 1.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.kappa_db.is_finite() {
            return Err(Error::config("channel.kappa_db", "must be finite"));
        }
        if !(self.shadowing_std_db >= 0.0 && self.shadowing_std_db.is_finite()) {
            return Err(Error::config("channel.shadowing_std_db", "must be >= 0"));
        }
        if !(self.vr_block_fraction > 0.0 && self.vr_block_fraction <= 1.0) {
            return Err(Error::config(
                "channel.vr_block_fraction",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Linear Ricean factor.
    pub fn kappa(&self) -> f64 {
        10f64.powf(self.kappa_db / 10.0)
    }

    pub fn vr(&self) -> VrConfig {
        VrConfig {
            mode: self.vr_mode,
            block_fraction: self.vr_block_fraction,
        }
    }
}

/// Which BS antennas each UE illuminates, `[K x M x N_r]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask {
    num_ue: usize,
    num_bs: usize,
    antennas_per_bs: usize,
    visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn full(num_ue: usize, num_bs: usize, antennas_per_bs: usize) -> Self {
        Self {
            num_ue,
            num_bs,
            antennas_per_bs,
            visible: vec![true; num_ue * num_bs * antennas_per_bs],
        }
    }

    /// Rejects masks leaving any UE without a single visible antenna.
    pub fn from_vec(
        num_ue: usize,
        num_bs: usize,
        antennas_per_bs: usize,
        visible: Vec<bool>,
    ) -> Result<Self> {
        if visible.len() != num_ue * num_bs * antennas_per_bs {
            return Err(Error::shape(
                "visibility mask length does not match K x M x N_r",
            ));
        }
        let per_ue = num_bs * antennas_per_bs;
        for k in 0..num_ue {
            if !visible[k * per_ue..(k + 1) * per_ue].iter().any(|&v| v) {
                return Err(Error::invalid(format!("UE {k} sees no BS antenna")));
            }
        }
        Ok(Self {
            num_ue,
            num_bs,
            antennas_per_bs,
            visible,
        })
    }

    pub fn num_ue(&self) -> usize {
        self.num_ue
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.antennas_per_bs
    }

    pub fn is_visible(&self, ue: usize, bs: usize, antenna: usize) -> bool {
        self.visible[(ue * self.num_bs + bs) * self.antennas_per_bs + antenna]
    }

    pub fn visible_count(&self, ue: usize, bs: usize) -> usize {
        (0..self.antennas_per_bs)
            .filter(|&n| self.is_visible(ue, bs, n))
            .count()
    }
}

/// Sub-grid dimensions `(r, c)` whose area is closest to `fraction * rows * cols`.
/// Ties prefer the aspect ratio closest to the panel's, then fewer rows.
pub fn block_shape(rows: usize, cols: usize, fraction: f64) -> (usize, usize) {
    let target = fraction * (rows * cols) as f64;
    let mut best = (rows, cols);
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for r in 1..=rows {
        for c in 1..=cols {
            let area_err = ((r * c) as f64 - target).abs();
            let aspect_err = (r as f64 / rows as f64 - c as f64 / cols as f64).abs();
            let key = (area_err, aspect_err);
            if key.0 < best_key.0 - 1e-12
                || ((key.0 - best_key.0).abs() <= 1e-12 && key.1 < best_key.1 - 1e-12)
            {
                best = (r, c);
                best_key = key;
            }
        }
    }
    best
}

pub fn generate_visibility_mask(
    topology: &NetworkTopology,
    vr: &VrConfig,
    seed: u64,
) -> Result<VisibilityMask> {
    if !(vr.block_fraction > 0.0 && vr.block_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "block fraction must lie in (0, 1], got {}",
            vr.block_fraction
        )));
    }
    let num_ue = topology.num_ue();
    let num_bs = topology.num_bs();
    let n_r = topology.antennas_per_bs();
    match vr.mode {
        VrMode::Full => Ok(VisibilityMask::full(num_ue, num_bs, n_r)),
        VrMode::RandomBlocks => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut visible = vec![false; num_ue * num_bs * n_r];
            for k in 0..num_ue {
                for (m, panel) in topology.bs_panels.iter().enumerate() {
                    let (r, c) = block_shape(panel.rows, panel.cols, vr.block_fraction);
                    let r0 = rng.random_range(0..=panel.rows - r);
                    let c0 = rng.random_range(0..=panel.cols - c);
                    for row in r0..r0 + r {
                        for col in c0..c0 + c {
                            visible[(k * num_bs + m) * n_r + row * panel.cols + col] = true;
                        }
                    }
                }
            }
            VisibilityMask::from_vec(num_ue, num_bs, n_r, visible)
        }
    }
}

/// One coherence-block draw: `h[m]` is the `N_r x U` channel matrix of BS `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<DMatrix<Complex64>>,
    pub seed: u64,
}

impl ChannelRealization {
    pub fn num_bs(&self) -> usize {
        self.h.len()
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.h[0].nrows()
    }

    pub fn num_streams(&self) -> usize {
        self.h[0].ncols()
    }

    pub fn coeff(&self, bs: usize, antenna: usize, stream: usize) -> Complex64 {
        self.h[bs][(antenna, stream)]
    }

    /// Little-endian dump: magic `XLCH`, version `u32`, then `M`, `N_r`, `U`,
    /// seed as `u64`, then interleaved `re, im` f64 pairs in `(m, n, u)` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"XLCH")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [self.num_bs(), self.antennas_per_bs(), self.num_streams()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for hm in &self.h {
            for n in 0..hm.nrows() {
                for u in 0..hm.ncols() {
                    let z = hm[(n, u)];
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"XLCH" {
            return Err(Error::invalid("not a channel dump"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(Error::invalid(format!(
                "unsupported channel dump version {version}"
            )));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let m = next_u64(&mut r)? as usize;
        let n_r = next_u64(&mut r)? as usize;
        let u = next_u64(&mut r)? as usize;
        let seed = next_u64(&mut r)?;
        let mut h = Vec::with_capacity(m);
        for _ in 0..m {
            let mut hm = DMatrix::zeros(n_r, u);
            for n in 0..n_r {
                for s in 0..u {
                    let re = f64::from_le_bytes({
                        r.read_exact(&mut b8)?;
                        b8
                    });
                    let im = f64::from_le_bytes({
                        r.read_exact(&mut b8)?;
                        b8
                    });
                    hm[(n, s)] = Complex64::new(re, im);
                }
            }
            h.push(hm);
        }
        Ok(Self { h, seed })
    }
}

/// Precomputed deterministic part of the channel for a fixed scene.
///
/// Holds the line-of-sight spherical responses and per-entry scalings so that
/// repeated draws only sample the scattered component.
#[derive(Debug, Clone)]
pub struct ChannelSynthesizer {
    num_bs: usize,
    antennas_per_bs: usize,
    num_streams: usize,
    kappa: f64,
    /// `sqrt(beta) * sqrt(kappa/(1+kappa)) * a_n`, zero where invisible.
    los: Vec<DMatrix<Complex64>>,
    /// `sqrt(beta) * sqrt(1/(1+kappa))`, zero where invisible.
    nlos_scale: Vec<DMatrix<f64>>,
    /// `E|h|^2` per entry.
    mean_gain: Vec<DMatrix<f64>>,
}

impl ChannelSynthesizer {
    pub fn new(
        topology: &NetworkTopology,
        lsf: &LargeScaleFading,
        mask: &VisibilityMask,
        ricean_kappa: f64,
    ) -> Result<Self> {
        if !(ricean_kappa >= 0.0) {
            return Err(Error::invalid(format!(
                "Ricean factor must be >= 0, got {ricean_kappa}"
            )));
        }
        let num_bs = topology.num_bs();
        let n_r = topology.antennas_per_bs();
        let num_streams = topology.num_streams();
        if lsf.num_bs() != num_bs || lsf.num_streams() != num_streams {
            return Err(Error::shape(
                "large-scale fading does not match the topology",
            ));
        }
        if mask.num_bs() != num_bs
            || mask.num_ue() != topology.num_ue()
            || mask.antennas_per_bs() != n_r
        {
            return Err(Error::shape("visibility mask does not match the topology"));
        }
        let los_only = ricean_kappa >= LOS_ONLY_KAPPA;
        let (los_w, nlos_w) = if los_only {
            (1.0, 0.0)
        } else {
            (
                (ricean_kappa / (1.0 + ricean_kappa)).sqrt(),
                (1.0 / (1.0 + ricean_kappa)).sqrt(),
            )
        };
        let sources = topology.stream_positions();
        let mut los = Vec::with_capacity(num_bs);
        let mut nlos_scale = Vec::with_capacity(num_bs);
        let mut mean_gain = Vec::with_capacity(num_bs);
        for (m, panel) in topology.bs_panels.iter().enumerate() {
            let rx = antenna_positions(panel);
            let mut a_m = DMatrix::zeros(n_r, num_streams);
            let mut s_m = DMatrix::zeros(n_r, num_streams);
            let mut g_m = DMatrix::zeros(n_r, num_streams);
            for (u, src) in sources.iter().enumerate() {
                let k = topology.stream_owner(u);
                let resp =
                    spherical_wave_response_from(src, &rx, &panel.center, topology.wavelength)?;
                let amp = lsf.beta(u, m).sqrt();
                for n in 0..n_r {
                    if !mask.is_visible(k, m, n) {
                        continue;
                    }
                    a_m[(n, u)] = resp[n] * (amp * los_w);
                    s_m[(n, u)] = amp * nlos_w;
                    g_m[(n, u)] = a_m[(n, u)].norm_sqr() + s_m[(n, u)] * s_m[(n, u)];
                }
            }
            los.push(a_m);
            nlos_scale.push(s_m);
            mean_gain.push(g_m);
        }
        Ok(Self {
            num_bs,
            antennas_per_bs: n_r,
            num_streams,
            kappa: ricean_kappa,
            los,
            nlos_scale,
            mean_gain,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn antennas_per_bs(&self) -> usize {
        self.antennas_per_bs
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    /// Analytic `E|h_{m,n,u}|^2` (zero for invisible entries).
    pub fn mean_gain(&self, bs: usize, antenna: usize, stream: usize) -> f64 {
        self.mean_gain[bs][(antenna, stream)]
    }

    /// Draws one realization. A CN(0,1) sample is consumed for every entry, so
    /// the scattered component of a visible entry does not depend on the mask.
    pub fn realize(&self, seed: u64) -> ChannelRealization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let h = (0..self.num_bs)
            .map(|m| {
                let mut hm = self.los[m].clone();
                for n in 0..self.antennas_per_bs {
                    for u in 0..self.num_streams {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        let s = self.nlos_scale[m][(n, u)];
                        if s > 0.0 {
                            hm[(n, u)] += Complex64::new(re * half, im * half) * s;
                        }
                    }
                }
                hm
            })
            .collect();
        ChannelRealization { h, seed }
    }
}

/// One-shot helper over [`ChannelSynthesizer`].
pub fn realize_channel(
    topology: &NetworkTopology,
    lsf: &LargeScaleFading,
    mask: &VisibilityMask,
    ricean_kappa: f64,
    seed: u64,
) -> Result<ChannelRealization> {
    Ok(ChannelSynthesizer::new(topology, lsf, mask, ricean_kappa)?.realize(seed))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_topology, Panel, TopologyConfig};
    use approx::assert_relative_eq;

    fn small_topology(seed: u64) -> NetworkTopology {
        let cfg = TopologyConfig {
            num_bs: 2,
            bs_rows: 4,
            bs_cols: 4,
            num_ue: 3,
            ue_rows: 1,
            ue_cols: 2,
            area_side: 200.0,
            ..Default::default()
        };
        generate_topology(&cfg, seed).unwrap()
    }

    #[test]
    fn pathloss_reference_points() {
        assert_relative_eq!(pathloss_db(1.0).unwrap(), -30.5, epsilon = 1e-12);
        assert_relative_eq!(pathloss_db(10.0).unwrap(), -67.2, epsilon = 1e-12);
        assert!(pathloss_db(0.0).is_err());
    }

    #[test]
    fn lsf_without_shadowing_is_seed_free() {
        let topo = small_topology(1);
        let a = large_scale_fading(&topo, 0.0, 1).unwrap();
        let b = large_scale_fading(&topo, 0.0, 99).unwrap();
        assert_eq!(a, b);
        let with = large_scale_fading(&topo, 8.0, 1).unwrap();
        assert_ne!(a, with);
        for u in 0..topo.num_streams() {
            for m in 0..topo.num_bs() {
                let d = (topo.stream_positions()[u] - topo.bs_panels[m].center).norm();
                assert_relative_eq!(a.beta_db(u, m), pathloss_db(d).unwrap(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn lsf_rejects_colocated() {
        let mut topo = small_topology(1);
        topo.ue_panels[0] = Panel::new(1, 1, 0.05, topo.bs_panels[0].center, Vec3::z()).unwrap();
        topo.ue_panels.truncate(1);
        assert!(large_scale_fading(&topo, 0.0, 1).is_err());
    }

    #[test]
    fn spherical_response_unit_at_center() {
        let src = Vec3::new(0.0, 0.0, 7.3);
        let resp = spherical_wave_response(&src, &[Vec3::zeros()], 0.1).unwrap();
        let expect = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * 7.3 / 0.1);
        assert_relative_eq!(resp[0].re, expect.re, epsilon = 1e-12);
        assert_relative_eq!(resp[0].im, expect.im, epsilon = 1e-12);
        assert_relative_eq!(resp[0].norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn spherical_response_equidistant_ring() {
        let src = Vec3::new(0.0, 0.0, 3.0);
        let rx: Vec<Vec3> = (0..6)
            .map(|i| {
                let t = i as f64 * std::f64::consts::PI / 3.0;
                Vec3::new(t.cos(), t.sin(), 0.0)
            })
            .collect();
        let resp = spherical_wave_response(&src, &rx, 0.1).unwrap();
        for z in &resp {
            assert_relative_eq!(z.norm(), resp[0].norm(), epsilon = 1e-12);
            assert!((z.arg() - resp[0].arg()).abs() < 1e-9);
        }
    }

    #[test]
    fn spherical_response_coincident_error() {
        let rx = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)];
        assert!(spherical_wave_response(&Vec3::new(1.0, 0.0, 0.0), &rx, 0.1).is_err());
        assert!(spherical_wave_response(&Vec3::zeros(), &rx, 0.1).is_err());
    }

    #[test]
    fn spherical_phase_departs_from_planar_fit() {
        let panel = Panel::new(9, 9, 0.05, Vec3::zeros(), Vec3::z()).unwrap();
        let rx = antenna_positions(&panel);
        let src = Vec3::new(0.0, 0.0, 5.0);
        let resp = spherical_wave_response(&src, &rx, 0.1).unwrap();
        let center = resp[40];
        // unwrapped phase relative to the center element
        let phase: Vec<f64> = resp.iter().map(|z| (z * center.conj()).arg()).collect();
        // least-squares plane phi = c0 + c1 x + c2 y
        let a = DMatrix::from_fn(81, 3, |i, j| match j {
            0 => 1.0,
            1 => rx[i].x,
            _ => rx[i].y,
        });
        let b = nalgebra::DVector::from_vec(phase.clone());
        let coef = (a.transpose() * &a)
            .lu()
            .solve(&(a.transpose() * &b))
            .unwrap();
        let resid = &b - &a * coef;
        let corner = [0usize, 8, 72, 80];
        for &i in &corner {
            assert!(resid[i].abs() > 0.1, "corner residual {}", resid[i]);
        }
    }

    #[test]
    fn near_field_rank_exceeds_planar() {
        let panel = Panel::new(9, 9, 0.05, Vec3::zeros(), Vec3::z()).unwrap();
        let rx = antenna_positions(&panel);
        let lambda = 0.1;
        let rayleigh = crate::geometry::rayleigh_distance(panel.diagonal(), lambda).unwrap();
        let ranges = [0.5, 1.5, 4.0];
        assert!(ranges.iter().all(|&d| d < rayleigh));
        let dir = Vec3::new(0.3, 0.2, 1.0).normalize();
        let k = 2.0 * std::f64::consts::PI / lambda;
        let spherical = DMatrix::from_fn(81, 3, |n, j| {
            let src = dir * ranges[j];
            spherical_wave_response(&src, &rx, lambda).unwrap()[n]
        });
        let planar = DMatrix::from_fn(81, 3, |n, j| {
            let d = ranges[j] - dir.dot(&rx[n]);
            Complex64::from_polar(1.0, -k * d)
        });
        let sv = |m: DMatrix<Complex64>| {
            let mut s: Vec<f64> = m
                .svd(false, false)
                .singular_values
                .iter()
                .copied()
                .collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s
        };
        let s_sph = sv(spherical);
        let s_pl = sv(planar);
        assert!(
            s_sph[2] / s_sph[0] > 1e-3,
            "spherical LoS matrix is full rank"
        );
        assert!(s_sph[1] / s_sph[0] > s_pl[1] / s_pl[0]);
    }

    #[test]
    fn block_shape_choices() {
        assert_eq!(block_shape(9, 9, 1.0), (9, 9));
        assert_eq!(block_shape(4, 4, 0.25), (2, 2));
        let (r, c) = block_shape(9, 9, 0.25);
        assert!((16..=25).contains(&(r * c)));
    }

    #[test]
    fn block_fraction_quarter_oracle() {
        // every rectangle on a 9x9 grid; nearest areas to 20.25
        let target = 0.25 * 81.0;
        let mut best = f64::INFINITY;
        for r in 1..=9 {
            for c in 1..=9 {
                best = best.min(((r * c) as f64 - target).abs());
            }
        }
        let (r, c) = block_shape(9, 9, 0.25);
        assert_relative_eq!(((r * c) as f64 - target).abs(), best);
    }

    #[test]
    fn visibility_modes() {
        let cfg = TopologyConfig {
            bs_rows: 9,
            bs_cols: 9,
            num_ue: 4,
            ue_rows: 1,
            ue_cols: 1,
            ..Default::default()
        };
        let topo = generate_topology(&cfg, 5).unwrap();
        let full = generate_visibility_mask(&topo, &VrConfig::default(), 1).unwrap();
        assert!((0..4).all(|k| full.visible_count(k, 0) == 81));
        let whole = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 1.0,
        };
        assert_eq!(generate_visibility_mask(&topo, &whole, 1).unwrap(), full);
        let quarter = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 0.25,
        };
        let mask = generate_visibility_mask(&topo, &quarter, 1).unwrap();
        for k in 0..4 {
            let c = mask.visible_count(k, 0);
            assert!((16..=25).contains(&c), "{c}");
        }
        let bad = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 0.0,
        };
        assert!(generate_visibility_mask(&topo, &bad, 1).is_err());
        let bad = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 1.5,
        };
        assert!(generate_visibility_mask(&topo, &bad, 1).is_err());
    }

    #[test]
    fn random_blocks_are_contiguous_rectangles() {
        let cfg = TopologyConfig {
            bs_rows: 6,
            bs_cols: 8,
            num_ue: 10,
            ue_rows: 1,
            ue_cols: 1,
            ..Default::default()
        };
        let topo = generate_topology(&cfg, 5).unwrap();
        let vr = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 0.3,
        };
        let mask = generate_visibility_mask(&topo, &vr, 11).unwrap();
        for k in 0..10 {
            let cells: Vec<(usize, usize)> = (0..48)
                .filter(|&n| mask.is_visible(k, 0, n))
                .map(|n| (n / 8, n % 8))
                .collect();
            let rmin = cells.iter().map(|c| c.0).min().unwrap();
            let rmax = cells.iter().map(|c| c.0).max().unwrap();
            let cmin = cells.iter().map(|c| c.1).min().unwrap();
            let cmax = cells.iter().map(|c| c.1).max().unwrap();
            assert_eq!(cells.len(), (rmax - rmin + 1) * (cmax - cmin + 1));
        }
    }

    #[test]
    fn all_false_ue_rejected() {
        let mut v = vec![true; 2 * 4];
        for x in v.iter_mut().take(4) {
            *x = false;
        }
        assert!(VisibilityMask::from_vec(2, 1, 4, v).is_err());
    }

    #[test]
    fn realization_zero_outside_mask_and_deterministic() {
        let topo = small_topology(3);
        let lsf = large_scale_fading(&topo, 4.0, 3).unwrap();
        let vr = VrConfig {
            mode: VrMode::RandomBlocks,
            block_fraction: 0.25,
        };
        let mask = generate_visibility_mask(&topo, &vr, 3).unwrap();
        let a = realize_channel(&topo, &lsf, &mask, 2.0, 10).unwrap();
        let b = realize_channel(&topo, &lsf, &mask, 2.0, 10).unwrap();
        assert_eq!(a, b);
        let c = realize_channel(&topo, &lsf, &mask, 2.0, 11).unwrap();
        assert_ne!(a, c);
        for m in 0..topo.num_bs() {
            for n in 0..topo.antennas_per_bs() {
                for u in 0..topo.num_streams() {
                    let z = a.coeff(m, n, u);
                    assert!(z.re.is_finite() && z.im.is_finite());
                    if !mask.is_visible(topo.stream_owner(u), m, n) {
                        assert_eq!(z.re.to_bits(), 0);
                        assert_eq!(z.im.to_bits(), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn los_only_limit() {
        let topo = small_topology(4);
        let lsf = large_scale_fading(&topo, 0.0, 0).unwrap();
        let mask = VisibilityMask::full(3, 2, 16);
        let ch = realize_channel(&topo, &lsf, &mask, 1e6, 5).unwrap();
        let ch2 = realize_channel(&topo, &lsf, &mask, 1e7, 77).unwrap();
        let sources = topo.stream_positions();
        for m in 0..2 {
            let rx = antenna_positions(&topo.bs_panels[m]);
            for u in 0..topo.num_streams() {
                let a = spherical_wave_response(&sources[u], &rx, topo.wavelength).unwrap();
                for n in 0..16 {
                    let expect = lsf.beta(u, m).sqrt() * a[n].norm();
                    assert_relative_eq!(ch.coeff(m, n, u).norm(), expect, max_relative = 1e-12);
                    assert_relative_eq!(ch2.coeff(m, n, u).norm(), expect, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn negative_kappa_rejected() {
        let topo = small_topology(4);
        let lsf = large_scale_fading(&topo, 0.0, 0).unwrap();
        let mask = VisibilityMask::full(3, 2, 16);
        assert!(realize_channel(&topo, &lsf, &mask, -1.0, 5).is_err());
    }

    #[test]
    fn rayleigh_component_has_unit_variance() {
        let topo = small_topology(6);
        let lsf = large_scale_fading(&topo, 0.0, 0).unwrap();
        let mask = VisibilityMask::full(3, 2, 16);
        let synth = ChannelSynthesizer::new(&topo, &lsf, &mask, 0.0).unwrap();
        // 16 antennas x 6 streams x 2 BSs per draw; ~1.1e5 normalized samples
        let mut acc = 0.0;
        let mut count = 0usize;
        for seed in 0..576 {
            let ch = synth.realize(seed);
            for m in 0..2 {
                for n in 0..16 {
                    for u in 0..6 {
                        acc += ch.coeff(m, n, u).norm_sqr() / lsf.beta(u, m);
                        count += 1;
                    }
                }
            }
        }
        let var = acc / count as f64;
        assert!((0.98..=1.02).contains(&var), "variance {var}");
    }

    #[test]
    fn empirical_energy_matches_mean_gain() {
        let topo = small_topology(8);
        let lsf = large_scale_fading(&topo, 3.0, 8).unwrap();
        let mask = VisibilityMask::full(3, 2, 16);
        for kappa in [0.0, db_to_linear(3.0)] {
            let synth = ChannelSynthesizer::new(&topo, &lsf, &mask, kappa).unwrap();
            let draws = 10_000u64;
            let mut acc = [0.0; 6];
            for seed in 0..draws {
                let ch = synth.realize(seed);
                for (u, a) in acc.iter_mut().enumerate() {
                    *a += ch.coeff(1, 5, u).norm_sqr();
                }
            }
            for (u, a) in acc.iter().enumerate() {
                let emp = a / draws as f64;
                let analytic = synth.mean_gain(1, 5, u);
                assert!(
                    (emp / analytic - 1.0).abs() < 0.03,
                    "kappa {kappa} stream {u}: {emp} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn binary_dump_roundtrip() {
        let topo = small_topology(9);
        let lsf = large_scale_fading(&topo, 2.0, 9).unwrap();
        let mask = VisibilityMask::full(3, 2, 16);
        let ch = realize_channel(&topo, &lsf, &mask, 1.0, 9).unwrap();
        let mut buf = Vec::new();
        ch.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 32 + 2 * 16 * 6 * 16);
        let back = ChannelRealization::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, ch);
        assert!(ChannelRealization::read_binary(&b"NOPE"[..]).is_err());
    }
}
