//! Scene construction and the near-field geometric calculators.
//!
//! All lengths are in meters. Panels are uniform planar arrays (UPA) of
//! isotropic elements; element `n` of a panel sits at row `n / cols`,
//! column `n % cols`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// A uniform planar array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub rows: usize,
    pub cols: usize,
    /// Inter-element pitch.
    pub spacing: f64,
    pub center: Vec3,
    /// Unit boresight vector.
    pub normal: Vec3,
}

impl Panel {
    pub fn new(rows: usize, cols: usize, spacing: f64, center: Vec3, normal: Vec3) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(
                "panel needs at least one row and one column",
            ));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::invalid(format!(
                "panel spacing must be > 0, got {spacing}"
            )));
        }
        let norm = normal.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("panel normal must be a non-zero vector"));
        }
        Ok(Self {
            rows,
            cols,
            spacing,
            center,
            normal: normal / norm,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.rows * self.cols
    }

    /// Aperture diagonal measured between the outermost element centers.
    pub fn diagonal(&self) -> f64 {
        let r = (self.rows - 1) as f64;
        let c = (self.cols - 1) as f64;
        self.spacing * (r * r + c * c).sqrt()
    }

    /// Side lengths (row axis, column axis) of the aperture area, one pitch per element.
    pub fn side_lengths(&self) -> (f64, f64) {
        (
            self.rows as f64 * self.spacing,
            self.cols as f64 * self.spacing,
        )
    }

    /// In-plane unit axes `(row_axis, col_axis)`.
    fn axes(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let helper = if n.z.abs() > 0.9 {
            Vec3::x()
        } else {
            Vec3::z()
        };
        let u = (helper - n * helper.dot(&n)).normalize();
        let v = n.cross(&u);
        (u, v)
    }
}

/// Electromagnetic field region of a receiver relative to an aperture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldRegion {
    ReactiveNearField,
    RadiativeNearField,
    FarField,
}

impl FieldRegion {
    pub fn index(self) -> usize {
        match self {
            FieldRegion::ReactiveNearField => 0,
            FieldRegion::RadiativeNearField => 1,
            FieldRegion::FarField => 2,
        }
    }
}

fn check_wavelength(wavelength: f64) -> Result<()> {
    if !(wavelength > 0.0) || !wavelength.is_finite() {
        return Err(Error::invalid(format!(
            "wavelength must be > 0, got {wavelength}"
        )));
    }
    Ok(())
}

fn check_length(name: &str, value: f64) -> Result<()> {
    if !(value >= 0.0) || !value.is_finite() {
        return Err(Error::invalid(format!("{name} must be >= 0, got {value}")));
    }
    Ok(())
}

/// Near-field/far-field boundary `2 D^2 / lambda`.
pub fn rayleigh_distance(aperture_diagonal: f64, wavelength: f64) -> Result<f64> {
    check_wavelength(wavelength)?;
    check_length("aperture diagonal", aperture_diagonal)?;
    Ok(2.0 * aperture_diagonal * aperture_diagonal / wavelength)
}

/// Reactive/radiative boundary `0.62 sqrt(D^3 / lambda)`.
pub fn fresnel_distance(aperture_diagonal: f64, wavelength: f64) -> Result<f64> {
    check_wavelength(wavelength)?;
    check_length("aperture diagonal", aperture_diagonal)?;
    Ok(0.62 * (aperture_diagonal.powi(3) / wavelength).sqrt())
}

pub fn classify_field_region(
    distance: f64,
    aperture_diagonal: f64,
    wavelength: f64,
) -> Result<FieldRegion> {
    check_length("distance", distance)?;
    let fresnel = fresnel_distance(aperture_diagonal, wavelength)?;
    let rayleigh = rayleigh_distance(aperture_diagonal, wavelength)?;
    Ok(if distance < fresnel {
        FieldRegion::ReactiveNearField
    } else if distance < rayleigh {
        FieldRegion::RadiativeNearField
    } else {
        FieldRegion::FarField
    })
}

/// Aperture-area estimate of the effective degrees of freedom, `pi A / lambda^2`.
pub fn edof_planar(side_a: f64, side_b: f64, wavelength: f64) -> Result<f64> {
    check_wavelength(wavelength)?;
    check_length("side_a", side_a)?;
    check_length("side_b", side_b)?;
    let area = side_a * side_b;
    Ok(std::f64::consts::PI * area / (wavelength * wavelength))
}

/// Element coordinates in row-major order.
pub fn antenna_positions(panel: &Panel) -> Vec<Vec3> {
    let (u, v) = panel.axes();
    let r0 = (panel.rows as f64 - 1.0) / 2.0;
    let c0 = (panel.cols as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(panel.num_elements());
    for r in 0..panel.rows {
        for c in 0..panel.cols {
            let du = (r as f64 - r0) * panel.spacing;
            let dv = (c as f64 - c0) * panel.spacing;
            out.push(panel.center + u * du + v * dv);
        }
    }
    out
}

/// Static scene description consumed by [`generate_topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Number of BSs (M).
    pub num_bs: usize,
    pub bs_rows: usize,
    pub bs_cols: usize,
    /// Number of UEs (K).
    pub num_ue: usize,
    pub ue_rows: usize,
    pub ue_cols: usize,
    pub area_side: f64,
    pub wavelength: f64,
    pub bs_height: f64,
    pub ue_height: f64,
    /// Element pitch; half a wavelength when absent.
    pub spacing: Option<f64>,
    /// Explicit `[x, y]` BS sites; a square grid is used when empty.
    pub bs_positions: Vec<[f64; 2]>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            num_bs: 1,
            bs_rows: 9,
            bs_cols: 9,
            num_ue: 6,
            ue_rows: 3,
            ue_cols: 3,
            area_side: 1000.0,
            wavelength: 0.1,
            bs_height: 10.0,
            ue_height: 1.5,
            spacing: None,
            bs_positions: Vec::new(),
        }
    }
}

impl TopologyConfig {
    pub fn antennas_per_bs(&self) -> usize {
        self.bs_rows * self.bs_cols
    }

    pub fn antennas_per_ue(&self) -> usize {
        self.ue_rows * self.ue_cols
    }

    pub fn element_spacing(&self) -> f64 {
        self.spacing.unwrap_or(self.wavelength / 2.0)
    }

    /// Field-path validation; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(
                    format!("topology.{field}"),
                    format!("must be > 0, got {v}"),
                ))
            }
        };
        let nonzero = |field: &str, v: usize| -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(format!("topology.{field}"), "must be >= 1"))
            }
        };
        nonzero("num_bs", self.num_bs)?;
        nonzero("bs_rows", self.bs_rows)?;
        nonzero("bs_cols", self.bs_cols)?;
        nonzero("num_ue", self.num_ue)?;
        nonzero("ue_rows", self.ue_rows)?;
        nonzero("ue_cols", self.ue_cols)?;
        positive("area_side", self.area_side)?;
        positive("wavelength", self.wavelength)?;
        positive("bs_height", self.bs_height)?;
        positive("ue_height", self.ue_height)?;
        if let Some(s) = self.spacing {
            positive("spacing", s)?;
        }
        if !self.bs_positions.is_empty() {
            if self.bs_positions.len() != self.num_bs {
                return Err(Error::config(
                    "topology.bs_positions",
                    format!(
                        "expected {} entries, got {}",
                        self.num_bs,
                        self.bs_positions.len()
                    ),
                ));
            }
            for (i, p) in self.bs_positions.iter().enumerate() {
                if p.iter().any(|c| !(0.0..=self.area_side).contains(c)) {
                    return Err(Error::config(
                        format!("topology.bs_positions[{i}]"),
                        "site lies outside the service area",
                    ));
                }
            }
        }
        let streams = self.num_ue * self.antennas_per_ue();
        let budget = self.num_bs * self.antennas_per_bs();
        if streams > budget {
            return Err(Error::config(
                "topology",
                format!("{streams} UE antennas exceed {budget} BS antennas; selection without reuse is infeasible"),
            ));
        }
        Ok(())
    }

    fn bs_sites(&self) -> Vec<[f64; 2]> {
        if !self.bs_positions.is_empty() {
            return self.bs_positions.clone();
        }
        let grid_cols = (self.num_bs as f64).sqrt().ceil() as usize;
        let grid_rows = self.num_bs.div_ceil(grid_cols);
        let dx = self.area_side / grid_cols as f64;
        let dy = self.area_side / grid_rows as f64;
        (0..self.num_bs)
            .map(|i| {
                let (gr, gc) = (i / grid_cols, i % grid_cols);
                [(gc as f64 + 0.5) * dx, (gr as f64 + 0.5) * dy]
            })
            .collect()
    }
}

/// BS and UE panels of one static drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub wavelength: f64,
    pub area_side: f64,
    pub bs_panels: Vec<Panel>,
    pub ue_panels: Vec<Panel>,
    pub rng_seed: u64,
}

impl NetworkTopology {
    pub fn num_bs(&self) -> usize {
        self.bs_panels.len()
    }

    pub fn num_ue(&self) -> usize {
        self.ue_panels.len()
    }

    /// BS antennas per panel (all BS panels share one geometry).
    pub fn antennas_per_bs(&self) -> usize {
        self.bs_panels[0].num_elements()
    }

    pub fn antennas_per_ue(&self) -> usize {
        self.ue_panels[0].num_elements()
    }

    /// Total number of uplink streams, one per UE antenna.
    pub fn num_streams(&self) -> usize {
        self.num_ue() * self.antennas_per_ue()
    }

    /// UE owning stream `u`.
    pub fn stream_owner(&self, stream: usize) -> usize {
        stream / self.antennas_per_ue()
    }

    /// Element positions of every UE antenna, indexed by stream.
    pub fn stream_positions(&self) -> Vec<Vec3> {
        self.ue_panels.iter().flat_map(antenna_positions).collect()
    }
}

/// Deterministic scene generation from `(config, seed)`.
pub fn generate_topology(config: &TopologyConfig, seed: u64) -> Result<NetworkTopology> {
    config.validate()?;
    let spacing = config.element_spacing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs_panels = config
        .bs_sites()
        .into_iter()
        .map(|[x, y]| {
            Panel::new(
                config.bs_rows,
                config.bs_cols,
                spacing,
                Vec3::new(x, y, config.bs_height),
                -Vec3::z(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ue_panels = (0..config.num_ue)
        .map(|_| {
            let x = rng.random_range(0.0..config.area_side);
            let y = rng.random_range(0.0..config.area_side);
            Panel::new(
                config.ue_rows,
                config.ue_cols,
                spacing,
                Vec3::new(x, y, config.ue_height),
                Vec3::z(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkTopology {
        wavelength: config.wavelength,
        area_side: config.area_side,
        bs_panels,
        ue_panels,
        rng_seed: seed,
    })
}
