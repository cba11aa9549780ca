//! Error metrics, global outputs and Monte-Carlo percentile bands.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{l2_norm, reduce_field, NormKind, ScalarField};
use crate::neutronics::{CellMaterials, GROUPS};
use crate::thermal::NU;

/// Average absolute and relative L² errors over a prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPair {
    pub absolute: f64,
    pub relative: f64,
}

/// Residual and truth norms of each estimate.
pub fn residual_norms(truth: &[ScalarField], estimates: &[ScalarField]) -> Result<Vec<(f64, f64)>> {
    if truth.len() != estimates.len() {
        return Err(Error::SizeMismatch {
            expected: truth.len(),
            got: estimates.len(),
        });
    }
    truth
        .iter()
        .zip(estimates)
        .map(|(u, e)| Ok((l2_norm(&u.sub(e)?), l2_norm(u))))
        .collect()
}

/// Averages of `‖r‖` and `‖r‖/‖u‖` from per-snapshot norm pairs.
pub fn average_errors(norms: &[(f64, f64)]) -> Result<ErrorPair> {
    if norms.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = norms.len() as f64;
    let absolute = norms.iter().map(|p| p.0).sum::<f64>() / n;
    let relative = norms
        .iter()
        .map(|&(r, u)| {
            if u > 0.0 {
                r / u
            } else if r == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .sum::<f64>()
        / n;
    Ok(ErrorPair { absolute, relative })
}

pub fn compute_errors(truth: &[ScalarField], estimates: &[ScalarField]) -> Result<ErrorPair> {
    average_errors(&residual_norms(truth, estimates)?)
}

/// Global outputs along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSeries {
    /// `P(t)` divided by the reference power.
    pub power: Vec<f64>,
    /// `(‖T(t)‖₁ − ‖T_ref‖₁) / |Ω|`.
    pub mean_temperature_rise: Vec<f64>,
}

/// `P0 Σ_g ∫ Σ_f,g φ_g dΩ` for one state.
pub fn total_power(flux: [&ScalarField; 2], mats: &CellMaterials, p0: f64) -> Result<f64> {
    let mesh = flux[0].mesh();
    if !flux[0].same_mesh_as(flux[1]) {
        return Err(Error::MeshMismatch);
    }
    if mats.n_cells() != mesh.n_cells() {
        return Err(Error::SizeMismatch {
            expected: mesh.n_cells(),
            got: mats.n_cells(),
        });
    }
    let mut sum = 0.0;
    for g in 0..GROUPS {
        for (c, phi) in flux[g].values().iter().enumerate() {
            sum += mats.nu_fission[g][c] / NU * phi;
        }
    }
    Ok(p0 * sum * mesh.cell_area())
}

/// Reference state for the global outputs: the power and temperature field at `t = 0`.
#[derive(Debug, Clone)]
pub struct GlobalReference {
    pub power: f64,
    pub temperature: ScalarField,
}

/// Global outputs of a trajectory given as parallel slices of `T`, `φ₁`, `φ₂`.
/// The reference defaults to the first state.
pub fn global_outputs(
    temperature: &[ScalarField],
    fast: &[ScalarField],
    thermal: &[ScalarField],
    mats: &CellMaterials,
    p0: f64,
    reference: Option<&GlobalReference>,
) -> Result<GlobalSeries> {
    if temperature.is_empty() || fast.is_empty() || thermal.is_empty() {
        return Err(Error::MissingField(
            if temperature.is_empty() {
                "T"
            } else if fast.is_empty() {
                "phi1"
            } else {
                "phi2"
            }
            .into(),
        ));
    }
    if fast.len() != temperature.len() || thermal.len() != temperature.len() {
        return Err(Error::SizeMismatch {
            expected: temperature.len(),
            got: fast.len().min(thermal.len()),
        });
    }
    let own;
    let reference = match reference {
        Some(r) => r,
        None => {
            own = GlobalReference {
                power: total_power([&fast[0], &thermal[0]], mats, p0)?,
                temperature: temperature[0].clone(),
            };
            &own
        }
    };
    let area = temperature[0].mesh().area();
    let t_ref = reduce_field(&reference.temperature, NormKind::L1Norm);
    let mut power = Vec::with_capacity(temperature.len());
    let mut rise = Vec::with_capacity(temperature.len());
    for k in 0..temperature.len() {
        let p = total_power([&fast[k], &thermal[k]], mats, p0)?;
        power.push(if reference.power != 0.0 { p / reference.power } else { p });
        rise.push((reduce_field(&temperature[k], NormKind::L1Norm) - t_ref) / area);
    }
    Ok(GlobalSeries {
        power,
        mean_temperature_rise: rise,
    })
}

/// Pointwise percentile band over Monte-Carlo realisations.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Band {
    /// Fraction of points of `series` inside `[lower, upper]`.
    pub fn coverage(&self, series: &[f64]) -> f64 {
        if series.is_empty() {
            return 0.0;
        }
        let inside = series
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(v, (lo, hi))| **v >= **lo && **v <= **hi)
            .count();
        inside as f64 / series.len() as f64
    }

    pub fn max_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }
}

/// Nearest-rank percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Central band at `level` from realisations (one series per draw).
pub fn percentile_band(realisations: &[Vec<f64>], level: f64) -> Result<Band> {
    if realisations.len() < 2 {
        return Err(Error::InvalidInput("a band needs at least two realisations".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("band level must lie in (0, 1), got {level}")));
    }
    let len = realisations[0].len();
    if let Some(r) = realisations.iter().find(|r| r.len() != len) {
        return Err(Error::SizeMismatch {
            expected: len,
            got: r.len(),
        });
    }
    let tail = 0.5 * (1.0 - level);
    let n = realisations.len() as f64;
    let mut band = Band {
        lower: Vec::with_capacity(len),
        upper: Vec::with_capacity(len),
        mean: Vec::with_capacity(len),
    };
    for k in 0..len {
        let mut column: Vec<f64> = realisations.iter().map(|r| r[k]).collect();
        column.sort_by(f64::total_cmp);
        band.lower.push(percentile_sorted(&column, tail));
        band.upper.push(percentile_sorted(&column, 1.0 - tail));
        band.mean.push(column.iter().sum::<f64>() / n);
    }
    Ok(band)
}

/// Runs `realise(draw)` for `draws` independent draws (in parallel) and
/// returns the percentile band of the resulting series.
pub fn uq_bands<F>(draws: usize, level: f64, realise: F) -> Result<Band>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let realisations = (0..draws).into_par_iter().map(&realise).collect::<Result<Vec<_>>>()?;
    percentile_band(&realisations, level)
}
