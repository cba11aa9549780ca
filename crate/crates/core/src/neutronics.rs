//! Two-group neutron diffusion with delayed-neutron precursors.
//!
//! Group 1 is fast, group 2 thermal; scattering is downward only
//! (`Σ_s,1→2`). The steady state comes from inverse power iteration and
//! transients are advanced with implicit Euler, the precursors being
//! eliminated exactly from the step equations so that each step is one
//! coupled two-group linear solve.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryTag, ScalarField, Side, StructuredMesh};
use crate::linalg::{assemble_diffusion, gmres, BandCholesky, FivePointOperator, GmresOptions};
use crate::thermal::NU;

pub const GROUPS: usize = 2;

/// Group constants of one material region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMaterial {
    pub region: u32,
    /// D_g (cm)
    pub diffusion: [f64; 2],
    /// Σ_a,g (1/cm)
    pub absorption: [f64; 2],
    /// Σ_s,1→2 (1/cm)
    pub scattering: f64,
    /// νΣ_f,g (1/cm)
    pub nu_fission: [f64; 2],
    pub chi: [f64; 2],
    /// axial buckling B²_z,g (1/cm²)
    #[serde(default)]
    pub buckling: [f64; 2],
    /// v_g (cm/s)
    pub velocity: [f64; 2],
}

/// Delayed-neutron data, shared by every region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kinetics {
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl Kinetics {
    pub fn total_beta(&self) -> f64 {
        self.beta.iter().sum()
    }

    pub fn groups(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTable {
    regions: Vec<RegionMaterial>,
    kinetics: Kinetics,
    total_beta: f64,
}

impl MaterialTable {
    pub fn new(regions: Vec<RegionMaterial>, kinetics: Kinetics) -> Result<Self> {
        for m in &regions {
            let bad = |what: &str| Err(Error::InvalidInput(format!("region {}: {}", m.region, what)));
            let xs = m
                .diffusion
                .iter()
                .chain(&m.absorption)
                .chain(&m.nu_fission)
                .chain(&m.buckling)
                .chain(std::iter::once(&m.scattering));
            if xs.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad("cross sections must be finite and nonnegative");
            }
            if m.velocity.iter().any(|v| !(*v > 0.0)) {
                return bad("velocities must be positive");
            }
            if m.chi.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("fission spectrum outside [0, 1]");
            }
            let chi_sum: f64 = m.chi.iter().sum();
            if chi_sum.abs() > 1e-12 && (chi_sum - 1.0).abs() > 1e-12 {
                return bad("fission spectrum must sum to 0 or 1");
            }
        }
        let mut ids: Vec<u32> = regions.iter().map(|m| m.region).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate region in material table".into()));
        }
        if kinetics.beta.len() != kinetics.lambda.len() {
            return Err(Error::InvalidInput("beta and lambda lengths differ".into()));
        }
        if kinetics.beta.iter().any(|b| !(*b >= 0.0)) || kinetics.lambda.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidInput("precursor data must be beta >= 0, lambda > 0".into()));
        }
        let total_beta = kinetics.total_beta();
        if total_beta >= 1.0 {
            return Err(Error::InvalidInput("total delayed fraction must be below 1".into()));
        }
        Ok(Self {
            regions,
            kinetics,
            total_beta,
        })
    }

    pub fn regions(&self) -> &[RegionMaterial] {
        &self.regions
    }

    pub fn region(&self, id: u32) -> Option<&RegionMaterial> {
        self.regions.iter().find(|m| m.region == id)
    }

    pub fn region_mut(&mut self, id: u32) -> Option<&mut RegionMaterial> {
        self.regions.iter_mut().find(|m| m.region == id)
    }

    pub fn kinetics(&self) -> &Kinetics {
        &self.kinetics
    }

    pub fn total_beta(&self) -> f64 {
        self.total_beta
    }

    /// Expands the region table onto the mesh.
    pub fn at_cells(&self, mesh: &StructuredMesh) -> Result<CellMaterials> {
        let n = mesh.n_cells();
        let mut out = CellMaterials {
            diffusion: [vec![0.0; n], vec![0.0; n]],
            absorption: [vec![0.0; n], vec![0.0; n]],
            scattering: vec![0.0; n],
            nu_fission: [vec![0.0; n], vec![0.0; n]],
            chi: [vec![0.0; n], vec![0.0; n]],
            buckling: [vec![0.0; n], vec![0.0; n]],
            velocity: [vec![0.0; n], vec![0.0; n]],
            kinetics: self.kinetics.clone(),
        };
        for c in 0..n {
            let id = mesh.region(c);
            let m = self
                .region(id)
                .ok_or_else(|| Error::InvalidInput(format!("no material for region {id}")))?;
            for g in 0..GROUPS {
                out.diffusion[g][c] = m.diffusion[g];
                out.absorption[g][c] = m.absorption[g];
                out.nu_fission[g][c] = m.nu_fission[g];
                out.chi[g][c] = m.chi[g];
                out.buckling[g][c] = m.buckling[g];
                out.velocity[g][c] = m.velocity[g];
            }
            out.scattering[c] = m.scattering;
        }
        Ok(out)
    }
}

/// Group constants evaluated cell by cell (possibly temperature-updated).
#[derive(Debug, Clone, PartialEq)]
pub struct CellMaterials {
    pub diffusion: [Vec<f64>; 2],
    pub absorption: [Vec<f64>; 2],
    pub scattering: Vec<f64>,
    pub nu_fission: [Vec<f64>; 2],
    pub chi: [Vec<f64>; 2],
    pub buckling: [Vec<f64>; 2],
    pub velocity: [Vec<f64>; 2],
    pub kinetics: Kinetics,
}

impl CellMaterials {
    pub fn n_cells(&self) -> usize {
        self.scattering.len()
    }

    /// Σ_g νΣ_f,g φ_g per cell.
    pub fn fission_source(&self, flux: &[ScalarField]) -> Vec<f64> {
        let n = self.n_cells();
        (0..n)
            .map(|c| (0..GROUPS).map(|g| self.nu_fission[g][c] * flux[g].values()[c]).sum())
            .collect()
    }

    /// Σ_g Σ_f,g φ_g per cell, with Σ_f = νΣ_f / ν.
    pub fn fission_rate(&self, flux: &[ScalarField]) -> Vec<f64> {
        self.fission_source(flux).into_iter().map(|f| f / NU).collect()
    }

    pub fn has_fission(&self) -> bool {
        self.nu_fission.iter().flatten().any(|v| *v > 0.0)
    }
}

fn vacuum_sides(mesh: &StructuredMesh) -> [bool; 4] {
    let mut out = [false; 4];
    for side in Side::ALL {
        out[side.index()] = mesh.boundary().get(side) != BoundaryTag::Symmetry;
    }
    out
}

/// Leakage plus removal operator of one group, per unit volume.
///
/// Removal is `Σ_a,g + Σ_s,g→g' + D_g B²_z,g`; non-symmetry sides carry a
/// zero-flux condition on the boundary face.
pub fn assemble_group_operator(
    mesh: &StructuredMesh,
    mats: &CellMaterials,
    group: usize,
) -> Result<FivePointOperator> {
    if group >= GROUPS {
        return Err(Error::InvalidInput(format!("group index {group} out of range")));
    }
    if mats.n_cells() != mesh.n_cells() {
        return Err(Error::SizeMismatch {
            expected: mesh.n_cells(),
            got: mats.n_cells(),
        });
    }
    let mut op = assemble_diffusion(mesh, &mats.diffusion[group], vacuum_sides(mesh));
    let removal: Vec<f64> = (0..mesh.n_cells())
        .map(|c| {
            let out_scatter = if group == 0 { mats.scattering[c] } else { 0.0 };
            mats.absorption[group][c] + out_scatter + mats.diffusion[group][c] * mats.buckling[group][c]
        })
        .collect();
    op.add_diagonal(&removal);
    op.check_diagonal()?;
    Ok(op)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeutronicState {
    pub flux: Vec<ScalarField>,
    pub precursors: Vec<ScalarField>,
    pub k_eff: f64,
    pub time: f64,
}

impl NeutronicState {
    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        self.flux[0].mesh()
    }

    /// Multiplies fluxes and precursors by `factor`; the equations are linear
    /// so the scaled state is still a solution.
    pub fn scale(&mut self, factor: f64) {
        for f in self.flux.iter_mut().chain(self.precursors.iter_mut()) {
            *f = f.scaled(factor);
        }
    }
}

/// Block lower-triangular part of the two-group operator,
/// `[[A1, 0], [-Σ_s, A2]]`, inverted exactly through band factorisations.
struct GroupSweep {
    factors: [BandCholesky; 2],
    scattering: Vec<f64>,
}

impl GroupSweep {
    fn new(ops: &[FivePointOperator; 2], scattering: &[f64]) -> Result<Self> {
        Ok(Self {
            factors: [BandCholesky::factor(&ops[0])?, BandCholesky::factor(&ops[1])?],
            scattering: scattering.to_vec(),
        })
    }

    /// Solves the lower-triangular block system for `rhs = [r1; r2]`.
    fn solve(&self, rhs: &[f64], out: &mut [f64]) {
        let n = self.scattering.len();
        let (o1, o2) = out.split_at_mut(n);
        o1.copy_from_slice(&rhs[..n]);
        self.factors[0].solve_in_place(o1);
        for c in 0..n {
            o2[c] = rhs[n + c] + self.scattering[c] * o1[c];
        }
        self.factors[1].solve_in_place(o2);
    }
}

/// Inverse power iteration for the fundamental mode.
///
/// Fluxes are normalised to unit total fission power (`∫ Σ_g Σ_f,g φ_g = 1`)
/// and precursors set to their equilibrium values.
pub fn solve_keff(mesh: &Arc<StructuredMesh>, mats: &CellMaterials, tol: f64, max_iter: usize) -> Result<NeutronicState> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    if !mats.has_fission() {
        return Err(Error::NoFission);
    }
    let n = mesh.n_cells();
    let area = mesh.cell_area();
    let ops = [
        assemble_group_operator(mesh, mats, 0)?,
        assemble_group_operator(mesh, mats, 1)?,
    ];
    let sweep = GroupSweep::new(&ops, &mats.scattering)?;

    let fission = |phi: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|c| mats.nu_fission[0][c] * phi[c] + mats.nu_fission[1][c] * phi[n + c])
            .collect()
    };
    let mut phi = vec![1.0; 2 * n];
    let mut src = fission(&phi);
    let mut total: f64 = src.iter().sum::<f64>() * area;
    if !(total > 0.0) {
        return Err(Error::NoFission);
    }
    let mut k = 1.0;
    let mut rhs = vec![0.0; 2 * n];
    let mut next = vec![0.0; 2 * n];
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        for c in 0..n {
            rhs[c] = mats.chi[0][c] * src[c] / k;
            rhs[n + c] = mats.chi[1][c] * src[c] / k;
        }
        sweep.solve(&rhs, &mut next);
        let next_src = fission(&next);
        let next_total: f64 = next_src.iter().sum::<f64>() * area;
        if !(next_total > 0.0) {
            return Err(Error::NoFission);
        }
        let k_next = k * next_total / total;
        let scale_old = 1.0 / total;
        let scale_new = 1.0 / next_total;
        let mut diff: f64 = 0.0;
        let mut top: f64 = 0.0;
        for (a, b) in phi.iter().zip(&next) {
            diff = diff.max((a * scale_old - b * scale_new).abs());
            top = top.max((b * scale_new).abs());
        }
        let flux_change = diff / top;
        change = (k_next - k).abs().max(flux_change);
        k = k_next;
        std::mem::swap(&mut phi, &mut next);
        src = next_src;
        total = next_total;
        if change < tol {
            return finish_steady_state(mesh, mats, phi, k);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        change,
    })
}

fn finish_steady_state(
    mesh: &Arc<StructuredMesh>,
    mats: &CellMaterials,
    mut phi: Vec<f64>,
    k: f64,
) -> Result<NeutronicState> {
    let n = mesh.n_cells();
    let power: f64 = (0..n)
        .map(|c| (mats.nu_fission[0][c] * phi[c] + mats.nu_fission[1][c] * phi[n + c]) / NU)
        .sum::<f64>()
        * mesh.cell_area();
    for v in &mut phi {
        *v /= power;
    }
    let phi2 = phi.split_off(n);
    let flux = vec![ScalarField::new(mesh.clone(), phi)?, ScalarField::new(mesh.clone(), phi2)?];
    let precursors = equilibrium_precursors(mesh, mats, &flux, k)?;
    Ok(NeutronicState {
        flux,
        precursors,
        k_eff: k,
        time: 0.0,
    })
}

/// `c_j = β_j F / (k λ_j)` cellwise.
pub fn equilibrium_precursors(
    mesh: &Arc<StructuredMesh>,
    mats: &CellMaterials,
    flux: &[ScalarField],
    k_eff: f64,
) -> Result<Vec<ScalarField>> {
    let source = mats.fission_source(flux);
    let kin = &mats.kinetics;
    kin.beta
        .iter()
        .zip(&kin.lambda)
        .map(|(b, l)| ScalarField::new(mesh.clone(), source.iter().map(|f| b * f / (k_eff * l)).collect()))
        .collect()
}

/// Residual of the steady equations (time derivatives dropped) for a state,
/// returned as `(‖residual‖_L², ‖fission source‖_L²)`.
pub fn steady_residual(mesh: &StructuredMesh, mats: &CellMaterials, state: &NeutronicState) -> Result<(f64, f64)> {
    let n = mesh.n_cells();
    let beta = mats.kinetics.total_beta();
    let source = mats.fission_source(&state.flux);
    let mut res2 = 0.0;
    let mut src2 = 0.0;
    let mut lphi = vec![0.0; n];
    for g in 0..GROUPS {
        let op = assemble_group_operator(mesh, mats, g)?;
        op.apply(state.flux[g].values(), &mut lphi);
        for c in 0..n {
            let delayed: f64 = mats
                .kinetics
                .lambda
                .iter()
                .zip(&state.precursors)
                .map(|(l, p)| l * p.values()[c])
                .sum();
            let inscatter = if g == 1 { mats.scattering[c] * state.flux[0].values()[c] } else { 0.0 };
            let s = inscatter + mats.chi[g][c] * ((1.0 - beta) / state.k_eff * source[c] + delayed);
            res2 += (lphi[c] - s).powi(2);
            src2 += s * s;
        }
    }
    let area = mesh.cell_area();
    Ok(((res2 * area).sqrt(), (src2 * area).sqrt()))
}

/// Implicit-Euler stepper that keeps the group factorisations while the
/// materials and step size stay the same.
struct StepCache {
    mats: CellMaterials,
    dt: f64,
    ops: [FivePointOperator; 2],
    sweep: GroupSweep,
}

#[derive(Default)]
pub struct NeutronicsStepper {
    cache: Option<StepCache>,
    pub gmres: Option<GmresOptions>,
    last_iterations: usize,
}

impl NeutronicsStepper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    pub fn advance(
        &mut self,
        state: &NeutronicState,
        dt: f64,
        mats: &CellMaterials,
        k_eff: f64,
    ) -> Result<NeutronicState> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("time step must be positive".into()));
        }
        let mesh = state.mesh().clone();
        let n = mesh.n_cells();
        if mats.n_cells() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: mats.n_cells(),
            });
        }
        let kin = &mats.kinetics;
        if state.precursors.len() != kin.groups() {
            return Err(Error::SizeMismatch {
                expected: kin.groups(),
                got: state.precursors.len(),
            });
        }
        let reuse = matches!(&self.cache, Some(cache) if cache.dt == dt && &cache.mats == mats);
        if !reuse {
            let mut ops = [
                assemble_group_operator(&mesh, mats, 0)?,
                assemble_group_operator(&mesh, mats, 1)?,
            ];
            for (g, op) in ops.iter_mut().enumerate() {
                let inv: Vec<f64> = mats.velocity[g].iter().map(|v| 1.0 / (v * dt)).collect();
                op.add_diagonal(&inv);
            }
            let sweep = GroupSweep::new(&ops, &mats.scattering)
                .map_err(|e| Error::SingularSystem(format!("group factorisation failed: {e}")))?;
            self.cache = Some(StepCache {
                mats: mats.clone(),
                dt,
                ops,
                sweep,
            });
        }
        let cache = self.cache.as_ref().expect("cache filled above");
        let (ops, sweep) = (&cache.ops, &cache.sweep);

        // Precursors eliminated: c^{n+1} = (c^n + dt β_j F^{n+1}/k) / (1 + λ_j dt).
        let beta = kin.total_beta();
        let fission_weight = (1.0 - beta) / k_eff
            + kin
                .beta
                .iter()
                .zip(&kin.lambda)
                .map(|(b, l)| b * l * dt / (k_eff * (1.0 + l * dt)))
                .sum::<f64>();
        let mut rhs = vec![0.0; 2 * n];
        for g in 0..GROUPS {
            let phi = state.flux[g].values();
            for c in 0..n {
                let delayed: f64 = kin
                    .lambda
                    .iter()
                    .zip(&state.precursors)
                    .map(|(l, p)| l * p.values()[c] / (1.0 + l * dt))
                    .sum();
                rhs[g * n + c] = phi[c] / (mats.velocity[g][c] * dt) + mats.chi[g][c] * delayed;
            }
        }

        let ops_only = |x: &[f64], y: &mut [f64]| {
            // y = (M - P) x with M the block lower-triangular part.
            let (x1, x2) = x.split_at(n);
            let (y1, y2) = y.split_at_mut(n);
            ops[0].apply(x1, y1);
            ops[1].apply(x2, y2);
            for c in 0..n {
                y2[c] -= mats.scattering[c] * x1[c];
                let f = fission_weight * (mats.nu_fission[0][c] * x1[c] + mats.nu_fission[1][c] * x2[c]);
                y1[c] -= mats.chi[0][c] * f;
                y2[c] -= mats.chi[1][c] * f;
            }
        };
        let mut x: Vec<f64> = state.flux[0].values().iter().chain(state.flux[1].values()).copied().collect();
        let opts = self.gmres.unwrap_or_default();
        let report = gmres(ops_only, |r, z| sweep.solve(r, z), &rhs, &mut x, opts).map_err(|e| match e {
            Error::NoConvergence { iterations, change } => Error::SingularSystem(format!(
                "coupled group solve stalled after {iterations} iterations (residual {change:e})"
            )),
            other => other,
        })?;
        self.last_iterations = report.iterations;

        let phi2 = x.split_off(n);
        let flux = vec![ScalarField::new(mesh.clone(), x)?, ScalarField::new(mesh.clone(), phi2)?];
        let source = mats.fission_source(&flux);
        let precursors = kin
            .beta
            .iter()
            .zip(&kin.lambda)
            .zip(&state.precursors)
            .map(|((b, l), p)| {
                let values = p
                    .values()
                    .iter()
                    .zip(&source)
                    .map(|(c, f)| (c + dt * b * f / k_eff) / (1.0 + l * dt))
                    .collect();
                ScalarField::new(mesh.clone(), values)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NeutronicState {
            flux,
            precursors,
            k_eff,
            time: state.time + dt,
        })
    }
}

/// One implicit-Euler step with materials frozen over the step.
pub fn advance_neutronics(state: &NeutronicState, dt: f64, mats: &CellMaterials, k_eff: f64) -> Result<NeutronicState> {
    NeutronicsStepper::new().advance(state, dt, mats, k_eff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, BoundaryTags, MeshDescription};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    const IAEA_BETA: [f64; 6] = [0.000247, 0.0013845, 0.001222, 0.0026455, 0.000832, 0.000169];
    const IAEA_LAMBDA: [f64; 6] = [0.0127, 0.0317, 0.115, 0.311, 1.4, 3.87];

    fn iaea_kinetics() -> Kinetics {
        Kinetics {
            beta: IAEA_BETA.to_vec(),
            lambda: IAEA_LAMBDA.to_vec(),
        }
    }

    fn inner_fuel(region: u32) -> RegionMaterial {
        RegionMaterial {
            region,
            diffusion: [1.5, 0.4],
            absorption: [0.01, 0.085],
            scattering: 0.02,
            nu_fission: [0.0, 0.135],
            chi: [1.0, 0.0],
            buckling: [0.0, 0.0],
            velocity: [1e7, 1e5],
        }
    }

    fn reflector(region: u32) -> RegionMaterial {
        RegionMaterial {
            region,
            diffusion: [2.0, 0.3],
            absorption: [0.0, 0.01],
            scattering: 0.04,
            nu_fission: [0.0, 0.0],
            chi: [0.0, 0.0],
            buckling: [0.0, 0.0],
            velocity: [1e7, 1e5],
        }
    }

    fn mesh_from(d: &MeshDescription) -> Arc<StructuredMesh> {
        Arc::new(build_mesh(d).unwrap())
    }

    fn infinite_mesh(n: usize) -> Arc<StructuredMesh> {
        mesh_from(&MeshDescription::uniform(n, n, 1.0, 1.0, 1, BoundaryTags::uniform(BoundaryTag::Symmetry)))
    }

    /// Fuel in the lower-left corner, reflector elsewhere, leaking east and north.
    fn small_core(n: usize) -> Arc<StructuredMesh> {
        let boundary = BoundaryTags {
            west: BoundaryTag::Symmetry,
            east: BoundaryTag::Vacuum,
            south: BoundaryTag::Symmetry,
            north: BoundaryTag::Vacuum,
        };
        let mut d = MeshDescription::uniform(n, n, 10.0, 10.0, 1, boundary);
        for j in 0..n {
            for i in 0..n {
                if i + j >= n + n / 3 {
                    d.regions[j * n + i] = Some(2);
                }
            }
        }
        mesh_from(&d)
    }

    fn small_core_table() -> MaterialTable {
        MaterialTable::new(vec![inner_fuel(1), reflector(2)], iaea_kinetics()).unwrap()
    }

    #[test]
    fn neumann_operator_annihilates_constants() {
        let mesh = infinite_mesh(5);
        let mut m = inner_fuel(1);
        m.absorption = [0.0, 0.0];
        m.scattering = 0.0;
        let mut mats = MaterialTable::new(vec![m], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        let op = assemble_diffusion(&mesh, &mats.diffusion[1], vacuum_sides(&mesh));
        let mut y = vec![0.0; 25];
        op.apply(&vec![3.0; 25], &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-14));
        // with no removal the diagonal stays positive in the interior
        mats.absorption[1][0] = 0.0;
        assert!(assemble_group_operator(&mesh, &mats, 1).is_ok());
    }

    #[test]
    fn single_cell_operator_is_removal() {
        let mesh = infinite_mesh(1);
        let mut m = inner_fuel(1);
        m.absorption = [0.01, 0.01];
        let mats = MaterialTable::new(vec![m], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        let op = assemble_group_operator(&mesh, &mats, 1).unwrap();
        assert!((op.diag()[0] - 0.01).abs() < 1e-15);
        let op1 = assemble_group_operator(&mesh, &mats, 0).unwrap();
        assert!((op1.diag()[0] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn two_cell_face_coefficient_is_harmonic_mean() {
        let mut d = MeshDescription::uniform(2, 1, 1.0, 1.0, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        d.regions[1] = Some(2);
        let mesh = mesh_from(&d);
        let mut a = inner_fuel(1);
        let mut b = inner_fuel(2);
        a.diffusion = [1.0, 1.0];
        b.diffusion = [3.0, 3.0];
        a.absorption = [0.0; 2];
        b.absorption = [0.0; 2];
        let mats = MaterialTable::new(vec![a, b], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        let op = assemble_group_operator(&mesh, &mats, 1).unwrap();
        assert!((op.east()[0] - 1.5).abs() < 1e-14);
        assert!((op.diag()[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn zero_removal_and_leakage_is_rejected() {
        let mesh = infinite_mesh(1);
        let mut m = inner_fuel(1);
        m.absorption = [0.0, 0.0];
        let mats = MaterialTable::new(vec![m], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        assert!(matches!(
            assemble_group_operator(&mesh, &mats, 1),
            Err(Error::NegativeCoefficient { .. })
        ));
    }

    #[test]
    fn material_validation() {
        let mut m = inner_fuel(1);
        m.chi = [0.5, 0.2];
        assert!(MaterialTable::new(vec![m], iaea_kinetics()).is_err());
        let mut m = inner_fuel(1);
        m.absorption[0] = -1e-3;
        assert!(MaterialTable::new(vec![m], iaea_kinetics()).is_err());
        let t = MaterialTable::new(vec![inner_fuel(1)], iaea_kinetics()).unwrap();
        assert!((t.total_beta() - 0.0065).abs() < 1e-12);
    }

    #[test]
    fn infinite_medium_multiplication() {
        // two-group infinite-medium oracle
        let (sa1, ss, sa2, nsf2): (f64, f64, f64, f64) = (0.01, 0.02, 0.085, 0.135);
        let expected = (nsf2 * ss / sa2) / (sa1 + ss);
        assert!((expected - 1.05882).abs() < 1e-5);
        let mesh = infinite_mesh(3);
        let mats = small_core_table().at_cells(&mesh).unwrap();
        let state = solve_keff(&mesh, &mats, 1e-12, 1000).unwrap();
        assert!((state.k_eff - expected).abs() < 1e-10, "k = {}", state.k_eff);
        let power: f64 = mats.fission_rate(&state.flux).iter().sum::<f64>() * mesh.cell_area();
        assert!((power - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_fission_doubles_k() {
        let mesh = small_core(9);
        let table = small_core_table();
        let mats = table.at_cells(&mesh).unwrap();
        let base = solve_keff(&mesh, &mats, 1e-11, 20000).unwrap();
        let mut doubled = mats.clone();
        for g in 0..GROUPS {
            for v in doubled.nu_fission[g].iter_mut() {
                *v *= 2.0;
            }
        }
        let twice = solve_keff(&mesh, &doubled, 1e-11, 20000).unwrap();
        assert!((twice.k_eff - 2.0 * base.k_eff).abs() < 1e-9);
        for g in 0..GROUPS {
            let a = base.flux[g].values();
            let b = twice.flux[g].values();
            let (ma, mb) = (a[0], b[0]);
            for (x, y) in a.iter().zip(b) {
                assert!((x / ma - y / mb).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn slab_buckling_eigenvalue() {
        let length = 100.0;
        let (d, sa, nsf) = (1.0, 0.02, 0.03);
        let k_slab = |nx: usize| {
            let boundary = BoundaryTags {
                west: BoundaryTag::Vacuum,
                east: BoundaryTag::Vacuum,
                south: BoundaryTag::Symmetry,
                north: BoundaryTag::Symmetry,
            };
            let mesh = mesh_from(&MeshDescription::uniform(nx, 1, length / nx as f64, 1.0, 1, boundary));
            let m = RegionMaterial {
                region: 1,
                diffusion: [d, d],
                absorption: [sa, 0.1],
                scattering: 0.0,
                nu_fission: [nsf, 0.0],
                chi: [1.0, 0.0],
                buckling: [0.0, 0.0],
                velocity: [1e7, 1e5],
            };
            let mats = MaterialTable::new(vec![m], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
            solve_keff(&mesh, &mats, 1e-13, 10000).unwrap().k_eff
        };
        let exact = nsf / (sa + d * (std::f64::consts::PI / length).powi(2));
        let (coarse, fine) = (k_slab(50), k_slab(100));
        let extrapolated = (4.0 * fine - coarse) / 3.0;
        assert!((fine - exact).abs() / exact < 1e-3);
        assert!((extrapolated - exact).abs() / exact < 1e-6, "{extrapolated} vs {exact}");
        assert!((extrapolated - exact).abs() < (fine - exact).abs());
    }

    #[test]
    fn no_fission_is_reported() {
        let mesh = infinite_mesh(2);
        let mats = MaterialTable::new(vec![reflector(1)], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        assert!(matches!(solve_keff(&mesh, &mats, 1e-8, 100), Err(Error::NoFission)));
    }

    #[test]
    fn steady_precursors_balance_fission() {
        let mesh = small_core(6);
        let mats = small_core_table().at_cells(&mesh).unwrap();
        let s = solve_keff(&mesh, &mats, 1e-12, 20000).unwrap();
        let f = mats.fission_source(&s.flux);
        for (j, c) in s.precursors.iter().enumerate() {
            for (cell, v) in c.values().iter().enumerate() {
                let rhs = IAEA_BETA[j] / s.k_eff * f[cell];
                assert!((IAEA_LAMBDA[j] * v - rhs).abs() <= 1e-8 * rhs.abs().max(1e-300));
            }
        }
        assert!(s.flux.iter().all(|p| p.values().iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn steady_state_is_stationary() {
        let mesh = small_core(10);
        let mats = small_core_table().at_cells(&mesh).unwrap();
        let s0 = solve_keff(&mesh, &mats, 1e-13, 50000).unwrap();
        let mut stepper = NeutronicsStepper::new();
        let mut s = s0.clone();
        for _ in 0..5 {
            let next = stepper.advance(&s, 0.01, &mats, s0.k_eff).unwrap();
            for g in 0..GROUPS {
                let prev = s.flux[g].values();
                let top = prev.iter().cloned().fold(0.0, f64::max);
                for (a, b) in prev.iter().zip(next.flux[g].values()) {
                    assert!((a - b).abs() <= 1e-9 * top);
                }
            }
            s = next;
        }
        assert!((s.time - 0.05).abs() < 1e-12);
    }

    #[test]
    fn precursors_decay_without_fission() {
        let mesh = infinite_mesh(2);
        let mats = MaterialTable::new(vec![reflector(1)], iaea_kinetics()).unwrap().at_cells(&mesh).unwrap();
        let c0 = 2.0;
        let mut state = NeutronicState {
            flux: vec![ScalarField::constant(mesh.clone(), 1.0), ScalarField::constant(mesh.clone(), 1.0)],
            precursors: (0..6).map(|_| ScalarField::constant(mesh.clone(), c0)).collect(),
            k_eff: 1.0,
            time: 0.0,
        };
        let dt = 0.05;
        let mut stepper = NeutronicsStepper::new();
        for n in 1..=20 {
            state = stepper.advance(&state, dt, &mats, 1.0).unwrap();
            for (j, c) in state.precursors.iter().enumerate() {
                let expected = c0 * (1.0 + IAEA_LAMBDA[j] * dt).powi(-n);
                for v in c.values() {
                    assert!((v - expected).abs() <= 1e-13 * expected);
                }
            }
        }
    }

    /// Uniform infinite medium written as a linear ODE in
    /// `(φ1, φ2, c_1..c_6)`, advanced exactly with matrix exponentials.
    fn point_kinetics_power(m: &RegionMaterial, k: f64, y0: &DVector<f64>, dt: f64, steps: usize) -> Vec<f64> {
        let nd = IAEA_BETA.len();
        let beta: f64 = IAEA_BETA.iter().sum();
        let mut a = DMatrix::<f64>::zeros(2 + nd, 2 + nd);
        let (v1, v2) = (m.velocity[0], m.velocity[1]);
        let f = [m.nu_fission[0], m.nu_fission[1]];
        a[(0, 0)] = v1 * (-(m.absorption[0] + m.scattering) + (1.0 - beta) * f[0] / k);
        a[(0, 1)] = v1 * (1.0 - beta) * f[1] / k;
        a[(1, 0)] = v2 * m.scattering;
        a[(1, 1)] = -v2 * m.absorption[1];
        for j in 0..nd {
            a[(0, 2 + j)] = v1 * IAEA_LAMBDA[j];
            a[(2 + j, 0)] = IAEA_BETA[j] * f[0] / k;
            a[(2 + j, 1)] = IAEA_BETA[j] * f[1] / k;
            a[(2 + j, 2 + j)] = -IAEA_LAMBDA[j];
        }
        let propagator = (a * dt).exp();
        let mut y = y0.clone();
        let mut out = vec![(f[0] * y[0] + f[1] * y[1])];
        for _ in 0..steps {
            y = &propagator * y;
            out.push(f[0] * y[0] + f[1] * y[1]);
        }
        out
    }

    #[test]
    fn step_reactivity_matches_point_kinetics() {
        let mesh = infinite_mesh(1);
        let m = inner_fuel(1);
        let table = MaterialTable::new(vec![m.clone()], iaea_kinetics()).unwrap();
        let mats = table.at_cells(&mesh).unwrap();
        let s0 = solve_keff(&mesh, &mats, 1e-13, 1000).unwrap();
        let rho = 0.5 * 0.0065;
        let mut stepped = m.clone();
        stepped.nu_fission[1] /= 1.0 - rho;
        let mats1 = MaterialTable::new(vec![stepped.clone()], iaea_kinetics())
            .unwrap()
            .at_cells(&mesh)
            .unwrap();

        let dt = 0.002;
        let steps = 500;
        let mut y0 = DVector::zeros(2 + IAEA_BETA.len());
        y0[0] = s0.flux[0].values()[0];
        y0[1] = s0.flux[1].values()[0];
        for j in 0..IAEA_BETA.len() {
            y0[2 + j] = s0.precursors[j].values()[0];
        }
        let oracle = point_kinetics_power(&stepped, s0.k_eff, &y0, dt, steps);

        let mut stepper = NeutronicsStepper::new();
        let mut s = s0.clone();
        let p0 = mats1.fission_source(&s.flux)[0];
        assert!((p0 - oracle[0]).abs() < 1e-12 * p0);
        let mut worst: f64 = 0.0;
        for n in 1..=steps {
            s = stepper.advance(&s, dt, &mats1, s0.k_eff).unwrap();
            let p = mats1.fission_source(&s.flux)[0];
            worst = worst.max((p - oracle[n]).abs() / oracle[n]);
        }
        assert!(oracle[steps] / oracle[0] > 1.5, "transient too mild to be a useful check");
        assert!(worst < 0.02, "max relative deviation {worst}");
    }

    fn step_transient(mesh: &Arc<StructuredMesh>, steps: usize, t_end: f64) -> Vec<f64> {
        let table = small_core_table();
        let mats = table.at_cells(mesh).unwrap();
        let s0 = solve_keff(mesh, &mats, 1e-12, 50000).unwrap();
        let mut perturbed = mats.clone();
        for v in perturbed.absorption[1].iter_mut() {
            *v *= 0.995;
        }
        let mut stepper = NeutronicsStepper::new();
        let mut s = s0.clone();
        for _ in 0..steps {
            s = stepper.advance(&s, t_end / steps as f64, &perturbed, s0.k_eff).unwrap();
        }
        s.flux.iter().flat_map(|f| f.values().to_vec()).collect()
    }

    #[test]
    fn implicit_euler_is_first_order() {
        let mesh = small_core(8);
        let t_end = 0.2;
        let base = 8;
        let run = |k: usize| step_transient(&mesh, base * k, t_end);
        // reference from dt/8, Richardson-extrapolated with dt/16
        let (r8, r16) = (run(8), run(16));
        let reference: Vec<f64> = r8.iter().zip(&r16).map(|(a, b)| 2.0 * b - a).collect();
        let err = |u: &[f64]| -> f64 { u.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() };
        let ratio = err(&run(1)) / err(&run(2));
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn steady_residual_is_small(
            sa2 in 0.06f64..0.12,
            d1 in 1.0f64..2.0,
            ss in 0.015f64..0.03,
            tol in prop::sample::select(vec![1e-8, 1e-10, 1e-12]),
        ) {
            let mesh = small_core(7);
            let mut fuel = inner_fuel(1);
            fuel.absorption[1] = sa2;
            fuel.diffusion[0] = d1;
            fuel.scattering = ss;
            let table = MaterialTable::new(vec![fuel, reflector(2)], iaea_kinetics()).unwrap();
            let mats = table.at_cells(&mesh).unwrap();
            let s = solve_keff(&mesh, &mats, tol, 50000).unwrap();
            let (res, src) = steady_residual(&mesh, &mats, &s).unwrap();
            prop_assert!(res < tol * src, "residual {} vs {}", res, tol * src);
        }
    }
}
