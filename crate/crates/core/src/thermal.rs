//! Transient heat conduction driven by the fission power density.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{BoundaryTag, ScalarField, Side, StructuredMesh};
use crate::linalg::{assemble_diffusion, boundary_weights, BandCholesky, FivePointOperator};
use crate::neutronics::CellMaterials;

/// Neutrons per fission, used to recover Σ_f from νΣ_f.
pub const NU: f64 = 2.43;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionThermal {
    pub region: u32,
    /// k (W/(cm K))
    pub conductivity: f64,
    /// ρ (g/cm³)
    pub density: f64,
    /// c_p (J/(g K))
    pub heat_capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalProperties {
    regions: Vec<RegionThermal>,
    boundary_temperature: [f64; 4],
}

impl ThermalProperties {
    /// All fixed-temperature sides are held at `boundary_temperature`.
    pub fn new(regions: Vec<RegionThermal>, boundary_temperature: f64) -> Result<Self> {
        for r in &regions {
            if !(r.conductivity > 0.0 && r.density > 0.0 && r.heat_capacity > 0.0)
                || !(r.conductivity.is_finite() && r.density.is_finite() && r.heat_capacity.is_finite())
            {
                return Err(Error::InvalidInput(format!(
                    "region {}: thermal properties must be positive",
                    r.region
                )));
            }
        }
        if !(boundary_temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(boundary_temperature));
        }
        Ok(Self {
            regions,
            boundary_temperature: [boundary_temperature; 4],
        })
    }

    pub fn with_side_temperature(mut self, side: Side, value: f64) -> Result<Self> {
        if !(value > 0.0) {
            return Err(Error::NonPositiveTemperature(value));
        }
        self.boundary_temperature[side.index()] = value;
        Ok(self)
    }

    pub fn regions(&self) -> &[RegionThermal] {
        &self.regions
    }

    pub fn boundary_temperature(&self, side: Side) -> f64 {
        self.boundary_temperature[side.index()]
    }

    fn region(&self, id: u32) -> Result<&RegionThermal> {
        self.regions
            .iter()
            .find(|r| r.region == id)
            .ok_or_else(|| Error::InvalidInput(format!("no thermal properties for region {id}")))
    }

    /// Per-cell conductivity and volumetric heat capacity ρ c_p.
    pub fn at_cells(&self, mesh: &StructuredMesh) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut k = Vec::with_capacity(mesh.n_cells());
        let mut cap = Vec::with_capacity(mesh.n_cells());
        for c in 0..mesh.n_cells() {
            let r = self.region(mesh.region(c))?;
            k.push(r.conductivity);
            cap.push(r.density * r.heat_capacity);
        }
        Ok((k, cap))
    }
}

fn fixed_sides(mesh: &StructuredMesh) -> [bool; 4] {
    let mut out = [false; 4];
    for side in Side::ALL {
        out[side.index()] = mesh.boundary().get(side) != BoundaryTag::Symmetry;
    }
    out
}

/// `q''' = P0 Σ_g (νΣ_f,g / ν) φ_g` cellwise.
pub fn power_density(flux: &[ScalarField], mats: &CellMaterials, p0: f64) -> Result<ScalarField> {
    if !(p0 > 0.0) {
        return Err(Error::InvalidInput("power scale must be positive".into()));
    }
    let first = flux.first().ok_or_else(|| Error::MissingField("flux".into()))?;
    if flux.len() != 2 {
        return Err(Error::SizeMismatch {
            expected: 2,
            got: flux.len(),
        });
    }
    if mats.n_cells() != first.len() {
        return Err(Error::SizeMismatch {
            expected: first.len(),
            got: mats.n_cells(),
        });
    }
    let values = mats.fission_rate(flux).into_iter().map(|f| p0 * f).collect();
    ScalarField::new(first.mesh().clone(), values)
}

/// Conduction operator on one mesh, with the implicit-Euler factorisation
/// kept for the last step size used.
pub struct HeatSolver {
    mesh: Arc<StructuredMesh>,
    conduction: FivePointOperator,
    capacity: Vec<f64>,
    boundary_source: Vec<f64>,
    boundary: Vec<(Side, Vec<(usize, f64)>)>,
    props: ThermalProperties,
    factor: Option<(f64, BandCholesky)>,
}

impl HeatSolver {
    pub fn new(mesh: Arc<StructuredMesh>, props: &ThermalProperties) -> Result<Self> {
        let (k, capacity) = props.at_cells(&mesh)?;
        let sides = fixed_sides(&mesh);
        let conduction = assemble_diffusion(&mesh, &k, sides);
        let boundary = boundary_weights(&mesh, &k, sides);
        let mut boundary_source = vec![0.0; mesh.n_cells()];
        for (side, weights) in &boundary {
            let tb = props.boundary_temperature(*side);
            for &(c, w) in weights {
                boundary_source[c] += w * tb;
            }
        }
        Ok(Self {
            mesh,
            conduction,
            capacity,
            boundary_source,
            boundary,
            props: props.clone(),
            factor: None,
        })
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        &self.mesh
    }

    fn check(&self, field: &ScalarField) -> Result<()> {
        if !field.mesh().same_geometry(&self.mesh) {
            return Err(Error::MeshMismatch);
        }
        Ok(())
    }

    pub fn advance(&mut self, temperature: &ScalarField, power: &ScalarField, dt: f64) -> Result<ScalarField> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput("time step must be positive".into()));
        }
        self.check(temperature)?;
        self.check(power)?;
        if !matches!(&self.factor, Some((h, _)) if *h == dt) {
            let mut op = self.conduction.clone();
            let inv: Vec<f64> = self.capacity.iter().map(|c| c / dt).collect();
            op.add_diagonal(&inv);
            self.factor = Some((dt, BandCholesky::factor(&op)?));
        }
        let factor = &self.factor.as_ref().expect("factor set above").1;
        let mut rhs: Vec<f64> = (0..self.mesh.n_cells())
            .map(|c| {
                self.capacity[c] / dt * temperature.values()[c] + power.values()[c] + self.boundary_source[c]
            })
            .collect();
        factor.solve_in_place(&mut rhs);
        ScalarField::new(self.mesh.clone(), rhs)
            .map_err(|e| Error::SingularSystem(format!("heat solve produced invalid values: {e}")))
    }

    /// Steady conduction with the given source; needs a fixed-temperature side.
    pub fn steady(&self, power: &ScalarField) -> Result<ScalarField> {
        self.check(power)?;
        let factor = BandCholesky::factor(&self.conduction)?;
        let mut rhs: Vec<f64> = power
            .values()
            .iter()
            .zip(&self.boundary_source)
            .map(|(q, b)| q + b)
            .collect();
        factor.solve_in_place(&mut rhs);
        ScalarField::new(self.mesh.clone(), rhs)
    }

    /// Heat leaving the domain through fixed-temperature sides (W per unit depth).
    pub fn boundary_heat_flow(&self, temperature: &ScalarField) -> Result<f64> {
        self.check(temperature)?;
        let area = self.mesh.cell_area();
        let mut total = 0.0;
        for (side, weights) in &self.boundary {
            let tb = self.props.boundary_temperature(*side);
            for &(c, w) in weights {
                total += w * (temperature.values()[c] - tb) * area;
            }
        }
        Ok(total)
    }
}

/// One implicit-Euler conduction step.
pub fn advance_heat(
    temperature: &ScalarField,
    power: &ScalarField,
    props: &ThermalProperties,
    dt: f64,
) -> Result<ScalarField> {
    HeatSolver::new(temperature.mesh().clone(), props)?.advance(temperature, power, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, reduce_field, BoundaryTags, MeshDescription, NormKind};
    use crate::neutronics::{Kinetics, MaterialTable, RegionMaterial};
    use proptest::prelude::*;

    fn slab_mesh(nx: usize, length: f64) -> Arc<StructuredMesh> {
        let boundary = BoundaryTags {
            west: BoundaryTag::FixedTemperature,
            east: BoundaryTag::FixedTemperature,
            south: BoundaryTag::Symmetry,
            north: BoundaryTag::Symmetry,
        };
        let d = MeshDescription::uniform(nx, 1, length / nx as f64, 1.0, 1, boundary);
        Arc::new(build_mesh(&d).unwrap())
    }

    fn props(k: f64, t_bc: f64) -> ThermalProperties {
        ThermalProperties::new(
            vec![RegionThermal {
                region: 1,
                conductivity: k,
                density: 10.45,
                heat_capacity: 235e-6,
            }],
            t_bc,
        )
        .unwrap()
    }

    fn fuel_materials(mesh: &StructuredMesh) -> CellMaterials {
        let table = MaterialTable::new(
            vec![RegionMaterial {
                region: 1,
                diffusion: [1.5, 0.4],
                absorption: [0.01, 0.085],
                scattering: 0.02,
                nu_fission: [0.0, 0.135],
                chi: [1.0, 0.0],
                buckling: [0.0, 0.0],
                velocity: [1e7, 1e5],
            }],
            Kinetics {
                beta: vec![0.0065],
                lambda: vec![0.08],
            },
        )
        .unwrap();
        table.at_cells(mesh).unwrap()
    }

    #[test]
    fn zero_flux_gives_zero_power() {
        let mesh = slab_mesh(4, 4.0);
        let mats = fuel_materials(&mesh);
        let flux = vec![ScalarField::zeros(mesh.clone()), ScalarField::zeros(mesh.clone())];
        let q = power_density(&flux, &mats, 3.0).unwrap();
        assert!(q.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn thermal_flux_power_integral() {
        let mesh = slab_mesh(5, 10.0);
        let mats = fuel_materials(&mesh);
        let flux = vec![ScalarField::zeros(mesh.clone()), ScalarField::constant(mesh.clone(), 1.0)];
        let p0 = 2.5;
        let q = power_density(&flux, &mats, p0).unwrap();
        let expected = p0 * (0.135 / 2.43) * mesh.area();
        let total = reduce_field(&q, NormKind::Integral);
        assert!((total - expected).abs() < 1e-12 * expected);
        let q2 = power_density(&flux, &mats, 2.0 * p0).unwrap();
        for (a, b) in q.values().iter().zip(q2.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn adiabatic_equilibrium_is_preserved() {
        let d = MeshDescription::uniform(6, 5, 1.0, 1.0, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        let mesh = Arc::new(build_mesh(&d).unwrap());
        let t0 = ScalarField::constant(mesh.clone(), 750.0);
        let q = ScalarField::zeros(mesh.clone());
        let t1 = advance_heat(&t0, &q, &props(2.0, 600.0), 0.1).unwrap();
        for v in t1.values() {
            assert!((v - 750.0).abs() < 1e-10);
        }
    }

    #[test]
    fn slab_steady_peak_matches_parabola() {
        let (length, k, q, t_bc) = (20.0, 0.5, 0.3, 600.0);
        let peak = |nx: usize| {
            let mesh = slab_mesh(nx, length);
            let solver = HeatSolver::new(mesh.clone(), &props(k, t_bc)).unwrap();
            let t = solver.steady(&ScalarField::constant(mesh, q)).unwrap();
            t.values().iter().cloned().fold(f64::MIN, f64::max) - t_bc
        };
        let exact = q * length * length / (8.0 * k);
        let coarse = (peak(101) - exact).abs() / exact;
        let fine = (peak(201) - exact).abs() / exact;
        assert!(fine < 1e-4, "relative peak error {fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn steady_energy_balance() {
        let boundary = BoundaryTags {
            west: BoundaryTag::Symmetry,
            east: BoundaryTag::FixedTemperature,
            south: BoundaryTag::Symmetry,
            north: BoundaryTag::FixedTemperature,
        };
        let mut d = MeshDescription::uniform(12, 9, 2.0, 1.5, 1, boundary);
        for c in 0..d.regions.len() {
            if c % 3 == 0 {
                d.regions[c] = Some(2);
            }
        }
        let mesh = Arc::new(build_mesh(&d).unwrap());
        let mut p = props(1.0, 600.0);
        p.regions.push(RegionThermal {
            region: 2,
            conductivity: 0.2,
            density: 5.0,
            heat_capacity: 1e-4,
        });
        let p = p.with_side_temperature(Side::North, 650.0).unwrap();
        let solver = HeatSolver::new(mesh.clone(), &p).unwrap();
        let q = ScalarField::from_fn(mesh.clone(), |x, y| 0.1 + 0.01 * x + 0.002 * x * y).unwrap();
        let t = solver.steady(&q).unwrap();
        let source = reduce_field(&q, NormKind::Integral);
        let out = solver.boundary_heat_flow(&t).unwrap();
        assert!((out - source).abs() < 1e-6 * source, "{out} vs {source}");
    }

    #[test]
    fn implicit_euler_is_first_order() {
        let mesh = slab_mesh(40, 20.0);
        let p = props(0.5, 600.0);
        let t0 = ScalarField::from_fn(mesh.clone(), |x, _| 600.0 + 50.0 * (std::f64::consts::PI * x / 20.0).sin())
            .unwrap();
        let q = ScalarField::constant(mesh.clone(), 0.05);
        let t_end = 0.4;
        let run = |steps: usize| {
            let mut solver = HeatSolver::new(mesh.clone(), &p).unwrap();
            let mut t = t0.clone();
            for _ in 0..steps {
                t = solver.advance(&t, &q, t_end / steps as f64).unwrap();
            }
            t
        };
        // reference from dt/8, Richardson-extrapolated with dt/16
        let (r8, r16) = (run(64), run(128));
        let reference = r16.scaled(2.0).sub(&r8).unwrap();
        let err = |f: &ScalarField| crate::fields::l2_norm(&f.sub(&reference).unwrap());
        let ratio = err(&run(8)) / err(&run(16));
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn maximum_principle(
            seed in proptest::collection::vec(0.0f64..1.0, 30),
            q_scale in 0.0f64..0.5,
            dt in 0.01f64..1.0,
        ) {
            let boundary = BoundaryTags {
                west: BoundaryTag::Symmetry,
                east: BoundaryTag::FixedTemperature,
                south: BoundaryTag::FixedTemperature,
                north: BoundaryTag::Symmetry,
            };
            let d = MeshDescription::uniform(6, 5, 1.0, 1.0, 1, boundary);
            let mesh = Arc::new(build_mesh(&d).unwrap());
            let t0 = ScalarField::new(mesh.clone(), seed.iter().map(|s| 600.0 + 200.0 * s).collect()).unwrap();
            let q = ScalarField::new(mesh.clone(), seed.iter().rev().map(|s| q_scale * s).collect()).unwrap();
            let floor = t0.values().iter().cloned().fold(600.0, f64::min);
            let mut solver = HeatSolver::new(mesh.clone(), &props(0.7, 600.0)).unwrap();
            let mut t = t0;
            for _ in 0..5 {
                t = solver.advance(&t, &q, dt).unwrap();
                for v in t.values() {
                    prop_assert!(*v >= floor - 1e-9);
                }
            }
        }
    }
}
