//! Gaussian-kernel sensor functionals and synthetic measurements.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fields::{ScalarField, StructuredMesh};

/// Kernel support radius in units of the point spread.
pub const KERNEL_CUTOFF: f64 = 6.0;

/// Linear functional `v(u) = ∫ u K dΩ` with an L¹-normalised Gaussian kernel.
#[derive(Debug, Clone)]
pub struct SensorFunctional {
    center: (f64, f64),
    spread: f64,
    mesh: Arc<StructuredMesh>,
    /// `(cell, w)` pairs with `Σ w · cell_area = 1`.
    support: Vec<(usize, f64)>,
}

impl SensorFunctional {
    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        &self.mesh
    }

    pub fn support(&self) -> &[(usize, f64)] {
        &self.support
    }

    /// Kernel weights as a field.
    pub fn weight_field(&self) -> ScalarField {
        let mut values = vec![0.0; self.mesh.n_cells()];
        for &(c, w) in &self.support {
            values[c] = w;
        }
        ScalarField::new(self.mesh.clone(), values).expect("finite kernel weights")
    }
}

/// Gaussian sensor centred at `center`, truncated at `KERNEL_CUTOFF * spread` and renormalised.
pub fn gaussian_sensor(mesh: &Arc<StructuredMesh>, center: (f64, f64), spread: f64) -> Result<SensorFunctional> {
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::InvalidInput(format!("point spread must be positive, got {spread}")));
    }
    let cutoff = KERNEL_CUTOFF * spread;
    let mut support = Vec::new();
    let mut mass = 0.0;
    for c in 0..mesh.n_cells() {
        let (x, y) = mesh.cell_center(c);
        let r2 = (x - center.0).powi(2) + (y - center.1).powi(2);
        if r2 <= cutoff * cutoff {
            let w = (-r2 / (2.0 * spread * spread)).exp();
            mass += w;
            support.push((c, w));
        }
    }
    if support.is_empty() || mass <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "sensor at ({}, {}) has no cells within its support",
            center.0, center.1
        )));
    }
    let scale = 1.0 / (mass * mesh.cell_area());
    for (_, w) in &mut support {
        *w *= scale;
    }
    Ok(SensorFunctional {
        center,
        spread,
        mesh: mesh.clone(),
        support,
    })
}

/// One sensor per cell centre on the sub-grid `i = stride/2 + k·stride`, x fastest.
pub fn build_sensor_library(mesh: &Arc<StructuredMesh>, stride: usize, spread: f64) -> Result<Vec<SensorFunctional>> {
    if stride == 0 {
        return Err(Error::InvalidInput("sensor stride must be at least 1".into()));
    }
    if stride > mesh.nx() || stride > mesh.ny() {
        return Err(Error::EmptyLibrary);
    }
    let offset = (stride - 1) / 2;
    let mut library = Vec::new();
    for j in (offset..mesh.ny()).step_by(stride) {
        for i in (offset..mesh.nx()).step_by(stride) {
            let center = mesh.cell_center(mesh.index(i, j));
            library.push(gaussian_sensor(mesh, center, spread)?);
        }
    }
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    Ok(library)
}

pub fn apply_functional(sensor: &SensorFunctional, u: &ScalarField) -> Result<f64> {
    if !Arc::ptr_eq(&sensor.mesh, u.mesh()) && !sensor.mesh.same_geometry(u.mesh()) {
        return Err(Error::MeshMismatch);
    }
    let values = u.values();
    let s: f64 = sensor.support.iter().map(|&(c, w)| w * values[c]).sum();
    Ok(s * sensor.mesh.cell_area())
}

/// Readings of every sensor on `u`.
pub fn apply_all(sensors: &[SensorFunctional], u: &ScalarField) -> Result<Vec<f64>> {
    sensors.iter().map(|s| apply_functional(s, u)).collect()
}

/// L² Riesz representative: the kernel weight field itself.
pub fn riesz_representation(sensor: &SensorFunctional) -> ScalarField {
    sensor.weight_field()
}

/// `y_m = v_m(truth) + ε_m`, `ε_m ~ N(0, σ²)` drawn from ChaCha20 seeded with `seed`.
pub fn synthesize_measurements(
    truth: &ScalarField,
    sensors: &[SensorFunctional],
    sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut y = apply_all(sensors, truth)?;
    add_noise(&mut y, sigma, seed);
    Ok(y)
}

/// Adds seeded Gaussian noise to clean readings in place.
pub fn add_noise(y: &mut [f64], sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for v in y.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * e;
    }
}

/// CSV with header `index,x,y,value`.
pub fn write_measurements_csv(out: &mut impl Write, sensors: &[SensorFunctional], y: &[f64]) -> Result<()> {
    if sensors.len() != y.len() {
        return Err(Error::SizeMismatch {
            expected: sensors.len(),
            got: y.len(),
        });
    }
    writeln!(out, "index,x,y,value")?;
    for (k, (s, v)) in sensors.iter().zip(y).enumerate() {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e}", k, s.center.0, s.center.1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, inner_product, reduce_field, BoundaryTag, BoundaryTags, MeshDescription, NormKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn mesh(n: usize, h: f64) -> Arc<StructuredMesh> {
        let d = MeshDescription::uniform(n, n, h, h, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        Arc::new(build_mesh(&d).unwrap())
    }

    fn random_field(m: &Arc<StructuredMesh>, rng: &mut impl Rng) -> ScalarField {
        let v = (0..m.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ScalarField::new(m.clone(), v).unwrap()
    }

    #[test]
    fn kernel_is_l1_normalised_and_nonnegative() {
        let m = mesh(20, 0.5);
        for s in build_sensor_library(&m, 3, 1.0).unwrap() {
            let w = s.weight_field();
            assert!((reduce_field(&w, NormKind::L1Norm) - 1.0).abs() < 1e-10);
            assert!(w.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn library_counts() {
        assert_eq!(build_sensor_library(&mesh(10, 1.0), 10, 1.0).unwrap().len(), 1);
        let lib = build_sensor_library(&mesh(10, 1.0), 5, 1.0).unwrap();
        assert_eq!(lib.len(), 4);
        let centres: Vec<_> = lib.iter().map(|s| s.center()).collect();
        assert_eq!(centres, vec![(2.5, 2.5), (7.5, 2.5), (2.5, 7.5), (7.5, 7.5)]);
        assert_eq!(build_sensor_library(&mesh(85, 2.0), 5, 1.0).unwrap().len(), 17 * 17);
        assert!(matches!(build_sensor_library(&mesh(10, 1.0), 11, 1.0), Err(Error::EmptyLibrary)));
        assert!(build_sensor_library(&mesh(10, 1.0), 0, 1.0).is_err());
    }

    #[test]
    fn distinct_centres() {
        let lib = build_sensor_library(&mesh(30, 1.0), 2, 1.0).unwrap();
        for a in 0..lib.len() {
            for b in a + 1..lib.len() {
                assert_ne!(lib[a].center(), lib[b].center());
            }
        }
    }

    #[test]
    fn constant_and_zero_fields() {
        let m = mesh(16, 0.5);
        let s = gaussian_sensor(&m, (4.0, 4.0), 1.0).unwrap();
        let c = ScalarField::constant(m.clone(), 3.7);
        assert!((apply_functional(&s, &c).unwrap() - 3.7).abs() < 1e-12);
        assert_eq!(apply_functional(&s, &ScalarField::zeros(m.clone())).unwrap(), 0.0);
    }

    #[test]
    fn converges_to_continuous_functional() {
        // Continuous oracle: ∫ u G over R² for u = x² + y with G the unit-mass Gaussian.
        let (cx, cy, s) = (10.0, 10.0, 1.0);
        let exact = cx * cx + s * s + cy;
        let mut errs = Vec::new();
        for n in [40usize, 80, 160] {
            let m = mesh(n, 20.0 / n as f64);
            let sensor = gaussian_sensor(&m, (cx, cy), s).unwrap();
            let u = ScalarField::from_fn(m.clone(), |x, y| x * x + y).unwrap();
            errs.push((apply_functional(&sensor, &u).unwrap() - exact).abs());
        }
        assert!(errs[2] < 1e-6, "{errs:?}");
        assert!(errs[2] < errs[1] && errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn riesz_identity_on_random_fields() {
        let m = mesh(25, 0.4);
        let s = gaussian_sensor(&m, (5.0, 3.0), 1.0).unwrap();
        let g = riesz_representation(&s);
        assert!((inner_product(&g, &ScalarField::constant(m.clone(), 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((inner_product(&g, &g).unwrap() - apply_functional(&s, &g).unwrap()).abs() < 1e-12);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let phi = random_field(&m, &mut rng);
            worst = worst.max((inner_product(&g, &phi).unwrap() - apply_functional(&s, &phi).unwrap()).abs());
        }
        assert!(worst < 1e-10);
    }

    #[test]
    fn measurements_clean_and_deterministic() {
        let m = mesh(20, 1.0);
        let lib = build_sensor_library(&m, 5, 1.0).unwrap();
        let u = ScalarField::from_fn(m.clone(), |x, y| x.sin() + y).unwrap();
        let clean = synthesize_measurements(&u, &lib, 0.0, 1).unwrap();
        assert_eq!(clean, apply_all(&lib, &u).unwrap());
        let a = synthesize_measurements(&u, &lib, 0.5, 42).unwrap();
        let b = synthesize_measurements(&u, &lib, 0.5, 42).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, synthesize_measurements(&u, &lib, 0.5, 43).unwrap());
    }

    #[test]
    fn noise_statistics() {
        let m = mesh(10, 1.0);
        let lib = vec![gaussian_sensor(&m, (5.0, 5.0), 1.0).unwrap()];
        let u = ScalarField::from_fn(m.clone(), |x, _| x).unwrap();
        let exact = apply_functional(&lib[0], &u).unwrap();
        let sigma = 0.5;
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|k| synthesize_measurements(&u, &lib, sigma, k as u64).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * sigma / (n as f64).sqrt());
        assert!((std - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn csv_export() {
        let m = mesh(10, 1.0);
        let lib = build_sensor_library(&m, 5, 1.0).unwrap();
        let mut buf = Vec::new();
        write_measurements_csv(&mut buf, &lib, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("index,x,y,value\n0,2.5"));
    }

    proptest! {
        #[test]
        fn functional_is_linear(alpha in -10.0f64..10.0, seed in 0u64..1000) {
            let m = mesh(12, 1.0);
            let s = gaussian_sensor(&m, (6.0, 6.0), 1.0).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let u1 = random_field(&m, &mut rng);
            let u2 = random_field(&m, &mut rng);
            let mut combo = u2.clone();
            combo.axpy(alpha, &u1).unwrap();
            let lhs = apply_functional(&s, &combo).unwrap();
            let rhs = alpha * apply_functional(&s, &u1).unwrap() + apply_functional(&s, &u2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
