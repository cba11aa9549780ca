//! Generalised empirical interpolation: greedy offline stage, interpolation and
//! Tikhonov-regularised online estimation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{l2_norm, linear_combination, ScalarField};
use crate::reduction::SnapshotSet;
use crate::sensing::{apply_all, apply_functional, SensorFunctional};

/// Sensor readings below this fraction of the first selection's reading are treated as zero.
const DEGENERATE_READING: f64 = 1e-13;

/// Sample statistics of the clean training coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CoefficientStats {
    /// Diagonal of the regularisation matrix, `1/|σ_i|`.
    pub fn regularisation(&self) -> Vec<f64> {
        self.std.iter().map(|s| 1.0 / s.abs()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GeimModel {
    pub magic_functions: Vec<ScalarField>,
    pub magic_sensors: Vec<SensorFunctional>,
    /// Library index of each magic sensor.
    pub sensor_indices: Vec<usize>,
    /// Training index of the snapshot that generated each magic function.
    pub magic_snapshots: Vec<usize>,
    /// `matrix[(i, j)] = v_i(q_j)`.
    pub matrix: DMatrix<f64>,
    /// Maximum training L² interpolation error after each selection.
    pub train_errors: Vec<f64>,
    pub stats: Option<CoefficientStats>,
}

impl GeimModel {
    pub fn len(&self) -> usize {
        self.magic_functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magic_functions.is_empty()
    }

    fn check_order(&self, m: usize, y: &[f64]) -> Result<()> {
        if m == 0 || m > self.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                got: m,
            });
        }
        if y.len() != m {
            return Err(Error::SizeMismatch {
                expected: m,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Interpolant `Σ β_m q_m` from the first `beta.len()` magic functions.
    pub fn reconstruct(&self, beta: &[f64]) -> Result<ScalarField> {
        let mesh = self.magic_functions[0].mesh();
        linear_combination(mesh, beta, &self.magic_functions[..beta.len()])
    }

    /// Clean readings of `u` at the first `m` magic sensors.
    pub fn measure(&self, u: &ScalarField, m: usize) -> Result<Vec<f64>> {
        apply_all(&self.magic_sensors[..m.min(self.len())], u)
    }
}

pub fn geim_greedy(
    train: &SnapshotSet,
    field: &str,
    library: &[SensorFunctional],
    m_max: usize,
    tol: f64,
) -> Result<GeimModel> {
    geim_greedy_fields(train.field(field)?, library, m_max, tol)
}

pub fn geim_greedy_fields(
    snapshots: &[ScalarField],
    library: &[SensorFunctional],
    m_max: usize,
    tol: f64,
) -> Result<GeimModel> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if snapshots.is_empty() {
        return Err(Error::EmptySet);
    }
    if m_max == 0 {
        return Err(Error::InvalidInput("at least one magic function is required".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidInput(format!("greedy tolerance must be non-negative, got {tol}")));
    }

    let mut residuals: Vec<ScalarField> = snapshots.to_vec();
    let mut norms: Vec<f64> = residuals.par_iter().map(l2_norm).collect();
    let mut available = vec![true; library.len()];

    let mut magic_functions: Vec<ScalarField> = Vec::new();
    let mut magic_sensors: Vec<SensorFunctional> = Vec::new();
    let mut sensor_indices = Vec::new();
    let mut magic_snapshots = Vec::new();
    let mut train_errors = Vec::new();
    let mut reference_reading = 0.0;

    loop {
        let m = magic_functions.len();
        if m == m_max || (m > 0 && train_errors[m - 1] <= tol) {
            break;
        }
        if available.iter().all(|a| !a) {
            return Err(Error::LibraryExhausted(m));
        }
        let worst = argmax(&norms);
        let mut candidate = residuals[worst].clone();
        // A second interpolation pass removes the rounding left at earlier
        // sensors, which the normalisation below would otherwise amplify.
        for (s, q) in magic_sensors.iter().zip(&magic_functions) {
            let c = apply_functional(s, &candidate)?;
            candidate.axpy(-c, q)?;
        }
        let candidate = &candidate;
        let readings: Vec<f64> = library
            .par_iter()
            .enumerate()
            .map(|(l, s)| {
                if available[l] {
                    apply_functional(s, candidate).map(f64::abs)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect::<Result<_>>()?;
        let best = argmax(&readings);
        let value = apply_functional(&library[best], candidate)?;
        if m == 0 {
            reference_reading = value.abs();
        }
        if value.abs() == 0.0 || value.abs() <= DEGENERATE_READING * reference_reading {
            return Err(Error::DegenerateSnapshot);
        }
        let q = candidate.scaled(1.0 / value);
        let sensor = &library[best];
        available[best] = false;

        let updates: Vec<(ScalarField, f64)> = residuals
            .par_iter()
            .map(|r| -> Result<(ScalarField, f64)> {
                let c = apply_functional(sensor, r)?;
                let mut next = r.clone();
                next.axpy(-c, &q)?;
                let n = l2_norm(&next);
                Ok((next, n))
            })
            .collect::<Result<_>>()?;
        for (k, (r, n)) in updates.into_iter().enumerate() {
            residuals[k] = r;
            norms[k] = n;
        }
        train_errors.push(norms.iter().cloned().fold(0.0, f64::max));
        magic_functions.push(q);
        magic_sensors.push(sensor.clone());
        sensor_indices.push(best);
        magic_snapshots.push(worst);
    }

    let m = magic_functions.len();
    let mut matrix = DMatrix::zeros(m, m);
    for (i, s) in magic_sensors.iter().enumerate() {
        for (j, q) in magic_functions.iter().enumerate() {
            matrix[(i, j)] = apply_functional(s, q)?;
        }
    }

    let mut model = GeimModel {
        magic_functions,
        magic_sensors,
        sensor_indices,
        magic_snapshots,
        matrix,
        train_errors,
        stats: None,
    };
    match coefficient_stats_fields(&model, snapshots) {
        Ok(stats) => model.stats = Some(stats),
        Err(Error::ZeroVariance(i)) => {
            log::warn!("training coefficient {i} has zero variance; regularised estimation unavailable")
        }
        Err(e) => return Err(e),
    }
    Ok(model)
}

/// First index of the largest value.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Forward substitution on the leading `m × m` block.
pub fn geim_coefficients(model: &GeimModel, y: &[f64]) -> Result<Vec<f64>> {
    let m = y.len();
    model.check_order(m, y)?;
    let mut beta = vec![0.0; m];
    for i in 0..m {
        let mut s = y[i];
        for j in 0..i {
            s -= model.matrix[(i, j)] * beta[j];
        }
        beta[i] = s / model.matrix[(i, i)];
    }
    Ok(beta)
}

pub fn geim_online(model: &GeimModel, y: &[f64], m: usize) -> Result<(Vec<f64>, ScalarField)> {
    model.check_order(m, y)?;
    let beta = geim_coefficients(model, y)?;
    let estimate = model.reconstruct(&beta)?;
    Ok((beta, estimate))
}

/// Solves `(BᵀB + λTᵀT)β = Bᵀy + λTᵀTβ̄` on the leading blocks.
pub fn trgeim_coefficients(model: &GeimModel, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let m = y.len();
    model.check_order(m, y)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("regularisation must be non-negative, got {lambda}")));
    }
    let stats = model
        .stats
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("model has no training coefficient statistics".into()))?;
    let b = model.matrix.view((0, 0), (m, m)).into_owned();
    let t2: Vec<f64> = stats.regularisation()[..m].iter().map(|t| t * t).collect();
    let mut lhs = b.transpose() * &b;
    let mut rhs = b.transpose() * DVector::from_column_slice(y);
    for i in 0..m {
        lhs[(i, i)] += lambda * t2[i];
        rhs[i] += lambda * t2[i] * stats.mean[i];
    }
    let sol = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("regularised normal equations".into()))?,
    };
    Ok(sol.iter().copied().collect())
}

pub fn trgeim_online(model: &GeimModel, y: &[f64], m: usize, lambda: f64) -> Result<(Vec<f64>, ScalarField)> {
    model.check_order(m, y)?;
    let beta = trgeim_coefficients(model, y, lambda)?;
    let estimate = model.reconstruct(&beta)?;
    Ok((beta, estimate))
}

pub fn coefficient_stats(model: &GeimModel, train: &SnapshotSet, field: &str) -> Result<CoefficientStats> {
    coefficient_stats_fields(model, train.field(field)?)
}

/// Per-index sample mean and standard deviation of the full-order clean coefficients.
pub fn coefficient_stats_fields(model: &GeimModel, snapshots: &[ScalarField]) -> Result<CoefficientStats> {
    let m = model.len();
    let coeffs: Vec<Vec<f64>> = snapshots
        .par_iter()
        .map(|u| geim_coefficients(model, &model.measure(u, m)?))
        .collect::<Result<_>>()?;
    sample_stats(&coeffs, m)
}

pub fn sample_stats(samples: &[Vec<f64>], m: usize) -> Result<CoefficientStats> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::ZeroVariance(0));
    }
    let mut mean = vec![0.0; m];
    for s in samples {
        for i in 0..m {
            mean[i] += s[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut std = vec![0.0; m];
    for s in samples {
        for i in 0..m {
            std[i] += (s[i] - mean[i]).powi(2);
        }
    }
    for (i, v) in std.iter_mut().enumerate() {
        *v = (*v / (n - 1) as f64).sqrt();
        if *v == 0.0 {
            return Err(Error::ZeroVariance(i));
        }
    }
    Ok(CoefficientStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, BoundaryTag, BoundaryTags, MeshDescription, StructuredMesh};
    use crate::sensing::build_sensor_library;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn mesh(n: usize) -> Arc<StructuredMesh> {
        let d = MeshDescription::uniform(n, n, 1.0, 1.0, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        Arc::new(build_mesh(&d).unwrap())
    }

    fn smooth_family(m: &Arc<StructuredMesh>, count: usize) -> Vec<ScalarField> {
        let l = m.nx() as f64;
        (0..count)
            .map(|k| {
                let mu = 0.5 + k as f64 / count as f64;
                ScalarField::from_fn(m.clone(), move |x, y| {
                    (-((x - mu * l * 0.6).powi(2) + (y - 0.4 * l).powi(2)) / (mu * 20.0)).exp()
                        + mu * (x / l).powi(2)
                })
                .unwrap()
            })
            .collect()
    }

    /// Interpolation from scratch: dense solve of `v_i(Σ β_j q_j) = v_i(u)`.
    fn dense_interpolant(model: &GeimModel, u: &ScalarField, m: usize) -> ScalarField {
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = apply_functional(&model.magic_sensors[i], &model.magic_functions[j]).unwrap();
            }
            b[i] = apply_functional(&model.magic_sensors[i], u).unwrap();
        }
        let beta = a.lu().solve(&b).unwrap();
        model.reconstruct(beta.as_slice()).unwrap()
    }

    #[test]
    fn rank_one_training_set() {
        let m = mesh(12);
        let u = ScalarField::from_fn(m.clone(), |x, y| 1.0 + x * y).unwrap();
        let lib = build_sensor_library(&m, 3, 1.0).unwrap();
        let model = geim_greedy_fields(&vec![u.clone(); 4], &lib, 5, 1e-8).unwrap();
        assert_eq!(model.len(), 1);
        let v = apply_functional(&model.magic_sensors[0], &u).unwrap();
        assert!(l2_norm(&model.magic_functions[0].sub(&u.scaled(1.0 / v)).unwrap()) < 1e-12);
        assert!(model.train_errors[0] < 1e-10);
        assert!(model.stats.is_none());
    }

    #[test]
    fn exact_two_dimensional_span() {
        let m = mesh(15);
        let a = ScalarField::from_fn(m.clone(), |x, _| x).unwrap();
        let b = ScalarField::from_fn(m.clone(), |_, y| (y / 3.0).sin()).unwrap();
        let set: Vec<_> = (0..6)
            .map(|k| {
                let mut f = a.scaled(1.0 + k as f64);
                f.axpy((k as f64 - 2.5).powi(2), &b).unwrap();
                f
            })
            .collect();
        let lib = build_sensor_library(&m, 3, 1.0).unwrap();
        let model = geim_greedy_fields(&set, &lib, 5, 1e-8).unwrap();
        assert_eq!(model.len(), 2);
        assert!(model.train_errors[1] < 1e-10);
    }

    #[test]
    fn structure_and_brute_force_errors() {
        let m = mesh(20);
        let set = smooth_family(&m, 30);
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = geim_greedy_fields(&set, &lib, 8, 0.0).unwrap();
        assert_eq!(model.len(), 8);
        let b = &model.matrix;
        for i in 0..8 {
            assert!((b[(i, i)] - 1.0).abs() < 1e-10);
            for j in 0..8 {
                if j > i {
                    assert!(b[(i, j)].abs() < 1e-10);
                } else if j < i {
                    assert!(b[(i, j)].abs() <= 1.0 + 1e-10);
                }
            }
        }
        let mut sorted = model.sensor_indices.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        for mm in 1..=8 {
            let brute = set
                .iter()
                .map(|u| l2_norm(&u.sub(&dense_interpolant(&model, u, mm)).unwrap()))
                .fold(0.0, f64::max);
            let e = model.train_errors[mm - 1];
            assert!((brute - e).abs() <= 1e-8 * (1.0 + e), "M={mm}: {brute} vs {e}");
        }
        for w in model.train_errors.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        // Selected snapshots are reproduced once their magic function exists.
        for (k, &snap) in model.magic_snapshots.iter().enumerate() {
            let u = &set[snap];
            for mm in k + 1..=8 {
                let (_, est) = geim_online(&model, &model.measure(u, mm).unwrap(), mm).unwrap();
                assert!(l2_norm(&est.sub(u).unwrap()) / l2_norm(u) < 1e-10);
            }
        }
    }

    #[test]
    fn online_matches_dense_solve_and_interpolates() {
        let m = mesh(20);
        let set = smooth_family(&m, 25);
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = geim_greedy_fields(&set, &lib, 10, 0.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (beta, est) = geim_online(&model, &y, 10).unwrap();
        let b = model.matrix.clone();
        let sv = b.clone().svd(false, false).singular_values;
        let cond = sv.max() / sv.min();
        let oracle = b.lu().solve(&DVector::from_column_slice(&y)).unwrap();
        let scale = cond * oracle.amax();
        for i in 0..10 {
            assert!((beta[i] - oracle[i]).abs() < 1e-12 * scale, "{} {} {}", beta[i], oracle[i], scale);
        }
        let readings = model.measure(&est, 10).unwrap();
        for i in 0..10 {
            assert!((readings[i] - y[i]).abs() < 1e-10);
        }
        let (b1, _) = geim_online(&model, &y[..1], 1).unwrap();
        assert!((b1[0] - y[0]).abs() < 1e-12 * y[0].abs());
        assert!(matches!(geim_online(&model, &y[..3], 4), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn regularised_limits_and_normal_equations() {
        let m = mesh(20);
        let set = smooth_family(&m, 25);
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = geim_greedy_fields(&set, &lib, 8, 0.0).unwrap();
        let stats = model.stats.clone().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let y: Vec<f64> = model
            .measure(&set[7], 8)
            .unwrap()
            .iter()
            .map(|v| v + 0.01 * rng.random_range(-1.0..1.0))
            .collect();
        let plain = geim_coefficients(&model, &y).unwrap();
        let free = trgeim_coefficients(&model, &y, 0.0).unwrap();
        for i in 0..8 {
            assert!((plain[i] - free[i]).abs() < 1e-10 * (1.0 + plain[i].abs()));
        }
        let prior = trgeim_coefficients(&model, &y, 1e12).unwrap();
        for i in 0..8 {
            assert!((prior[i] - stats.mean[i]).abs() <= 1e-4 * stats.mean[i].abs().max(stats.std[i]));
        }
        // Oracle: stacked least squares [B; √λ T] β = [y; √λ T β̄] via SVD.
        let lambda: f64 = 0.01;
        let t = stats.regularisation();
        let mut a = DMatrix::zeros(16, 8);
        let mut rhs = DVector::zeros(16);
        for i in 0..8 {
            for j in 0..8 {
                a[(i, j)] = model.matrix[(i, j)];
            }
            rhs[i] = y[i];
            a[(8 + i, i)] = lambda.sqrt() * t[i];
            rhs[8 + i] = lambda.sqrt() * t[i] * stats.mean[i];
        }
        let oracle = a.svd(true, true).solve(&rhs, 1e-15).unwrap();
        let got = trgeim_coefficients(&model, &y, lambda).unwrap();
        for i in 0..8 {
            assert!((got[i] - oracle[i]).abs() < 1e-10 * (1.0 + oracle[i].abs()));
        }
    }

    #[test]
    fn stats_recomputed_from_scratch() {
        let m = mesh(16);
        let set = smooth_family(&m, 12);
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = geim_greedy_fields(&set, &lib, 6, 0.0).unwrap();
        let samples: Vec<Vec<f64>> = set
            .iter()
            .map(|u| {
                let y: Vec<f64> = model.magic_sensors.iter().map(|s| apply_functional(s, u).unwrap()).collect();
                model.matrix.clone().lu().solve(&DVector::from_column_slice(&y)).unwrap().iter().copied().collect()
            })
            .collect();
        let stats = model.stats.clone().unwrap();
        for i in 0..6 {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / 12.0;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / 11.0;
            assert!((stats.mean[i] - mean).abs() < 1e-12 * (1.0 + mean.abs()));
            assert!((stats.std[i] - var.sqrt()).abs() < 1e-12 * (1.0 + var.sqrt()));
        }
    }

    #[test]
    fn two_point_statistics() {
        let s = sample_stats(&[vec![1.0], vec![3.0]], 1).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(sample_stats(&[vec![1.0]], 1), Err(Error::ZeroVariance(_))));
        assert!(matches!(sample_stats(&[vec![1.0], vec![1.0]], 1), Err(Error::ZeroVariance(0))));
    }

    #[test]
    fn exhausting_the_library() {
        let m = mesh(10);
        let set = smooth_family(&m, 10);
        let lib = build_sensor_library(&m, 10, 1.0).unwrap();
        assert!(matches!(geim_greedy_fields(&set, &lib, 3, 0.0), Err(Error::LibraryExhausted(1))));
        assert!(matches!(geim_greedy_fields(&set, &[], 3, 0.0), Err(Error::EmptyLibrary)));
    }
}
