//! Parameterised-background data-weak estimation: stability-driven sensor
//! selection, inf-sup constants and the online saddle-point solve.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{inner_product, l2_norm, linear_combination, ScalarField};
use crate::reduction::PodBasis;
use crate::sensing::{apply_all, apply_functional, riesz_representation, SensorFunctional};

/// Selection scores below this value stop the greedy.
const STALL_SCORE: f64 = 1e-14;
/// Relative norm loss signalling linear dependence during orthonormalisation.
const RANK_TOL: f64 = 1e-10;
/// Relative smallest singular value below which the saddle system is singular.
const SADDLE_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct PbdwModel {
    /// Background modes, assumed linearly independent.
    pub background: Vec<ScalarField>,
    pub sensors: Vec<SensorFunctional>,
    /// Library index of each sensor, empty when built from explicit sensors.
    pub sensor_indices: Vec<usize>,
    /// Riesz representatives of the sensors.
    pub update: Vec<ScalarField>,
    /// `a[(m, m')] = (g_m, g_m')`.
    pub a: DMatrix<f64>,
    /// `k[(m, n)] = (g_m, ζ_n)`.
    pub k: DMatrix<f64>,
    /// `inf_sup[m - 1][n - 1] = β_{n,m}` recorded as sensors are added.
    pub inf_sup: Vec<Vec<f64>>,
}

impl PbdwModel {
    /// Builds the model from background functions and an ordered list of sensors.
    pub fn from_parts(background: Vec<ScalarField>, sensors: Vec<SensorFunctional>) -> Result<Self> {
        if background.is_empty() {
            return Err(Error::InvalidInput("background space is empty".into()));
        }
        let update: Vec<ScalarField> = sensors.iter().map(riesz_representation).collect();
        let m = update.len();
        let n = background.len();
        let mut a = DMatrix::zeros(m, m);
        let mut k = DMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..=i {
                let v = inner_product(&update[i], &update[j])?;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            for j in 0..n {
                k[(i, j)] = inner_product(&update[i], &background[j])?;
            }
        }
        let mut model = PbdwModel {
            background,
            sensors,
            sensor_indices: Vec::new(),
            update,
            a,
            k,
            inf_sup: Vec::new(),
        };
        model.inf_sup = inf_sup_table(&model.background, &model.update)?;
        Ok(model)
    }

    pub fn n_background(&self) -> usize {
        self.background.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    /// `β_{min(N,m),m}` after each selection.
    pub fn inf_sup_history(&self) -> Vec<f64> {
        let n = self.n_background();
        self.inf_sup.iter().enumerate().map(|(m, row)| row[n.min(m + 1) - 1]).collect()
    }

    /// `β_{N,m}` using the full background.
    pub fn inf_sup_constant(&self, m: usize) -> f64 {
        self.inf_sup[m - 1][self.n_background() - 1]
    }

    /// Clean readings of `u` at the first `m` sensors.
    pub fn measure(&self, u: &ScalarField, m: usize) -> Result<Vec<f64>> {
        apply_all(&self.sensors[..m.min(self.n_sensors())], u)
    }

    /// Saddle matrix `[[A + ξmI, K], [Kᵀ, 0]]` for `m` sensors and `n` background modes.
    pub fn saddle_matrix(&self, m: usize, n: usize, xi: f64) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(m + n, m + n);
        for i in 0..m {
            for j in 0..m {
                p[(i, j)] = self.a[(i, j)];
            }
            p[(i, i)] += xi * m as f64;
            for j in 0..n {
                p[(i, m + j)] = self.k[(i, j)];
                p[(m + j, i)] = self.k[(i, j)];
            }
        }
        p
    }
}

/// Online estimate with coefficients of both spaces.
#[derive(Debug, Clone)]
pub struct PbdwEstimate {
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub field: ScalarField,
}

/// L²-orthonormal basis of `span(fields)` by twice-iterated modified Gram–Schmidt.
pub fn orthonormalize(fields: &[ScalarField]) -> Result<Vec<ScalarField>> {
    let mut basis: Vec<ScalarField> = Vec::with_capacity(fields.len());
    for f in fields {
        let original = l2_norm(f);
        let mut v = f.clone();
        for _ in 0..2 {
            for e in &basis {
                let c = inner_product(&v, e)?;
                v.axpy(-c, e)?;
            }
        }
        let norm = l2_norm(&v);
        if original == 0.0 || norm <= RANK_TOL * original {
            return Err(Error::RankDeficient(format!(
                "function {} lies in the span of the previous ones",
                basis.len()
            )));
        }
        basis.push(v.scaled(1.0 / norm));
    }
    Ok(basis)
}

fn cross_gram(z: &[ScalarField], u: &[ScalarField]) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::zeros(z.len(), u.len());
    for (i, zi) in z.iter().enumerate() {
        for (j, uj) in u.iter().enumerate() {
            c[(i, j)] = inner_product(zi, uj)?;
        }
    }
    Ok(c)
}

/// Smallest eigenpair of `C Cᵀ` for the leading `n` rows of `c`.
fn least_stable(c: &DMatrix<f64>, n: usize) -> (f64, DVector<f64>) {
    let rows = c.rows(0, n).into_owned();
    let gram = &rows * rows.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut best = 0;
    for k in 1..n {
        if eig.eigenvalues[k] < eig.eigenvalues[best] {
            best = k;
        }
    }
    let beta = eig.eigenvalues[best].max(0.0).sqrt().min(1.0);
    (beta, eig.eigenvectors.column(best).into_owned())
}

/// `inf_{w∈Z} sup_{φ∈U} (w,φ)/(‖w‖‖φ‖)`, the cosine of the largest principal angle.
pub fn inf_sup(z: &[ScalarField], u: &[ScalarField]) -> Result<f64> {
    if z.is_empty() || u.is_empty() {
        return Err(Error::InvalidInput("inf-sup needs non-empty spaces".into()));
    }
    let zo = orthonormalize(z)?;
    let uo = orthonormalize(u)?;
    if zo.len() > uo.len() {
        return Ok(0.0);
    }
    let c = cross_gram(&zo, &uo)?;
    Ok(least_stable(&c, zo.len()).0)
}

/// `table[m - 1][n - 1] = β_{n,m}` for nested spaces.
fn inf_sup_table(background: &[ScalarField], update: &[ScalarField]) -> Result<Vec<Vec<f64>>> {
    if update.is_empty() {
        return Ok(Vec::new());
    }
    let zo = orthonormalize(background)?;
    let uo = orthonormalize(update)?;
    let c = cross_gram(&zo, &uo)?;
    Ok((1..=uo.len())
        .map(|m| {
            let cm = c.columns(0, m).into_owned();
            (1..=zo.len())
                .map(|n| if n > m { 0.0 } else { least_stable(&cm, n).0 })
                .collect()
        })
        .collect())
}

/// Stability-driven greedy selection of `m_max` sensors from `library`.
pub fn sgreedy(basis: &PodBasis, library: &[SensorFunctional], m_max: usize) -> Result<PbdwModel> {
    sgreedy_fields(basis.modes(), library, m_max)
}

pub fn sgreedy_fields(background: &[ScalarField], library: &[SensorFunctional], m_max: usize) -> Result<PbdwModel> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if background.is_empty() || m_max == 0 {
        return Err(Error::InvalidInput("sensor selection needs a background and at least one sensor".into()));
    }
    let zo = orthonormalize(background)?;
    let n_max = zo.len();
    let mut available = vec![true; library.len()];
    let mut chosen: Vec<usize> = Vec::new();
    let mut uo: Vec<ScalarField> = Vec::new();

    let mut target = zo[0].clone();
    while chosen.len() < m_max {
        let step = chosen.len() + 1;
        if available.iter().all(|a| !a) {
            return Err(Error::LibraryExhausted(chosen.len()));
        }
        let scores: Vec<f64> = library
            .par_iter()
            .enumerate()
            .map(|(l, s)| {
                if available[l] {
                    apply_functional(s, &target).map(f64::abs)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (l, v) in scores.iter().enumerate() {
            if *v > scores[best] {
                best = l;
            }
        }
        if scores[best] < STALL_SCORE {
            return Err(Error::StalledSelection {
                step,
                score: scores[best],
            });
        }
        available[best] = false;
        chosen.push(best);

        let mut g = riesz_representation(&library[best]);
        let original = l2_norm(&g);
        for _ in 0..2 {
            for e in &uo {
                let c = inner_product(&g, e)?;
                g.axpy(-c, e)?;
            }
        }
        let norm = l2_norm(&g);
        if norm <= RANK_TOL * original {
            return Err(Error::RankDeficient(format!("sensor {best} adds nothing to the update space")));
        }
        uo.push(g.scaled(1.0 / norm));

        if chosen.len() == m_max {
            break;
        }
        let m = uo.len();
        let n = n_max.min(m);
        let c = cross_gram(&zo[..n], &uo)?;
        let (_, coeffs) = least_stable(&c, n);
        let w_inf = linear_combination(zo[0].mesh(), coeffs.as_slice(), &zo[..n])?;
        let mut residual = w_inf.clone();
        for e in &uo {
            let p = inner_product(&w_inf, e)?;
            residual.axpy(-p, e)?;
        }
        target = residual;
    }

    let sensors = chosen.iter().map(|&l| library[l].clone()).collect();
    let mut model = PbdwModel::from_parts(background.to_vec(), sensors)?;
    model.sensor_indices = chosen;
    Ok(model)
}

/// Online solve with the first `y.len()` sensors and all background modes.
pub fn pbdw_online(model: &PbdwModel, y: &[f64], xi: f64) -> Result<PbdwEstimate> {
    pbdw_online_sized(model, y, model.n_background(), xi)
}

/// Online solve with the first `y.len()` sensors and the first `n` background modes.
pub fn pbdw_online_sized(model: &PbdwModel, y: &[f64], n: usize, xi: f64) -> Result<PbdwEstimate> {
    let m = y.len();
    if m == 0 || m > model.n_sensors() {
        return Err(Error::SizeMismatch {
            expected: model.n_sensors(),
            got: m,
        });
    }
    if n == 0 || n > model.n_background() {
        return Err(Error::SizeMismatch {
            expected: model.n_background(),
            got: n,
        });
    }
    if !(xi >= 0.0) || !xi.is_finite() {
        return Err(Error::InvalidInput(format!("ξ must be non-negative, got {xi}")));
    }
    let (theta, alpha) = solve_saddle(model, y, n, xi)?;
    let mesh = model.background[0].mesh();
    let mut field = linear_combination(mesh, &alpha, &model.background[..n])?;
    for (t, g) in theta.iter().zip(&model.update) {
        field.axpy(*t, g)?;
    }
    Ok(PbdwEstimate { alpha, theta, field })
}

/// Block elimination `θ = S⁻¹(y − Kα)`, `(KᵀS⁻¹K)α = KᵀS⁻¹y` with `S = A + ξmI`.
fn solve_saddle(model: &PbdwModel, y: &[f64], n: usize, xi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = y.len();
    let singular = || Error::SingularSaddle(model.saddle_matrix(m, n, xi).svd(false, false).singular_values.min());
    let mut s = model.a.view((0, 0), (m, m)).into_owned();
    for i in 0..m {
        s[(i, i)] += xi * m as f64;
    }
    let s_diag = s.diagonal().amax();
    let chol = s.cholesky().ok_or_else(singular)?;
    let l = chol.l();
    if l.diagonal().iter().any(|d| d * d <= SADDLE_TOL * s_diag) {
        return Err(singular());
    }
    let k = model.k.view((0, 0), (m, n)).into_owned();
    let yv = DVector::from_column_slice(y);
    let sk = chol.solve(&k);
    let sy = chol.solve(&yv);
    let schur = k.transpose() * &sk;
    let eig = SymmetricEigen::new(schur.clone());
    let top = eig.eigenvalues.amax();
    if !(eig.eigenvalues.min() > SADDLE_TOL * top) {
        return Err(singular());
    }
    let alpha = schur
        .cholesky()
        .ok_or_else(singular)?
        .solve(&(k.transpose() * &sy));
    let theta = &sy - &sk * &alpha;
    Ok((theta.iter().copied().collect(), alpha.iter().copied().collect()))
}

/// `13` log-spaced values in `[1e-6, 1e2]`.
pub fn default_xi_grid() -> Vec<f64> {
    (0..13).map(|k| 10f64.powf(-6.0 + 8.0 * k as f64 / 12.0)).collect()
}

/// One validation case: the true state and its (noisy) readings.
#[derive(Debug, Clone)]
pub struct ValidationCase {
    pub truth: ScalarField,
    pub readings: Vec<f64>,
}

/// Mean relative L² error over `cases` for each grid value, using
/// `min(N, M)` background modes for `M` readings.
pub fn xi_error_curve(model: &PbdwModel, cases: &[ValidationCase], grid: &[f64]) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(Error::EmptyValidation);
    }
    grid.iter()
        .map(|&xi| {
            let errs: Vec<f64> = cases
                .par_iter()
                .map(|c| {
                    let n = model.n_background().min(c.readings.len());
                    let est = pbdw_online_sized(model, &c.readings, n, xi)?;
                    Ok(l2_norm(&est.field.sub(&c.truth)?) / l2_norm(&c.truth))
                })
                .collect::<Result<_>>()?;
            Ok(errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect()
}

/// Grid value with the smallest mean validation error; ties go to the smaller ξ.
pub fn tune_xi(model: &PbdwModel, cases: &[ValidationCase], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("ξ grid is empty".into()));
    }
    if grid.iter().any(|&x| !(x > 0.0)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("ξ grid must be positive and sorted".into()));
    }
    let curve = xi_error_curve(model, cases, grid)?;
    let mut best = 0;
    for (k, e) in curve.iter().enumerate() {
        if *e < curve[best] {
            best = k;
        }
    }
    Ok(grid[best])
}

/// Noise amplification `Tr(P⁻¹ Ĩ P⁻ᵀ)` where `Ĩ` selects the measurement block.
pub fn noise_trace(model: &PbdwModel, m: usize, xi: f64) -> Result<f64> {
    let n = model.n_background();
    let p = model.saddle_matrix(m, n, xi);
    let inv = p
        .try_inverse()
        .ok_or_else(|| Error::SingularSaddle(0.0))?;
    Ok(inv.columns(0, m).iter().map(|v| v * v).sum())
}

/// Bias bound `ξ m ‖θ_opt‖ / s_min(P)` for the estimate from readings `y`.
pub fn bias_bound(model: &PbdwModel, y: &[f64], xi: f64) -> Result<f64> {
    let m = y.len();
    let opt = pbdw_online(model, y, 0.0)?;
    let smin = model.saddle_matrix(m, model.n_background(), xi).svd(false, false).singular_values.min();
    let theta: f64 = opt.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
    Ok(xi * m as f64 * theta / smin)
}

/// Distance from `truth` to `Z_N ⊕ (U_m ∩ Z_N^⊥)`.
pub fn best_fit_error(model: &PbdwModel, truth: &ScalarField, m: usize) -> Result<f64> {
    let mut space = orthonormalize(&model.background)?;
    // Update combinations θ with Kᵀθ = 0 have no background component.
    let k = model.k.rows(0, m).into_owned();
    let eig = SymmetricEigen::new(&k * k.transpose());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let null_fields: Vec<ScalarField> = (0..m)
        .filter(|&i| eig.eigenvalues[i] <= 1e-12 * scale)
        .map(|i| linear_combination(truth.mesh(), eig.eigenvectors.column(i).as_slice(), &model.update[..m]))
        .collect::<Result<_>>()?;
    if !null_fields.is_empty() {
        space.extend(orthonormalize(&null_fields)?);
    }
    let mut residual = truth.clone();
    for _ in 0..2 {
        for e in &space {
            let c = inner_product(&residual, e)?;
            residual.axpy(-c, e)?;
        }
    }
    Ok(l2_norm(&residual))
}

/// Ratio `‖u − u*‖ β_{N,m} / best-fit error` for a clean interpolating estimate.
pub fn stability_constant(model: &PbdwModel, truth: &ScalarField, m: usize) -> Result<f64> {
    let y = model.measure(truth, m)?;
    let est = pbdw_online(model, &y, 0.0)?;
    let err = l2_norm(&est.field.sub(truth)?);
    let fit = best_fit_error(model, truth, m)?;
    Ok(if fit == 0.0 { 0.0 } else { err * model.inf_sup_constant(m) / fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, BoundaryTag, BoundaryTags, MeshDescription, StructuredMesh};
    use crate::geim::{geim_greedy_fields, geim_online};
    use crate::reduction::compute_pod_fields;
    use crate::sensing::{build_sensor_library, gaussian_sensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    fn mesh(nx: usize, ny: usize) -> Arc<StructuredMesh> {
        let d = MeshDescription::uniform(nx, ny, 1.0, 1.0, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        Arc::new(build_mesh(&d).unwrap())
    }

    fn random_fields(m: &Arc<StructuredMesh>, count: usize, rng: &mut impl Rng) -> Vec<ScalarField> {
        (0..count)
            .map(|_| {
                let v = (0..m.n_cells()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                ScalarField::new(m.clone(), v).unwrap()
            })
            .collect()
    }

    fn family(m: &Arc<StructuredMesh>, count: usize) -> Vec<ScalarField> {
        let l = m.nx() as f64;
        (0..count)
            .map(|k| {
                let mu = 0.5 + k as f64 / count as f64;
                ScalarField::from_fn(m.clone(), move |x, y| {
                    (-((x - mu * l * 0.6).powi(2) + (y - 0.4 * l).powi(2)) / (mu * 20.0)).exp()
                        + mu * (x / l).powi(2)
                        + 0.3 * (mu * y / l * 3.0).sin()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_and_orthogonal_spaces() {
        let m = mesh(10, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = random_fields(&m, 3, &mut rng);
        let mixed: Vec<ScalarField> = (0..3)
            .map(|i| linear_combination(&m, &[1.0, i as f64, (i * i) as f64 - 1.0], &z).unwrap())
            .collect();
        assert!((inf_sup(&z, &mixed).unwrap() - 1.0).abs() < 1e-12);
        let left = ScalarField::from_fn(m.clone(), |x, _| if x < 5.0 { 1.0 } else { 0.0 }).unwrap();
        let right = ScalarField::from_fn(m.clone(), |x, _| if x > 5.0 { 1.0 } else { 0.0 }).unwrap();
        assert!(inf_sup(&[left.clone()], &[right]).unwrap().abs() < 1e-15);
        assert!(matches!(inf_sup(&[left.clone(), left.scaled(2.0)], &z), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn inf_sup_matches_random_search() {
        let m = mesh(10, 10);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let z = random_fields(&m, 3, &mut rng);
        let u = random_fields(&m, 5, &mut rng);
        let beta = inf_sup(&z, &u).unwrap();
        // Independent oracle: projections via normal equations of the raw bases.
        let gram_u = cross_gram(&u, &u).unwrap();
        let chol = gram_u.cholesky().unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..100_000 {
            let a: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let w = linear_combination(&m, &a, &z).unwrap();
            let b = DVector::from_iterator(5, u.iter().map(|ui| inner_product(&w, ui).unwrap()));
            let proj2 = b.dot(&chol.solve(&b));
            let ratio = (proj2 / inner_product(&w, &w).unwrap()).sqrt();
            best = best.min(ratio);
        }
        assert!(best >= beta - 1e-12);
        assert!(best - beta < 1e-3, "{best} vs {beta}");
    }

    #[test]
    fn first_sensor_at_mode_peak() {
        let m = mesh(20, 20);
        let bump = ScalarField::from_fn(m.clone(), |x, y| (-((x - 7.5).powi(2) + (y - 12.5).powi(2)) / 4.0).exp()).unwrap();
        let mode = bump.scaled(1.0 / l2_norm(&bump));
        let lib = build_sensor_library(&m, 5, 1.0).unwrap();
        let model = sgreedy_fields(&[mode], &lib, 1).unwrap();
        assert_eq!(model.sensors[0].center(), (7.5, 12.5));
    }

    #[test]
    fn nested_spaces_give_unit_inf_sup() {
        let m = mesh(12, 12);
        let lib = build_sensor_library(&m, 3, 1.0).unwrap();
        let z = vec![riesz_representation(&lib[0]), riesz_representation(&lib[5])];
        let model = PbdwModel::from_parts(z, vec![lib[0].clone(), lib[5].clone(), lib[7].clone()]).unwrap();
        assert!((model.inf_sup_constant(2) - 1.0).abs() < 1e-10);
        assert!((model.inf_sup_constant(3) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sgreedy_history_is_monotone_and_matches_dense_oracle() {
        let m = mesh(24, 24);
        let set = family(&m, 30);
        let pod = compute_pod_fields(&set, 5).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 12).unwrap();
        assert_eq!(model.n_sensors(), 12);
        let mut ids = model.sensor_indices.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        for n in 0..5 {
            for mm in 1..12 {
                assert!(model.inf_sup[mm][n] >= model.inf_sup[mm - 1][n] - 1e-12);
            }
        }
        for mm in 1..=12 {
            for n in 1..=5.min(mm) {
                let oracle = inf_sup(&pod.modes()[..n], &model.update[..mm]).unwrap();
                assert!((oracle - model.inf_sup[mm - 1][n - 1]).abs() < 1e-8);
                assert!(oracle <= 1.0 + 1e-10);
            }
        }
        let a = &model.a;
        assert!((a - a.transpose()).abs().max() < 1e-14);
        assert!(a.clone().cholesky().is_some());
    }

    #[test]
    fn exact_background_recovery() {
        let m = mesh(20, 20);
        let set = family(&m, 20);
        let pod = compute_pod_fields(&set, 4).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 8).unwrap();
        let truth = linear_combination(&m, &[1.0, -0.5, 0.25, 2.0], pod.modes()).unwrap();
        let est = pbdw_online(&model, &model.measure(&truth, 8).unwrap(), 0.0).unwrap();
        assert!(l2_norm(&est.field.sub(&truth).unwrap()) < 1e-9 * l2_norm(&truth));
        assert!(est.theta.iter().all(|t| t.abs() < 1e-9));
    }

    #[test]
    fn constraint_and_interpolation() {
        let m = mesh(20, 20);
        let set = family(&m, 20);
        let pod = compute_pod_fields(&set, 3).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 9).unwrap();
        let truth = ScalarField::from_fn(m.clone(), |x, y| (x / 4.0).cos() * y).unwrap();
        let y = model.measure(&truth, 9).unwrap();
        for xi in [0.0, 1e-3, 1.0] {
            let est = pbdw_online(&model, &y, xi).unwrap();
            let kt = model.k.transpose() * DVector::from_column_slice(&est.theta);
            assert!(kt.amax() < 1e-9 * (1.0 + DVector::from_column_slice(&est.theta).amax()));
        }
        let est = pbdw_online(&model, &y, 0.0).unwrap();
        let readings = model.measure(&est.field, 9).unwrap();
        for (r, v) in readings.iter().zip(&y) {
            assert!((r - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn large_xi_is_background_least_squares() {
        let m = mesh(20, 20);
        let set = family(&m, 20);
        let pod = compute_pod_fields(&set, 3).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 9).unwrap();
        let truth = ScalarField::from_fn(m.clone(), |x, y| 1.0 + (x / 4.0).cos() * y).unwrap();
        let y = model.measure(&truth, 9).unwrap();
        let est = pbdw_online(&model, &y, 1e12).unwrap();
        let kmat = model.k.clone();
        let oracle = kmat.svd(true, true).solve(&DVector::from_column_slice(&y), 1e-15).unwrap();
        for (a, o) in est.alpha.iter().zip(oracle.iter()) {
            assert!((a - o).abs() < 1e-6 * (1.0 + o.abs()), "{a} vs {o}");
        }
        let y_norm = DVector::from_column_slice(&y).amax();
        assert!(est.theta.iter().all(|t| t.abs() < 1e-9 * y_norm));
    }

    #[test]
    fn zero_xi_with_magic_functions_is_geim() {
        let m = mesh(20, 20);
        let set = family(&m, 25);
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let geim = geim_greedy_fields(&set, &lib, 6, 0.0).unwrap();
        let model = PbdwModel::from_parts(geim.magic_functions.clone(), geim.magic_sensors.clone()).unwrap();
        let truth = ScalarField::from_fn(m.clone(), |x, y| (x * y / 50.0).sin() + 2.0).unwrap();
        let y = geim.measure(&truth, 6).unwrap();
        let (_, g) = geim_online(&geim, &y, 6).unwrap();
        let p = pbdw_online(&model, &y, 0.0).unwrap();
        assert!(l2_norm(&g.sub(&p.field).unwrap()) < 1e-8 * l2_norm(&g));
    }

    #[test]
    fn xi_tuning() {
        let m = mesh(20, 20);
        let set = family(&m, 20);
        let pod = compute_pod_fields(&set, 4).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 12).unwrap();
        let cases: Vec<ValidationCase> = (0..5)
            .map(|k| {
                let truth = set[3 * k + 1].clone();
                let mut truth = truth;
                truth.axpy(0.05, &ScalarField::from_fn(m.clone(), |x, _| (x / 3.0).sin()).unwrap()).unwrap();
                let readings = model.measure(&truth, 12).unwrap();
                ValidationCase { truth, readings }
            })
            .collect();
        let grid = default_xi_grid();
        assert_eq!(grid.len(), 13);
        assert!((grid[0] - 1e-6).abs() < 1e-18 && (grid[12] - 1e2).abs() < 1e-10);
        let curve = xi_error_curve(&model, &cases, &grid).unwrap();
        assert!(curve[0] <= curve[12]);
        let best = tune_xi(&model, &cases, &grid).unwrap();
        let argmin = curve.iter().enumerate().fold(0, |b, (k, e)| if *e < curve[b] { k } else { b });
        assert_eq!(best, grid[argmin]);
        assert_eq!(tune_xi(&model, &cases, &[0.5]).unwrap(), 0.5);
        assert!(matches!(tune_xi(&model, &[], &grid), Err(Error::EmptyValidation)));
    }

    #[test]
    fn diagnostics() {
        let m = mesh(20, 20);
        let set = family(&m, 20);
        let pod = compute_pod_fields(&set, 3).unwrap();
        let lib = build_sensor_library(&m, 2, 1.0).unwrap();
        let model = sgreedy(&pod, &lib, 8).unwrap();
        let truth = set[5].clone();
        let y = model.measure(&truth, 8).unwrap();
        assert_eq!(bias_bound(&model, &y, 0.0).unwrap(), 0.0);
        assert!(bias_bound(&model, &y, 1.0).unwrap() >= 0.0);
        let t1 = noise_trace(&model, 8, 1e-2).unwrap();
        let t2 = noise_trace(&model, 8, 1.0).unwrap();
        assert!(t1 > 0.0 && t2 < t1);
        let c = stability_constant(&model, &truth, 8).unwrap();
        assert!(c.is_finite() && c >= 0.0);
    }

    #[test]
    fn singular_saddle_is_reported() {
        let m = mesh(10, 10);
        let s = gaussian_sensor(&m, (5.0, 5.0), 1.0).unwrap();
        let z = vec![
            ScalarField::from_fn(m.clone(), |x, _| x).unwrap(),
            ScalarField::from_fn(m.clone(), |_, y| y).unwrap(),
        ];
        let model = PbdwModel::from_parts(z, vec![s]).unwrap();
        assert!(matches!(pbdw_online(&model, &[1.0], 0.0), Err(Error::SingularSaddle(_))));
    }
}
