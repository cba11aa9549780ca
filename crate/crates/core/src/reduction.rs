//! Snapshot collections, POD bases and POD with interpolation.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fields::{inner_product, linear_combination, ScalarField, StructuredMesh};

/// Relative eigenvalue floor below which POD modes are numerical noise.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Named fields sampled over a list of parameter points.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    mesh: Arc<StructuredMesh>,
    parameter_names: Vec<String>,
    parameters: Vec<Vec<f64>>,
    fields: BTreeMap<String, Vec<ScalarField>>,
}

impl SnapshotSet {
    pub fn new(mesh: Arc<StructuredMesh>, parameter_names: Vec<String>) -> Self {
        Self {
            mesh,
            parameter_names,
            parameters: Vec::new(),
            fields: BTreeMap::new(),
        }
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        &self.mesh
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.parameter_names
    }

    pub fn parameters(&self) -> &[Vec<f64>] {
        &self.parameters
    }

    pub fn len(&self) -> usize {
        self.parameters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.keys().cloned().collect()
    }

    /// Appends one snapshot; every snapshot must carry the same field names.
    pub fn push(&mut self, parameters: Vec<f64>, fields: Vec<(String, ScalarField)>) -> Result<()> {
        if parameters.len() != self.parameter_names.len() {
            return Err(Error::SizeMismatch {
                expected: self.parameter_names.len(),
                got: parameters.len(),
            });
        }
        if !self.is_empty() {
            if fields.len() != self.fields.len() {
                return Err(Error::InvalidInput("snapshot field names differ from the set".into()));
            }
            for (name, _) in &fields {
                if !self.fields.contains_key(name) {
                    return Err(Error::MissingField(name.clone()));
                }
            }
        }
        for (_, f) in &fields {
            if !f.mesh().same_geometry(&self.mesh) {
                return Err(Error::MeshMismatch);
            }
        }
        for (name, f) in fields {
            self.fields.entry(name).or_default().push(f);
        }
        self.parameters.push(parameters);
        Ok(())
    }

    pub fn field(&self, name: &str) -> Result<&[ScalarField]> {
        self.fields
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn snapshot(&self, index: usize, name: &str) -> Result<&ScalarField> {
        self.field(name)?
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("snapshot index {index} out of range")))
    }

    /// Snapshots whose indices are listed, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<SnapshotSet> {
        let mut out = SnapshotSet::new(self.mesh.clone(), self.parameter_names.clone());
        for &i in indices {
            let p = self
                .parameters
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("snapshot index {i} out of range")))?;
            let fields = self.fields.iter().map(|(k, v)| (k.clone(), v[i].clone())).collect();
            out.push(p.clone(), fields)?;
        }
        Ok(out)
    }

    /// Indices of snapshots whose parameters satisfy `keep`.
    pub fn select(&self, keep: impl Fn(&[f64]) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(&self.parameters[i])).collect()
    }

    pub fn append(&mut self, other: &SnapshotSet) -> Result<()> {
        if other.parameter_names != self.parameter_names {
            return Err(Error::InvalidInput("parameter names differ".into()));
        }
        for i in 0..other.len() {
            let fields = other.fields.iter().map(|(k, v)| (k.clone(), v[i].clone())).collect();
            self.push(other.parameters[i].clone(), fields)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    modes: Vec<ScalarField>,
    eigenvalues: Vec<f64>,
}

impl PodBasis {
    /// Builds a basis from stored modes; they are trusted to be orthonormal.
    pub fn from_parts(modes: Vec<ScalarField>, eigenvalues: Vec<f64>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::EmptySet);
        }
        if eigenvalues.len() < modes.len() {
            return Err(Error::SizeMismatch {
                expected: modes.len(),
                got: eigenvalues.len(),
            });
        }
        Ok(Self { modes, eigenvalues })
    }

    pub fn modes(&self) -> &[ScalarField] {
        &self.modes
    }

    /// All correlation eigenvalues, descending and clipped at zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        self.modes[0].mesh()
    }

    /// The leading `n` modes.
    pub fn truncated(&self, n: usize) -> Result<PodBasis> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidInput(format!("cannot keep {n} of {} modes", self.len())));
        }
        Ok(PodBasis {
            modes: self.modes[..n].to_vec(),
            eigenvalues: self.eigenvalues.clone(),
        })
    }

    /// Sum of the eigenvalues beyond the retained modes.
    pub fn discarded_energy(&self) -> f64 {
        self.eigenvalues[self.modes.len()..].iter().sum()
    }
}

/// Correlation-matrix eigenpairs, descending, eigenvalues clipped at zero and
/// eigenvectors signed so their first nonzero entry is positive. The pairs
/// come from the singular values and right singular vectors of the weighted
/// snapshot matrix, whose Gram matrix is the correlation matrix; small
/// eigenvalues then keep their relative accuracy.
fn correlation_eigen(fields: &[ScalarField]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let ns = fields.len();
    let mesh = fields[0].mesh();
    let weight = mesh.cell_area().sqrt();
    let nc = mesh.n_cells();
    let mut x = DMatrix::<f64>::zeros(nc, ns);
    for (j, f) in fields.iter().enumerate() {
        if !f.mesh().same_geometry(mesh) {
            return Err(Error::MeshMismatch);
        }
        for (i, v) in f.values().iter().enumerate() {
            x[(i, j)] = v * weight;
        }
    }
    let core = if nc > ns { x.qr().r() } else { x };
    let svd = core.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::RankDeficient("singular value decomposition failed".into()))?;
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k].powi(2)).collect();
    values.resize(ns, 0.0);
    let mut vectors = DMatrix::<f64>::zeros(ns, r);
    for (col, &k) in order.iter().enumerate() {
        let mut v = v_t.row(k).transpose();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-14) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(col, &v);
    }
    Ok((values, vectors))
}

/// POD of a list of fields on one mesh, keeping `n` modes.
pub fn compute_pod_fields(fields: &[ScalarField], n: usize) -> Result<PodBasis> {
    pod_with_rank_policy(fields, n, false)
}

/// Like [`compute_pod_fields`], but keeps at most the numerical rank of the
/// snapshots instead of failing when fewer than `n` modes are available.
pub fn compute_pod_upto(fields: &[ScalarField], n: usize) -> Result<PodBasis> {
    pod_with_rank_policy(fields, n, true)
}

fn pod_with_rank_policy(fields: &[ScalarField], n: usize, cap: bool) -> Result<PodBasis> {
    if fields.is_empty() {
        return Err(Error::EmptySet);
    }
    if n == 0 || n > fields.len() {
        return Err(Error::InvalidInput(format!(
            "mode count {n} must lie in [1, {}]",
            fields.len()
        )));
    }
    let mesh = fields[0].mesh().clone();
    if fields.iter().any(|f| !f.mesh().same_geometry(&mesh)) {
        return Err(Error::MeshMismatch);
    }
    let (values, vectors) = correlation_eigen(fields)?;
    let floor = RANK_TOLERANCE * values[0];
    let rank = values.iter().take_while(|v| **v > floor && **v > 0.0).count();
    let n = if cap && rank < n {
        log::warn!("snapshots have numerical rank {rank}; keeping {rank} of {n} requested modes");
        rank.max(1)
    } else {
        n
    };
    if rank < n {
        return Err(Error::RankDeficient(format!(
            "{rank} eigenvalues above {RANK_TOLERANCE:e} of the largest, {n} requested"
        )));
    }
    let mut modes = Vec::with_capacity(n);
    for k in 0..n {
        let scale = 1.0 / values[k].sqrt();
        let coeffs: Vec<f64> = vectors.column(k).iter().map(|e| e * scale).collect();
        modes.push(linear_combination(&mesh, &coeffs, fields)?);
    }
    orthonormalise(&mut modes)?;
    Ok(PodBasis {
        modes,
        eigenvalues: values,
    })
}

/// Two passes of modified Gram-Schmidt to remove round-off drift.
fn orthonormalise(modes: &mut [ScalarField]) -> Result<()> {
    for k in 0..modes.len() {
        for _ in 0..2 {
            for j in 0..k {
                let proj = inner_product(&modes[k], &modes[j])?;
                let (done, rest) = modes.split_at_mut(k);
                rest[0].axpy(-proj, &done[j])?;
            }
        }
        let norm = inner_product(&modes[k], &modes[k])?.sqrt();
        if !(norm > 0.0) {
            return Err(Error::RankDeficient("mode collapsed during orthonormalisation".into()));
        }
        modes[k] = modes[k].scaled(1.0 / norm);
    }
    Ok(())
}

pub fn compute_pod(snapshots: &SnapshotSet, field: &str, n: usize) -> Result<PodBasis> {
    compute_pod_fields(snapshots.field(field)?, n)
}

/// Smallest mode count retaining a fraction `1 - tol` of the energy, capped
/// at the numerical rank.
pub fn modes_for_energy(eigenvalues: &[f64], tol: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return 0;
    }
    let floor = RANK_TOLERANCE * eigenvalues[0];
    let rank = eigenvalues.iter().take_while(|v| **v > floor).count();
    let mut acc = 0.0;
    for (k, v) in eigenvalues.iter().enumerate().take(rank) {
        acc += v;
        if acc >= (1.0 - tol) * total {
            return k + 1;
        }
    }
    rank
}

/// POD keeping enough modes for a relative energy loss below `tol`.
pub fn compute_pod_energy(fields: &[ScalarField], tol: f64) -> Result<PodBasis> {
    if fields.is_empty() {
        return Err(Error::EmptySet);
    }
    let eig = correlation_eigen(fields)?.0;
    let n = modes_for_energy(&eig, tol);
    if n == 0 {
        return Err(Error::RankDeficient("all snapshots vanish".into()));
    }
    compute_pod_fields(fields, n)
}

pub fn pod_project(basis: &PodBasis, u: &ScalarField) -> Result<Vec<f64>> {
    basis.modes.iter().map(|z| inner_product(u, z)).collect()
}

pub fn pod_reconstruct(basis: &PodBasis, coeffs: &[f64]) -> Result<ScalarField> {
    if coeffs.len() > basis.len() {
        return Err(Error::SizeMismatch {
            expected: basis.len(),
            got: coeffs.len(),
        });
    }
    linear_combination(basis.mesh(), coeffs, &basis.modes[..coeffs.len()])
}

/// Tensor grid of parameter values, first axis varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    axes: Vec<Vec<f64>>,
}

impl TensorGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(Error::InvalidInput("tensor grid needs nonempty axes".into()));
        }
        for a in &axes {
            if a.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidInput("grid axes must be strictly increasing".into()));
            }
        }
        Ok(Self { axes })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, a)| acc * a.len() + i)
    }

    /// Interpolation stencil: `(node, weight)` pairs and whether `mu` had to
    /// be clamped into the grid hull.
    pub fn stencil(&self, mu: &[f64]) -> Result<(Vec<(usize, f64)>, bool)> {
        if mu.len() != self.axes.len() {
            return Err(Error::SizeMismatch {
                expected: self.axes.len(),
                got: mu.len(),
            });
        }
        let mut clamped = false;
        let mut per_axis = Vec::with_capacity(mu.len());
        for (x, a) in mu.iter().zip(&self.axes) {
            let (lo, hi) = (a[0], a[a.len() - 1]);
            let span = (hi - lo).abs().max(1.0);
            let tol = 1e-12 * span;
            if !x.is_finite() {
                return Err(Error::InvalidInput("parameter is not finite".into()));
            }
            if *x < lo - tol || *x > hi + tol {
                clamped = true;
            }
            let x = x.clamp(lo, hi);
            if a.len() == 1 {
                per_axis.push(vec![(0, 1.0)]);
                continue;
            }
            let k = a.partition_point(|v| *v <= x).clamp(1, a.len() - 1);
            let w = (x - a[k - 1]) / (a[k] - a[k - 1]);
            per_axis.push(vec![(k - 1, 1.0 - w), (k, w)]);
        }
        let mut out = vec![(Vec::new(), 1.0)];
        for choices in per_axis {
            let mut next = Vec::with_capacity(out.len() * choices.len());
            for (idx, w) in &out {
                for (i, wi) in &choices {
                    let mut m: Vec<usize> = idx.clone();
                    m.push(*i);
                    next.push((m, w * wi));
                }
            }
            out = next;
        }
        Ok((
            out.into_iter()
                .filter(|(_, w)| *w != 0.0)
                .map(|(m, w)| (self.flat_index(&m), w))
                .collect(),
            clamped,
        ))
    }
}

/// POD coefficients tabulated on a tensor grid of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PodiModel {
    pub basis: PodBasis,
    pub grid: TensorGrid,
    /// Coefficient vector per grid node, in `TensorGrid::flat_index` order.
    pub coefficients: Vec<Vec<f64>>,
}

/// Recovers the tensor grid spanned by a list of parameter points, returning
/// the grid and the snapshot index of every node.
pub fn infer_tensor_grid(points: &[Vec<f64>]) -> Result<(TensorGrid, Vec<usize>)> {
    let first = points.first().ok_or(Error::EmptySet)?;
    let dim = first.len();
    let mut axes = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut v: Vec<f64> = points.iter().map(|p| p[d]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        axes.push(v);
    }
    let grid = TensorGrid::new(axes)?;
    if grid.len() != points.len() {
        return Err(Error::InvalidInput("parameter points do not form a tensor grid".into()));
    }
    let mut node_of = vec![usize::MAX; grid.len()];
    for (s, p) in points.iter().enumerate() {
        let multi: Vec<usize> = p
            .iter()
            .zip(grid.axes())
            .map(|(x, a)| a.partition_point(|v| v < x))
            .collect();
        let flat = grid.flat_index(&multi);
        if node_of[flat] != usize::MAX {
            return Err(Error::InvalidInput("repeated parameter point".into()));
        }
        node_of[flat] = s;
    }
    Ok((grid, node_of))
}

pub fn podi_train_fields(parameters: &[Vec<f64>], fields: &[ScalarField], basis: PodBasis) -> Result<PodiModel> {
    if parameters.len() != fields.len() {
        return Err(Error::SizeMismatch {
            expected: parameters.len(),
            got: fields.len(),
        });
    }
    let (grid, node_of) = infer_tensor_grid(parameters)?;
    let coefficients = node_of
        .iter()
        .map(|&s| pod_project(&basis, &fields[s]))
        .collect::<Result<_>>()?;
    Ok(PodiModel {
        basis,
        grid,
        coefficients,
    })
}

pub fn podi_train(snapshots: &SnapshotSet, field: &str, n: usize) -> Result<PodiModel> {
    let fields = snapshots.field(field)?;
    let basis = compute_pod_fields(fields, n)?;
    podi_train_fields(snapshots.parameters(), fields, basis)
}

impl PodiModel {
    pub fn coefficients_at(&self, mu: &[f64]) -> Result<(Vec<f64>, bool)> {
        let (stencil, clamped) = self.grid.stencil(mu)?;
        let mut out = vec![0.0; self.basis.len()];
        for (node, w) in stencil {
            for (o, c) in out.iter_mut().zip(&self.coefficients[node]) {
                *o += w * c;
            }
        }
        Ok((out, clamped))
    }
}

/// Surrogate field at `mu`; points outside the grid are rejected.
pub fn podi_eval(model: &PodiModel, mu: &[f64]) -> Result<ScalarField> {
    let (coeffs, clamped) = model.coefficients_at(mu)?;
    if clamped {
        return Err(Error::ExtrapolationRequest);
    }
    pod_reconstruct(&model.basis, &coeffs)
}

/// Surrogate field at `mu` clamped into the grid hull; the flag reports
/// whether clamping happened.
pub fn podi_eval_clamped(model: &PodiModel, mu: &[f64]) -> Result<(ScalarField, bool)> {
    let (coeffs, clamped) = model.coefficients_at(mu)?;
    if clamped {
        log::warn!("POD-I evaluation at {mu:?} clamped into the training grid");
    }
    Ok((pod_reconstruct(&model.basis, &coeffs)?, clamped))
}
