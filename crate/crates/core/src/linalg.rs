//! Sparse kernels for the structured-grid solvers: a symmetric five-point
//! operator, its banded Cholesky factorisation, and right-preconditioned
//! restarted GMRES for the coupled group systems.

use crate::error::{Error, Result};
use crate::fields::{Side, StructuredMesh};

/// Symmetric five-point operator in per-unit-volume form.
///
/// Off-diagonal couplings are stored as nonnegative weights:
/// `A[c, c+1] = A[c+1, c] = -east[c]` and `A[c, c+nx] = A[c+nx, c] = -north[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FivePointOperator {
    nx: usize,
    ny: usize,
    diag: Vec<f64>,
    east: Vec<f64>,
    north: Vec<f64>,
}

impl FivePointOperator {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        let n = nx * ny;
        Self {
            nx,
            ny,
            diag: vec![0.0; n],
            east: vec![0.0; n],
            north: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn east(&self) -> &[f64] {
        &self.east
    }

    pub fn north(&self) -> &[f64] {
        &self.north
    }

    pub fn add_diagonal(&mut self, values: &[f64]) {
        for (d, v) in self.diag.iter_mut().zip(values) {
            *d += v;
        }
    }

    pub fn add_constant_diagonal(&mut self, value: f64) {
        for d in &mut self.diag {
            *d += value;
        }
    }

    /// Errors when any diagonal entry is not strictly positive.
    pub fn check_diagonal(&self) -> Result<()> {
        match self.diag.iter().position(|&d| !(d > 0.0)) {
            Some(cell) => Err(Error::NegativeCoefficient {
                cell,
                value: self.diag[cell],
            }),
            None => Ok(()),
        }
    }

    /// `y = A x`
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (nx, n) = (self.nx, self.n());
        for c in 0..n {
            let mut s = self.diag[c] * x[c];
            if c % nx + 1 < nx {
                s -= self.east[c] * x[c + 1];
            }
            if c % nx > 0 {
                s -= self.east[c - 1] * x[c - 1];
            }
            if c + nx < n {
                s -= self.north[c] * x[c + nx];
            }
            if c >= nx {
                s -= self.north[c - nx] * x[c - nx];
            }
            y[c] = s;
        }
    }

    /// Dense copy, for tests and small problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let mut a = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            a[(c, c)] = self.diag[c];
            if c % self.nx + 1 < self.nx {
                a[(c, c + 1)] = -self.east[c];
                a[(c + 1, c)] = -self.east[c];
            }
            if c + self.nx < n {
                a[(c, c + self.nx)] = -self.north[c];
                a[(c + self.nx, c)] = -self.north[c];
            }
        }
        a
    }
}

/// Harmonic mean used for face coefficients; zero if either side is zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Cell-centred discretisation of `-∇·(κ∇u)` divided by the cell area.
///
/// Interior faces use the harmonic mean of the adjacent coefficients. On a
/// side flagged in `dirichlet` the boundary value sits on the face, which
/// adds `2κ/h²` to the diagonal of the adjacent cell (ghost value
/// `2u_b - u_P`); other sides carry no flux.
pub fn assemble_diffusion(mesh: &StructuredMesh, coeff: &[f64], dirichlet: [bool; 4]) -> FivePointOperator {
    let (nx, ny) = (mesh.nx(), mesh.ny());
    let (hx2, hy2) = (mesh.dx() * mesh.dx(), mesh.dy() * mesh.dy());
    let mut op = FivePointOperator::zeros(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            if i + 1 < nx {
                let w = harmonic_mean(coeff[c], coeff[c + 1]) / hx2;
                op.east[c] = w;
                op.diag[c] += w;
                op.diag[c + 1] += w;
            }
            if j + 1 < ny {
                let w = harmonic_mean(coeff[c], coeff[c + nx]) / hy2;
                op.north[c] = w;
                op.diag[c] += w;
                op.diag[c + nx] += w;
            }
        }
    }
    for (_, weights) in boundary_weights(mesh, coeff, dirichlet) {
        for (c, w) in weights {
            op.diag[c] += w;
        }
    }
    op
}

/// Per-side lists of `(cell, 2κ/h²)` for the Dirichlet sides.
pub fn boundary_weights(
    mesh: &StructuredMesh,
    coeff: &[f64],
    dirichlet: [bool; 4],
) -> Vec<(Side, Vec<(usize, f64)>)> {
    let (nx, ny) = (mesh.nx(), mesh.ny());
    let (hx2, hy2) = (mesh.dx() * mesh.dx(), mesh.dy() * mesh.dy());
    let mut out = Vec::new();
    for side in Side::ALL {
        if !dirichlet[side.index()] {
            continue;
        }
        let cells: Vec<usize> = match side {
            Side::West => (0..ny).map(|j| j * nx).collect(),
            Side::East => (0..ny).map(|j| j * nx + nx - 1).collect(),
            Side::South => (0..nx).collect(),
            Side::North => (0..nx).map(|i| (ny - 1) * nx + i).collect(),
        };
        let h2 = match side {
            Side::West | Side::East => hx2,
            Side::South | Side::North => hy2,
        };
        out.push((side, cells.into_iter().map(|c| (c, 2.0 * coeff[c] / h2)).collect()));
    }
    out
}

/// Cholesky factor of a symmetric positive-definite five-point operator,
/// stored as a band of half-width `nx`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(op: &FivePointOperator) -> Result<Self> {
        let n = op.n();
        let bw = op.nx.min(n.saturating_sub(1));
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        // Lower-triangular entries of A in band storage.
        for c in 0..n {
            l[c * w + bw] = op.diag[c];
            if c % op.nx > 0 && bw >= 1 {
                l[c * w + bw - 1] = -op.east[c - 1];
            }
            if c >= op.nx && op.nx <= bw {
                l[c * w + bw - op.nx] = -op.north[c - op.nx];
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                let mut s = l[ri + j];
                if klo < j {
                    let a = &l[ri + klo..ri + j];
                    let b = &l[rj + klo..rj + j];
                    s -= a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                }
                if j == i {
                    if !(s > 1e-13 * op.diag[i].abs()) {
                        return Err(Error::SingularSystem(format!(
                            "non-positive pivot {s:e} at row {i} in band Cholesky"
                        )));
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            let s: f64 = self.l[ri + lo..ri + i].iter().zip(&b[lo..i]).map(|(x, y)| x * y).sum();
            b[i] = (b[i] - s) / self.l[ri + i];
        }
        for i in (0..n).rev() {
            let ri = i * w + bw - i;
            b[i] /= self.l[ri + i];
            let bi = b[i];
            let lo = i.saturating_sub(bw);
            for (k, lik) in (lo..i).zip(&self.l[ri + lo..ri + i]) {
                b[k] -= lik * bi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    pub rel_tol: f64,
    /// Residual accepted once restarts stop reducing it (round-off floor).
    pub stall_tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            stall_tol: 1e-10,
            restart: 60,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresReport {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES with right preconditioning: solves `A x = b` starting
/// from `x`, stopping when `‖b - A x‖ ≤ rel_tol ‖b‖`, or at a residual below
/// `stall_tol ‖b‖` that a full restart cycle fails to halve.
pub fn gmres(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    opts: GmresOptions,
) -> Result<GmresReport> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(GmresReport {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let m = opts.restart.max(1);
    let mut r = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut iterations = 0;
    let mut previous = f64::INFINITY;
    loop {
        apply(x, &mut tmp);
        for i in 0..n {
            r[i] = b[i] - tmp[i];
        }
        let beta = norm(&r);
        let mut rel = beta / bnorm;
        let stalled = rel > 0.5 * previous && rel <= opts.stall_tol;
        previous = rel;
        if rel <= opts.rel_tol || stalled {
            return Ok(GmresReport {
                iterations,
                rel_residual: rel,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                change: rel,
            });
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|ri| ri / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            precond(&v[k], &mut tmp);
            apply(&tmp, &mut w);
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(&w, vi);
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            iterations += 1;
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= opts.rel_tol || hn == 0.0 || iterations >= opts.max_iter {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        if k_used == 0 {
            return Err(Error::SingularSystem("GMRES breakdown".into()));
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = ((i + 1)..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        let mut z = vec![0.0; n];
        for (yi, vi) in y.iter().zip(&v) {
            for (zj, vj) in z.iter_mut().zip(vi) {
                *zj += yi * vj;
            }
        }
        precond(&z, &mut tmp);
        for (xi, ti) in x.iter_mut().zip(&tmp) {
            *xi += ti;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_mesh, BoundaryTag, BoundaryTags, MeshDescription};

    fn mesh(nx: usize, ny: usize, tag: BoundaryTag) -> StructuredMesh {
        build_mesh(&MeshDescription::uniform(nx, ny, 1.0, 1.0, 1, BoundaryTags::uniform(tag))).unwrap()
    }

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let m = mesh(7, 5, BoundaryTag::Vacuum);
        let coeff: Vec<f64> = (0..m.n_cells()).map(|c| 1.0 + (c % 3) as f64).collect();
        let mut op = assemble_diffusion(&m, &coeff, [true, false, true, false]);
        op.add_constant_diagonal(0.05);
        let b: Vec<f64> = (0..m.n_cells()).map(|c| (c as f64 * 0.37).sin()).collect();
        let x = BandCholesky::factor(&op).unwrap().solve(&b);
        let dense = op.to_dense();
        let xd = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for (a, b) in x.iter().zip(xd.iter()) {
            assert!((a - b).abs() < 1e-11 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn apply_matches_dense() {
        let m = mesh(4, 6, BoundaryTag::Symmetry);
        let coeff = vec![2.0; m.n_cells()];
        let op = assemble_diffusion(&m, &coeff, [false; 4]);
        let x: Vec<f64> = (0..m.n_cells()).map(|c| c as f64).collect();
        let mut y = vec![0.0; x.len()];
        op.apply(&x, &mut y);
        let yd = op.to_dense() * nalgebra::DVector::from_vec(x);
        for (a, b) in y.iter().zip(yd.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_operator_detected() {
        let m = mesh(3, 3, BoundaryTag::Symmetry);
        let op = assemble_diffusion(&m, &[1.0; 9], [false; 4]);
        assert!(BandCholesky::factor(&op).is_err());
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let n = 30;
        let a = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                4.0
            } else if j + 1 == i {
                -1.5
            } else if i + 2 == j {
                -0.7
            } else {
                0.0
            }
        });
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut x = vec![0.0; n];
        let apply = |v: &[f64], out: &mut [f64]| {
            let r = &a * nalgebra::DVector::from_column_slice(v);
            out.copy_from_slice(r.as_slice());
        };
        let precond = |v: &[f64], out: &mut [f64]| {
            for i in 0..v.len() {
                out[i] = v[i] / 4.0;
            }
        };
        let opts = GmresOptions {
            rel_tol: 1e-13,
            stall_tol: 0.0,
            restart: 8,
            max_iter: 500,
        };
        gmres(apply, precond, &b, &mut x, opts).unwrap();
        let xd = a.clone().lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for (u, v) in x.iter().zip(xd.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}
