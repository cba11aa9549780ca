//! Structured Cartesian meshes, cell-valued scalar fields and the L² geometry
//! (inner products, norms, integrals) every other module builds on.
//!
//! Cells are ordered row-major with `x` fastest: cell `(i, j)` has index
//! `j * nx + i`. Integrals use the midpoint rule on the cell centres.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary condition family attached to one side of the rectangle.
///
/// Neutronics reads `Symmetry` as zero current and anything else as zero
/// flux; the heat solver reads `Symmetry` as adiabatic and anything else as
/// a fixed temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Vacuum,
    Symmetry,
    FixedTemperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    pub fn index(self) -> usize {
        match self {
            Side::West => 0,
            Side::East => 1,
            Side::South => 2,
            Side::North => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryTags {
    pub west: BoundaryTag,
    pub east: BoundaryTag,
    pub south: BoundaryTag,
    pub north: BoundaryTag,
}

impl BoundaryTags {
    pub fn uniform(tag: BoundaryTag) -> Self {
        Self {
            west: tag,
            east: tag,
            south: tag,
            north: tag,
        }
    }

    pub fn get(&self, side: Side) -> BoundaryTag {
        match side {
            Side::West => self.west,
            Side::East => self.east,
            Side::South => self.south,
            Side::North => self.north,
        }
    }
}

/// Input to [`build_mesh`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDescription {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub origin: (f64, f64),
    /// One entry per cell, `None` marks a hole in the region map.
    pub regions: Vec<Option<u32>>,
    pub boundary: BoundaryTags,
}

impl MeshDescription {
    /// Uniform region id over the whole grid.
    pub fn uniform(nx: usize, ny: usize, dx: f64, dy: f64, region: u32, boundary: BoundaryTags) -> Self {
        Self {
            nx,
            ny,
            dx,
            dy,
            origin: (0.0, 0.0),
            regions: vec![Some(region); nx * ny],
            boundary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredMesh {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    origin: (f64, f64),
    region_id: Vec<u32>,
    boundary: BoundaryTags,
}

pub fn build_mesh(config: &MeshDescription) -> Result<StructuredMesh> {
    let (nx, ny) = (config.nx, config.ny);
    if nx == 0 || ny == 0 {
        return Err(Error::ZeroDimension { nx, ny });
    }
    if !(config.dx > 0.0 && config.dx.is_finite() && config.dy > 0.0 && config.dy.is_finite()) {
        return Err(Error::InvalidMesh(format!(
            "cell sizes must be positive, got dx = {}, dy = {}",
            config.dx, config.dy
        )));
    }
    if !(config.origin.0.is_finite() && config.origin.1.is_finite()) {
        return Err(Error::InvalidMesh("origin must be finite".into()));
    }
    let n = nx * ny;
    if config.regions.len() > n {
        return Err(Error::InvalidMesh(format!(
            "region map has {} entries for {} cells",
            config.regions.len(),
            n
        )));
    }
    let mut region_id = Vec::with_capacity(n);
    for cell in 0..n {
        match config.regions.get(cell).copied().flatten() {
            Some(id) => region_id.push(id),
            None => return Err(Error::RegionGap { cell }),
        }
    }
    Ok(StructuredMesh {
        nx,
        ny,
        dx: config.dx,
        dy: config.dy,
        origin: config.origin,
        region_id,
        boundary: config.boundary,
    })
}

impl StructuredMesh {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn area(&self) -> f64 {
        self.cell_area() * self.n_cells() as f64
    }

    pub fn boundary(&self) -> &BoundaryTags {
        &self.boundary
    }

    pub fn region_ids(&self) -> &[u32] {
        &self.region_id
    }

    pub fn region(&self, cell: usize) -> u32 {
        self.region_id[cell]
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// `(i, j)` of a cell index.
    pub fn ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = self.ij(cell);
        (
            self.origin.0 + (i as f64 + 0.5) * self.dx,
            self.origin.1 + (j as f64 + 0.5) * self.dy,
        )
    }

    /// Distinct region ids, sorted.
    pub fn regions(&self) -> Vec<u32> {
        self.region_id.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn region_cell_count(&self, region: u32) -> usize {
        self.region_id.iter().filter(|&&r| r == region).count()
    }

    pub fn region_area(&self, region: u32) -> f64 {
        self.region_cell_count(region) as f64 * self.cell_area()
    }

    /// Same grid geometry (dimensions, spacing, origin). Region maps and
    /// boundary tags do not enter the L² geometry.
    pub fn same_geometry(&self, other: &StructuredMesh) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.dx == other.dx
            && self.dy == other.dy
            && self.origin == other.origin
    }
}

/// Cell-valued function on a mesh.
#[derive(Debug, Clone)]
pub struct ScalarField {
    mesh: Arc<StructuredMesh>,
    values: Vec<f64>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        same_mesh(&self.mesh, &other.mesh) && self.values == other.values
    }
}

fn same_mesh(a: &Arc<StructuredMesh>, b: &Arc<StructuredMesh>) -> bool {
    Arc::ptr_eq(a, b) || a.same_geometry(b)
}

impl ScalarField {
    pub fn new(mesh: Arc<StructuredMesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_cells() {
            return Err(Error::SizeMismatch {
                expected: mesh.n_cells(),
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self { mesh, values })
    }

    pub fn zeros(mesh: Arc<StructuredMesh>) -> Self {
        let n = mesh.n_cells();
        Self {
            mesh,
            values: vec![0.0; n],
        }
    }

    pub fn constant(mesh: Arc<StructuredMesh>, value: f64) -> Self {
        let n = mesh.n_cells();
        Self {
            mesh,
            values: vec![value; n],
        }
    }

    /// Samples `f(x, y)` at cell centres.
    pub fn from_fn(mesh: Arc<StructuredMesh>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..mesh.n_cells())
            .map(|c| {
                let (x, y) = mesh.cell_center(c);
                f(x, y)
            })
            .collect();
        Self::new(mesh, values)
    }

    pub fn mesh(&self) -> &Arc<StructuredMesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_mesh_as(&self, other: &ScalarField) -> bool {
        same_mesh(&self.mesh, &other.mesh)
    }

    fn check_mesh(&self, other: &ScalarField) -> Result<()> {
        if self.same_mesh_as(other) {
            Ok(())
        } else {
            Err(Error::MeshMismatch)
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ScalarField) -> Result<()> {
        self.check_mesh(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> ScalarField {
        ScalarField {
            mesh: self.mesh.clone(),
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `Σ_k coeffs[k] * fields[k]`; an empty combination yields zero on `mesh`.
pub fn linear_combination(
    mesh: &Arc<StructuredMesh>,
    coeffs: &[f64],
    fields: &[ScalarField],
) -> Result<ScalarField> {
    if coeffs.len() > fields.len() {
        return Err(Error::SizeMismatch {
            expected: fields.len(),
            got: coeffs.len(),
        });
    }
    let mut out = ScalarField::zeros(mesh.clone());
    for (c, f) in coeffs.iter().zip(fields) {
        out.axpy(*c, f)?;
    }
    Ok(out)
}

/// L² inner product with midpoint quadrature.
pub fn inner_product(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.check_mesh(g)?;
    let s: f64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
    Ok(s * f.mesh.cell_area())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L1Norm,
    L2Norm,
    Integral,
}

pub fn reduce_field(f: &ScalarField, kind: NormKind) -> f64 {
    let area = f.mesh.cell_area();
    match kind {
        NormKind::L1Norm => f.values.iter().map(|v| v.abs()).sum::<f64>() * area,
        NormKind::L2Norm => (f.values.iter().map(|v| v * v).sum::<f64>() * area).sqrt(),
        NormKind::Integral => f.values.iter().sum::<f64>() * area,
    }
}

pub fn l2_norm(f: &ScalarField) -> f64 {
    reduce_field(f, NormKind::L2Norm)
}

/// Parses a region mask: `ny` lines of `nx` whitespace-separated integers,
/// the first line being row `j = 0`. Blank lines and `#` comments are skipped.
pub fn parse_region_mask(text: &str) -> Result<(usize, usize, Vec<u32>)> {
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::InvalidMesh(format!("mask line {}: bad region id '{}'", lineno + 1, tok))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ny = rows.len();
    let nx = rows.first().map_or(0, Vec::len);
    if nx == 0 || ny == 0 {
        return Err(Error::ZeroDimension { nx, ny });
    }
    if let Some(j) = rows.iter().position(|r| r.len() != nx) {
        return Err(Error::InvalidMesh(format!(
            "mask row {} has {} entries, expected {}",
            j,
            rows[j].len(),
            nx
        )));
    }
    Ok((nx, ny, rows.into_iter().flatten().collect()))
}

pub fn read_region_mask(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    parse_region_mask(&std::fs::read_to_string(path)?)
}

pub fn format_region_mask(nx: usize, regions: &[u32]) -> String {
    let mut out = String::new();
    for row in regions.chunks(nx) {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}
