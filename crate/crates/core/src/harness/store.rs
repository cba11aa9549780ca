//! On-disk formats: snapshot containers, trained models and CSV tables.
//!
//! A snapshot container is a directory holding `manifest.toml`, the region
//! mask `regions.mask` and one little-endian `f64` file per field and
//! snapshot named `snap_<index>_<field>.f64` (cells row-major, `x` fastest).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    build_mesh, format_region_mask, parse_region_mask, BoundaryTags, MeshDescription, ScalarField, StructuredMesh,
};
use crate::geim::{CoefficientStats, GeimModel};
use crate::pbdw::PbdwModel;
use crate::reduction::SnapshotSet;
use crate::sensing::{build_sensor_library, SensorFunctional};

pub const MANIFEST: &str = "manifest.toml";
pub const REGIONS: &str = "regions.mask";
pub const MODEL_MANIFEST: &str = "model.toml";

/// Mesh geometry stored next to the region mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshHeader {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub origin: [f64; 2],
    pub boundary: BoundaryTags,
}

impl MeshHeader {
    pub fn of(mesh: &StructuredMesh) -> Self {
        let (x0, y0) = mesh.origin();
        Self {
            nx: mesh.nx(),
            ny: mesh.ny(),
            dx: mesh.dx(),
            dy: mesh.dy(),
            origin: [x0, y0],
            boundary: *mesh.boundary(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub benchmark: String,
    pub seed: u64,
    pub mesh: MeshHeader,
    pub fields: Vec<String>,
    pub parameter_names: Vec<String>,
    pub parameters: Vec<Vec<f64>>,
    /// Extra scalars attached by the producer (e.g. power scale, k_eff).
    #[serde(default)]
    pub scalars: std::collections::BTreeMap<String, f64>,
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput(format!("{}: length is not a multiple of 8", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_mesh(dir: &Path, mesh: &StructuredMesh) -> Result<()> {
    fs::write(dir.join(REGIONS), format_region_mask(mesh.nx(), mesh.region_ids()))?;
    Ok(())
}

pub fn read_mesh(dir: &Path, header: &MeshHeader) -> Result<Arc<StructuredMesh>> {
    let (nx, ny, regions) = parse_region_mask(&fs::read_to_string(dir.join(REGIONS))?)?;
    if (nx, ny) != (header.nx, header.ny) {
        return Err(Error::InvalidMesh(format!(
            "region mask is {nx}×{ny}, manifest says {}×{}",
            header.nx, header.ny
        )));
    }
    Ok(Arc::new(build_mesh(&MeshDescription {
        nx,
        ny,
        dx: header.dx,
        dy: header.dy,
        origin: (header.origin[0], header.origin[1]),
        regions: regions.into_iter().map(Some).collect(),
        boundary: header.boundary,
    })?))
}

fn snap_file(index: usize, field: &str) -> String {
    format!("snap_{index}_{field}.f64")
}

/// Writes `set` as a snapshot container in `dir` (created if needed).
pub fn write_snapshots(
    dir: &Path,
    set: &SnapshotSet,
    benchmark: &str,
    seed: u64,
    scalars: &[(&str, f64)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mesh = set.mesh();
    let manifest = SnapshotManifest {
        benchmark: benchmark.to_string(),
        seed,
        mesh: MeshHeader::of(mesh),
        fields: set.field_names(),
        parameter_names: set.parameter_names().to_vec(),
        parameters: set.parameters().to_vec(),
        scalars: scalars.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    write_mesh(dir, mesh)?;
    for name in &manifest.fields {
        for (i, f) in set.field(name)?.iter().enumerate() {
            write_f64_file(&dir.join(snap_file(i, name)), f.values())?;
        }
    }
    write_toml(&dir.join(MANIFEST), &manifest)
}

pub fn read_snapshots(dir: &Path) -> Result<(SnapshotSet, SnapshotManifest)> {
    let manifest: SnapshotManifest = read_toml(&dir.join(MANIFEST))?;
    let mesh = read_mesh(dir, &manifest.mesh)?;
    let mut set = SnapshotSet::new(mesh.clone(), manifest.parameter_names.clone());
    for (i, mu) in manifest.parameters.iter().enumerate() {
        let fields = manifest
            .fields
            .iter()
            .map(|name| {
                let values = read_f64_file(&dir.join(snap_file(i, name)))?;
                Ok((name.clone(), ScalarField::new(mesh.clone(), values)?))
            })
            .collect::<Result<Vec<_>>>()?;
        set.push(mu.clone(), fields)?;
    }
    Ok((set, manifest))
}

/// Sensor library description shared by every stored model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub stride: usize,
    pub spread: f64,
    /// Keep only sensors centred on or below the diagonal `y = x`.
    #[serde(default)]
    pub octant: bool,
}

impl LibrarySpec {
    pub fn build(&self, mesh: &Arc<StructuredMesh>) -> Result<Vec<SensorFunctional>> {
        let mut library = build_sensor_library(mesh, self.stride, self.spread)?;
        if self.octant {
            let (x0, y0) = mesh.origin();
            library.retain(|s| {
                let (x, y) = s.center();
                y - y0 <= x - x0
            });
        }
        Ok(library)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeimRecord {
    pub field: String,
    pub sensor_indices: Vec<usize>,
    pub magic_snapshots: Vec<usize>,
    pub train_errors: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub std: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbdwRecord {
    pub field: String,
    pub n_background: usize,
    pub sensor_indices: Vec<usize>,
    pub inf_sup: Vec<Vec<f64>>,
}

/// Trained models for several fields, plus the noise levels used online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub benchmark: String,
    pub method: String,
    pub mesh: MeshHeader,
    pub library: LibrarySpec,
    /// Noise standard deviation per field.
    pub sigma: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    pub geim: Vec<GeimRecord>,
    #[serde(default)]
    pub pbdw: Vec<PbdwRecord>,
}

/// In-memory counterpart of a model directory.
#[derive(Debug, Clone)]
pub struct StoredModels {
    pub manifest: ModelManifest,
    pub mesh: Arc<StructuredMesh>,
    pub geim: Vec<(String, GeimModel)>,
    pub pbdw: Vec<(String, PbdwModel)>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn write_models(dir: &Path, models: &StoredModels) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_mesh(dir, &models.mesh)?;
    let mut manifest = models.manifest.clone();
    manifest.geim.clear();
    manifest.pbdw.clear();
    for (field, m) in &models.geim {
        for (k, q) in m.magic_functions.iter().enumerate() {
            write_f64_file(&dir.join(format!("geim_{field}_{k}.f64")), q.values())?;
        }
        manifest.geim.push(GeimRecord {
            field: field.clone(),
            sensor_indices: m.sensor_indices.clone(),
            magic_snapshots: m.magic_snapshots.clone(),
            train_errors: m.train_errors.clone(),
            matrix: matrix_rows(&m.matrix),
            mean: m.stats.as_ref().map(|s| s.mean.clone()),
            std: m.stats.as_ref().map(|s| s.std.clone()),
        });
    }
    for (field, m) in &models.pbdw {
        for (k, z) in m.background.iter().enumerate() {
            write_f64_file(&dir.join(format!("pbdw_{field}_{k}.f64")), z.values())?;
        }
        manifest.pbdw.push(PbdwRecord {
            field: field.clone(),
            n_background: m.n_background(),
            sensor_indices: m.sensor_indices.clone(),
            inf_sup: m.inf_sup.clone(),
        });
    }
    write_toml(&dir.join(MODEL_MANIFEST), &manifest)
}

fn pick_sensors(library: &[SensorFunctional], indices: &[usize]) -> Result<Vec<SensorFunctional>> {
    indices
        .iter()
        .map(|&i| {
            library
                .get(i)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("sensor index {i} outside the library")))
        })
        .collect()
}

pub fn read_models(dir: &Path) -> Result<StoredModels> {
    let manifest: ModelManifest = read_toml(&dir.join(MODEL_MANIFEST))?;
    let mesh = read_mesh(dir, &manifest.mesh)?;
    let library = manifest.library.build(&mesh)?;
    let load = |name: String| -> Result<ScalarField> { ScalarField::new(mesh.clone(), read_f64_file(&dir.join(name))?) };
    let mut geim = Vec::new();
    for r in &manifest.geim {
        let m = r.sensor_indices.len();
        let magic_functions = (0..m)
            .map(|k| load(format!("geim_{}_{k}.f64", r.field)))
            .collect::<Result<Vec<_>>>()?;
        if r.matrix.len() != m || r.matrix.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidInput(format!("GEIM matrix for {} is not {m}×{m}", r.field)));
        }
        let stats = match (&r.mean, &r.std) {
            (Some(mean), Some(std)) => Some(CoefficientStats {
                mean: mean.clone(),
                std: std.clone(),
            }),
            _ => None,
        };
        geim.push((
            r.field.clone(),
            GeimModel {
                magic_functions,
                magic_sensors: pick_sensors(&library, &r.sensor_indices)?,
                sensor_indices: r.sensor_indices.clone(),
                magic_snapshots: r.magic_snapshots.clone(),
                matrix: DMatrix::from_fn(m, m, |i, j| r.matrix[i][j]),
                train_errors: r.train_errors.clone(),
                stats,
            },
        ));
    }
    let mut pbdw = Vec::new();
    for r in &manifest.pbdw {
        let background = (0..r.n_background)
            .map(|k| load(format!("pbdw_{}_{k}.f64", r.field)))
            .collect::<Result<Vec<_>>>()?;
        let mut model = PbdwModel::from_parts(background, pick_sensors(&library, &r.sensor_indices)?)?;
        model.sensor_indices = r.sensor_indices.clone();
        model.inf_sup = r.inf_sup.clone();
        pbdw.push((r.field.clone(), model));
    }
    Ok(StoredModels {
        manifest,
        mesh,
        geim,
        pbdw,
    })
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Comma-separated table with a header row.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// One CSV cell.
pub enum Cell<'a> {
    Text(&'a str),
    Int(usize),
    Num(f64),
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: &[Cell]) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(
            cells
                .iter()
                .map(|c| match c {
                    Cell::Text(s) => s.to_string(),
                    Cell::Int(i) => i.to_string(),
                    Cell::Num(v) => fmt_f64(*v),
                })
                .collect(),
        );
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.render().as_bytes())?;
        Ok(())
    }
}

/// Parsed CSV: header and string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::SizeMismatch {
            expected: header.len(),
            got: r.len(),
        });
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{BoundaryTag, MeshDescription};
    use crate::geim::{coefficient_stats_fields, geim_greedy_fields};
    use crate::pbdw::sgreedy_fields;
    use std::collections::BTreeMap;

    fn mesh() -> Arc<StructuredMesh> {
        let mut d = MeshDescription::uniform(12, 10, 0.5, 0.5, 1, BoundaryTags::uniform(BoundaryTag::Symmetry));
        d.regions[7] = Some(3);
        d.origin = (1.0, -2.0);
        Arc::new(build_mesh(&d).unwrap())
    }

    fn snapshots(mesh: &Arc<StructuredMesh>, n: usize) -> Vec<ScalarField> {
        (0..n)
            .map(|k| {
                let a = 0.3 + 0.17 * k as f64;
                ScalarField::from_fn(mesh.clone(), |x, y| (a * x).sin() * (1.0 + a * y * y).ln() + a).unwrap()
            })
            .collect()
    }

    #[test]
    fn f64_files_are_little_endian_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        let v = vec![1.0, -0.1, f64::MIN_POSITIVE, 1e300];
        write_f64_file(&p, &v).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(read_f64_file(&p).unwrap(), v);
    }

    #[test]
    fn snapshot_container_round_trip() {
        let m = mesh();
        let mut set = SnapshotSet::new(m.clone(), vec!["t".into(), "g".into()]);
        for (k, f) in snapshots(&m, 3).into_iter().enumerate() {
            set.push(vec![0.1 * k as f64, 7.0], vec![("T".into(), f.clone()), ("phi1".into(), f.scaled(2.0))])
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        write_snapshots(dir.path(), &set, "case", 42, &[("p0", 1.5)]).unwrap();
        assert!(dir.path().join("snap_2_phi1.f64").exists());
        let (back, manifest) = read_snapshots(dir.path()).unwrap();
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.scalars["p0"], 1.5);
        assert_eq!(back.parameters(), set.parameters());
        assert_eq!(back.mesh().region_ids(), m.region_ids());
        assert_eq!(back.mesh().origin(), m.origin());
        for name in ["T", "phi1"] {
            for (a, b) in back.field(name).unwrap().iter().zip(set.field(name).unwrap()) {
                assert_eq!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = mesh();
        let snaps = snapshots(&m, 6);
        let spec = LibrarySpec {
            stride: 2,
            spread: 0.5,
            octant: false,
        };
        let library = spec.build(&m).unwrap();
        let mut geim = geim_greedy_fields(&snaps, &library, 4, 0.0).unwrap();
        geim.stats = Some(coefficient_stats_fields(&geim, &snaps).unwrap());
        let pbdw = sgreedy_fields(&snaps[..2], &library, 5).unwrap();
        let models = StoredModels {
            manifest: ModelManifest {
                benchmark: "case".into(),
                method: "geim+pbdw".into(),
                mesh: MeshHeader::of(&m),
                library: spec,
                sigma: BTreeMap::from([("T".to_string(), 0.1)]),
                geim: Vec::new(),
                pbdw: Vec::new(),
            },
            mesh: m.clone(),
            geim: vec![("T".into(), geim.clone())],
            pbdw: vec![("T".into(), pbdw.clone())],
        };
        let dir = tempfile::tempdir().unwrap();
        write_models(dir.path(), &models).unwrap();
        let back = read_models(dir.path()).unwrap();
        let g = &back.geim[0].1;
        assert_eq!(g.matrix, geim.matrix);
        assert_eq!(g.sensor_indices, geim.sensor_indices);
        assert_eq!(g.stats, geim.stats);
        for (a, b) in g.magic_functions.iter().zip(&geim.magic_functions) {
            assert_eq!(a.values(), b.values());
        }
        let p = &back.pbdw[0].1;
        assert_eq!(p.a, pbdw.a);
        assert_eq!(p.k, pbdw.k);
        assert_eq!(p.inf_sup, pbdw.inf_sup);
        assert_eq!(back.manifest.sigma["T"], 0.1);
    }

    #[test]
    fn csv_uses_seventeen_digits() {
        let mut t = CsvTable::new(&["name", "k", "value"]);
        t.push(&[Cell::Text("a"), Cell::Int(3), Cell::Num(0.1)]);
        let text = t.render();
        assert_eq!(text, "name,k,value\na,3,1.0000000000000001e-1\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["name", "k", "value"]);
        assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.1);
    }
}
