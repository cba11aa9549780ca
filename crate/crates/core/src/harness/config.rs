//! Benchmark configuration: a TOML document describing the geometry,
//! materials, coupling, transient, study design and reconstruction settings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use super::store::LibrarySpec;
use crate::fields::{build_mesh, read_region_mask, BoundaryTags, MeshDescription, StructuredMesh};
use crate::multiphysics::{
    CoupledProblem, CouplingMode, FeedbackEntry, LinearFit, Normalisation, ParameterSpec, TransientOptions,
    TransientSchedule, FIELDS, T_REF,
};
use crate::neutronics::{Kinetics, MaterialTable, RegionMaterial};
use crate::thermal::{RegionThermal, ThermalProperties};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Coarse region mask, relative to the config file.
    pub geometry: PathBuf,
    /// Edge length of one coarse mask cell (cm).
    pub cell_size: f64,
    /// Each coarse cell is split into `refine × refine` mesh cells.
    #[serde(default = "one")]
    pub refine: usize,
    pub boundary: BoundaryTags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalConfig {
    pub boundary_temperature: f64,
    pub regions: Vec<RegionThermal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_keff_tol")]
    pub keff_tol: f64,
    #[serde(default = "default_keff_max_iter")]
    pub keff_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            keff_tol: default_keff_tol(),
            keff_max_iter: default_keff_max_iter(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub sample_every: f64,
    /// Training times are `t ≤ train_end`, prediction times `train_end < t ≤ predict_end`.
    pub train_end: f64,
    pub predict_end: f64,
    /// Whether `t = 0` belongs to the training times.
    #[serde(default = "yes")]
    pub include_start: bool,
    #[serde(default = "default_weak_iterations")]
    pub weak_iterations: usize,
    #[serde(default = "default_surrogate_tol")]
    pub surrogate_tol: f64,
}

impl TimeConfig {
    pub fn transient_options(&self) -> TransientOptions {
        TransientOptions {
            dt: self.dt,
            t_end: self.predict_end,
            sample_every: self.sample_every,
            surrogate_tol: self.surrogate_tol,
            weak_iterations: self.weak_iterations,
        }
    }

    pub fn is_train_time(&self, t: f64) -> bool {
        let eps = 1e-9 * self.sample_every;
        t <= self.train_end + eps && (self.include_start || t > eps)
    }

    pub fn is_predict_time(&self, t: f64) -> bool {
        let eps = 1e-9 * self.sample_every;
        t > self.train_end + eps && t <= self.predict_end + eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Model that generates the ground truth.
    #[serde(default = "default_truth")]
    pub truth: CouplingMode,
    /// Biased model used for training and as the baseline.
    pub model: CouplingMode,
    /// One value list per declared parameter; the grid is their tensor product.
    #[serde(default)]
    pub train: Vec<Vec<f64>>,
    #[serde(default)]
    pub predict: Vec<Vec<f64>>,
    /// Number of prediction snapshots used to tune the PBDW weight.
    #[serde(default = "default_validation")]
    pub validation: usize,
}

/// Noise standard deviation per field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub phi1: f64,
    pub phi2: f64,
}

impl NoiseConfig {
    pub fn get(&self, field: &str) -> Result<f64> {
        match field {
            "T" => Ok(self.temperature),
            "phi1" => Ok(self.phi1),
            "phi2" => Ok(self.phi2),
            other => Err(Error::MissingField(other.to_string())),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            temperature: self.temperature * factor,
            phi1: self.phi1 * factor,
            phi2: self.phi2 * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Sensor centres every `stride` cells in each direction.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Gaussian kernel spread (cm).
    #[serde(default = "one_f64")]
    pub spread: f64,
    /// Restrict sensors to one octant of a diagonally symmetric domain.
    #[serde(default)]
    pub octant: bool,
    pub m_max: usize,
    pub n_background: usize,
    #[serde(default)]
    pub greedy_tol: f64,
    pub sigma: NoiseConfig,
    /// TR-GEIM weight; the field noise level when absent.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// PBDW weights tried during tuning; a log grid on [1e-6, 1e2] when absent.
    #[serde(default)]
    pub xi_grid: Option<Vec<f64>>,
}

impl ReconstructionConfig {
    pub fn library(&self) -> LibrarySpec {
        LibrarySpec {
            stride: self.stride,
            spread: self.spread,
            octant: self.octant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Noise draws for the plain versus regularised GEIM comparison.
    #[serde(default = "default_noise_draws")]
    pub noise_draws: usize,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            draws: default_draws(),
            level: default_level(),
            noise_draws: default_noise_draws(),
        }
    }
}

/// One benchmark case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub seed: u64,
    pub mesh: MeshConfig,
    pub materials: Vec<RegionMaterial>,
    pub kinetics: Kinetics,
    pub thermal: ThermalConfig,
    #[serde(default)]
    pub feedback: Vec<FeedbackEntry>,
    #[serde(default)]
    pub schedule: TransientSchedule,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub normalisation: Normalisation,
    #[serde(default)]
    pub linear_fit: LinearFit,
    #[serde(default = "default_initial_temperature")]
    pub initial_temperature: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    pub time: TimeConfig,
    pub study: StudyConfig,
    pub reconstruction: ReconstructionConfig,
    #[serde(default)]
    pub uq: UqConfig,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_keff_tol() -> f64 {
    1e-10
}
fn default_keff_max_iter() -> usize {
    500
}
fn default_weak_iterations() -> usize {
    2
}
fn default_surrogate_tol() -> f64 {
    1e-8
}
fn default_truth() -> CouplingMode {
    CouplingMode::Fom
}
fn default_validation() -> usize {
    5
}
fn default_stride() -> usize {
    5
}
fn default_draws() -> usize {
    100
}
fn default_level() -> f64 {
    0.95
}
fn default_noise_draws() -> usize {
    50
}
fn default_initial_temperature() -> f64 {
    T_REF
}

impl BenchmarkConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: BenchmarkConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.mesh.refine == 0 || !(self.mesh.cell_size > 0.0) {
            return bad("mesh refine and cell_size must be positive");
        }
        let p = self.parameters.len();
        if !self.study.train.is_empty() && self.study.train.len() != p {
            return bad("study.train needs one value list per parameter");
        }
        if !self.study.predict.is_empty() && self.study.predict.len() != p {
            return bad("study.predict needs one value list per parameter");
        }
        if p > 0 && (self.study.train.is_empty() || self.study.predict.is_empty()) {
            return bad("parametric studies need train and predict grids");
        }
        if self.study.train.iter().chain(&self.study.predict).any(Vec::is_empty) {
            return bad("parameter value lists must be non-empty");
        }
        if !(self.time.train_end > 0.0 && self.time.predict_end > self.time.train_end) {
            return bad("time windows must satisfy 0 < train_end < predict_end");
        }
        let r = &self.reconstruction;
        if r.m_max == 0 || r.n_background == 0 {
            return bad("m_max and n_background must be positive");
        }
        for f in FIELDS {
            let s = r.sigma.get(f)?;
            if !(s >= 0.0 && s.is_finite()) {
                return bad("noise levels must be non-negative");
            }
        }
        if let Some(grid) = &r.xi_grid {
            if grid.is_empty() || grid.iter().any(|x| !(*x > 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
                return bad("xi_grid must be positive and strictly increasing");
            }
        }
        if self.uq.draws < 2 || !(self.uq.level > 0.0 && self.uq.level < 1.0) {
            return bad("uq needs at least two draws and a level in (0, 1)");
        }
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn train_points(&self) -> Vec<Vec<f64>> {
        tensor_points(&self.study.train)
    }

    pub fn predict_points(&self) -> Vec<Vec<f64>> {
        tensor_points(&self.study.predict)
    }

    pub fn mesh_description(&self) -> Result<MeshDescription> {
        let path = self.base_dir.join(&self.mesh.geometry);
        let (cx, cy, coarse) = read_region_mask(&path)
            .map_err(|e| Error::Config(format!("geometry {}: {e}", path.display())))?;
        let r = self.mesh.refine;
        let (nx, ny) = (cx * r, cy * r);
        let regions = (0..nx * ny)
            .map(|c| {
                let (i, j) = (c % nx, c / nx);
                Some(coarse[(j / r) * cx + i / r])
            })
            .collect();
        let h = self.mesh.cell_size / r as f64;
        Ok(MeshDescription {
            nx,
            ny,
            dx: h,
            dy: h,
            origin: (0.0, 0.0),
            regions,
            boundary: self.mesh.boundary,
        })
    }

    pub fn build_mesh(&self) -> Result<Arc<StructuredMesh>> {
        Ok(Arc::new(build_mesh(&self.mesh_description()?)?))
    }

    pub fn build_problem(&self) -> Result<CoupledProblem> {
        let mesh = self.build_mesh()?;
        let materials = MaterialTable::new(self.materials.clone(), self.kinetics.clone())?;
        let thermal = ThermalProperties::new(self.thermal.regions.clone(), self.thermal.boundary_temperature)?;
        Ok(CoupledProblem {
            mesh,
            materials,
            thermal,
            feedback: self.feedback.clone(),
            schedule: self.schedule.clone(),
            parameters: self.parameters.clone(),
            normalisation: self.normalisation,
            linear_fit: self.linear_fit,
            initial_temperature: self.initial_temperature,
            keff_tol: self.solver.keff_tol,
            keff_max_iter: self.solver.keff_max_iter,
        })
    }
}

/// Tensor product of value lists, first axis slowest; one empty point when
/// there are no axes.
pub fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    pub(crate) fn benchmarks_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks")
    }

    #[test]
    fn tensor_grid_order() {
        let pts = tensor_points(&[vec![1.0, 2.0], vec![10.0, 20.0, 30.0]]);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![1.0, 10.0]);
        assert_eq!(pts[1], vec![1.0, 20.0]);
        assert_eq!(pts[5], vec![2.0, 30.0]);
        assert_eq!(tensor_points(&[]), vec![Vec::<f64>::new()]);
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(1e-3, 1e-2, 10);
        assert_eq!(v.len(), 10);
        assert_eq!(v[0], 1e-3);
        assert!((v[9] - 1e-2).abs() < 1e-17);
    }

    #[test]
    fn iaea_geometry_cell_counts() {
        let cfg = BenchmarkConfig::load(&benchmarks_dir().join("iaea2d.toml")).unwrap();
        let mesh = cfg.build_mesh().unwrap();
        assert_eq!((mesh.nx(), mesh.ny()), (85, 85));
        assert_eq!(mesh.regions(), vec![1, 2, 3, 4]);
        // Oracle: coarse 10-cm block counts read independently from the mask text.
        let text = std::fs::read_to_string(benchmarks_dir().join("iaea2d.mask")).unwrap();
        let mut counts = [0usize; 5];
        for line in text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty()) {
            for tok in line.split_whitespace() {
                counts[tok.parse::<usize>().unwrap()] += 1;
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 17 * 17);
        for r in 1..=4u32 {
            assert_eq!(mesh.region_cell_count(r), counts[r as usize] * 25);
            assert!((mesh.region_area(r) - counts[r as usize] as f64 * 100.0).abs() < 1e-9);
        }
        assert_eq!(counts[3], 9);
    }

    #[test]
    fn twigl_geometry_areas() {
        let cfg = BenchmarkConfig::load(&benchmarks_dir().join("twigl2d_a.toml")).unwrap();
        let mesh = cfg.build_mesh().unwrap();
        assert_eq!((mesh.nx(), mesh.ny()), (40, 40));
        assert!((mesh.region_area(1) - 2.0 * 32.0 * 24.0).abs() < 1e-9);
        assert!((mesh.region_area(2) - (24.0 * 24.0 + 32.0 * 32.0)).abs() < 1e-9);
        assert!((mesh.area() - 6400.0).abs() < 1e-9);
    }

    #[test]
    fn shipped_configs_parse_and_round_trip() {
        for name in ["iaea2d.toml", "twigl2d_a.toml", "twigl2d_b.toml"] {
            let cfg = BenchmarkConfig::load(&benchmarks_dir().join(name)).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = BenchmarkConfig::from_toml(&text, &cfg.base_dir).unwrap();
            assert_eq!(back, cfg, "{name}");
            cfg.build_problem().unwrap();
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grids() {
        let mut text = std::fs::read_to_string(benchmarks_dir().join("twigl2d_a.toml")).unwrap();
        text.push_str("\n[bogus]\nx = 1\n");
        assert!(matches!(BenchmarkConfig::from_toml(&text, &benchmarks_dir()), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let mut f = std::fs::File::create(dir.path().join("bad.toml")).unwrap();
        f.write_all(b"name = 'x'").unwrap();
        assert!(matches!(BenchmarkConfig::load(&dir.path().join("bad.toml")), Err(Error::Config(_))));
    }
}
