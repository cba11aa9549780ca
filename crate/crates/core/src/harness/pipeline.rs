//! End-to-end study: snapshot generation, offline training, online
//! reconstruction from noisy data, uncertainty bands and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{BenchmarkConfig, ReconstructionConfig};
use super::metrics::{average_errors, global_outputs, total_power, uq_bands, Band, ErrorPair, GlobalReference, GlobalSeries};
use super::store::{read_snapshots, write_snapshots, Cell, CsvTable};
use super::svg::{bar_chart, line_chart, Axes, Series, ShadedBand};
use crate::error::{Error, Result};
use crate::fields::{l2_norm, ScalarField};
use crate::geim::{geim_greedy_fields, geim_online, trgeim_online, GeimModel};
use crate::multiphysics::{reference_materials, run_transient, CoupledProblem, CouplingMode, FIELDS};
use crate::neutronics::CellMaterials;
use crate::pbdw::{default_xi_grid, pbdw_online_sized, sgreedy, tune_xi, PbdwModel, ValidationCase};
use crate::reduction::{compute_pod_upto, SnapshotSet};
use crate::sensing::{synthesize_measurements, SensorFunctional};

/// Random streams, one per use of noisy readings.
const STREAM_GEIM: u64 = 1;
const STREAM_PBDW: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
const STREAM_UQ: u64 = 4;
const STREAM_NOISE_STUDY: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Geim,
    TrGeim,
    Pbdw,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Geim, Method::TrGeim, Method::Pbdw];

    pub fn name(self) -> &'static str {
        match self {
            Method::Geim => "GEIM",
            Method::TrGeim => "TR-GEIM",
            Method::Pbdw => "PBDW",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Method::Geim => "geim",
            Method::TrGeim => "trgeim",
            Method::Pbdw => "pbdw",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Method::Geim | Method::TrGeim => STREAM_GEIM,
            Method::Pbdw => STREAM_PBDW,
        }
    }
}

pub fn model_label(mode: CouplingMode) -> &'static str {
    match mode {
        CouplingMode::Fom => "FOM",
        CouplingMode::Afom => "aFOM",
        CouplingMode::Lcfom => "LcFOM",
    }
}

/// Seed for one noisy measurement vector, mixed from the config seed and
/// the stream, field, snapshot and draw indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, p| mix(h ^ mix(*p)))
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out_dir: PathBuf,
    /// Directory for reusable transient runs; no caching when absent.
    pub cache_dir: Option<PathBuf>,
    /// Write truth and residual snapshot containers.
    pub dump_fields: bool,
    /// Multiplies every configured noise level.
    pub sigma_scale: f64,
    pub uncertainty: bool,
    pub noise_study: bool,
}

impl PipelineOptions {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            cache_dir: Some(out_dir.join("cache")),
            dump_fields: true,
            sigma_scale: 1.0,
            uncertainty: true,
            noise_study: true,
        }
    }
}

/// One prediction parameter point followed in time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: Vec<f64>,
    /// Indices into the prediction sets, in time order.
    pub indices: Vec<usize>,
    pub reference: GlobalReference,
    pub materials: CellMaterials,
}

#[derive(Debug, Clone)]
pub struct StudyData {
    pub problem: CoupledProblem,
    /// Model snapshots at the training parameters and times.
    pub train: SnapshotSet,
    /// Ground truth at the prediction parameters and times.
    pub truth: SnapshotSet,
    /// Model at the prediction parameters and times.
    pub baseline: SnapshotSet,
    pub trajectories: Vec<Trajectory>,
}

fn cache_key(cfg: &BenchmarkConfig, mode: CouplingMode, params: &[f64]) -> Result<String> {
    let mask = fs::read_to_string(cfg.base_dir.join(&cfg.mesh.geometry))?;
    let text = format!(
        "{mask}|{}|{}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}|{:?}",
        cfg.mesh.cell_size,
        cfg.mesh.refine,
        cfg.mesh.boundary,
        cfg.materials,
        cfg.kinetics,
        cfg.thermal,
        cfg.feedback,
        cfg.schedule,
        cfg.parameters,
        cfg.normalisation,
        cfg.linear_fit,
        cfg.initial_temperature,
        cfg.solver,
        cfg.time.transient_options(),
        mode,
        params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
    );
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Full transient at one parameter point, reusing a cached run when present.
pub fn simulate(
    cfg: &BenchmarkConfig,
    problem: &CoupledProblem,
    mode: CouplingMode,
    params: &[f64],
    cache: Option<&Path>,
) -> Result<SnapshotSet> {
    let dir = match cache {
        Some(root) => Some(root.join(cache_key(cfg, mode, params)?)),
        None => None,
    };
    if let Some(d) = &dir {
        if d.join(super::store::MANIFEST).exists() {
            log::info!("{} {:?}: cached run {}", mode.name(), params, d.display());
            return Ok(read_snapshots(d)?.0);
        }
    }
    let start = Instant::now();
    let run = run_transient(problem, mode, params, &cfg.time.transient_options())?;
    log::info!("{} {:?}: {:.1} s, k_eff = {:.6}", mode.name(), params, start.elapsed().as_secs_f64(), run.k_eff);
    let set = run.to_snapshots(&cfg.parameter_names(), params)?;
    if let Some(d) = &dir {
        let tmp = d.with_extension(format!("tmp{}", std::process::id()));
        write_snapshots(&tmp, &set, &cfg.name, cfg.seed, &[("p0", run.p0), ("k_eff", run.k_eff)])?;
        if fs::rename(&tmp, d).is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
    }
    Ok(set)
}

fn select_times(run: &SnapshotSet, keep: impl Fn(f64) -> bool) -> Result<SnapshotSet> {
    run.subset(&run.select(|mu| keep(mu[0])))
}

/// Runs every transient the study needs and splits them into training and
/// prediction sets.
pub fn generate(cfg: &BenchmarkConfig, cache: Option<&Path>) -> Result<StudyData> {
    let problem = cfg.build_problem()?;
    let mut names = vec!["t".to_string()];
    names.extend(cfg.parameter_names());
    let train_points = cfg.train_points();
    let predict_points = cfg.predict_points();
    let (model, truth_mode) = (cfg.study.model, cfg.study.truth);

    let mut jobs: Vec<(CouplingMode, Vec<f64>)> = Vec::new();
    for job in train_points
        .iter()
        .map(|p| (model, p.clone()))
        .chain(predict_points.iter().map(|p| (model, p.clone())))
        .chain(predict_points.iter().map(|p| (truth_mode, p.clone())))
    {
        if !jobs.contains(&job) {
            jobs.push(job);
        }
    }
    let runs = jobs
        .par_iter()
        .map(|(mode, p)| simulate(cfg, &problem, *mode, p, cache))
        .collect::<Result<Vec<_>>>()?;
    let find = |mode: CouplingMode, p: &Vec<f64>| -> &SnapshotSet {
        &runs[jobs.iter().position(|j| j.0 == mode && &j.1 == p).expect("job scheduled")]
    };

    let mesh = problem.mesh.clone();
    let mut train = SnapshotSet::new(mesh.clone(), names.clone());
    for p in &train_points {
        train.append(&select_times(find(model, p), |t| cfg.time.is_train_time(t))?)?;
    }
    let mut truth = SnapshotSet::new(mesh.clone(), names.clone());
    let mut baseline = SnapshotSet::new(mesh.clone(), names.clone());
    let mut trajectories = Vec::new();
    for p in &predict_points {
        let truth_run = find(truth_mode, p);
        let t_part = select_times(truth_run, |t| cfg.time.is_predict_time(t))?;
        let b_part = select_times(find(model, p), |t| cfg.time.is_predict_time(t))?;
        if t_part.parameters() != b_part.parameters() {
            return Err(Error::InvalidInput("model and truth sample different times".into()));
        }
        let materials = reference_materials(&problem, p)?;
        let start = truth_run.select(|mu| mu[0] == 0.0);
        let i0 = *start
            .first()
            .ok_or_else(|| Error::InvalidInput("truth run lacks the initial state".into()))?;
        let reference = GlobalReference {
            power: total_power(
                [truth_run.snapshot(i0, FIELDS[1])?, truth_run.snapshot(i0, FIELDS[2])?],
                &materials,
                1.0,
            )?,
            temperature: truth_run.snapshot(i0, FIELDS[0])?.clone(),
        };
        let offset = truth.len();
        trajectories.push(Trajectory {
            params: p.clone(),
            indices: (offset..offset + t_part.len()).collect(),
            reference,
            materials,
        });
        truth.append(&t_part)?;
        baseline.append(&b_part)?;
    }
    if train.is_empty() || truth.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(StudyData {
        problem,
        train,
        truth,
        baseline,
        trajectories,
    })
}

#[derive(Debug, Clone)]
pub struct FieldModels {
    pub field: String,
    pub geim: Option<GeimModel>,
    pub pbdw: Option<PbdwModel>,
}

impl FieldModels {
    fn geim(&self) -> Result<&GeimModel> {
        self.geim
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("no GEIM model for {}", self.field)))
    }

    fn pbdw(&self) -> Result<&PbdwModel> {
        self.pbdw
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("no PBDW model for {}", self.field)))
    }
}

#[derive(Debug, Clone)]
pub struct OfflineModels {
    pub fields: Vec<FieldModels>,
}

/// GEIM greedy on one field's training snapshots.
pub fn train_geim(r: &ReconstructionConfig, snaps: &[ScalarField], library: &[SensorFunctional]) -> Result<GeimModel> {
    geim_greedy_fields(snaps, library, r.m_max, r.greedy_tol)
}

/// POD background and stability-driven sensor selection on one field.
pub fn train_pbdw(r: &ReconstructionConfig, snaps: &[ScalarField], library: &[SensorFunctional]) -> Result<PbdwModel> {
    let pod = compute_pod_upto(snaps, r.n_background.min(snaps.len()))?;
    sgreedy(&pod, library, r.m_max)
}

/// GEIM and PBDW models for every field.
pub fn train_offline(cfg: &BenchmarkConfig, train: &SnapshotSet) -> Result<OfflineModels> {
    let r = &cfg.reconstruction;
    let library = r.library().build(train.mesh())?;
    let fields = FIELDS
        .iter()
        .map(|&f| {
            let snaps = train.field(f)?;
            Ok(FieldModels {
                field: f.to_string(),
                geim: Some(train_geim(r, snaps, &library)?),
                pbdw: Some(train_pbdw(r, snaps, &library)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OfflineModels { fields })
}

/// Estimates of one field from one measurement vector.
fn estimate(
    method: Method,
    models: &FieldModels,
    y: &[f64],
    m: usize,
    lambda: f64,
    xi: f64,
) -> Result<ScalarField> {
    match method {
        Method::Geim => Ok(geim_online(models.geim()?, &y[..m], m)?.1),
        Method::TrGeim => Ok(trgeim_online(models.geim()?, &y[..m], m, lambda)?.1),
        Method::Pbdw => {
            let model = models.pbdw()?;
            let n = model.n_background().min(m);
            Ok(pbdw_online_sized(model, &y[..m], n, xi)?.field)
        }
    }
}

fn sensors_for(method: Method, models: &FieldModels) -> Result<&[SensorFunctional]> {
    match method {
        Method::Geim | Method::TrGeim => Ok(&models.geim()?.magic_sensors),
        Method::Pbdw => Ok(&models.pbdw()?.sensors),
    }
}

fn available(method: Method, models: &FieldModels, m_max: usize) -> usize {
    let n = match (method, &models.geim, &models.pbdw) {
        (Method::Geim, Some(g), _) => g.len(),
        (Method::TrGeim, Some(g), _) if g.stats.is_some() => g.len(),
        (Method::Pbdw, _, Some(p)) => p.n_sensors(),
        _ => 0,
    };
    n.min(m_max)
}

fn evenly_spaced(len: usize, count: usize) -> Vec<usize> {
    let count = count.min(len);
    match count {
        0 => Vec::new(),
        1 => vec![len / 2],
        _ => (0..count)
            .map(|k| ((k * (len - 1)) as f64 / (count - 1) as f64).round() as usize)
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct GlobalRow {
    pub trajectory: usize,
    pub t: f64,
    /// Values by series label (truth, model label, method names).
    pub power: BTreeMap<String, f64>,
    pub temperature_rise: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct BandSet {
    pub trajectory: usize,
    pub method: Method,
    pub power: Band,
    pub temperature_rise: Band,
    pub power_coverage: f64,
    pub temperature_coverage: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseRow {
    pub field: String,
    pub m: usize,
    pub draws: usize,
    pub geim: f64,
    pub trgeim: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionReport {
    pub benchmark: String,
    pub model: CouplingMode,
    pub m_max: usize,
    pub n_predict: usize,
    /// `(method, field, M)` → errors.
    pub errors: BTreeMap<(Method, String, usize), ErrorPair>,
    /// Model versus truth per field.
    pub baseline: BTreeMap<String, ErrorPair>,
    /// Tuned PBDW weight per `(field, M)`.
    pub xi: BTreeMap<(String, usize), f64>,
    pub inf_sup: BTreeMap<String, Vec<f64>>,
    pub geim_train_errors: BTreeMap<String, Vec<f64>>,
    pub sigma: BTreeMap<String, f64>,
    pub global: Vec<GlobalRow>,
    pub bands: Vec<BandSet>,
    pub noise: Vec<NoiseRow>,
    pub timings: Vec<(String, f64)>,
}

impl ReconstructionReport {
    pub fn error(&self, method: Method, field: &str, m: usize) -> Option<ErrorPair> {
        self.errors.get(&(method, field.to_string(), m)).copied()
    }

    /// Largest M with results for `method` and `field`.
    pub fn last_m(&self, method: Method, field: &str) -> Option<usize> {
        self.errors
            .keys()
            .filter(|(me, f, _)| *me == method && f == field)
            .map(|k| k.2)
            .max()
    }

    pub fn m_values(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = self.errors.keys().map(|k| k.2).collect();
        ms.sort_unstable();
        ms.dedup();
        ms
    }
}


fn noisy(sensors: &[SensorFunctional], truth: &ScalarField, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    synthesize_measurements(truth, sensors, sigma, seed)
}

/// Settings of the online stage shared by the pipeline and stand-alone runs.
#[derive(Debug, Clone)]
pub struct OnlineSettings {
    pub seed: u64,
    pub m_max: usize,
    /// TR-GEIM weight; the noise level when absent.
    pub lambda: Option<f64>,
    /// Fixed PBDW weight; tuned on validation snapshots when absent.
    pub xi: Option<f64>,
    pub xi_grid: Vec<f64>,
    pub validation: usize,
}

impl OnlineSettings {
    pub fn from_config(cfg: &BenchmarkConfig) -> Self {
        let r = &cfg.reconstruction;
        Self {
            seed: cfg.seed,
            m_max: r.m_max,
            lambda: r.lambda,
            xi: None,
            xi_grid: r.xi_grid.clone().unwrap_or_else(default_xi_grid),
            validation: cfg.study.validation,
        }
    }
}

/// Per-M errors and final estimates of one field over a prediction set.
pub struct FieldOnline {
    pub errors: BTreeMap<(Method, usize), ErrorPair>,
    /// PBDW weight per M.
    pub xi: Vec<f64>,
    /// Estimates at the largest M per method, one per prediction snapshot.
    pub finals: BTreeMap<Method, Vec<ScalarField>>,
}

pub fn online_field(
    settings: &OnlineSettings,
    field_index: usize,
    models: &FieldModels,
    truth: &[ScalarField],
    sigma: f64,
) -> Result<FieldOnline> {
    let lambda = settings.lambda.unwrap_or(sigma);
    let fi = field_index as u64;

    let m_pbdw = available(Method::Pbdw, models, settings.m_max);
    let xi = match (m_pbdw, settings.xi) {
        (0, _) => Vec::new(),
        (_, Some(x)) => vec![x; m_pbdw],
        (_, None) => {
            let pbdw = models.pbdw()?;
            let validation: Vec<(usize, Vec<f64>)> = evenly_spaced(truth.len(), settings.validation)
                .into_iter()
                .map(|s| {
                    let seed = derive_seed(settings.seed, &[STREAM_VALIDATION, fi, s as u64, 0]);
                    Ok((s, noisy(&pbdw.sensors[..m_pbdw], &truth[s], sigma, seed)?))
                })
                .collect::<Result<_>>()?;
            (1..=m_pbdw)
                .map(|m| {
                    let cases: Vec<ValidationCase> = validation
                        .iter()
                        .map(|(s, y)| ValidationCase {
                            truth: truth[*s].clone(),
                            readings: y[..m].to_vec(),
                        })
                        .collect();
                    tune_xi(pbdw, &cases, &settings.xi_grid)
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };

    let methods: Vec<(Method, usize)> = Method::ALL
        .iter()
        .map(|&me| (me, available(me, models, settings.m_max)))
        .filter(|(_, m)| *m > 0)
        .collect();
    type PerSnapshot = Vec<(Vec<(f64, f64)>, ScalarField)>;
    let per_snapshot: Vec<PerSnapshot> = truth
        .par_iter()
        .enumerate()
        .map(|(s, u)| {
            let norm_u = l2_norm(u);
            methods
                .iter()
                .map(|&(me, m_top)| {
                    let seed = derive_seed(settings.seed, &[me.stream(), fi, s as u64, 0]);
                    let y = noisy(&sensors_for(me, models)?[..m_top], u, sigma, seed)?;
                    let mut norms = Vec::with_capacity(m_top);
                    let mut last = None;
                    for m in 1..=m_top {
                        let e = estimate(me, models, &y, m, lambda, xi.get(m - 1).copied().unwrap_or(0.0))?;
                        norms.push((l2_norm(&u.sub(&e)?), norm_u));
                        if m == m_top {
                            last = Some(e);
                        }
                    }
                    Ok((norms, last.expect("at least one sensor")))
                })
                .collect::<Result<PerSnapshot>>()
        })
        .collect::<Result<_>>()?;

    let mut errors = BTreeMap::new();
    let mut finals = BTreeMap::new();
    for (k, &(me, m_top)) in methods.iter().enumerate() {
        for m in 1..=m_top {
            let norms: Vec<(f64, f64)> = per_snapshot.iter().map(|ps| ps[k].0[m - 1]).collect();
            errors.insert((me, m), average_errors(&norms)?);
        }
        finals.insert(me, per_snapshot.iter().map(|ps| ps[k].1.clone()).collect());
    }
    Ok(FieldOnline { errors, xi, finals })
}

fn series_of(
    traj: &Trajectory,
    fields: [&[ScalarField]; 3],
) -> Result<GlobalSeries> {
    let pick = |f: &[ScalarField]| traj.indices.iter().map(|&i| f[i].clone()).collect::<Vec<_>>();
    global_outputs(
        &pick(fields[0]),
        &pick(fields[1]),
        &pick(fields[2]),
        &traj.materials,
        1.0,
        Some(&traj.reference),
    )
}

fn band_for(
    cfg: &BenchmarkConfig,
    offline: &OfflineModels,
    truth: &SnapshotSet,
    traj: &Trajectory,
    traj_index: usize,
    method: Method,
    sigmas: &[f64; 3],
    xi_final: &[f64; 3],
) -> Result<(Band, Band)> {
    let r = &cfg.reconstruction;
    let n_t = traj.indices.len();
    let tops: Vec<usize> = offline.fields.iter().map(|fm| available(method, fm, r.m_max)).collect();
    let band = uq_bands(cfg.uq.draws, cfg.uq.level, |d| {
        let mut est: [Vec<ScalarField>; 3] = Default::default();
        for (fi, fm) in offline.fields.iter().enumerate() {
            let lambda = r.lambda.unwrap_or(sigmas[fi]);
            let truth_f = truth.field(&fm.field)?;
            for &s in &traj.indices {
                let seed = derive_seed(
                    cfg.seed,
                    &[STREAM_UQ, method.stream(), traj_index as u64, fi as u64, s as u64, d as u64],
                );
                let y = noisy(&sensors_for(method, fm)?[..tops[fi]], &truth_f[s], sigmas[fi], seed)?;
                est[fi].push(estimate(method, fm, &y, tops[fi], lambda, xi_final[fi])?);
            }
        }
        let g = global_outputs(&est[0], &est[1], &est[2], &traj.materials, 1.0, Some(&traj.reference))?;
        Ok([g.power, g.mean_temperature_rise].concat())
    })?;
    let split = |v: &[f64]| (v[..n_t].to_vec(), v[n_t..].to_vec());
    let (pl, tl) = split(&band.lower);
    let (pu, tu) = split(&band.upper);
    let (pm, tm) = split(&band.mean);
    Ok((
        Band {
            lower: pl,
            upper: pu,
            mean: pm,
        },
        Band {
            lower: tl,
            upper: tu,
            mean: tm,
        },
    ))
}

/// Mean relative error of plain and regularised GEIM at `m` sensors over
/// `draws` independent noise realisations.
pub fn noise_study(
    cfg: &BenchmarkConfig,
    offline: &OfflineModels,
    truth: &SnapshotSet,
    sigma_scale: f64,
    m: usize,
    draws: usize,
) -> Result<Vec<NoiseRow>> {
    let r = &cfg.reconstruction;
    offline
        .fields
        .iter()
        .enumerate()
        .filter_map(|(fi, fm)| fm.geim.as_ref().filter(|g| g.stats.is_some()).map(|g| (fi, fm, g)))
        .map(|(fi, fm, geim)| {
            let sigma = r.sigma.get(&fm.field)? * sigma_scale;
            let lambda = r.lambda.unwrap_or(sigma);
            let m = m.min(geim.len());
            let truth_f = truth.field(&fm.field)?;
            let pairs: Vec<(f64, f64)> = (0..draws * truth_f.len())
                .into_par_iter()
                .map(|k| {
                    let (d, s) = (k / truth_f.len(), k % truth_f.len());
                    let u = &truth_f[s];
                    let seed = derive_seed(cfg.seed, &[STREAM_NOISE_STUDY, fi as u64, s as u64, d as u64]);
                    let y = noisy(&geim.magic_sensors[..m], u, sigma, seed)?;
                    let nu = l2_norm(u);
                    let g = geim_online(geim, &y, m)?.1;
                    let t = trgeim_online(geim, &y, m, lambda)?.1;
                    Ok((l2_norm(&u.sub(&g)?) / nu, l2_norm(&u.sub(&t)?) / nu))
                })
                .collect::<Result<_>>()?;
            let n = pairs.len() as f64;
            Ok(NoiseRow {
                field: fm.field.clone(),
                m,
                draws,
                geim: pairs.iter().map(|p| p.0).sum::<f64>() / n,
                trgeim: pairs.iter().map(|p| p.1).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Runs every stage and writes the report into `opts.out_dir`.
pub fn run_pipeline(cfg: &BenchmarkConfig, opts: &PipelineOptions) -> Result<ReconstructionReport> {
    fs::create_dir_all(&opts.out_dir)?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let data = generate(cfg, opts.cache_dir.as_deref()).map_err(|e| e.in_stage("snapshots"))?;
    lap("snapshots", &mut timings);
    let offline = train_offline(cfg, &data.train).map_err(|e| e.in_stage("offline"))?;
    lap("offline", &mut timings);
    let report = online_and_report(cfg, opts, &data, &offline, &mut timings)?;
    Ok(report)
}

fn online_and_report(
    cfg: &BenchmarkConfig,
    opts: &PipelineOptions,
    data: &StudyData,
    offline: &OfflineModels,
    timings: &mut Vec<(String, f64)>,
) -> Result<ReconstructionReport> {
    let r = &cfg.reconstruction;
    let mut clock = Instant::now();
    let settings = OnlineSettings::from_config(cfg);
    let sigmas: [f64; 3] = [
        r.sigma.get(FIELDS[0])? * opts.sigma_scale,
        r.sigma.get(FIELDS[1])? * opts.sigma_scale,
        r.sigma.get(FIELDS[2])? * opts.sigma_scale,
    ];
    let online = offline
        .fields
        .iter()
        .enumerate()
        .map(|(fi, fm)| online_field(&settings, fi, fm, data.truth.field(&fm.field)?, sigmas[fi]))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("online"))?;

    let mut report = ReconstructionReport {
        benchmark: cfg.name.clone(),
        model: cfg.study.model,
        m_max: r.m_max,
        n_predict: data.truth.len(),
        errors: BTreeMap::new(),
        baseline: BTreeMap::new(),
        xi: BTreeMap::new(),
        inf_sup: BTreeMap::new(),
        geim_train_errors: BTreeMap::new(),
        sigma: FIELDS.iter().zip(sigmas).map(|(f, s)| (f.to_string(), s)).collect(),
        global: Vec::new(),
        bands: Vec::new(),
        noise: Vec::new(),
        timings: Vec::new(),
    };
    for (fm, on) in offline.fields.iter().zip(&online) {
        for ((me, m), e) in &on.errors {
            report.errors.insert((*me, fm.field.clone(), *m), *e);
        }
        for (k, xi) in on.xi.iter().enumerate() {
            report.xi.insert((fm.field.clone(), k + 1), *xi);
        }
        if let Some(p) = &fm.pbdw {
            report.inf_sup.insert(fm.field.clone(), p.inf_sup_history());
        }
        if let Some(g) = &fm.geim {
            report.geim_train_errors.insert(fm.field.clone(), g.train_errors.clone());
        }
        let truth_f = data.truth.field(&fm.field)?;
        let base_f = data.baseline.field(&fm.field)?;
        report.baseline.insert(
            fm.field.clone(),
            average_errors(
                &truth_f
                    .iter()
                    .zip(base_f)
                    .map(|(u, b)| Ok((l2_norm(&u.sub(b)?), l2_norm(u))))
                    .collect::<Result<Vec<_>>>()?,
            )?,
        );
    }
    timings.push(("online".into(), clock.elapsed().as_secs_f64()));
    clock = Instant::now();

    // Global outputs of truth, model and the final estimates.
    let label = model_label(cfg.study.model).to_string();
    let finals_of = |me: Method| -> Option<[&[ScalarField]; 3]> {
        let f = |k: usize| online[k].finals.get(&me).map(Vec::as_slice);
        Some([f(0)?, f(1)?, f(2)?])
    };
    let truth_fields = [
        data.truth.field(FIELDS[0])?,
        data.truth.field(FIELDS[1])?,
        data.truth.field(FIELDS[2])?,
    ];
    let base_fields = [
        data.baseline.field(FIELDS[0])?,
        data.baseline.field(FIELDS[1])?,
        data.baseline.field(FIELDS[2])?,
    ];
    for (ti, traj) in data.trajectories.iter().enumerate() {
        let mut series: Vec<(String, GlobalSeries)> = vec![
            ("truth".into(), series_of(traj, truth_fields)?),
            (label.clone(), series_of(traj, base_fields)?),
        ];
        for me in Method::ALL {
            if let Some(f) = finals_of(me) {
                series.push((me.name().to_string(), series_of(traj, f)?));
            }
        }
        for (k, &s) in traj.indices.iter().enumerate() {
            report.global.push(GlobalRow {
                trajectory: ti,
                t: data.truth.parameters()[s][0],
                power: series.iter().map(|(n, g)| (n.clone(), g.power[k])).collect(),
                temperature_rise: series.iter().map(|(n, g)| (n.clone(), g.mean_temperature_rise[k])).collect(),
            });
        }
        if opts.uncertainty {
            for me in [Method::TrGeim, Method::Pbdw] {
                if finals_of(me).is_none() {
                    continue;
                }
                let xi_final: [f64; 3] = std::array::from_fn(|k| online[k].xi.last().copied().unwrap_or(0.0));
                let (p, t) = band_for(cfg, offline, &data.truth, traj, ti, me, &sigmas, &xi_final)
                    .map_err(|e| e.in_stage("uncertainty"))?;
                let truth_series = &series[0].1;
                report.bands.push(BandSet {
                    trajectory: ti,
                    method: me,
                    power_coverage: p.coverage(&truth_series.power),
                    temperature_coverage: t.coverage(&truth_series.mean_temperature_rise),
                    power: p,
                    temperature_rise: t,
                });
            }
        }
    }
    timings.push(("global outputs".into(), clock.elapsed().as_secs_f64()));
    clock = Instant::now();

    if opts.noise_study {
        report.noise = noise_study(cfg, offline, &data.truth, opts.sigma_scale, r.m_max, cfg.uq.noise_draws)
            .map_err(|e| e.in_stage("noise study"))?;
        timings.push(("noise study".into(), clock.elapsed().as_secs_f64()));
    }

    let write_start = Instant::now();
    write_report(cfg, opts, data, offline, &online, &report).map_err(|e| e.in_stage("report"))?;
    timings.push(("report".into(), write_start.elapsed().as_secs_f64()));
    report.timings = timings.clone();
    let mut t = String::new();
    for (name, secs) in &report.timings {
        t.push_str(&format!("{name}: {secs:.2} s\n"));
    }
    fs::write(opts.out_dir.join("timings.txt"), t)?;
    Ok(report)
}

fn write_report(
    cfg: &BenchmarkConfig,
    opts: &PipelineOptions,
    data: &StudyData,
    offline: &OfflineModels,
    online: &[FieldOnline],
    report: &ReconstructionReport,
) -> Result<()> {
    let out = &opts.out_dir;
    let label = model_label(cfg.study.model);

    let mut conv = CsvTable::new(&["method", "field", "M", "E", "epsilon"]);
    for ((me, f, m), e) in &report.errors {
        conv.push(&[Cell::Text(me.name()), Cell::Text(f), Cell::Int(*m), Cell::Num(e.absolute), Cell::Num(e.relative)]);
    }
    conv.write(&out.join("convergence.csv"))?;

    let mut summary = CsvTable::new(&["field", "method", "M", "E", "epsilon"]);
    for f in FIELDS {
        let b = report.baseline[f];
        summary.push(&[Cell::Text(f), Cell::Text(label), Cell::Int(0), Cell::Num(b.absolute), Cell::Num(b.relative)]);
        for me in Method::ALL {
            if let Some(m) = report.last_m(me, f) {
                let e = report.errors[&(me, f.to_string(), m)];
                summary.push(&[Cell::Text(f), Cell::Text(me.name()), Cell::Int(m), Cell::Num(e.absolute), Cell::Num(e.relative)]);
            }
        }
    }
    summary.write(&out.join("summary.csv"))?;

    let mut xi = CsvTable::new(&["field", "M", "xi"]);
    for ((f, m), v) in &report.xi {
        xi.push(&[Cell::Text(f), Cell::Int(*m), Cell::Num(*v)]);
    }
    xi.write(&out.join("xi.csv"))?;

    let mut beta = CsvTable::new(&["field", "M", "inf_sup"]);
    for (f, h) in &report.inf_sup {
        for (k, b) in h.iter().enumerate() {
            beta.push(&[Cell::Text(f), Cell::Int(k + 1), Cell::Num(*b)]);
        }
    }
    beta.write(&out.join("inf_sup.csv"))?;

    write_sensor_tables(out, &offline.fields)?;

    let names: Vec<String> = report.global.first().map(|g| g.power.keys().cloned().collect()).unwrap_or_default();
    let pnames = cfg.parameter_names();
    let mut header: Vec<String> = vec!["trajectory".into(), "t".into()];
    header.extend(pnames.iter().cloned());
    header.extend(names.iter().map(|n| format!("P_{n}")));
    header.extend(names.iter().map(|n| format!("dT_{n}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut glob = CsvTable::new(&header_refs);
    for g in &report.global {
        let params = &data.trajectories[g.trajectory].params;
        let mut cells = vec![Cell::Int(g.trajectory), Cell::Num(g.t)];
        cells.extend(params.iter().map(|p| Cell::Num(*p)));
        cells.extend(names.iter().map(|n| Cell::Num(g.power[n])));
        cells.extend(names.iter().map(|n| Cell::Num(g.temperature_rise[n])));
        glob.push(&cells);
    }
    glob.write(&out.join("global.csv"))?;

    if !report.bands.is_empty() {
        let mut bands = CsvTable::new(&["trajectory", "method", "t", "P_lower", "P_upper", "dT_lower", "dT_upper"]);
        let mut cov = CsvTable::new(&["trajectory", "method", "draws", "level", "P_coverage", "dT_coverage"]);
        for b in &report.bands {
            let traj = &data.trajectories[b.trajectory];
            for (k, &s) in traj.indices.iter().enumerate() {
                bands.push(&[
                    Cell::Int(b.trajectory),
                    Cell::Text(b.method.name()),
                    Cell::Num(data.truth.parameters()[s][0]),
                    Cell::Num(b.power.lower[k]),
                    Cell::Num(b.power.upper[k]),
                    Cell::Num(b.temperature_rise.lower[k]),
                    Cell::Num(b.temperature_rise.upper[k]),
                ]);
            }
            cov.push(&[
                Cell::Int(b.trajectory),
                Cell::Text(b.method.name()),
                Cell::Int(cfg.uq.draws),
                Cell::Num(cfg.uq.level),
                Cell::Num(b.power_coverage),
                Cell::Num(b.temperature_coverage),
            ]);
        }
        bands.write(&out.join("bands.csv"))?;
        cov.write(&out.join("coverage.csv"))?;
    }

    if !report.noise.is_empty() {
        let mut noise = CsvTable::new(&["field", "M", "draws", "GEIM", "TR-GEIM"]);
        for n in &report.noise {
            noise.push(&[Cell::Text(&n.field), Cell::Int(n.m), Cell::Int(n.draws), Cell::Num(n.geim), Cell::Num(n.trgeim)]);
        }
        noise.write(&out.join("noise.csv"))?;
    }

    // Contour dumps at the last prediction snapshot.
    let last = data.truth.len() - 1;
    let mesh = data.truth.mesh();
    for (fi, f) in FIELDS.iter().enumerate() {
        let mut cols = vec!["x".to_string(), "y".to_string(), "truth".to_string(), label.to_string()];
        let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| online[fi].finals.contains_key(m)).collect();
        cols.extend(methods.iter().map(|m| m.name().to_string()));
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let mut t = CsvTable::new(&col_refs);
        let u = data.truth.snapshot(last, f)?;
        let b = data.baseline.snapshot(last, f)?;
        for c in 0..mesh.n_cells() {
            let (x, y) = mesh.cell_center(c);
            let mut cells = vec![Cell::Num(x), Cell::Num(y), Cell::Num(u.values()[c]), Cell::Num(b.values()[c])];
            cells.extend(methods.iter().map(|m| Cell::Num(online[fi].finals[m][last].values()[c])));
            t.push(&cells);
        }
        t.write(&out.join(format!("contour_{f}.csv")))?;
    }

    if opts.dump_fields {
        let fields_dir = out.join("fields");
        write_snapshots(&fields_dir.join("truth"), &data.truth, &cfg.name, cfg.seed, &[])?;
        for me in Method::ALL {
            if !online.iter().all(|o| o.finals.contains_key(&me)) {
                continue;
            }
            let mut set = SnapshotSet::new(mesh.clone(), data.truth.parameter_names().to_vec());
            for s in 0..data.truth.len() {
                let fields = FIELDS
                    .iter()
                    .enumerate()
                    .map(|(fi, f)| Ok((f.to_string(), data.truth.snapshot(s, f)?.sub(&online[fi].finals[&me][s])?)))
                    .collect::<Result<Vec<_>>>()?;
                set.push(data.truth.parameters()[s].clone(), fields)?;
            }
            let m_used: Vec<(String, f64)> = FIELDS
                .iter()
                .map(|f| (format!("M_{f}"), report.last_m(me, f).unwrap_or(0) as f64))
                .collect();
            let scalars: Vec<(&str, f64)> = m_used.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            write_snapshots(&fields_dir.join(format!("residual_{}", me.slug())), &set, &cfg.name, cfg.seed, &scalars)?;
        }
    }

    write_charts(cfg, out, data, report)?;
    Ok(())
}

/// Selected sensors and GEIM training errors per field.
pub fn write_sensor_tables(out: &Path, fields: &[FieldModels]) -> Result<()> {
    let geim: Vec<(&str, &GeimModel)> = fields.iter().filter_map(|f| Some((f.field.as_str(), f.geim.as_ref()?))).collect();
    if !geim.is_empty() {
        let mut t = CsvTable::new(&["field", "M", "max_train_error", "sensor_index", "x", "y"]);
        for (field, g) in geim {
            for (k, e) in g.train_errors.iter().enumerate() {
                let (x, y) = g.magic_sensors[k].center();
                t.push(&[
                    Cell::Text(field),
                    Cell::Int(k + 1),
                    Cell::Num(*e),
                    Cell::Int(g.sensor_indices[k]),
                    Cell::Num(x),
                    Cell::Num(y),
                ]);
            }
        }
        t.write(&out.join("geim_offline.csv"))?;
    }
    let pbdw: Vec<(&str, &PbdwModel)> = fields.iter().filter_map(|f| Some((f.field.as_str(), f.pbdw.as_ref()?))).collect();
    if !pbdw.is_empty() {
        let mut t = CsvTable::new(&["field", "M", "sensor_index", "x", "y", "inf_sup"]);
        for (field, p) in pbdw {
            let beta = p.inf_sup_history();
            for (k, s) in p.sensors.iter().enumerate() {
                let (x, y) = s.center();
                t.push(&[
                    Cell::Text(field),
                    Cell::Int(k + 1),
                    Cell::Int(p.sensor_indices.get(k).copied().unwrap_or(k)),
                    Cell::Num(x),
                    Cell::Num(y),
                    Cell::Num(beta[k]),
                ]);
            }
        }
        t.write(&out.join("pbdw_sensors.csv"))?;
    }
    Ok(())
}

fn write_charts(cfg: &BenchmarkConfig, out: &Path, data: &StudyData, report: &ReconstructionReport) -> Result<()> {
    let label = model_label(cfg.study.model);
    let mut charts: Vec<(String, String)> = Vec::new();
    for f in FIELDS {
        let mut series = Vec::new();
        for me in Method::ALL {
            let pts: Vec<(f64, f64)> = report
                .errors
                .iter()
                .filter(|((m, fld, _), _)| *m == me && fld == f)
                .map(|((_, _, k), e)| (*k as f64, e.relative))
                .collect();
            if !pts.is_empty() {
                series.push(Series {
                    name: me.name().into(),
                    x: pts.iter().map(|p| p.0).collect(),
                    y: pts.iter().map(|p| p.1).collect(),
                    dashed: false,
                });
            }
        }
        let ms = report.m_values();
        if let (Some(lo), Some(hi)) = (ms.first(), ms.last()) {
            let b = report.baseline[f].relative;
            series.push(Series {
                name: label.into(),
                x: vec![*lo as f64, *hi as f64],
                y: vec![b, b],
                dashed: true,
            });
        }
        let axes = Axes {
            title: format!("{}: relative error, {f}", cfg.name),
            x_label: "sensors M".into(),
            y_label: "mean relative L2 error".into(),
            log_y: true,
        };
        charts.push((format!("convergence_{f}.svg"), line_chart(&axes, &series, &[])));
    }

    let groups: Vec<String> = FIELDS.iter().map(|s| s.to_string()).collect();
    let mut names = vec![label.to_string()];
    names.extend(Method::ALL.iter().map(|m| m.name().to_string()));
    for (file, pick, ylabel) in [
        ("bars_relative.svg", true, "mean relative L2 error"),
        ("bars_absolute.svg", false, "mean absolute L2 error"),
    ] {
        let values: Vec<Vec<f64>> = FIELDS
            .iter()
            .map(|f| {
                let choose = |e: ErrorPair| if pick { e.relative } else { e.absolute };
                let mut row = vec![choose(report.baseline[*f])];
                for me in Method::ALL {
                    row.push(
                        report
                            .last_m(me, f)
                            .and_then(|m| report.error(me, f, m))
                            .map_or(f64::NAN, choose),
                    );
                }
                row
            })
            .collect();
        let axes = Axes {
            title: format!("{}: errors at the largest M", cfg.name),
            x_label: "field".into(),
            y_label: ylabel.into(),
            log_y: true,
        };
        charts.push((file.into(), bar_chart(&axes, &groups, &names, &values)));
    }

    if let Some(traj) = data.trajectories.first() {
        let rows: Vec<&GlobalRow> = report.global.iter().filter(|g| g.trajectory == 0).collect();
        let t: Vec<f64> = rows.iter().map(|g| g.t).collect();
        for (file, title, power) in [
            ("power.svg", "relative power", true),
            ("temperature.svg", "mean temperature rise (K)", false),
        ] {
            let keys: Vec<String> = rows.first().map(|g| g.power.keys().cloned().collect()).unwrap_or_default();
            let series: Vec<Series> = keys
                .iter()
                .map(|k| Series {
                    name: k.clone(),
                    x: t.clone(),
                    y: rows
                        .iter()
                        .map(|g| if power { g.power[k] } else { g.temperature_rise[k] })
                        .collect(),
                    dashed: k == label,
                })
                .collect();
            let bands: Vec<ShadedBand> = report
                .bands
                .iter()
                .filter(|b| b.trajectory == 0)
                .map(|b| {
                    let band = if power { &b.power } else { &b.temperature_rise };
                    ShadedBand {
                        name: format!("{} {:.0}%", b.method.name(), 100.0 * cfg.uq.level),
                        x: t.clone(),
                        lower: band.lower.clone(),
                        upper: band.upper.clone(),
                    }
                })
                .collect();
            let axes = Axes {
                title: format!("{}: {title} {:?}", cfg.name, traj.params),
                x_label: "t (s)".into(),
                y_label: title.into(),
                log_y: false,
            };
            charts.push((file.into(), line_chart(&axes, &series, &bands)));
        }
    }
    for (name, svg) in charts {
        fs::write(out.join(name), svg)?;
    }
    Ok(())
}
