//! Temperature feedback, transient perturbations and the coupled
//! neutronics/heat drivers at three fidelities.
//!
//! * `Fom`: per step, cross sections are evaluated at the previous
//!   temperature, the flux is advanced, then the temperature with the power
//!   of the new flux.
//! * `Afom`: neutronics and heat are solved over the whole time window in
//!   turn, exchanging POD-I surrogates of power and temperature, for a fixed
//!   number of weak-coupling iterations.
//! * `Lcfom`: as `Fom` with every feedback law replaced by its least-squares
//!   line.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{reduce_field, NormKind, ScalarField, StructuredMesh};
use crate::neutronics::{solve_keff, CellMaterials, MaterialTable, NeutronicState, NeutronicsStepper};
use crate::reduction::{compute_pod_energy, podi_eval, podi_train_fields, SnapshotSet};
use crate::thermal::{power_density, HeatSolver, ThermalProperties};

pub const T_REF: f64 = 600.0;
pub const ANL_DIFFUSION_GAMMA: f64 = 3e-3;
pub const ANL_ABSORPTION_GAMMA: f64 = 2.034e-3;
pub const SIN_DIFFUSION_GAMMA: f64 = 2e-2;
pub const TANH_ABSORPTION_GAMMA: f64 = 4e-2;
const SIN_RATE: f64 = 2.75;
const TANH_RATE: f64 = 2.0;

pub const FIELD_T: &str = "T";
pub const FIELD_PHI1: &str = "phi1";
pub const FIELD_PHI2: &str = "phi2";
pub const FIELDS: [&str; 3] = [FIELD_T, FIELD_PHI1, FIELD_PHI2];

fn default_t_ref() -> f64 {
    T_REF
}

/// Temperature dependence of one cross section or diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CouplingLaw {
    /// `ref + γ ln(T / T_ref)`
    LogarithmicANL {
        #[serde(default)]
        reference: f64,
        gamma: f64,
        #[serde(default = "default_t_ref")]
        t_ref: f64,
    },
    /// `ref [1 + γ (√T - √T_ref)]`
    SqrtSigmaA1 {
        #[serde(default)]
        reference: f64,
        gamma: f64,
        #[serde(default = "default_t_ref")]
        t_ref: f64,
    },
    /// `ref [1 + γ sin(2.75 (T - T_ref) / T_ref)]`
    SinDiffusion {
        #[serde(default)]
        reference: f64,
        gamma: f64,
        #[serde(default = "default_t_ref")]
        t_ref: f64,
    },
    /// `ref [1 + γ tanh(2 (T - T_ref) / T_ref)]`
    TanhAbsorption {
        #[serde(default)]
        reference: f64,
        gamma: f64,
        #[serde(default = "default_t_ref")]
        t_ref: f64,
    },
    /// `slope T + intercept`
    Linear { slope: f64, intercept: f64 },
}

impl CouplingLaw {
    pub fn anl_diffusion(reference: f64) -> Self {
        Self::LogarithmicANL {
            reference,
            gamma: ANL_DIFFUSION_GAMMA,
            t_ref: T_REF,
        }
    }

    pub fn anl_absorption(reference: f64) -> Self {
        Self::LogarithmicANL {
            reference,
            gamma: ANL_ABSORPTION_GAMMA,
            t_ref: T_REF,
        }
    }

    pub fn sqrt_absorption(reference: f64, gamma: f64) -> Self {
        Self::SqrtSigmaA1 {
            reference,
            gamma,
            t_ref: T_REF,
        }
    }

    pub fn sin_diffusion(reference: f64) -> Self {
        Self::SinDiffusion {
            reference,
            gamma: SIN_DIFFUSION_GAMMA,
            t_ref: T_REF,
        }
    }

    pub fn tanh_absorption(reference: f64) -> Self {
        Self::TanhAbsorption {
            reference,
            gamma: TANH_ABSORPTION_GAMMA,
            t_ref: T_REF,
        }
    }

    pub fn reference(&self) -> Option<f64> {
        match *self {
            Self::LogarithmicANL { reference, .. }
            | Self::SqrtSigmaA1 { reference, .. }
            | Self::SinDiffusion { reference, .. }
            | Self::TanhAbsorption { reference, .. } => Some(reference),
            Self::Linear { .. } => None,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            Self::LogarithmicANL { gamma, .. }
            | Self::SqrtSigmaA1 { gamma, .. }
            | Self::SinDiffusion { gamma, .. }
            | Self::TanhAbsorption { gamma, .. } => Some(gamma),
            Self::Linear { .. } => None,
        }
    }

    /// Same law anchored at a new reference value; a linear law has no
    /// reference and is returned unchanged.
    pub fn with_reference(self, value: f64) -> Self {
        let mut out = self;
        match &mut out {
            Self::LogarithmicANL { reference, .. }
            | Self::SqrtSigmaA1 { reference, .. }
            | Self::SinDiffusion { reference, .. }
            | Self::TanhAbsorption { reference, .. } => *reference = value,
            Self::Linear { .. } => {}
        }
        out
    }

    pub fn with_gamma(self, value: f64) -> Result<Self> {
        let mut out = self;
        match &mut out {
            Self::LogarithmicANL { gamma, .. }
            | Self::SqrtSigmaA1 { gamma, .. }
            | Self::SinDiffusion { gamma, .. }
            | Self::TanhAbsorption { gamma, .. } => *gamma = value,
            Self::Linear { .. } => {
                return Err(Error::InvalidInput("a linear law has no feedback coefficient".into()))
            }
        }
        Ok(out)
    }
}

pub fn coupling_eval(law: &CouplingLaw, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let t = temperature;
    Ok(match *law {
        CouplingLaw::LogarithmicANL { reference, gamma, t_ref } => reference + gamma * (t / t_ref).ln(),
        CouplingLaw::SqrtSigmaA1 { reference, gamma, t_ref } => reference * (1.0 + gamma * (t.sqrt() - t_ref.sqrt())),
        CouplingLaw::SinDiffusion { reference, gamma, t_ref } => {
            reference * (1.0 + gamma * (SIN_RATE * (t - t_ref) / t_ref).sin())
        }
        CouplingLaw::TanhAbsorption { reference, gamma, t_ref } => {
            reference * (1.0 + gamma * (TANH_RATE * (t - t_ref) / t_ref).tanh())
        }
        CouplingLaw::Linear { slope, intercept } => slope * t + intercept,
    })
}

/// Least-squares line through `n_samples` equispaced evaluations of `law`
/// on `[t_lo, t_hi]`.
pub fn fit_linear_coupling(law: &CouplingLaw, t_lo: f64, t_hi: f64, n_samples: usize) -> Result<CouplingLaw> {
    if !(t_hi > t_lo) {
        return Err(Error::DegenerateRange { lo: t_lo, hi: t_hi });
    }
    if n_samples < 2 {
        return Err(Error::InvalidInput("a linear fit needs at least two samples".into()));
    }
    let step = (t_hi - t_lo) / (n_samples - 1) as f64;
    let temps: Vec<f64> = (0..n_samples).map(|k| t_lo + k as f64 * step).collect();
    let values = temps.iter().map(|t| coupling_eval(law, *t)).collect::<Result<Vec<f64>>>()?;
    let n = n_samples as f64;
    let t_mean = temps.iter().sum::<f64>() / n;
    let f_mean = values.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, f) in temps.iter().zip(&values) {
        sxy += (t - t_mean) * (f - f_mean);
        sxx += (t - t_mean) * (t - t_mean);
    }
    let slope = sxy / sxx;
    Ok(CouplingLaw::Linear {
        slope,
        intercept: f_mean - slope * t_mean,
    })
}

/// Time profile of a multiplicative perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Profile {
    /// 1 up to t = 0, `value` afterwards
    Step { value: f64 },
    /// `1 - slope t` up to `ramp_end`, `value` afterwards
    RampThenStep { slope: f64, ramp_end: f64, value: f64 },
}

impl Profile {
    pub fn factor(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match *self {
            Profile::Step { value } => value,
            Profile::RampThenStep { slope, ramp_end, value } => {
                if t <= ramp_end {
                    1.0 - slope * t
                } else {
                    value
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub region: u32,
    pub groups: Vec<usize>,
    pub profile: Profile,
}

/// Multiplicative factors applied to the absorption cross sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransientSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl TransientSchedule {
    /// Absorption of both groups in the rodded region drops by 10 % at t = 0.
    pub fn iaea(region: u32) -> Self {
        Self {
            entries: vec![ScheduleEntry {
                region,
                groups: vec![0, 1],
                profile: Profile::Step { value: 0.9 },
            }],
        }
    }

    /// Thermal absorption in `region` ramps down over 0.2 s then holds.
    pub fn twigl(region: u32) -> Self {
        Self {
            entries: vec![ScheduleEntry {
                region,
                groups: vec![1],
                profile: Profile::RampThenStep {
                    slope: 0.11667,
                    ramp_end: 0.2,
                    value: 0.97666,
                },
            }],
        }
    }
}

pub fn transient_factor(schedule: &TransientSchedule, region: u32, group: usize, t: f64) -> f64 {
    schedule
        .entries
        .iter()
        .filter(|e| e.region == region && e.groups.contains(&group))
        .map(|e| e.profile.factor(t))
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Property {
    Diffusion,
    Absorption,
}

/// One temperature-dependent quantity; the law's reference is replaced cell
/// by cell with the (perturbed) material value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub property: Property,
    pub group: usize,
    pub law: CouplingLaw,
    /// Regions affected; all when absent.
    #[serde(default)]
    pub regions: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ParameterRole {
    /// Feedback coefficient of the feedback entry with this index.
    CouplingGamma { entry: usize },
    /// Diffusion coefficient of one group in one region.
    Diffusion { region: u32, group: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub role: ParameterRole,
    pub lo: f64,
    pub hi: f64,
}

/// Scale of the initial state: flux level and total power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalisation {
    /// Domain average of the fast flux at t = 0.
    pub mean_fast_flux: f64,
    /// Total power at t = 0 (W per cm of height).
    pub initial_power: f64,
}

impl Default for Normalisation {
    fn default() -> Self {
        Self {
            mean_fast_flux: 1.0,
            initial_power: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub t_lo: f64,
    pub t_hi: f64,
    pub samples: usize,
}

impl Default for LinearFit {
    fn default() -> Self {
        Self {
            t_lo: 600.0,
            t_hi: 1200.0,
            samples: 601,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    Fom,
    Afom,
    Lcfom,
}

impl CouplingMode {
    pub fn name(&self) -> &'static str {
        match self {
            CouplingMode::Fom => "fom",
            CouplingMode::Afom => "afom",
            CouplingMode::Lcfom => "lcfom",
        }
    }
}

impl std::str::FromStr for CouplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fom" => Ok(Self::Fom),
            "afom" => Ok(Self::Afom),
            "lcfom" => Ok(Self::Lcfom),
            other => Err(Error::InvalidInput(format!("unknown coupling mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledProblem {
    pub mesh: Arc<StructuredMesh>,
    pub materials: MaterialTable,
    pub thermal: ThermalProperties,
    pub feedback: Vec<FeedbackEntry>,
    pub schedule: TransientSchedule,
    pub parameters: Vec<ParameterSpec>,
    pub normalisation: Normalisation,
    pub linear_fit: LinearFit,
    pub initial_temperature: f64,
    pub keff_tol: f64,
    pub keff_max_iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientOptions {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: f64,
    /// Energy fraction discarded by the aFOM surrogates.
    pub surrogate_tol: f64,
    pub weak_iterations: usize,
}

impl TransientOptions {
    pub fn new(dt: f64, t_end: f64, sample_every: f64) -> Self {
        Self {
            dt,
            t_end,
            sample_every,
            surrogate_tol: 1e-8,
            weak_iterations: 2,
        }
    }

    /// Number of steps and steps per sample.
    fn steps(&self) -> Result<(usize, usize)> {
        if !(self.dt > 0.0 && self.t_end > 0.0 && self.sample_every > 0.0) {
            return Err(Error::InvalidInput("time step, horizon and sampling must be positive".into()));
        }
        let per_sample = (self.sample_every / self.dt).round();
        if per_sample < 1.0 || (per_sample * self.dt - self.sample_every).abs() > 1e-9 * self.sample_every {
            return Err(Error::InvalidInput("sampling interval must be a multiple of the time step".into()));
        }
        let samples = (self.t_end / self.sample_every).round();
        if (samples * self.sample_every - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::InvalidInput("horizon must be a multiple of the sampling interval".into()));
        }
        Ok((samples as usize * per_sample as usize, per_sample as usize))
    }
}

/// Fields sampled along one transient.
#[derive(Debug, Clone)]
pub struct TransientRun {
    pub times: Vec<f64>,
    pub temperature: Vec<ScalarField>,
    pub fast_flux: Vec<ScalarField>,
    pub thermal_flux: Vec<ScalarField>,
    /// Total power at each sample.
    pub power: Vec<f64>,
    pub p0: f64,
    pub k_eff: f64,
}

impl TransientRun {
    /// Snapshot set with parameters `(t, params...)`.
    pub fn to_snapshots(&self, parameter_names: &[String], params: &[f64]) -> Result<SnapshotSet> {
        let mut names = vec!["t".to_string()];
        names.extend(parameter_names.iter().cloned());
        let mesh = self.temperature[0].mesh().clone();
        let mut set = SnapshotSet::new(mesh, names);
        for (k, t) in self.times.iter().enumerate() {
            let mut mu = vec![*t];
            mu.extend_from_slice(params);
            set.push(
                mu,
                vec![
                    (FIELD_T.to_string(), self.temperature[k].clone()),
                    (FIELD_PHI1.to_string(), self.fast_flux[k].clone()),
                    (FIELD_PHI2.to_string(), self.thermal_flux[k].clone()),
                ],
            )?;
        }
        Ok(set)
    }

    pub fn relative_power(&self) -> Vec<f64> {
        self.power.iter().map(|p| p / self.power[0]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    Law(CouplingLaw),
    /// Fitted line as an affine function of the reference value.
    Line { m0: f64, q0: f64, dm: f64, dq: f64 },
}

impl Rule {
    fn eval(&self, reference: f64, t: f64) -> Result<f64> {
        match self {
            Rule::Law(law) => coupling_eval(&law.with_reference(reference), t),
            Rule::Line { m0, q0, dm, dq } => {
                if !(t > 0.0) {
                    return Err(Error::NonPositiveTemperature(t));
                }
                Ok((m0 + reference * dm) * t + q0 + reference * dq)
            }
        }
    }
}

struct PreparedFeedback {
    property: Property,
    group: usize,
    cells: Vec<usize>,
    rule: Rule,
}

/// A problem instance at one parameter point.
struct Instance<'a> {
    problem: &'a CoupledProblem,
    base: CellMaterials,
    feedback: Vec<PreparedFeedback>,
    /// Cells per region, for the schedule.
    schedule_cells: Vec<(usize, Vec<usize>)>,
}

impl<'a> Instance<'a> {
    fn new(problem: &'a CoupledProblem, params: &[f64], linearise: bool) -> Result<Self> {
        if params.len() != problem.parameters.len() {
            return Err(Error::SizeMismatch {
                expected: problem.parameters.len(),
                got: params.len(),
            });
        }
        let mut table = problem.materials.clone();
        let mut feedback = problem.feedback.clone();
        for (spec, &value) in problem.parameters.iter().zip(params) {
            let span = (spec.hi - spec.lo).abs().max(spec.hi.abs()).max(1e-300);
            if !(value >= spec.lo - 1e-12 * span && value <= spec.hi + 1e-12 * span) {
                return Err(Error::ParameterOutOfRange {
                    name: spec.name.clone(),
                    value,
                    lo: spec.lo,
                    hi: spec.hi,
                });
            }
            match &spec.role {
                ParameterRole::CouplingGamma { entry } => {
                    let e = feedback
                        .get_mut(*entry)
                        .ok_or_else(|| Error::Config(format!("parameter {} names missing feedback entry", spec.name)))?;
                    e.law = e.law.with_gamma(value)?;
                }
                ParameterRole::Diffusion { region, group } => {
                    let m = table
                        .region_mut(*region)
                        .ok_or_else(|| Error::Config(format!("parameter {} names missing region", spec.name)))?;
                    *m.diffusion
                        .get_mut(*group)
                        .ok_or_else(|| Error::Config(format!("parameter {} names missing group", spec.name)))? = value;
                }
            }
        }
        let table = MaterialTable::new(table.regions().to_vec(), table.kinetics().clone())?;
        let mesh = &problem.mesh;
        let base = table.at_cells(mesh)?;
        let prepared = feedback
            .iter()
            .map(|e| {
                let cells = (0..mesh.n_cells())
                    .filter(|&c| e.regions.as_ref().is_none_or(|r| r.contains(&mesh.region(c))))
                    .collect();
                let rule = match (linearise, e.law) {
                    (true, CouplingLaw::Linear { .. }) | (false, _) => Rule::Law(e.law),
                    (true, law) => {
                        let fit = &problem.linear_fit;
                        let line = |r: f64| -> Result<(f64, f64)> {
                            match fit_linear_coupling(&law.with_reference(r), fit.t_lo, fit.t_hi, fit.samples)? {
                                CouplingLaw::Linear { slope, intercept } => Ok((slope, intercept)),
                                _ => unreachable!("fit returns a line"),
                            }
                        };
                        let (m0, q0) = line(0.0)?;
                        let (m1, q1) = line(1.0)?;
                        Rule::Line {
                            m0,
                            q0,
                            dm: m1 - m0,
                            dq: q1 - q0,
                        }
                    }
                };
                if e.group >= 2 {
                    return Err(Error::Config(format!("feedback group {} out of range", e.group)));
                }
                Ok(PreparedFeedback {
                    property: e.property,
                    group: e.group,
                    cells,
                    rule,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule_cells = problem
            .schedule
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| (k, (0..mesh.n_cells()).filter(|&c| mesh.region(c) == e.region).collect()))
            .collect();
        Ok(Self {
            problem,
            base,
            feedback: prepared,
            schedule_cells,
        })
    }

    /// Cell materials at time `t` and (optionally) a temperature field.
    fn materials_at(&self, temperature: Option<&ScalarField>, t: f64) -> Result<CellMaterials> {
        let mut m = self.base.clone();
        for (k, cells) in &self.schedule_cells {
            let entry = &self.problem.schedule.entries[*k];
            let f = entry.profile.factor(t);
            for &g in &entry.groups {
                if g >= 2 {
                    return Err(Error::Config(format!("schedule group {g} out of range")));
                }
                for &c in cells {
                    m.absorption[g][c] *= f;
                }
            }
        }
        if let Some(temp) = temperature {
            for fb in &self.feedback {
                let target = match fb.property {
                    Property::Diffusion => &mut m.diffusion[fb.group],
                    Property::Absorption => &mut m.absorption[fb.group],
                };
                for &c in &fb.cells {
                    target[c] = fb.rule.eval(target[c], temp.values()[c])?;
                }
            }
        }
        Ok(m)
    }

    fn initial_state(&self) -> Result<(NeutronicState, f64)> {
        let mats = self.materials_at(None, 0.0)?;
        let mesh = &self.problem.mesh;
        let mut state = solve_keff(mesh, &mats, self.problem.keff_tol, self.problem.keff_max_iter)
            .map_err(|e| e.in_stage("criticality"))?;
        let norm = &self.problem.normalisation;
        let mean_fast = reduce_field(&state.flux[0], NormKind::Integral) / mesh.area();
        state.scale(norm.mean_fast_flux / mean_fast);
        let fission = mats.fission_rate(&state.flux).iter().sum::<f64>() * mesh.cell_area();
        Ok((state, norm.initial_power / fission))
    }
}

fn total_power(q: &ScalarField) -> f64 {
    reduce_field(q, NormKind::Integral)
}

pub fn run_transient(
    problem: &CoupledProblem,
    mode: CouplingMode,
    params: &[f64],
    opts: &TransientOptions,
) -> Result<TransientRun> {
    let (steps, per_sample) = opts.steps()?;
    let instance = Instance::new(problem, params, mode == CouplingMode::Lcfom)?;
    match mode {
        CouplingMode::Fom | CouplingMode::Lcfom => run_semi_implicit(&instance, opts.dt, steps, per_sample),
        CouplingMode::Afom => run_weak(&instance, opts, steps, per_sample),
    }
}

fn run_semi_implicit(inst: &Instance, dt: f64, steps: usize, per_sample: usize) -> Result<TransientRun> {
    let problem = inst.problem;
    let mesh = problem.mesh.clone();
    let (mut state, p0) = inst.initial_state()?;
    let k_eff = state.k_eff;
    let mut temperature = ScalarField::constant(mesh.clone(), problem.initial_temperature);
    let mut heat = HeatSolver::new(mesh.clone(), &problem.thermal)?;
    let mut stepper = NeutronicsStepper::new();
    let mats0 = inst.materials_at(None, 0.0)?;
    let q0 = power_density(&state.flux, &mats0, p0)?;
    let mut run = TransientRun {
        times: vec![0.0],
        temperature: vec![temperature.clone()],
        fast_flux: vec![state.flux[0].clone()],
        thermal_flux: vec![state.flux[1].clone()],
        power: vec![total_power(&q0)],
        p0,
        k_eff,
    };
    for n in 0..steps {
        let t_next = (n + 1) as f64 * dt;
        let mats = inst.materials_at(Some(&temperature), t_next)?;
        state = stepper
            .advance(&state, dt, &mats, k_eff)
            .map_err(|e| e.in_stage("neutronics step"))?;
        let q = power_density(&state.flux, &mats, p0)?;
        temperature = heat.advance(&temperature, &q, dt).map_err(|e| e.in_stage("heat step"))?;
        if (n + 1) % per_sample == 0 {
            run.times.push(t_next);
            run.temperature.push(temperature.clone());
            run.fast_flux.push(state.flux[0].clone());
            run.thermal_flux.push(state.flux[1].clone());
            run.power.push(total_power(&q));
        }
    }
    Ok(run)
}

/// Neutronics over the window with a prescribed temperature history
/// (`None`: uniform initial temperature). Returns fluxes and power densities
/// at every step node.
fn neutronics_pass(
    inst: &Instance,
    initial: &NeutronicState,
    p0: f64,
    dt: f64,
    steps: usize,
    temperatures: Option<&[ScalarField]>,
) -> Result<(Vec<Vec<ScalarField>>, Vec<ScalarField>)> {
    let mesh = &inst.problem.mesh;
    let uniform = ScalarField::constant(mesh.clone(), inst.problem.initial_temperature);
    let mut stepper = NeutronicsStepper::new();
    let mut state = initial.clone();
    let mats0 = inst.materials_at(None, 0.0)?;
    let mut fluxes = vec![state.flux.clone()];
    let mut powers = vec![power_density(&state.flux, &mats0, p0)?];
    for n in 0..steps {
        let temp = temperatures.map_or(&uniform, |t| &t[n]);
        let mats = inst.materials_at(Some(temp), (n + 1) as f64 * dt)?;
        state = stepper.advance(&state, dt, &mats, initial.k_eff)?;
        powers.push(power_density(&state.flux, &mats, p0)?);
        fluxes.push(state.flux.clone());
    }
    Ok((fluxes, powers))
}

fn thermal_pass(inst: &Instance, heat: &mut HeatSolver, dt: f64, powers: &[ScalarField]) -> Result<Vec<ScalarField>> {
    let mut t = ScalarField::constant(inst.problem.mesh.clone(), inst.problem.initial_temperature);
    let mut out = Vec::with_capacity(powers.len());
    out.push(t.clone());
    for q in &powers[1..] {
        t = heat.advance(&t, q, dt)?;
        out.push(t.clone());
    }
    Ok(out)
}

/// POD-I surrogate in time evaluated back at the step nodes.
fn surrogate(times: &[Vec<f64>], fields: &[ScalarField], tol: f64) -> Result<Vec<ScalarField>> {
    let basis = compute_pod_energy(fields, tol)?;
    let model = podi_train_fields(times, fields, basis)?;
    times.iter().map(|t| podi_eval(&model, t)).collect()
}

fn run_weak(inst: &Instance, opts: &TransientOptions, steps: usize, per_sample: usize) -> Result<TransientRun> {
    let problem = inst.problem;
    let dt = opts.dt;
    let (initial, p0) = inst.initial_state()?;
    let times: Vec<Vec<f64>> = (0..=steps).map(|n| vec![n as f64 * dt]).collect();
    let mut heat = HeatSolver::new(problem.mesh.clone(), &problem.thermal)?;
    let (mut fluxes, mut powers) =
        neutronics_pass(inst, &initial, p0, dt, steps, None).map_err(|e| e.in_stage("weak coupling start"))?;
    for it in 0..opts.weak_iterations {
        let stage = format!("weak coupling iteration {}", it + 1);
        let q_model = surrogate(&times, &powers, opts.surrogate_tol).map_err(|e| e.in_stage(&stage))?;
        let temps = thermal_pass(inst, &mut heat, dt, &q_model).map_err(|e| e.in_stage(&stage))?;
        let t_model = surrogate(&times, &temps, opts.surrogate_tol).map_err(|e| e.in_stage(&stage))?;
        (fluxes, powers) =
            neutronics_pass(inst, &initial, p0, dt, steps, Some(&t_model)).map_err(|e| e.in_stage(&stage))?;
    }
    let q_model = surrogate(&times, &powers, opts.surrogate_tol).map_err(|e| e.in_stage("final heat pass"))?;
    let temps = thermal_pass(inst, &mut heat, dt, &q_model).map_err(|e| e.in_stage("final heat pass"))?;

    let mut run = TransientRun {
        times: Vec::new(),
        temperature: Vec::new(),
        fast_flux: Vec::new(),
        thermal_flux: Vec::new(),
        power: Vec::new(),
        p0,
        k_eff: initial.k_eff,
    };
    for n in (0..=steps).step_by(per_sample) {
        run.times.push(n as f64 * dt);
        run.temperature.push(temps[n].clone());
        run.fast_flux.push(fluxes[n][0].clone());
        run.thermal_flux.push(fluxes[n][1].clone());
        run.power.push(total_power(&powers[n]));
    }
    Ok(run)
}

/// Reference cross sections at the given parameters, without feedback or
/// perturbation.
pub fn reference_materials(problem: &CoupledProblem, params: &[f64]) -> Result<CellMaterials> {
    Instance::new(problem, params, false)?.materials_at(None, 0.0)
}

/// Materials at time `t` with feedback from `temperature`, as used by the
/// full-order stepping.
pub fn materials_at(
    problem: &CoupledProblem,
    mode: CouplingMode,
    params: &[f64],
    temperature: Option<&ScalarField>,
    t: f64,
) -> Result<CellMaterials> {
    Instance::new(problem, params, mode == CouplingMode::Lcfom)?.materials_at(temperature, t)
}
