use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use romassim::harness::config::{BenchmarkConfig, NoiseConfig, ReconstructionConfig};
use romassim::harness::pipeline::{
    online_field, run_pipeline, simulate, train_geim, train_pbdw, write_sensor_tables, FieldModels, Method,
    OnlineSettings, PipelineOptions,
};
use romassim::harness::store::{
    read_csv, read_models, read_snapshots, write_models, write_snapshots, Cell, CsvTable, MeshHeader, ModelManifest,
    StoredModels,
};
use romassim::harness::svg::{bar_chart, line_chart, Axes, Series};
use romassim::harness::validate::{run_suite, Suite};
use romassim::harness::with_threads;
use romassim::multiphysics::CouplingMode;
use romassim::pbdw::default_xi_grid;
use romassim::reduction::SnapshotSet;

#[derive(Parser)]
#[command(name = "romassim", version, about = "Multiphysics reactor simulation and sparse-sensor state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Predict,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OfflineMethod {
    Geim,
    Pbdw,
}

#[derive(Subcommand)]
enum Command {
    /// Run transients at the configured parameter points and store the snapshots.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: CouplingMode,
        #[arg(long)]
        out: PathBuf,
        /// Which parameter points and sampling times to keep.
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        /// Directory reused for previously computed transients.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train sensor placements and bases on a snapshot container.
    Offline {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_enum)]
        method: OfflineMethod,
        #[arg(long)]
        out: PathBuf,
        /// Benchmark file supplying the reconstruction settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        octant: bool,
        #[arg(long)]
        m_max: Option<usize>,
        #[arg(long)]
        n_background: Option<usize>,
        #[arg(long)]
        greedy_tol: Option<f64>,
    },
    /// Reconstruct a truth set from noisy synthetic readings.
    Online {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        m_max: Option<usize>,
        /// Fixed TR-GEIM weight; the noise level by default.
        #[arg(long)]
        lambda: Option<f64>,
        /// Fixed PBDW weight; tuned on validation snapshots by default.
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long, default_value_t = 5)]
        validation: usize,
    },
    /// Merge convergence tables of several runs and chart them.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance suite.
    Validate {
        #[arg(long, value_enum, default_value = "fast")]
        suite: SuiteArg,
        #[arg(long, default_value = "benchmarks")]
        benchmarks: PathBuf,
        /// Scratch directory; a temporary one is used and removed by default.
        #[arg(long)]
        work: Option<PathBuf>,
    },
    /// Run the whole study of one benchmark file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma_scale: f64,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
        /// Skip dumping truth and residual fields.
        #[arg(long)]
        no_fields: bool,
        #[arg(long)]
        no_uncertainty: bool,
        #[arg(long)]
        no_noise_study: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Fast,
    Full,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match with_threads(move || run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Solve {
            config,
            mode,
            out,
            split,
            cache,
        } => solve(&config, mode, &out, split, cache.as_deref())?,
        Command::Offline {
            snapshots,
            method,
            out,
            config,
            stride,
            spread,
            octant,
            m_max,
            n_background,
            greedy_tol,
        } => {
            let mut r = match &config {
                Some(path) => BenchmarkConfig::load(path)?.reconstruction,
                None => default_reconstruction(),
            };
            r.stride = stride.unwrap_or(r.stride);
            r.spread = spread.unwrap_or(r.spread);
            r.octant |= octant;
            r.m_max = m_max.unwrap_or(r.m_max);
            r.n_background = n_background.unwrap_or(r.n_background);
            r.greedy_tol = greedy_tol.unwrap_or(r.greedy_tol);
            offline(&snapshots, method, &out, &r)?
        }
        Command::Online {
            model,
            truth,
            sigma_scale,
            seed,
            out,
            m_max,
            lambda,
            xi,
            validation,
        } => online(&model, &truth, &out, sigma_scale, seed, m_max, lambda, xi, validation)?,
        Command::Report { runs, out } => report(&runs, &out)?,
        Command::Validate { suite, benchmarks, work } => return validate(suite, &benchmarks, work),
        Command::Pipeline {
            config,
            out,
            sigma_scale,
            cache,
            no_cache,
            no_fields,
            no_uncertainty,
            no_noise_study,
        } => {
            let cfg = BenchmarkConfig::load(&config)?;
            let mut opts = PipelineOptions::new(&out);
            if no_cache {
                opts.cache_dir = None;
            } else if let Some(c) = cache {
                opts.cache_dir = Some(c);
            }
            opts.sigma_scale = sigma_scale;
            opts.dump_fields = !no_fields;
            opts.uncertainty = !no_uncertainty;
            opts.noise_study = !no_noise_study;
            let report = run_pipeline(&cfg, &opts)?;
            for f in &["T", "phi1", "phi2"] {
                for me in Method::ALL {
                    if let Some(m) = report.last_m(me, f) {
                        let e = report.error(me, f, m).expect("error at last M");
                        println!("{f:>5} {:>8} M={m:<3} E={:.3e} eps={:.3e}", me.name(), e.absolute, e.relative);
                    }
                }
                if let Some(b) = report.baseline.get(*f) {
                    println!("{f:>5} {:>8} M=0   E={:.3e} eps={:.3e}", romassim::harness::pipeline::model_label(report.model), b.absolute, b.relative);
                }
            }
            println!("results written to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn default_reconstruction() -> ReconstructionConfig {
    ReconstructionConfig {
        stride: 5,
        spread: 1.0,
        octant: false,
        m_max: 15,
        n_background: 5,
        greedy_tol: 0.0,
        sigma: NoiseConfig {
            temperature: 0.1,
            phi1: 1e10,
            phi2: 1e10,
        },
        lambda: None,
        xi_grid: None,
    }
}

fn solve(config: &Path, mode: CouplingMode, out: &Path, split: Split, cache: Option<&Path>) -> Result<()> {
    let cfg = BenchmarkConfig::load(config)?;
    let problem = cfg.build_problem()?;
    let mut points = Vec::new();
    if split != Split::Predict {
        points.extend(cfg.train_points());
    }
    if split != Split::Train {
        for p in cfg.predict_points() {
            if !points.contains(&p) {
                points.push(p);
            }
        }
    }
    let mut names = vec!["t".to_string()];
    names.extend(cfg.parameter_names());
    let mut all = SnapshotSet::new(problem.mesh.clone(), names);
    for p in &points {
        let run = simulate(&cfg, &problem, mode, p, cache)?;
        let keep = run.select(|mu| match split {
            Split::Train => cfg.time.is_train_time(mu[0]),
            Split::Predict => cfg.time.is_predict_time(mu[0]),
            Split::All => true,
        });
        all.append(&run.subset(&keep)?)?;
    }
    write_snapshots(out, &all, &cfg.name, cfg.seed, &[])?;
    println!("{} snapshots of {} written to {}", all.len(), cfg.name, out.display());
    Ok(())
}

fn offline(snapshots: &Path, method: OfflineMethod, out: &Path, r: &ReconstructionConfig) -> Result<()> {
    let (set, manifest) =
        read_snapshots(snapshots).with_context(|| format!("reading snapshots from {}", snapshots.display()))?;
    let library = r.library().build(set.mesh())?;
    let mut fields = Vec::new();
    let mut sigma = BTreeMap::new();
    for name in set.field_names() {
        let snaps = set.field(&name)?;
        let fm = match method {
            OfflineMethod::Geim => FieldModels {
                field: name.clone(),
                geim: Some(train_geim(r, snaps, &library)?),
                pbdw: None,
            },
            OfflineMethod::Pbdw => FieldModels {
                field: name.clone(),
                geim: None,
                pbdw: Some(train_pbdw(r, snaps, &library)?),
            },
        };
        sigma.insert(name.clone(), r.sigma.get(&name)?);
        fields.push(fm);
    }
    let stored = StoredModels {
        manifest: ModelManifest {
            benchmark: manifest.benchmark.clone(),
            method: match method {
                OfflineMethod::Geim => "geim".into(),
                OfflineMethod::Pbdw => "pbdw".into(),
            },
            mesh: MeshHeader::of(set.mesh()),
            library: r.library(),
            sigma,
            geim: Vec::new(),
            pbdw: Vec::new(),
        },
        mesh: set.mesh().clone(),
        geim: fields.iter().filter_map(|f| Some((f.field.clone(), f.geim.clone()?))).collect(),
        pbdw: fields.iter().filter_map(|f| Some((f.field.clone(), f.pbdw.clone()?))).collect(),
    };
    write_models(out, &stored)?;
    write_sensor_tables(out, &fields)?;
    println!("{} models for {} fields written to {}", stored.manifest.method, fields.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn online(
    model: &Path,
    truth: &Path,
    out: &Path,
    sigma_scale: f64,
    seed: u64,
    m_max: Option<usize>,
    lambda: Option<f64>,
    xi: Option<f64>,
    validation: usize,
) -> Result<()> {
    let stored = read_models(model).with_context(|| format!("reading models from {}", model.display()))?;
    let (truth_set, _) = read_snapshots(truth).with_context(|| format!("reading truth from {}", truth.display()))?;
    if MeshHeader::of(truth_set.mesh()) != stored.manifest.mesh {
        bail!("truth and model meshes differ");
    }
    let mut fields: Vec<FieldModels> = Vec::new();
    for (name, g) in &stored.geim {
        fields.push(FieldModels {
            field: name.clone(),
            geim: Some(g.clone()),
            pbdw: None,
        });
    }
    for (name, p) in &stored.pbdw {
        match fields.iter_mut().find(|f| &f.field == name) {
            Some(f) => f.pbdw = Some(p.clone()),
            None => fields.push(FieldModels {
                field: name.clone(),
                geim: None,
                pbdw: Some(p.clone()),
            }),
        }
    }
    let settings = OnlineSettings {
        seed,
        m_max: m_max.unwrap_or(usize::MAX),
        lambda,
        xi,
        xi_grid: default_xi_grid(),
        validation,
    };
    fs::create_dir_all(out)?;
    let mut conv = CsvTable::new(&["method", "field", "M", "E", "epsilon"]);
    let mut xi_table = CsvTable::new(&["field", "M", "xi"]);
    let mut estimates: BTreeMap<Method, Vec<(String, Vec<_>)>> = BTreeMap::new();
    let mut residuals: BTreeMap<Method, Vec<(String, Vec<_>)>> = BTreeMap::new();
    for (fi, fm) in fields.iter().enumerate() {
        let sigma = stored
            .manifest
            .sigma
            .get(&fm.field)
            .copied()
            .with_context(|| format!("no noise level for {}", fm.field))?
            * sigma_scale;
        let truth_f = truth_set.field(&fm.field)?;
        let res = online_field(&settings, fi, fm, truth_f, sigma)?;
        for ((me, m), e) in &res.errors {
            conv.push(&[
                Cell::Text(me.name()),
                Cell::Text(&fm.field),
                Cell::Int(*m),
                Cell::Num(e.absolute),
                Cell::Num(e.relative),
            ]);
        }
        for (k, x) in res.xi.iter().enumerate() {
            xi_table.push(&[Cell::Text(&fm.field), Cell::Int(k + 1), Cell::Num(*x)]);
        }
        for (me, est) in res.finals {
            let resid = est.iter().zip(truth_f).map(|(e, u)| u.sub(e)).collect::<romassim::Result<Vec<_>>>()?;
            estimates.entry(me).or_default().push((fm.field.clone(), est));
            residuals.entry(me).or_default().push((fm.field.clone(), resid));
        }
        if let Some((_, e)) = res.errors.iter().filter(|((me, _), _)| *me != Method::Geim).last() {
            println!("{:>5}: eps = {:.3e} at the largest M", fm.field, e.relative);
        }
    }
    conv.write(&out.join("convergence.csv"))?;
    if !xi_table.is_empty() {
        xi_table.write(&out.join("xi.csv"))?;
    }
    for (kind, groups) in [("estimate", estimates), ("residual", residuals)] {
        for (me, per_field) in groups {
            let mut set = SnapshotSet::new(truth_set.mesh().clone(), truth_set.parameter_names().to_vec());
            for (s, mu) in truth_set.parameters().iter().enumerate() {
                set.push(mu.clone(), per_field.iter().map(|(f, v)| (f.clone(), v[s].clone())).collect())?;
            }
            write_snapshots(&out.join(format!("{kind}_{}", me.slug())), &set, &stored.manifest.benchmark, seed, &[])?;
        }
    }
    println!("online results written to {}", out.display());
    Ok(())
}

type Curve = BTreeMap<usize, f64>;

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut merged = CsvTable::new(&["run", "method", "field", "M", "E", "epsilon"]);
    let mut curves: BTreeMap<String, BTreeMap<String, Curve>> = BTreeMap::new();
    let mut baselines: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for dir in runs {
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join("convergence.csv");
        let (header, rows) = read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .with_context(|| format!("{} lacks column {name}", path.display()))
        };
        let (cm, cf, cmm, ce, ceps) = (col("method")?, col("field")?, col("M")?, col("E")?, col("epsilon")?);
        for row in &rows {
            let m: usize = row[cmm].parse().with_context(|| format!("bad M in {}", path.display()))?;
            let e: f64 = row[ce].parse()?;
            let eps: f64 = row[ceps].parse()?;
            merged.push(&[
                Cell::Text(&run),
                Cell::Text(&row[cm]),
                Cell::Text(&row[cf]),
                Cell::Int(m),
                Cell::Num(e),
                Cell::Num(eps),
            ]);
            curves
                .entry(row[cf].clone())
                .or_default()
                .entry(format!("{run}: {}", row[cm]))
                .or_default()
                .insert(m, eps);
        }
        let summary = dir.join("summary.csv");
        if summary.exists() {
            let (header, rows) = read_csv(&summary)?;
            let pos = |n: &str| header.iter().position(|h| h == n);
            if let (Some(cf), Some(cm), Some(cmm), Some(ceps)) = (pos("field"), pos("method"), pos("M"), pos("epsilon")) {
                for row in rows.iter().filter(|r| r[cmm] == "0") {
                    baselines
                        .entry(row[cf].clone())
                        .or_default()
                        .insert(format!("{run}: {}", row[cm]), row[ceps].parse()?);
                }
            }
        }
    }
    merged.write(&out.join("convergence.csv"))?;

    for (field, by_series) in &curves {
        let mut series: Vec<Series> = by_series
            .iter()
            .map(|(name, c)| Series {
                name: name.clone(),
                x: c.keys().map(|&m| m as f64).collect(),
                y: c.values().copied().collect(),
                dashed: false,
            })
            .collect();
        let m_top = by_series.values().flat_map(|c| c.keys().copied()).max().unwrap_or(1) as f64;
        for (name, eps) in baselines.get(field).into_iter().flatten() {
            series.push(Series {
                name: name.clone(),
                x: vec![1.0, m_top],
                y: vec![*eps, *eps],
                dashed: true,
            });
        }
        let axes = Axes {
            title: format!("Relative error of {field}"),
            x_label: "sensors M".into(),
            y_label: "epsilon".into(),
            log_y: true,
        };
        fs::write(out.join(format!("convergence_{field}.svg")), line_chart(&axes, &series, &[]))?;
    }

    let groups: Vec<String> = curves.keys().cloned().collect();
    let mut names: Vec<String> = curves.values().flat_map(|s| s.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let values: Vec<Vec<f64>> = groups
        .iter()
        .map(|f| {
            names
                .iter()
                .map(|n| {
                    curves[f]
                        .get(n)
                        .and_then(|c| c.values().next_back().copied())
                        .unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    let axes = Axes {
        title: "Relative error at the largest M".into(),
        x_label: "field".into(),
        y_label: "epsilon".into(),
        log_y: true,
    };
    fs::write(out.join("bars_relative.svg"), bar_chart(&axes, &groups, &names, &values))?;
    println!("report of {} runs written to {}", runs.len(), out.display());
    Ok(())
}

fn validate(suite: SuiteArg, benchmarks: &Path, work: Option<PathBuf>) -> Result<ExitCode> {
    let suite = match suite {
        SuiteArg::Fast => Suite::Fast,
        SuiteArg::Full => Suite::Full,
    };
    let (work, temporary) = match work {
        Some(w) => (w, false),
        None => (std::env::temp_dir().join(format!("romassim-validate-{}", std::process::id())), true),
    };
    fs::create_dir_all(&work)?;
    let outcomes = run_suite(suite, benchmarks, &work, |o| println!("{o}"));
    if temporary {
        let _ = fs::remove_dir_all(&work);
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed} of {} criteria passed", outcomes.len());
    Ok(if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
