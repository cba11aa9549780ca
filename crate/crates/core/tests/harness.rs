use std::path::{Path, PathBuf};

use romassim::fields::l2_norm;
use romassim::harness::config::BenchmarkConfig;
use romassim::harness::metrics::compute_errors;
use romassim::harness::pipeline::{generate, run_pipeline, Method, PipelineOptions};
use romassim::harness::store::{read_csv, read_snapshots};
use romassim::harness::validate::determinism_config;
use romassim::multiphysics::FIELDS;

fn benchmarks() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks")
}

fn small() -> BenchmarkConfig {
    determinism_config(&benchmarks()).expect("benchmark config")
}

fn quick_options(out: &Path) -> PipelineOptions {
    let mut opts = PipelineOptions::new(out);
    opts.cache_dir = None;
    opts.uncertainty = false;
    opts.noise_study = false;
    opts
}

#[test]
fn linearised_feedback_departs_from_full_model() {
    let data = generate(&small(), None).unwrap();
    for f in FIELDS {
        let e = compute_errors(data.truth.field(f).unwrap(), data.baseline.field(f).unwrap()).unwrap();
        assert!(e.relative > 0.01, "{f}: LcFOM within {:.2e} of FOM", e.relative);
    }
}

#[test]
fn reported_errors_match_dumped_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&small(), &quick_options(dir.path())).unwrap();
    let (truth, _) = read_snapshots(&dir.path().join("fields/truth")).unwrap();
    let (header, rows) = read_csv(&dir.path().join("summary.csv")).unwrap();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut checked = 0;
    for me in Method::ALL {
        let (residual, manifest) = read_snapshots(&dir.path().join(format!("fields/residual_{}", me.slug()))).unwrap();
        for f in FIELDS {
            let m = manifest.scalars[&format!("M_{f}")] as usize;
            assert_eq!(Some(m), report.last_m(me, f));
            let u = truth.field(f).unwrap();
            let r = residual.field(f).unwrap();
            let eps = r.iter().zip(u).map(|(r, u)| l2_norm(r) / l2_norm(u)).sum::<f64>() / u.len() as f64;
            let row = rows
                .iter()
                .find(|row| row[col("field")] == f && row[col("method")] == me.name())
                .unwrap();
            let stored: f64 = row[col("epsilon")].parse().unwrap();
            assert_eq!(row[col("M")], m.to_string());
            assert!((eps - stored).abs() <= 1e-12 * stored.abs().max(1e-300), "{f} {}: {eps} vs {stored}", me.name());
            checked += 1;
        }
    }
    assert_eq!(checked, 9);
}

#[test]
fn single_sensor_budget_gives_one_row_per_method() {
    let mut cfg = small();
    cfg.reconstruction.m_max = 1;
    cfg.reconstruction.n_background = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut opts = quick_options(dir.path());
    opts.dump_fields = false;
    let report = run_pipeline(&cfg, &opts).unwrap();
    assert_eq!(report.m_values(), vec![1]);
    let (header, rows) = read_csv(&dir.path().join("convergence.csv")).unwrap();
    let m_col = header.iter().position(|h| h == "M").unwrap();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[m_col] == "1"));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small();
    let text = cfg.to_toml().unwrap();
    let back = BenchmarkConfig::from_toml(&text, &benchmarks()).unwrap();
    assert_eq!(back.to_toml().unwrap(), text);
}
