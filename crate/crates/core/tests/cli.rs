use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bsn_core::cli::{read_csv, MetricsRow, SummaryRow, TruthFile};
use bsn_core::hmc::{ChainDraws, Diagnostics, Draws, SamplerConfig};
use bsn_core::ingest::SubjectTimeSeries;
use bsn_core::io::{load_dataset, read_json, save_timeseries, CovDataset, FitRecord};
use bsn_core::model::{to_unconstrained, AnglePrior, FeatureMap, ModelParams, ModelSpec};
use bsn_core::pipeline::evaluate_fit;
use bsn_core::sim::{gen_dataset, SimConfig};
use bsn_core::spd::euclidean_mean;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn bsn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsn"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SIM: [&str; 4] = ["--replicates=2", "--n_train=[60]", "--n_test=40", "--seed=11"];
const SMALL_FIT: [&str; 6] = [
    "--sampler.warmup=200",
    "--sampler.sampling=100",
    "--sampler.chains=2",
    "--sampler.init_candidates=4",
    "--sampler.init_iterations=50",
    "--seed=11",
];

#[test]
fn simulate_fit_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let o = bsn(dir, &[&["simulate"], &SMALL_SIM[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let rep0 = dir.join("p5_d2_n60_snr5/rep_0");
    let first = fs::read(rep0.join("train.bsnd")).unwrap();

    let o = bsn(dir, &[&["simulate"], &SMALL_SIM[..]].concat());
    assert!(o.status.success());
    assert_eq!(first, fs::read(rep0.join("train.bsnd")).unwrap(), "simulate is not deterministic");

    let train = load_dataset(&rep0.join("train.bsnd")).unwrap();
    assert_eq!(train.n(), 60);
    assert_eq!(train.provenance["seed"], 11);
    assert_eq!(train.provenance["config"]["simulate"]["n_test"], 40);
    let truth: TruthFile = read_json(&rep0.join("truth.json")).unwrap();
    assert_eq!(truth.simulation.seed, 11);
    let truth1: TruthFile = read_json(&dir.join("p5_d2_n60_snr5/rep_1/truth.json")).unwrap();
    assert_eq!(truth1.simulation.seed, 12);

    for prior in ["--model.prior=sparse", "--model.prior=uniform"] {
        let o = bsn(dir, &[&["fit", prior], &SMALL_FIT[..]].concat());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(rep0.join("draws_ts.bsdr").is_file());
    assert!(rep0.join("draws_t.bsdr").is_file());

    let o = bsn(dir, &["evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(text.starts_with("# bsn "));
    assert!(text.contains("# seed: 0"));
    assert!(text.contains("#   mspe:"));
    let rows: Vec<MetricsRow> = read_csv(&dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows.iter().map(|r| (r.replicate, r.variant.as_str())).collect::<Vec<_>>(),
        [(0, "t"), (0, "ts"), (1, "t"), (1, "ts")]
    );
    for r in &rows {
        assert!(r.mspe.is_finite() && r.mspe > 0.0);
        let rc = r.rc.unwrap();
        assert!((0.0..=1.0).contains(&rc));
        assert_eq!(r.acs_median.split(';').count(), 2);
        assert_eq!(r.interval_kind, "mean_signal");
    }

    // every record has the header's field count
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(dir.join("metrics.csv")).unwrap();
    let width = rdr.headers().unwrap().len();
    assert!(rdr.records().all(|r| r.unwrap().len() == width));

    // summary agrees with per-replicate JSON files
    let summary: Vec<SummaryRow> = read_csv(&dir.join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 2);
    for s in &summary {
        let mspes: Vec<f64> = (0..2)
            .map(|k| {
                let path = dir.join(format!("p5_d2_n60_snr5/rep_{k}/metrics_{}.json", s.variant));
                let v: Value = read_json(&path).unwrap();
                v["report"]["mspe"].as_f64().unwrap()
            })
            .collect();
        assert_eq!(s.replicates, 2);
        assert!((s.mspe_mean - (mspes[0] + mspes[1]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn usage_and_io_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = dir.join("nope.bsnd");
    let o = bsn(dir, &["fit", &format!("--train={}", missing.display())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope.bsnd"));

    let o = bsn(dir, &["fit", "--sampler.warmpu=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmpu"));

    let o = bsn(dir, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let o = bsn(dir, &["evaluate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let cfg = dir.join("run.toml");
    fs::write(&cfg, "seed = 4\n[simulate]\nreplicates = 1\nn_train = [30]\nn_test = 10\nbogus = 1\n").unwrap();
    let o = bsn(dir, &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

fn ar1_series(id: &str, t: usize, p: usize, rho: f64, rng: &mut impl Rng) -> SubjectTimeSeries {
    let mut m = DMatrix::zeros(t, p);
    for c in 0..p {
        let mut x: f64 = rng.sample(StandardNormal);
        for r in 0..t {
            m[(r, c)] = 100.0 * x;
            x = rho * x + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }
    SubjectTimeSeries::new(id, m).unwrap()
}

#[test]
fn ingest_roundtrip_feeds_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subjects: Vec<SubjectTimeSeries> = (0..24)
        .map(|i| ar1_series(&format!("s{i}"), 400, 4, 0.5, &mut rng))
        .collect();
    save_timeseries(&dir.join("ts.csv"), &subjects).unwrap();
    let mut resp = String::from("subject_id,score\n");
    for i in 0..24 {
        resp.push_str(&format!("s{i},{}\n", rng.random_range(-1.0..1.0)));
    }
    fs::write(dir.join("y.csv"), resp).unwrap();

    let input = format!("--input={}", dir.join("ts.csv").display());
    let responses = format!("--responses={}", dir.join("y.csv").display());
    let o = bsn(dir, &["ingest", &input, &responses, "--scale=1e-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = load_dataset(&dir.join("dataset.bsnd")).unwrap();
    assert_eq!(ds.scale, 1e-4);
    assert_eq!(ds.response_name, "score");
    assert_eq!(ds.n(), 24);
    let report: Value = read_json(&dir.join("ess_report.json")).unwrap();
    let ess = report["subjects"][0]["ess"].as_f64().unwrap();
    assert!((ess / (400.0 / 3.0) - 1.0).abs() < 0.35, "ess {ess}");

    let train = dir.join("dataset.bsnd");
    let o = bsn(
        dir,
        &[&["fit", &format!("--train={}", train.display())], &SMALL_FIT[..]].concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("draws_ts.bsdr").is_file());
}

#[test]
fn constant_region_is_a_named_numerical_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut flat = ar1_series("flat", 200, 3, 0.2, &mut rng).values().clone();
    flat.column_mut(1).fill(2.0);
    let subjects = vec![
        ar1_series("ok", 200, 3, 0.2, &mut rng),
        SubjectTimeSeries::new("flat", flat).unwrap(),
    ];
    save_timeseries(&dir.join("ts.csv"), &subjects).unwrap();
    fs::write(dir.join("y.csv"), "subject_id,y\nok,1\nflat,2\n").unwrap();
    let o = bsn(
        dir,
        &[
            "ingest",
            &format!("--input={}", dir.join("ts.csv").display()),
            &format!("--responses={}", dir.join("y.csv").display()),
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("'flat'"), "{}", stderr(&o));
}

#[test]
fn draws_at_the_truth_give_zero_error_and_full_coverage() {
    let sim = SimConfig {
        n_train: 50,
        n_test: 30,
        b_true: Some(vec![-1.0, 1.0]),
        seed: 3,
        ..SimConfig::default()
    };
    let out = gen_dataset(&sim).unwrap();
    let mut test =
        CovDataset::from_covariances(&out.test.covariances, out.test.g.clone(), Some(out.test.g.clone())).unwrap();
    test.ys = out.test.g.iter().map(|g| g + out.truth.mu).collect();
    let spec = ModelSpec::new(5, 2, AnglePrior::Uniform, 1.0).unwrap();
    let params = ModelParams {
        angles: out.truth.angles.clone(),
        b: out.truth.b.clone(),
        mu: out.truth.mu,
        sigma: out.truth.sigma,
        lambda: Vec::new(),
        tau: None,
    };
    let n = 40;
    // a small symmetric spread in b keeps the intervals non-degenerate
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let shift = if s % 2 == 0 { 1e-6 } else { -1e-6 };
            let p = ModelParams {
                b: params.b.iter().map(|b| b + shift).collect(),
                ..params.clone()
            };
            to_unconstrained(&p, &spec).unwrap()
        })
        .collect();
    let x = draws[0].clone();
    let chain = ChainDraws {
        draws,
        log_density: vec![0.0; n],
        divergent: vec![false; n],
        accept_stat: vec![1.0; n],
        step_size: 0.1,
        inv_mass: vec![1.0; x.len()],
        warmup_divergences: 0,
    };
    let draws = Draws {
        chains: vec![chain.clone(), chain],
    };
    let mref = euclidean_mean(&out.train.covariances).unwrap();
    let rec = FitRecord {
        spec,
        feature_map: FeatureMap::Tangent,
        y_offset: 0.0,
        scale: 1.0,
        mref: mref.into_matrix(),
        sampler: SamplerConfig::default(),
        diagnostics: Diagnostics::new(&draws, 1.05),
        draws,
        converged: true,
        provenance: Value::Null,
    };
    let report = evaluate_fit(&rec, &test, Some(&out.truth), 0.9).unwrap();
    assert!(report.mspe < 1e-10, "mspe {}", report.mspe);
    assert_eq!(report.rc, Some(1.0));
    assert!(report.median_acs(0) > 1.0 - 1e-12 && report.median_acs(1) > 1.0 - 1e-12);
}
