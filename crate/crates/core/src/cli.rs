//! Batch runner behind the `bsn` binary: layered configuration, grid
//! expansion and the `simulate`, `fit`, `evaluate` and `ingest` commands.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::givens::angle_pairs;
use crate::hmc::SamplerConfig;
use crate::ingest::{ess_report, sample_covariance, thin_indices, thin_random, EssReport};
use crate::io::{
    load_dataset, load_draws, load_timeseries, read_json, save_dataset, save_draws, write_atomic, write_json,
    CovDataset, FitRecord,
};
use crate::metrics::MetricsReport;
use crate::model::ModelSpec;
use crate::pipeline::{evaluate_fit, fit, ModelConfig};
use crate::sim::{gen_dataset, Regime, SimConfig, SimTruth};

pub const TRAIN_FILE: &str = "train.bsnd";
pub const TEST_FILE: &str = "test.bsnd";
pub const TRUTH_FILE: &str = "truth.json";

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; replicate `k` uses `seed + k`.
    pub seed: u64,
    /// Worker thread bound; `None` uses all cores.
    pub jobs: Option<usize>,
    pub out_dir: PathBuf,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub evaluate: EvaluateConfig,
    pub ingest: IngestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: None,
            out_dir: PathBuf::from("runs"),
            simulate: SimulateConfig::default(),
            fit: FitConfig::default(),
            evaluate: EvaluateConfig::default(),
            ingest: IngestConfig::default(),
        }
    }
}

/// Grid of simulation settings; every combination of `pd`, `snr`,
/// `n_train` and `nu` is one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub replicates: usize,
    /// `[p, d]` pairs.
    pub pd: Vec<[usize; 2]>,
    pub snr: Vec<f64>,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    /// Loading perturbation scales; empty means the correctly specified regime.
    pub nu: Vec<f64>,
    pub zero_fraction: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            replicates: 1,
            pd: vec![[5, 2]],
            snr: vec![5.0],
            n_train: vec![200],
            n_test: 1000,
            nu: Vec::new(),
            zero_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Single training file; when absent every replicate under `out_dir` is fitted.
    pub train: Option<PathBuf>,
    /// Draws file for single-file mode.
    pub output: Option<PathBuf>,
    /// Setting names to fit in grid mode; empty fits all.
    pub settings: Vec<String>,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            train: None,
            output: None,
            settings: Vec::new(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub level: f64,
    /// Variant labels to evaluate in grid mode; empty evaluates all.
    pub variants: Vec<String>,
    /// Setting names to evaluate in grid mode; empty evaluates all.
    pub settings: Vec<String>,
    /// Single-file mode inputs.
    pub draws: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Metrics CSV; defaults to `<out_dir>/metrics.csv`.
    pub output: Option<PathBuf>,
    /// Per-setting means; defaults to `<out_dir>/summary.csv`.
    pub summary: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            level: 0.9,
            variants: Vec::new(),
            settings: Vec::new(),
            draws: None,
            test: None,
            truth: None,
            output: None,
            summary: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Thinning {
    /// Evenly spaced time points.
    #[default]
    Even,
    /// A sorted uniform subset of time points.
    Random,
    /// Keep every time point.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Long-format CSV with columns `subject_id,t,region_1..region_p`.
    pub input: Option<PathBuf>,
    /// CSV with columns `subject_id,<response>`.
    pub responses: Option<PathBuf>,
    /// Dataset file; defaults to `<out_dir>/dataset.bsnd`.
    pub output: Option<PathBuf>,
    /// ESS report; defaults to `<out_dir>/ess_report.json`.
    pub report: Option<PathBuf>,
    /// Multiplier applied to covariance entries when the dataset is used.
    pub scale: f64,
    pub correlation: bool,
    pub thinning: Thinning,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            input: None,
            responses: None,
            output: None,
            report: None,
            scale: 1.0,
            correlation: false,
            thinning: Thinning::Even,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        let s = &self.simulate;
        if s.replicates == 0 || s.pd.is_empty() || s.snr.is_empty() || s.n_train.is_empty() {
            return Err(Error::Config(
                "simulate needs at least one replicate, pd pair, snr and n_train".into(),
            ));
        }
        for setting in self.settings() {
            setting.sim_config(s, 0).validate().map_err(|e| Error::Config(format!("setting {}: {e}", setting.name())))?;
        }
        if self.fit.sampler.seed != 0 {
            return Err(Error::Config(
                "fit.sampler.seed is derived from the global seed; set `seed` instead".into(),
            ));
        }
        self.fit.sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.evaluate.level > 0.0 && self.evaluate.level < 1.0) {
            return Err(Error::Config(format!("evaluate.level must lie in (0, 1), got {}", self.evaluate.level)));
        }
        if !(self.ingest.scale > 0.0 && self.ingest.scale.is_finite()) {
            return Err(Error::Config(format!("ingest.scale must be positive, got {}", self.ingest.scale)));
        }
        Ok(())
    }

    /// Settings of the simulation grid in a fixed order.
    pub fn settings(&self) -> Vec<Setting> {
        let s = &self.simulate;
        let nus: Vec<Option<f64>> = if s.nu.is_empty() { vec![None] } else { s.nu.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for &[p, d] in &s.pd {
            for &snr in &s.snr {
                for &n_train in &s.n_train {
                    for &nu in &nus {
                        out.push(Setting { p, d, n_train, snr, nu });
                    }
                }
            }
        }
        out
    }
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub p: usize,
    pub d: usize,
    pub n_train: usize,
    pub snr: f64,
    pub nu: Option<f64>,
}

impl Setting {
    pub fn name(&self) -> String {
        let base = format!("p{}_d{}_n{}_snr{}", self.p, self.d, self.n_train, self.snr);
        match self.nu {
            Some(nu) => format!("{base}_nu{nu}"),
            None => base,
        }
    }

    pub fn sim_config(&self, sim: &SimulateConfig, seed: u64) -> SimConfig {
        SimConfig {
            n_train: self.n_train,
            n_test: sim.n_test,
            p: self.p,
            d: self.d,
            snr: self.snr,
            b_true: None,
            regime: match self.nu {
                Some(nu) => Regime::Misspecified { nu },
                None => Regime::CorrectlySpecified,
            },
            zero_fraction: sim.zero_fraction,
            seed,
        }
    }
}

/// Parses a scalar, array or table the way it would appear on the right of
/// `key = ` in TOML; anything else is taken as a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key '{key}'")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

const BLOCKS: [&str; 4] = ["simulate", "fit", "evaluate", "ingest"];
const ROOT_KEYS: [&str; 3] = ["seed", "jobs", "out_dir"];

/// Builds the configuration from an optional TOML file, `key=value`
/// overrides and the global flags, in increasing precedence. Override keys
/// are dotted paths relative to the command's block unless they start with
/// a block or root key name.
pub fn load_config(
    file: Option<&Path>,
    command: &str,
    overrides: &[(String, String)],
    seed: Option<u64>,
    jobs: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        let key = key.replace('-', "_");
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed override key '{key}'")));
        }
        let mut path = Vec::with_capacity(parts.len() + 1);
        if !BLOCKS.contains(&parts[0]) && !ROOT_KEYS.contains(&parts[0]) {
            path.push(command);
        }
        path.extend(parts);
        set_path(&mut table, &path, parse_override_value(raw))?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(j) = jobs {
        table.insert("jobs".into(), toml::Value::Integer(j as i64));
    }
    if let Some(dir) = out_dir {
        table.insert("out_dir".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

fn provenance(config: &RunConfig, command: &str, seed: u64, extra: Value) -> Value {
    let mut v = json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    v
}

// ---------------------------------------------------------------- simulate

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub simulation: SimConfig,
    pub truth: SimTruth,
    pub provenance: Value,
}

pub fn replicate_dir(out_dir: &Path, setting: &str, rep: usize) -> PathBuf {
    out_dir.join(setting).join(format!("rep_{rep}"))
}

/// Writes train/test datasets and the truth file for every setting and
/// replicate; returns the replicate directories.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let jobs: Vec<(Setting, usize)> = config
        .settings()
        .into_iter()
        .flat_map(|s| (0..config.simulate.replicates).map(move |r| (s, r)))
        .collect();
    jobs.par_iter()
        .map(|(setting, rep)| {
            let seed = config.seed + *rep as u64;
            let sim = setting.sim_config(&config.simulate, seed);
            let out = gen_dataset(&sim)?;
            let dir = replicate_dir(&config.out_dir, &setting.name(), *rep);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let prov = provenance(
                config,
                "simulate",
                seed,
                json!({ "setting": setting.name(), "replicate": rep, "simulation": sim }),
            );
            for (split, file) in [(&out.train, TRAIN_FILE), (&out.test, TEST_FILE)] {
                let mut ds = CovDataset::from_covariances(&split.covariances, split.ys.clone(), Some(split.g.clone()))?;
                ds.provenance = json!({ "split": file.trim_end_matches(".bsnd") });
                if let (Value::Object(m), Value::Object(p)) = (&mut ds.provenance, prov.clone()) {
                    m.extend(p);
                }
                save_dataset(&dir.join(file), &ds)?;
            }
            write_json(
                &dir.join(TRUTH_FILE),
                &TruthFile {
                    simulation: sim,
                    truth: out.truth,
                    provenance: prov,
                },
            )?;
            Ok(dir)
        })
        .collect()
}

// --------------------------------------------------------------------- fit

/// Replicate directories under `out_dir` holding a training file, sorted by
/// setting then replicate index.
pub fn find_replicates(out_dir: &Path, settings: &[String]) -> Result<Vec<(String, usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out_dir, e))?;
        let setting = entry.file_name().to_string_lossy().into_owned();
        if !entry.path().is_dir() || (!settings.is_empty() && !settings.contains(&setting)) {
            continue;
        }
        let reps = fs::read_dir(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        for rep in reps {
            let rep = rep.map_err(|e| Error::io(entry.path(), e))?;
            let name = rep.file_name().to_string_lossy().into_owned();
            let Some(k) = name.strip_prefix("rep_").and_then(|k| k.parse::<usize>().ok()) else {
                continue;
            };
            if rep.path().join(TRAIN_FILE).is_file() {
                out.push((setting.clone(), k, rep.path()));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(out)
}

pub fn draws_file_name(variant: &str) -> String {
    format!("draws_{variant}.bsdr")
}

/// Human-readable names of the unconstrained coordinates.
pub fn coordinate_names(spec: &ModelSpec) -> Vec<String> {
    let layout = spec.layout();
    let mut names: Vec<String> = angle_pairs(spec.p, spec.d)
        .iter()
        .map(|(i, j)| format!("theta[{},{}]", i + 1, j + 1))
        .collect();
    names.extend((1..=spec.d).map(|j| format!("b[{j}]")));
    names.push("mu".into());
    names.push("log_sigma".into());
    if layout.local_scales {
        names.extend(
            angle_pairs(spec.p, spec.d)
                .iter()
                .map(|(i, j)| format!("log_lambda[{},{}]", i + 1, j + 1)),
        );
    }
    names
}

fn rhat_table(rec: &FitRecord) -> String {
    let names = coordinate_names(&rec.spec);
    let mut out = format!("{:<20} {:>8} {:>10}\n", "coordinate", "rhat", "ess_bulk");
    for (k, r) in rec.diagnostics.unconverged() {
        out.push_str(&format!(
            "{:<20} {:>8.3} {:>10.1}\n",
            names.get(k).map_or("?", String::as_str),
            r,
            rec.diagnostics.ess_bulk[k]
        ));
    }
    out
}

/// Outcome of one fit, for reporting.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub path: PathBuf,
    pub converged: bool,
    pub max_rhat: f64,
}

fn fit_one(config: &RunConfig, train_path: &Path, output: &Path, seed: u64, label: &str) -> Result<FitOutcome> {
    let train = load_dataset(train_path)?;
    let sampler = SamplerConfig {
        seed,
        ..config.fit.sampler.clone()
    };
    let started = Instant::now();
    let prov = provenance(
        config,
        "fit",
        seed,
        json!({ "train": train_path, "variant": config.fit.model.variant(), "train_provenance": train.provenance }),
    );
    let rec = fit(&train, &config.fit.model, &sampler, prov)?;
    save_draws(output, &rec)?;
    let max_rhat = rec.diagnostics.max_rhat();
    eprintln!(
        "fit {label} [{}]: max R-hat {max_rhat:.3}, min ESS {:.0}, {} divergences ({:.1} s)",
        config.fit.model.variant(),
        rec.diagnostics.min_ess(),
        rec.diagnostics.divergences,
        started.elapsed().as_secs_f64()
    );
    if !rec.converged {
        eprintln!(
            "warning: {label} did not converge (R-hat threshold {}); draws written with converged = false\n{}",
            rec.diagnostics.rhat_threshold,
            rhat_table(&rec)
        );
    }
    Ok(FitOutcome {
        path: output.to_path_buf(),
        converged: rec.converged,
        max_rhat,
    })
}

/// Fits the configured variant to one training file or to every replicate
/// under `out_dir`; replicate `k` samples with seed `seed + k`.
pub fn cmd_fit(config: &RunConfig) -> Result<Vec<FitOutcome>> {
    let variant = config.fit.model.variant();
    if let Some(train) = &config.fit.train {
        let output = config
            .fit
            .output
            .clone()
            .unwrap_or_else(|| config.out_dir.join(draws_file_name(&variant)));
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        return Ok(vec![fit_one(config, train, &output, config.seed, &train.display().to_string())?]);
    }
    let reps = find_replicates(&config.out_dir, &config.fit.settings)?;
    if reps.is_empty() {
        return Err(Error::Config(format!(
            "no replicates with {TRAIN_FILE} under {}; run simulate first or set fit.train",
            config.out_dir.display()
        )));
    }
    reps.par_iter()
        .map(|(setting, k, dir)| {
            fit_one(
                config,
                &dir.join(TRAIN_FILE),
                &dir.join(draws_file_name(&variant)),
                config.seed + *k as u64,
                &format!("{setting}/rep_{k}"),
            )
        })
        .collect()
}

// ---------------------------------------------------------------- evaluate

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: String,
    pub replicate: usize,
    pub variant: String,
    pub seed: u64,
    pub n_test: usize,
    pub level: f64,
    pub interval_kind: String,
    pub mspe: f64,
    pub rc: Option<f64>,
    pub mean_len: f64,
    /// Median ACS of each column, `;`-separated.
    pub acs_median: String,
    pub acs_median_min: Option<f64>,
    pub gamma_cover: Option<f64>,
    pub b_cover: Option<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub divergences: usize,
    pub converged: bool,
    pub warnings: String,
}

pub const METRICS_COLUMNS: &str = "\
# columns:
#   setting, replicate, variant: replicate identity; variant is t/n (tangent/naive features) plus s for the sparse prior
#   seed: sampler seed
#   n_test: test subjects
#   level, interval_kind: credible level; intervals are over the posterior mean response
#   mspe: mean squared error of the posterior median prediction against observed test responses
#   rc: fraction of test signals inside their credible interval (simulated data only)
#   mean_len: mean credible interval length
#   acs_median: per-column median absolute cosine similarity to the true loadings, ';'-separated
#   acs_median_min: smallest entry of acs_median
#   gamma_cover, b_cover: mean interval coverage of true loading and coefficient entries
#   max_rhat, min_ess, divergences, converged: sampler diagnostics
#   warnings: ';'-separated evaluation warnings
";

fn row_from_report(setting: &str, replicate: usize, variant: &str, fit: &FitRecord, n_test: usize, r: &MetricsReport) -> MetricsRow {
    let medians: Vec<f64> = (0..r.acs.len()).map(|j| r.median_acs(j)).collect();
    let truth = r.rc.is_some();
    MetricsRow {
        setting: setting.to_string(),
        replicate,
        variant: variant.to_string(),
        seed: fit.sampler.seed,
        n_test,
        level: r.level,
        interval_kind: r.interval_kind.clone(),
        mspe: r.mspe,
        rc: r.rc,
        mean_len: r.mean_length(),
        acs_median: medians.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        acs_median_min: medians.iter().copied().reduce(f64::min),
        gamma_cover: truth.then(|| r.mean_gamma_coverage()),
        b_cover: truth.then(|| r.mean_b_coverage()),
        max_rhat: fit.diagnostics.max_rhat(),
        min_ess: fit.diagnostics.min_ess(),
        divergences: fit.diagnostics.divergences,
        converged: fit.converged,
        warnings: r.warnings.join(";"),
    }
}

fn evaluate_one(
    draws: &Path,
    test: &Path,
    truth: Option<&Path>,
    level: f64,
) -> Result<(FitRecord, CovDataset, MetricsReport)> {
    let fit = load_draws(draws)?;
    let test = load_dataset(test)?;
    let truth: Option<TruthFile> = truth.map(read_json).transpose()?;
    let mut report = match &truth {
        Some(t) if t.truth.b.len() == fit.spec.d && test.signal.is_some() => evaluate_fit(&fit, &test, Some(&t.truth), level)?,
        _ => evaluate_fit(&fit, &test, None, level)?,
    };
    if let Some(t) = &truth {
        if t.truth.b.len() != fit.spec.d {
            report.warnings.push(format!(
                "fitted d = {} differs from true d = {}; truth metrics skipped",
                fit.spec.d,
                t.truth.b.len()
            ));
        }
    }
    Ok((fit, test, report))
}

/// Per-setting and variant means over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub variant: String,
    pub replicates: usize,
    pub mspe_mean: f64,
    pub mspe_sd: f64,
    pub rc_mean: Option<f64>,
    pub mean_len_mean: f64,
    pub acs_median_min_mean: Option<f64>,
    pub gamma_cover_mean: Option<f64>,
    pub b_cover_mean: Option<f64>,
    pub converged: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String), Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let key = (r.setting.clone(), r.variant.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((setting, variant), g)| {
            let n = g.len() as f64;
            let mspe_mean = g.iter().map(|r| r.mspe).sum::<f64>() / n;
            let mspe_sd = if g.len() > 1 {
                (g.iter().map(|r| (r.mspe - mspe_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                setting,
                variant,
                replicates: g.len(),
                mspe_mean,
                mspe_sd,
                rc_mean: mean_of(g.iter().map(|r| r.rc)),
                mean_len_mean: g.iter().map(|r| r.mean_len).sum::<f64>() / n,
                acs_median_min_mean: mean_of(g.iter().map(|r| r.acs_median_min)),
                gamma_cover_mean: mean_of(g.iter().map(|r| r.gamma_cover)),
                b_cover_mean: mean_of(g.iter().map(|r| r.b_cover)),
                converged: g.iter().filter(|r| r.converged).count(),
            }
        })
        .collect()
}

/// RFC-4180 CSV preceded by `#` comment lines.
pub fn write_csv<T: Serialize>(path: &Path, comment: &str, rows: &[T]) -> Result<()> {
    let mut bytes = comment.as_bytes().to_vec();
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(&mut bytes);
        for row in rows {
            w.serialize(row).map_err(|e| Error::Config(format!("csv encoding: {e}")))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &bytes)
}

/// Reads a CSV written by [`write_csv`].
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| {
                let loc = e.position().map_or("unknown line".to_string(), |p| format!("line {}", p.line()));
                Error::parse(path, loc, e.to_string())
            })
        })
        .collect()
}

fn comment_block(config: &RunConfig, columns: &str) -> Result<String> {
    let echo = serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("# bsn {} evaluate\n# seed: {}\n# config: {echo}\n{columns}", env!("CARGO_PKG_VERSION"), config.seed))
}

/// Writes the metrics CSV (one row per replicate and variant), the
/// per-setting summary CSV and a metrics JSON beside each draws file.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Vec<MetricsRow>> {
    let ev = &config.evaluate;
    let output = ev.output.clone().unwrap_or_else(|| config.out_dir.join("metrics.csv"));
    let summary_path = ev.summary.clone().unwrap_or_else(|| config.out_dir.join("summary.csv"));
    let rows: Vec<MetricsRow> = match (&ev.draws, &ev.test) {
        (Some(draws), Some(test)) => {
            let (fit, test_ds, report) = evaluate_one(draws, test, ev.truth.as_deref(), ev.level)?;
            let variant = fit
                .provenance
                .get("variant")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string();
            vec![row_from_report(&draws.display().to_string(), 0, &variant, &fit, test_ds.n(), &report)]
        }
        (None, None) => {
            let mut jobs = Vec::new();
            for (setting, k, dir) in find_replicates(&config.out_dir, &ev.settings)? {
                let mut files: Vec<String> = fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
                    .filter_map(|n| n.strip_prefix("draws_")?.strip_suffix(".bsdr").map(str::to_string))
                    .filter(|v| ev.variants.is_empty() || ev.variants.contains(v))
                    .collect();
                files.sort();
                jobs.extend(files.into_iter().map(|v| (setting.clone(), k, dir.clone(), v)));
            }
            if jobs.is_empty() {
                return Err(Error::Config(format!(
                    "no draws files under {}; run fit first or set evaluate.draws and evaluate.test",
                    config.out_dir.display()
                )));
            }
            jobs.par_iter()
                .map(|(setting, k, dir, variant)| {
                    let truth = dir.join(TRUTH_FILE);
                    let (fit, test_ds, report) = evaluate_one(
                        &dir.join(draws_file_name(variant)),
                        &dir.join(TEST_FILE),
                        truth.is_file().then_some(truth.as_path()),
                        ev.level,
                    )?;
                    write_json(
                        &dir.join(format!("metrics_{variant}.json")),
                        &json!({ "report": report, "provenance": provenance(config, "evaluate", fit.sampler.seed, json!({})) }),
                    )?;
                    Ok(row_from_report(setting, *k, variant, &fit, test_ds.n(), &report))
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            return Err(Error::Config(
                "evaluate.draws and evaluate.test must be given together".into(),
            ))
        }
    };
    for path in [&output, &summary_path] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_csv(&output, &comment_block(config, METRICS_COLUMNS)?, &rows)?;
    write_csv(
        &summary_path,
        &comment_block(config, "# columns: per setting and variant means over replicates of the metrics.csv columns\n")?,
        &summarize(&rows),
    )?;
    Ok(rows)
}

// ------------------------------------------------------------------ ingest

fn load_responses(path: &Path) -> Result<(String, HashMap<String, f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::parse(path, "line 1", e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "subject_id" {
        return Err(Error::parse(path, "line 1", "header must be subject_id,<response name>"));
    }
    let mut out = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse(path, "record", e.to_string()))?;
        let line = format!("line {}", record.position().map_or(0, |p| p.line()));
        let y: f64 = record[1]
            .parse()
            .map_err(|_| Error::parse(path, &line, format!("response '{}' is not a number", &record[1])))?;
        if !y.is_finite() {
            return Err(Error::parse(path, &line, "response is not finite"));
        }
        if out.insert(record[0].to_string(), y).is_some() {
            return Err(Error::parse(path, &line, format!("duplicate subject '{}'", &record[0])));
        }
    }
    Ok((headers[1].to_string(), out))
}

/// Time series → ESS → thinning → covariance → dataset file, plus a JSON
/// array of per-subject ESS reports.
pub fn cmd_ingest(config: &RunConfig) -> Result<(CovDataset, Vec<EssReport>)> {
    let ing = &config.ingest;
    let input = ing
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("ingest.input is required".into()))?;
    let responses = ing
        .responses
        .as_ref()
        .ok_or_else(|| Error::Config("ingest.responses is required".into()))?;
    let subjects = load_timeseries(input)?;
    let (response_name, ys) = load_responses(responses)?;
    let results: Vec<(nalgebra::DMatrix<f64>, EssReport, f64)> = subjects
        .par_iter()
        .enumerate()
        .map(|(i, series)| {
            let y = *ys.get(&series.subject_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no response for subject '{}'", series.subject_id))
            })?;
            let mut report = ess_report(series)?;
            let thinned = match ing.thinning {
                Thinning::Even => {
                    report.kept = thin_indices(series.timepoints(), report.ess)?;
                    series.select(&report.kept)?
                }
                Thinning::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(i as u64 + 1);
                    let t = thin_random(series, report.ess, &mut rng)?;
                    report.kept = Vec::new();
                    t
                }
                Thinning::None => {
                    report.kept = (0..series.timepoints()).collect();
                    series.clone()
                }
            };
            let cov = sample_covariance(&thinned, ing.correlation)?;
            Ok((cov.into_matrix(), report, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = subjects[0].regions();
    let mut ds = CovDataset {
        p,
        matrices: Vec::with_capacity(results.len()),
        ys: Vec::with_capacity(results.len()),
        signal: None,
        subject_ids: subjects.iter().map(|s| s.subject_id.clone()).collect(),
        scale: ing.scale,
        response_name,
        provenance: provenance(config, "ingest", config.seed, json!({ "input": input, "responses": responses })),
    };
    let mut reports = Vec::with_capacity(results.len());
    for (m, r, y) in results {
        ds.matrices.push(m);
        ds.ys.push(y);
        reports.push(r);
    }
    ds.validate()?;
    let output = ing.output.clone().unwrap_or_else(|| config.out_dir.join("dataset.bsnd"));
    let report_path = ing.report.clone().unwrap_or_else(|| config.out_dir.join("ess_report.json"));
    for path in [&output, &report_path] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    save_dataset(&output, &ds)?;
    write_json(
        &report_path,
        &json!({ "subjects": reports, "provenance": ds.provenance }),
    )?;
    Ok((ds, reports))
}

// --------------------------------------------------------------------- cli

#[derive(Debug, Parser)]
#[command(name = "bsn", version, about = "Bayesian scalar-on-network regression: simulate, fit, evaluate, ingest")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root directory.
    #[arg(long = "out-dir", global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate simulated datasets for every setting and replicate.
    Simulate,
    /// Sample the posterior for one dataset or every simulated replicate.
    Fit,
    /// Compute test-set metrics from draws files.
    Evaluate,
    /// Convert regional time series into a covariance dataset.
    Ingest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Evaluate => "evaluate",
            Command::Ingest => "ingest",
        }
    }
}

const KNOWN_FLAGS: [&str; 6] = ["config", "seed", "jobs", "out-dir", "help", "version"];

/// Splits `--key=value` configuration overrides from the arguments clap parses.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.to_str().and_then(|s| s.strip_prefix("--")).and_then(|s| s.split_once('=')) {
            if !KNOWN_FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn dispatch(command: &Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Simulate => {
            let dirs = cmd_simulate(config)?;
            eprintln!("wrote {} replicate directories under {}", dirs.len(), config.out_dir.display());
        }
        Command::Fit => {
            let outcomes = cmd_fit(config)?;
            let bad = outcomes.iter().filter(|o| !o.converged).count();
            eprintln!("wrote {} draws files; {bad} not converged", outcomes.len());
        }
        Command::Evaluate => {
            let rows = cmd_evaluate(config)?;
            eprintln!("evaluated {} fits", rows.len());
        }
        Command::Ingest => {
            let (ds, _) = cmd_ingest(config)?;
            eprintln!("ingested {} subjects with {} regions", ds.n(), ds.p);
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage or
/// configuration error, 2 numerical failure, 3 I/O error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = split_overrides(args.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = load_config(
        cli.config.as_deref(),
        cli.command.name(),
        &overrides,
        cli.seed,
        cli.jobs,
        cli.out_dir.as_deref(),
    )
    .and_then(|config| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(j) = config.jobs {
            pool = pool.num_threads(j);
        }
        let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cli.command, &config))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
