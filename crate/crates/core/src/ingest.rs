//! Time-series preprocessing: effective sample size, thinning and sample
//! covariance.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

/// Region time courses for one subject, `T × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTimeSeries {
    pub subject_id: String,
    values: DMatrix<f64>,
}

impl SubjectTimeSeries {
    pub fn new(subject_id: impl Into<String>, values: DMatrix<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if values.nrows() < 2 || values.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "subject '{subject_id}' needs at least 2 time points and 1 region, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (t, r) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::NonFinite(format!("subject '{subject_id}' at t={t}, region {}", r + 1)));
        }
        Ok(Self { subject_id, values })
    }

    pub fn timepoints(&self) -> usize {
        self.values.nrows()
    }

    pub fn regions(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Rows at the given time indices, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.subject_id.clone(), self.values.select_rows(rows))
    }
}

/// Per-region detail behind a subject's ESS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub subject_id: String,
    pub timepoints: usize,
    pub ess: f64,
    pub region_ess: Vec<f64>,
    /// Autocorrelations `ρ(1), ρ(2), …` kept before the first non-positive lag.
    pub autocorrelations: Vec<Vec<f64>>,
    /// Retained time indices after thinning (zero-based).
    pub kept: Vec<usize>,
}

/// Lag-k sample autocorrelations summed up to the first non-positive one.
fn positive_autocorrelations(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    if c0 == 0.0 || !c0.is_finite() {
        return None;
    }
    let mut out = Vec::new();
    for lag in 1..n {
        let ck: f64 = c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum();
        let rho = ck / c0;
        if rho <= 0.0 {
            break;
        }
        out.push(rho);
    }
    Some(out)
}

/// Minimum over regions of `T / (1 + 2 Σ_k ρ(k))`, clamped to `[1, T]`.
pub fn ess_report(series: &SubjectTimeSeries) -> Result<EssReport> {
    let t = series.timepoints();
    if t < 4 {
        return Err(Error::InvalidArgument(format!(
            "subject '{}' has {t} time points; at least 4 are needed",
            series.subject_id
        )));
    }
    let mut region_ess = Vec::with_capacity(series.regions());
    let mut autocorrelations = Vec::with_capacity(series.regions());
    for (r, col) in series.values.column_iter().enumerate() {
        let x: Vec<f64> = col.iter().copied().collect();
        let rho = positive_autocorrelations(&x).ok_or_else(|| Error::DegenerateRegion {
            subject: series.subject_id.clone(),
            region: r + 1,
        })?;
        let tf = t as f64;
        region_ess.push((tf / (1.0 + 2.0 * rho.iter().sum::<f64>())).clamp(1.0, tf));
        autocorrelations.push(rho);
    }
    let ess = region_ess.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EssReport {
        subject_id: series.subject_id.clone(),
        timepoints: t,
        ess,
        region_ess,
        autocorrelations,
        kept: Vec::new(),
    })
}

pub fn ess(series: &SubjectTimeSeries) -> Result<f64> {
    ess_report(series).map(|r| r.ess)
}

/// `round(ess)` evenly spaced indices from the first to the last time point.
pub fn thin_indices(t: usize, ess: f64) -> Result<Vec<usize>> {
    if !(ess >= 1.0 && ess <= t as f64) {
        return Err(Error::InvalidArgument(format!("ess {ess} outside [1, {t}]")));
    }
    let m = ess.round() as usize;
    if m == 1 {
        return Ok(vec![0]);
    }
    let span = (t - 1) as f64;
    Ok((0..m)
        .map(|k| (k as f64 * span / (m - 1) as f64).round() as usize)
        .collect())
}

pub fn thin(series: &SubjectTimeSeries, ess: f64) -> Result<SubjectTimeSeries> {
    series.select(&thin_indices(series.timepoints(), ess)?)
}

/// `round(ess)` indices drawn without replacement, kept in time order.
pub fn thin_random(series: &SubjectTimeSeries, ess: f64, rng: &mut impl Rng) -> Result<SubjectTimeSeries> {
    let t = series.timepoints();
    if !(ess >= 1.0 && ess <= t as f64) {
        return Err(Error::InvalidArgument(format!("ess {ess} outside [1, {t}]")));
    }
    let mut rows = index::sample(rng, t, ess.round() as usize).into_vec();
    rows.sort_unstable();
    series.select(&rows)
}

/// Unbiased sample covariance (or correlation) of the rows.
pub fn sample_covariance(series: &SubjectTimeSeries, correlation: bool) -> Result<SpdMatrix> {
    let (t, p) = (series.timepoints(), series.regions());
    if t <= p {
        return Err(Error::RankDeficient(format!(
            "subject '{}' has {t} time points for {p} regions; the covariance is singular \
             (more time points or a shrinkage estimator are needed)",
            series.subject_id
        )));
    }
    let x = &series.values;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / t as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut s = 0.0;
            for r in 0..t {
                s += (x[(r, a)] - means[a]) * (x[(r, b)] - means[b]);
            }
            cov[(a, b)] = s / (t - 1) as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    if correlation {
        let sd: Vec<f64> = (0..p).map(|i| cov[(i, i)].sqrt()).collect();
        if let Some(r) = sd.iter().position(|s| *s == 0.0) {
            return Err(Error::DegenerateRegion {
                subject: series.subject_id.clone(),
                region: r + 1,
            });
        }
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] /= sd[a] * sd[b];
            }
        }
    }
    SpdMatrix::new(cov).map_err(|e| match e {
        Error::IllConditioned { .. } => {
            Error::RankDeficient(format!("subject '{}': sample covariance is not positive definite ({e})", series.subject_id))
        }
        other => other,
    })
}

/// ESS, even thinning and covariance for one subject.
pub fn ingest_subject(series: &SubjectTimeSeries, correlation: bool) -> Result<(SpdMatrix, EssReport)> {
    let mut report = ess_report(series)?;
    report.kept = thin_indices(series.timepoints(), report.ess)?;
    let thinned = series.select(&report.kept)?;
    Ok((sample_covariance(&thinned, correlation)?, report))
}
