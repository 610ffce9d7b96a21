//! Evaluation metrics and posterior summaries.
//!
//! All intervals use type-7 quantiles (linear interpolation between order
//! statistics).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_mean_with_gamma, spatial_filter, Dataset, ModelParams};
use crate::spd::SpdMatrix;

/// Fewer predictive draws than this make interval endpoints unreliable.
pub const MIN_STABLE_DRAWS: usize = 20;

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub median: f64,
    pub mean: f64,
}

impl IntervalSummary {
    /// Central `level` interval of the draws.
    pub fn from_draws(draws: &[f64], level: f64) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Empty("no draws to summarize".into()));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(format!("interval level must lie in (0, 1), got {level}")));
        }
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        let tail = 0.5 * (1.0 - level);
        Ok(Self {
            level,
            lower: quantile_sorted(&s, tail),
            upper: quantile_sorted(&s, 1.0 - tail),
            median: quantile_sorted(&s, 0.5),
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn excludes_zero(&self) -> bool {
        !self.contains(0.0)
    }
}

pub fn mspe(yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions vs {} responses", yhat.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Empty("no test subjects".into()));
    }
    Ok(yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Fraction of subjects whose true signal lies in the central `level`
/// interval of their predictive draws.
pub fn rc(draw_predictions: &[Vec<f64>], g: &[f64], level: f64) -> Result<f64> {
    if draw_predictions.len() != g.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} subjects with draws vs {} signals",
            draw_predictions.len(),
            g.len()
        )));
    }
    if g.is_empty() {
        return Err(Error::Empty("no test subjects".into()));
    }
    let mut covered = 0usize;
    for (draws, gi) in draw_predictions.iter().zip(g) {
        covered += IntervalSummary::from_draws(draws, level)?.contains(*gi) as usize;
    }
    Ok(covered as f64 / g.len() as f64)
}

/// Absolute cosine similarity.
pub fn acs(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot.abs() / (nu * nv)).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignReference<'a> {
    /// Match the sign of this vector at its largest-magnitude coordinate.
    Truth(&'a [f64]),
    /// Make the coordinate with the largest mean absolute value positive.
    SelfReference,
}

fn argmax_abs(v: impl Iterator<Item = f64>) -> Option<usize> {
    v.enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, x)| match best {
            Some((_, b)) if b >= x.abs() => best,
            _ => Some((i, x.abs())),
        })
        .map(|(i, _)| i)
}

/// Flips draws of one vector so their signs agree at a reference
/// coordinate, which is returned.
pub fn sign_align(draws: &mut [Vec<f64>], reference: SignReference<'_>) -> Result<usize> {
    let first = draws.first().ok_or_else(|| Error::Empty("no draws to align".into()))?;
    let len = first.len();
    if draws.iter().any(|d| d.len() != len) {
        return Err(Error::DimensionMismatch("draws of unequal length".into()));
    }
    let (l, target_sign) = match reference {
        SignReference::Truth(truth) => {
            if truth.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "reference has {} entries, draws have {len}",
                    truth.len()
                )));
            }
            let l = argmax_abs(truth.iter().copied()).ok_or_else(|| Error::Empty("empty reference".into()))?;
            if truth[l] == 0.0 {
                return Err(Error::AlignmentUndefined("reference vector is zero".into()));
            }
            (l, truth[l].signum())
        }
        SignReference::SelfReference => {
            let n = draws.len() as f64;
            let mean_abs = (0..len).map(|k| draws.iter().map(|d| d[k].abs()).sum::<f64>() / n);
            let l = argmax_abs(mean_abs).ok_or_else(|| Error::Empty("empty draws".into()))?;
            (l, 1.0)
        }
    };
    for d in draws.iter_mut() {
        if d[l] == 0.0 {
            return Err(Error::AlignmentUndefined(format!("draw has zero at reference coordinate {l}")));
        }
        if d[l].signum() != target_sign {
            d.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(l)
}

/// `1` when the interval covers `truth`.
pub fn coverage(interval: &IntervalSummary, truth: f64) -> u8 {
    interval.contains(truth) as u8
}

pub fn interval_length(lower: f64, upper: f64) -> Result<f64> {
    if upper < lower {
        return Err(Error::InvalidArgument(format!("inverted interval [{lower}, {upper}]")));
    }
    Ok(upper - lower)
}

/// Truth with `b` ascending and the loading columns permuted to match.
pub fn sort_truth(gamma: &DMatrix<f64>, b: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if gamma.ncols() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} columns vs {} coefficients", gamma.ncols(), b.len())));
    }
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b[i].total_cmp(&b[j]));
    let mut g = DMatrix::zeros(gamma.nrows(), gamma.ncols());
    for (dst, &src) in order.iter().enumerate() {
        g.set_column(dst, &gamma.column(src));
    }
    Ok((g, order.iter().map(|&i| b[i]).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialFilterSummary {
    pub d: usize,
    pub p: usize,
    /// Row-major `d × p` interval summaries.
    pub entries: Vec<IntervalSummary>,
    /// `(component, region)` pairs whose interval excludes zero.
    pub significant: Vec<(usize, usize)>,
}

impl SpatialFilterSummary {
    pub fn entry(&self, component: usize, region: usize) -> &IntervalSummary {
        &self.entries[component * self.p + region]
    }
}

/// Intervals for every entry of `Γᵀ M*^{-1/2}`, each row sign-aligned so
/// its largest mean-magnitude entry is positive.
pub fn summarize_spatial_filter(draws: &[ModelParams], mref: &SpdMatrix, level: f64) -> Result<SpatialFilterSummary> {
    let first = draws.first().ok_or_else(|| Error::Empty("no posterior draws".into()))?;
    let (p, d) = (first.angles.p(), first.angles.d());
    let filters = draws
        .iter()
        .map(|params| spatial_filter(params, mref))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = vec![None; d * p];
    let mut significant = Vec::new();
    for j in 0..d {
        let mut rows: Vec<Vec<f64>> = filters.iter().map(|f| f.row(j).iter().copied().collect()).collect();
        sign_align(&mut rows, SignReference::SelfReference)?;
        for k in 0..p {
            let vals: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            let s = IntervalSummary::from_draws(&vals, level)?;
            if s.excludes_zero() {
                significant.push((j, k));
            }
            entries[j * p + k] = Some(s);
        }
    }
    Ok(SpatialFilterSummary {
        d,
        p,
        entries: entries.into_iter().map(|e| e.expect("filled")).collect(),
        significant,
    })
}

/// Posterior mean-response draws for every subject: `out[i][s]`.
pub fn predictive_draws(draws: &[ModelParams], data: &Dataset, offset: f64) -> Result<Vec<Vec<f64>>> {
    let gammas: Vec<DMatrix<f64>> = draws.iter().map(|p| p.gamma().into_matrix()).collect();
    data.features()
        .iter()
        .map(|phi| {
            draws
                .iter()
                .zip(&gammas)
                .map(|(params, g)| predict_mean_with_gamma(g, &params.b, params.mu, phi).map(|m| m + offset))
                .collect()
        })
        .collect()
}

/// Known generating parameters for simulation-mode evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TruthRef<'a> {
    pub gamma: &'a DMatrix<f64>,
    pub b: &'a [f64],
    /// Noiseless test signals.
    pub g: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mspe: f64,
    /// Present only when true signals are known.
    pub rc: Option<f64>,
    pub interval_lengths: Vec<f64>,
    /// `acs[j][s]`: column `j`, draw `s`.
    pub acs: Vec<Vec<f64>>,
    /// Row-major `p × d` indicators for the loading matrix.
    pub gamma_coverage: Vec<u8>,
    pub b_coverage: Vec<u8>,
    pub level: f64,
    pub interval_kind: String,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn mean_length(&self) -> f64 {
        self.interval_lengths.iter().sum::<f64>() / self.interval_lengths.len() as f64
    }

    pub fn median_acs(&self, column: usize) -> f64 {
        quantile(&self.acs[column], 0.5)
    }

    pub fn mean_gamma_coverage(&self) -> f64 {
        mean_indicator(&self.gamma_coverage)
    }

    pub fn mean_b_coverage(&self) -> f64 {
        mean_indicator(&self.b_coverage)
    }
}

fn mean_indicator(v: &[u8]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64
    }
}

/// Test-set metrics for a set of posterior draws. Responses in `test` are on
/// the original scale; `offset` is added back to centered predictions.
pub fn evaluate(
    draws: &[ModelParams],
    test: &Dataset,
    offset: f64,
    truth: Option<TruthRef<'_>>,
    level: f64,
) -> Result<MetricsReport> {
    if draws.is_empty() {
        return Err(Error::Empty("no posterior draws".into()));
    }
    let mut warnings = Vec::new();
    if draws.len() < MIN_STABLE_DRAWS {
        warnings.push(format!(
            "only {} draws; interval endpoints are unstable below {MIN_STABLE_DRAWS}",
            draws.len()
        ));
    }
    let pred = predictive_draws(draws, test, offset)?;
    let mut yhat = Vec::with_capacity(pred.len());
    let mut lengths = Vec::with_capacity(pred.len());
    for subject in &pred {
        let s = IntervalSummary::from_draws(subject, level)?;
        yhat.push(s.median);
        lengths.push(interval_length(s.lower, s.upper)?);
    }
    let mspe = mspe(&yhat, test.ys())?;

    let (mut rc_value, mut acs_all, mut gamma_cov, mut b_cov) = (None, Vec::new(), Vec::new(), Vec::new());
    if let Some(t) = truth {
        let (p, d) = (draws[0].angles.p(), draws[0].angles.d());
        if t.gamma.nrows() != p || t.gamma.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "true loadings are {}x{}, draws are {p}x{d}",
                t.gamma.nrows(),
                t.gamma.ncols()
            )));
        }
        rc_value = Some(rc(&pred, t.g, level)?);
        let (gamma_true, b_true) = sort_truth(t.gamma, t.b)?;
        let gammas: Vec<DMatrix<f64>> = draws.iter().map(|d| d.gamma().into_matrix()).collect();
        gamma_cov = vec![0u8; p * d];
        for j in 0..d {
            let truth_col: Vec<f64> = gamma_true.column(j).iter().copied().collect();
            let mut cols: Vec<Vec<f64>> = gammas.iter().map(|g| g.column(j).iter().copied().collect()).collect();
            acs_all.push(cols.iter().map(|c| acs(c, &truth_col)).collect::<Result<Vec<_>>>()?);
            sign_align(&mut cols, SignReference::Truth(&truth_col))?;
            for k in 0..p {
                let vals: Vec<f64> = cols.iter().map(|c| c[k]).collect();
                let s = IntervalSummary::from_draws(&vals, level)?;
                gamma_cov[k * d + j] = coverage(&s, truth_col[k]);
            }
        }
        for (j, bt) in b_true.iter().enumerate() {
            let mut vals: Vec<f64> = draws
                .iter()
                .map(|dr| {
                    let mut b = dr.b.clone();
                    b.sort_by(f64::total_cmp);
                    b[j]
                })
                .collect();
            vals.sort_by(f64::total_cmp);
            b_cov.push(coverage(&IntervalSummary::from_draws(&vals, level)?, *bt));
        }
    }

    Ok(MetricsReport {
        mspe,
        rc: rc_value,
        interval_lengths: lengths,
        acs: acs_all,
        gamma_coverage: gamma_cov,
        b_coverage: b_cov,
        level,
        interval_kind: "mean_signal".into(),
        warnings,
    })
}
