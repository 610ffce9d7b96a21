//! Fit and evaluate on stored datasets.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hmc::{run_chains, Diagnostics, SamplerConfig};
use crate::io::{CovDataset, FitRecord};
use crate::metrics::{evaluate, MetricsReport, TruthRef};
use crate::model::{AnglePrior, Dataset, FeatureMap, ModelSpec, Posterior};
use crate::sim::SimTruth;
use crate::spd::{euclidean_mean, SpdMatrix};

/// Angle prior family for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    Sparse,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Reduced dimension; `None` uses the dimension recorded by the
    /// simulator in the training provenance, falling back to 2.
    pub d: Option<usize>,
    /// Global horseshoe scale; `None` picks 0.1 for `p < 10` and 0.3 otherwise.
    pub tau: Option<f64>,
    pub prior: PriorKind,
    pub features: FeatureMap,
    pub noncentered: bool,
    pub b_prior_sd: f64,
    pub mu_prior_sd: f64,
    /// Median of the σ prior; `None` uses the training response SD.
    pub sigma_median: Option<f64>,
    pub rhat_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: None,
            tau: None,
            prior: PriorKind::Sparse,
            features: FeatureMap::Tangent,
            noncentered: true,
            b_prior_sd: 10.0,
            mu_prior_sd: 1.0,
            sigma_median: None,
            rhat_threshold: 1.05,
        }
    }
}

impl ModelConfig {
    pub fn tau_for(&self, p: usize) -> f64 {
        self.tau.unwrap_or(if p < 10 { 0.1 } else { 0.3 })
    }

    /// Short label: `t`/`n` for the feature map, `s` appended for the sparse prior.
    pub fn variant(&self) -> String {
        let f = match self.features {
            FeatureMap::Tangent => "t",
            FeatureMap::Naive => "n",
        };
        match self.prior {
            PriorKind::Sparse => format!("{f}s"),
            PriorKind::Uniform => f.to_string(),
        }
    }

    pub fn d_for(&self, train: &CovDataset) -> usize {
        self.d
            .or_else(|| train.provenance.pointer("/simulation/d").and_then(Value::as_u64).map(|d| d as usize))
            .unwrap_or(2)
    }

    pub fn spec(&self, p: usize, d: usize, sigma_median: f64) -> Result<ModelSpec> {
        let angle_prior = match self.prior {
            PriorKind::Sparse => AnglePrior::Horseshoe {
                tau: self.tau_for(p),
                noncentered: self.noncentered,
            },
            PriorKind::Uniform => AnglePrior::Uniform,
        };
        let spec = ModelSpec {
            p,
            d,
            angle_prior,
            b_prior_sd: self.b_prior_sd,
            mu_prior_sd: self.mu_prior_sd,
            sigma_median: self.sigma_median.unwrap_or(sigma_median),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Centers responses on their mean, builds features against the training
/// Euclidean mean and runs the sampler.
pub fn fit(train: &CovDataset, model: &ModelConfig, sampler: &SamplerConfig, provenance: Value) -> Result<FitRecord> {
    if train.n() < 2 {
        return Err(Error::InvalidArgument("training set needs at least two subjects".into()));
    }
    let covs = train.covariances()?;
    let mref = euclidean_mean(&covs)?;
    let (y_offset, y_sd) = mean_sd(&train.ys);
    if !(y_sd > 0.0) {
        return Err(Error::DegenerateSignal("training responses are constant".into()));
    }
    let centered: Vec<f64> = train.ys.iter().map(|y| y - y_offset).collect();
    let data = Dataset::from_covariances(&covs, centered, mref.clone(), model.features)?;
    let spec = model.spec(train.p, model.d_for(train), y_sd)?;
    let posterior = Posterior::new(spec.clone(), &data)?;
    let draws = run_chains(&posterior, sampler)?;
    let diagnostics = Diagnostics::new(&draws, model.rhat_threshold);
    let converged = diagnostics.converged();
    Ok(FitRecord {
        spec,
        feature_map: model.features,
        y_offset,
        scale: train.scale,
        mref: mref.into_matrix(),
        sampler: sampler.clone(),
        draws,
        diagnostics,
        converged,
        provenance,
    })
}

/// Test-set metrics; truth-dependent metrics are filled when `truth` is given.
pub fn evaluate_fit(fit: &FitRecord, test: &CovDataset, truth: Option<&SimTruth>, level: f64) -> Result<MetricsReport> {
    if test.p != fit.spec.p {
        return Err(Error::DimensionMismatch(format!(
            "test data has p={}, fit has p={}",
            test.p, fit.spec.p
        )));
    }
    let mref = SpdMatrix::new(fit.mref.clone())?;
    let covs = test.covariances()?;
    let data = Dataset::from_covariances(&covs, test.ys.clone(), mref, fit.feature_map)?;
    let params = fit.params()?;
    let gamma;
    let truth_ref = match truth {
        Some(t) => {
            let g = test
                .signal
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("test set carries no true signal".into()))?;
            gamma = t.gamma_matrix();
            Some(TruthRef { gamma: &gamma, b: &t.b, g })
        }
        None => None,
    };
    evaluate(&params, &data, fit.y_offset, truth_ref, level)
}
