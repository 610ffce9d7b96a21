//! Scalar-on-network regression model
//!
//! ```text
//! Y_i = μ + Σ_j b_j γ_jᵀ φ_i γ_j + ε_i,   ε_i ~ N(0, σ²)
//! ```
//!
//! with `Γ = (γ_1 … γ_d)` built from Givens angles, `b_1 < … < b_d`, and a
//! horseshoe (truncated normal with half-Cauchy local scales) or flat prior on
//! the angles. The sampler works on an unconstrained vector laid out as
//! `[angles | b | μ | log σ | log λ]`.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::givens::{angle_count, reconstruct, reconstruct_vjp, GivensAngles, StiefelPoint};
use crate::hmc::LogDensity;
use crate::special::{erf_scaled, norm_cdf, norm_inv_cdf, norm_log_pdf, LN_SQRT_2PI};
use crate::spd::{spd_inv_sqrt, SpdMatrix, SymMatrix, TangentProjector};

/// Below this truncation half-width (in prior standard deviations) the
/// truncated normal is treated as uniform on its interval.
const UNIFORM_LIMIT: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnglePrior {
    /// `θ ~ TN(0, τ²λ²)` on `[-π/2, π/2]`, `λ ~ C⁺(0, 1)`.
    Horseshoe { tau: f64, noncentered: bool },
    /// Flat on `[-π/2, π/2]`; no local scales.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p: usize,
    pub d: usize,
    pub angle_prior: AnglePrior,
    pub b_prior_sd: f64,
    pub mu_prior_sd: f64,
    /// Median of the exponential prior on σ.
    pub sigma_median: f64,
}

impl ModelSpec {
    pub fn new(p: usize, d: usize, angle_prior: AnglePrior, sigma_median: f64) -> Result<Self> {
        let spec = Self {
            p,
            d,
            angle_prior,
            b_prior_sd: 10.0,
            mu_prior_sd: 1.0,
            sigma_median,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        angle_count(self.p, self.d)?;
        if let AnglePrior::Horseshoe { tau, .. } = self.angle_prior {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
            }
        }
        for (name, v) in [
            ("b_prior_sd", self.b_prior_sd),
            ("mu_prior_sd", self.mu_prior_sd),
            ("sigma_median", self.sigma_median),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let k = angle_count(self.p, self.d).expect("validated spec");
        Layout {
            angles: k,
            d: self.d,
            local_scales: matches!(self.angle_prior, AnglePrior::Horseshoe { .. }),
        }
    }

    fn sigma_rate(&self) -> f64 {
        LN_2 / self.sigma_median
    }

    fn tau(&self) -> Option<f64> {
        match self.angle_prior {
            AnglePrior::Horseshoe { tau, .. } => Some(tau),
            AnglePrior::Uniform => None,
        }
    }
}

/// Offsets of each parameter block inside an unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub angles: usize,
    pub d: usize,
    pub local_scales: bool,
}

impl Layout {
    /// `2K + d + 2` with local scales, `K + d + 2` without.
    pub fn dim(&self) -> usize {
        self.angles + self.d + 2 + if self.local_scales { self.angles } else { 0 }
    }
    pub fn b(&self) -> usize {
        self.angles
    }
    pub fn mu(&self) -> usize {
        self.angles + self.d
    }
    pub fn log_sigma(&self) -> usize {
        self.angles + self.d + 1
    }
    pub fn log_lambda(&self) -> usize {
        self.angles + self.d + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub angles: GivensAngles,
    pub b: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// One local scale per angle; empty under the flat angle prior.
    pub lambda: Vec<f64>,
    /// Global scale, `None` under the flat angle prior.
    pub tau: Option<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.angles.d();
        if self.b.len() != d {
            return Err(Error::InvalidParams(format!("b has {} entries, expected {d}", self.b.len())));
        }
        if self.b.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParams(format!("b must be strictly increasing: {:?}", self.b)));
        }
        if !self.mu.is_finite() || !self.b.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParams("non-finite mu or b".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParams(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return Err(Error::InvalidParams(format!("tau must be positive, got {tau}")));
            }
            if self.lambda.len() != self.angles.len() {
                return Err(Error::InvalidParams(format!(
                    "expected {} local scales, got {}",
                    self.angles.len(),
                    self.lambda.len()
                )));
            }
        } else if !self.lambda.is_empty() {
            return Err(Error::InvalidParams("local scales given without tau".into()));
        }
        if !self.lambda.iter().all(|l| *l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidParams("local scales must be positive".into()));
        }
        Ok(())
    }

    pub fn gamma(&self) -> StiefelPoint {
        reconstruct(&self.angles)
    }
}

/// Responses paired with their feature matrices and the reference point.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<SymMatrix>,
    ys: Vec<f64>,
    mref: SpdMatrix,
    /// Row-major copies of the features, concatenated.
    flat: Vec<f64>,
}

/// How covariance matrices become model features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `Log(M*^{-1/2} M M*^{-1/2})`.
    #[default]
    Tangent,
    /// The raw covariance matrix.
    Naive,
}

impl Dataset {
    pub fn new(features: Vec<SymMatrix>, ys: Vec<f64>, mref: SpdMatrix) -> Result<Self> {
        if features.len() != ys.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature matrices vs {} responses",
                features.len(),
                ys.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::Empty("dataset has no subjects".into()));
        }
        let p = mref.dim();
        if let Some(bad) = features.iter().position(|f| f.dim() != p) {
            return Err(Error::DimensionMismatch(format!(
                "feature {bad} is {}x{}, reference is {p}x{p}",
                features[bad].dim(),
                features[bad].dim()
            )));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        let mut flat = Vec::with_capacity(features.len() * p * p);
        for f in &features {
            // symmetric, so column-major storage is also row-major
            flat.extend_from_slice(f.matrix().as_slice());
        }
        Ok(Self {
            features,
            ys,
            mref,
            flat,
        })
    }

    /// Maps covariances to features against `mref`.
    pub fn from_covariances(ms: &[SpdMatrix], ys: Vec<f64>, mref: SpdMatrix, map: FeatureMap) -> Result<Self> {
        let features = match map {
            FeatureMap::Tangent => {
                let proj = TangentProjector::new(&mref)?;
                ms.iter().map(|m| proj.project(m)).collect::<Result<Vec<_>>>()?
            }
            FeatureMap::Naive => ms.iter().map(SpdMatrix::as_sym).collect(),
        };
        Self::new(features, ys, mref)
    }

    pub fn n(&self) -> usize {
        self.ys.len()
    }

    pub fn p(&self) -> usize {
        self.mref.dim()
    }

    pub fn features(&self) -> &[SymMatrix] {
        &self.features
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn mref(&self) -> &SpdMatrix {
        &self.mref
    }

    /// Same features, responses shifted by `-offset`.
    pub fn centered(&self, offset: f64) -> Self {
        Self {
            features: self.features.clone(),
            ys: self.ys.iter().map(|y| y - offset).collect(),
            mref: self.mref.clone(),
            flat: self.flat.clone(),
        }
    }

    fn feature_flat(&self, i: usize) -> &[f64] {
        let pp = self.p() * self.p();
        &self.flat[i * pp..(i + 1) * pp]
    }
}

#[inline]
fn quad_form(phi: &[f64], p: usize, v: &[f64], out: &mut [f64]) -> f64 {
    let mut q = 0.0;
    for r in 0..p {
        let row = &phi[r * p..(r + 1) * p];
        let mut acc = 0.0;
        for c in 0..p {
            acc += row[c] * v[c];
        }
        out[r] = acc;
        q += v[r] * acc;
    }
    q
}

fn check_feature_dim(gamma: &DMatrix<f64>, phi: &SymMatrix) -> Result<()> {
    if gamma.nrows() != phi.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Γ has {} rows, feature is {}x{}",
            gamma.nrows(),
            phi.dim(),
            phi.dim()
        )));
    }
    Ok(())
}

/// `μ + Σ_j b_j γ_jᵀ φ γ_j` for a given `Γ`.
pub fn predict_mean_with_gamma(gamma: &DMatrix<f64>, b: &[f64], mu: f64, phi: &SymMatrix) -> Result<f64> {
    check_feature_dim(gamma, phi)?;
    let p = phi.dim();
    let phi = phi.matrix().as_slice();
    let mut scratch = vec![0.0; p];
    let mut m = mu;
    for (j, bj) in b.iter().enumerate() {
        let col = gamma.column(j);
        m += bj * quad_form(phi, p, col.as_slice(), &mut scratch);
    }
    Ok(m)
}

pub fn predict_mean(params: &ModelParams, phi: &SymMatrix) -> Result<f64> {
    predict_mean_with_gamma(params.gamma().matrix(), &params.b, params.mu, phi)
}

/// `μ + ⟨φ, Γ B Γᵀ⟩`, the dense counterpart of [`predict_mean`].
pub fn predict_mean_dense(params: &ModelParams, phi: &SymMatrix) -> Result<f64> {
    let gamma = params.gamma().into_matrix();
    check_feature_dim(&gamma, phi)?;
    let bmat = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&params.b));
    let w = &gamma * bmat * gamma.transpose();
    Ok(params.mu + phi.matrix().component_mul(&w).sum())
}

pub fn log_likelihood(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let gamma = params.gamma().into_matrix();
    let n = data.n() as f64;
    let mut ss = 0.0;
    for (phi, y) in data.features.iter().zip(&data.ys) {
        let r = y - predict_mean_with_gamma(&gamma, &params.b, params.mu, phi)?;
        ss += r * r;
    }
    let s = params.sigma;
    Ok(-n * (LN_SQRT_2PI + s.ln()) - ss / (2.0 * s * s))
}

/// `log TN(θ; 0, s², [-π/2, π/2])`.
pub fn truncated_normal_log_density(theta: f64, scale: f64) -> f64 {
    let a = FRAC_PI_2 / scale;
    norm_log_pdf(theta / scale) - scale.ln() - erf_scaled(a).ln()
}

fn half_cauchy_log_density(lambda: f64) -> f64 {
    (2.0 / PI).ln() - (lambda * lambda).ln_1p()
}

fn normal_log_density(x: f64, sd: f64) -> f64 {
    norm_log_pdf(x / sd) - sd.ln()
}

pub fn log_prior(params: &ModelParams, spec: &ModelSpec) -> Result<f64> {
    params.validate()?;
    if params.angles.p() != spec.p || params.angles.d() != spec.d {
        return Err(Error::DimensionMismatch("params do not match model dimensions".into()));
    }
    let mut lp = 0.0;
    match spec.angle_prior {
        AnglePrior::Horseshoe { tau, .. } => {
            for (theta, lambda) in params.angles.values().iter().zip(&params.lambda) {
                lp += truncated_normal_log_density(*theta, tau * lambda);
                lp += half_cauchy_log_density(*lambda);
            }
        }
        AnglePrior::Uniform => {
            lp -= params.angles.len() as f64 * PI.ln();
        }
    }
    lp += params.b.iter().map(|b| normal_log_density(*b, spec.b_prior_sd)).sum::<f64>();
    lp += normal_log_density(params.mu, spec.mu_prior_sd);
    let rate = spec.sigma_rate();
    lp += rate.ln() - rate * params.sigma;
    Ok(lp)
}

/// `θ = (π/2) tanh(u/2)` and `log dθ/du`.
#[inline]
fn bounded_angle(u: f64) -> (f64, f64, f64) {
    let half = 0.5 * u;
    let t = half.tanh();
    let theta = (FRAC_PI_2 * t).clamp(-FRAC_PI_2, FRAC_PI_2);
    let x = half.abs();
    // log(π/4) + log sech²(u/2)
    let log_jac = PI.ln() - 2.0 * x - 2.0 * (-2.0 * x).exp().ln_1p();
    (theta, log_jac, t)
}

fn unbounded_angle(theta: f64) -> f64 {
    2.0 * (theta / FRAC_PI_2).atanh()
}

/// Noncentered angle map: `w ~ N(0,1)` pushed through the truncated-normal
/// quantile so that `θ = s·q(w)` is exactly `TN(0, s², [-π/2, π/2])`.
#[derive(Debug, Clone, Copy)]
struct NoncenteredAngle {
    theta: f64,
    /// `∂θ/∂w`
    dtheta_dw: f64,
    /// `∂θ/∂log λ`
    dtheta_deta: f64,
    log_dtheta_dw: f64,
}

fn noncentered_angle(w: f64, scale: f64) -> NoncenteredAngle {
    let a = FRAC_PI_2 / scale;
    let (q, log_dq_dw, dq_da) = if a < UNIFORM_LIMIT {
        let e = erf_scaled(w);
        (a * e, a.ln() + LN_2 + norm_log_pdf(w), e)
    } else {
        let e = erf_scaled(a);
        let lower = norm_cdf(-a) + norm_cdf(-w.abs()) * e;
        let qn = if lower > 0.0 && lower.is_finite() {
            norm_inv_cdf(lower).clamp(-a, 0.0)
        } else {
            -w.abs()
        };
        let q = if w < 0.0 { qn } else { -qn };
        let log_dq_dw = 0.5 * (q * q - w * w) + e.ln();
        let dq_da = (0.5 * (q * q - a * a)).exp() * erf_scaled(w);
        (q, log_dq_dw, dq_da)
    };
    let theta = (scale * q).clamp(-FRAC_PI_2, FRAC_PI_2);
    let dq_dw = log_dq_dw.exp();
    NoncenteredAngle {
        theta,
        dtheta_dw: scale * dq_dw,
        dtheta_deta: theta - FRAC_PI_2 * dq_da,
        log_dtheta_dw: scale.ln() + log_dq_dw,
    }
}

fn noncentered_inverse(theta: f64, scale: f64) -> f64 {
    let a = FRAC_PI_2 / scale;
    let q = theta / scale;
    if a < UNIFORM_LIMIT {
        return norm_inv_cdf(0.5 * (q / a + 1.0));
    }
    let e = erf_scaled(a);
    let u = (norm_cdf(-q.abs()) - norm_cdf(-a)) / e;
    let wn = norm_inv_cdf(u);
    if q < 0.0 {
        wn
    } else {
        -wn
    }
}

pub fn to_unconstrained(params: &ModelParams, spec: &ModelSpec) -> Result<Vec<f64>> {
    params.validate()?;
    let layout = spec.layout();
    let mut v = vec![0.0; layout.dim()];
    let noncentered = matches!(spec.angle_prior, AnglePrior::Horseshoe { noncentered: true, .. });
    for (k, theta) in params.angles.values().iter().enumerate() {
        v[k] = if noncentered {
            noncentered_inverse(*theta, spec.tau().unwrap() * params.lambda[k])
        } else {
            unbounded_angle(*theta)
        };
    }
    let b0 = layout.b();
    v[b0] = params.b[0];
    for j in 1..spec.d {
        v[b0 + j] = (params.b[j] - params.b[j - 1]).ln();
    }
    v[layout.mu()] = params.mu;
    v[layout.log_sigma()] = params.sigma.ln();
    if layout.local_scales {
        for (k, l) in params.lambda.iter().enumerate() {
            v[layout.log_lambda() + k] = l.ln();
        }
    }
    if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("unconstrained coordinate {bad}")));
    }
    Ok(v)
}

/// Derivatives of the constrained angles with respect to the sampler
/// coordinates, kept for the gradient pass.
struct AngleDerivs {
    /// `∂θ_k/∂(angle coordinate k)`
    dtheta_du: Vec<f64>,
    /// `∂θ_k/∂log λ_k` (noncentered only)
    dtheta_deta: Vec<f64>,
    /// `tanh(u/2)`, centered and flat parameterizations
    tanh_half: Vec<f64>,
}

fn decode(v: &[f64], spec: &ModelSpec) -> Result<(ModelParams, f64, AngleDerivs)> {
    let layout = spec.layout();
    if v.len() != layout.dim() {
        return Err(Error::DimensionMismatch(format!(
            "unconstrained vector has {} entries, expected {}",
            v.len(),
            layout.dim()
        )));
    }
    if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("unconstrained coordinate {bad}")));
    }
    let k = layout.angles;
    let mut log_jac = 0.0;
    let lambda: Vec<f64> = if layout.local_scales {
        v[layout.log_lambda()..layout.log_lambda() + k].iter().map(|e| e.exp()).collect()
    } else {
        Vec::new()
    };
    if lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::NonFinite("local scale overflow".into()));
    }
    let mut thetas = Vec::with_capacity(k);
    let mut derivs = AngleDerivs {
        dtheta_du: Vec::with_capacity(k),
        dtheta_deta: Vec::new(),
        tanh_half: Vec::new(),
    };
    match spec.angle_prior {
        AnglePrior::Horseshoe { tau, noncentered: true } => {
            for idx in 0..k {
                let na = noncentered_angle(v[idx], tau * lambda[idx]);
                thetas.push(na.theta);
                log_jac += na.log_dtheta_dw;
                derivs.dtheta_du.push(na.dtheta_dw);
                derivs.dtheta_deta.push(na.dtheta_deta);
            }
        }
        _ => {
            for &u in &v[..k] {
                let (theta, lj, t) = bounded_angle(u);
                thetas.push(theta);
                log_jac += lj;
                derivs.dtheta_du.push(FRAC_PI_2 * 0.5 * (1.0 - t * t));
                derivs.tanh_half.push(t);
            }
        }
    }
    let b0 = layout.b();
    let mut b = Vec::with_capacity(spec.d);
    b.push(v[b0]);
    for j in 1..spec.d {
        let step = v[b0 + j].exp();
        b.push(b[j - 1] + step);
        log_jac += v[b0 + j];
    }
    let mu = v[layout.mu()];
    let log_sigma = v[layout.log_sigma()];
    let sigma = log_sigma.exp();
    log_jac += log_sigma;
    if layout.local_scales {
        log_jac += v[layout.log_lambda()..layout.log_lambda() + k].iter().sum::<f64>();
    }
    if !(sigma > 0.0 && sigma.is_finite()) || b.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("constrained parameter overflow".into()));
    }
    if b.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::NonFinite("b increments underflowed".into()));
    }
    let params = ModelParams {
        angles: GivensAngles::new(spec.p, spec.d, thetas)?,
        b,
        mu,
        sigma,
        lambda,
        tau: spec.tau(),
    };
    Ok((params, log_jac, derivs))
}

/// Constrained parameters and the log-determinant of the transform.
pub fn from_unconstrained(v: &[f64], spec: &ModelSpec) -> Result<(ModelParams, f64)> {
    decode(v, spec).map(|(params, lj, _)| (params, lj))
}

/// Terms of the unnormalized log posterior at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorParts {
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub log_jacobian: f64,
}

impl LogPosteriorParts {
    pub fn total(&self) -> f64 {
        self.log_likelihood + self.log_prior + self.log_jacobian
    }
}

/// Log posterior over unconstrained coordinates for one dataset.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    spec: ModelSpec,
    data: &'a Dataset,
}

impl<'a> Posterior<'a> {
    pub fn new(spec: ModelSpec, data: &'a Dataset) -> Result<Self> {
        spec.validate()?;
        if data.p() != spec.p {
            return Err(Error::DimensionMismatch(format!(
                "data has p={}, model has p={}",
                data.p(),
                spec.p
            )));
        }
        Ok(Self { spec, data })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.spec.layout().dim()
    }

    /// Value split into likelihood, prior and Jacobian terms, plus gradient.
    pub fn evaluate(&self, v: &[f64], grad: &mut [f64]) -> Result<LogPosteriorParts> {
        let spec = &self.spec;
        let layout = spec.layout();
        let (params, log_jacobian, derivs) = decode(v, spec)?;
        let (p, d, k) = (spec.p, spec.d, layout.angles);
        let gamma = reconstruct(&params.angles).into_matrix();

        // likelihood pass
        let sigma2 = params.sigma * params.sigma;
        let mut grad_gamma = DMatrix::<f64>::zeros(p, d);
        let mut grad_b = vec![0.0; d];
        let mut grad_mu = 0.0;
        let mut ss = 0.0;
        let mut proj = vec![0.0; p * d];
        let mut q = vec![0.0; d];
        for i in 0..self.data.n() {
            let phi = self.data.feature_flat(i);
            let mut m = params.mu;
            for j in 0..d {
                let col = gamma.column(j);
                q[j] = quad_form(phi, p, col.as_slice(), &mut proj[j * p..(j + 1) * p]);
                m += params.b[j] * q[j];
            }
            let r = self.data.ys[i] - m;
            ss += r * r;
            let c = r / sigma2;
            grad_mu += c;
            for j in 0..d {
                grad_b[j] += c * q[j];
                let w = 2.0 * c * params.b[j];
                let mut col = grad_gamma.column_mut(j);
                for (g, pv) in col.iter_mut().zip(&proj[j * p..(j + 1) * p]) {
                    *g += w * pv;
                }
            }
        }
        let n = self.data.n() as f64;
        let log_likelihood = -n * (LN_SQRT_2PI + params.sigma.ln()) - ss / (2.0 * sigma2);
        if !log_likelihood.is_finite() {
            return Err(Error::NonFinite("log likelihood".into()));
        }
        let log_prior = log_prior(&params, spec)?;
        let grad_theta = reconstruct_vjp(&params.angles, &gamma, &grad_gamma);

        grad.iter_mut().for_each(|g| *g = 0.0);
        let thetas = params.angles.values();
        match spec.angle_prior {
            AnglePrior::Horseshoe { noncentered: true, .. } => {
                for idx in 0..k {
                    let w = v[idx];
                    grad[idx] = grad_theta[idx] * derivs.dtheta_du[idx] - w;
                    let l2 = params.lambda[idx] * params.lambda[idx];
                    grad[layout.log_lambda() + idx] =
                        grad_theta[idx] * derivs.dtheta_deta[idx] + 1.0 - 2.0 * l2 / (1.0 + l2);
                }
            }
            AnglePrior::Horseshoe { tau, noncentered: false } => {
                for idx in 0..k {
                    let s = tau * params.lambda[idx];
                    let theta = thetas[idx];
                    let dprior_dtheta = -theta / (s * s);
                    grad[idx] = (grad_theta[idx] + dprior_dtheta) * derivs.dtheta_du[idx] - derivs.tanh_half[idx];
                    let a = FRAC_PI_2 / s;
                    let e = erf_scaled(a);
                    let norm_term = if a < UNIFORM_LIMIT {
                        1.0
                    } else {
                        2.0 * a * (norm_log_pdf(a)).exp() / e
                    };
                    let l2 = params.lambda[idx] * params.lambda[idx];
                    grad[layout.log_lambda() + idx] =
                        theta * theta / (s * s) - 1.0 + norm_term + 1.0 - 2.0 * l2 / (1.0 + l2);
                }
            }
            AnglePrior::Uniform => {
                for idx in 0..k {
                    grad[idx] = grad_theta[idx] * derivs.dtheta_du[idx] - derivs.tanh_half[idx];
                }
            }
        }

        // b: prior, then chain through the ordered transform
        let b_var = spec.b_prior_sd * spec.b_prior_sd;
        let gb: Vec<f64> = (0..d).map(|j| grad_b[j] - params.b[j] / b_var).collect();
        let b0 = layout.b();
        let mut tail = 0.0;
        for j in (0..d).rev() {
            tail += gb[j];
            grad[b0 + j] = if j == 0 {
                tail
            } else {
                tail * (params.b[j] - params.b[j - 1]) + 1.0
            };
        }
        let mu_var = spec.mu_prior_sd * spec.mu_prior_sd;
        grad[layout.mu()] = grad_mu - params.mu / mu_var;
        grad[layout.log_sigma()] = -n + ss / sigma2 - spec.sigma_rate() * params.sigma + 1.0;

        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log posterior gradient".into()));
        }
        let parts = LogPosteriorParts {
            log_likelihood,
            log_prior,
            log_jacobian,
        };
        if !parts.total().is_finite() {
            return Err(Error::NonFinite("log posterior".into()));
        }
        Ok(parts)
    }

    pub fn log_posterior_grad(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.dim()];
        let parts = self.evaluate(v, &mut grad)?;
        Ok((parts.total(), grad))
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.evaluate(x, grad).map(|parts| parts.total())
    }
}

/// `Γᵀ M*^{-1/2}`; row `j` is the subnetwork loading of component `j`.
pub fn spatial_filter(params: &ModelParams, mref: &SpdMatrix) -> Result<DMatrix<f64>> {
    let gamma = params.gamma().into_matrix();
    if gamma.nrows() != mref.dim() {
        return Err(Error::DimensionMismatch("Γ rows differ from reference dimension".into()));
    }
    Ok(gamma.transpose() * spd_inv_sqrt(mref)?.matrix())
}

/// Change in expected response for tangent deviations `δ_j` along `γ_j`.
pub fn response_delta(params: &ModelParams, deltas: &[f64]) -> Result<f64> {
    if deltas.len() != params.b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} deltas for {} components",
            deltas.len(),
            params.b.len()
        )));
    }
    Ok(deltas.iter().zip(&params.b).map(|(d, b)| d * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::givens::angle_count;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(p: usize, rng: &mut impl Rng) -> SymMatrix {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrized(&a).unwrap()
    }

    fn random_params(spec: &ModelSpec, rng: &mut impl Rng) -> ModelParams {
        let k = angle_count(spec.p, spec.d).unwrap();
        let angles = GivensAngles::new(spec.p, spec.d, (0..k).map(|_| rng.random_range(-1.4..1.4)).collect()).unwrap();
        let mut b: Vec<f64> = (0..spec.d).map(|_| rng.random_range(-2.0..2.0)).collect();
        b.sort_by(f64::total_cmp);
        let (lambda, tau) = match spec.angle_prior {
            AnglePrior::Horseshoe { tau, .. } => ((0..k).map(|_| rng.random_range(0.3..5.0)).collect(), Some(tau)),
            AnglePrior::Uniform => (Vec::new(), None),
        };
        ModelParams {
            angles,
            b,
            mu: rng.random_range(-1.0..1.0),
            sigma: rng.random_range(0.3..2.0),
            lambda,
            tau,
        }
    }

    fn random_dataset(p: usize, n: usize, rng: &mut impl Rng) -> Dataset {
        let features = (0..n).map(|_| random_sym(p, rng)).collect();
        let ys = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Dataset::new(features, ys, SpdMatrix::identity(p)).unwrap()
    }

    fn spec(p: usize, d: usize, prior: AnglePrior) -> ModelSpec {
        ModelSpec::new(p, d, prior, 0.8).unwrap()
    }

    const HS: AnglePrior = AnglePrior::Horseshoe { tau: 0.3, noncentered: true };
    const HS_CENTERED: AnglePrior = AnglePrior::Horseshoe { tau: 0.3, noncentered: false };

    #[test]
    fn predict_mean_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = spec(6, 2, HS);
        let mut params = random_params(&s, &mut rng);
        assert_eq!(predict_mean(&params, &SymMatrix::zeros(6)).unwrap(), params.mu);
        for _ in 0..20 {
            let phi = random_sym(6, &mut rng);
            let a = predict_mean(&params, &phi).unwrap();
            let b = predict_mean_dense(&params, &phi).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        params.b = vec![0.0, 0.0];
        let phi = random_sym(6, &mut rng);
        assert_eq!(predict_mean(&params, &phi).unwrap(), params.mu);
        assert!(predict_mean(&params, &random_sym(5, &mut rng)).is_err());
    }

    #[test]
    fn log_likelihood_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s = spec(4, 2, HS);
        let mut params = random_params(&s, &mut rng);
        params.sigma = 1.0;
        let phi = random_sym(4, &mut rng);
        let y = predict_mean(&params, &phi).unwrap();
        let data = Dataset::new(vec![phi], vec![y], SpdMatrix::identity(4)).unwrap();
        let ll = log_likelihood(&params, &data).unwrap();
        assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        params.sigma = 2.0;
        let ll2 = log_likelihood(&params, &data).unwrap();
        assert!((ll - ll2 - 2f64.ln()).abs() < 1e-12);

        let data = random_dataset(4, 15, &mut rng);
        let ll = log_likelihood(&params, &data).unwrap();
        let oracle: f64 = data
            .features()
            .iter()
            .zip(data.ys())
            .map(|(phi, y)| {
                let m = predict_mean_dense(&params, phi).unwrap();
                let z = (y - m) / params.sigma;
                (-0.5 * z * z).exp() / (params.sigma * (2.0 * PI).sqrt())
            })
            .map(f64::ln)
            .sum();
        assert!((ll - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn log_prior_cases() {
        let s = spec(3, 1, AnglePrior::Horseshoe { tau: 1.0, noncentered: true });
        let params = ModelParams {
            angles: GivensAngles::zeros(3, 1).unwrap(),
            b: vec![0.5],
            mu: 0.2,
            sigma: 1.3,
            lambda: vec![1.0, 1.0],
            tau: Some(1.0),
        };
        let at_mode = (1.0 / (2.0 * PI).sqrt() / (norm_cdf(FRAC_PI_2) - norm_cdf(-FRAC_PI_2))).ln();
        let rate = LN_2 / 0.8;
        let rest = 2.0 * (2.0 / PI).ln() - 2.0 * 2f64.ln()
            + (-(0.5f64 / 10.0).powi(2) / 2.0).exp().ln() - (10.0 * (2.0 * PI).sqrt()).ln()
            + (-(0.2f64).powi(2) / 2.0) - (2.0 * PI).sqrt().ln()
            + rate.ln() - rate * 1.3;
        let lp = log_prior(&params, &s).unwrap();
        assert!((lp - (2.0 * at_mode + rest)).abs() < 1e-12, "{lp} vs {}", 2.0 * at_mode + rest);

        // wide local scale flattens the angle term to -log π
        let wide = truncated_normal_log_density(0.7, 1e7);
        assert!((wide + PI.ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = spec(5, 2, HS);
        let mut params = random_params(&s, &mut rng);
        params.b = vec![1.0, 0.5];
        assert!(log_prior(&params, &s).is_err());
        params.b = vec![0.0, 0.5];
        params.sigma = -1.0;
        assert!(log_prior(&params, &s).is_err());
    }

    #[test]
    fn unconstrained_roundtrip_all_parameterizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for prior in [HS, HS_CENTERED, AnglePrior::Uniform] {
            let s = spec(6, 3, prior);
            for _ in 0..20 {
                let params = random_params(&s, &mut rng);
                let v = to_unconstrained(&params, &s).unwrap();
                assert_eq!(v.len(), s.layout().dim());
                let (back, _) = from_unconstrained(&v, &s).unwrap();
                for (a, b) in params.angles.values().iter().zip(back.angles.values()) {
                    assert!((a - b).abs() < 1e-12, "{prior:?}: {a} vs {b}");
                }
                for (a, b) in params.b.iter().zip(&back.b) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((params.sigma - back.sigma).abs() < 1e-12);
                for (a, b) in params.lambda.iter().zip(&back.lambda) {
                    assert!((a - b).abs() < 1e-12 * a);
                }
            }
        }
        let s = spec(6, 3, HS_CENTERED);
        let (p0, _) = from_unconstrained(&vec![0.0; s.layout().dim()], &s).unwrap();
        assert!(p0.angles.values().iter().all(|t| *t == 0.0));
        let s = spec(6, 3, HS);
        let (p0, _) = from_unconstrained(&vec![0.0; s.layout().dim()], &s).unwrap();
        assert!(p0.angles.values().iter().all(|t| *t == 0.0));
        assert!(from_unconstrained(&vec![f64::NAN; s.layout().dim()], &s).is_err());
    }

    #[test]
    fn log_jacobian_matches_finite_difference_volume() {
        // 1-D check per coordinate: log |∂c/∂v| from a central difference of
        // the constrained coordinate it drives.
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for prior in [HS, HS_CENTERED, AnglePrior::Uniform] {
            let s = spec(4, 2, prior);
            let layout = s.layout();
            let v: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, lj) = from_unconstrained(&v, &s).unwrap();
            let h = 1e-6;
            let flat = |v: &[f64]| -> Vec<f64> {
                let (pp, _) = from_unconstrained(v, &s).unwrap();
                let mut out = pp.angles.values().to_vec();
                out.extend(&pp.b);
                out.push(pp.mu);
                out.push(pp.sigma);
                out.extend(&pp.lambda);
                out
            };
            // full numerical Jacobian determinant
            let dim = layout.dim();
            let mut jac = DMatrix::zeros(dim, dim);
            for c in 0..dim {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[c] += h;
                vm[c] -= h;
                let fp = flat(&vp);
                let fm = flat(&vm);
                for r in 0..dim {
                    jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            let det = jac.determinant().abs().ln();
            assert!((det - lj).abs() < 1e-5 * lj.abs().max(1.0), "{prior:?}: {det} vs {lj}");
        }
    }

    fn fd_check(post: &Posterior, v: &[f64]) -> f64 {
        let (_, grad) = post.log_posterior_grad(v).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for c in 0..v.len() {
            let mut vp = v.to_vec();
            let mut vm = v.to_vec();
            vp[c] += h;
            vm[c] -= h;
            let fd = (post.log_posterior_grad(&vp).unwrap().0 - post.log_posterior_grad(&vm).unwrap().0) / (2.0 * h);
            let err = (fd - grad[c]).abs() / fd.abs().max(grad[c].abs()).max(1.0);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let data = random_dataset(5, 20, &mut rng);
        for prior in [HS, HS_CENTERED, AnglePrior::Uniform] {
            let s = spec(5, 2, prior);
            let post = Posterior::new(s.clone(), &data).unwrap();
            for _ in 0..10 {
                let v: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
                let err = fd_check(&post, &v);
                assert!(err < 1e-4, "{prior:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn gradient_in_extreme_scale_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let data = random_dataset(4, 10, &mut rng);
        for prior in [HS, HS_CENTERED] {
            let s = spec(4, 2, prior);
            let post = Posterior::new(s.clone(), &data).unwrap();
            let layout = s.layout();
            for log_lambda in [-6.0, 6.0, 14.0] {
                let mut v: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                for k in 0..layout.angles {
                    v[layout.log_lambda() + k] = log_lambda;
                }
                let err = fd_check(&post, &v);
                assert!(err < 1e-4, "{prior:?} log λ={log_lambda}: rel err {err}");
            }
        }
    }

    #[test]
    fn mu_score_with_zero_variance_features() {
        let s = spec(3, 1, HS);
        let phis = vec![SymMatrix::zeros(3); 6];
        let ys = vec![0.5, -0.2, 1.0, 0.3, 0.0, 0.7];
        let data = Dataset::new(phis, ys.clone(), SpdMatrix::identity(3)).unwrap();
        let post = Posterior::new(s.clone(), &data).unwrap();
        let mut v = vec![0.1f64; s.layout().dim()];
        let mu = 0.25;
        v[s.layout().mu()] = mu;
        let sigma = v[s.layout().log_sigma()].exp();
        let (_, g) = post.log_posterior_grad(&v).unwrap();
        let expect: f64 = ys.iter().map(|y| (y - mu) / (sigma * sigma)).sum::<f64>() - mu;
        assert!((g[s.layout().mu()] - expect).abs() < 1e-12);
    }

    #[test]
    fn value_decomposes_into_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let data = random_dataset(5, 12, &mut rng);
        for prior in [HS, HS_CENTERED, AnglePrior::Uniform] {
            let s = spec(5, 2, prior);
            let post = Posterior::new(s.clone(), &data).unwrap();
            let v: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; post.dim()];
            let parts = post.evaluate(&v, &mut g).unwrap();
            let (params, lj) = from_unconstrained(&v, &s).unwrap();
            assert_eq!(parts.log_prior, log_prior(&params, &s).unwrap());
            assert_eq!(parts.log_jacobian, lj);
            let ll = log_likelihood(&params, &data).unwrap();
            assert!((parts.log_likelihood - ll).abs() < 1e-10 * ll.abs());
            assert_eq!(parts.total() - parts.log_prior - parts.log_jacobian, parts.total() - parts.log_prior - parts.log_jacobian);
        }
    }

    #[test]
    fn noncentered_matches_centered_density_change_of_variables() {
        // same constrained point, both parameterizations: log p + log|J|
        // differ only through the Jacobian of the angle map
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let data = random_dataset(4, 8, &mut rng);
        let nc = spec(4, 2, HS);
        let c = spec(4, 2, HS_CENTERED);
        let params = random_params(&nc, &mut rng);
        let pn = Posterior::new(nc.clone(), &data).unwrap();
        let pc = Posterior::new(c.clone(), &data).unwrap();
        let vn = to_unconstrained(&params, &nc).unwrap();
        let vc = to_unconstrained(&params, &c).unwrap();
        let mut g = vec![0.0; pn.dim()];
        let a = pn.evaluate(&vn, &mut g).unwrap();
        let b = pc.evaluate(&vc, &mut g).unwrap();
        assert!((a.log_prior - b.log_prior).abs() < 1e-9);
        assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-9);
    }

    #[test]
    fn identifiability_permutation_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = spec(6, 3, HS);
        let params = random_params(&s, &mut rng);
        let gamma = params.gamma().into_matrix();
        let perm = [2usize, 0, 1];
        let signs = [1.0, -1.0, -1.0];
        let mut g2 = DMatrix::zeros(6, 3);
        let mut b2 = vec![0.0; 3];
        for (dst, &src) in perm.iter().enumerate() {
            g2.set_column(dst, &(gamma.column(src) * signs[dst]));
            b2[dst] = params.b[src];
        }
        for _ in 0..50 {
            let phi = random_sym(6, &mut rng);
            let a = predict_mean_with_gamma(&gamma, &params.b, params.mu, &phi).unwrap();
            let b = predict_mean_with_gamma(&g2, &b2, params.mu, &phi).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn spatial_filter_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = spec(4, 2, HS);
        let params = random_params(&s, &mut rng);
        let gt = params.gamma().into_matrix().transpose();
        let f = spatial_filter(&params, &SpdMatrix::identity(4)).unwrap();
        assert!((f - &gt).amax() < 1e-14);
        let four = SpdMatrix::new(DMatrix::identity(4, 4) * 4.0).unwrap();
        let f = spatial_filter(&params, &four).unwrap();
        assert!((f - &gt / 2.0).amax() < 1e-14);
    }

    #[test]
    fn response_delta_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = spec(5, 2, HS);
        let mut params = random_params(&s, &mut rng);
        assert_eq!(response_delta(&params, &[0.0, 0.0]).unwrap(), 0.0);
        params.b = vec![-1.0, 1.0];
        assert_eq!(response_delta(&params, &[1.0, 1.0]).unwrap(), 0.0);
        assert!(response_delta(&params, &[1.0]).is_err());
    }
}
