//! Synthetic datasets: random SPD predictors, sparse loadings and responses
//! under a correctly specified or perturbed-loading regime.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::givens::{angle_count, reconstruct, GivensAngles, StiefelPoint};
use crate::spd::{euclidean_mean, SpdMatrix, SymMatrix, TangentProjector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    #[default]
    CorrectlySpecified,
    /// Each subject's loadings are perturbed by i.i.d. `N(0, ν²)` entries.
    Misspecified { nu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub p: usize,
    pub d: usize,
    pub snr: f64,
    /// Defaults to `(1, -1)` for `d = 2` and `(2, 1, -1, -2)` for `d = 4`.
    pub b_true: Option<Vec<f64>>,
    pub regime: Regime,
    pub zero_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 1000,
            p: 5,
            d: 2,
            snr: 5.0,
            b_true: None,
            regime: Regime::CorrectlySpecified,
            zero_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        angle_count(self.p, self.d)?;
        if self.n_train < 2 {
            return Err(Error::InvalidArgument("n_train must be at least 2".into()));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::InvalidArgument(format!("snr must be positive, got {}", self.snr)));
        }
        if let Regime::Misspecified { nu } = self.regime {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(Error::InvalidArgument(format!("nu must be non-negative, got {nu}")));
            }
        }
        if !(0.0..1.0).contains(&self.zero_fraction) {
            return Err(Error::InvalidArgument(format!(
                "zero_fraction must lie in [0, 1), got {}",
                self.zero_fraction
            )));
        }
        self.coefficients().map(|_| ())
    }

    pub fn coefficients(&self) -> Result<Vec<f64>> {
        let b = match (&self.b_true, self.d) {
            (Some(b), _) => b.clone(),
            (None, 2) => vec![1.0, -1.0],
            (None, 4) => vec![2.0, 1.0, -1.0, -2.0],
            (None, d) => {
                return Err(Error::InvalidArgument(format!("b_true must be given for d = {d}")));
            }
        };
        if b.len() != self.d || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("b_true must hold {} finite values", self.d)));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub angles: GivensAngles,
    /// Row-major `p × d` loadings.
    pub gamma: Vec<f64>,
    pub b: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Noiseless signals, training subjects first.
    pub g: Vec<f64>,
}

impl SimTruth {
    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.angles.p(), self.angles.d(), &self.gamma)
    }

    pub fn train_signal(&self, n_train: usize) -> &[f64] {
        &self.g[..n_train]
    }

    pub fn test_signal(&self, n_train: usize) -> &[f64] {
        &self.g[n_train..]
    }
}

/// Covariances and responses for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSplit {
    pub covariances: Vec<SpdMatrix>,
    pub ys: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: SimSplit,
    pub test: SimSplit,
    /// Euclidean mean of the training covariances.
    pub mref: SpdMatrix,
    pub truth: SimTruth,
}

/// Haar-distributed orthogonal matrix via sign-corrected QR.
pub fn random_orthogonal(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `A diag(e^u) Aᵀ` with Haar `A` and `u ~ U(-2, 2)`.
pub fn gen_spd(p: usize, rng: &mut impl Rng) -> SpdMatrix {
    let a = random_orthogonal(p, rng);
    let e: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
    let mut scaled = a.clone();
    for (j, ej) in e.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*ej);
    }
    let m = &scaled * a.transpose();
    SpdMatrix::new((&m + m.transpose()) * 0.5).expect("eigenvalues are bounded below by e^-2")
}

/// `floor(zero_fraction · K)` zero angles, the rest `U(-π/2, π/2)`.
pub fn gen_sparse_gamma(p: usize, d: usize, zero_fraction: f64, rng: &mut impl Rng) -> Result<(GivensAngles, StiefelPoint)> {
    let k = angle_count(p, d)?;
    if !(0.0..=1.0).contains(&zero_fraction) {
        return Err(Error::InvalidArgument(format!("zero_fraction {zero_fraction} outside [0, 1]")));
    }
    let zeros = (zero_fraction * k as f64).floor() as usize;
    let mut values: Vec<f64> = (0..k)
        .map(|_| rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2))
        .collect();
    for i in index::sample(rng, k, zeros) {
        values[i] = 0.0;
    }
    let angles = GivensAngles::new(p, d, values)?;
    let gamma = reconstruct(&angles);
    Ok((angles, gamma))
}

/// Noise scale giving the requested signal-to-noise ratio on `g`.
pub fn sigma_from_snr(g: &[f64], snr: f64) -> Result<f64> {
    if g.len() < 2 {
        return Err(Error::InvalidArgument("need at least two signals".into()));
    }
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!("snr must be positive, got {snr}")));
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let ss: f64 = g.iter().map(|v| (v - mean).powi(2)).sum();
    if ss == 0.0 {
        return Err(Error::DegenerateSignal("signal has zero variance".into()));
    }
    Ok((ss / ((n - 1.0) * snr)).sqrt())
}

/// `Σ_j b_j l_jᵀ φ l_j` for loadings `l` that need not be orthonormal.
pub fn signal(phi: &SymMatrix, loadings: &DMatrix<f64>, b: &[f64]) -> f64 {
    let m = phi.matrix();
    b.iter()
        .enumerate()
        .map(|(j, bj)| {
            let l = loadings.column(j);
            bj * (l.transpose() * m * l)[(0, 0)]
        })
        .sum()
}

struct Subject {
    cov: SpdMatrix,
    perturbation: DMatrix<f64>,
    noise: f64,
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn gen_dataset(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let (p, d) = (config.p, config.d);
    let b = config.coefficients()?;
    let mut rng = subject_rng(config.seed, usize::MAX - 1);
    let (angles, gamma) = gen_sparse_gamma(p, d, config.zero_fraction, &mut rng)?;
    let gamma = gamma.into_matrix();
    let nu = match config.regime {
        Regime::CorrectlySpecified => 0.0,
        Regime::Misspecified { nu } => nu,
    };

    let n = config.n_train + config.n_test;
    let subjects: Vec<Subject> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(config.seed, i);
            let cov = gen_spd(p, &mut rng);
            let perturbation = DMatrix::from_fn(p, d, |_, _| nu * rng.sample::<f64, _>(StandardNormal));
            let noise = rng.sample(StandardNormal);
            Subject { cov, perturbation, noise }
        })
        .collect();

    let train_covs: Vec<SpdMatrix> = subjects[..config.n_train].iter().map(|s| s.cov.clone()).collect();
    let mref = euclidean_mean(&train_covs)?;
    let proj = TangentProjector::new(&mref)?;
    let g = subjects
        .par_iter()
        .map(|s| {
            let phi = proj.project(&s.cov)?;
            let loadings = &gamma + &s.perturbation;
            Ok(signal(&phi, &loadings, &b))
        })
        .collect::<Result<Vec<f64>>>()?;
    let sigma = sigma_from_snr(&g[..config.n_train], config.snr)?;
    let ys: Vec<f64> = g.iter().zip(&subjects).map(|(gi, s)| gi + sigma * s.noise).collect();

    let split = |range: std::ops::Range<usize>| SimSplit {
        covariances: subjects[range.clone()].iter().map(|s| s.cov.clone()).collect(),
        ys: ys[range.clone()].to_vec(),
        g: g[range].to_vec(),
    };
    let mut gamma_rows = Vec::with_capacity(p * d);
    for r in 0..p {
        gamma_rows.extend(gamma.row(r).iter());
    }
    Ok(SimOutput {
        train: split(0..config.n_train),
        test: split(config.n_train..n),
        mref,
        truth: SimTruth {
            angles,
            gamma: gamma_rows,
            b,
            mu: 0.0,
            sigma,
            g,
        },
    })
}
