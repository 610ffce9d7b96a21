//! Static HMC with a jittered path length, dual-averaging step size and
//! windowed diagonal mass adaptation. Chains run in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::norm_inv_cdf;

/// Energy error above which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Unnormalized log density with gradient, shared read-only across chains.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub sampling: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    /// Upper bound on the integration time `ε·L`; `L` is drawn uniformly
    /// from `1..=min(max_leapfrog, ceil(trajectory_length/ε))`.
    pub trajectory_length: f64,
    pub seed: u64,
    pub init_jitter: f64,
    /// Number of short pilot runs from independent random starts; chains
    /// start from the pilot with the highest late log density. Zero starts
    /// every chain from its own random point.
    pub init_candidates: usize,
    pub init_iterations: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1500,
            sampling: 500,
            target_accept: 0.8,
            max_leapfrog: 128,
            trajectory_length: 4.0,
            seed: 0,
            init_jitter: 1.0,
            init_candidates: 8,
            init_iterations: 150,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.sampling == 0 || self.max_leapfrog == 0 {
            return Err(Error::InvalidArgument(
                "chains, sampling and max_leapfrog must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(self.trajectory_length > 0.0 && self.trajectory_length.is_finite()) {
            return Err(Error::InvalidArgument("trajectory_length must be positive".into()));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::InvalidArgument("init_jitter must be non-negative".into()));
        }
        if self.init_candidates > 0 && self.init_iterations < 2 {
            return Err(Error::InvalidArgument("init_iterations must be at least 2 with pilot runs".into()));
        }
        Ok(())
    }
}

/// Position, log density and gradient at one point.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub grad: Vec<f64>,
}

impl PhasePoint {
    pub fn new<T: LogDensity + ?Sized>(target: &T, x: Vec<f64>) -> Result<Self> {
        let mut grad = vec![0.0; x.len()];
        let log_density = target.log_density_grad(&x, &mut grad)?;
        if !log_density.is_finite() {
            return Err(Error::NonFinite("log density".into()));
        }
        Ok(Self { x, log_density, grad })
    }
}

fn kinetic(momentum: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * momentum.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// `steps` leapfrog steps of size `step` under a diagonal inverse mass.
/// An error means the trajectory left the region where the density is
/// finite.
pub fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    point: &mut PhasePoint,
    momentum: &mut [f64],
    inv_mass: &[f64],
    step: f64,
    steps: usize,
) -> Result<()> {
    let half = 0.5 * step;
    for _ in 0..steps {
        for (p, g) in momentum.iter_mut().zip(&point.grad) {
            *p += half * g;
        }
        for ((x, p), m) in point.x.iter_mut().zip(momentum.iter()).zip(inv_mass) {
            *x += step * m * p;
        }
        point.log_density = target.log_density_grad(&point.x, &mut point.grad)?;
        if !point.log_density.is_finite() {
            return Err(Error::NonFinite("log density along trajectory".into()));
        }
        for (p, g) in momentum.iter_mut().zip(&point.grad) {
            *p += half * g;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub accepted: bool,
    pub divergent: bool,
    /// `min(1, exp(-ΔH))`, zero for divergent trajectories.
    pub accept_stat: f64,
    pub steps: usize,
}

fn sample_momentum(inv_mass: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
        .collect()
}

/// One Metropolis-corrected HMC transition.
pub fn hmc_step<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &mut PhasePoint,
    inv_mass: &[f64],
    step: f64,
    max_steps: usize,
    rng: &mut R,
) -> Transition {
    let steps = rng.random_range(1..=max_steps.max(1));
    let mut momentum = sample_momentum(inv_mass, rng);
    let h0 = -current.log_density + kinetic(&momentum, inv_mass);
    let mut proposal = current.clone();
    let outcome = leapfrog(target, &mut proposal, &mut momentum, inv_mass, step, steps);
    let energy_error = match outcome {
        Ok(()) => -proposal.log_density + kinetic(&momentum, inv_mass) - h0,
        Err(_) => f64::INFINITY,
    };
    if !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD {
        // consume the uniform anyway so the stream does not depend on the outcome
        let _: f64 = rng.random();
        return Transition {
            accepted: false,
            divergent: true,
            accept_stat: 0.0,
            steps,
        };
    }
    let accept_stat = (-energy_error).exp().min(1.0);
    let u: f64 = rng.random();
    let accepted = u < accept_stat;
    if accepted {
        *current = proposal;
    }
    Transition {
        accepted,
        divergent: false,
        accept_stat,
        steps,
    }
}

/// Nesterov dual averaging of `log ε` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAverage {
    target: f64,
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_avg: f64,
    count: f64,
}

impl DualAverage {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: 0.0,
            h_avg: 0.0,
            count: 0.0,
        }
    }

    pub fn update(&mut self, accept_stat: f64) {
        self.count += 1.0;
        let eta = 1.0 / (self.count + Self::T0);
        self.h_avg = (1.0 - eta) * self.h_avg + eta * (self.target - accept_stat);
        self.log_step = self.mu - self.count.sqrt() / Self::GAMMA * self.h_avg;
        let w = self.count.powf(-Self::KAPPA);
        self.log_step_avg = w * self.log_step + (1.0 - w) * self.log_step_avg;
    }

    /// Step size to use during adaptation.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size to freeze after adaptation.
    pub fn adapted(&self) -> f64 {
        if self.count == 0.0 {
            self.current()
        } else {
            self.log_step_avg.exp()
        }
    }
}

/// Welford running variance per coordinate.
#[derive(Debug, Clone)]
struct RunningVariance {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Sample variance shrunk toward `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Warmup iteration ranges `[start, end)` over which the mass matrix is
/// estimated; it is updated at the end of each.
pub fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (mut init, mut term, mut base) = (75usize, (warmup / 5).max(50), 25usize);
    if warmup < 20 {
        return Vec::new();
    }
    if init + term + base > warmup {
        init = (0.15 * warmup as f64) as usize;
        term = (0.1 * warmup as f64) as usize;
        base = warmup - init - term;
    }
    let last = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < last {
        let mut end = start + size;
        // fold a short final window into its predecessor
        if end + 2 * size > last {
            end = last;
        }
        ends.push((start, end));
        start = end;
        size *= 2;
    }
    ends
}

fn initial_step_size<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    point: &PhasePoint,
    inv_mass: &[f64],
    start: f64,
    rng: &mut R,
) -> f64 {
    let log_target = 0.8f64.ln();
    let trial = |step: f64, rng: &mut R| -> f64 {
        let mut momentum = sample_momentum(inv_mass, rng);
        let h0 = -point.log_density + kinetic(&momentum, inv_mass);
        let mut p = point.clone();
        match leapfrog(target, &mut p, &mut momentum, inv_mass, step, 1) {
            Ok(()) => {
                let delta = h0 - (-p.log_density + kinetic(&momentum, inv_mass));
                if delta.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    delta
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut step = start;
    let up = trial(step, rng) > log_target;
    for _ in 0..60 {
        let next = if up { 2.0 * step } else { 0.5 * step };
        let delta = trial(next, rng);
        if up && !(delta > log_target) {
            break;
        }
        step = next;
        if !up && delta > log_target {
            break;
        }
        if !(1e-10..=1e6).contains(&step) {
            break;
        }
    }
    step.clamp(1e-10, 1e6)
}

/// Retained draws and adaptation state of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    /// Unconstrained states, one per retained iteration.
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainDraws {
    pub fn mean_accept(&self) -> f64 {
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len() as f64
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    pub chains: Vec<ChainDraws>,
}

impl Draws {
    pub fn dim(&self) -> usize {
        self.chains.first().and_then(|c| c.draws.first()).map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All draws, chain-major.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.chains.iter().flat_map(|c| c.draws.iter().map(Vec::as_slice))
    }

    /// Per-chain traces of one coordinate.
    pub fn coordinate(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[k]).collect())
            .collect()
    }

    pub fn divergence_rate(&self) -> f64 {
        let div: usize = self.chains.iter().map(ChainDraws::divergences).sum();
        div as f64 / self.len().max(1) as f64
    }

    /// Rank-normalized split R-hat per coordinate.
    pub fn rhat(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| split_rhat(&self.coordinate(k))).collect()
    }

    /// Bulk effective sample size per coordinate.
    pub fn ess_bulk(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| ess_bulk(&self.coordinate(k))).collect()
    }
}

/// Convergence summary over all coordinates of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub divergences: usize,
    pub draws: usize,
    pub rhat_threshold: f64,
}

impl Diagnostics {
    pub fn new(draws: &Draws, rhat_threshold: f64) -> Self {
        Self {
            rhat: draws.rhat(),
            ess_bulk: draws.ess_bulk(),
            divergences: draws.chains.iter().map(ChainDraws::divergences).sum(),
            draws: draws.len(),
            rhat_threshold,
        }
    }

    /// Largest R-hat; NaN when undefined for any coordinate.
    pub fn max_rhat(&self) -> f64 {
        self.rhat
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }

    pub fn min_ess(&self) -> f64 {
        self.ess_bulk.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn converged(&self) -> bool {
        self.max_rhat() < self.rhat_threshold
    }

    /// Coordinates whose R-hat misses the threshold.
    pub fn unconverged(&self) -> Vec<(usize, f64)> {
        self.rhat
            .iter()
            .enumerate()
            .filter(|(_, r)| !(**r < self.rhat_threshold))
            .map(|(i, r)| (i, *r))
            .collect()
    }
}

fn initial_point<T: LogDensity + ?Sized>(target: &T, jitter: f64, rng: &mut impl Rng) -> Result<PhasePoint> {
    let dim = target.dim();
    let mut last = None;
    for _ in 0..100 {
        let x: Vec<f64> = (0..dim)
            .map(|_| if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 })
            .collect();
        match PhasePoint::new(target, x) {
            Ok(p) if p.grad.iter().all(|g| g.is_finite()) => return Ok(p),
            Ok(_) => last = Some("non-finite gradient".to_string()),
            Err(e) => last = Some(e.to_string()),
        }
    }
    Err(Error::InitializationFailure(format!(
        "no finite starting point in 100 attempts: {}",
        last.unwrap_or_default()
    )))
}

/// Runs one chain: warmup with adaptation, then fixed-parameter sampling.
pub fn run_chain<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainDraws> {
    run_chain_from(target, config, chain, None)
}

/// Like [`run_chain`], starting from `start` instead of a random point.
pub fn run_chain_from<T: LogDensity + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    chain: usize,
    start: Option<&[f64]>,
) -> Result<ChainDraws> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ chain as u64);
    let dim = target.dim();
    let mut point = match start {
        Some(x) if x.len() == dim => PhasePoint::new(target, x.to_vec())?,
        Some(x) => {
            return Err(Error::DimensionMismatch(format!("start has length {}, target has {dim}", x.len())))
        }
        None => initial_point(target, config.init_jitter, &mut rng)?,
    };
    let mut inv_mass = vec![1.0; dim];
    let max_steps = |step: f64| -> usize {
        let by_length = (config.trajectory_length / step).ceil();
        if by_length.is_finite() {
            (by_length as usize).clamp(1, config.max_leapfrog)
        } else {
            config.max_leapfrog
        }
    };

    let mut step = initial_step_size(target, &point, &inv_mass, 0.1, &mut rng);
    let mut adapter = DualAverage::new(step, config.target_accept);
    let windows = adaptation_windows(config.warmup);
    let adapt_range = match (windows.first(), windows.last()) {
        (Some(first), Some(last)) => first.0..last.1,
        _ => 0..0,
    };
    let mut window = RunningVariance::new(dim);
    let mut warmup_divergences = 0;
    for it in 0..config.warmup {
        let t = hmc_step(target, &mut point, &inv_mass, step, max_steps(step), &mut rng);
        warmup_divergences += t.divergent as usize;
        adapter.update(t.accept_stat);
        step = adapter.current();
        if adapt_range.contains(&it) {
            window.push(&point.x);
        }
        if windows.iter().any(|w| w.1 == it + 1) && window.n > 2 {
            inv_mass = window.regularized();
            window = RunningVariance::new(dim);
            step = initial_step_size(target, &point, &inv_mass, step, &mut rng);
            adapter = DualAverage::new(step, config.target_accept);
        }
    }
    if config.warmup > 0 && warmup_divergences == config.warmup {
        return Err(Error::InitializationFailure(format!(
            "chain {chain}: every warmup transition diverged (last step size {step:.3e}, log density {:.3e})",
            point.log_density
        )));
    }
    if config.warmup > 0 {
        step = adapter.adapted();
    }

    let mut out = ChainDraws {
        draws: Vec::with_capacity(config.sampling),
        log_density: Vec::with_capacity(config.sampling),
        divergent: Vec::with_capacity(config.sampling),
        accept_stat: Vec::with_capacity(config.sampling),
        step_size: step,
        inv_mass: inv_mass.clone(),
        warmup_divergences,
    };
    let steps = max_steps(step);
    for _ in 0..config.sampling {
        let t = hmc_step(target, &mut point, &inv_mass, step, steps, &mut rng);
        out.draws.push(point.x.clone());
        out.log_density.push(point.log_density);
        out.divergent.push(t.divergent);
        out.accept_stat.push(t.accept_stat);
    }
    Ok(out)
}

/// Outcome of one pilot run.
#[derive(Debug, Clone)]
pub struct Pilot {
    /// Mean log density over the second half of the run.
    pub score: f64,
    /// States from the second half of the run, oldest first.
    pub states: Vec<Vec<f64>>,
}

/// Short adaptive run from a random start, used to locate the dominant
/// basin of a multimodal target. Candidate `k` uses stream `k + 1` of the
/// generator seeded with `seed`.
pub fn run_pilot<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig, candidate: usize) -> Result<Pilot> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(candidate as u64 + 1);
    let dim = target.dim();
    let inv_mass = vec![1.0; dim];
    let mut point = initial_point(target, config.init_jitter, &mut rng)?;
    let mut step = initial_step_size(target, &point, &inv_mass, 0.1, &mut rng);
    let mut adapter = DualAverage::new(step, config.target_accept);
    let n = config.init_iterations;
    let mut states = Vec::with_capacity(n - n / 2);
    let mut total = 0.0;
    for it in 0..n {
        let steps = ((config.trajectory_length / step).ceil() as usize).clamp(1, config.max_leapfrog);
        let t = hmc_step(target, &mut point, &inv_mass, step, steps, &mut rng);
        adapter.update(t.accept_stat);
        step = adapter.current();
        if it >= n / 2 {
            total += point.log_density;
            states.push(point.x.clone());
        }
    }
    let score = total / states.len() as f64;
    Ok(Pilot {
        score: if score.is_nan() { f64::NEG_INFINITY } else { score },
        states,
    })
}

/// Starting states for each chain: spaced states of the best-scoring pilot,
/// or `None` per chain when pilots are disabled.
pub fn initial_states<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig) -> Result<Vec<Option<Vec<f64>>>> {
    if config.init_candidates == 0 {
        return Ok(vec![None; config.chains]);
    }
    let pilots: Vec<Result<Pilot>> = (0..config.init_candidates)
        .into_par_iter()
        .map(|k| run_pilot(target, config, k))
        .collect();
    let mut best: Option<Pilot> = None;
    let mut last_err = None;
    for p in pilots {
        match p {
            Ok(p) if best.as_ref().is_none_or(|b| p.score > b.score) => best = Some(p),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let best = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or_else(|| Error::InitializationFailure("no pilot run completed".into()))),
    };
    let len = best.states.len();
    let stride = (len / config.chains).max(1);
    Ok((0..config.chains)
        .map(|c| Some(best.states[len - 1 - (c * stride).min(len - 1)].clone()))
        .collect())
}

/// Runs `config.chains` chains in parallel; chain `c` is seeded with
/// `seed ^ c`, so results do not depend on scheduling.
pub fn run_chains<T: LogDensity + ?Sized>(target: &T, config: &SamplerConfig) -> Result<Draws> {
    config.validate()?;
    let starts = initial_states(target, config)?;
    let chains = starts
        .par_iter()
        .enumerate()
        .map(|(c, s)| run_chain_from(target, config, c, s.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Draws { chains })
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Normal scores of pooled ranks (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (*x, c, i)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        let z = norm_inv_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &all[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn plain_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Rank-normalized split R-hat: the larger of the bulk and folded-tail
/// statistics. Returns NaN when the chains are too short to split.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) {
        return f64::NAN;
    }
    let split = split_chains(chains);
    let bulk = plain_rhat(&rank_normalize(&split));
    let all: Vec<f64> = split.iter().flatten().copied().collect();
    let med = crate::metrics::quantile_sorted(&sorted(&all), 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let tail = plain_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn autocovariance(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let m = mean(v);
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    (0..n)
        .map(|lag| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence estimator.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let mean_acov = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = odd;
    let mut s = 1;
    while s < n - 4 && even + odd > 0.0 {
        even = 1.0 - (mean_var - mean_acov(s + 1)) / var_plus;
        odd = 1.0 - (mean_var - mean_acov(s + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[s + 1] = even;
            rho[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho[max_s] > 0.0 && max_s + 1 < n {
        rho[max_s + 1] = rho[max_s];
    }
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = 0.5 * (rho[s - 1] + rho[s]);
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let total = (m * n) as f64;
    let next = if max_s + 1 < n { rho[max_s + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + next;
    (total / tau).min(total * total.log10())
}

/// ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 8) {
        return f64::NAN;
    }
    ess(&rank_normalize(&split_chains(chains)))
}
