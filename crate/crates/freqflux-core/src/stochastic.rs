//! Stochastic injection noise and its propagation into CoI-frequency
//! increments.
//!
//! Injection noise is an Ornstein-Uhlenbeck process per source,
//! Euler-Maruyama discretized:
//!   x_{k+1} = x_k - λ (x_k - μ) dt + σ √dt N(0,1)
//! either used directly (Gaussian marginal) or mapped through the Gaussian
//! copula onto a Weibull marginal for skewed sources. Increments are the
//! Itô increments dx_k = x_{k+1} - x_k; the CoI increment is the weighted
//! sum dω = Σ w_i dx_i through the selected estimator's weight rows — the
//! increments themselves drive dω, never their time derivatives.
//!
//! Monte-Carlo paths own counter-based RNG streams derived from the base
//! seed, so path i is bit-identical regardless of scheduling; ensemble
//! reductions are deterministic pairwise trees.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::estimator::CoiEstimator;
use crate::linalg::tree_reduce;
use crate::stats::Moments;

/// Stability/accuracy guard for the explicit OU step.
pub const MAX_LAMBDA_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    P,
    Q,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    OuGaussian {
        lambda: f64,
        sigma: f64,
        #[serde(default)]
        mu: f64,
        #[serde(default)]
        x0: Option<f64>,
    },
    OuWeibullMapped {
        lambda: f64,
        weibull_k: f64,
        weibull_scale: f64,
        #[serde(default)]
        x0: Option<f64>,
    },
}

/// One noisy injection: which bus, which power component, what process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// 0-based internally; scenario files carry 1-based ids.
    pub bus: usize,
    pub target: NoiseTarget,
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Negate the series about its mean (mirrored distribution).
    #[serde(default)]
    pub mirror: bool,
}

impl NoiseModel {
    pub fn validate(&self, n_buses: usize) -> Result<()> {
        if self.bus >= n_buses {
            return Err(Error::InvalidScenario(format!(
                "noise model references missing bus {}",
                self.bus + 1
            )));
        }
        match self.kind {
            NoiseKind::OuGaussian { lambda, sigma, .. } => {
                if lambda <= 0.0 || sigma < 0.0 {
                    return Err(Error::InvalidScenario(
                        "OU noise needs lambda > 0 and sigma >= 0".into(),
                    ));
                }
            }
            NoiseKind::OuWeibullMapped {
                lambda,
                weibull_k,
                weibull_scale,
                ..
            } => {
                if lambda <= 0.0 || weibull_k <= 0.0 || weibull_scale <= 0.0 {
                    return Err(Error::InvalidScenario(
                        "Weibull-mapped noise needs lambda, shape and scale > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Level and increment series of one generated source.
#[derive(Debug, Clone)]
pub struct NoiseSeries {
    pub levels: Vec<f64>,
    pub increments: Vec<f64>,
}

/// A noise process strategy: generates series and reports its marginal
/// statistics for dominance/Lindeberg bookkeeping.
pub trait NoiseProcess: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(&self, dt: f64, n_steps: usize, rng: &mut dyn RngCore) -> Result<NoiseSeries>;
    /// Stationary variance of the level series.
    fn level_variance(&self) -> f64;
    /// Approximate per-step increment variance in stationarity.
    fn increment_variance(&self, dt: f64) -> f64;
    /// Marginal skewness of the level series (sign includes mirroring).
    fn level_skewness(&self) -> f64;
    /// Stationary mean of the level series.
    fn level_mean(&self) -> f64;
}

/// Builds the registered process for a noise model.
pub fn build_process(model: &NoiseModel) -> Result<Box<dyn NoiseProcess>> {
    match model.kind {
        NoiseKind::OuGaussian {
            lambda,
            sigma,
            mu,
            x0,
        } => Ok(Box::new(OuGaussian {
            lambda,
            sigma,
            mu,
            x0,
            mirror: model.mirror,
        })),
        NoiseKind::OuWeibullMapped {
            lambda,
            weibull_k,
            weibull_scale,
            x0,
        } => Ok(Box::new(OuWeibullMapped {
            lambda,
            shape: weibull_k,
            scale: weibull_scale,
            x0,
            mirror: model.mirror,
        })),
    }
}

fn guard_step(lambda: f64, dt: f64) -> Result<()> {
    if dt <= 0.0 {
        return Err(Error::InvalidScenario("dt must be positive".into()));
    }
    let ld = lambda * dt;
    if ld >= MAX_LAMBDA_DT {
        return Err(Error::UnstableStep { lambda_dt: ld });
    }
    Ok(())
}

/// Euler-Maruyama OU path. The initial level is drawn from the stationary
/// distribution unless `x0` pins it.
pub fn euler_maruyama_ou(
    lambda: f64,
    sigma: f64,
    mu: f64,
    x0: Option<f64>,
    dt: f64,
    n_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<NoiseSeries> {
    guard_step(lambda, dt)?;
    let stationary_std = sigma / (2.0 * lambda).sqrt();
    let mut x = match x0 {
        Some(v) => v,
        None => {
            let z: f64 = StandardNormal.sample(rng);
            mu + stationary_std * z
        }
    };
    let sq = sigma * dt.sqrt();
    let mut levels = Vec::with_capacity(n_steps + 1);
    let mut increments = Vec::with_capacity(n_steps);
    levels.push(x);
    for _ in 0..n_steps {
        let z: f64 = StandardNormal.sample(rng);
        let x_next = x - lambda * (x - mu) * dt + sq * z;
        increments.push(x_next - x);
        levels.push(x_next);
        x = x_next;
    }
    Ok(NoiseSeries { levels, increments })
}

/// OU path mapped through Φ and the Weibull quantile (Gaussian copula):
/// the stationary marginal is exactly Weibull(shape, scale), and the OU
/// autocorrelation is approximately preserved.
#[allow(clippy::too_many_arguments)]
pub fn skewed_noise(
    lambda: f64,
    shape: f64,
    scale: f64,
    x0: Option<f64>,
    mirror: bool,
    dt: f64,
    n_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<NoiseSeries> {
    // drive a unit-variance OU in z-space
    let z = euler_maruyama_ou(lambda, (2.0 * lambda).sqrt(), 0.0, x0, dt, n_steps, rng)?;
    let normal = Normal::standard();
    let mean_w = scale * gamma(1.0 + 1.0 / shape);
    let map = |zv: f64| -> f64 {
        let sf = normal.sf(zv).max(1e-300);
        let w = scale * (-sf.ln()).powf(1.0 / shape);
        if mirror {
            2.0 * mean_w - w
        } else {
            w
        }
    };
    let levels: Vec<f64> = z.levels.iter().map(|&zv| map(zv)).collect();
    let increments: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(NoiseSeries { levels, increments })
}

struct OuGaussian {
    lambda: f64,
    sigma: f64,
    mu: f64,
    x0: Option<f64>,
    mirror: bool,
}

impl NoiseProcess for OuGaussian {
    fn name(&self) -> &'static str {
        "ou_gaussian"
    }

    fn generate(&self, dt: f64, n_steps: usize, rng: &mut dyn RngCore) -> Result<NoiseSeries> {
        let mut s = euler_maruyama_ou(self.lambda, self.sigma, self.mu, self.x0, dt, n_steps, rng)?;
        if self.mirror {
            // symmetric marginal: mirroring about the mean only flips signs
            for v in &mut s.levels {
                *v = 2.0 * self.mu - *v;
            }
            for v in &mut s.increments {
                *v = -*v;
            }
        }
        Ok(s)
    }

    fn level_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.lambda)
    }

    fn increment_variance(&self, dt: f64) -> f64 {
        // exact for the EM discretization in stationarity
        let a = 1.0 - self.lambda * dt;
        let var_st = self.sigma * self.sigma * dt / (1.0 - a * a);
        (1.0 - a) * (1.0 - a) * var_st + self.sigma * self.sigma * dt
    }

    fn level_skewness(&self) -> f64 {
        0.0
    }

    fn level_mean(&self) -> f64 {
        self.mu
    }
}

struct OuWeibullMapped {
    lambda: f64,
    shape: f64,
    scale: f64,
    x0: Option<f64>,
    mirror: bool,
}

/// Central moments of Weibull(k, w): mean, variance, skewness.
pub fn weibull_moments(shape: f64, scale: f64) -> (f64, f64, f64) {
    let g1 = gamma(1.0 + 1.0 / shape);
    let g2 = gamma(1.0 + 2.0 / shape);
    let g3 = gamma(1.0 + 3.0 / shape);
    let mean = scale * g1;
    let var = scale * scale * (g2 - g1 * g1);
    let skew = (g3 - 3.0 * g1 * g2 + 2.0 * g1 * g1 * g1) / (g2 - g1 * g1).powf(1.5);
    (mean, var, skew)
}

impl NoiseProcess for OuWeibullMapped {
    fn name(&self) -> &'static str {
        "ou_weibull_mapped"
    }

    fn generate(&self, dt: f64, n_steps: usize, rng: &mut dyn RngCore) -> Result<NoiseSeries> {
        skewed_noise(
            self.lambda,
            self.shape,
            self.scale,
            self.x0,
            self.mirror,
            dt,
            n_steps,
            rng,
        )
    }

    fn level_variance(&self) -> f64 {
        weibull_moments(self.shape, self.scale).1
    }

    fn increment_variance(&self, dt: f64) -> f64 {
        // first-order: increments of a stationary process with lag-1
        // autocorrelation ρ have variance 2 V (1 - ρ); the copula map keeps
        // ρ ≈ 1 - λ dt. Empirical samples are used wherever exactness
        // matters (Lindeberg truncated moments).
        2.0 * self.level_variance() * (self.lambda * dt).min(1.0)
    }

    fn level_skewness(&self) -> f64 {
        let s = weibull_moments(self.shape, self.scale).2;
        if self.mirror {
            -s
        } else {
            s
        }
    }

    fn level_mean(&self) -> f64 {
        // mirroring about the mean preserves it
        weibull_moments(self.shape, self.scale).0
    }
}

/// Counter-based per-path RNG: same base seed, stream = path index + 1.
pub fn path_rng(base_seed: u64, path: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(base_seed);
    rng.set_stream(path + 1);
    rng
}

/// Per-source increment/level series of one path, with its effective weight.
#[derive(Debug, Clone)]
pub struct SourceSeries {
    pub bus: usize,
    pub target: NoiseTarget,
    pub weight: f64,
    pub series: NoiseSeries,
}

/// One realization: source series and the propagated CoI increment series.
/// `omega_coi[k]` is exactly `initial_level_dev` plus the running sum of the
/// first `k` increments; `initial_level_dev` anchors the level at the
/// stationary process means (the base operating point absorbs them).
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub stream: u64,
    pub dt: f64,
    pub sources: Vec<SourceSeries>,
    pub d_omega_coi: Vec<f64>,
    pub omega_coi: Vec<f64>,
    pub initial_level_dev: f64,
}

/// Effective scalar weights of an estimator for each (bus, target) source.
/// A `Both` model contributes two sources (p first, then q).
pub fn effective_weights(est: &dyn CoiEstimator, models: &[NoiseModel]) -> Vec<(usize, NoiseTarget, f64)> {
    let mut out = Vec::new();
    for m in models {
        match m.target {
            NoiseTarget::P => out.push((m.bus, NoiseTarget::P, est.weights_p()[m.bus])),
            NoiseTarget::Q => out.push((
                m.bus,
                NoiseTarget::Q,
                est.weights_q().map_or(0.0, |w| w[m.bus]),
            )),
            NoiseTarget::Both => {
                out.push((m.bus, NoiseTarget::P, est.weights_p()[m.bus]));
                out.push((
                    m.bus,
                    NoiseTarget::Q,
                    est.weights_q().map_or(0.0, |w| w[m.bus]),
                ));
            }
        }
    }
    out
}

/// dω series from aligned per-source increment series:
/// `dω_k = Σ_i w_i dx_{i,k}`, summed in source order.
pub fn propagate_increments(
    weights: &[f64],
    increments: &[&[f64]],
) -> Result<Vec<f64>> {
    if weights.len() != increments.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: increments.len(),
        });
    }
    let n_steps = increments.first().map_or(0, |s| s.len());
    for s in increments {
        if s.len() != n_steps {
            return Err(Error::DimensionMismatch {
                expected: n_steps,
                got: s.len(),
            });
        }
    }
    let mut out = vec![0.0; n_steps];
    for (w, series) in weights.iter().zip(increments) {
        for (o, dx) in out.iter_mut().zip(series.iter()) {
            *o += w * dx;
        }
    }
    Ok(out)
}

/// Options for the Monte-Carlo ensemble.
#[derive(Debug, Clone)]
pub struct MonteCarloOptions {
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub base_seed: u64,
    /// Stride for pooling level samples (decimation toward independence);
    /// defaults to ceil(1/(λ_min dt)) when None.
    pub level_stride: Option<usize>,
    /// Keep the full series of path 0 in the result.
    pub store_first_path: bool,
}

#[derive(Debug, Clone)]
pub struct PathSummary {
    pub path: usize,
    pub mean_domega: f64,
    pub var_domega: f64,
    pub min_domega: f64,
    pub max_domega: f64,
    pub final_omega_dev: f64,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub summaries: Vec<PathSummary>,
    /// All dω increments pooled over paths (path order).
    pub pooled_increments: Vec<f64>,
    /// Decimated ω-deviation levels pooled over paths.
    pub pooled_levels: Vec<f64>,
    pub moments_increments: Moments,
    pub moments_levels: Moments,
    pub level_stride: usize,
    pub first_path: Option<SamplePath>,
}

fn min_lambda(models: &[NoiseModel]) -> f64 {
    models
        .iter()
        .map(|m| match m.kind {
            NoiseKind::OuGaussian { lambda, .. } => lambda,
            NoiseKind::OuWeibullMapped { lambda, .. } => lambda,
        })
        .fold(f64::INFINITY, f64::min)
}

/// Runs one path: generates every source in declaration order from the
/// path's own RNG stream and propagates increments.
pub fn run_path(
    est: &dyn CoiEstimator,
    models: &[NoiseModel],
    dt: f64,
    n_steps: usize,
    base_seed: u64,
    path: u64,
) -> Result<SamplePath> {
    let mut rng = path_rng(base_seed, path);
    let weighted = effective_weights(est, models);
    let mut sources = Vec::with_capacity(weighted.len());
    let mut initial_level_dev = 0.0;
    let mut wi = 0usize;
    for m in models {
        let process = build_process(m)?;
        let n_sub = if m.target == NoiseTarget::Both { 2 } else { 1 };
        for _ in 0..n_sub {
            let (bus, target, weight) = weighted[wi];
            wi += 1;
            let series = process.generate(dt, n_steps, &mut rng)?;
            initial_level_dev += weight * (series.levels[0] - process.level_mean());
            sources.push(SourceSeries {
                bus,
                target,
                weight,
                series,
            });
        }
    }
    let weights: Vec<f64> = sources.iter().map(|s| s.weight).collect();
    let incs: Vec<&[f64]> = sources.iter().map(|s| s.series.increments.as_slice()).collect();
    let d_omega = propagate_increments(&weights, &incs)?;
    let mut omega = Vec::with_capacity(d_omega.len() + 1);
    let mut acc = initial_level_dev;
    omega.push(acc);
    for dx in &d_omega {
        acc += dx;
        omega.push(acc);
    }
    Ok(SamplePath {
        stream: path + 1,
        dt,
        sources,
        d_omega_coi: d_omega,
        omega_coi: omega,
        initial_level_dev,
    })
}

/// Seeded Monte-Carlo ensemble over independent paths. Paths execute
/// concurrently; every output is a deterministic function of
/// (models, options) alone.
pub fn monte_carlo(
    est: &dyn CoiEstimator,
    models: &[NoiseModel],
    options: &MonteCarloOptions,
) -> Result<Ensemble> {
    if options.n_paths == 0 {
        return Err(Error::InvalidScenario("n_paths must be >= 1".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidScenario("no noise models given".into()));
    }
    let stride = options
        .level_stride
        .unwrap_or_else(|| (1.0 / (min_lambda(models) * options.dt)).ceil().max(1.0) as usize);

    struct PathOut {
        summary: PathSummary,
        mom_inc: Moments,
        mom_lvl: Moments,
        pooled_inc: Vec<f64>,
        pooled_lvl: Vec<f64>,
        sample: Option<SamplePath>,
    }

    let outputs: Vec<Result<PathOut>> = (0..options.n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let sp = run_path(est, models, options.dt, options.n_steps, options.base_seed, path)?;
            let mut mom_inc = Moments::new();
            let mut mn = f64::INFINITY;
            let mut mx = f64::NEG_INFINITY;
            for &dx in &sp.d_omega_coi {
                mom_inc.push(dx);
                mn = mn.min(dx);
                mx = mx.max(dx);
            }
            let mut mom_lvl = Moments::new();
            let mut pooled_lvl = Vec::new();
            let mut s = stride;
            while s < sp.omega_coi.len() {
                mom_lvl.push(sp.omega_coi[s]);
                pooled_lvl.push(sp.omega_coi[s]);
                s += stride;
            }
            let summary = PathSummary {
                path: path as usize,
                mean_domega: mom_inc.mean(),
                var_domega: mom_inc.variance(),
                min_domega: mn,
                max_domega: mx,
                final_omega_dev: *sp.omega_coi.last().unwrap_or(&0.0),
            };
            let keep = options.store_first_path && path == 0;
            Ok(PathOut {
                summary,
                mom_inc,
                mom_lvl,
                pooled_inc: sp.d_omega_coi.clone(),
                pooled_lvl,
                sample: if keep { Some(sp) } else { None },
            })
        })
        .collect();

    let mut summaries = Vec::with_capacity(options.n_paths);
    let mut pooled_increments = Vec::new();
    let mut pooled_levels = Vec::new();
    let mut first_path = None;
    let mut inc_moms = Vec::with_capacity(options.n_paths);
    let mut lvl_moms = Vec::with_capacity(options.n_paths);
    for out in outputs {
        let o = out?;
        summaries.push(o.summary);
        pooled_increments.extend_from_slice(&o.pooled_inc);
        pooled_levels.extend_from_slice(&o.pooled_lvl);
        inc_moms.push(o.mom_inc);
        lvl_moms.push(o.mom_lvl);
        if o.sample.is_some() {
            first_path = o.sample;
        }
    }
    let moments_increments = tree_reduce(inc_moms, Moments::merge).unwrap_or_default();
    let moments_levels = tree_reduce(lvl_moms, Moments::merge).unwrap_or_default();

    Ok(Ensemble {
        summaries,
        pooled_increments,
        pooled_levels,
        moments_increments,
        moments_levels,
        level_stride: stride,
        first_path,
    })
}

// ---------------------------------------------------------------------------
// Scenario file (JSON) for the montecarlo / clt-check entry points.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpecFile {
    /// 1-based bus id.
    pub bus: usize,
    pub target: NoiseTarget,
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub mirror: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StochScenario {
    /// Path to the case file, relative to the scenario file's directory.
    pub case: String,
    pub noise: Vec<NoiseSpecFile>,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    pub base_seed: u64,
    /// Estimator name: "full" or "simplified".
    pub propagation: String,
    #[serde(default)]
    pub level_stride: Option<usize>,
}

impl StochScenario {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sc: StochScenario = serde_json::from_str(&text)?;
        if sc.noise.is_empty() {
            return Err(Error::InvalidScenario("scenario has no noise models".into()));
        }
        Ok(sc)
    }

    /// Noise models with bus ids shifted to 0-based.
    pub fn models(&self, n_buses: usize) -> Result<Vec<NoiseModel>> {
        self.noise
            .iter()
            .map(|s| {
                if s.bus == 0 {
                    return Err(Error::InvalidScenario("bus ids are 1-based".into()));
                }
                let m = NoiseModel {
                    bus: s.bus - 1,
                    target: s.target,
                    kind: s.kind.clone(),
                    mirror: s.mirror,
                };
                m.validate(n_buses)?;
                Ok(m)
            })
            .collect()
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}
