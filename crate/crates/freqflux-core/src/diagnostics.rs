//! Statistical layer: Lindeberg-condition evaluation, normality reporting,
//! per-source dominance analysis, and the subnetwork aggregation experiment
//! that demonstrates when the CLT holds or breaks for frequency increments.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coi;
use crate::error::{Error, Result};
use crate::estimator::{CoiEstimator, FullComplexFrequency};
use crate::linalg::tree_reduce;
use crate::netmodel::{Branch, Bus, BusKind, MachineSet, Network};
use crate::powerflow::{self, PfOptions};
use crate::sensitivity;
use crate::stats::{self, Moments, StatsReport};
use crate::stochastic::{
    build_process, effective_weights, path_rng, NoiseKind, NoiseModel, NoiseTarget,
};

/// Default pass threshold for the finite-N Lindeberg diagnostic.
pub const LINDEBERG_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone)]
pub enum SourceDistribution {
    /// Raw sample of the source's (unweighted) deviations.
    Empirical(Vec<f64>),
    /// Zero-mean Gaussian with the declared variance.
    Gaussian,
    /// Nothing known beyond the variance: not enough for tail moments.
    Unspecified,
}

/// One term of the weighted sum whose normality is being diagnosed.
#[derive(Debug, Clone)]
pub struct WeightedSource {
    pub label: String,
    pub weight: f64,
    pub variance: f64,
    pub dist: SourceDistribution,
}

#[derive(Debug, Clone)]
pub struct LindebergReport {
    /// `(1/ς²) Σ_i E[ξ_i² 1{|ξ_i| > ε ς}]` with `ξ_i = w_i X_i`,
    /// `ς² = Σ w_i² σ_i²`.
    pub ratio: f64,
    pub pass: bool,
    pub threshold: f64,
    pub epsilon: f64,
    pub total_std: f64,
    pub n_sources: usize,
}

/// Finite-N Lindeberg diagnostic. Truncated second moments come from the
/// empirical samples by direct summation; the Gaussian closed form is used
/// for declared-Gaussian sources.
pub fn lindeberg_ratio(
    sources: &[WeightedSource],
    epsilon: f64,
    threshold: f64,
) -> Result<LindebergReport> {
    if sources.len() < 2 {
        return Err(Error::InsufficientSources {
            got: sources.len(),
        });
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidScenario("epsilon must be positive".into()));
    }
    let mut total_var = 0.0;
    for s in sources {
        if !s.variance.is_finite() || s.variance < 0.0 {
            return Err(Error::InvalidScenario(format!(
                "source '{}' has invalid variance",
                s.label
            )));
        }
        total_var += s.weight * s.weight * s.variance;
    }
    if total_var <= 0.0 {
        return Err(Error::InsufficientSources { got: 0 });
    }
    let sig = total_var.sqrt();
    let cut = epsilon * sig;

    let mut num = 0.0;
    for s in sources {
        num += match &s.dist {
            SourceDistribution::Gaussian => {
                stats::gaussian_tail_second_moment(s.weight.abs() * s.variance.sqrt(), cut)
            }
            SourceDistribution::Empirical(sample) => {
                if sample.is_empty() {
                    return Err(Error::MissingDistribution {
                        label: s.label.clone(),
                    });
                }
                let mean = sample.iter().sum::<f64>() / sample.len() as f64;
                let mut acc = 0.0;
                for &x in sample {
                    let xi = s.weight * (x - mean);
                    if xi.abs() > cut {
                        acc += xi * xi;
                    }
                }
                acc / sample.len() as f64
            }
            SourceDistribution::Unspecified => {
                return Err(Error::MissingDistribution {
                    label: s.label.clone(),
                })
            }
        };
    }
    let ratio = num / total_var;
    Ok(LindebergReport {
        ratio,
        pass: ratio < threshold,
        threshold,
        epsilon,
        total_std: sig,
        n_sources: sources.len(),
    })
}

/// Re-export of the sample summary for the diagnostics surface.
pub fn normality_report(sample: &[f64]) -> Result<StatsReport> {
    stats::normality_report(sample)
}

/// Ranked contribution of each noisy source through an estimator's weights.
#[derive(Debug, Clone)]
pub struct DominanceRow {
    pub label: String,
    pub bus: usize,
    pub target: NoiseTarget,
    pub weight: f64,
    pub increment_variance: f64,
    pub variance_share: f64,
    /// Sign of the source's contribution to pooled skewness
    /// (`sign(w³ · marginal skew)`), 0 for symmetric sources.
    pub skew_sign: f64,
}

pub fn dominance_analysis(
    est: &dyn CoiEstimator,
    models: &[NoiseModel],
    dt: f64,
) -> Result<Vec<DominanceRow>> {
    let weighted = effective_weights(est, models);
    let mut rows = Vec::with_capacity(weighted.len());
    let mut wi = 0usize;
    let mut total = 0.0;
    for m in models {
        let process = build_process(m)?;
        let n_sub = if m.target == NoiseTarget::Both { 2 } else { 1 };
        for _ in 0..n_sub {
            let (bus, target, weight) = weighted[wi];
            wi += 1;
            let var = process.increment_variance(dt);
            total += weight * weight * var;
            let skew = process.level_skewness();
            rows.push(DominanceRow {
                label: format!(
                    "bus{}:{}",
                    bus + 1,
                    match target {
                        NoiseTarget::P => "p",
                        NoiseTarget::Q => "q",
                        NoiseTarget::Both => "both",
                    }
                ),
                bus,
                target,
                weight,
                increment_variance: var,
                variance_share: weight * weight * var,
                skew_sign: (weight.powi(3) * skew).signum() * if skew == 0.0 { 0.0 } else { 1.0 },
            });
        }
    }
    if total > 0.0 {
        for r in &mut rows {
            r.variance_share /= total;
        }
    }
    rows.sort_by(|a, b| b.variance_share.partial_cmp(&a.variance_share).unwrap());
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Subnetwork aggregation experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominantLoad {
    /// Dominant-source variance as a multiple of the combined weighted
    /// variance of all regular subnet loads.
    pub variance_multiplier: f64,
    pub weibull_k: f64,
}

/// Generator parameters for a radial subnetwork hung below a host bus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubnetSpec {
    /// 1-based host bus id in the host case.
    pub host_bus: usize,
    pub n_buses: usize,
    pub n_loads: usize,
    #[serde(default = "default_feeders")]
    pub n_feeders: usize,
    /// Uniform range of per-segment series reactance.
    pub branch_x: (f64, f64),
    #[serde(default = "default_r_over_x")]
    pub r_over_x: f64,
    /// Uniform range of base load size (pu).
    pub load_p: (f64, f64),
    pub noise_lambda: f64,
    pub noise_weibull_k: f64,
    /// Uniform range of Weibull scales for the load noise.
    pub noise_scale: (f64, f64),
    #[serde(default)]
    pub dominant: Option<DominantLoad>,
    pub dt: f64,
    pub n_steps_per_path: usize,
    pub n_paths: usize,
    pub base_seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_feeders() -> usize {
    4
}
fn default_r_over_x() -> f64 {
    1.0 / 3.0
}
fn default_epsilon() -> f64 {
    0.1
}

/// A synthesized load: placement plus noise parameters.
#[derive(Debug, Clone)]
struct SubnetLoad {
    bus: usize,
    scale: f64,
    shape: f64,
    mirror: bool,
}

/// Merged host+subnet network and the synthesized load list.
pub struct SubnetCase {
    pub network: Network,
    pub machines: MachineSet,
    /// Internal (0-based) ids of the subnet buses.
    pub subnet_buses: Vec<usize>,
    /// Internal id of the first subnet bus (feeder head).
    pub head_bus: usize,
    loads: Vec<SubnetLoad>,
    lambda: f64,
}

/// Builds the merged network: `n_feeders` radial chains below the host bus,
/// loads scattered uniformly over the subnet buses.
pub fn synthesize_subnet(
    host_net: &Network,
    host_machines: &MachineSet,
    spec: &SubnetSpec,
) -> Result<SubnetCase> {
    if spec.host_bus == 0 || spec.host_bus > host_net.n_buses() {
        return Err(Error::InvalidScenario(format!(
            "host bus {} not in case",
            spec.host_bus
        )));
    }
    if spec.n_buses == 0 || spec.n_loads == 0 || spec.n_feeders == 0 {
        return Err(Error::InvalidScenario(
            "subnet needs buses, loads and feeders".into(),
        ));
    }
    let host_id = spec.host_bus - 1;
    let n_host = host_net.n_buses();
    let mut rng = path_rng(spec.base_seed, 0xD15C);

    let mut network = host_net.clone();
    let mut subnet_buses = Vec::with_capacity(spec.n_buses);
    // feeder chains
    let per_feeder = spec.n_buses.div_ceil(spec.n_feeders);
    let mut created = 0usize;
    for _f in 0..spec.n_feeders {
        let mut prev = host_id;
        for _ in 0..per_feeder {
            if created == spec.n_buses {
                break;
            }
            let id = n_host + created;
            network.buses.push(Bus {
                id,
                kind: BusKind::Pq,
                v_setpoint: 1.0,
                p_load: 0.0,
                q_load: 0.0,
                p_gen: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            });
            let x = rng.random_range(spec.branch_x.0..=spec.branch_x.1);
            network.branches.push(Branch {
                from_bus: prev,
                to_bus: id,
                r: x * spec.r_over_x,
                x,
                b_charging: 0.0,
                tap: 1.0,
            });
            subnet_buses.push(id);
            prev = id;
            created += 1;
        }
    }
    let head_bus = subnet_buses[0];

    // loads: uniform placement over subnet buses, uniform sizes and noise
    // scales, mirror flags alternating so the aggregate stays symmetric
    let mut loads = Vec::with_capacity(spec.n_loads);
    for l in 0..spec.n_loads {
        let bus = subnet_buses[rng.random_range(0..subnet_buses.len())];
        let base = rng.random_range(spec.load_p.0..=spec.load_p.1);
        network.buses[bus].p_load += base;
        let scale = rng.random_range(spec.noise_scale.0..=spec.noise_scale.1);
        loads.push(SubnetLoad {
            bus,
            scale,
            shape: spec.noise_weibull_k,
            mirror: l % 2 == 1,
        });
    }

    Ok(SubnetCase {
        network,
        machines: host_machines.clone(),
        subnet_buses,
        head_bus,
        loads,
        lambda: spec.noise_lambda,
    })
}

/// Frequency-sample reports before/after introducing the dominant load.
#[derive(Debug, Clone)]
pub struct AggregationCaseReport {
    pub stats: StatsReport,
    pub lindeberg: LindebergReport,
    pub pooled_domega: Vec<f64>,
    pub top_contributions: Vec<DominanceRow>,
    pub n_sources: usize,
}

#[derive(Debug, Clone)]
pub struct AggregationReport {
    pub uniform: AggregationCaseReport,
    pub dominant: Option<AggregationCaseReport>,
    pub weight_min: f64,
    pub weight_max: f64,
    pub n_subnet_buses: usize,
    /// Internal id of the feeder-head bus (where the dominant load attaches).
    pub head_bus: usize,
    pub pf_iterations: usize,
}

struct StreamSource {
    model: NoiseModel,
    weight: f64,
    label: String,
}

/// Two-pass streaming evaluation of one source set: pass 1 pools dω and the
/// per-source empirical increment variances, pass 2 (identical streams, same
/// seeds) accumulates the truncated Lindeberg moments.
fn run_streaming(
    sources: &[StreamSource],
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    base_seed: u64,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<Moments>, LindebergReport)> {
    struct PassOne {
        domega: Vec<f64>,
        per_source: Vec<Moments>,
    }

    let pass1: Vec<Result<PassOne>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(base_seed, path);
            let mut domega = vec![0.0; n_steps];
            let mut per_source = Vec::with_capacity(sources.len());
            for src in sources {
                let process = build_process(&src.model)?;
                let series = process.generate(dt, n_steps, &mut rng)?;
                let mut mom = Moments::new();
                for (k, &dx) in series.increments.iter().enumerate() {
                    domega[k] += src.weight * dx;
                    mom.push(dx);
                }
                per_source.push(mom);
            }
            Ok(PassOne { domega, per_source })
        })
        .collect();

    let mut pooled = Vec::with_capacity(n_paths * n_steps);
    let mut per_source_moms: Vec<Vec<Moments>> = Vec::with_capacity(n_paths);
    for r in pass1 {
        let p = r?;
        pooled.extend_from_slice(&p.domega);
        per_source_moms.push(p.per_source);
    }
    let merged: Vec<Moments> = tree_reduce(per_source_moms, |a, b| {
        a.into_iter()
            .zip(b)
            .map(|(x, y)| x.merge(y))
            .collect::<Vec<_>>()
    })
    .unwrap_or_default();

    // ς² from empirical weighted variances
    let mut total_var = 0.0;
    for (src, mom) in sources.iter().zip(&merged) {
        total_var += src.weight * src.weight * mom.variance();
    }
    let sig = total_var.sqrt();
    let cut = epsilon * sig;

    // pass 2: truncated moments with the identical streams
    let means: Vec<f64> = merged.iter().map(|m| m.mean()).collect();
    let partials: Vec<Result<(Vec<f64>, u64)>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(base_seed, path);
            let mut acc = vec![0.0; sources.len()];
            let mut count = 0u64;
            for (si, src) in sources.iter().enumerate() {
                let process = build_process(&src.model)?;
                let series = process.generate(dt, n_steps, &mut rng)?;
                for &dx in &series.increments {
                    let xi = src.weight * (dx - means[si]);
                    if xi.abs() > cut {
                        acc[si] += xi * xi;
                    }
                }
                count = series.increments.len() as u64;
            }
            Ok((acc, count))
        })
        .collect();

    let mut trunc = vec![0.0; sources.len()];
    let mut n_samples = 0u64;
    for p in partials {
        let (acc, cnt) = p?;
        for (t, a) in trunc.iter_mut().zip(acc) {
            *t += a;
        }
        n_samples += cnt;
    }
    let num: f64 = trunc.iter().map(|t| t / n_samples as f64).sum();
    let ratio = num / total_var;

    Ok((
        pooled,
        merged,
        LindebergReport {
            ratio,
            pass: ratio < LINDEBERG_THRESHOLD,
            threshold: LINDEBERG_THRESHOLD,
            epsilon,
            total_std: sig,
            n_sources: sources.len(),
        },
    ))
}

/// Synthesizes the subnetwork, solves the merged power flow, derives the
/// full-formulation weights, and runs the stochastic pipeline with and
/// without the dominant load.
pub fn aggregation_experiment(
    host_net: &Network,
    host_machines: &MachineSet,
    spec: &SubnetSpec,
) -> Result<AggregationReport> {
    let case = synthesize_subnet(host_net, host_machines, spec)?;
    let adm = crate::netmodel::assemble_admittance(&case.network)?;
    // tiny subnet loads keep the solution near the host's; a frozen Jacobian
    // converges and saves dense factorizations at n ≈ 10³
    let op = powerflow::solve_power_flow(
        &case.network,
        &adm,
        &PfOptions {
            reuse_jacobian: true,
            ..PfOptions::default()
        },
    )?;
    let flow = sensitivity::flow_matrices(&op, &adm);
    let div = coi::build_divider(&adm, &case.machines)?;
    let weights = coi::coi_weights(&div, &case.machines);
    let est = FullComplexFrequency::from_flow_solves(
        &flow,
        &op,
        &weights,
        case.network.omega_base(),
    )?;

    let w_p = est.weights_p();
    let mut weight_min = f64::INFINITY;
    let mut weight_max = 0.0f64;
    for &b in &case.subnet_buses {
        weight_min = weight_min.min(w_p[b].abs());
        weight_max = weight_max.max(w_p[b].abs());
    }

    let uniform_sources: Vec<StreamSource> = case
        .loads
        .iter()
        .enumerate()
        .map(|(i, l)| StreamSource {
            model: NoiseModel {
                bus: l.bus,
                target: NoiseTarget::P,
                kind: NoiseKind::OuWeibullMapped {
                    lambda: case.lambda,
                    weibull_k: l.shape,
                    weibull_scale: l.scale,
                    x0: None,
                },
                mirror: l.mirror,
            },
            weight: w_p[l.bus],
            label: format!("load{}@bus{}", i, l.bus + 1),
        })
        .collect();

    let evaluate = |sources: &[StreamSource]| -> Result<AggregationCaseReport> {
        let (pooled, _per_source, lindeberg) = run_streaming(
            sources,
            spec.dt,
            spec.n_steps_per_path,
            spec.n_paths,
            spec.base_seed,
            spec.epsilon,
        )?;
        let stats = stats::normality_report(&pooled)?;
        let models: Vec<NoiseModel> = sources.iter().map(|s| s.model.clone()).collect();
        let mut top = dominance_analysis(&est, &models, spec.dt)?;
        top.truncate(10);
        Ok(AggregationCaseReport {
            stats,
            lindeberg,
            pooled_domega: pooled,
            top_contributions: top,
            n_sources: sources.len(),
        })
    };

    let uniform = evaluate(&uniform_sources)?;

    let dominant = match &spec.dominant {
        None => None,
        Some(d) => {
            // size the dominant source: weighted variance = multiplier × the
            // combined weighted level variance of the regular loads
            let mut base_var = 0.0;
            for s in &uniform_sources {
                if let NoiseKind::OuWeibullMapped {
                    weibull_k,
                    weibull_scale,
                    ..
                } = s.model.kind
                {
                    let (_, v, _) = crate::stochastic::weibull_moments(weibull_k, weibull_scale);
                    base_var += s.weight * s.weight * v;
                }
            }
            let w_head = w_p[case.head_bus];
            let (_, unit_var, _) = crate::stochastic::weibull_moments(d.weibull_k, 1.0);
            let scale_dom =
                (d.variance_multiplier * base_var / (w_head * w_head * unit_var)).sqrt();
            let mut sources = uniform_sources.clone();
            sources.push(StreamSource {
                model: NoiseModel {
                    bus: case.head_bus,
                    target: NoiseTarget::P,
                    kind: NoiseKind::OuWeibullMapped {
                        lambda: case.lambda,
                        weibull_k: d.weibull_k,
                        weibull_scale: scale_dom,
                        x0: None,
                    },
                    mirror: false,
                },
                weight: w_head,
                label: format!("dominant@bus{}", case.head_bus + 1),
            });
            Some(evaluate(&sources)?)
        }
    };

    Ok(AggregationReport {
        uniform,
        dominant,
        weight_min,
        weight_max,
        n_subnet_buses: case.subnet_buses.len(),
        head_bus: case.head_bus,
        pf_iterations: op.iterations,
    })
}

impl Clone for StreamSource {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            weight: self.weight,
            label: self.label.clone(),
        }
    }
}
