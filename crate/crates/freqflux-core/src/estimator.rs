//! Runtime-selectable CoI frequency estimators.
//!
//! Each estimator reduces to an affine map from injection rates (or Itô
//! increments) to the CoI frequency: a per-bus active-power weight row, an
//! optional reactive row, and the nominal offset. Implementations register
//! by name and are selected from scenario files or the CLI.

use nalgebra::DVector;

use crate::coi::CoIWeights;
use crate::error::{Error, Result};
use crate::netmodel::{AdmittanceSet, MachineSet};
use crate::sensitivity::{self, SensitivitySet};

/// A CoI frequency estimator as an affine map on injection rates.
///
/// `deviation` returns the CoI frequency deviation in pu for rates in pu/s;
/// the same weight rows apply to Itô increments (pu) giving pu frequency
/// increments.
pub trait CoiEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Per-bus weights for active-power rates/increments (includes the
    /// 1/ω_base normalization to pu frequency).
    fn weights_p(&self) -> &DVector<f64>;

    /// Per-bus weights for reactive-power rates/increments, when the
    /// estimator uses them.
    fn weights_q(&self) -> Option<&DVector<f64>>;

    /// Nominal offset α of the underlying divider chain.
    fn alpha(&self) -> f64;

    fn deviation(&self, p_dot: &DVector<f64>, q_dot: &DVector<f64>) -> Result<f64> {
        let n = self.weights_p().len();
        if p_dot.len() != n || q_dot.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p_dot.len(),
            });
        }
        let mut dev = self.weights_p().dot(p_dot);
        if let Some(wq) = self.weights_q() {
            dev += wq.dot(q_dot);
        }
        Ok(dev)
    }
}

/// Full complex-frequency estimator: `ω_CoI - 1 = c^T [H ṗ + K q̇] / ω_base`.
pub struct FullComplexFrequency {
    w_p: DVector<f64>,
    w_q: DVector<f64>,
    alpha: f64,
}

impl FullComplexFrequency {
    pub fn from_sensitivities(
        sens: &SensitivitySet,
        weights: &CoIWeights,
        omega_base: f64,
    ) -> Self {
        let (mut w_p, mut w_q) = sens.weight_rows(&weights.c);
        w_p /= omega_base;
        w_q /= omega_base;
        Self {
            w_p,
            w_q,
            alpha: weights.alpha,
        }
    }

    /// Construction via linear solves only; used at subnetwork scale.
    pub fn from_flow_solves(
        flow: &sensitivity::FlowMatrices,
        op: &crate::powerflow::OperatingPoint,
        weights: &CoIWeights,
        omega_base: f64,
    ) -> Result<Self> {
        let (mut w_p, mut w_q) = sensitivity::coi_weight_rows(flow, op, &weights.c)?;
        w_p /= omega_base;
        w_q /= omega_base;
        Ok(Self {
            w_p,
            w_q,
            alpha: weights.alpha,
        })
    }
}

impl CoiEstimator for FullComplexFrequency {
    fn name(&self) -> &'static str {
        "full"
    }
    fn weights_p(&self) -> &DVector<f64> {
        &self.w_p
    }
    fn weights_q(&self) -> Option<&DVector<f64>> {
        Some(&self.w_q)
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Simplified susceptance-only estimator:
/// `ω_CoI - 1 = -c^T B_bus^{-1} ṗ / ω_base`.
pub struct SimplifiedSusceptance {
    w_p: DVector<f64>,
    alpha: f64,
}

impl SimplifiedSusceptance {
    pub fn from_admittance(
        adm: &AdmittanceSet,
        machines: Option<&MachineSet>,
        weights: &CoIWeights,
        omega_base: f64,
    ) -> Result<Self> {
        let simp = sensitivity::simplified_weights(adm, machines)?;
        let w_p = simp.h.transpose() * &weights.c / omega_base;
        Ok(Self {
            w_p,
            alpha: weights.alpha,
        })
    }
}

impl CoiEstimator for SimplifiedSusceptance {
    fn name(&self) -> &'static str {
        "simplified"
    }
    fn weights_p(&self) -> &DVector<f64> {
        &self.w_p
    }
    fn weights_q(&self) -> Option<&DVector<f64>> {
        None
    }
    fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Everything an estimator constructor may need.
pub struct EstimatorContext<'a> {
    pub admittance: &'a AdmittanceSet,
    pub machines: &'a MachineSet,
    pub sensitivities: Option<&'a SensitivitySet>,
    pub weights: &'a CoIWeights,
    pub omega_base: f64,
}

type Constructor = fn(&EstimatorContext) -> Result<Box<dyn CoiEstimator>>;

fn build_full(ctx: &EstimatorContext) -> Result<Box<dyn CoiEstimator>> {
    let sens = ctx.sensitivities.ok_or_else(|| {
        Error::InvalidScenario("the 'full' estimator needs a solved operating point".into())
    })?;
    Ok(Box::new(FullComplexFrequency::from_sensitivities(
        sens,
        ctx.weights,
        ctx.omega_base,
    )))
}

fn build_simplified(ctx: &EstimatorContext) -> Result<Box<dyn CoiEstimator>> {
    Ok(Box::new(SimplifiedSusceptance::from_admittance(
        ctx.admittance,
        Some(ctx.machines),
        ctx.weights,
        ctx.omega_base,
    )?))
}

const REGISTRY: &[(&str, Constructor)] = &[("full", build_full), ("simplified", build_simplified)];

/// Names of all registered estimators.
pub fn available() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

/// Builds an estimator by registered name.
pub fn build(name: &str, ctx: &EstimatorContext) -> Result<Box<dyn CoiEstimator>> {
    for (n, ctor) in REGISTRY {
        if *n == name {
            return ctor(ctx);
        }
    }
    Err(Error::InvalidScenario(format!(
        "unknown estimator '{name}' (available: {})",
        available().join(", ")
    )))
}
