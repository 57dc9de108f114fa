//! Complex-frequency sensitivity matrices.
//!
//! From the per-branch flow terms
//!   P_hk = v_h v_k [G_hk cos θ_hk + B_hk sin θ_hk]
//!   Q_hk = v_h v_k [G_hk sin θ_hk - B_hk cos θ_hk]
//! the injection-rate equations are
//!   ṗ = A ρ + B ω,  q̇ = C ρ + D ω
//! with A = diag(p)+P, B = -diag(q)+Q, C = diag(q)+Q, D = diag(p)-P,
//! and the frequency map inverts to ω = H ṗ + K q̇ with
//! E = A C⁻¹, F = B - A C⁻¹ D, H = F⁻¹, K = -F⁻¹ E.
//!
//! Because the row sums of P and Q reproduce p and q identically, `B 1 = 0`
//! and `D 1 = 0`, so `F 1 = 0` at every operating point: a uniform shift of
//! all bus angle rates is unobservable from injections. H is therefore the
//! pseudo-inverse on the observable quotient (zero-mean gauge), and recovered
//! ω vectors carry no uniform component.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::netmodel::{AdmittanceSet, MachineSet};
use crate::powerflow::OperatingPoint;

/// Condition-estimate ceiling beyond which a matrix is treated as singular.
const SINGULAR_COND: f64 = 1e14;
/// Condition threshold that triggers machine-susceptance augmentation of
/// `B_bus` in the simplified path.
pub const B_AUGMENT_COND: f64 = 1e12;
/// Below this `‖G‖/‖B‖` ratio the simplified path drops to `H = -B⁻¹, K = 0`.
pub const G_NEGLIGIBLE_RATIO: f64 = 1e-9;

/// Branch power-flow term matrices; row sums reproduce the net injections.
#[derive(Debug, Clone)]
pub struct FlowMatrices {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

pub fn flow_matrices(op: &OperatingPoint, adm: &AdmittanceSet) -> FlowMatrices {
    let n = op.v.len();
    let mut pm = DMatrix::zeros(n, n);
    let mut qm = DMatrix::zeros(n, n);
    for h in 0..n {
        for k in 0..n {
            let g = adm.g_bus[(h, k)];
            let b = adm.b_bus[(h, k)];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let (s, c) = (op.theta[h] - op.theta[k]).sin_cos();
            let vv = op.v[h] * op.v[k];
            pm[(h, k)] = vv * (g * c + b * s);
            qm[(h, k)] = vv * (g * s - b * c);
        }
    }
    FlowMatrices { p: pm, q: qm }
}

/// Real and imaginary complex-frequency components. Units follow the inputs
/// of the producing call: feeding rates per second yields rad/s angle rates;
/// feeding rates per radian (i.e. divided by ω_base) yields pu deviations.
#[derive(Debug, Clone)]
pub struct ComplexFrequencyState {
    pub rho: DVector<f64>,
    pub omega: DVector<f64>,
}

/// How the unobservable uniform angle-rate direction was resolved.
#[derive(Debug, Clone)]
pub enum Gauge {
    /// Literal flow-term matrices: `F 1 = 0` holds structurally and `h` is
    /// the Moore-Penrose pseudo-inverse; recovered ω is zero-mean.
    ZeroMean {
        /// Unit left null vector of `f`.
        left_null: DVector<f64>,
    },
    /// Flow matrices evaluated on the machine-augmented admittance
    /// (`Y_bus + Y_g`) with measured injections on the diagonals: the rotor
    /// EMFs anchor the phase reference and `h` is a literal inverse.
    MachineAnchored,
}

/// The assembled sensitivity set at one operating point.
#[derive(Debug, Clone)]
pub struct SensitivitySet {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
    /// (Pseudo-)inverse of `f`; see `gauge`.
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    c_inv: DMatrix<f64>,
    pub gauge: Gauge,
    pub operating_point: OperatingPoint,
    /// 1-norm condition estimate of C.
    pub cond_c: f64,
    /// 1-norm condition estimate of F (gauge-fixed for the zero-mean form).
    pub cond_f: f64,
    /// ‖C C⁻¹ - I‖∞
    pub residual_c: f64,
    /// ‖F H - I‖∞ for the anchored form; ‖F H - Π‖∞ (Π the projector onto
    /// range(F)) for the zero-mean form.
    pub residual_fh: f64,
}

pub fn build_sensitivities(flow: &FlowMatrices, op: &OperatingPoint) -> Result<SensitivitySet> {
    let n = op.v.len();
    if flow.p.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: flow.p.nrows(),
        });
    }
    let mut a = flow.p.clone();
    let mut b = flow.q.clone();
    let mut c = flow.q.clone();
    let mut d = -&flow.p;
    for i in 0..n {
        a[(i, i)] += op.p[i];
        b[(i, i)] -= op.q[i];
        c[(i, i)] += op.q[i];
        d[(i, i)] += op.p[i];
    }

    let c_inv = c.clone().try_inverse().ok_or_else(|| singular_c(f64::INFINITY))?;
    let cond_c = linalg::cond_1(&c, &c_inv);
    if !cond_c.is_finite() || cond_c > SINGULAR_COND {
        return Err(singular_c(cond_c));
    }
    let residual_c = linalg::inf_norm(&(&c * &c_inv - DMatrix::identity(n, n)));

    let e = &a * &c_inv;
    let f = &b - &e * &d;
    let defl = linalg::deflated_inverse(&f, "F")?;
    if defl.condition > SINGULAR_COND {
        return Err(Error::SingularMatrix {
            name: "F",
            condition: defl.condition,
            hint: None,
        });
    }
    let h = defl.pinv;
    let k = -(&h * &e);

    let proj = DMatrix::identity(n, n) - &defl.left_null * defl.left_null.transpose();
    let residual_fh = linalg::inf_norm(&(&f * &h - proj));

    Ok(SensitivitySet {
        a,
        b,
        c,
        d,
        e,
        f,
        h,
        k,
        c_inv,
        gauge: Gauge::ZeroMean {
            left_null: defl.left_null,
        },
        operating_point: op.clone(),
        cond_c,
        cond_f: defl.condition,
        residual_c,
        residual_fh,
    })
}

/// Machine-anchored sensitivity build: the flow-term matrices are evaluated
/// on `Y_bus + Y_g` (machine internal admittances as bus shunts) while the
/// diagonals keep the measured injections, so a uniform rotation of bus
/// phases relative to the rotor EMFs is observable and `F` inverts outright.
/// Same anchoring convention as the frequency divider's `B_bus + B_g` and
/// the short-circuit-level `Y_bus + Y_g`.
pub fn build_sensitivities_anchored(
    op: &OperatingPoint,
    adm: &AdmittanceSet,
    machines: &MachineSet,
) -> Result<SensitivitySet> {
    if machines.is_empty() {
        return Err(Error::InvalidCase(
            "anchored sensitivities need at least one machine".into(),
        ));
    }
    let n = op.v.len();
    let mut aug = adm.clone();
    for m in &machines.machines {
        let y = num_complex::Complex64::new(1.0, 0.0)
            / num_complex::Complex64::new(0.0, m.x_internal);
        aug.y_bus[(m.bus, m.bus)] += y;
        aug.g_bus[(m.bus, m.bus)] += y.re;
        aug.b_bus[(m.bus, m.bus)] += y.im;
    }
    let flow = flow_matrices(op, &aug);
    let mut a = flow.p.clone();
    let mut b = flow.q.clone();
    let mut c = flow.q.clone();
    let mut d = -&flow.p;
    for i in 0..n {
        a[(i, i)] += op.p[i];
        b[(i, i)] -= op.q[i];
        c[(i, i)] += op.q[i];
        d[(i, i)] += op.p[i];
    }
    let c_inv = c.clone().try_inverse().ok_or_else(|| singular_c(f64::INFINITY))?;
    let cond_c = linalg::cond_1(&c, &c_inv);
    if !cond_c.is_finite() || cond_c > SINGULAR_COND {
        return Err(singular_c(cond_c));
    }
    let residual_c = linalg::inf_norm(&(&c * &c_inv - DMatrix::identity(n, n)));
    let e = &a * &c_inv;
    let f = &b - &e * &d;
    let h = linalg::invert(&f, "F")?;
    let cond_f = linalg::cond_1(&f, &h);
    if !cond_f.is_finite() || cond_f > SINGULAR_COND {
        return Err(Error::SingularMatrix {
            name: "F",
            condition: cond_f,
            hint: None,
        });
    }
    let k = -(&h * &e);
    let residual_fh = linalg::inf_norm(&(&f * &h - DMatrix::identity(n, n)));
    Ok(SensitivitySet {
        a,
        b,
        c,
        d,
        e,
        f,
        h,
        k,
        c_inv,
        gauge: Gauge::MachineAnchored,
        operating_point: op.clone(),
        cond_c,
        cond_f,
        residual_c,
        residual_fh,
    })
}

fn singular_c(condition: f64) -> Error {
    Error::SingularMatrix {
        name: "C",
        condition,
        hint: Some(
            "C = diag(q)+Q degenerates at exact no-load; use the simplified \
             (IEC-60909) sensitivity path instead"
                .into(),
        ),
    }
}

impl SensitivitySet {
    /// ω = H ṗ + K q̇ (zero-mean gauge), ρ = C⁻¹(q̇ - D ω).
    pub fn bus_frequencies(
        &self,
        p_dot: &DVector<f64>,
        q_dot: &DVector<f64>,
    ) -> Result<ComplexFrequencyState> {
        let n = self.h.nrows();
        if p_dot.len() != n || q_dot.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p_dot.len(),
            });
        }
        let omega = &self.h * p_dot + &self.k * q_dot;
        let rho = &self.c_inv * (q_dot - &self.d * &omega);
        Ok(ComplexFrequencyState { rho, omega })
    }

    /// Effective per-bus rows `w_p^T = c^T H`, `w_q^T = c^T K`.
    pub fn weight_rows(&self, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.h.transpose() * c, self.k.transpose() * c)
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }
}

/// Computes `w_p^T = c^T H` and `w_q^T = c^T K` by linear solves without
/// forming H or K; used at subnetwork scale.
pub fn coi_weight_rows(
    flow: &FlowMatrices,
    op: &OperatingPoint,
    c_weights: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = op.v.len();
    let mut a = flow.p.clone();
    let mut c = flow.q.clone();
    let mut d = -&flow.p;
    let mut b = flow.q.clone();
    for i in 0..n {
        a[(i, i)] += op.p[i];
        b[(i, i)] -= op.q[i];
        c[(i, i)] += op.q[i];
        d[(i, i)] += op.p[i];
    }
    // F = B - A C⁻¹ D, built with solves: X = C⁻¹ D
    let c_lu = c.clone().lu();
    let x = c_lu.solve(&d).ok_or_else(|| singular_c(f64::INFINITY))?;
    let f = b - &a * x;
    let solver = linalg::DeflatedSolver::new(&f, "F")?;
    let w_p = solver.row(c_weights);
    // w_q = K^T c = -E^T w_p = -C^{-T} A^T w_p
    let rhs = a.transpose() * &w_p;
    let w_q = -(c.transpose().lu().solve(&rhs).ok_or_else(|| singular_c(f64::INFINITY))?);
    Ok((w_p, w_q))
}

/// Simplified (IEC-60909) sensitivity matrices built from network data only:
/// `H = [-B + G B⁻¹ G]⁻¹`, `K = H G B⁻¹`.
#[derive(Debug, Clone)]
pub struct SimplifiedSet {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// True when `B_bus` was augmented with machine internal susceptances.
    pub augmented: bool,
    /// True when the G terms were dropped (`H = -B⁻¹`, `K = 0`).
    pub g_negligible: bool,
    pub cond_b: f64,
    /// ‖G‖∞ / ‖B‖∞ at build time.
    pub g_b_ratio: f64,
}

pub fn simplified_weights(
    adm: &AdmittanceSet,
    machines: Option<&MachineSet>,
) -> Result<SimplifiedSet> {
    let n = adm.b_bus.nrows();
    let mut b = adm.b_bus.clone();
    let mut augmented = false;

    let mut b_inv = b.clone().try_inverse();
    let mut cond_b = match &b_inv {
        Some(inv) => linalg::cond_1(&b, inv),
        None => f64::INFINITY,
    };
    if !cond_b.is_finite() || cond_b > B_AUGMENT_COND {
        // Laplacian-like B_bus (no shunts): fold in the machine internal
        // susceptances, matching the frequency-divider convention.
        let Some(mac) = machines.filter(|m| !m.is_empty()) else {
            return Err(Error::SingularMatrix {
                name: "B_bus",
                condition: cond_b,
                hint: Some(
                    "B_bus is Laplacian-like without shunts; provide machines to \
                     enable machine-susceptance augmentation"
                        .into(),
                ),
            });
        };
        for m in &mac.machines {
            b[(m.bus, m.bus)] += -1.0 / m.x_internal;
        }
        augmented = true;
        b_inv = b.clone().try_inverse();
        cond_b = match &b_inv {
            Some(inv) => linalg::cond_1(&b, inv),
            None => f64::INFINITY,
        };
        if !cond_b.is_finite() || cond_b > SINGULAR_COND {
            return Err(Error::SingularMatrix {
                name: "B_bus",
                condition: cond_b,
                hint: Some("B_bus is singular even after machine augmentation".into()),
            });
        }
    }
    let b_inv = b_inv.expect("checked above");

    let g_norm = linalg::inf_norm(&adm.g_bus);
    let b_norm = linalg::inf_norm(&b);
    let g_b_ratio = g_norm / b_norm;

    if g_b_ratio < G_NEGLIGIBLE_RATIO {
        return Ok(SimplifiedSet {
            h: -&b_inv,
            k: DMatrix::zeros(n, n),
            augmented,
            g_negligible: true,
            cond_b,
            g_b_ratio,
        });
    }

    let gbi = &adm.g_bus * &b_inv;
    let f_tilde = -&b + &gbi * &adm.g_bus;
    let h = linalg::invert(&f_tilde, "-B + G B^-1 G")?;
    let k = &h * &gbi;
    Ok(SimplifiedSet {
        h,
        k,
        augmented,
        g_negligible: false,
        cond_b,
        g_b_ratio,
    })
}


#[cfg(test)]
mod anchored_tests {
    use super::*;
    use crate::netmodel::{assemble_admittance, Branch, Bus, BusKind, Machine, MachineSet, Network};
    use crate::powerflow::{solve_power_flow, PfOptions};

    fn system() -> (Network, MachineSet) {
        let mut net = Network {
            buses: vec![
                Bus {
                    id: 0,
                    kind: BusKind::Slack,
                    v_setpoint: 1.03,
                    p_load: 0.0,
                    q_load: 0.0,
                    p_gen: 0.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
                Bus {
                    id: 1,
                    kind: BusKind::Pq,
                    v_setpoint: 1.0,
                    p_load: 0.25,
                    q_load: 0.06,
                    p_gen: 0.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Pq,
                    v_setpoint: 1.0,
                    p_load: 0.15,
                    q_load: 0.04,
                    p_gen: 0.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
            ],
            branches: vec![
                Branch {
                    from_bus: 0,
                    to_bus: 1,
                    r: 0.02,
                    x: 0.18,
                    b_charging: 0.03,
                    tap: 1.0,
                },
                Branch {
                    from_bus: 1,
                    to_bus: 2,
                    r: 0.03,
                    x: 0.22,
                    b_charging: 0.02,
                    tap: 1.0,
                },
            ],
            base_mva: 100.0,
            f_nominal_hz: 60.0,
        };
        net.buses[0].p_gen = 0.0;
        let machines = MachineSet::new(vec![Machine {
            bus: 0,
            inertia_m: 9.0,
            x_internal: 0.35,
        }]);
        (net, machines)
    }

    #[test]
    fn anchored_f_inverts_literally() {
        let (net, machines) = system();
        let adm = assemble_admittance(&net).unwrap();
        let op = solve_power_flow(&net, &adm, &PfOptions::default()).unwrap();
        let sens = build_sensitivities_anchored(&op, &adm, &machines).unwrap();
        assert!(matches!(sens.gauge, Gauge::MachineAnchored));
        assert!(sens.residual_fh < 1e-9, "FH-I = {}", sens.residual_fh);
        assert!(sens.cond_f < 1e6, "cond_f = {}", sens.cond_f);
        // K = -F⁻¹E within 1e-9 relative residual
        let k2 = -(&sens.h * &sens.e);
        let rel = linalg::inf_norm(&(&sens.k - k2)) / linalg::inf_norm(&sens.k).max(1e-300);
        assert!(rel < 1e-9);
    }

    #[test]
    fn anchored_round_trip_needs_no_projection() {
        use rand::prelude::*;
        let (net, machines) = system();
        let adm = assemble_admittance(&net).unwrap();
        let op = solve_power_flow(&net, &adm, &PfOptions::default()).unwrap();
        let sens = build_sensitivities_anchored(&op, &adm, &machines).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rho = DVector::from_fn(3, |_, _| 0.01 * rng.random::<f64>() - 0.005);
            let omega = DVector::from_fn(3, |_, _| 0.01 * rng.random::<f64>() - 0.005);
            let p_dot = &sens.a * &rho + &sens.b * &omega;
            let q_dot = &sens.c * &rho + &sens.d * &omega;
            let cf = sens.bus_frequencies(&p_dot, &q_dot).unwrap();
            assert!((cf.omega - &omega).amax() < 1e-9);
            assert!((cf.rho - &rho).amax() < 1e-9);
        }
    }
}
