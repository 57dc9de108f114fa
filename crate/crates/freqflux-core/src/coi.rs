//! Center-of-inertia frequency and the frequency-divider chain.
//!
//! Machine rotor speeds and bus frequencies are linked through the network
//! susceptances:
//!   B_bg (ω_g - 1_m) = [B_bus + B_g] (ω - 1_n)
//! with all susceptances in the admittance-imaginary-part sign convention
//! (machine internal reactance x stamps -1/x). Inverting with the
//! Moore-Penrose pseudo-inverse of B_bg gives machine speeds from bus
//! frequencies, and combining with the inertia-weighted CoI definition gives
//!   ω_CoI = c^T ω + α,  c^T = m_g^T B_bg^+ [B_bus + B_g],
//!   α = m_g^T {1_m - B_bg^+ [B_bus + B_g]} 1_n,
//! so that c^T 1 + α = 1 and ω_CoI = 1 at nominal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netmodel::{AdmittanceSet, MachineSet};
use crate::sensitivity::SensitivitySet;

/// Relative singular-value tolerance for the B_bg pseudo-inverse.
pub const PINV_SVD_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DividerMatrices {
    /// `B_bus + B_g`, n×n.
    pub b_bb: DMatrix<f64>,
    /// Bus-to-machine stamp matrix, n×m: column k holds -1/x_internal at the
    /// machine's bus row.
    pub b_bg: DMatrix<f64>,
    /// Moore-Penrose pseudo-inverse of `b_bg`, m×n.
    pub b_bg_pinv: DMatrix<f64>,
    pub svd_tolerance: f64,
}

pub fn build_divider(adm: &AdmittanceSet, machines: &MachineSet) -> Result<DividerMatrices> {
    if machines.is_empty() {
        return Err(Error::InvalidCase("divider needs at least one machine".into()));
    }
    let n = adm.b_bus.nrows();
    let m = machines.len();
    let mut b_g = DMatrix::<f64>::zeros(n, n);
    let mut b_bg = DMatrix::<f64>::zeros(n, m);
    for (k, mac) in machines.machines.iter().enumerate() {
        if mac.bus >= n {
            return Err(Error::InvalidCase(format!(
                "machine references missing bus {}",
                mac.bus
            )));
        }
        let stamp = -1.0 / mac.x_internal;
        b_g[(mac.bus, mac.bus)] += stamp;
        b_bg[(mac.bus, k)] = stamp;
    }
    let b_bb = &adm.b_bus + b_g;
    let b_bg_pinv = pinv(&b_bg, PINV_SVD_TOL)?;
    Ok(DividerMatrices {
        b_bb,
        b_bg,
        b_bg_pinv,
        svd_tolerance: PINV_SVD_TOL,
    })
}

fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let tol = rel_tol * svd.singular_values.max();
    svd.pseudo_inverse(tol)
        .map_err(|_| Error::SingularMatrix {
            name: "B_bg",
            condition: f64::INFINITY,
            hint: None,
        })
}

/// Bus weighting vector and offset for the CoI frequency.
#[derive(Debug, Clone)]
pub struct CoIWeights {
    pub c: DVector<f64>,
    pub alpha: f64,
    /// Normalized machine inertias.
    pub m_g: DVector<f64>,
}

pub fn coi_weights(div: &DividerMatrices, machines: &MachineSet) -> CoIWeights {
    let m_g = machines.normalized_inertias();
    let n = div.b_bb.nrows();
    // c^T = m_g^T B_bg^+ [B_bus + B_g]
    let t = div.b_bg_pinv.transpose() * &m_g; // n-vector: (m_g^T B_bg^+)^T
    let c = div.b_bb.transpose() * t;
    // α = m_g^T {1_m - B_bg^+ B_bb} 1_n
    let ones_n = DVector::from_element(n, 1.0);
    let alpha = m_g.sum() - (div.b_bg_pinv.transpose() * &m_g).dot(&(&div.b_bb * &ones_n));
    debug_assert!((c.sum() + alpha - 1.0).abs() < 1e-9);
    CoIWeights { c, alpha, m_g }
}

/// Exact CoI from machine speeds: inertia-weighted mean.
pub fn coi_from_machines(machines: &MachineSet, omega_g: &DVector<f64>) -> Result<f64> {
    if omega_g.len() != machines.len() {
        return Err(Error::DimensionMismatch {
            expected: machines.len(),
            got: omega_g.len(),
        });
    }
    Ok(machines.normalized_inertias().dot(omega_g))
}

/// Machine speeds from bus frequencies (all absolute, pu):
/// `ω_g = B_bg^+ [B_bus + B_g] (ω - 1_n) + 1_m`.
pub fn machine_speeds_from_bus(
    div: &DividerMatrices,
    omega_bus: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = div.b_bb.nrows();
    if omega_bus.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: omega_bus.len(),
        });
    }
    let dev = omega_bus - DVector::from_element(n, 1.0);
    let mut out = &div.b_bg_pinv * (&div.b_bb * dev);
    out.apply(|x| *x += 1.0);
    Ok(out)
}

/// Weighted-map CoI estimate from injection rates:
/// `c^T [H ṗ + K q̇] / ω_base + α`. With zero rates this returns α; the pu
/// deviation is the same quantity minus α, and the absolute pu level is
/// `1 + deviation` (nominal fixed point `c^T 1 + α = 1`).
pub fn coi_estimate(
    sens: &SensitivitySet,
    weights: &CoIWeights,
    p_dot: &DVector<f64>,
    q_dot: &DVector<f64>,
    omega_base: f64,
) -> Result<f64> {
    let cf = sens.bus_frequencies(p_dot, q_dot)?;
    Ok(weights.c.dot(&cf.omega) / omega_base + weights.alpha)
}

/// CoI frequency deviation in pu (the estimate without the α offset).
pub fn coi_deviation(
    sens: &SensitivitySet,
    weights: &CoIWeights,
    p_dot: &DVector<f64>,
    q_dot: &DVector<f64>,
    omega_base: f64,
) -> Result<f64> {
    Ok(coi_estimate(sens, weights, p_dot, q_dot, omega_base)? - weights.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{assemble_admittance, Branch, Bus, BusKind, Machine, Network};
    use approx::assert_relative_eq;

    fn bus(id: usize, kind: BusKind) -> Bus {
        Bus {
            id,
            kind,
            v_setpoint: 1.0,
            p_load: 0.0,
            q_load: 0.0,
            p_gen: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
        }
    }

    fn two_bus_one_machine() -> (AdmittanceSet, MachineSet) {
        let net = Network {
            buses: vec![bus(0, BusKind::Slack), bus(1, BusKind::Pq)],
            branches: vec![Branch {
                from_bus: 0,
                to_bus: 1,
                r: 0.0,
                x: 0.5,
                b_charging: 0.0,
                tap: 1.0,
            }],
            base_mva: 100.0,
            f_nominal_hz: 60.0,
        };
        let adm = assemble_admittance(&net).unwrap();
        let machines = MachineSet::new(vec![Machine {
            bus: 0,
            inertia_m: 10.0,
            x_internal: 0.5,
        }]);
        (adm, machines)
    }

    #[test]
    fn divider_stamps_single_machine() {
        let (adm, machines) = two_bus_one_machine();
        let div = build_divider(&adm, &machines).unwrap();
        // machine x = 0.5 stamps -2 at its bus (imaginary-part convention)
        assert_relative_eq!(div.b_bg[(0, 0)], -2.0, epsilon = 1e-14);
        assert_relative_eq!(div.b_bg[(1, 0)], 0.0);
        // B_bb = B_bus + diag(-2, 0)
        assert_relative_eq!(div.b_bb[(0, 0)], -4.0, epsilon = 1e-14);
        assert_relative_eq!(div.b_bb[(1, 1)], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn pseudo_inverse_defining_property() {
        let (adm, machines) = two_bus_one_machine();
        let div = build_divider(&adm, &machines).unwrap();
        let b = &div.b_bg;
        let bp = &div.b_bg_pinv;
        assert!(crate::linalg::inf_norm(&(b * bp * b - b)) < 1e-8);
    }

    #[test]
    fn uniform_bus_frequency_recovers_nominal_machine_speed() {
        let (adm, machines) = two_bus_one_machine();
        let div = build_divider(&adm, &machines).unwrap();
        let omega = DVector::from_element(2, 1.0);
        let wg = machine_speeds_from_bus(&div, &omega).unwrap();
        assert!((wg - DVector::from_element(1, 1.0)).amax() < 1e-14);
    }

    #[test]
    fn divider_is_exact_on_two_bus_single_machine() {
        // one machine feeding one remote bus: every bus tracks the machine
        let (adm, machines) = two_bus_one_machine();
        let div = build_divider(&adm, &machines).unwrap();
        let dev = 0.004;
        let omega = DVector::from_element(2, 1.0 + dev);
        let wg = machine_speeds_from_bus(&div, &omega).unwrap();
        assert_relative_eq!(wg[0], 1.0 + dev, epsilon = 1e-12);
    }

    #[test]
    fn single_machine_single_bus_weights_are_identity() {
        let net = Network {
            buses: vec![bus(0, BusKind::Slack)],
            branches: vec![],
            base_mva: 100.0,
            f_nominal_hz: 60.0,
        };
        let adm = assemble_admittance(&net).unwrap();
        let machines = MachineSet::new(vec![Machine {
            bus: 0,
            inertia_m: 5.0,
            x_internal: 0.4,
        }]);
        let div = build_divider(&adm, &machines).unwrap();
        let w = coi_weights(&div, &machines);
        assert_relative_eq!(w.c[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(w.alpha, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nominal_fixed_point_holds() {
        let (adm, machines) = two_bus_one_machine();
        let div = build_divider(&adm, &machines).unwrap();
        let w = coi_weights(&div, &machines);
        assert_relative_eq!(w.c.sum() + w.alpha, 1.0, epsilon = 1e-10);
        // ω = 1 ⟹ ω_CoI = 1
        let coi = w.c.dot(&DVector::from_element(2, 1.0)) + w.alpha;
        assert_relative_eq!(coi, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coi_from_machines_is_weighted_mean() {
        let machines = MachineSet::new(vec![
            Machine {
                bus: 0,
                inertia_m: 1.0,
                x_internal: 0.3,
            },
            Machine {
                bus: 1,
                inertia_m: 1.0,
                x_internal: 0.3,
            },
        ]);
        let coi =
            coi_from_machines(&machines, &DVector::from_vec(vec![1.0, 1.02])).unwrap();
        assert_relative_eq!(coi, 1.01, epsilon = 1e-14);

        let machines = MachineSet::new(vec![
            Machine {
                bus: 0,
                inertia_m: 9.0,
                x_internal: 0.3,
            },
            Machine {
                bus: 1,
                inertia_m: 1.0,
                x_internal: 0.3,
            },
        ]);
        let coi =
            coi_from_machines(&machines, &DVector::from_vec(vec![1.0, 1.1])).unwrap();
        assert_relative_eq!(coi, 1.01, epsilon = 1e-14);
    }

    #[test]
    fn permutation_equivariance_of_weights() {
        // 3-bus net, machines at buses 0 and 2; permute bus labels (0 2 1)
        let build = |perm: &[usize]| {
            let mut net = Network {
                buses: (0..3)
                    .map(|id| bus(id, if id == 0 { BusKind::Slack } else { BusKind::Pq }))
                    .collect::<Vec<_>>(),
                branches: vec![
                    Branch {
                        from_bus: perm[0],
                        to_bus: perm[1],
                        r: 0.0,
                        x: 0.2,
                        b_charging: 0.02,
                        tap: 1.0,
                    },
                    Branch {
                        from_bus: perm[1],
                        to_bus: perm[2],
                        r: 0.0,
                        x: 0.4,
                        b_charging: 0.04,
                        tap: 1.0,
                    },
                ],
                base_mva: 100.0,
                f_nominal_hz: 60.0,
            };
            net.buses[perm[0]].kind = BusKind::Slack;
            for i in 0..3 {
                if i != perm[0] {
                    net.buses[i].kind = BusKind::Pq;
                }
            }
            let machines = MachineSet::new(vec![
                Machine {
                    bus: perm[0],
                    inertia_m: 8.0,
                    x_internal: 0.3,
                },
                Machine {
                    bus: perm[2],
                    inertia_m: 4.0,
                    x_internal: 0.5,
                },
            ]);
            let adm = assemble_admittance(&net).unwrap();
            let div = build_divider(&adm, &machines).unwrap();
            coi_weights(&div, &machines)
        };
        let w_id = build(&[0, 1, 2]);
        let w_perm = build(&[0, 2, 1]); // swap labels of buses 1 and 2
        assert_relative_eq!(w_id.alpha, w_perm.alpha, epsilon = 1e-12);
        assert_relative_eq!(w_id.c[0], w_perm.c[0], epsilon = 1e-12);
        assert_relative_eq!(w_id.c[1], w_perm.c[2], epsilon = 1e-12);
        assert_relative_eq!(w_id.c[2], w_perm.c[1], epsilon = 1e-12);
    }
}
