//! Static network description: buses, branches, machines, admittance
//! assembly and bus-strength (short-circuit level) metrics.
//!
//! Internal indexing is 0-based; case files on disk use 1-based bus ids.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    #[serde(rename = "pv")]
    Pv,
    #[serde(rename = "pq")]
    Pq,
}

/// A network bus. `p_load`/`q_load` are consumed powers in pu; scheduled
/// generation at PV/slack buses is carried separately in `p_gen` so that
/// load totals stay meaningful.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default = "one")]
    pub v_setpoint: f64,
    #[serde(default)]
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
    #[serde(default)]
    pub p_gen: f64,
    #[serde(default)]
    pub shunt_g: f64,
    #[serde(default)]
    pub shunt_b: f64,
}

fn one() -> f64 {
    1.0
}

/// A branch (line or transformer) with series impedance, total line charging
/// and an off-nominal tap ratio on the from side (1.0 = none).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    #[serde(default)]
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_charging: f64,
    #[serde(default = "one")]
    pub tap: f64,
}

/// A synchronous machine: inertia `M = 2H` in seconds on the system base and
/// internal reactance (stator plus step-up transformer) in pu.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Machine {
    pub bus: usize,
    pub inertia_m: f64,
    pub x_internal: f64,
}

#[derive(Debug, Clone)]
pub struct MachineSet {
    pub machines: Vec<Machine>,
}

impl MachineSet {
    pub fn new(machines: Vec<Machine>) -> Self {
        Self { machines }
    }

    pub fn len(&self) -> usize {
        self.machines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.machines.is_empty()
    }

    /// Inertias normalized to sum to one (the CoI weights `m_g`).
    pub fn normalized_inertias(&self) -> DVector<f64> {
        let total: f64 = self.machines.iter().map(|m| m.inertia_m).sum();
        DVector::from_iterator(
            self.machines.len(),
            self.machines.iter().map(|m| m.inertia_m / total),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub base_mva: f64,
    pub f_nominal_hz: f64,
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Nominal angular frequency in rad/s.
    pub fn omega_base(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_nominal_hz
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load).sum()
    }

    /// Structural sanity: ids contiguous, exactly one slack, valid branches.
    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        for (i, b) in self.buses.iter().enumerate() {
            if b.id != i {
                return Err(Error::InvalidCase(format!(
                    "bus ids must be contiguous from 0; found {} at position {i}",
                    b.id
                )));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(Error::InvalidCase(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for br in &self.branches {
            if br.from_bus >= n || br.to_bus >= n {
                return Err(Error::InvalidCase(format!(
                    "branch {}-{} references a missing bus",
                    br.from_bus, br.to_bus
                )));
            }
            if br.from_bus == br.to_bus {
                return Err(Error::InvalidBranch {
                    from: br.from_bus,
                    to: br.to_bus,
                    reason: "from and to bus coincide".into(),
                });
            }
        }
        Ok(())
    }
}

/// Bus admittance matrix with its real and imaginary parts.
#[derive(Debug, Clone)]
pub struct AdmittanceSet {
    pub y_bus: DMatrix<Complex64>,
    pub g_bus: DMatrix<f64>,
    pub b_bus: DMatrix<f64>,
}

/// Standard pi-equivalent branch stamping with shunts and off-nominal taps.
pub fn assemble_admittance(network: &Network) -> Result<AdmittanceSet> {
    network.validate()?;
    let n = network.n_buses();
    check_connected(network)?;

    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in &network.branches {
        if br.x == 0.0 {
            return Err(Error::InvalidBranch {
                from: br.from_bus,
                to: br.to_bus,
                reason: "zero series reactance".into(),
            });
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let ysh = Complex64::new(0.0, br.b_charging / 2.0);
        let t = if br.tap == 0.0 { 1.0 } else { br.tap };
        let (f, k) = (br.from_bus, br.to_bus);
        y[(f, f)] += (ys + ysh) / (t * t);
        y[(k, k)] += ys + ysh;
        y[(f, k)] -= ys / t;
        y[(k, f)] -= ys / t;
    }
    for b in &network.buses {
        y[(b.id, b.id)] += Complex64::new(b.shunt_g, b.shunt_b);
    }

    let g_bus = y.map(|z| z.re);
    let b_bus = y.map(|z| z.im);
    Ok(AdmittanceSet {
        y_bus: y,
        g_bus,
        b_bus,
    })
}

fn check_connected(network: &Network) -> Result<()> {
    let n = network.n_buses();
    if n == 0 {
        return Err(Error::InvalidCase("network has no buses".into()));
    }
    let mut adj = vec![Vec::new(); n];
    for br in &network.branches {
        adj[br.from_bus].push(br.to_bus);
        adj[br.to_bus].push(br.from_bus);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1usize;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    if count != n {
        // count components for the error message
        let mut comp = 1usize;
        for s in 0..n {
            if !seen[s] {
                comp += 1;
                let mut st = vec![s];
                seen[s] = true;
                while let Some(i) = st.pop() {
                    for &j in &adj[i] {
                        if !seen[j] {
                            seen[j] = true;
                            st.push(j);
                        }
                    }
                }
            }
        }
        return Err(Error::DisconnectedNetwork { components: comp });
    }
    Ok(())
}

/// Short-circuit level per bus: `SCL_i = 1 / |Z_ii|` where
/// `Z = [Y_bus + Y_g]^{-1}` and `Y_g` holds the machine internal admittances
/// `1/(j x_internal)` on the diagonal.
pub fn short_circuit_levels(
    admittance: &AdmittanceSet,
    machines: &MachineSet,
) -> Result<DVector<f64>> {
    let n = admittance.y_bus.nrows();
    let mut y = admittance.y_bus.clone();
    for m in &machines.machines {
        if m.bus >= n {
            return Err(Error::InvalidCase(format!(
                "machine references missing bus {}",
                m.bus
            )));
        }
        y[(m.bus, m.bus)] += Complex64::new(1.0, 0.0) / Complex64::new(0.0, m.x_internal);
    }
    let z = y.try_inverse().ok_or(Error::SingularMatrix {
        name: "Y_bus + Y_g",
        condition: f64::INFINITY,
        hint: None,
    })?;
    Ok(DVector::from_fn(n, |i, _| 1.0 / z[(i, i)].norm()))
}

// ---------------------------------------------------------------------------
// Case file I/O. One JSON document: arrays `buses`, `branches`, `machines`,
// scalars `base_mva`, `f_nominal_hz`. Bus ids are 1-based on disk.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CaseFile {
    base_mva: f64,
    f_nominal_hz: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    #[serde(default)]
    machines: Vec<Machine>,
}

/// Loads a case file, shifting 1-based external ids to internal 0-based.
pub fn load_case(path: &Path) -> Result<(Network, MachineSet)> {
    let text = std::fs::read_to_string(path)?;
    parse_case(&text)
}

pub fn parse_case(text: &str) -> Result<(Network, MachineSet)> {
    let mut case: CaseFile = serde_json::from_str(text)?;
    for b in &mut case.buses {
        if b.id == 0 {
            return Err(Error::InvalidCase("bus ids in case files are 1-based".into()));
        }
        b.id -= 1;
    }
    for br in &mut case.branches {
        if br.from_bus == 0 || br.to_bus == 0 {
            return Err(Error::InvalidCase("branch bus ids are 1-based".into()));
        }
        br.from_bus -= 1;
        br.to_bus -= 1;
        if br.tap == 0.0 {
            br.tap = 1.0;
        }
    }
    for m in &mut case.machines {
        if m.bus == 0 {
            return Err(Error::InvalidCase("machine bus ids are 1-based".into()));
        }
        m.bus -= 1;
        if m.inertia_m <= 0.0 || m.x_internal <= 0.0 {
            return Err(Error::InvalidCase(
                "machine inertia and internal reactance must be positive".into(),
            ));
        }
    }
    let network = Network {
        buses: case.buses,
        branches: case.branches,
        base_mva: case.base_mva,
        f_nominal_hz: case.f_nominal_hz,
    };
    network.validate()?;
    let machines = MachineSet::new(case.machines);
    for m in &machines.machines {
        if m.bus >= network.n_buses() {
            return Err(Error::InvalidCase(format!(
                "machine references missing bus {}",
                m.bus + 1
            )));
        }
    }
    Ok((network, machines))
}

/// Serializes a network back to the on-disk form (ids restored to 1-based).
pub fn write_case(network: &Network, machines: &MachineSet, path: &Path) -> Result<()> {
    let case = CaseFile {
        base_mva: network.base_mva,
        f_nominal_hz: network.f_nominal_hz,
        buses: network
            .buses
            .iter()
            .map(|b| {
                let mut b = b.clone();
                b.id += 1;
                b
            })
            .collect(),
        branches: network
            .branches
            .iter()
            .map(|br| {
                let mut br = br.clone();
                br.from_bus += 1;
                br.to_bus += 1;
                br
            })
            .collect(),
        machines: machines
            .machines
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.bus += 1;
                m
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&case)?;
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64) -> Network {
        Network {
            buses: vec![
                Bus {
                    id: 0,
                    kind: BusKind::Slack,
                    v_setpoint: 1.0,
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
                    p_load: 0.0,
                    q_load: 0.0,
                    p_gen: 0.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                },
            ],
            branches: vec![Branch {
                from_bus: 0,
                to_bus: 1,
                r,
                x,
                b_charging: 0.0,
                tap: 1.0,
            }],
            base_mva: 100.0,
            f_nominal_hz: 60.0,
        }
    }

    #[test]
    fn pure_reactance_stamp() {
        let adm = assemble_admittance(&two_bus(0.0, 0.5)).unwrap();
        // 1/(j 0.5) = -2j
        assert_relative_eq!(adm.b_bus[(0, 0)], -2.0, epsilon = 1e-14);
        assert_relative_eq!(adm.b_bus[(0, 1)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(adm.b_bus[(1, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(adm.b_bus[(1, 1)], -2.0, epsilon = 1e-14);
        assert_eq!(adm.g_bus[(0, 0)], 0.0);
    }

    #[test]
    fn complex_series_stamp() {
        // 1/(0.5 + j0.5) = 1 - j1
        let adm = assemble_admittance(&two_bus(0.5, 0.5)).unwrap();
        assert_relative_eq!(adm.g_bus[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(adm.g_bus[(0, 1)], -1.0, epsilon = 1e-14);
        assert_relative_eq!(adm.b_bus[(0, 0)], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_reactance_rejected() {
        let mut net = two_bus(0.1, 0.5);
        net.branches[0].x = 0.0;
        assert!(matches!(
            assemble_admittance(&net),
            Err(Error::InvalidBranch { .. })
        ));
    }

    #[test]
    fn disconnected_rejected() {
        let mut net = two_bus(0.0, 0.5);
        net.buses.push(Bus {
            id: 2,
            kind: BusKind::Pq,
            v_setpoint: 1.0,
            p_load: 0.0,
            q_load: 0.0,
            p_gen: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
        });
        assert!(matches!(
            assemble_admittance(&net),
            Err(Error::DisconnectedNetwork { components: 2 })
        ));
    }

    #[test]
    fn row_sums_equal_shunt_admittance() {
        // zero-shunt network: zero row sums
        let adm = assemble_admittance(&two_bus(0.2, 0.4)).unwrap();
        for i in 0..2 {
            let s: Complex64 = adm.y_bus.row(i).sum();
            assert!(s.norm() < 1e-12);
        }
        // with a bus shunt, row sum equals it
        let mut net = two_bus(0.2, 0.4);
        net.buses[1].shunt_b = 0.19;
        let adm = assemble_admittance(&net).unwrap();
        let s: Complex64 = adm.y_bus.row(1).sum();
        assert_relative_eq!(s.im, 0.19, epsilon = 1e-14);
    }

    #[test]
    fn scl_single_machine_no_network() {
        // one bus, one machine x = 0.2 -> SCL = 5
        let net = Network {
            buses: vec![Bus {
                id: 0,
                kind: BusKind::Slack,
                v_setpoint: 1.0,
                p_load: 0.0,
                q_load: 0.0,
                p_gen: 0.0,
                shunt_g: 0.0,
                shunt_b: 0.0,
            }],
            branches: vec![],
            base_mva: 100.0,
            f_nominal_hz: 60.0,
        };
        let adm = assemble_admittance(&net).unwrap();
        let machines = MachineSet::new(vec![Machine {
            bus: 0,
            inertia_m: 10.0,
            x_internal: 0.2,
        }]);
        let scl = short_circuit_levels(&adm, &machines).unwrap();
        assert_relative_eq!(scl[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn scl_matches_hand_inverted_three_bus() {
        // Chain 0-1-2, machines at 0 and 2. Oracle: direct 3x3 complex
        // inversion written out independently below.
        let net = Network {
            buses: (0..3)
                .map(|id| Bus {
                    id,
                    kind: if id == 0 { BusKind::Slack } else { BusKind::Pq },
                    v_setpoint: 1.0,
                    p_load: 0.0,
                    q_load: 0.0,
                    p_gen: 0.0,
                    shunt_g: 0.0,
                    shunt_b: 0.0,
                })
                .collect(),
            branches: vec![
                Branch {
                    from_bus: 0,
                    to_bus: 1,
                    r: 0.05,
                    x: 0.25,
                    b_charging: 0.0,
                    tap: 1.0,
                },
                Branch {
                    from_bus: 1,
                    to_bus: 2,
                    r: 0.02,
                    x: 0.4,
                    b_charging: 0.02,
                    tap: 1.0,
                },
            ],
            base_mva: 100.0,
            f_nominal_hz: 50.0,
        };
        let machines = MachineSet::new(vec![
            Machine {
                bus: 0,
                inertia_m: 8.0,
                x_internal: 0.3,
            },
            Machine {
                bus: 2,
                inertia_m: 6.0,
                x_internal: 0.5,
            },
        ]);
        let adm = assemble_admittance(&net).unwrap();
        let scl = short_circuit_levels(&adm, &machines).unwrap();

        // oracle: build the augmented Y by hand and invert with cofactors
        let j = Complex64::new(0.0, 1.0);
        let y01 = 1.0 / Complex64::new(0.05, 0.25);
        let y12 = 1.0 / Complex64::new(0.02, 0.4);
        let sh = j * 0.01;
        let a = y01 + 1.0 / (j * 0.3);
        let b = -y01;
        let d = y01 + y12 + sh;
        let e = -y12;
        let f = y12 + sh + 1.0 / (j * 0.5);
        // Y = [[a, b, 0], [b, d, e], [0, e, f]]
        let det = a * (d * f - e * e) - b * (b * f);
        let z00 = (d * f - e * e) / det;
        let z11 = (a * f) / det;
        let z22 = (a * d - b * b) / det;
        assert_relative_eq!(scl[0], 1.0 / z00.norm(), epsilon = 1e-12);
        assert_relative_eq!(scl[1], 1.0 / z11.norm(), epsilon = 1e-12);
        assert_relative_eq!(scl[2], 1.0 / z22.norm(), epsilon = 1e-12);
    }

    #[test]
    fn case_roundtrip_ids() {
        let text = r#"{
            "base_mva": 100.0,
            "f_nominal_hz": 60.0,
            "buses": [
                {"id": 1, "kind": "slack", "v_setpoint": 1.05},
                {"id": 2, "kind": "pq", "p_load": 0.3, "q_load": 0.1}
            ],
            "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.01, "x": 0.1}],
            "machines": [{"bus": 1, "inertia_m": 10.0, "x_internal": 0.3}]
        }"#;
        let (net, mac) = parse_case(text).unwrap();
        assert_eq!(net.buses[0].id, 0);
        assert_eq!(net.branches[0].to_bus, 1);
        assert_eq!(mac.machines[0].bus, 0);
        assert_eq!(net.total_load(), 0.3);
    }
}
