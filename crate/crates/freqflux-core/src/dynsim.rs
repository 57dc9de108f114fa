//! Classical swing-equation time-domain simulator.
//!
//! Machines are constant-EMF-behind-reactance models swinging against a
//! constant-admittance network (loads and event loads folded into the
//! admittance matrix), integrated with the explicit trapezoidal (Heun)
//! scheme — second order, matching the convergence checks. The recorded
//! injection trajectories feed the frequency estimators, which are compared
//! against the simulated CoI.
//!
//! A governor-free system has no anchor for the synchronous common mode: a
//! sustained power imbalance makes every machine drift together, and that
//! drift is invisible to injection-based estimators (see the sensitivity
//! module on `F 1 = 0`). The comparison therefore reports raw errors and
//! errors against the injection-observable projection of the response, where
//! the two estimators can actually be told apart.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::coi::CoIWeights;
use crate::error::{Error, Result};
use crate::estimator::CoiEstimator;
use crate::netmodel::{AdmittanceSet, MachineSet, Network};
use crate::powerflow::OperatingPoint;
use crate::sensitivity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    LoadRamp,
    LoadStep,
}

/// A load disturbance folded into the network admittance at `bus`.
#[derive(Debug, Clone)]
pub struct Event {
    pub kind: EventKind,
    pub bus: usize,
    /// pu/s for ramps.
    pub p_rate: f64,
    /// pu for steps.
    pub p_step: f64,
    /// Reactive power as a fraction of the active event load.
    pub q_ratio: f64,
    pub t_start: f64,
    pub duration: f64,
}

impl Event {
    fn active_power(&self, t: f64) -> f64 {
        match self.kind {
            EventKind::LoadRamp => self.p_rate * (t - self.t_start).clamp(0.0, self.duration),
            EventKind::LoadStep => {
                if t >= self.t_start {
                    self.p_step
                } else {
                    0.0
                }
            }
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.bus >= n {
            return Err(Error::InvalidScenario(format!(
                "event references missing bus {}",
                self.bus + 1
            )));
        }
        if self.t_start < 0.0 {
            return Err(Error::InvalidScenario("event t_start must be >= 0".into()));
        }
        if self.kind == EventKind::LoadRamp && self.duration <= 0.0 {
            return Err(Error::InvalidScenario("ramp duration must be positive".into()));
        }
        Ok(())
    }
}

/// Dynamic parameters of one machine after initialization.
#[derive(Debug, Clone)]
pub struct MachineDynState {
    pub bus: usize,
    pub delta: f64,
    pub omega_g: f64,
    pub e_internal: f64,
    pub p_mech: f64,
    pub damping: f64,
    pub inertia_m: f64,
    pub x_internal: f64,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Machine damping in pu, applied uniformly.
    pub damping: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: 0.005,
            t_end: 40.0,
            damping: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffScheme {
    Central,
    Backward,
}

/// Time-indexed simulation output. Matrices have one row per sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub dt: f64,
    pub v: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub omega_g: DMatrix<f64>,
    pub omega_coi_true: Vec<f64>,
    /// Kinetic energy ½ Σ M ω² in pu·s, recorded per sample.
    pub kinetic_energy: Vec<f64>,
    pub machines: Vec<MachineDynState>,
    pub p_dot: Option<DMatrix<f64>>,
    pub q_dot: Option<DMatrix<f64>>,
    pub omega_coi_est_full: Option<Vec<f64>>,
    pub omega_coi_est_simplified: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn n_samples(&self) -> usize {
        self.t.len()
    }
}

/// Initializes classical machines from the solved operating point. Machine
/// electrical output at a bus is the net injection plus the local load;
/// multiple machines on one bus share it in proportion to their admittance.
fn init_machines(
    network: &Network,
    machines: &MachineSet,
    op: &OperatingPoint,
    damping: f64,
) -> Vec<MachineDynState> {
    let mut bus_y_total = vec![0.0f64; network.n_buses()];
    for m in &machines.machines {
        bus_y_total[m.bus] += 1.0 / m.x_internal;
    }
    machines
        .machines
        .iter()
        .map(|m| {
            let b = &network.buses[m.bus];
            let share = (1.0 / m.x_internal) / bus_y_total[m.bus];
            let s_gen = Complex64::new(
                (op.p[m.bus] + b.p_load) * share,
                (op.q[m.bus] + b.q_load) * share,
            );
            let v = Complex64::from_polar(op.v[m.bus], op.theta[m.bus]);
            let i_g = (s_gen / v).conj();
            let e = v + Complex64::new(0.0, m.x_internal) * i_g;
            let p_mech = (e * i_g.conj()).re;
            MachineDynState {
                bus: m.bus,
                delta: e.arg(),
                omega_g: 1.0,
                e_internal: e.norm(),
                p_mech,
                damping,
                inertia_m: m.inertia_m,
                x_internal: m.x_internal,
            }
        })
        .collect()
}

struct NetworkSolver {
    /// Base dynamic admittance: Y_bus + load admittances + machine internal.
    y_dyn: DMatrix<Complex64>,
    /// Event bus voltage magnitudes at the operating point (admittance base).
    v_ref_sq: Vec<f64>,
    events: Vec<Event>,
    machine_bus: Vec<usize>,
    machine_y: Vec<Complex64>,
    cache_key: Vec<Complex64>,
    cache_lu: Option<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl NetworkSolver {
    fn new(
        network: &Network,
        adm: &AdmittanceSet,
        machines: &[MachineDynState],
        op: &OperatingPoint,
        events: &[Event],
    ) -> Self {
        let n = network.n_buses();
        let mut y_dyn = adm.y_bus.clone();
        for b in &network.buses {
            if b.p_load != 0.0 || b.q_load != 0.0 {
                let v2 = op.v[b.id] * op.v[b.id];
                y_dyn[(b.id, b.id)] += Complex64::new(b.p_load / v2, -b.q_load / v2);
            }
        }
        let machine_y: Vec<Complex64> = machines
            .iter()
            .map(|m| Complex64::new(1.0, 0.0) / Complex64::new(0.0, m.x_internal))
            .collect();
        for (m, y) in machines.iter().zip(&machine_y) {
            y_dyn[(m.bus, m.bus)] += y;
        }
        let v_ref_sq = (0..n).map(|i| op.v[i] * op.v[i]).collect();
        Self {
            y_dyn,
            v_ref_sq,
            events: events.to_vec(),
            machine_bus: machines.iter().map(|m| m.bus).collect(),
            machine_y,
            cache_key: vec![Complex64::new(f64::NAN, 0.0); events.len()],
            cache_lu: None,
        }
    }

    /// Solves the algebraic network at time `t` for machine EMFs `e∠δ`.
    fn solve(&mut self, t: f64, delta: &[f64], emag: &[f64]) -> Result<DVector<Complex64>> {
        let key: Vec<Complex64> = self
            .events
            .iter()
            .map(|ev| {
                let p = ev.active_power(t);
                Complex64::new(p, -ev.q_ratio * p) / self.v_ref_sq[ev.bus]
            })
            .collect();
        if self.cache_lu.is_none() || key != self.cache_key {
            let mut y = self.y_dyn.clone();
            for (ev, ya) in self.events.iter().zip(&key) {
                y[(ev.bus, ev.bus)] += ya;
            }
            self.cache_lu = Some(y.lu());
            self.cache_key = key;
        }
        let n = self.y_dyn.nrows();
        let mut i_src = DVector::<Complex64>::zeros(n);
        for ((&bus, &y), (&d, &e)) in self
            .machine_bus
            .iter()
            .zip(&self.machine_y)
            .zip(delta.iter().zip(emag))
        {
            i_src[bus] += Complex64::from_polar(e, d) * y;
        }
        self.cache_lu
            .as_ref()
            .unwrap()
            .solve(&i_src)
            .ok_or(Error::SingularMatrix {
                name: "Y_dyn",
                condition: f64::INFINITY,
                hint: None,
            })
    }
}

/// Machine electrical powers for a solved network state.
fn electrical_power(
    solver: &NetworkSolver,
    v: &DVector<Complex64>,
    delta: &[f64],
    emag: &[f64],
) -> Vec<f64> {
    solver
        .machine_bus
        .iter()
        .zip(&solver.machine_y)
        .zip(delta.iter().zip(emag))
        .map(|((&bus, &y), (&d, &e))| {
            let eph = Complex64::from_polar(e, d);
            let i = (eph - v[bus]) * y;
            (eph * i.conj()).re
        })
        .collect()
}

pub fn simulate(
    network: &Network,
    adm: &AdmittanceSet,
    machines: &MachineSet,
    op: &OperatingPoint,
    events: &[Event],
    options: &SimOptions,
) -> Result<Trajectory> {
    if machines.is_empty() {
        return Err(Error::InvalidCase("simulation needs machines".into()));
    }
    if options.dt <= 0.0 || options.dt > 0.010 + 1e-12 {
        return Err(Error::InvalidScenario(format!(
            "dt must be in (0, 10 ms]; got {} s",
            options.dt
        )));
    }
    for ev in events {
        ev.validate(network.n_buses())?;
    }

    let n = network.n_buses();
    let m = machines.len();
    let omega_s = network.omega_base();
    let dyn_machines = init_machines(network, machines, op, options.damping);
    let mut solver = NetworkSolver::new(network, adm, &dyn_machines, op, events);

    let emag: Vec<f64> = dyn_machines.iter().map(|d| d.e_internal).collect();
    let p_mech: Vec<f64> = dyn_machines.iter().map(|d| d.p_mech).collect();
    let inertia: Vec<f64> = dyn_machines.iter().map(|d| d.inertia_m).collect();
    let m_g = machines.normalized_inertias();

    let steps = (options.t_end / options.dt).round() as usize;
    let dt = options.dt;

    let mut delta: Vec<f64> = dyn_machines.iter().map(|d| d.delta).collect();
    let mut omega: Vec<f64> = vec![1.0; m];

    let mut t_out = Vec::with_capacity(steps + 1);
    let mut v_out = DMatrix::zeros(steps + 1, n);
    let mut th_out = DMatrix::zeros(steps + 1, n);
    let mut p_out = DMatrix::zeros(steps + 1, n);
    let mut q_out = DMatrix::zeros(steps + 1, n);
    let mut wg_out = DMatrix::zeros(steps + 1, m);
    let mut coi_out = Vec::with_capacity(steps + 1);
    let mut ke_out = Vec::with_capacity(steps + 1);

    // derivative of the swing states at (t, delta, omega)
    let deriv = |solver: &mut NetworkSolver,
                 t: f64,
                 delta: &[f64],
                 omega: &[f64]|
     -> Result<(Vec<f64>, Vec<f64>)> {
        let v = solver.solve(t, delta, &emag)?;
        let pe = electrical_power(solver, &v, delta, &emag);
        let ddelta: Vec<f64> = omega.iter().map(|&w| omega_s * (w - 1.0)).collect();
        let domega: Vec<f64> = (0..delta.len())
            .map(|k| {
                (p_mech[k] - pe[k] - dyn_machines[k].damping * (omega[k] - 1.0)) / inertia[k]
            })
            .collect();
        Ok((ddelta, domega))
    };

    let mut record = |s: usize,
                      t: f64,
                      solver: &mut NetworkSolver,
                      delta: &[f64],
                      omega: &[f64],
                      th_prev: Option<&[f64]>|
     -> Result<Vec<f64>> {
        let v = solver.solve(t, delta, &emag)?;
        let iv = &adm.y_bus * &v;
        let mut th_row = vec![0.0; n];
        for i in 0..n {
            let s_inj = v[i] * iv[i].conj();
            v_out[(s, i)] = v[i].norm();
            let mut th = v[i].arg();
            if let Some(prev) = th_prev {
                // unwrap against previous sample
                let two_pi = 2.0 * std::f64::consts::PI;
                let k = ((prev[i] - th) / two_pi).round();
                th += two_pi * k;
            }
            th_row[i] = th;
            th_out[(s, i)] = th;
            p_out[(s, i)] = s_inj.re;
            q_out[(s, i)] = s_inj.im;
        }
        for k in 0..m {
            wg_out[(s, k)] = omega[k];
        }
        t_out.push(t);
        coi_out.push(m_g.iter().zip(omega).map(|(w, o)| w * o).sum());
        ke_out.push(
            0.5 * inertia
                .iter()
                .zip(omega)
                .map(|(mi, o)| mi * o * o)
                .sum::<f64>(),
        );
        Ok(th_row)
    };

    let mut th_prev = record(0, 0.0, &mut solver, &delta, &omega, None)?;

    for s in 0..steps {
        let t = s as f64 * dt;
        let (d1, o1) = deriv(&mut solver, t, &delta, &omega)?;
        let delta_p: Vec<f64> = delta.iter().zip(&d1).map(|(x, dx)| x + dt * dx).collect();
        let omega_p: Vec<f64> = omega.iter().zip(&o1).map(|(x, dx)| x + dt * dx).collect();
        let (d2, o2) = deriv(&mut solver, t + dt, &delta_p, &omega_p)?;
        for k in 0..m {
            delta[k] += dt / 2.0 * (d1[k] + d2[k]);
            omega[k] += dt / 2.0 * (o1[k] + o2[k]);
        }
        if !delta.iter().all(|x| x.is_finite()) || !omega.iter().all(|x| x.is_finite()) {
            return Err(Error::StepRejected { t: t + dt });
        }
        th_prev = record(s + 1, t + dt, &mut solver, &delta, &omega, Some(&th_prev))?;
    }

    Ok(Trajectory {
        t: t_out,
        dt,
        v: v_out,
        theta: th_out,
        p: p_out,
        q: q_out,
        omega_g: wg_out,
        omega_coi_true: coi_out,
        kinetic_energy: ke_out,
        machines: dyn_machines,
        p_dot: None,
        q_dot: None,
        omega_coi_est_full: None,
        omega_coi_est_simplified: None,
    })
}

/// Numerical time derivatives of the recorded injections: central differences
/// in the interior, one-sided at the endpoints (or fully backward).
pub fn differentiate_injections(
    traj: &Trajectory,
    scheme: DiffScheme,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ns = traj.n_samples();
    if ns < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: ns });
    }
    Ok((
        differentiate(&traj.p, traj.dt, scheme),
        differentiate(&traj.q, traj.dt, scheme),
    ))
}

fn differentiate(x: &DMatrix<f64>, dt: f64, scheme: DiffScheme) -> DMatrix<f64> {
    let (ns, n) = x.shape();
    let mut d = DMatrix::zeros(ns, n);
    match scheme {
        DiffScheme::Central => {
            for j in 0..n {
                d[(0, j)] = (x[(1, j)] - x[(0, j)]) / dt;
                for s in 1..ns - 1 {
                    d[(s, j)] = (x[(s + 1, j)] - x[(s - 1, j)]) / (2.0 * dt);
                }
                d[(ns - 1, j)] = (x[(ns - 1, j)] - x[(ns - 2, j)]) / dt;
            }
        }
        DiffScheme::Backward => {
            for j in 0..n {
                d[(0, j)] = (x[(1, j)] - x[(0, j)]) / dt;
                for s in 1..ns {
                    d[(s, j)] = (x[(s, j)] - x[(s - 1, j)]) / dt;
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensMode {
    /// H, K frozen at the initial operating point.
    Frozen,
    /// H, K rebuilt from the recorded state at every sample.
    Reevaluated,
}

/// Error report of both estimators against the simulated CoI.
#[derive(Debug, Clone)]
pub struct EstimatorComparison {
    /// Raw errors vs the machine CoI (dominated by the unobservable
    /// synchronous drift whenever the event leaves a net imbalance).
    pub rms_full: f64,
    pub rms_simplified: f64,
    pub max_full: f64,
    pub max_simplified: f64,
    /// Errors vs the injection-observable projection of the simulated
    /// response: c-weighted bus frequency deviations with the uniform
    /// (drift) component removed.
    pub rms_full_observable: f64,
    pub rms_simplified_observable: f64,
    /// Most negative estimator deviation inside the event window and over
    /// the pre-event window (noise floor), for dip checks.
    pub dip_full: f64,
    pub dip_simplified: f64,
    pub dip_truth: f64,
    pub preevent_floor_full: f64,
    pub preevent_floor_simplified: f64,
    /// max |c^T ω_bus + α − ω_CoI(machines)|: the divider model error.
    pub divider_crosscheck_max: f64,
}

/// Context for estimator evaluation along a trajectory.
pub struct CompareInputs<'a> {
    pub network: &'a Network,
    pub admittance: &'a AdmittanceSet,
    pub machines: &'a MachineSet,
    pub weights: &'a CoIWeights,
    pub sens: &'a sensitivity::SensitivitySet,
    pub events: &'a [Event],
}

/// Evaluates both registered estimators along the trajectory, attaches the
/// estimate series to it, and reports errors vs the simulated CoI.
pub fn compare_estimators(
    traj: &mut Trajectory,
    inputs: &CompareInputs,
    sens_mode: SensMode,
) -> Result<EstimatorComparison> {
    let ns = traj.n_samples();
    let n = traj.v.ncols();
    let omega_s = inputs.network.omega_base();
    let (p_dot, q_dot) = differentiate_injections(traj, DiffScheme::Central)?;

    let full = crate::estimator::FullComplexFrequency::from_sensitivities(
        inputs.sens,
        inputs.weights,
        omega_s,
    );
    let simp = crate::estimator::SimplifiedSusceptance::from_admittance(
        inputs.admittance,
        Some(inputs.machines),
        inputs.weights,
        omega_s,
    )?;

    let mut est_full = vec![0.0; ns];
    let mut est_simp = vec![0.0; ns];
    for s in 0..ns {
        let pd = DVector::from_fn(n, |i, _| p_dot[(s, i)]);
        let qd = DVector::from_fn(n, |i, _| q_dot[(s, i)]);
        est_simp[s] = simp.deviation(&pd, &qd)?;
        est_full[s] = match sens_mode {
            SensMode::Frozen => full.deviation(&pd, &qd)?,
            SensMode::Reevaluated => {
                let op_s = OperatingPoint {
                    v: DVector::from_fn(n, |i, _| traj.v[(s, i)]),
                    theta: DVector::from_fn(n, |i, _| traj.theta[(s, i)]),
                    p: DVector::from_fn(n, |i, _| traj.p[(s, i)]),
                    q: DVector::from_fn(n, |i, _| traj.q[(s, i)]),
                    iterations: 0,
                    max_mismatch: 0.0,
                };
                let flow = sensitivity::flow_matrices(&op_s, inputs.admittance);
                let sens_s = sensitivity::build_sensitivities(&flow, &op_s)?;
                crate::coi::coi_deviation(&sens_s, inputs.weights, &pd, &qd, omega_s)?
            }
        };
    }

    // bus frequencies from angle differentiation (truth trace), lightly
    // smoothed, for the divider cross-check and the observable projection
    let th_dot = smoothed_derivative(&traj.theta, traj.dt);
    let mut divider_max = 0.0f64;
    let mut obs_target = vec![0.0; ns];
    for s in 0..ns {
        let mut coi_div = inputs.weights.alpha;
        let mut mean_dev = 0.0;
        for i in 0..n {
            let w_dev = th_dot[(s, i)] / omega_s;
            coi_div += inputs.weights.c[i] * (1.0 + w_dev);
            mean_dev += w_dev;
        }
        mean_dev /= n as f64;
        divider_max = divider_max.max((coi_div - traj.omega_coi_true[s]).abs());
        let mut t = 0.0;
        for i in 0..n {
            t += inputs.weights.c[i] * (th_dot[(s, i)] / omega_s - mean_dev);
        }
        obs_target[s] = t;
    }

    let rms = |err: &dyn Fn(usize) -> f64| -> (f64, f64) {
        let mut sum = 0.0;
        let mut mx = 0.0f64;
        for s in 0..ns {
            let e = err(s);
            sum += e * e;
            mx = mx.max(e.abs());
        }
        ((sum / ns as f64).sqrt(), mx)
    };

    let truth_dev = |s: usize| traj.omega_coi_true[s] - 1.0;
    let (rms_full, max_full) = rms(&|s| est_full[s] - truth_dev(s));
    let (rms_simplified, max_simplified) = rms(&|s| est_simp[s] - truth_dev(s));
    let (rms_full_observable, _) = rms(&|s| est_full[s] - obs_target[s]);
    let (rms_simplified_observable, _) = rms(&|s| est_simp[s] - obs_target[s]);

    // dip metrics over the event window
    let (t0, t1) = event_window(inputs.events, traj.t.last().copied().unwrap_or(0.0));
    let mut dip_full = f64::INFINITY;
    let mut dip_simp = f64::INFINITY;
    let mut dip_truth = f64::INFINITY;
    let mut floor_full = 0.0f64;
    let mut floor_simp = 0.0f64;
    for s in 0..ns {
        let t = traj.t[s];
        if t >= t0 && t <= t1 {
            dip_full = dip_full.min(est_full[s]);
            dip_simp = dip_simp.min(est_simp[s]);
            dip_truth = dip_truth.min(truth_dev(s));
        } else if t < t0 {
            floor_full = floor_full.max(est_full[s].abs());
            floor_simp = floor_simp.max(est_simp[s].abs());
        }
    }

    traj.p_dot = Some(p_dot);
    traj.q_dot = Some(q_dot);
    traj.omega_coi_est_full = Some(est_full);
    traj.omega_coi_est_simplified = Some(est_simp);

    Ok(EstimatorComparison {
        rms_full,
        rms_simplified,
        max_full,
        max_simplified,
        rms_full_observable,
        rms_simplified_observable,
        dip_full,
        dip_simplified: dip_simp,
        dip_truth,
        preevent_floor_full: floor_full,
        preevent_floor_simplified: floor_simp,
        divider_crosscheck_max: divider_max,
    })
}

fn event_window(events: &[Event], t_end: f64) -> (f64, f64) {
    if events.is_empty() {
        return (0.0, t_end);
    }
    let t0 = events.iter().map(|e| e.t_start).fold(f64::INFINITY, f64::min);
    let t1 = events
        .iter()
        .map(|e| match e.kind {
            EventKind::LoadRamp => e.t_start + e.duration,
            EventKind::LoadStep => t_end,
        })
        .fold(0.0f64, f64::max);
    (t0, t1.min(t_end))
}

/// Central difference followed by a 5-point moving average.
fn smoothed_derivative(x: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let raw = differentiate(x, dt, DiffScheme::Central);
    let (ns, n) = raw.shape();
    let mut out = raw.clone();
    for j in 0..n {
        for s in 2..ns.saturating_sub(2) {
            out[(s, j)] = (raw[(s - 2, j)]
                + raw[(s - 1, j)]
                + raw[(s, j)]
                + raw[(s + 1, j)]
                + raw[(s + 2, j)])
                / 5.0;
        }
    }
    out
}
