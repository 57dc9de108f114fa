//! Newton-Raphson AC power flow in polar coordinates.
//!
//! Produces the operating point at which the frequency sensitivity matrices
//! are evaluated. Dense Jacobian with full re-factorization per iteration;
//! problem sizes here are desk scale (tens to ~10^3 buses).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::netmodel::{AdmittanceSet, BusKind, Network};

/// A solved steady state: voltages and net injections, all in pu.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub v: DVector<f64>,
    pub theta: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

#[derive(Debug, Clone)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Reuse the first factorized Jacobian for subsequent iterations.
    /// Slower convergence per iteration but much cheaper at large n when the
    /// solution stays close to the initial guess.
    pub reuse_jacobian: bool,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            reuse_jacobian: false,
        }
    }
}

/// Complex net injections `S = diag(V) conj(Y V)` at a given state.
fn complex_injections(
    adm: &AdmittanceSet,
    v: &DVector<f64>,
    theta: &DVector<f64>,
) -> DVector<Complex64> {
    let n = v.len();
    let vc = DVector::from_fn(n, |i, _| Complex64::from_polar(v[i], theta[i]));
    let iv = &adm.y_bus * &vc;
    DVector::from_fn(n, |i, _| vc[i] * iv[i].conj())
}

/// Net injections (p, q) evaluated through the per-branch flow-term sums.
/// This is the definitional route (row sums of the flow matrices); the solver
/// itself uses the equivalent complex form.
pub fn injections_from_state(
    adm: &AdmittanceSet,
    v: &DVector<f64>,
    theta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = v.len();
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for h in 0..n {
        let mut ph = 0.0;
        let mut qh = 0.0;
        for k in 0..n {
            let g = adm.g_bus[(h, k)];
            let b = adm.b_bus[(h, k)];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let thk = theta[h] - theta[k];
            let (s, c) = thk.sin_cos();
            let vv = v[h] * v[k];
            ph += vv * (g * c + b * s);
            qh += vv * (g * s - b * c);
        }
        p[h] = ph;
        q[h] = qh;
    }
    (p, q)
}

/// Full Newton power flow from a flat start (PQ magnitudes 1.0, angles 0,
/// PV/slack magnitudes at their setpoints).
pub fn solve_power_flow(
    network: &Network,
    adm: &AdmittanceSet,
    options: &PfOptions,
) -> Result<OperatingPoint> {
    let n = network.n_buses();
    let mut v = DVector::from_fn(n, |i, _| match network.buses[i].kind {
        BusKind::Pq => 1.0,
        _ => network.buses[i].v_setpoint,
    });
    let mut theta = DVector::zeros(n);

    // scheduled net injections
    let p_sched = DVector::from_fn(n, |i, _| network.buses[i].p_gen - network.buses[i].p_load);
    let q_sched = DVector::from_fn(n, |i, _| -network.buses[i].q_load);

    let pv: Vec<usize> = (0..n)
        .filter(|&i| network.buses[i].kind == BusKind::Pv)
        .collect();
    let pq: Vec<usize> = (0..n)
        .filter(|&i| network.buses[i].kind == BusKind::Pq)
        .collect();
    let nonslack: Vec<usize> = (0..n)
        .filter(|&i| network.buses[i].kind != BusKind::Slack)
        .collect();
    let nth = nonslack.len();
    let nv = pq.len();
    let dim = nth + nv;

    let mismatch = |v: &DVector<f64>, theta: &DVector<f64>| -> (DVector<f64>, f64) {
        let s = complex_injections(adm, v, theta);
        let mut f = DVector::zeros(dim);
        for (a, &i) in nonslack.iter().enumerate() {
            f[a] = p_sched[i] - s[i].re;
        }
        for (a, &i) in pq.iter().enumerate() {
            f[nth + a] = q_sched[i] - s[i].im;
        }
        let m = f.amax();
        (f, m)
    };

    let mut lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
    let (mut f, mut m) = mismatch(&v, &theta);
    let mut iterations = 0;
    while m > options.tol {
        if iterations >= options.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                mismatch: m,
            });
        }
        if lu.is_none() || !options.reuse_jacobian {
            let jac = jacobian(adm, &v, &theta, &nonslack, &pq);
            lu = Some(jac.lu());
        }
        let dx = lu
            .as_ref()
            .unwrap()
            .solve(&f)
            .ok_or(Error::SingularJacobian)?;
        if !dx.iter().all(|x| x.is_finite()) {
            return Err(Error::SingularJacobian);
        }
        for (a, &i) in nonslack.iter().enumerate() {
            theta[i] += dx[a];
        }
        for (a, &i) in pq.iter().enumerate() {
            v[i] += dx[nth + a];
        }
        iterations += 1;
        (f, m) = mismatch(&v, &theta);
        let _ = &pv; // PV magnitudes stay pinned at setpoints
    }

    let s = complex_injections(adm, &v, &theta);
    Ok(OperatingPoint {
        p: s.map(|z| z.re),
        q: s.map(|z| z.im),
        v,
        theta,
        iterations,
        max_mismatch: m,
    })
}

/// Polar power-flow Jacobian, rows [dP(nonslack); dQ(pq)], columns
/// [theta(nonslack); v(pq)], with the sign convention matching the mismatch
/// f = scheduled - injected, so the update is x += J^{-1} f.
fn jacobian(
    adm: &AdmittanceSet,
    v: &DVector<f64>,
    theta: &DVector<f64>,
    nonslack: &[usize],
    pq: &[usize],
) -> DMatrix<f64> {
    let s = complex_injections(adm, v, theta);
    let nth = nonslack.len();
    let nv = pq.len();
    let mut j = DMatrix::zeros(nth + nv, nth + nv);

    let term = |i: usize, k: usize| -> (f64, f64) {
        let g = adm.g_bus[(i, k)];
        let b = adm.b_bus[(i, k)];
        let thk = theta[i] - theta[k];
        let (sn, cs) = thk.sin_cos();
        (g * cs + b * sn, g * sn - b * cs) // (P-type, Q-type) terms
    };

    for (a, &i) in nonslack.iter().enumerate() {
        for (bcol, &k) in nonslack.iter().enumerate() {
            j[(a, bcol)] = if i == k {
                -s[i].im - adm.b_bus[(i, i)] * v[i] * v[i]
            } else {
                let (_, tq) = term(i, k);
                v[i] * v[k] * tq
            };
        }
        for (bcol, &k) in pq.iter().enumerate() {
            j[(a, nth + bcol)] = if i == k {
                s[i].re / v[i] + adm.g_bus[(i, i)] * v[i]
            } else {
                let (tp, _) = term(i, k);
                v[i] * tp
            };
        }
    }
    for (a, &i) in pq.iter().enumerate() {
        for (bcol, &k) in nonslack.iter().enumerate() {
            j[(nth + a, bcol)] = if i == k {
                s[i].re - adm.g_bus[(i, i)] * v[i] * v[i]
            } else {
                let (tp, _) = term(i, k);
                -v[i] * v[k] * tp
            };
        }
        for (bcol, &k) in pq.iter().enumerate() {
            j[(nth + a, nth + bcol)] = if i == k {
                s[i].im / v[i] - adm.b_bus[(i, i)] * v[i]
            } else {
                let (_, tq) = term(i, k);
                v[i] * tq
            };
        }
    }
    j
}

/// Total series and shunt losses evaluated branch by branch; used as an
/// independent check that the injection sum balances.
pub fn network_losses(network: &Network, v: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let mut loss = 0.0;
    for br in &network.branches {
        let t = if br.tap == 0.0 { 1.0 } else { br.tap };
        let vf = Complex64::from_polar(v[br.from_bus], theta[br.from_bus]) / t;
        let vt = Complex64::from_polar(v[br.to_bus], theta[br.to_bus]);
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let i = (vf - vt) * ys;
        loss += i.norm_sqr() * br.r;
    }
    for b in &network.buses {
        loss += v[b.id] * v[b.id] * b.shunt_g;
    }
    loss
}
