//! Property tests for the invariants that hold over whole input
//! families rather than single examples. Random structures are derived from
//! proptest-supplied seeds so the cases stay reproducible and shrinkable.

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use freqflux_core::coi;
use freqflux_core::diagnostics::{lindeberg_ratio, SourceDistribution, WeightedSource};
use freqflux_core::netmodel::{
    assemble_admittance, short_circuit_levels, Branch, Bus, BusKind, Machine, MachineSet, Network,
};
use freqflux_core::powerflow::{solve_power_flow, PfOptions};
use freqflux_core::sensitivity;
use freqflux_core::stats::{jarque_bera, Moments};
use freqflux_core::stochastic::euler_maruyama_ou;

fn pq_bus(id: usize) -> Bus {
    Bus {
        id,
        kind: if id == 0 { BusKind::Slack } else { BusKind::Pq },
        v_setpoint: 1.0,
        p_load: 0.0,
        q_load: 0.0,
        p_gen: 0.0,
        shunt_g: 0.0,
        shunt_b: 0.0,
    }
}

/// Small random connected network (tree plus extra edges) with machines.
fn random_net(seed: u64, reactive_only: bool) -> (Network, MachineSet) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = rng.random_range(3..9usize);
    let mut buses: Vec<Bus> = (0..n).map(pq_bus).collect();
    let mut branches = Vec::new();
    for i in 1..n {
        let parent = rng.random_range(0..i);
        branches.push(Branch {
            from_bus: parent,
            to_bus: i,
            r: if reactive_only {
                0.0
            } else {
                0.05 * rng.random::<f64>()
            },
            x: 0.08 + 0.4 * rng.random::<f64>(),
            b_charging: 0.05 * rng.random::<f64>(),
            tap: 1.0,
        });
    }
    for _ in 0..n / 2 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            branches.push(Branch {
                from_bus: a,
                to_bus: b,
                r: 0.0,
                x: 0.1 + 0.5 * rng.random::<f64>(),
                b_charging: 0.0,
                tap: 1.0,
            });
        }
    }
    if rng.random::<f64>() < 0.6 {
        buses[rng.random_range(0..n)].shunt_b = 0.15 * rng.random::<f64>();
    }
    let m = rng.random_range(1..=2usize);
    let machines = MachineSet::new(
        (0..m)
            .map(|k| Machine {
                bus: (k * (n - 1)) % n,
                inertia_m: 3.0 + 10.0 * rng.random::<f64>(),
                x_internal: 0.2 + 0.4 * rng.random::<f64>(),
            })
            .collect(),
    );
    (
        Network {
            buses,
            branches,
            base_mva: 100.0,
            f_nominal_hz: 50.0,
        },
        machines,
    )
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

fn permuted(net: &Network, mac: &MachineSet, p: &[usize]) -> (Network, MachineSet) {
    let mut buses: Vec<Bus> = net.buses.clone();
    for b in &mut buses {
        b.id = p[b.id];
    }
    buses.sort_by_key(|b| b.id);
    let branches = net
        .branches
        .iter()
        .map(|br| Branch {
            from_bus: p[br.from_bus],
            to_bus: p[br.to_bus],
            ..br.clone()
        })
        .collect();
    let machines = MachineSet::new(
        mac.machines
            .iter()
            .map(|m| Machine {
                bus: p[m.bus],
                ..m.clone()
            })
            .collect(),
    );
    (
        Network {
            buses,
            branches,
            base_mva: net.base_mva,
            f_nominal_hz: net.f_nominal_hz,
        },
        machines,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// SCL is invariant under bus relabeling.
    #[test]
    fn scl_permutation_equivariance(seed in 0u64..5000) {
        let (net, mac) = random_net(seed, false);
        let n = net.n_buses();
        let adm = assemble_admittance(&net).unwrap();
        let scl = short_circuit_levels(&adm, &mac).unwrap();
        let p = permutation(n, seed ^ 0xABCD);
        let (net2, mac2) = permuted(&net, &mac, &p);
        let adm2 = assemble_admittance(&net2).unwrap();
        let scl2 = short_circuit_levels(&adm2, &mac2).unwrap();
        for i in 0..n {
            prop_assert!((scl[i] - scl2[p[i]]).abs() < 1e-10 * scl[i].max(1.0));
        }
    }

    /// Adding a parallel (reactive) branch never weakens its terminal buses.
    #[test]
    fn parallel_branch_never_decreases_scl(seed in 0u64..5000, x_new in 0.05f64..0.8) {
        let (mut net, mac) = random_net(seed, true);
        let adm = assemble_admittance(&net).unwrap();
        let scl = short_circuit_levels(&adm, &mac).unwrap();
        let a = 0usize;
        let b = net.n_buses() - 1;
        net.branches.push(Branch {
            from_bus: a,
            to_bus: b,
            r: 0.0,
            x: x_new,
            b_charging: 0.0,
            tap: 1.0,
        });
        let adm2 = assemble_admittance(&net).unwrap();
        let scl2 = short_circuit_levels(&adm2, &mac).unwrap();
        prop_assert!(scl2[a] >= scl[a] - 1e-9);
        prop_assert!(scl2[b] >= scl[b] - 1e-9);
    }

    /// Row sums of Y_bus equal the total shunt admittance at each bus.
    #[test]
    fn ybus_row_sums_are_shunts(seed in 0u64..5000) {
        let (net, _) = random_net(seed, false);
        let adm = assemble_admittance(&net).unwrap();
        for i in 0..net.n_buses() {
            let mut shunt = num_complex::Complex64::new(net.buses[i].shunt_g, net.buses[i].shunt_b);
            for br in &net.branches {
                // line charging contributes b/2 at each (tap-corrected) end
                if br.from_bus == i {
                    shunt += num_complex::Complex64::new(0.0, br.b_charging / 2.0) / (br.tap * br.tap);
                    // off-nominal taps also leave a series remainder at the ends
                    let ys = num_complex::Complex64::new(1.0, 0.0)
                        / num_complex::Complex64::new(br.r, br.x);
                    shunt += ys * (1.0 - br.tap) / (br.tap * br.tap);
                }
                if br.to_bus == i {
                    shunt += num_complex::Complex64::new(0.0, br.b_charging / 2.0);
                    let ys = num_complex::Complex64::new(1.0, 0.0)
                        / num_complex::Complex64::new(br.r, br.x);
                    shunt += ys * (br.tap - 1.0) / br.tap;
                }
            }
            let row: num_complex::Complex64 = adm.y_bus.row(i).sum();
            prop_assert!((row - shunt).norm() < 1e-12);
        }
    }

    /// c^T 1 + alpha = 1 for every network/machine configuration.
    #[test]
    fn coi_nominal_fixed_point(seed in 0u64..5000) {
        let (net, mac) = random_net(seed, false);
        let adm = assemble_admittance(&net).unwrap();
        let div = coi::build_divider(&adm, &mac).unwrap();
        let w = coi::coi_weights(&div, &mac);
        prop_assert!((w.c.sum() + w.alpha - 1.0).abs() < 1e-10);
        // machine-speed recovery at nominal is exact
        let omega = DVector::from_element(net.n_buses(), 1.0);
        let wg = coi::machine_speeds_from_bus(&div, &omega).unwrap();
        prop_assert!((wg - DVector::from_element(mac.len(), 1.0)).amax() < 1e-12);
    }

    /// Forward map (injection-rate equations) then inversion recovers any
    /// gauge-projected draw at a solved operating point.
    #[test]
    fn sensitivity_round_trip_on_random_networks(seed in 0u64..2000) {
        let (mut net, _) = random_net(seed, false);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x77);
        for b in &mut net.buses {
            if b.kind == BusKind::Pq {
                b.p_load = 0.15 * rng.random::<f64>();
                b.q_load = 0.05 * rng.random::<f64>();
            }
        }
        let adm = assemble_admittance(&net).unwrap();
        let Ok(op) = solve_power_flow(&net, &adm, &PfOptions::default()) else {
            // a randomly drawn case may be infeasible; skip those
            return Ok(());
        };
        let flow = sensitivity::flow_matrices(&op, &adm);
        let Ok(sens) = sensitivity::build_sensitivities(&flow, &op) else {
            return Ok(());
        };
        let n = net.n_buses();
        for _ in 0..20 {
            let rho = DVector::from_fn(n, |_, _| 0.01 * rng.random::<f64>() - 0.005);
            let mut omega = DVector::from_fn(n, |_, _| 0.01 * rng.random::<f64>() - 0.005);
            let mean = omega.mean();
            omega.apply(|x| *x -= mean);
            let p_dot = &sens.a * &rho + &sens.b * &omega;
            let q_dot = &sens.c * &rho + &sens.d * &omega;
            let cf = sens.bus_frequencies(&p_dot, &q_dot).unwrap();
            prop_assert!((cf.omega - &omega).amax() < 1e-8);
            prop_assert!((cf.rho - &rho).amax() < 1e-8);
        }
    }

    /// Lindeberg ratio is invariant under common weight scaling and
    /// monotone non-increasing in epsilon.
    #[test]
    fn lindeberg_scale_and_epsilon(seed in 0u64..5000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = rng.random_range(3..40usize);
        let sources: Vec<WeightedSource> = (0..n)
            .map(|i| WeightedSource {
                label: format!("s{i}"),
                weight: 0.1 + rng.random::<f64>(),
                variance: 0.1 + rng.random::<f64>(),
                dist: SourceDistribution::Gaussian,
            })
            .collect();
        let scaled: Vec<WeightedSource> = sources
            .iter()
            .map(|s| WeightedSource {
                label: s.label.clone(),
                weight: s.weight * scale,
                variance: s.variance,
                dist: SourceDistribution::Gaussian,
            })
            .collect();
        let r1 = lindeberg_ratio(&sources, 0.2, 0.01).unwrap().ratio;
        let r2 = lindeberg_ratio(&scaled, 0.2, 0.01).unwrap().ratio;
        prop_assert!((r1 - r2).abs() <= 1e-9 * r1.max(1e-30));

        let mut prev = f64::INFINITY;
        for eps in [0.05, 0.1, 0.2, 0.5, 1.0] {
            let r = lindeberg_ratio(&sources, eps, 0.01).unwrap().ratio;
            prop_assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    /// The JB statistic is invariant under affine sample transforms.
    #[test]
    fn jarque_bera_affine_invariance(seed in 0u64..5000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>().powi(2)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let mut mx = Moments::new();
        mx.extend(xs.iter().copied());
        let mut my = Moments::new();
        my.extend(ys.iter().copied());
        let (jx, _) = jarque_bera(mx.count(), mx.skewness(), mx.excess_kurtosis());
        let (jy, _) = jarque_bera(my.count(), my.skewness(), my.excess_kurtosis());
        prop_assert!((jx - jy).abs() < 1e-7 * jx.max(1.0));
    }

    /// A fixed seed fully determines the OU path, for any valid parameters.
    #[test]
    fn ou_path_is_seed_deterministic(
        seed in 0u64..5000,
        lambda in 0.1f64..5.0,
        sigma in 0.0f64..0.5,
    ) {
        let dt = 0.01;
        prop_assume!(lambda * dt < 0.1);
        let mut r1 = ChaCha12Rng::seed_from_u64(seed);
        let mut r2 = ChaCha12Rng::seed_from_u64(seed);
        let s1 = euler_maruyama_ou(lambda, sigma, 0.0, None, dt, 200, &mut r1).unwrap();
        let s2 = euler_maruyama_ou(lambda, sigma, 0.0, None, dt, 200, &mut r2).unwrap();
        for (x, y) in s1.levels.iter().zip(&s2.levels) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
