//! freqflux: command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 bad input, 4 numerical failure
//! (singular matrices, no convergence), 5 output I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use freqflux_core::coi;
use freqflux_core::diagnostics::{self, SubnetSpec};
use freqflux_core::dynsim::{self, DiffScheme, Event, EventKind, SensMode, SimOptions};
use freqflux_core::error::Error as CoreError;
use freqflux_core::estimator::{self, EstimatorContext};
use freqflux_core::io::{read_sample_csv, write_atomic};
use freqflux_core::netmodel::{self, AdmittanceSet, MachineSet, Network};
use freqflux_core::powerflow::{self, PfOptions};
use freqflux_core::sensitivity;
use freqflux_core::stats::StatsReport;
use freqflux_core::stochastic::{MonteCarloOptions, StochScenario};

#[derive(Parser)]
#[command(name = "freqflux", version, about = "Power-fluctuation frequency-quality toolkit")]
struct Cli {
    /// Cap Monte-Carlo worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the scenario base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow and emit bus,v,theta_deg,p,q.
    SolvePf(CaseArg),
    /// Emit the frequency sensitivity matrices H and K with conditioning metadata.
    Sensitivities {
        #[command(flatten)]
        case: CaseArg,
        /// Use the network-only (IEC-60909) simplified construction.
        #[arg(long)]
        simplified: bool,
        /// Anchor the phase reference to the machine EMFs (F inverts
        /// outright instead of on the observable quotient).
        #[arg(long)]
        anchored: bool,
    },
    /// Emit the CoI weighting vector c and offset alpha.
    CoiWeights(CaseArg),
    /// Time-domain simulation with estimator comparison.
    Simulate {
        #[command(flatten)]
        case: CaseArg,
        /// Event spec: ramp:bus=4,rate=0.1,t0=10,dur=10[,qratio=0]
        /// or step:bus=4,p=0.1,t0=10[,qratio=0]. Repeatable.
        #[arg(long = "event")]
        events: Vec<String>,
        #[arg(long, default_value_t = 0.005)]
        dt: f64,
        #[arg(long, default_value_t = 40.0)]
        tend: f64,
        #[arg(long, default_value_t = 2.0)]
        damping: f64,
        #[arg(long, value_enum, default_value_t = SensModeArg::Frozen)]
        sens_mode: SensModeArg,
        #[arg(long, value_enum, default_value_t = SchemeArg::Central)]
        diff_scheme: SchemeArg,
    },
    /// Seeded Monte-Carlo ensemble from a scenario file.
    Montecarlo { scenario: PathBuf },
    /// Lindeberg/dominance CLT diagnostics from a scenario file.
    CltCheck { scenario: PathBuf },
    /// Distribution summary of a one-column CSV sample.
    Stats { sample: PathBuf },
    /// Run a self-describing scenario file (mode field selects the action).
    Run { scenario: PathBuf },
}

#[derive(Args)]
struct CaseArg {
    /// Case file (JSON).
    case: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SensModeArg {
    Frozen,
    Reevaluated,
}

impl From<SensModeArg> for SensMode {
    fn from(v: SensModeArg) -> Self {
        match v {
            SensModeArg::Frozen => SensMode::Frozen,
            SensModeArg::Reevaluated => SensMode::Reevaluated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Central,
    Backward,
}

impl From<SchemeArg> for DiffScheme {
    fn from(v: SchemeArg) -> Self {
        match v {
            SchemeArg::Central => DiffScheme::Central,
            SchemeArg::Backward => DiffScheme::Backward,
        }
    }
}

enum Failure {
    Input(String),
    Numerical(String),
    Output(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 3,
            Failure::Numerical(_) => 4,
            Failure::Output(_) => 5,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Numerical(m) | Failure::Output(m) => m,
        }
    }
}

fn classify(e: CoreError) -> Failure {
    if e.is_numerical() {
        Failure::Numerical(e.to_string())
    } else {
        Failure::Input(e.to_string())
    }
}

fn write_out(path: &Path, content: &str) -> Result<(), Failure> {
    write_atomic(path, content.as_bytes())
        .map_err(|e| Failure::Output(format!("writing {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure if a pool was already installed
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Failure::Output(format!("creating {}: {e}", cli.out_dir.display())))?;
    match &cli.command {
        Command::SolvePf(c) => cmd_solve_pf(&c.case, &cli.out_dir),
        Command::Sensitivities {
            case,
            simplified,
            anchored,
        } => cmd_sensitivities(&case.case, *simplified, *anchored, &cli.out_dir),
        Command::CoiWeights(c) => cmd_coi_weights(&c.case, &cli.out_dir),
        Command::Simulate {
            case,
            events,
            dt,
            tend,
            damping,
            sens_mode,
            diff_scheme,
        } => cmd_simulate(
            &case.case,
            events,
            *dt,
            *tend,
            *damping,
            (*sens_mode).into(),
            (*diff_scheme).into(),
            &cli.out_dir,
        ),
        Command::Montecarlo { scenario } => cmd_montecarlo(scenario, cli.seed, &cli.out_dir),
        Command::CltCheck { scenario } => cmd_clt_check(scenario, cli.seed, &cli.out_dir),
        Command::Stats { sample } => cmd_stats(sample, &cli.out_dir),
        Command::Run { scenario } => cmd_run(scenario, cli),
    }
}

struct LoadedCase {
    network: Network,
    machines: MachineSet,
    admittance: AdmittanceSet,
}

fn load(case: &Path) -> Result<LoadedCase, Failure> {
    let (network, machines) = netmodel::load_case(case)
        .map_err(|e| Failure::Input(format!("{}: {e}", case.display())))?;
    let admittance = netmodel::assemble_admittance(&network).map_err(classify)?;
    Ok(LoadedCase {
        network,
        machines,
        admittance,
    })
}

fn solve(lc: &LoadedCase) -> Result<powerflow::OperatingPoint, Failure> {
    powerflow::solve_power_flow(&lc.network, &lc.admittance, &PfOptions::default())
        .map_err(classify)
}

fn cmd_solve_pf(case: &Path, out_dir: &Path) -> Result<(), Failure> {
    let lc = load(case)?;
    let op = solve(&lc)?;
    let mut csv = String::from("bus,v_pu,theta_deg,p_pu,q_pu\n");
    for i in 0..lc.network.n_buses() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            op.v[i],
            op.theta[i].to_degrees(),
            op.p[i],
            op.q[i]
        ));
    }
    let out = out_dir.join("pf.csv");
    write_out(&out, &csv)?;
    println!(
        "solved in {} iterations (max mismatch {:.3e} pu); wrote {}",
        op.iterations,
        op.max_mismatch,
        out.display()
    );
    Ok(())
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn cmd_sensitivities(
    case: &Path,
    simplified: bool,
    anchored: bool,
    out_dir: &Path,
) -> Result<(), Failure> {
    let lc = load(case)?;
    if simplified && anchored {
        return Err(Failure::Input(
            "--simplified and --anchored are mutually exclusive".into(),
        ));
    }
    if simplified {
        let simp = sensitivity::simplified_weights(&lc.admittance, Some(&lc.machines))
            .map_err(classify)?;
        write_out(&out_dir.join("sens_h.csv"), &matrix_csv(&simp.h))?;
        write_out(&out_dir.join("sens_k.csv"), &matrix_csv(&simp.k))?;
        let meta = format!(
            "quantity,value\nvariant,simplified\ncond_b_bus,{}\ng_b_ratio,{}\naugmented,{}\ng_negligible,{}\n",
            simp.cond_b, simp.g_b_ratio, simp.augmented, simp.g_negligible
        );
        write_out(&out_dir.join("sens_meta.csv"), &meta)?;
        println!(
            "simplified sensitivities written (cond(B_bus) = {:.3e}{})",
            simp.cond_b,
            if simp.augmented { ", machine-augmented" } else { "" }
        );
    } else {
        let op = solve(&lc)?;
        let flow = sensitivity::flow_matrices(&op, &lc.admittance);
        let sens = if anchored {
            sensitivity::build_sensitivities_anchored(&op, &lc.admittance, &lc.machines)
                .map_err(classify)?
        } else {
            sensitivity::build_sensitivities(&flow, &op).map_err(|e| {
                let f = classify(e);
                if let Failure::Numerical(m) = &f {
                    Failure::Numerical(format!("{m} (try --simplified)"))
                } else {
                    f
                }
            })?
        };
        write_out(&out_dir.join("sens_h.csv"), &matrix_csv(&sens.h))?;
        write_out(&out_dir.join("sens_k.csv"), &matrix_csv(&sens.k))?;
        let meta = format!(
            "quantity,value\nvariant,{}\ncond_c,{}\ncond_f_gauged,{}\nresidual_c,{}\nresidual_fh,{}\n",
            if anchored { "full_anchored" } else { "full" },
            sens.cond_c,
            sens.cond_f,
            sens.residual_c,
            sens.residual_fh
        );
        write_out(&out_dir.join("sens_meta.csv"), &meta)?;
        println!(
            "full sensitivities written (cond(C) = {:.3e}, cond(F) = {:.3e})",
            sens.cond_c, sens.cond_f
        );
    }
    Ok(())
}

fn cmd_coi_weights(case: &Path, out_dir: &Path) -> Result<(), Failure> {
    let lc = load(case)?;
    let div = coi::build_divider(&lc.admittance, &lc.machines).map_err(classify)?;
    let w = coi::coi_weights(&div, &lc.machines);
    let mut csv = String::from("bus,c\n");
    for i in 0..w.c.len() {
        csv.push_str(&format!("{},{}\n", i + 1, w.c[i]));
    }
    csv.push_str(&format!("alpha,{}\n", w.alpha));
    let out = out_dir.join("coi_weights.csv");
    write_out(&out, &csv)?;
    println!(
        "c^T 1 + alpha = {} (alpha = {:.3e}); wrote {}",
        w.c.sum() + w.alpha,
        w.alpha,
        out.display()
    );
    Ok(())
}

fn parse_event(spec: &str, n_buses: usize) -> Result<Event, Failure> {
    let (kind_str, rest) = spec.split_once(':').ok_or_else(|| {
        Failure::Input(format!("bad event '{spec}' (expected kind:key=value,...)"))
    })?;
    let kind = match kind_str {
        "ramp" => EventKind::LoadRamp,
        "step" => EventKind::LoadStep,
        other => return Err(Failure::Input(format!("unknown event kind '{other}'"))),
    };
    let mut bus = None;
    let mut rate = 0.0;
    let mut p_step = 0.0;
    let mut t0 = 0.0;
    let mut dur = 0.0;
    let mut qratio = 0.0;
    for kv in rest.split(',') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("bad event field '{kv}'")))?;
        let val: f64 = v
            .parse()
            .map_err(|_| Failure::Input(format!("bad number in '{kv}'")))?;
        match k {
            "bus" => bus = Some(val as usize),
            "rate" => rate = val,
            "p" => p_step = val,
            "t0" => t0 = val,
            "dur" => dur = val,
            "qratio" => qratio = val,
            other => return Err(Failure::Input(format!("unknown event field '{other}'"))),
        }
    }
    let bus = bus.ok_or_else(|| Failure::Input("event needs bus=".into()))?;
    if bus == 0 || bus > n_buses {
        return Err(Failure::Input(format!("event bus {bus} not in case")));
    }
    let ev = Event {
        kind,
        bus: bus - 1,
        p_rate: rate,
        p_step,
        q_ratio: qratio,
        t_start: t0,
        duration: dur,
    };
    ev.validate(n_buses).map_err(classify)?;
    Ok(ev)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    case: &Path,
    event_specs: &[String],
    dt: f64,
    tend: f64,
    damping: f64,
    sens_mode: SensMode,
    _scheme: DiffScheme,
    out_dir: &Path,
) -> Result<(), Failure> {
    let lc = load(case)?;
    let events: Vec<Event> = event_specs
        .iter()
        .map(|s| parse_event(s, lc.network.n_buses()))
        .collect::<Result<_, _>>()?;
    let op = solve(&lc)?;
    let mut traj = dynsim::simulate(
        &lc.network,
        &lc.admittance,
        &lc.machines,
        &op,
        &events,
        &SimOptions {
            dt,
            t_end: tend,
            damping,
        },
    )
    .map_err(classify)?;

    let flow = sensitivity::flow_matrices(&op, &lc.admittance);
    let sens = sensitivity::build_sensitivities(&flow, &op).map_err(classify)?;
    let div = coi::build_divider(&lc.admittance, &lc.machines).map_err(classify)?;
    let weights = coi::coi_weights(&div, &lc.machines);
    let cmp = dynsim::compare_estimators(
        &mut traj,
        &dynsim::CompareInputs {
            network: &lc.network,
            admittance: &lc.admittance,
            machines: &lc.machines,
            weights: &weights,
            sens: &sens,
            events: &events,
        },
        sens_mode,
    )
    .map_err(classify)?;

    write_out(&out_dir.join("trajectory.csv"), &trajectory_csv(&traj))?;
    let report = format!(
        "metric,full,simplified\nrms_vs_coi_pu,{},{}\nmax_vs_coi_pu,{},{}\nrms_vs_observable_pu,{},{}\ndip_pu,{},{}\n",
        cmp.rms_full,
        cmp.rms_simplified,
        cmp.max_full,
        cmp.max_simplified,
        cmp.rms_full_observable,
        cmp.rms_simplified_observable,
        cmp.dip_full,
        cmp.dip_simplified
    );
    write_out(&out_dir.join("sim_report.csv"), &report)?;
    println!(
        "simulated {} samples; divider cross-check {:.2e} pu",
        traj.n_samples(),
        cmp.divider_crosscheck_max
    );
    println!(
        "RMS vs simulated CoI: full {:.4e}, simplified {:.4e} (synchronous drift is unobservable from injections)",
        cmp.rms_full, cmp.rms_simplified
    );
    println!(
        "RMS vs observable response: full {:.4e}, simplified {:.4e}",
        cmp.rms_full_observable, cmp.rms_simplified_observable
    );
    Ok(())
}

fn trajectory_csv(traj: &dynsim::Trajectory) -> String {
    let ns = traj.n_samples();
    let n = traj.v.ncols();
    let m = traj.omega_g.ncols();
    let mut header = vec!["t_s".to_string()];
    for i in 0..n {
        header.push(format!("v{}_pu", i + 1));
    }
    for i in 0..n {
        header.push(format!("theta{}_rad", i + 1));
    }
    for i in 0..n {
        header.push(format!("p{}_pu", i + 1));
    }
    for i in 0..n {
        header.push(format!("q{}_pu", i + 1));
    }
    for k in 0..m {
        header.push(format!("omega_g{}_pu", k + 1));
    }
    header.push("omega_coi_pu".into());
    let with_est = traj.omega_coi_est_full.is_some();
    if with_est {
        header.push("omega_coi_est_full_dev_pu".into());
        header.push("omega_coi_est_simplified_dev_pu".into());
    }
    header.push("kinetic_energy_pu_s".into());
    let mut out = header.join(",");
    out.push('\n');
    for s in 0..ns {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(format!("{}", traj.t[s]));
        for i in 0..n {
            row.push(format!("{}", traj.v[(s, i)]));
        }
        for i in 0..n {
            row.push(format!("{}", traj.theta[(s, i)]));
        }
        for i in 0..n {
            row.push(format!("{}", traj.p[(s, i)]));
        }
        for i in 0..n {
            row.push(format!("{}", traj.q[(s, i)]));
        }
        for k in 0..m {
            row.push(format!("{}", traj.omega_g[(s, k)]));
        }
        row.push(format!("{}", traj.omega_coi_true[s]));
        if let (Some(f), Some(g)) = (&traj.omega_coi_est_full, &traj.omega_coi_est_simplified) {
            row.push(format!("{}", f[s]));
            row.push(format!("{}", g[s]));
        }
        row.push(format!("{}", traj.kinetic_energy[s]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Loads a stochastic scenario, resolving the case path against the scenario
/// file's directory.
fn load_scenario(
    path: &Path,
    seed_override: Option<u64>,
) -> Result<(StochScenario, PathBuf), Failure> {
    let mut sc = StochScenario::load(path)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed_override {
        sc.base_seed = s;
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let case_path = dir.join(&sc.case);
    Ok((sc, case_path))
}

fn build_estimator<'a>(
    name: &str,
    lc: &'a LoadedCase,
    sens: Option<&'a sensitivity::SensitivitySet>,
    weights: &'a coi::CoIWeights,
) -> Result<Box<dyn estimator::CoiEstimator>, Failure> {
    estimator::build(
        name,
        &EstimatorContext {
            admittance: &lc.admittance,
            machines: &lc.machines,
            sensitivities: sens,
            weights,
            omega_base: lc.network.omega_base(),
        },
    )
    .map_err(classify)
}

fn cmd_montecarlo(scenario: &Path, seed: Option<u64>, out_dir: &Path) -> Result<(), Failure> {
    let (sc, case_path) = load_scenario(scenario, seed)?;
    let lc = load(&case_path)?;
    let models = sc.models(lc.network.n_buses()).map_err(classify)?;
    let op = solve(&lc)?;
    let flow = sensitivity::flow_matrices(&op, &lc.admittance);
    let sens = sensitivity::build_sensitivities(&flow, &op).map_err(classify)?;
    let div = coi::build_divider(&lc.admittance, &lc.machines).map_err(classify)?;
    let weights = coi::coi_weights(&div, &lc.machines);
    let est = build_estimator(&sc.propagation, &lc, Some(&sens), &weights)?;

    let ens = freqflux_core::stochastic::monte_carlo(
        est.as_ref(),
        &models,
        &MonteCarloOptions {
            dt: sc.dt,
            n_steps: sc.n_steps(),
            n_paths: sc.n_paths,
            base_seed: sc.base_seed,
            level_stride: sc.level_stride,
            store_first_path: true,
        },
    )
    .map_err(classify)?;

    let mut paths = String::from(
        "path,mean_domega_pu,var_domega_pu2,min_domega_pu,max_domega_pu,final_omega_dev_pu\n",
    );
    for s in &ens.summaries {
        paths.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.path, s.mean_domega, s.var_domega, s.min_domega, s.max_domega, s.final_omega_dev
        ));
    }
    write_out(&out_dir.join("mc_paths.csv"), &paths)?;

    let mut pooled = String::from("domega_coi_pu\n");
    for x in &ens.pooled_increments {
        pooled.push_str(&format!("{x}\n"));
    }
    write_out(&out_dir.join("mc_pooled_domega.csv"), &pooled)?;

    let mut lv = String::from("omega_coi_dev_pu\n");
    for x in &ens.pooled_levels {
        lv.push_str(&format!("{x}\n"));
    }
    write_out(&out_dir.join("mc_pooled_levels.csv"), &lv)?;

    let mi = &ens.moments_increments;
    let ml = &ens.moments_levels;
    let moments = format!(
        "series,n,mean,variance,skewness,excess_kurtosis\nincrements,{},{},{},{},{}\nlevels,{},{},{},{},{}\n",
        mi.count(),
        mi.mean(),
        mi.variance(),
        mi.skewness(),
        mi.excess_kurtosis(),
        ml.count(),
        ml.mean(),
        ml.variance(),
        ml.skewness(),
        ml.excess_kurtosis(),
    );
    write_out(&out_dir.join("mc_moments.csv"), &moments)?;
    println!(
        "{} paths × {} steps ({}): dω variance {:.3e}, level skewness {:.3}",
        sc.n_paths,
        sc.n_steps(),
        est.name(),
        mi.variance(),
        ml.skewness()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct CltScenario {
    case: String,
    #[serde(default)]
    noise: Vec<freqflux_core::stochastic::NoiseSpecFile>,
    #[serde(default)]
    subnet: Option<SubnetSpec>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    t_end: Option<f64>,
    #[serde(default)]
    n_paths: Option<usize>,
    #[serde(default)]
    base_seed: Option<u64>,
    #[serde(default = "default_propagation")]
    propagation: String,
    #[serde(default = "default_eps")]
    epsilon: f64,
}

fn default_propagation() -> String {
    "full".into()
}
fn default_eps() -> f64 {
    0.1
}

fn stats_csv(r: &StatsReport) -> String {
    format!(
        "quantity,value\nn,{}\nmean,{}\nvariance,{}\nskewness,{}\nexcess_kurtosis,{}\njarque_bera,{}\njarque_bera_p,{}\nks_stat,{}\nks_p,{}\n",
        r.n,
        r.mean,
        r.variance,
        r.skewness,
        r.excess_kurtosis,
        r.jarque_bera,
        r.jarque_bera_p,
        r.ks_stat,
        r.ks_p
    )
}

fn qq_csv(r: &StatsReport) -> String {
    let mut s = String::from("theoretical_quantile,empirical_quantile\n");
    for (a, b) in &r.qq {
        s.push_str(&format!("{a},{b}\n"));
    }
    s
}

fn lindeberg_csv(l: &diagnostics::LindebergReport) -> String {
    format!(
        "quantity,value\nratio,{}\npass,{}\nthreshold,{}\nepsilon,{}\ntotal_std,{}\nn_sources,{}\n",
        l.ratio, l.pass, l.threshold, l.epsilon, l.total_std, l.n_sources
    )
}

fn dominance_csv(rows: &[diagnostics::DominanceRow]) -> String {
    let mut s = String::from("label,bus,weight,increment_variance_pu2,variance_share,skew_sign\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.bus + 1,
            r.weight,
            r.increment_variance,
            r.variance_share,
            r.skew_sign
        ));
    }
    s
}

fn cmd_clt_check(scenario: &Path, seed: Option<u64>, out_dir: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(scenario)
        .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    let mut sc: CltScenario = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    if let Some(s) = seed {
        sc.base_seed = Some(s);
        if let Some(sub) = &mut sc.subnet {
            sub.base_seed = s;
        }
    }
    let dir = scenario.parent().unwrap_or(Path::new("."));
    let lc = load(&dir.join(&sc.case))?;

    if let Some(sub) = &sc.subnet {
        let rep =
            diagnostics::aggregation_experiment(&lc.network, &lc.machines, sub).map_err(classify)?;
        write_out(
            &out_dir.join("clt_uniform_stats.csv"),
            &stats_csv(&rep.uniform.stats),
        )?;
        write_out(
            &out_dir.join("clt_uniform_lindeberg.csv"),
            &lindeberg_csv(&rep.uniform.lindeberg),
        )?;
        write_out(
            &out_dir.join("clt_uniform_dominance.csv"),
            &dominance_csv(&rep.uniform.top_contributions),
        )?;
        println!(
            "subnet weights |w| in [{:.3e}, {:.3e}] over {} buses (pf {} iters)",
            rep.weight_min, rep.weight_max, rep.n_subnet_buses, rep.pf_iterations
        );
        println!(
            "uniform: {} sources, Lindeberg ratio {:.3e} ({}), JB p {:.3}",
            rep.uniform.n_sources,
            rep.uniform.lindeberg.ratio,
            if rep.uniform.lindeberg.pass {
                "pass"
            } else {
                "fail"
            },
            rep.uniform.stats.jarque_bera_p
        );
        if let Some(dom) = &rep.dominant {
            write_out(&out_dir.join("clt_dominant_stats.csv"), &stats_csv(&dom.stats))?;
            write_out(
                &out_dir.join("clt_dominant_lindeberg.csv"),
                &lindeberg_csv(&dom.lindeberg),
            )?;
            write_out(
                &out_dir.join("clt_dominant_dominance.csv"),
                &dominance_csv(&dom.top_contributions),
            )?;
            println!(
                "dominant: Lindeberg ratio {:.3} ({}), excess kurtosis {:.3}",
                dom.lindeberg.ratio,
                if dom.lindeberg.pass { "pass" } else { "fail" },
                dom.stats.excess_kurtosis
            );
        }
        return Ok(());
    }

    // plain scenario: pilot ensemble over the declared noise models
    let (dt, t_end, n_paths, base_seed) = match (sc.dt, sc.t_end, sc.n_paths, sc.base_seed) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(Failure::Input(
                "clt-check scenario needs dt, t_end, n_paths, base_seed (or a subnet block)"
                    .into(),
            ))
        }
    };
    if sc.noise.is_empty() {
        return Err(Failure::Input("clt-check scenario has no noise models".into()));
    }
    let mut models = Vec::with_capacity(sc.noise.len());
    for s in &sc.noise {
        if s.bus == 0 {
            return Err(Failure::Input("bus ids are 1-based".into()));
        }
        let m = freqflux_core::stochastic::NoiseModel {
            bus: s.bus - 1,
            target: s.target,
            kind: s.kind.clone(),
            mirror: s.mirror,
        };
        m.validate(lc.network.n_buses()).map_err(classify)?;
        models.push(m);
    }
    let op = solve(&lc)?;
    let flow = sensitivity::flow_matrices(&op, &lc.admittance);
    let sens = sensitivity::build_sensitivities(&flow, &op).map_err(classify)?;
    let div = coi::build_divider(&lc.admittance, &lc.machines).map_err(classify)?;
    let weights = coi::coi_weights(&div, &lc.machines);
    let est = build_estimator(&sc.propagation, &lc, Some(&sens), &weights)?;

    let n_steps = (t_end / dt).round() as usize;
    let eff = freqflux_core::stochastic::effective_weights(est.as_ref(), &models);
    let mut per_source: Vec<Vec<f64>> = vec![Vec::new(); eff.len()];
    let mut pooled = Vec::with_capacity(n_paths * n_steps);
    for path in 0..n_paths as u64 {
        let sp =
            freqflux_core::stochastic::run_path(est.as_ref(), &models, dt, n_steps, base_seed, path)
                .map_err(classify)?;
        for (si, src) in sp.sources.iter().enumerate() {
            per_source[si].extend_from_slice(&src.series.increments);
        }
        pooled.extend_from_slice(&sp.d_omega_coi);
    }
    let sources: Vec<diagnostics::WeightedSource> = eff
        .iter()
        .zip(per_source)
        .map(|((bus, target, w), sample)| {
            let mean = sample.iter().sum::<f64>() / sample.len() as f64;
            let var =
                sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / sample.len() as f64;
            diagnostics::WeightedSource {
                label: format!(
                    "bus{}:{}",
                    bus + 1,
                    match target {
                        freqflux_core::stochastic::NoiseTarget::P => "p",
                        freqflux_core::stochastic::NoiseTarget::Q => "q",
                        freqflux_core::stochastic::NoiseTarget::Both => "both",
                    }
                ),
                weight: *w,
                variance: var,
                dist: diagnostics::SourceDistribution::Empirical(sample),
            }
        })
        .collect();
    let lind = diagnostics::lindeberg_ratio(&sources, sc.epsilon, diagnostics::LINDEBERG_THRESHOLD)
        .map_err(classify)?;
    let rows = diagnostics::dominance_analysis(est.as_ref(), &models, dt).map_err(classify)?;
    let stats = diagnostics::normality_report(&pooled).map_err(classify)?;
    write_out(&out_dir.join("clt_lindeberg.csv"), &lindeberg_csv(&lind))?;
    write_out(&out_dir.join("clt_dominance.csv"), &dominance_csv(&rows))?;
    write_out(&out_dir.join("clt_stats.csv"), &stats_csv(&stats))?;
    println!(
        "{} sources: Lindeberg ratio {:.3e} ({}), top share {:.1}%",
        sources.len(),
        lind.ratio,
        if lind.pass { "pass" } else { "fail" },
        rows.first().map(|r| r.variance_share * 100.0).unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_stats(sample: &Path, out_dir: &Path) -> Result<(), Failure> {
    let xs = read_sample_csv(sample)
        .map_err(|e| Failure::Input(format!("{}: {e}", sample.display())))?;
    let rep = freqflux_core::stats::normality_report(&xs).map_err(classify)?;
    write_out(&out_dir.join("stats_report.csv"), &stats_csv(&rep))?;
    write_out(&out_dir.join("stats_qq.csv"), &qq_csv(&rep))?;
    let mut hist = String::from("bin_left,bin_right,count\n");
    for (i, c) in rep.counts.iter().enumerate() {
        hist.push_str(&format!("{},{},{}\n", rep.bin_edges[i], rep.bin_edges[i + 1], c));
    }
    write_out(&out_dir.join("stats_hist.csv"), &hist)?;
    println!(
        "n = {}, skewness {:.4}, excess kurtosis {:.4}, JB p {:.4}, KS p {:.4}",
        rep.n, rep.skewness, rep.excess_kurtosis, rep.jarque_bera_p, rep.ks_p
    );
    Ok(())
}

#[derive(serde::Deserialize)]
struct RunScenario {
    mode: String,
    #[serde(default)]
    out_dir: Option<String>,
    #[serde(default)]
    case: Option<String>,
    #[serde(default)]
    events: Vec<String>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    t_end: Option<f64>,
    #[serde(default)]
    damping: Option<f64>,
    #[serde(default)]
    sens_mode: Option<String>,
    #[serde(default)]
    simplified: Option<bool>,
    #[serde(default)]
    sample: Option<String>,
}

fn cmd_run(scenario: &Path, cli: &Cli) -> Result<(), Failure> {
    let text = std::fs::read_to_string(scenario)
        .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    let rs: RunScenario = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", scenario.display())))?;
    let dir = scenario.parent().unwrap_or(Path::new("."));
    // a scenario may carry its own output directory (relative to itself)
    let out_dir = match &rs.out_dir {
        Some(d) => {
            let p = dir.join(d);
            std::fs::create_dir_all(&p)
                .map_err(|e| Failure::Output(format!("creating {}: {e}", p.display())))?;
            p
        }
        None => cli.out_dir.clone(),
    };
    let case = |c: &Option<String>| -> Result<PathBuf, Failure> {
        c.as_ref()
            .map(|c| dir.join(c))
            .ok_or_else(|| Failure::Input("scenario needs a case path".into()))
    };
    match rs.mode.as_str() {
        "pf" => cmd_solve_pf(&case(&rs.case)?, &out_dir),
        "sensitivities" => cmd_sensitivities(
            &case(&rs.case)?,
            rs.simplified.unwrap_or(false),
            false,
            &out_dir,
        ),
        "coi-weights" => cmd_coi_weights(&case(&rs.case)?, &out_dir),
        "simulate" => {
            let mode = match rs.sens_mode.as_deref() {
                None | Some("frozen") => SensMode::Frozen,
                Some("reevaluated") => SensMode::Reevaluated,
                Some(other) => return Err(Failure::Input(format!("unknown sens_mode '{other}'"))),
            };
            cmd_simulate(
                &case(&rs.case)?,
                &rs.events,
                rs.dt.unwrap_or(0.005),
                rs.t_end.unwrap_or(40.0),
                rs.damping.unwrap_or(2.0),
                mode,
                DiffScheme::Central,
                &out_dir,
            )
        }
        "montecarlo" => cmd_montecarlo(scenario, cli.seed, &out_dir),
        "clt-check" => cmd_clt_check(scenario, cli.seed, &out_dir),
        "stats" => {
            let sample = rs
                .sample
                .ok_or_else(|| Failure::Input("stats scenario needs 'sample'".into()))?;
            cmd_stats(&dir.join(sample), &out_dir)
        }
        other => Err(Failure::Input(format!("unknown mode '{other}'"))),
    }
}
