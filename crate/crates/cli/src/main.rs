use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use neural_mpc::analytics::{degree_distributions, export_graph, extract_graph, ExportFormat, DEFAULT_EDGE_THRESHOLD};
use neural_mpc::factorizer::{palm_factorize, FactorizationProblem, PalmInit};
use neural_mpc::harness::{
    matrix_from_json, matrix_to_json, reproduction_checks, run_experiment, write_outputs, ExperimentConfig,
    ALL_VARIANTS,
};
use neural_mpc::network::{FiringRateNetwork, NeuralDynamics};
use neural_mpc::perturber::{check_contraction, control_deviation_bound, prune_edges, vertex_lipschitz, BoundReport};
use neural_mpc::Vector;

#[derive(Parser)]
#[command(
    name = "neural-mpc",
    version,
    about = "Compile constrained linear MPC into firing-rate networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration (defaults filled in) as JSON.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the condensed QP and its network as JSON.
    Condense {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the closed-loop experiment and write CSV traces and a report.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated variant list overriding the config.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Reset the networks to zero before every sample.
        #[arg(long)]
        cold_start: bool,
    },
    /// Factor the stacked network read-out with sparsity budgets.
    Factorize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 144)]
        s_omega: usize,
        #[arg(long, default_value_t = 144)]
        s_psi: usize,
        /// identity, layer_swap or random:SEED
        #[arg(long, default_value = "layer_swap")]
        init: PalmInit,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Include the full residual history.
        #[arg(long)]
        history: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune the synaptic matrix, certify contraction and check the control
    /// deviation bound at the configured initial state.
    Perturb {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-4)]
        shift: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Graph export or degree statistics of a matrix stored as JSON rows.
    Analyze {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value = "json")]
        format: ExportFormat,
        #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
        threshold: f64,
        /// Print degree histograms instead of the graph.
        #[arg(long)]
        stats: bool,
    },
    /// Run every variant with the default setup and write traces, graphs and
    /// a checks report.
    ReproducePaper {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn condense_cmd(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let setup = cfg.setup()?;
    let (qp, net) = (&setup.qp, &setup.network);
    let value = json!({
        "qp": {
            "h": matrix_to_json(&qp.h),
            "s": matrix_to_json(&qp.s),
            "g_mat": matrix_to_json(&qp.g_mat),
            "t_mat": matrix_to_json(&qp.t_mat),
            "g_vec": qp.g_vec.as_slice(),
            "m": qp.m,
            "upsilon_rows": qp.upsilon_rows,
            "rows": qp.rows.iter().map(ToString::to_string).collect::<Vec<_>>(),
        },
        "network": {
            "gamma": matrix_to_json(&net.gamma),
            "m_map": matrix_to_json(&net.m_map),
            "bias": net.bias.as_slice(),
            "u_feedback": matrix_to_json(&net.u_feedback),
            "u_dual_map": matrix_to_json(&net.u_dual_map),
        },
        "p_term": matrix_to_json(&setup.problem.p_term),
        "lqr_gain": setup.lqr_gain.as_ref().map(matrix_to_json),
    });
    emit_json(out, &value)
}

fn simulate_cmd(
    config: Option<&Path>,
    out: Option<PathBuf>,
    variants: Option<Vec<String>>,
    cold_start: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(v) = variants {
        cfg.variants = v;
    }
    if cold_start {
        cfg.network.warm_start = false;
    }
    let Some(dir) = out.or_else(|| cfg.output_dir.clone().map(PathBuf::from)) else {
        bail!("no output directory: pass --out or set output_dir in the config");
    };
    let result = run_experiment(&cfg)?;
    write_outputs(&result, &dir)?;
    for v in &result.report.variants {
        println!(
            "{:<18} unsettled {:>3}  violations {:>3}  max|u| {:.4}",
            v.name, v.unsettled_samples, v.violations, v.max_abs_u
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn factorize_cmd(
    config: Option<&Path>,
    s_omega: usize,
    s_psi: usize,
    init: PalmInit,
    max_iter: Option<usize>,
    history: bool,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let setup = cfg.setup()?;
    let theta = setup.network.stacked_theta();
    let mut prob = FactorizationProblem::new(theta.clone(), s_omega, s_psi);
    prob.max_iter = max_iter.unwrap_or(cfg.params.palm_max_iter);
    (prob.beta1, prob.beta2) = cfg.params.palm_beta;
    let (omega0, psi0) = init.initial_factors(&theta, setup.network.n_inputs(), prob.inner_dim)?;
    let fac = palm_factorize(&prob, &omega0, &psi0)?;
    let mut value = json!({
        "omega": matrix_to_json(&fac.omega),
        "psi": matrix_to_json(&fac.psi),
        "residual": fac.residual(),
        "iterations": fac.iterations(),
        "monotone": fac.is_monotone(1e-12),
        "init": init.to_string(),
    });
    if history {
        value["residual_history"] = json!(fac.residual_history);
    }
    emit_json(out, &value)
}

fn perturb_cmd(config: Option<&Path>, threshold: f64, shift: f64, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let setup = cfg.setup()?;
    let gamma = &setup.network.gamma;
    let pert = prune_edges(gamma, threshold, shift)?;
    let nominal_check = check_contraction(gamma)?;
    let mut value = json!({
        "nominal": nominal_check,
        "perturbed": pert.check,
        "nnz_nominal": neural_mpc::linalg::nnz(gamma),
        "nnz_perturbed": neural_mpc::linalg::nnz(&pert.apply(gamma)),
        "vertex_lipschitz": vertex_lipschitz(&pert.apply(gamma)).ok(),
        "delta": matrix_to_json(&pert.delta),
    });
    if pert.contracting() {
        let timing = cfg.network.timing()?;
        let budget = cfg.network.budget(cfg.ts);
        let x0 = Vector::from_vec(cfg.x0.clone());
        let mut nominal = FiringRateNetwork::new(setup.network.clone(), timing);
        let mut perturbed = nominal.perturbed(&pert.delta)?;
        let (nom, traj) = nominal.settle_recorded(&x0, cfg.network.settle_tol, budget)?;
        let per = perturbed.settle(&x0, cfg.network.settle_tol, budget)?;
        let bound = control_deviation_bound(&setup.network, &pert.delta, &x0, &x0, &traj, pert.mu())?;
        let measured = (nominal.control(&x0) - perturbed.control(&x0)).norm();
        value["bound"] = json!(BoundReport::new(bound, measured));
        value["settled"] = json!(nom.settled && per.settled);
    }
    emit_json(out, &value)
}

fn analyze_cmd(matrix: &Path, format: ExportFormat, threshold: f64, stats: bool) -> Result<()> {
    let text = fs::read_to_string(matrix).with_context(|| format!("reading {}", matrix.display()))?;
    let m = matrix_from_json(&text)?;
    let graph = extract_graph(&m, threshold, None)?;
    if stats {
        let (in_hist, out_hist) = degree_distributions(&graph);
        return emit_json(
            None,
            &json!({
                "nodes": graph.node_count,
                "edges": graph.edges.len(),
                "in_degree": in_hist.counts,
                "out_degree": out_hist.counts,
            }),
        );
    }
    emit(None, &export_graph(&graph, format)?)
}

fn reproduce_cmd(config: Option<&Path>, out: &Path) -> Result<bool> {
    let mut cfg = load_config(config)?;
    if config.is_none() {
        cfg.variants = ALL_VARIANTS.iter().map(|s| s.to_string()).collect();
    }
    let result = run_experiment(&cfg)?;
    write_outputs(&result, out)?;
    let checks = reproduction_checks(&cfg, &result)?;
    fs::write(out.join("checks.json"), serde_json::to_vec_pretty(&checks)?)?;
    let mut all = true;
    for c in &checks {
        all &= c.passed;
        println!(
            "{} {:<44} {:>12.4e} {} {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.limit
        );
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Config { config, out } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            emit_json(out.as_deref(), &serde_json::to_value(&cfg)?)?
        }
        Command::Condense { config, out } => condense_cmd(config.as_deref(), out.as_deref())?,
        Command::Simulate {
            config,
            out,
            variants,
            cold_start,
        } => simulate_cmd(config.as_deref(), out, variants, cold_start)?,
        Command::Factorize {
            config,
            s_omega,
            s_psi,
            init,
            max_iter,
            history,
            out,
        } => factorize_cmd(
            config.as_deref(),
            s_omega,
            s_psi,
            init,
            max_iter,
            history,
            out.as_deref(),
        )?,
        Command::Perturb {
            config,
            threshold,
            shift,
            out,
        } => perturb_cmd(config.as_deref(), threshold, shift, out.as_deref())?,
        Command::Analyze {
            matrix,
            format,
            threshold,
            stats,
        } => analyze_cmd(&matrix, format, threshold, stats)?,
        Command::ReproducePaper { config, out } => {
            if !reproduce_cmd(config.as_deref(), &out)? {
                eprintln!("error: some checks failed; see {}", out.join("checks.json").display());
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NEURAL_MPC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
