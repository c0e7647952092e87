//! Closed-loop experiments: configuration, the sampled control loop, traces,
//! comparison reports and file output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analytics::{export_graph, extract_graph, ExportFormat, NetworkGraph};
use crate::condenser::{
    build_network, condense, CondensedQp, InputConstraints, MpcProblem, NetworkData, StateConstraints,
};
use crate::controller::{ControllerContext, ControllerRegistry, NetworkSettings, VariantParams};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::perturber::BoundReport;
use crate::plant::{
    self, discretize_zoh, lqr_gain, solve_dare, CartPoleParams, DiscretePlant, PlantDynamics, PlantModel,
};

/// Margins below `-VIOLATION_TOL` count as constraint violations.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Plant description: explicit continuous-time matrices, cart-pole
/// parameters, or both (matrices drive the linear model, parameters the
/// nonlinear one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSpec {
    pub cart_pole: Option<CartPoleParams>,
    pub a_c: Option<Vec<Vec<f64>>>,
    pub b_c: Option<Vec<Vec<f64>>>,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            cart_pole: Some(CartPoleParams::default()),
            a_c: None,
            b_c: None,
        }
    }
}

impl PlantSpec {
    pub fn model(&self) -> Result<PlantModel> {
        match (&self.a_c, &self.b_c) {
            (Some(a), Some(b)) => {
                let mut model = PlantModel::new(linalg::from_rows(a)?, linalg::from_rows(b)?)?;
                if let Some(params) = self.cart_pole {
                    params.validate()?;
                    model.cart_pole = Some(params);
                }
                Ok(model)
            }
            (None, None) => match self.cart_pole {
                Some(params) => PlantModel::cart_pole(params),
                None => Err(Error::Config(
                    "plant needs either a_c/b_c or cart_pole parameters".into(),
                )),
            },
            _ => Err(Error::Config("a_c and b_c must be given together".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBoxSpec {
    /// Rows of the constrained-output map `y = C x`.
    pub c: Vec<Vec<f64>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// A complete closed-loop experiment. Every field has a default; the
/// defaults describe the cart-pole stabilization setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    /// Sample period in seconds.
    pub ts: f64,
    pub horizon: usize,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Terminal weight; the DARE solution when absent.
    pub p_term: Option<Vec<Vec<f64>>>,
    pub input_bounds: Option<BoxSpec>,
    pub state_constraints: Option<OutputBoxSpec>,
    pub variants: Vec<String>,
    pub x0: Vec<f64>,
    /// Simulated time in seconds.
    pub duration: f64,
    pub plant_dynamics: PlantDynamics,
    /// RK4 substeps per sample period.
    pub substeps: usize,
    pub network: NetworkSettings,
    pub params: VariantParams,
    /// Presence threshold for exported graphs.
    pub edge_threshold: f64,
    /// Default output directory for the command-line tool.
    pub output_dir: Option<String>,
    /// Seed for randomized checks (sampled initial states).
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantSpec::default(),
            ts: 0.02,
            horizon: 2,
            q: linalg::to_rows(&linalg::diag(&[10.0, 1.0, 500.0, 1.0])),
            r: vec![vec![0.1]],
            p_term: None,
            input_bounds: Some(BoxSpec {
                lower: vec![-10.0],
                upper: vec![12.0],
            }),
            state_constraints: Some(OutputBoxSpec {
                c: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]],
                lower: vec![-0.62, -0.1],
                upper: vec![0.62, 1.0],
            }),
            variants: ALL_VARIANTS.iter().map(|s| s.to_string()).collect(),
            x0: vec![0.3, 0.0, 0.15, 0.0],
            duration: 6.0,
            plant_dynamics: PlantDynamics::Linear,
            substeps: 10,
            network: NetworkSettings::default(),
            params: VariantParams::default(),
            edge_threshold: crate::analytics::DEFAULT_EDGE_THRESHOLD,
            output_dir: None,
            seed: 7,
        }
    }
}

pub const ALL_VARIANTS: [&str; 7] = [
    "oracle",
    "single_layer",
    "single_layer_eps",
    "multilayer_exact",
    "multilayer_approx",
    "perturbed",
    "slack",
];

/// Everything derived from a configuration before the loop starts.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: PlantModel,
    pub plant: DiscretePlant,
    pub problem: MpcProblem,
    pub qp: Arc<CondensedQp>,
    pub network: Arc<NetworkData>,
    /// Infinite-horizon gain from the DARE, when it has a solution.
    pub lqr_gain: Option<Mat>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn samples(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    /// Checks the configuration against the built-in controller names.
    pub fn validate(&self) -> Result<()> {
        self.validate_against(&ControllerRegistry::with_builtin())
    }

    /// Checks the configuration, resolving variant names in `registry`.
    pub fn validate_against(&self, registry: &ControllerRegistry) -> Result<()> {
        self.check_fields()?;
        for v in &self.variants {
            if !registry.contains(v) {
                return Err(Error::Unknown {
                    kind: "controller variant",
                    name: v.clone(),
                });
            }
        }
        Ok(())
    }

    fn check_fields(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.ts.is_finite() && self.ts > 0.0) {
            return Err(Error::Config(format!("ts must be positive, got {}", self.ts)));
        }
        if self.samples() == 0 {
            return Err(Error::Config("duration is shorter than one sample".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one controller variant is required".into()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if !(self.edge_threshold >= 0.0) {
            return Err(Error::Config("edge_threshold must be nonnegative".into()));
        }
        self.network.validate()?;
        let p = &self.params;
        if !(p.eps0 >= 0.0 && p.rho > 0.0 && p.prune_threshold >= 0.0) {
            return Err(Error::Config(
                "eps0, prune_threshold must be nonnegative and rho positive".into(),
            ));
        }
        if p.exact_budgets.0 == 0 || p.exact_budgets.1 == 0 || p.approx_budgets.0 == 0 || p.approx_budgets.1 == 0 {
            return Err(Error::Config("sparsity budgets must be at least 1".into()));
        }
        if self.plant_dynamics == PlantDynamics::Nonlinear && self.plant.cart_pole.is_none() {
            return Err(Error::Config(
                "nonlinear plant dynamics need cart_pole parameters".into(),
            ));
        }
        Ok(())
    }

    /// Builds the plant, the MPC problem, its condensed QP and the network.
    pub fn setup(&self) -> Result<Setup> {
        self.check_fields()?;
        let model = self.plant.model()?;
        let (n, p) = (model.n_states(), model.n_inputs());
        if self.x0.len() != n {
            return Err(Error::Config(format!(
                "x0 has {} entries, plant has {n} states",
                self.x0.len()
            )));
        }
        let plant = discretize_zoh(&model, self.ts)?;
        let q = linalg::from_rows(&self.q)?;
        let r = linalg::from_rows(&self.r)?;
        if q.shape() != (n, n) || r.shape() != (p, p) {
            return Err(Error::Config(format!("weights must be {n}x{n} and {p}x{p}")));
        }
        let dare = solve_dare(&plant.a, &plant.b, &q, &r);
        let lqr = match &dare {
            Ok(pm) => Some(lqr_gain(&plant.a, &plant.b, &q, &r, pm)?),
            Err(_) => None,
        };
        let p_term = match &self.p_term {
            Some(rows) => linalg::from_rows(rows)?,
            None => dare?,
        };
        let input_con = self.input_bounds.as_ref().map(|b| InputConstraints {
            lower: Vector::from_vec(b.lower.clone()),
            upper: Vector::from_vec(b.upper.clone()),
        });
        let state_con = match &self.state_constraints {
            Some(s) => Some(StateConstraints {
                c: linalg::from_rows(&s.c)?,
                lower: Vector::from_vec(s.lower.clone()),
                upper: Vector::from_vec(s.upper.clone()),
            }),
            None => None,
        };
        let problem = MpcProblem {
            plant: plant.clone(),
            horizon: self.horizon,
            q,
            r,
            p_term,
            state_con,
            input_con,
        };
        let qp = condense(&problem)?;
        let network = build_network(&qp)?;
        Ok(Setup {
            model,
            plant,
            problem,
            qp: Arc::new(qp),
            network: Arc::new(network),
            lqr_gain: lqr,
        })
    }

    pub fn context(&self, setup: &Setup) -> ControllerContext {
        ControllerContext {
            qp: setup.qp.clone(),
            network: setup.network.clone(),
            settings: self.network,
            params: self.params.clone(),
            ts: self.ts,
        }
    }
}

/// Per-sample record of one variant's closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub variant: String,
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub settled: Vec<bool>,
    /// Network state (multipliers, or the hidden layer) after settling.
    pub states: Vec<Vector>,
    /// `[u_hi - u, u - u_lo, y_hi - y, y - y_lo]` at each sample; negative
    /// entries are violations.
    pub margins: Vec<Vector>,
    pub bounds: Vec<Option<BoundReport>>,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn state_norms(&self) -> Vec<f64> {
        self.states.iter().map(Vector::norm).collect()
    }

    pub fn violations(&self) -> usize {
        self.margins
            .iter()
            .filter(|m| m.iter().any(|&v| v < -VIOLATION_TOL))
            .count()
    }

    /// CSV with header `t,x1..xn,u1..up,settled`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.x.first().map_or(0, |x| x.len());
        let p = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=p).map(|i| format!("u{i}")));
        header.push("settled".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![self.t[k].to_string()];
            rec.extend(self.x[k].iter().map(f64::to_string));
            rec.extend(self.u[k].iter().map(f64::to_string));
            rec.push(if self.settled[k] { "1" } else { "0" }.into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn constraint_margins(problem: &MpcProblem, x: &Vector, u: &Vector) -> Vector {
    let mut m = Vec::new();
    if let Some(ic) = &problem.input_con {
        m.extend((&ic.upper - u).iter());
        m.extend((u - &ic.lower).iter());
    }
    if let Some(sc) = &problem.state_con {
        let y = &sc.c * x;
        m.extend((&sc.upper - &y).iter());
        m.extend((&y - &sc.lower).iter());
    }
    Vector::from_vec(m)
}

/// Largest pairwise deviation between two variants' traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDeviation {
    pub a: String,
    pub b: String,
    pub max_control: f64,
    pub max_state: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub samples: usize,
    pub unsettled_samples: usize,
    pub violations: usize,
    pub max_abs_u: f64,
    pub info: BTreeMap<String, f64>,
    pub bound_checks: usize,
    pub bound_violations: usize,
    pub min_bound_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub samples: usize,
    pub ts: f64,
    pub variants: Vec<VariantSummary>,
    pub deviations: Vec<PairDeviation>,
}

impl ExperimentReport {
    pub fn deviation(&self, a: &str, b: &str) -> Option<&PairDeviation> {
        self.deviations
            .iter()
            .find(|d| (d.a == a && d.b == b) || (d.a == b && d.b == a))
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub traces: Vec<ClosedLoopTrace>,
    pub report: ExperimentReport,
    /// Graphs of the synaptic matrices, keyed like `single_layer.gamma`.
    pub graphs: BTreeMap<String, NetworkGraph>,
}

impl ExperimentResult {
    pub fn trace(&self, name: &str) -> Option<&ClosedLoopTrace> {
        self.traces.iter().find(|t| t.variant == name)
    }
}

/// Runs `variant` in closed loop with the configured plant.
pub fn run_variant(
    config: &ExperimentConfig,
    setup: &Setup,
    variant: &str,
) -> Result<(ClosedLoopTrace, BTreeMap<String, f64>)> {
    run_variant_with(&ControllerRegistry::with_builtin(), config, setup, variant)
}

/// Like [`run_variant`], resolving `variant` in `registry`.
pub fn run_variant_with(
    registry: &ControllerRegistry,
    config: &ExperimentConfig,
    setup: &Setup,
    variant: &str,
) -> Result<(ClosedLoopTrace, BTreeMap<String, f64>)> {
    let mut controller = registry.build(variant, &config.context(setup))?;
    let samples = config.samples();
    let mut trace = ClosedLoopTrace {
        variant: variant.to_string(),
        t: Vec::with_capacity(samples),
        x: Vec::with_capacity(samples),
        u: Vec::with_capacity(samples),
        settled: Vec::with_capacity(samples),
        states: Vec::with_capacity(samples),
        margins: Vec::with_capacity(samples),
        bounds: Vec::with_capacity(samples),
    };
    let started = Instant::now();
    let mut x = Vector::from_vec(config.x0.clone());
    for k in 0..samples {
        let out = controller.control(&x)?;
        if !out.settled {
            warn!("{variant}: network did not settle at sample {k}");
        }
        trace.t.push(k as f64 * config.ts);
        trace.margins.push(constraint_margins(&setup.problem, &x, &out.u));
        trace.x.push(x.clone());
        trace.u.push(out.u.clone());
        trace.settled.push(out.settled);
        trace.states.push(out.state);
        trace.bounds.push(out.bound);
        x = plant::propagate(
            &setup.model,
            config.plant_dynamics,
            &x,
            &out.u,
            config.ts,
            config.substeps,
        )?;
        if !linalg::vec_finite(&x) {
            return Err(Error::Divergence(format!("{variant}: plant state became non-finite")));
        }
    }
    info!("{variant}: {samples} samples in {:.2?}", started.elapsed());
    Ok((trace, controller.info()))
}

fn max_deviation(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max)
}

fn summarize(trace: &ClosedLoopTrace, info: BTreeMap<String, f64>) -> VariantSummary {
    let checks: Vec<&BoundReport> = trace.bounds.iter().flatten().collect();
    VariantSummary {
        name: trace.variant.clone(),
        samples: trace.len(),
        unsettled_samples: trace.settled.iter().filter(|s| !**s).count(),
        violations: trace.violations(),
        max_abs_u: trace.u.iter().map(|u| u.amax()).fold(0.0, f64::max),
        info,
        bound_checks: checks.len(),
        bound_violations: checks.iter().filter(|b| !b.holds()).count(),
        min_bound_margin: checks.iter().map(|b| b.margin).reduce(f64::min),
    }
}

/// Graphs of the synaptic matrices used by the configured variants.
pub fn network_graphs(config: &ExperimentConfig, setup: &Setup) -> Result<BTreeMap<String, NetworkGraph>> {
    let labels: Vec<String> = setup.network.labels.iter().map(ToString::to_string).collect();
    let thr = config.edge_threshold;
    let mut graphs = BTreeMap::new();
    graphs.insert(
        "gamma".to_string(),
        extract_graph(&setup.network.gamma, thr, Some(&labels))?,
    );
    let wants = |v: &str| config.variants.iter().any(|x| x == v);
    let ctx = config.context(setup);
    for (variant, budgets) in [
        ("multilayer_exact", config.params.exact_budgets),
        ("multilayer_approx", config.params.approx_budgets),
    ] {
        if wants(variant) {
            let ml = crate::controller::MultilayerController::new(&ctx, "graph", budgets)?;
            let net = ml.network();
            graphs.insert(format!("{variant}.omega1"), extract_graph(&net.omega1, thr, None)?);
            graphs.insert(format!("{variant}.psi"), extract_graph(&net.psi, thr, None)?);
        }
    }
    if wants("perturbed") {
        let p = crate::perturber::prune_edges(
            &setup.network.gamma,
            config.params.prune_threshold,
            config.params.prune_shift,
        )?;
        graphs.insert(
            "perturbed.gamma".to_string(),
            extract_graph(&p.apply(&setup.network.gamma), thr, Some(&labels))?,
        );
    }
    if wants("slack") {
        let (data, _) = crate::condenser::augment_slack(&setup.qp, config.params.rho)?;
        let slack_labels: Vec<String> = data.labels.iter().map(ToString::to_string).collect();
        graphs.insert(
            "slack.gamma".to_string(),
            extract_graph(&data.gamma, thr, Some(&slack_labels))?,
        );
    }
    Ok(graphs)
}

/// Runs every configured variant (concurrently; results do not depend on
/// scheduling) and compares them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, &ControllerRegistry::with_builtin())
}

/// Like [`run_experiment`], with variants looked up in `registry`.
pub fn run_experiment_with(config: &ExperimentConfig, registry: &ControllerRegistry) -> Result<ExperimentResult> {
    config.validate_against(registry)?;
    let setup = config.setup()?;
    let outcomes: Vec<Result<(ClosedLoopTrace, BTreeMap<String, f64>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .variants
            .iter()
            .map(|v| scope.spawn(|| run_variant_with(registry, config, &setup, v)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numerical("variant thread panicked".into())))
            })
            .collect()
    });
    let mut traces = Vec::new();
    let mut variants = Vec::new();
    for outcome in outcomes {
        let (trace, info) = outcome?;
        variants.push(summarize(&trace, info));
        traces.push(trace);
    }
    let mut deviations = Vec::new();
    for (i, a) in traces.iter().enumerate() {
        for b in &traces[i + 1..] {
            deviations.push(PairDeviation {
                a: a.variant.clone(),
                b: b.variant.clone(),
                max_control: max_deviation(&a.u, &b.u),
                max_state: max_deviation(&a.x, &b.x),
            });
        }
    }
    let graphs = network_graphs(config, &setup)?;
    Ok(ExperimentResult {
        report: ExperimentReport {
            samples: config.samples(),
            ts: config.ts,
            variants,
            deviations,
        },
        traces,
        graphs,
    })
}

/// Writes `<variant>.csv` traces, `report.json` and graph exports under `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for trace in &result.traces {
        let file = fs::File::create(dir.join(format!("{}.csv", trace.variant)))?;
        trace.write_csv(std::io::BufWriter::new(file))?;
    }
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&result.report)?)?;
    let graph_dir = dir.join("graphs");
    fs::create_dir_all(&graph_dir)?;
    for (name, graph) in &result.graphs {
        fs::write(
            graph_dir.join(format!("{name}.json")),
            export_graph(graph, ExportFormat::Json)?,
        )?;
        fs::write(
            graph_dir.join(format!("{name}.dot")),
            export_graph(graph, ExportFormat::Dot)?,
        )?;
    }
    Ok(())
}

/// Matrices are stored as JSON arrays of rows.
pub fn matrix_to_json(m: &Mat) -> serde_json::Value {
    serde_json::json!(linalg::to_rows(m))
}

pub fn matrix_from_json(text: &str) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
    linalg::from_rows(&rows)
}

/// One quantitative claim checked by [`reproduction_checks`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="`, `"<"` or `">"` relating `value` to `limit`.
    pub relation: &'static str,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn le(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, "<=", limit, value <= limit)
    }

    fn lt(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, "<", limit, value < limit)
    }

    fn gt(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value, ">", limit, value > limit)
    }

    fn new(name: &str, value: f64, relation: &'static str, limit: f64, passed: bool) -> Self {
        Self {
            name: name.to_string(),
            value,
            relation,
            limit,
            passed,
        }
    }
}

fn series_exp(a: &Mat, terms: usize) -> Mat {
    let n = a.nrows();
    let mut sum = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    for k in 1..terms {
        term = &term * a / k as f64;
        sum += &term;
    }
    sum
}

/// Evaluates the headline claims on a finished experiment: cross-variant
/// agreement, LQR recovery, KKT residuals, minimal-norm duals, PALM descent,
/// the perturbation bound, the slack network, graph statistics and
/// numerical hygiene. Checks whose variants were not run are skipped.
pub fn reproduction_checks(config: &ExperimentConfig, result: &ExperimentResult) -> Result<Vec<Check>> {
    use crate::network::{EpsilonSchedule, FiringRateNetwork, NeuralDynamics, Timing};
    use rand::{rngs::StdRng, Rng, SeedableRng};

    let setup = config.setup()?;
    let report = &result.report;
    let mut checks = Vec::new();

    let trio = ["oracle", "single_layer", "multilayer_exact"];
    let mut ctrl: Option<f64> = None;
    let mut state: Option<f64> = None;
    for (i, a) in trio.iter().enumerate() {
        for b in &trio[i + 1..] {
            if let Some(d) = report.deviation(a, b) {
                ctrl = Some(ctrl.unwrap_or(0.0).max(d.max_control));
                state = Some(state.unwrap_or(0.0).max(d.max_state));
            }
        }
    }
    if let (Some(c), Some(s)) = (ctrl, state) {
        checks.push(Check::le("equivalence.max_control_deviation", c, 1e-3));
        checks.push(Check::le("equivalence.max_state_deviation", s, 1e-3));
    }

    if let Some(k) = &setup.lqr_gain {
        let relaxed = build_network(&setup.qp.with_scaled_bounds(1e6))?;
        let mut net = FiringRateNetwork::new(Arc::new(relaxed), config.network.timing()?);
        let mut rng = StdRng::seed_from_u64(config.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x0 = Vector::from_fn(k.ncols(), |_, _| rng.gen_range(-0.5..0.5));
            net.reset();
            net.settle(&x0, config.network.settle_tol, config.network.budget(config.ts))?;
            worst = worst.max((net.control(&x0) + k * &x0).amax());
        }
        checks.push(Check::le("lqr_recovery.max_error", worst, 1e-6));
    }

    if let Some(trace) = result.trace("single_layer") {
        let (mut primal, mut min_mult, mut comp) = (0.0f64, 0.0f64, 0.0f64);
        for k in (0..trace.len()).filter(|&k| trace.settled[k]) {
            let u = setup.qp.primal_from_dual(&trace.states[k], &trace.x[k]);
            let r = crate::qp_oracle::kkt_residuals(&setup.qp, &u, &trace.states[k], &trace.x[k]);
            primal = primal.max(r.primal_infeasibility);
            min_mult = min_mult.min(r.min_multiplier);
            comp = comp.max(r.complementarity);
        }
        checks.push(Check::le("kkt.primal_infeasibility", primal, 1e-6));
        checks.push(Check::le("kkt.negative_multiplier", -min_mult, 1e-12));
        checks.push(Check::le("kkt.complementarity", comp, 1e-6));
    }

    {
        // the first upper input row, twice
        let upper = setup.qp.rows.iter().position(|r| {
            matches!(
                r,
                crate::condenser::RowKind::Input {
                    step: 0,
                    side: crate::condenser::BoundSide::Upper,
                    ..
                }
            )
        });
        if let Some(row) = upper {
            let dup = setup.qp.select_rows(&[row, row])?;
            let x0 = Vector::from_vec(config.x0.clone());
            let sol = crate::qp_oracle::solve_active_set_enumeration(&dup, &x0)?;
            let net_data = build_network(&dup)?;
            let timing = Timing::new(config.network.eta)?;
            let mut net = FiringRateNetwork::new(Arc::new(net_data), timing)
                .with_epsilon(EpsilonSchedule::new(config.params.eps0)?);
            let out = net.settle(&x0, 1e-12, 2000.0 * config.network.eta)?;
            checks.push(Check::le(
                "min_norm_dual.error",
                (&out.state - &sol.lambda).amax(),
                1e-4,
            ));
        }
    }

    for variant in ["multilayer_exact", "multilayer_approx"] {
        if let Some(v) = report.variant(variant) {
            checks.push(Check::gt(&format!("{variant}.palm_monotone"), v.info["monotone"], 0.5));
        }
    }
    if let Some(d) = report.deviation("oracle", "multilayer_approx") {
        checks.push(Check::le("multilayer_approx.max_control_deviation", d.max_control, 0.5));
    }

    if let Some(v) = report.variant("perturbed") {
        checks.push(Check::lt("perturbed.alpha_sym", v.info["alpha_sym"], 1.0));
        checks.push(Check::gt("perturbed.bound_checks", v.bound_checks as f64, 0.0));
        checks.push(Check::le("perturbed.bound_violations", v.bound_violations as f64, 0.0));
    }

    if let Some(d) = report.deviation("oracle", "slack") {
        checks.push(Check::le("slack.max_control_deviation", d.max_control, 1e-2));
    }

    let handshake = result.graphs.values().all(|g| {
        let (i, o) = crate::analytics::degree_distributions(g);
        i.total_degree() == g.edges.len() && o.total_degree() == g.edges.len()
    });
    checks.push(Check::gt("graphs.handshake", if handshake { 1.0 } else { 0.0 }, 0.5));
    if let (Some(g), Some(o)) = (result.graphs.get("gamma"), result.graphs.get("multilayer_exact.omega1")) {
        let zero_in = |graph: &NetworkGraph| crate::analytics::degree_distributions(graph).0.count(0) as f64;
        checks.push(Check::gt(
            "graphs.omega1_minus_gamma_in_degree_zero",
            zero_in(o) - zero_in(g),
            0.0,
        ));
    }

    let dare_res = plant::dare_residual(
        &setup.plant.a,
        &setup.plant.b,
        &setup.problem.q,
        &setup.problem.r,
        &setup.problem.p_term,
    )?;
    if config.p_term.is_none() {
        checks.push(Check::le("hygiene.dare_residual", dare_res, 1e-9));
    }
    let (n, p) = (setup.model.n_states(), setup.model.n_inputs());
    let mut aug = Mat::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&setup.model.a_c * config.ts));
    aug.view_mut((0, n), (n, p)).copy_from(&(&setup.model.b_c * config.ts));
    let series = series_exp(&aug, 20);
    let zoh_err = (series.view((0, 0), (n, n)) - &setup.plant.a)
        .amax()
        .max((series.view((0, n), (n, p)) - &setup.plant.b).amax());
    checks.push(Check::le("hygiene.zoh_series_error", zoh_err, 1e-10));
    if let Some(params) = setup.model.cart_pole {
        let (a_lin, b_lin) = params.linearized();
        let h = 1e-6;
        let mut err: f64 = 0.0;
        for j in 0..n {
            let mut e = Vector::zeros(n);
            e[j] = h;
            let col = (params.derivative(&e, 0.0)? - params.derivative(&-&e, 0.0)?) / (2.0 * h);
            err = err.max((col - a_lin.column(j)).amax());
        }
        let zero = Vector::zeros(n);
        let col = (params.derivative(&zero, h)? - params.derivative(&zero, -h)?) / (2.0 * h);
        err = err.max((col - b_lin.column(0)).amax());
        checks.push(Check::le("hygiene.jacobian_error", err, 1e-6));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(variants: &[&str]) -> ExperimentConfig {
        ExperimentConfig {
            duration: 0.1,
            variants: variants.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.samples(), 300);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        let mut cfg = short(&["oracle"]);
        cfg.duration = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = short(&["nope"]);
        assert!(matches!(cfg.validate(), Err(Error::Unknown { .. })));
        cfg.variants.clear();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut cfg = short(&["oracle"]);
        cfg.x0 = vec![0.0; 3];
        assert!(cfg.setup().is_err());
    }

    #[test]
    fn equilibrium_stays_put() {
        let mut cfg = short(&["oracle", "single_layer", "slack"]);
        cfg.x0 = vec![0.0; 4];
        let res = run_experiment(&cfg).unwrap();
        for trace in &res.traces {
            assert!(trace.u.iter().all(|u| u.amax() == 0.0), "{}", trace.variant);
            assert!(trace.x.iter().all(|x| x.amax() == 0.0));
        }
    }

    #[test]
    fn csv_layout() {
        let res = run_experiment(&short(&["oracle"])).unwrap();
        let mut buf = Vec::new();
        res.traces[0].write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,x3,x4,u1,settled");
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn matrix_json_round_trip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, -2.5, 0.1, 3.0, 1e-17, 0.0]);
        let text = matrix_to_json(&m).to_string();
        assert_eq!(matrix_from_json(&text).unwrap(), m);
    }
}
