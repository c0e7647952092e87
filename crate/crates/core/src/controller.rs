//! Controller variants behind a common trait, selectable by name.
//!
//! Every variant maps a sampled state `x0` to the first control action of the
//! same condensed QP; they differ only in how the multipliers are obtained.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::condenser::{augment_slack, CondensedQp, NetworkData};
use crate::error::{Error, Result};
use crate::factorizer::{palm_factorize, split_factors, FactorizationProblem, PalmInit};
use crate::linalg::{nnz, Vector};
use crate::network::{EpsilonSchedule, FiringRateNetwork, MultilayerInputs, MultilayerNetwork, NeuralDynamics, Timing};
use crate::perturber::{check_contraction, control_deviation_bound, prune_edges, vertex_lipschitz, BoundReport};
use crate::qp_oracle::solve_active_set_enumeration;

/// Integration and settling settings shared by the network variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    /// Network timescale in seconds.
    pub eta: f64,
    /// Euler step in seconds; `eta / 20` when absent.
    pub dt: Option<f64>,
    /// Stop once `||d lambda / ds||_inf` drops to this value.
    pub settle_tol: f64,
    /// Settling budget per sample in seconds of network time; the sample
    /// period when absent.
    pub settle_time: Option<f64>,
    /// Reuse the previous equilibrium as the next initial state.
    pub warm_start: bool,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            dt: None,
            settle_tol: 1e-8,
            settle_time: None,
            warm_start: true,
        }
    }
}

impl NetworkSettings {
    pub fn timing(&self) -> Result<Timing> {
        match self.dt {
            Some(dt) => Timing::with_dt(self.eta, dt),
            None => Timing::new(self.eta),
        }
    }

    pub fn budget(&self, ts: f64) -> f64 {
        self.settle_time.unwrap_or(ts)
    }

    pub fn validate(&self) -> Result<()> {
        self.timing()?;
        if !(self.settle_tol > 0.0) {
            return Err(Error::Config(format!(
                "settle_tol must be positive, got {}",
                self.settle_tol
            )));
        }
        if let Some(t) = self.settle_time {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("settle_time must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Variant-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantParams {
    /// Regularization weight of `single_layer_eps`.
    pub eps0: f64,
    /// Sparsity budgets `(s_omega, s_psi)` of `multilayer_exact`.
    pub exact_budgets: (usize, usize),
    /// Sparsity budgets `(s_omega, s_psi)` of `multilayer_approx`.
    pub approx_budgets: (usize, usize),
    pub palm_init: PalmInit,
    pub palm_max_iter: usize,
    pub palm_beta: (f64, f64),
    /// Off-diagonal weights below this magnitude are removed by `perturbed`.
    pub prune_threshold: f64,
    /// Diagonal shift subtracted after pruning.
    pub prune_shift: f64,
    /// Slack penalty of `slack`.
    pub rho: f64,
}

impl Default for VariantParams {
    fn default() -> Self {
        Self {
            eps0: 0.1,
            exact_budgets: (144, 144),
            approx_budgets: (40, 40),
            palm_init: PalmInit::LayerSwap,
            palm_max_iter: 100_000,
            palm_beta: (1.1, 1.1),
            prune_threshold: 0.01,
            prune_shift: 1e-4,
            rho: 1e4,
        }
    }
}

/// Everything a variant may be built from.
#[derive(Debug, Clone)]
pub struct ControllerContext {
    pub qp: Arc<CondensedQp>,
    pub network: Arc<NetworkData>,
    pub settings: NetworkSettings,
    pub params: VariantParams,
    /// Sample period of the loop the controller runs in.
    pub ts: f64,
}

impl ControllerContext {
    fn budget(&self) -> f64 {
        self.settings.budget(self.ts)
    }
}

/// Result of one controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: Vector,
    /// Whether the underlying network reached its tolerance (always true for
    /// the oracle).
    pub settled: bool,
    /// Multiplier estimate, or the hidden state for multilayer networks.
    pub state: Vector,
    pub steps: usize,
    /// Deviation bound against the nominal network, for variants that carry one.
    pub bound: Option<BoundReport>,
}

pub trait Controller: Send {
    fn name(&self) -> &str;

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput>;

    /// Forget any warm-start state.
    fn reset(&mut self);

    /// Static facts about the realization (residuals, sparsity, rates).
    fn info(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
}

pub type ControllerFactory = fn(&ControllerContext) -> Result<Box<dyn Controller>>;

/// Name-indexed constructors.
#[derive(Clone, Default)]
pub struct ControllerRegistry {
    factories: BTreeMap<String, ControllerFactory>,
}

impl ControllerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        r.register("oracle", |ctx| Ok(Box::new(OracleController::new(ctx))));
        r.register("single_layer", |ctx| {
            Ok(Box::new(SingleLayerController::new(ctx, "single_layer", 0.0)?))
        });
        r.register("single_layer_eps", |ctx| {
            Ok(Box::new(SingleLayerController::new(
                ctx,
                "single_layer_eps",
                ctx.params.eps0,
            )?))
        });
        r.register("multilayer_exact", |ctx| {
            Ok(Box::new(MultilayerController::new(
                ctx,
                "multilayer_exact",
                ctx.params.exact_budgets,
            )?))
        });
        r.register("multilayer_approx", |ctx| {
            Ok(Box::new(MultilayerController::new(
                ctx,
                "multilayer_approx",
                ctx.params.approx_budgets,
            )?))
        });
        r.register("perturbed", |ctx| Ok(Box::new(PerturbedController::new(ctx)?)));
        r.register("slack", |ctx| Ok(Box::new(SlackController::new(ctx)?)));
        r
    }

    pub fn register(&mut self, name: &str, factory: ControllerFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, ctx: &ControllerContext) -> Result<Box<dyn Controller>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::Unknown {
            kind: "controller variant",
            name: name.to_string(),
        })?;
        factory(ctx)
    }
}

impl std::fmt::Debug for ControllerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

/// Exact QP solution by active-set enumeration.
pub struct OracleController {
    qp: Arc<CondensedQp>,
}

impl OracleController {
    pub fn new(ctx: &ControllerContext) -> Self {
        Self { qp: ctx.qp.clone() }
    }
}

impl Controller for OracleController {
    fn name(&self) -> &str {
        "oracle"
    }

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput> {
        let sol = solve_active_set_enumeration(&self.qp, x0)?;
        Ok(ControlOutput {
            u: sol.u.rows(0, self.qp.upsilon_rows).into_owned(),
            settled: true,
            state: sol.lambda,
            steps: 0,
            bound: None,
        })
    }

    fn reset(&mut self) {}
}

/// Runs any network to equilibrium and reads out its control.
struct Settler<N> {
    net: N,
    tol: f64,
    budget: f64,
    warm_start: bool,
}

impl<N: NeuralDynamics> Settler<N> {
    fn run(&mut self, x0: &Vector, reset: impl FnOnce(&mut N)) -> Result<ControlOutput> {
        if !self.warm_start {
            reset(&mut self.net);
        }
        let out = self.net.settle(x0, self.tol, self.budget)?;
        Ok(ControlOutput {
            u: self.net.control(x0),
            settled: out.settled,
            state: out.state,
            steps: out.steps,
            bound: None,
        })
    }
}

pub struct SingleLayerController {
    name: &'static str,
    inner: Settler<FiringRateNetwork>,
}

impl SingleLayerController {
    pub fn new(ctx: &ControllerContext, name: &'static str, eps0: f64) -> Result<Self> {
        let net = FiringRateNetwork::new(ctx.network.clone(), ctx.settings.timing()?)
            .with_epsilon(EpsilonSchedule::new(eps0)?);
        Ok(Self {
            name,
            inner: Settler {
                net,
                tol: ctx.settings.settle_tol,
                budget: ctx.budget(),
                warm_start: ctx.settings.warm_start,
            },
        })
    }
}

impl Controller for SingleLayerController {
    fn name(&self) -> &str {
        self.name
    }

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput> {
        self.inner.run(x0, FiringRateNetwork::reset)
    }

    fn reset(&mut self) {
        self.inner.net.reset();
    }

    fn info(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([("eps0".to_string(), self.inner.net.epsilon.eps0)])
    }
}

/// Two-layer network from a PALM factorization of the stacked read-out.
pub struct MultilayerController {
    name: &'static str,
    inner: Settler<MultilayerNetwork>,
    info: BTreeMap<String, f64>,
}

impl MultilayerController {
    pub fn new(ctx: &ControllerContext, name: &'static str, budgets: (usize, usize)) -> Result<Self> {
        let data = &ctx.network;
        let theta = data.stacked_theta();
        let p = data.n_inputs();
        let mut prob = FactorizationProblem::new(theta.clone(), budgets.0, budgets.1);
        prob.max_iter = ctx.params.palm_max_iter;
        (prob.beta1, prob.beta2) = ctx.params.palm_beta;
        let (omega0, psi0) = ctx.params.palm_init.initial_factors(&theta, p, prob.inner_dim)?;
        let fac = palm_factorize(&prob, &omega0, &psi0)?;
        debug!(
            "{name}: PALM stopped after {} iterations, residual {:.3e}",
            fac.iterations(),
            fac.residual()
        );
        let (omega1, omega2) = split_factors(&fac.omega, p)?;
        let info = BTreeMap::from([
            ("residual".to_string(), fac.residual()),
            ("monotone".to_string(), if fac.is_monotone(1e-12) { 1.0 } else { 0.0 }),
            ("iterations".to_string(), fac.iterations() as f64),
            ("nnz_omega".to_string(), nnz(&fac.omega) as f64),
            ("nnz_psi".to_string(), nnz(&fac.psi) as f64),
        ]);
        let inputs = Arc::new(MultilayerInputs::from(data.as_ref()));
        let net = MultilayerNetwork::new(omega1, omega2, fac.psi, inputs, ctx.settings.timing()?)?;
        Ok(Self {
            name,
            inner: Settler {
                net,
                tol: ctx.settings.settle_tol,
                budget: ctx.budget(),
                warm_start: ctx.settings.warm_start,
            },
            info,
        })
    }

    pub fn network(&self) -> &MultilayerNetwork {
        &self.inner.net
    }
}

impl Controller for MultilayerController {
    fn name(&self) -> &str {
        self.name
    }

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput> {
        self.inner.run(x0, MultilayerNetwork::reset)
    }

    fn reset(&mut self) {
        self.inner.net.reset();
    }

    fn info(&self) -> BTreeMap<String, f64> {
        self.info.clone()
    }
}

/// Pruned network. Also settles the nominal network alongside to check the
/// control deviation bound at every sample.
pub struct PerturbedController {
    nominal: Settler<FiringRateNetwork>,
    perturbed: Settler<FiringRateNetwork>,
    delta: crate::linalg::Mat,
    mu: f64,
    info: BTreeMap<String, f64>,
}

impl PerturbedController {
    pub fn new(ctx: &ControllerContext) -> Result<Self> {
        let pert = prune_edges(&ctx.network.gamma, ctx.params.prune_threshold, ctx.params.prune_shift)?;
        if !pert.contracting() {
            return Err(Error::Config(format!(
                "pruned synaptic matrix is not contracting (alpha_sym = {})",
                pert.check.alpha_sym
            )));
        }
        let timing = ctx.settings.timing()?;
        let base = FiringRateNetwork::new(ctx.network.clone(), timing);
        let perturbed_net = base.perturbed(&pert.delta)?;
        let settler = |net| Settler {
            net,
            tol: ctx.settings.settle_tol,
            budget: ctx.budget(),
            warm_start: ctx.settings.warm_start,
        };
        let nominal_check = check_contraction(&ctx.network.gamma)?;
        let info = BTreeMap::from([
            ("mu".to_string(), pert.mu()),
            ("alpha_sym".to_string(), pert.check.alpha_sym),
            ("nominal_alpha_sym".to_string(), nominal_check.alpha_sym),
            ("nnz_nominal".to_string(), nnz(&ctx.network.gamma) as f64),
            ("nnz_perturbed".to_string(), nnz(&pert.apply(&ctx.network.gamma)) as f64),
            ("delta_norm".to_string(), crate::linalg::spectral_norm(&pert.delta)),
            (
                "vertex_lipschitz".to_string(),
                vertex_lipschitz(&pert.apply(&ctx.network.gamma)).unwrap_or(f64::NAN),
            ),
        ]);
        Ok(Self {
            nominal: settler(base),
            perturbed: settler(perturbed_net),
            mu: pert.mu(),
            delta: pert.delta,
            info,
        })
    }
}

impl Controller for PerturbedController {
    fn name(&self) -> &str {
        "perturbed"
    }

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput> {
        if !self.nominal.warm_start {
            self.nominal.net.reset();
        }
        let (nom, traj) = self
            .nominal
            .net
            .settle_recorded(x0, self.nominal.tol, self.nominal.budget)?;
        let u_nominal = self.nominal.net.control(x0);
        let mut out = self.perturbed.run(x0, FiringRateNetwork::reset)?;
        if nom.settled && out.settled {
            let bound = control_deviation_bound(&self.nominal.net.data, &self.delta, x0, x0, &traj, self.mu)?;
            out.bound = Some(BoundReport::new(bound, (&u_nominal - &out.u).norm()));
        }
        out.settled &= nom.settled;
        Ok(out)
    }

    fn reset(&mut self) {
        self.nominal.net.reset();
        self.perturbed.net.reset();
    }

    fn info(&self) -> BTreeMap<String, f64> {
        self.info.clone()
    }
}

/// Network of the QP with softened state constraints.
pub struct SlackController {
    inner: Settler<FiringRateNetwork>,
    rho: f64,
}

impl SlackController {
    pub fn new(ctx: &ControllerContext) -> Result<Self> {
        let (data, meta) = augment_slack(&ctx.qp, ctx.params.rho)?;
        let net = FiringRateNetwork::new(Arc::new(data), ctx.settings.timing()?);
        Ok(Self {
            inner: Settler {
                net,
                tol: ctx.settings.settle_tol,
                budget: ctx.budget(),
                warm_start: ctx.settings.warm_start,
            },
            rho: meta.rho,
        })
    }
}

impl Controller for SlackController {
    fn name(&self) -> &str {
        "slack"
    }

    fn control(&mut self, x0: &Vector) -> Result<ControlOutput> {
        self.inner.run(x0, FiringRateNetwork::reset)
    }

    fn reset(&mut self) {
        self.inner.net.reset();
    }

    fn info(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("rho".to_string(), self.rho),
            ("neurons".to_string(), self.inner.net.data.size() as f64),
        ])
    }
}
