//! Allocation mechanisms: PF, Partial Allocation, their mixture and the
//! learned mechanisms (RPF-Net, ExS-Net, plain softmax net).

use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kkt::build_kkt_matrix;
use crate::nn::{layer_sizes, ForwardCache, MlpParams, OutputHead};
use crate::problem::{utility, utility_with, Allocation, ProblemInstance};
use crate::solver::{in_log_objective, solve_pf, solve_regularized_pf, PfSolution, SolverConfig};

/// Initial output bias of the RPF regularizer network; softplus(-4) is about
/// 0.018, so a fresh RPF-Net starts close to PF.
pub const RPF_OUTPUT_BIAS: f64 = -4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismKind {
    Pf,
    Pa,
    Mixture { rho: f64 },
    RpfNet { network: MlpParams },
    ExsNet { network: MlpParams },
    SoftmaxNet { network: MlpParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    #[serde(flatten)]
    pub kind: MechanismKind,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// Hidden-layer shape of the learned mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        Self { hidden: 128, depth: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaResult {
    pub allocation: Allocation,
    /// Externality ratio of each agent.
    pub ratios: Vec<f64>,
    /// PF objective with each agent's demand removed.
    pub leave_one_out_objectives: Vec<f64>,
}

/// Intermediates of a deterministic forward pass, consumed by
/// [`Mechanism::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub allocation: Allocation,
    detail: Detail,
}

#[derive(Debug, Clone)]
enum Detail {
    Pf(PfSolution),
    Rpf {
        solution: PfSolution,
        z: Vec<f64>,
        cache: ForwardCache,
    },
    Softmax {
        shares: Vec<f64>,
        rows: usize,
        cache: ForwardCache,
    },
}

impl Forward {
    pub fn solution(&self) -> Option<&PfSolution> {
        match &self.detail {
            Detail::Pf(s) | Detail::Rpf { solution: s, .. } => Some(s),
            Detail::Softmax { .. } => None,
        }
    }

    pub fn regularizer(&self) -> Option<&[f64]> {
        match &self.detail {
            Detail::Rpf { z, .. } => Some(z),
            _ => None,
        }
    }
}

/// Gradients of a scalar of the allocation, from [`Mechanism::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    /// Network parameters (empty for mechanisms without a network).
    pub params: Vec<f64>,
    /// Reported values, agent-major.
    pub values: Vec<f64>,
    /// Reported demands, agent-major.
    pub demands: Vec<f64>,
    /// Whether a singular KKT system forced a minimum-norm subgradient.
    pub min_norm: bool,
}

/// One agent of one instance, with the leave-one-out PF solution cached
/// for mechanisms that need it.
#[derive(Debug, Clone)]
pub struct ReportContext<'a> {
    instance: &'a ProblemInstance,
    agent: usize,
    leave_one_out: Option<PfSolution>,
}

impl<'a> ReportContext<'a> {
    fn bare(instance: &'a ProblemInstance, agent: usize) -> Result<Self> {
        instance.check_agent(agent)?;
        Ok(Self {
            instance,
            agent,
            leave_one_out: None,
        })
    }

    pub fn instance(&self) -> &'a ProblemInstance {
        self.instance
    }

    pub fn agent(&self) -> usize {
        self.agent
    }
}

/// Utility of one agent under a report and its gradient with respect to
/// that report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportResponse {
    pub utility: f64,
    pub grad_values: Vec<f64>,
    pub grad_demands: Vec<f64>,
    pub min_norm: bool,
}

/// `d u / d a` of a thresholded-additive utility row.
pub(crate) fn utility_slope(a: &[f64], v: &[f64], x: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(v)
        .zip(x)
        .map(|((a, v), x)| if a < x { *v } else { 0.0 })
        .collect()
}

fn row_utility(a: &[f64], v: &[f64], x: &[f64]) -> f64 {
    a.iter().zip(v).zip(x).map(|((a, v), x)| v * a.min(*x)).sum()
}

fn check_row(what: &'static str, row: &[f64], m: usize) -> Result<()> {
    if row.len() != m {
        return Err(Error::DimensionMismatch {
            what,
            expected: m,
            got: row.len(),
        });
    }
    Ok(())
}

fn agent_inner(inst: &ProblemInstance, a: &[f64], agent: usize) -> f64 {
    let m = inst.n_resources();
    (0..m)
        .map(|r| inst.value(agent, r) * a[agent * m + r])
        .sum()
}

impl Mechanism {
    pub fn new(kind: MechanismKind) -> Self {
        Self {
            kind,
            solver: SolverConfig::default(),
        }
    }

    pub fn pf() -> Self {
        Self::new(MechanismKind::Pf)
    }

    pub fn pa() -> Self {
        Self::new(MechanismKind::Pa)
    }

    pub fn mixture(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("mixture rho {rho} outside [0, 1]")));
        }
        Ok(Self::new(MechanismKind::Mixture { rho }))
    }

    /// RPF-Net with a softplus head and a small initial regularizer.
    pub fn rpf_net<R: Rng + ?Sized>(n: usize, m: usize, arch: NetArch, rng: &mut R) -> Result<Self> {
        let sizes = layer_sizes(2 * n * m + m, arch.hidden, arch.depth, n * m);
        let mut net = MlpParams::init(&sizes, OutputHead::Softplus, rng)?;
        net.set_output_bias(RPF_OUTPUT_BIAS);
        Ok(Self::new(MechanismKind::RpfNet { network: net }))
    }

    pub fn exs_net<R: Rng + ?Sized>(n: usize, m: usize, arch: NetArch, rng: &mut R) -> Result<Self> {
        let sizes = layer_sizes(2 * n * m + m, arch.hidden, arch.depth, (n + 1) * m);
        let net = MlpParams::init(&sizes, OutputHead::Identity, rng)?;
        Ok(Self::new(MechanismKind::ExsNet { network: net }))
    }

    pub fn softmax_net<R: Rng + ?Sized>(n: usize, m: usize, arch: NetArch, rng: &mut R) -> Result<Self> {
        let sizes = layer_sizes(2 * n * m + m, arch.hidden, arch.depth, n * m);
        let net = MlpParams::init(&sizes, OutputHead::Identity, rng)?;
        Ok(Self::new(MechanismKind::SoftmaxNet { network: net }))
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }

    pub fn name(&self) -> String {
        match &self.kind {
            MechanismKind::Pf => "PF".into(),
            MechanismKind::Pa => "PA".into(),
            MechanismKind::Mixture { rho } => format!("Mixture({rho})"),
            MechanismKind::RpfNet { .. } => "RPF-Net".into(),
            MechanismKind::ExsNet { .. } => "ExS-Net".into(),
            MechanismKind::SoftmaxNet { .. } => "Softmax-Net".into(),
        }
    }

    pub fn network(&self) -> Option<&MlpParams> {
        match &self.kind {
            MechanismKind::RpfNet { network }
            | MechanismKind::ExsNet { network }
            | MechanismKind::SoftmaxNet { network } => Some(network),
            _ => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut MlpParams> {
        match &mut self.kind {
            MechanismKind::RpfNet { network }
            | MechanismKind::ExsNet { network }
            | MechanismKind::SoftmaxNet { network } => Some(network),
            _ => None,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, MechanismKind::Mixture { rho } if rho > 0.0 && rho < 1.0)
    }

    /// All mechanisms expose report gradients; PA and the mixture do so
    /// through the PF adjoint.
    pub fn differentiable_wrt_reports(&self) -> bool {
        true
    }

    pub fn allocate(&self, inst: &ProblemInstance, rng: Option<&mut dyn RngCore>) -> Result<Allocation> {
        match &self.kind {
            MechanismKind::Pa => Ok(pa_allocate(inst, &self.solver)?.allocation),
            MechanismKind::Mixture { rho } => {
                let rho = *rho;
                if rho >= 1.0 {
                    return Ok(solve_pf(inst, &self.solver)?.allocation);
                }
                if rho <= 0.0 {
                    return Ok(pa_allocate(inst, &self.solver)?.allocation);
                }
                let rng = rng.ok_or(Error::MissingRng)?;
                mixture_allocate(inst, rho, rng, &self.solver)
            }
            _ => Ok(self.forward(inst)?.allocation),
        }
    }

    /// Utilities of all agents, in expectation over the mixture's coin.
    pub fn expected_utilities(&self, inst: &ProblemInstance) -> Result<Vec<f64>> {
        match &self.kind {
            MechanismKind::Mixture { rho } => {
                let pf = utility(&solve_pf(inst, &self.solver)?.allocation, inst)?;
                let pa = utility(&pa_allocate(inst, &self.solver)?.allocation, inst)?;
                Ok(pf.iter().zip(&pa).map(|(f, a)| rho * f + (1.0 - rho) * a).collect())
            }
            _ => utility(&self.allocate(inst, None)?, inst),
        }
    }

    /// Deterministic forward pass with the intermediates needed for
    /// back-propagation. Not available for PA and the mixture.
    pub fn forward(&self, inst: &ProblemInstance) -> Result<Forward> {
        match &self.kind {
            MechanismKind::Pf => {
                let sol = solve_pf(inst, &self.solver)?;
                Ok(Forward {
                    allocation: sol.allocation.clone(),
                    detail: Detail::Pf(sol),
                })
            }
            MechanismKind::RpfNet { network } => {
                let (sol, z, cache) = rpf_allocate(network, inst, &self.solver)?;
                Ok(Forward {
                    allocation: sol.allocation.clone(),
                    detail: Detail::Rpf {
                        solution: sol,
                        z,
                        cache,
                    },
                })
            }
            MechanismKind::ExsNet { network } => softmax_forward(network, inst, true),
            MechanismKind::SoftmaxNet { network } => softmax_forward(network, inst, false),
            MechanismKind::Pa | MechanismKind::Mixture { .. } => {
                Err(Error::GradientUnavailable("PA-based mechanisms have no generic backward pass"))
            }
        }
    }

    /// Back-propagates `upstream = d l / d a` (agent-major, length NM).
    pub fn backward(&self, inst: &ProblemInstance, fwd: &Forward, upstream: &[f64]) -> Result<Backward> {
        let nm = inst.dim();
        check_row("upstream gradient", upstream, nm)?;
        match (&self.kind, &fwd.detail) {
            (MechanismKind::Pf, Detail::Pf(sol)) => {
                let (values, demands, min_norm) = pf_report_gradients(sol, inst, None, upstream)?;
                Ok(Backward {
                    params: Vec::new(),
                    values,
                    demands,
                    min_norm,
                })
            }
            (MechanismKind::RpfNet { network }, Detail::Rpf { solution, z, cache }) => {
                rpf_backward(network, inst, solution, z, cache, upstream)
            }
            (
                MechanismKind::ExsNet { network } | MechanismKind::SoftmaxNet { network },
                Detail::Softmax { shares, rows, cache },
            ) => softmax_backward(network, inst, shares, *rows, cache, upstream),
            _ => Err(Error::GradientUnavailable("forward pass does not match mechanism")),
        }
    }

    /// Expected utility of `agent` (evaluated with its true row of `inst`)
    /// when it reports `(values, demands)` and the others report truthfully.
    pub fn report_utility(
        &self,
        inst: &ProblemInstance,
        agent: usize,
        values: &[f64],
        demands: &[f64],
    ) -> Result<f64> {
        let ctx = ReportContext::bare(inst, agent)?;
        Ok(self.report_impl(&ctx, values, demands, false)?.utility)
    }

    /// As [`Self::report_utility`] with the gradient with respect to the report.
    pub fn report_response(
        &self,
        inst: &ProblemInstance,
        agent: usize,
        values: &[f64],
        demands: &[f64],
    ) -> Result<ReportResponse> {
        let ctx = ReportContext::bare(inst, agent)?;
        self.report_impl(&ctx, values, demands, true)
    }

    /// Precomputes what does not depend on `agent`'s report, for repeated
    /// evaluation of many reports by the same agent.
    pub fn report_context<'a>(&self, inst: &'a ProblemInstance, agent: usize) -> Result<ReportContext<'a>> {
        let mut ctx = ReportContext::bare(inst, agent)?;
        let uses_ratio = match self.kind {
            MechanismKind::Pa => true,
            MechanismKind::Mixture { rho } => rho < 1.0,
            _ => false,
        };
        if uses_ratio && inst.weights()[agent] > 0.0 {
            ctx.leave_one_out = Some(solve_pf(&inst.without_agent(agent)?, &self.solver)?);
        }
        Ok(ctx)
    }

    pub fn report_utility_in(&self, ctx: &ReportContext, values: &[f64], demands: &[f64]) -> Result<f64> {
        Ok(self.report_impl(ctx, values, demands, false)?.utility)
    }

    pub fn report_response_in(&self, ctx: &ReportContext, values: &[f64], demands: &[f64]) -> Result<ReportResponse> {
        self.report_impl(ctx, values, demands, true)
    }

    fn report_impl(
        &self,
        ctx: &ReportContext,
        values: &[f64],
        demands: &[f64],
        want_grad: bool,
    ) -> Result<ReportResponse> {
        let (inst, agent) = (ctx.instance, ctx.agent);
        let m = inst.n_resources();
        check_row("reported values", values, m)?;
        check_row("reported demands", demands, m)?;
        let reported = inst.with_report(agent, values, demands)?;
        let tv = inst.agent_values(agent);
        let tx = inst.agent_demands(agent);
        let base = agent * m;
        let empty = || ReportResponse {
            utility: 0.0,
            grad_values: vec![0.0; m],
            grad_demands: vec![0.0; m],
            min_norm: false,
        };

        let pa_upstream = |sol: &PfSolution| -> Result<(f64, Vec<f64>)> {
            let (ratio, _) = pa_ratio(&reported, sol, agent, &self.solver, ctx.leave_one_out.as_ref())?;
            let a = &sol.allocation.amounts;
            let scaled: Vec<f64> = a[base..base + m].iter().map(|v| ratio * v).collect();
            let u = row_utility(&scaled, tv, tx);
            let g = utility_slope(&scaled, tv, tx);
            let mut up = vec![0.0; inst.dim()];
            if ratio > 0.0 {
                for r in 0..m {
                    up[base + r] = ratio * g[r];
                }
                let w_i = reported.weights()[agent];
                let coef = ratio / w_i * (0..m).map(|r| g[r] * a[base + r]).sum::<f64>();
                for j in (0..inst.n_agents()).filter(|&j| j != agent && in_log_objective(&reported, j)) {
                    let s_j = agent_inner(&reported, a, j);
                    let w_j = reported.weights()[j];
                    for r in 0..m {
                        up[j * m + r] += coef * w_j * reported.value(j, r) / s_j;
                    }
                }
            }
            Ok((u, up))
        };

        let (utility, upstream, solution): (f64, Vec<f64>, Option<PfSolution>) = match &self.kind {
            MechanismKind::Pa => {
                let sol = solve_pf(&reported, &self.solver)?;
                let (u, up) = pa_upstream(&sol)?;
                (u, up, Some(sol))
            }
            MechanismKind::Mixture { rho } => {
                let rho = *rho;
                let sol = solve_pf(&reported, &self.solver)?;
                let a = &sol.allocation.amounts[base..base + m];
                let u_pf = row_utility(a, tv, tx);
                let g_pf = utility_slope(a, tv, tx);
                let (u_pa, up_pa) = if rho < 1.0 { pa_upstream(&sol)? } else { (0.0, vec![0.0; inst.dim()]) };
                let mut up: Vec<f64> = up_pa.iter().map(|v| (1.0 - rho) * v).collect();
                for r in 0..m {
                    up[base + r] += rho * g_pf[r];
                }
                (rho * u_pf + (1.0 - rho) * u_pa, up, Some(sol))
            }
            _ => {
                let fwd = self.forward(&reported)?;
                let a = &fwd.allocation.amounts[base..base + m];
                let u = row_utility(a, tv, tx);
                if !want_grad {
                    return Ok(ReportResponse { utility: u, ..empty() });
                }
                let mut up = vec![0.0; inst.dim()];
                up[base..base + m].copy_from_slice(&utility_slope(a, tv, tx));
                let back = self.backward(&reported, &fwd, &up)?;
                return Ok(ReportResponse {
                    utility: u,
                    grad_values: back.values[base..base + m].to_vec(),
                    grad_demands: back.demands[base..base + m].to_vec(),
                    min_norm: back.min_norm,
                });
            }
        };
        if !want_grad {
            return Ok(ReportResponse { utility, ..empty() });
        }
        let sol = solution.expect("PA-based branch keeps the PF solution");
        let (gv, gx, min_norm) = pf_report_gradients(&sol, &reported, None, &upstream)?;
        Ok(ReportResponse {
            utility,
            grad_values: gv[base..base + m].to_vec(),
            grad_demands: gx[base..base + m].to_vec(),
            min_norm,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mech: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        if let MechanismKind::Mixture { rho } = mech.kind {
            Self::mixture(rho)?;
        }
        mech.solver.validate()?;
        Ok(mech)
    }
}

/// Value and demand gradients of `<upstream, a*>` through the PF solution.
fn pf_report_gradients(
    sol: &PfSolution,
    inst: &ProblemInstance,
    z: Option<&[f64]>,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    if upstream.iter().all(|u| *u == 0.0) {
        return Ok((vec![0.0; inst.dim()], vec![0.0; inst.dim()], false));
    }
    let sys = build_kkt_matrix(sol, inst, z)?;
    let adj = sys.solve_adjoint(upstream)?;
    let mut values = Vec::with_capacity(inst.dim());
    for i in 0..inst.n_agents() {
        values.extend(sys.grad_values(&adj, i)?);
    }
    Ok((values, sys.grad_demands(&adj), adj.min_norm))
}

/// Externality ratio of `agent` given the full PF solution, and the
/// leave-one-out PF objective.
fn pa_ratio(
    inst: &ProblemInstance,
    sol: &PfSolution,
    agent: usize,
    cfg: &SolverConfig,
    leave_one_out: Option<&PfSolution>,
) -> Result<(f64, f64)> {
    let w_i = inst.weights()[agent];
    if !(w_i > 0.0) {
        return Err(Error::UndefinedRatio { agent });
    }
    if !inst.agent_has_demand(agent) {
        return Ok((1.0, sol.objective));
    }
    let solved;
    let loo = match leave_one_out {
        Some(loo) => loo,
        None => {
            solved = solve_pf(&inst.without_agent(agent)?, cfg)?;
            &solved
        }
    };
    let mut log_ratio = 0.0;
    for j in (0..inst.n_agents()).filter(|&j| j != agent && in_log_objective(inst, j)) {
        let with = agent_inner(inst, &sol.allocation.amounts, j);
        let without = agent_inner(inst, &loo.allocation.amounts, j);
        if !(without > 0.0) || !(with > 0.0) {
            log::warn!("agent {j} has zero utility without agent {agent}; withholding agent {agent} fully");
            return Ok((0.0, loo.objective));
        }
        log_ratio += inst.weights()[j] * (with.ln() - without.ln());
    }
    // exact ratios never exceed 1; solver round-off can
    Ok(((log_ratio / w_i).exp().min(1.0), loo.objective))
}

/// Partial Allocation: each agent's PF bundle scaled by its externality ratio.
pub fn pa_allocate(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<PaResult> {
    let n = inst.n_agents();
    let m = inst.n_resources();
    if let Some(agent) = (0..n).find(|&i| !(inst.weights()[i] > 0.0)) {
        return Err(Error::UndefinedRatio { agent });
    }
    let sol = solve_pf(inst, cfg)?;
    let mut ratios = Vec::with_capacity(n);
    let mut loo = Vec::with_capacity(n);
    let mut amounts = sol.allocation.amounts.clone();
    for i in 0..n {
        let (r, obj) = pa_ratio(inst, &sol, i, cfg, None)?;
        for v in &mut amounts[i * m..(i + 1) * m] {
            *v *= r;
        }
        ratios.push(r);
        loo.push(obj);
    }
    Ok(PaResult {
        allocation: Allocation::new(n, m, amounts)?,
        ratios,
        leave_one_out_objectives: loo,
    })
}

/// One Bernoulli(rho) draw between PF (success) and PA.
pub fn mixture_allocate(
    inst: &ProblemInstance,
    rho: f64,
    rng: &mut dyn RngCore,
    cfg: &SolverConfig,
) -> Result<Allocation> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("mixture rho {rho} outside [0, 1]")));
    }
    if rng.gen_bool(rho) {
        Ok(solve_pf(inst, cfg)?.allocation)
    } else {
        Ok(pa_allocate(inst, cfg)?.allocation)
    }
}

/// Regularizer from the network followed by the regularized PF solve.
pub fn rpf_allocate(
    network: &MlpParams,
    inst: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(PfSolution, Vec<f64>, ForwardCache)> {
    let (z, cache) = network.forward(&inst.features())?;
    if z.len() != inst.dim() {
        return Err(Error::DimensionMismatch {
            what: "regularizer network output",
            expected: inst.dim(),
            got: z.len(),
        });
    }
    let sol = solve_regularized_pf(inst, &z, cfg)?;
    Ok((sol, z, cache))
}

/// Chains the regularizer gradient through the network: parameter gradient
/// plus report gradients from both the solver and the network input path.
pub fn rpf_backward(
    network: &MlpParams,
    inst: &ProblemInstance,
    sol: &PfSolution,
    z: &[f64],
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<Backward> {
    let nm = inst.dim();
    if upstream.iter().all(|u| *u == 0.0) {
        return Ok(Backward {
            params: vec![0.0; network.n_params()],
            values: vec![0.0; nm],
            demands: vec![0.0; nm],
            min_norm: false,
        });
    }
    let sys = build_kkt_matrix(sol, inst, Some(z))?;
    let adj = sys.solve_adjoint(upstream)?;
    let mut values = Vec::with_capacity(nm);
    for i in 0..inst.n_agents() {
        values.extend(sys.grad_values(&adj, i)?);
    }
    let mut demands = sys.grad_demands(&adj);
    let dz = sys.grad_regularizer(&adj)?;
    let (params, dinput) = network.backward(cache, &dz)?;
    for k in 0..nm {
        values[k] += dinput[k];
        demands[k] += dinput[nm + k];
    }
    Ok(Backward {
        params,
        values,
        demands,
        min_norm: adj.min_norm,
    })
}

fn softmax_forward(network: &MlpParams, inst: &ProblemInstance, synthetic: bool) -> Result<Forward> {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let rows = n + usize::from(synthetic);
    let (logits, cache) = network.forward(&inst.features())?;
    if logits.len() != rows * m {
        return Err(Error::DimensionMismatch {
            what: "softmax network output",
            expected: rows * m,
            got: logits.len(),
        });
    }
    let shares = column_softmax(&logits, rows, m);
    let mut amounts = vec![0.0; n * m];
    for i in 0..n {
        for r in 0..m {
            amounts[i * m + r] = (shares[i * m + r] * inst.budgets()[r]).min(inst.demand(i, r));
        }
    }
    Ok(Forward {
        allocation: Allocation::new(n, m, amounts)?,
        detail: Detail::Softmax { shares, rows, cache },
    })
}

/// Softmax over rows independently for each column of a `rows x m` matrix.
fn column_softmax(logits: &[f64], rows: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * m];
    for r in 0..m {
        let max = (0..rows).map(|j| logits[j * m + r]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..rows).map(|j| (logits[j * m + r] - max).exp()).sum();
        for j in 0..rows {
            out[j * m + r] = (logits[j * m + r] - max).exp() / total;
        }
    }
    out
}

/// Exact (ExS-Net) allocation for given logits, for tests and tooling.
pub fn exs_allocate(network: &MlpParams, inst: &ProblemInstance) -> Result<Allocation> {
    Ok(softmax_forward(network, inst, true)?.allocation)
}

pub fn softmax_net_allocate(network: &MlpParams, inst: &ProblemInstance) -> Result<Allocation> {
    Ok(softmax_forward(network, inst, false)?.allocation)
}

fn softmax_backward(
    network: &MlpParams,
    inst: &ProblemInstance,
    shares: &[f64],
    rows: usize,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<Backward> {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let nm = n * m;
    let mut d_share = vec![0.0; rows * m];
    let mut demands = vec![0.0; nm];
    for i in 0..n {
        for r in 0..m {
            let k = i * m + r;
            let b = inst.budgets()[r];
            if shares[k] * b < inst.demands()[k] {
                d_share[k] = upstream[k] * b;
            } else {
                demands[k] = upstream[k];
            }
        }
    }
    let mut d_logits = vec![0.0; rows * m];
    for r in 0..m {
        let dot: f64 = (0..rows).map(|j| shares[j * m + r] * d_share[j * m + r]).sum();
        for j in 0..rows {
            let k = j * m + r;
            d_logits[k] = shares[k] * (d_share[k] - dot);
        }
    }
    let (params, dinput) = network.backward(cache, &d_logits)?;
    let values = dinput[..nm].to_vec();
    for k in 0..nm {
        demands[k] += dinput[nm + k];
    }
    Ok(Backward {
        params,
        values,
        demands,
        min_norm: false,
    })
}

/// Utility of an agent from an allocation row, clipped at the given demands.
pub fn agent_utility(alloc: &Allocation, agent: usize, values: &[f64], demands: &[f64]) -> f64 {
    let m = alloc.n_resources;
    utility_with(&alloc.amounts[agent * m..(agent + 1) * m], values, demands, m)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::is_feasible;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn inst_2x2() -> ProblemInstance {
        ProblemInstance::from_rows(
            &[vec![0.9, 0.3], vec![0.4, 0.8]],
            &[vec![0.7, 0.9], vec![0.8, 0.6]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    fn small() -> NetArch {
        NetArch { hidden: 8, depth: 2 }
    }

    #[test]
    fn pf_dispatch_matches_solver() {
        let inst = inst_2x2();
        let a = Mechanism::pf().allocate(&inst, None).unwrap();
        let s = solve_pf(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(a, s.allocation);
    }

    #[test]
    fn mixture_extremes() {
        let inst = inst_2x2();
        let pf = Mechanism::pf().allocate(&inst, None).unwrap();
        let pa = Mechanism::pa().allocate(&inst, None).unwrap();
        let mut r = rng();
        for _ in 0..5 {
            assert_eq!(mixture_allocate(&inst, 1.0, &mut r, &SolverConfig::default()).unwrap(), pf);
            assert_eq!(mixture_allocate(&inst, 0.0, &mut r, &SolverConfig::default()).unwrap(), pa);
        }
        assert!(matches!(
            Mechanism::mixture(0.5).unwrap().allocate(&inst, None),
            Err(Error::MissingRng)
        ));
        assert!(Mechanism::mixture(1.5).is_err());
    }

    #[test]
    fn pa_single_agent_is_pf() {
        let inst = ProblemInstance::from_rows(&[vec![0.5, 0.7]], &[vec![0.4, 1.0]], vec![1.0, 0.5], vec![1.0])
            .unwrap();
        let res = pa_allocate(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(res.ratios, vec![1.0]);
        let pf = solve_pf(&inst, &SolverConfig::default()).unwrap();
        assert_eq!(res.allocation, pf.allocation);
    }

    #[test]
    fn pa_bounded_by_pf_and_rejects_zero_weight() {
        let inst = inst_2x2();
        let res = pa_allocate(&inst, &SolverConfig::default()).unwrap();
        let pf = solve_pf(&inst, &SolverConfig::default()).unwrap();
        for (a, b) in res.allocation.amounts.iter().zip(&pf.allocation.amounts) {
            assert!(*a <= b + 1e-8);
        }
        for r in &res.ratios {
            assert!(*r >= (-1f64).exp() - 0.01 && *r <= 1.0 + 1e-8, "{r}");
        }
        let zero_w = ProblemInstance::from_rows(
            &[vec![0.9, 0.3], vec![0.4, 0.8]],
            &[vec![0.7, 0.9], vec![0.8, 0.6]],
            vec![1.0, 1.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            pa_allocate(&zero_w, &SolverConfig::default()),
            Err(Error::UndefinedRatio { agent: 1 })
        ));
    }

    #[test]
    fn zero_network_rpf_is_pf() {
        let inst = inst_2x2();
        let sizes = layer_sizes(10, 4, 1, 4);
        let net = MlpParams::zeros(&sizes, OutputHead::Identity).unwrap();
        let mech = Mechanism::new(MechanismKind::RpfNet { network: net });
        let a = mech.allocate(&inst, None).unwrap();
        let pf = Mechanism::pf().allocate(&inst, None).unwrap();
        for (x, y) in a.amounts.iter().zip(&pf.amounts) {
            assert!((x - y).abs() <= 2e-8);
        }
    }

    #[test]
    fn equal_logits_give_uniform_shares() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.9, 0.3], vec![0.4, 0.8]],
            &[vec![0.2, 0.9], vec![0.8, 0.6]],
            vec![1.0, 1.5],
            vec![1.0, 1.0],
        )
        .unwrap();
        let exs = MlpParams::zeros(&layer_sizes(10, 3, 1, 6), OutputHead::Identity).unwrap();
        let a = exs_allocate(&exs, &inst).unwrap();
        let expected = [0.2, 0.5, 1.0 / 3.0, 0.5];
        for (x, e) in a.amounts.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12, "{a:?}");
        }
        let soft = MlpParams::zeros(&layer_sizes(10, 3, 1, 4), OutputHead::Identity).unwrap();
        let a = softmax_net_allocate(&soft, &inst).unwrap();
        let expected = [0.2, 0.75, 0.5, 0.6];
        for (x, e) in a.amounts.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12, "{a:?}");
        }
    }

    #[test]
    fn synthetic_agent_withholds_everything_in_the_limit() {
        let inst = inst_2x2();
        let mut net = MlpParams::zeros(&layer_sizes(10, 3, 1, 6), OutputHead::Identity).unwrap();
        let (_, bias) = net.layer_slices_mut(1);
        bias[4] = 800.0;
        bias[5] = 800.0;
        let a = exs_allocate(&net, &inst).unwrap();
        assert!(a.amounts.iter().all(|v| *v < 1e-300));
    }

    #[test]
    fn learned_mechanisms_always_feasible() {
        let mut r = rng();
        let mechs = [
            Mechanism::rpf_net(2, 2, small(), &mut r).unwrap(),
            Mechanism::exs_net(2, 2, small(), &mut r).unwrap(),
            Mechanism::softmax_net(2, 2, small(), &mut r).unwrap(),
        ];
        for _ in 0..20 {
            let v: Vec<f64> = (0..4).map(|_| r.gen_range(0.1..1.0)).collect();
            let x: Vec<f64> = (0..4).map(|_| if r.gen_bool(0.5) { r.gen_range(0.1..1.0) } else { 0.0 }).collect();
            let inst = ProblemInstance::new(2, 2, v, x, vec![1.0; 2], vec![1.0; 2], Default::default()).unwrap();
            for mech in &mechs {
                let a = mech.allocate(&inst, None).unwrap();
                assert!(is_feasible(&a, &inst, 1e-6), "{}", mech.name());
            }
        }
    }

    fn fd_report_check(mech: &Mechanism, inst: &ProblemInstance, tol: f64) {
        let agent = 0;
        let v: Vec<f64> = inst.agent_values(agent).iter().map(|v| 0.9 * v).collect();
        let x: Vec<f64> = inst.agent_demands(agent).iter().map(|x| x - 0.15).collect();
        let resp = mech.report_response(inst, agent, &v, &x).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            let mut vp = v.clone();
            vp[r] += h;
            let mut vm = v.clone();
            vm[r] -= h;
            let fd = (mech.report_utility(inst, agent, &vp, &x).unwrap()
                - mech.report_utility(inst, agent, &vm, &x).unwrap())
                / (2.0 * h);
            let g = resp.grad_values[r];
            assert!((fd - g).abs() <= tol * fd.abs().max(1e-2), "{} dv{r}: fd {fd} vs {g}", mech.name());
            let mut xp = x.clone();
            xp[r] += h;
            let mut xm = x.clone();
            xm[r] -= h;
            let fd = (mech.report_utility(inst, agent, &v, &xp).unwrap()
                - mech.report_utility(inst, agent, &v, &xm).unwrap())
                / (2.0 * h);
            let g = resp.grad_demands[r];
            assert!((fd - g).abs() <= tol * fd.abs().max(1e-2), "{} dx{r}: fd {fd} vs {g}", mech.name());
        }
    }

    fn interior_report_instance() -> ProblemInstance {
        // misreport far from the truth keeps PF away from kinks
        let base = ProblemInstance::from_rows(
            &[vec![0.9, 0.3], vec![0.6, 0.5]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        base
    }

    #[test]
    fn report_gradients_match_finite_differences() {
        let inst = interior_report_instance();
        let mut r = rng();
        let mut rpf = Mechanism::rpf_net(2, 2, small(), &mut r).unwrap();
        rpf.network_mut().unwrap().set_output_bias(-0.5);
        for mech in [
            Mechanism::pf(),
            Mechanism::pa(),
            Mechanism::mixture(0.3).unwrap(),
            rpf,
            Mechanism::exs_net(2, 2, small(), &mut r).unwrap(),
            Mechanism::softmax_net(2, 2, small(), &mut r).unwrap(),
        ] {
            fd_report_check(&mech, &inst, 1e-4);
        }
    }

    #[test]
    fn rpf_parameter_gradient_matches_finite_differences() {
        let inst = interior_report_instance();
        let mut r = rng();
        let mut mech = Mechanism::rpf_net(2, 2, NetArch { hidden: 6, depth: 2 }, &mut r).unwrap();
        mech.network_mut().unwrap().set_output_bias(-0.5);
        let up = [0.7, -0.3, 0.2, 0.9];
        let loss = |m: &Mechanism| -> f64 {
            let a = m.allocate(&inst, None).unwrap();
            a.amounts.iter().zip(&up).map(|(a, u)| a * u).sum()
        };
        let fwd = mech.forward(&inst).unwrap();
        let back = mech.backward(&inst, &fwd, &up).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for k in 0..mech.network().unwrap().n_params() {
            let mut p = mech.clone();
            p.network_mut().unwrap().params_mut()[k] += h;
            let mut q = mech.clone();
            q.network_mut().unwrap().params_mut()[k] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            if fd.abs() < 1e-6 && back.params[k].abs() < 1e-6 {
                continue;
            }
            checked += 1;
            assert!(
                (fd - back.params[k]).abs() <= 1e-3 * fd.abs().max(1e-3),
                "param {k}: fd {fd} vs {}",
                back.params[k]
            );
        }
        assert!(checked > 5, "only {checked} nonzero probes");
        let zero = mech.backward(&inst, &fwd, &[0.0; 4]).unwrap();
        assert!(zero.params.iter().chain(&zero.values).chain(&zero.demands).all(|g| *g == 0.0));
    }

    #[test]
    fn model_json_round_trip() {
        let mut r = rng();
        let dir = std::env::temp_dir().join(format!("pfmech-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for mech in [
            Mechanism::pf(),
            Mechanism::mixture(0.25).unwrap(),
            Mechanism::exs_net(2, 2, small(), &mut r).unwrap(),
        ] {
            let path = dir.join("m.json");
            mech.save(&path).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            assert!(text.contains("\"kind\""));
            assert_eq!(Mechanism::load(&path).unwrap(), mech);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
