//! Primal-dual interior-point solver for the proportional-fairness program
//!
//! ```text
//! minimize   -sum_i w_i log(v_i . a_i) + <a, z>
//! subject to 0 <= a <= x,   D a <= b
//! ```
//!
//! with `z = 0` for plain PF. Entries with zero demand (or on a resource
//! with zero budget) are fixed at zero and removed before the Newton
//! iterations; their dual multipliers are recovered from stationarity.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Allocation, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Target for the KKT residual of the returned solution.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Centering factor applied to the average complementarity each iteration.
    pub barrier_decrease: f64,
    /// Barrier weight used to seed the dual variables.
    pub initial_barrier: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            barrier_decrease: 0.1,
            initial_barrier: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "solver tolerance and max_iterations must be positive".into(),
            ));
        }
        if !(self.barrier_decrease > 0.0 && self.barrier_decrease < 1.0) {
            return Err(Error::InvalidConfig("barrier_decrease must lie in (0, 1)".into()));
        }
        if !(self.initial_barrier > 0.0) {
            return Err(Error::InvalidConfig("initial_barrier must be positive".into()));
        }
        Ok(())
    }
}

/// Primal allocation and the dual multipliers of the three constraint families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSolution {
    pub allocation: Allocation,
    /// Multipliers of `a >= 0`.
    pub dual_lower: Vec<f64>,
    /// Multipliers of `a <= x`.
    pub dual_upper: Vec<f64>,
    /// Multipliers of `D a <= b`.
    pub dual_budget: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

pub fn solve_pf(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<PfSolution> {
    solve_impl(inst, None, cfg)
}

/// Solves the PF program with the linear term `<a, z>` added to the objective.
pub fn solve_regularized_pf(
    inst: &ProblemInstance,
    z: &[f64],
    cfg: &SolverConfig,
) -> Result<PfSolution> {
    if z.len() != inst.dim() {
        return Err(Error::DimensionMismatch {
            what: "regularizer",
            expected: inst.dim(),
            got: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInstance("regularizer has non-finite entries".into()));
    }
    solve_impl(inst, Some(z), cfg)
}

/// Whether agent `i` contributes `-w_i log(v_i . a_i)` to the objective.
pub(crate) fn in_log_objective(inst: &ProblemInstance, agent: usize) -> bool {
    inst.weights()[agent] > 0.0 && inst.agent_has_demand(agent)
}

/// Largest violation among stationarity, primal feasibility, dual sign and
/// complementary slackness.
pub fn kkt_residual(sol: &PfSolution, inst: &ProblemInstance, z: Option<&[f64]>) -> f64 {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let a = &sol.allocation.amounts;
    if a.len() != n * m
        || sol.dual_lower.len() != n * m
        || sol.dual_upper.len() != n * m
        || sol.dual_budget.len() != m
    {
        return f64::INFINITY;
    }
    let x = inst.demands();
    let v = inst.values();
    let b = inst.budgets();
    let (mu, nu, lam) = (&sol.dual_lower, &sol.dual_upper, &sol.dual_budget);
    if a.iter().chain(mu).chain(nu).chain(lam).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let in_obj = in_log_objective(inst, i);
        let s: f64 = (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum();
        if in_obj && s <= 0.0 {
            return f64::INFINITY;
        }
        for r in 0..m {
            let k = i * m + r;
            let log_term = if in_obj { -inst.weights()[i] * v[k] / s } else { 0.0 };
            let zk = z.map_or(0.0, |z| z[k]);
            let stat = log_term + zk - mu[k] + nu[k] + lam[r];
            worst = worst
                .max(stat.abs())
                .max((-a[k]).max(0.0))
                .max((a[k] - x[k]).max(0.0))
                .max((-mu[k]).max(0.0))
                .max((-nu[k]).max(0.0))
                .max((mu[k] * a[k]).abs())
                .max((nu[k] * (x[k] - a[k])).abs());
        }
    }
    let totals = sol.allocation.resource_totals();
    for r in 0..m {
        worst = worst
            .max((totals[r] - b[r]).max(0.0))
            .max((-lam[r]).max(0.0))
            .max((lam[r] * (b[r] - totals[r])).abs());
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

/// Reduced problem over the entries that are not fixed at zero.
#[derive(Default)]
struct Reduced {
    /// flat (agent, resource) index of each free variable
    entries: Vec<usize>,
    /// position of the variable's resource in `rows`
    row_of: Vec<usize>,
    /// resources that carry at least one free variable
    rows: Vec<usize>,
    /// free variables of agent `i` are `agent_start[i]..agent_start[i + 1]`
    agent_start: Vec<usize>,
    upper: Vec<f64>,
    value: Vec<f64>,
    linear: Vec<f64>,
    /// per agent, zero when the agent is outside the log objective
    weight: Vec<f64>,
    budget: Vec<f64>,
    /// reduced row of each resource, `usize::MAX` when it has no variable
    row_pos: Vec<usize>,
}

impl Reduced {
    fn rebuild(&mut self, inst: &ProblemInstance, z: Option<&[f64]>) -> Result<()> {
        let (n, m) = (inst.n_agents(), inst.n_resources());
        let (x, b) = (inst.demands(), inst.budgets());
        self.entries.clear();
        self.agent_start.clear();
        self.weight.clear();
        self.row_pos.clear();
        self.row_pos.resize(m, usize::MAX);
        for i in 0..n {
            self.agent_start.push(self.entries.len());
            for r in 0..m {
                let k = i * m + r;
                if x[k] > 0.0 && b[r] > 0.0 {
                    self.entries.push(k);
                    self.row_pos[r] = 0;
                }
            }
            let in_obj = in_log_objective(inst, i);
            if in_obj && self.entries.len() == self.agent_start[i] {
                return Err(Error::InfeasibleInterior { agent: i });
            }
            self.weight.push(if in_obj { inst.weights()[i] } else { 0.0 });
        }
        self.agent_start.push(self.entries.len());
        self.rows.clear();
        self.budget.clear();
        for r in 0..m {
            if self.row_pos[r] != usize::MAX {
                self.row_pos[r] = self.rows.len();
                self.rows.push(r);
                self.budget.push(b[r]);
            }
        }
        self.row_of.clear();
        self.upper.clear();
        self.value.clear();
        self.linear.clear();
        for &k in &self.entries {
            self.row_of.push(self.row_pos[k % m]);
            self.upper.push(x[k]);
            self.value.push(inst.values()[k]);
            self.linear.push(z.map_or(0.0, |z| z[k]));
        }
        Ok(())
    }

    fn nf(&self) -> usize {
        self.entries.len()
    }

    fn n_agents(&self) -> usize {
        self.weight.len()
    }

    fn agent_vars(&self, i: usize) -> std::ops::Range<usize> {
        self.agent_start[i]..self.agent_start[i + 1]
    }

    /// Fills agent utilities, objective gradient and budget slacks. Returns
    /// false when an agent in the objective has no positive utility.
    fn evaluate(&self, a: &[f64], ev: &mut Eval) -> bool {
        let mut ok = true;
        for i in 0..self.n_agents() {
            let vars = self.agent_vars(i);
            let s: f64 = self.value[vars.clone()].iter().zip(&a[vars.clone()]).map(|(v, a)| v * a).sum();
            ev.s[i] = s;
            let c = if self.weight[i] > 0.0 {
                ok &= s > 0.0;
                -self.weight[i] / s
            } else {
                0.0
            };
            for ((g, v), l) in ev.g[vars.clone()].iter_mut().zip(&self.value[vars.clone()]).zip(&self.linear[vars]) {
                *g = c * v + l;
            }
        }
        self.slacks(a, &mut ev.sb);
        ev.ok = ok;
        ok
    }

    fn slacks(&self, a: &[f64], sb: &mut [f64]) {
        sb.copy_from_slice(&self.budget);
        for (j, &aj) in a.iter().enumerate() {
            sb[self.row_of[j]] -= aj;
        }
    }

    /// Max-norm KKT violation of an evaluated iterate.
    fn residual(&self, it: &Iterate, ev: &Eval) -> f64 {
        if !ev.ok {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for j in 0..self.nf() {
            let stat = ev.g[j] - it.mu[j] + it.nu[j] + it.lam[self.row_of[j]];
            worst = worst
                .max(stat.abs())
                .max((it.mu[j] * it.a[j]).abs())
                .max((it.nu[j] * (self.upper[j] - it.a[j])).abs());
        }
        for (l, s) in it.lam.iter().zip(&ev.sb) {
            worst = worst.max((l * s).abs());
        }
        if worst.is_nan() {
            f64::INFINITY
        } else {
            worst
        }
    }

    /// Residual of the barrier-perturbed KKT system at target `eta`.
    fn perturbed_norm(&self, it: &Iterate, eta: f64, ev: &Eval) -> f64 {
        if !ev.ok {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for j in 0..self.nf() {
            let stat = ev.g[j] - it.mu[j] + it.nu[j] + it.lam[self.row_of[j]];
            let lo = it.mu[j] * it.a[j] - eta;
            let hi = it.nu[j] * (self.upper[j] - it.a[j]) - eta;
            acc += stat * stat + lo * lo + hi * hi;
        }
        for (l, s) in it.lam.iter().zip(&ev.sb) {
            let c = l * s - eta;
            acc += c * c;
        }
        let norm = acc.sqrt();
        if norm.is_nan() {
            f64::INFINITY
        } else {
            norm
        }
    }

    fn average_complementarity(&self, it: &Iterate, ev: &Eval) -> f64 {
        let mut total = 0.0;
        for j in 0..self.nf() {
            total += it.mu[j] * it.a[j] + it.nu[j] * (self.upper[j] - it.a[j]);
        }
        total += it.lam.iter().zip(&ev.sb).map(|(l, s)| l * s).sum::<f64>();
        total / (2 * self.nf() + self.rows.len()) as f64
    }
}

/// Utilities, gradient and budget slacks at one iterate.
#[derive(Default)]
struct Eval {
    s: Vec<f64>,
    g: Vec<f64>,
    sb: Vec<f64>,
    ok: bool,
}

impl Eval {
    fn reset(&mut self, red: &Reduced) {
        resize(&mut self.s, red.n_agents());
        resize(&mut self.g, red.nf());
        resize(&mut self.sb, red.rows.len());
        self.ok = false;
    }
}

fn resize(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

/// Scratch buffers reused across iterations of one solve.
#[derive(Default)]
struct Work {
    cur: Eval,
    next: Eval,
    sb: Vec<f64>,
    k: Vec<f64>,
    k_copy: Vec<f64>,
    da: Vec<f64>,
    dmu: Vec<f64>,
    dnu: Vec<f64>,
    dlam: Vec<f64>,
    dsb: Vec<f64>,
}

impl Work {
    fn reset(&mut self, red: &Reduced) {
        let (nf, nr) = (red.nf(), red.rows.len());
        self.cur.reset(red);
        self.next.reset(red);
        for v in [&mut self.da, &mut self.dmu, &mut self.dnu] {
            resize(v, nf);
        }
        for v in [&mut self.sb, &mut self.dlam, &mut self.dsb] {
            resize(v, nr);
        }
        resize(&mut self.k, nf * nf);
        resize(&mut self.k_copy, nf * nf);
    }
}

#[derive(Clone, Default)]
struct Iterate {
    a: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    lam: Vec<f64>,
}

impl Iterate {
    fn start(&mut self, red: &Reduced, barrier: f64, w: &mut Work) {
        let nf = red.nf();
        // per-row scale so the start sits strictly inside the budget
        w.dsb.fill(0.0);
        for j in 0..nf {
            w.dsb[red.row_of[j]] += red.upper[j];
        }
        self.a.clear();
        self.a
            .extend((0..nf).map(|j| red.upper[j] * (0.5 * red.budget[red.row_of[j]] / w.dsb[red.row_of[j]]).min(0.5)));
        red.slacks(&self.a, &mut w.sb);
        self.mu.clear();
        self.mu.extend(self.a.iter().map(|&aj| barrier / aj));
        self.nu.clear();
        self.nu.extend((0..nf).map(|j| barrier / (red.upper[j] - self.a[j])));
        self.lam.clear();
        self.lam.extend(w.sb.iter().map(|&s| barrier / s));
    }

    fn copy_from(&mut self, other: &Iterate) {
        self.a.clone_from(&other.a);
        self.mu.clone_from(&other.mu);
        self.nu.clone_from(&other.nu);
        self.lam.clone_from(&other.lam);
    }
}

/// One damped Newton step on the perturbed KKT system from an iterate
/// evaluated in `w.cur`, written into `trial` and evaluated in `w.next`.
fn newton_step(red: &Reduced, it: &Iterate, eta: f64, w: &mut Work, trial: &mut Iterate) -> Result<()> {
    let nf = red.nf();
    let nr = red.rows.len();

    w.k.fill(0.0);
    for i in 0..red.n_agents() {
        if red.weight[i] <= 0.0 {
            continue;
        }
        let c = red.weight[i] / (w.cur.s[i] * w.cur.s[i]);
        for p in red.agent_vars(i) {
            let cp = c * red.value[p];
            for q in red.agent_vars(i) {
                w.k[p * nf + q] += cp * red.value[q];
            }
        }
    }
    for p in 0..nf {
        let rp = red.row_of[p];
        let c = it.lam[rp] / w.cur.sb[rp];
        for q in 0..nf {
            if red.row_of[q] == rp {
                w.k[p * nf + q] += c;
            }
        }
        let lo = it.a[p];
        let hi = red.upper[p] - it.a[p];
        w.k[p * nf + p] += it.mu[p] / lo + it.nu[p] / hi;
        w.da[p] = -(w.cur.g[p] - eta / lo + eta / hi + eta / w.cur.sb[rp]);
    }
    w.k_copy.copy_from_slice(&w.k);
    if cholesky_in_place(&mut w.k, nf) {
        cholesky_solve(&w.k, nf, &mut w.da);
    } else {
        let lu = DMatrix::from_row_slice(nf, nf, &w.k_copy).lu();
        let da = lu
            .solve(&DVector::from_column_slice(&w.da))
            .ok_or_else(|| Error::Factorization("singular Newton system".into()))?;
        w.da.copy_from_slice(da.as_slice());
    }

    w.dsb.fill(0.0);
    for j in 0..nf {
        w.dsb[red.row_of[j]] -= w.da[j];
    }
    for j in 0..nf {
        w.dmu[j] = (eta - it.mu[j] * it.a[j] - it.mu[j] * w.da[j]) / it.a[j];
        let hi = red.upper[j] - it.a[j];
        w.dnu[j] = (eta - it.nu[j] * hi + it.nu[j] * w.da[j]) / hi;
    }
    for p in 0..nr {
        w.dlam[p] = (eta - it.lam[p] * w.cur.sb[p] - it.lam[p] * w.dsb[p]) / w.cur.sb[p];
    }

    // fraction-to-boundary
    let mut alpha_max: f64 = 1.0;
    let mut limit = |val: f64, step: f64| {
        if step < 0.0 {
            alpha_max = alpha_max.min(-val / step);
        }
    };
    for j in 0..nf {
        limit(it.a[j], w.da[j]);
        limit(red.upper[j] - it.a[j], -w.da[j]);
        limit(it.mu[j], w.dmu[j]);
        limit(it.nu[j], w.dnu[j]);
    }
    for p in 0..nr {
        limit(w.cur.sb[p], w.dsb[p]);
        limit(it.lam[p], w.dlam[p]);
    }
    let mut alpha = (0.995 * alpha_max).min(1.0);

    let base = red.perturbed_norm(it, eta, &w.cur);
    for _ in 0..40 {
        for j in 0..nf {
            trial.a[j] = it.a[j] + alpha * w.da[j];
            trial.mu[j] = it.mu[j] + alpha * w.dmu[j];
            trial.nu[j] = it.nu[j] + alpha * w.dnu[j];
        }
        for p in 0..nr {
            trial.lam[p] = it.lam[p] + alpha * w.dlam[p];
        }
        red.evaluate(&trial.a, &mut w.next);
        if red.perturbed_norm(trial, eta, &w.next) <= (1.0 - 0.01 * alpha) * base {
            break;
        }
        alpha *= 0.5;
    }
    Ok(())
}

/// Row-major Cholesky factorization, lower factor left in place.
fn cholesky_in_place(k: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = k[j * n + j];
        for p in 0..j {
            d -= k[j * n + p] * k[j * n + p];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        k[j * n + j] = d;
        for i in j + 1..n {
            let mut s = k[i * n + j];
            for p in 0..j {
                s -= k[i * n + p] * k[j * n + p];
            }
            k[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in i + 1..n {
            s -= l[p * n + i] * b[p];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Per-thread buffers so repeated small solves do not allocate.
#[derive(Default)]
struct Scratch {
    red: Reduced,
    work: Work,
    it: Iterate,
    trial: Iterate,
    best: Iterate,
    snapped: Iterate,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

fn solve_impl(inst: &ProblemInstance, z: Option<&[f64]>, cfg: &SolverConfig) -> Result<PfSolution> {
    cfg.validate()?;
    SCRATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut scratch) => solve_with(inst, z, cfg, &mut scratch),
        Err(_) => solve_with(inst, z, cfg, &mut Scratch::default()),
    })
}

fn solve_with(inst: &ProblemInstance, z: Option<&[f64]>, cfg: &SolverConfig, sc: &mut Scratch) -> Result<PfSolution> {
    let Scratch {
        red,
        work,
        it,
        trial,
        best,
        snapped,
    } = sc;
    red.rebuild(inst, z)?;
    work.reset(red);
    it.start(red, cfg.initial_barrier, work);
    if red.nf() == 0 {
        return Ok(assemble(red, it, inst, z, 0));
    }
    trial.copy_from(it);
    best.copy_from(it);
    red.evaluate(&it.a, &mut work.cur);
    let mut best_res = f64::INFINITY;
    // iterations spent converged but unpolishable (degenerate bounds)
    let mut converged_for = 0;
    for iteration in 0..cfg.max_iterations {
        let res = red.residual(it, &work.cur);
        if !res.is_finite() {
            // a Newton step landed on a bound; keep the best iterate seen
            if best_res <= cfg.tolerance {
                return Ok(assemble(red, best, inst, z, iteration));
            }
            break;
        }
        if res <= cfg.tolerance {
            let polished = polish(red, it, snapped, &mut work.sb, inst, z, iteration);
            if polished.kkt_residual <= cfg.tolerance {
                return Ok(polished);
            }
            converged_for += 1;
            if converged_for > 25 {
                return Ok(assemble(red, it, inst, z, iteration));
            }
        }
        if res < best_res {
            best_res = res;
            best.copy_from(it);
        }
        let eta = cfg.barrier_decrease * red.average_complementarity(it, &work.cur);
        newton_step(red, it, eta, work, trial)?;
        std::mem::swap(it, trial);
        std::mem::swap(&mut work.cur, &mut work.next);
    }
    let raw = assemble(red, it, inst, z, cfg.max_iterations);
    let best = assemble(red, best, inst, z, cfg.max_iterations);
    let best = if best.kkt_residual < raw.kkt_residual { best } else { raw };
    Err(Error::MaxIterations {
        iterations: cfg.max_iterations,
        residual: best.kkt_residual,
        best: Box::new(best),
    })
}

/// Snaps primal entries onto active bounds and zeroes multipliers of slack
/// constraints.
#[allow(clippy::too_many_arguments)]
fn polish(
    red: &Reduced,
    it: &Iterate,
    p: &mut Iterate,
    sb: &mut [f64],
    inst: &ProblemInstance,
    z: Option<&[f64]>,
    iterations: usize,
) -> PfSolution {
    p.copy_from(it);
    for j in 0..red.nf() {
        let x = red.upper[j];
        if p.mu[j] > p.a[j] {
            p.a[j] = 0.0;
        } else {
            p.mu[j] = 0.0;
        }
        if p.nu[j] > x - p.a[j] {
            p.a[j] = x;
        } else {
            p.nu[j] = 0.0;
        }
    }
    red.slacks(&p.a, sb);
    for (l, s) in p.lam.iter_mut().zip(sb.iter()) {
        if *l <= *s {
            *l = 0.0;
        }
    }
    assemble(red, p, inst, z, iterations)
}

/// Expands a reduced iterate to full-size primal and dual arrays.
fn assemble(red: &Reduced, it: &Iterate, inst: &ProblemInstance, z: Option<&[f64]>, iterations: usize) -> PfSolution {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let mut a = vec![0.0; n * m];
    for (j, &k) in red.entries.iter().enumerate() {
        a[k] = it.a[j].clamp(0.0, inst.demands()[k]);
    }
    // round-off can leave a budget overshot by ~1e-9; trim the free entries
    for r in 0..m {
        let total: f64 = (0..n).map(|i| a[i * m + r]).sum();
        let excess = total - inst.budgets()[r];
        if excess > 0.0 {
            let free: f64 = red.entries.iter().filter(|&&k| k % m == r).map(|&k| a[k]).sum();
            if free > excess {
                let scale = 1.0 - excess / free;
                for &k in red.entries.iter().filter(|&&k| k % m == r) {
                    a[k] *= scale;
                }
            }
        }
    }
    let v = inst.values();
    let w = inst.weights();
    let s: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum())
        .collect();
    let drive = |k: usize| -> f64 {
        let i = k / m;
        let log_part = if red.weight[i] > 0.0 && s[i] > 0.0 {
            w[i] * v[k] / s[i]
        } else {
            0.0
        };
        log_part - z.map_or(0.0, |z| z[k])
    };
    let mut lam = vec![0.0; m];
    for r in 0..m {
        lam[r] = match red.row_pos[r] {
            usize::MAX if inst.budgets()[r] <= 0.0 => {
                // Resources with zero budget carry no free variable; price them
                // at the largest marginal gain so every fixed entry is dual
                // feasible.
                (0..n)
                    .filter(|&i| inst.demands()[i * m + r] > 0.0)
                    .map(|i| drive(i * m + r))
                    .fold(0.0, f64::max)
            }
            usize::MAX => 0.0,
            p => it.lam[p],
        };
    }
    // stationarity for fixed entries, then overwritten on the free ones
    let mut mu = vec![0.0; n * m];
    let mut nu = vec![0.0; n * m];
    for k in 0..n * m {
        let slack = drive(k) - lam[k % m];
        nu[k] = slack.max(0.0);
        mu[k] = (-slack).max(0.0);
    }
    for (j, &k) in red.entries.iter().enumerate() {
        mu[k] = it.mu[j];
        nu[k] = it.nu[j];
    }
    let allocation = Allocation {
        n_agents: n,
        n_resources: m,
        amounts: a,
    };
    let mut sol = PfSolution {
        objective: 0.0,
        allocation,
        dual_lower: mu,
        dual_upper: nu,
        dual_budget: lam,
        kkt_residual: 0.0,
        iterations,
    };
    sol.objective = objective_of(&sol.allocation, inst, z);
    sol.kkt_residual = kkt_residual(&sol, inst, z);
    sol
}

/// `-sum_i w_i log(v_i . a_i) + <a, z>` over agents in the log objective.
pub fn objective_of(alloc: &Allocation, inst: &ProblemInstance, z: Option<&[f64]>) -> f64 {
    let m = inst.n_resources();
    let mut obj = 0.0;
    for i in 0..inst.n_agents() {
        if in_log_objective(inst, i) {
            let s: f64 = (0..m).map(|r| inst.value(i, r) * alloc.get(i, r)).sum();
            obj -= inst.weights()[i] * s.ln();
        }
    }
    if let Some(z) = z {
        obj += z.iter().zip(&alloc.amounts).map(|(z, a)| z * a).sum::<f64>();
    }
    obj
}
