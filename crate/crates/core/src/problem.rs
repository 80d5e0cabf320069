//! Allocation problems and the scalar metrics computed on them.
//!
//! Matrices indexed by (agent, resource) are stored as flat agent-major
//! vectors: entry `(i, m)` lives at `i * n_resources + m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box limits of the value space and of the (positive) demand space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub v_lo: f64,
    pub v_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl Default for BoxBounds {
    fn default() -> Self {
        Self {
            v_lo: 0.1,
            v_hi: 1.0,
            x_lo: 0.1,
            x_hi: 1.0,
        }
    }
}

impl BoxBounds {
    pub fn clamp_value(&self, v: f64) -> f64 {
        v.clamp(self.v_lo, self.v_hi)
    }

    pub fn clamp_demand(&self, x: f64) -> f64 {
        x.clamp(self.x_lo, self.x_hi)
    }
}

const BOX_SLACK: f64 = 1e-12;

/// One allocation problem: reported values, demands, budgets and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRepr", into = "InstanceRepr")]
pub struct ProblemInstance {
    n_agents: usize,
    n_resources: usize,
    values: Vec<f64>,
    demands: Vec<f64>,
    budgets: Vec<f64>,
    weights: Vec<f64>,
    bounds: BoxBounds,
}

impl ProblemInstance {
    /// Builds and validates an instance from flat agent-major matrices.
    pub fn new(
        n_agents: usize,
        n_resources: usize,
        values: Vec<f64>,
        demands: Vec<f64>,
        budgets: Vec<f64>,
        weights: Vec<f64>,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let inst = Self {
            n_agents,
            n_resources,
            values,
            demands,
            budgets,
            weights,
            bounds,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Builds an instance from per-agent rows, with default box bounds.
    pub fn from_rows(
        values: &[Vec<f64>],
        demands: &[Vec<f64>],
        budgets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        Self::from_rows_with_bounds(values, demands, budgets, weights, BoxBounds::default())
    }

    pub fn from_rows_with_bounds(
        values: &[Vec<f64>],
        demands: &[Vec<f64>],
        budgets: Vec<f64>,
        weights: Vec<f64>,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let n = values.len();
        let m = budgets.len();
        let flatten = |rows: &[Vec<f64>], what: &'static str| -> Result<Vec<f64>> {
            if rows.len() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: rows.len(),
                });
            }
            let mut out = Vec::with_capacity(n * m);
            for row in rows {
                if row.len() != m {
                    return Err(Error::DimensionMismatch {
                        what,
                        expected: m,
                        got: row.len(),
                    });
                }
                out.extend_from_slice(row);
            }
            Ok(out)
        };
        let v = flatten(values, "value rows")?;
        let x = flatten(demands, "demand rows")?;
        Self::new(n, m, v, x, budgets, weights, bounds)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_agents, self.n_resources);
        if n == 0 || m == 0 {
            return Err(Error::InvalidInstance(
                "need at least one agent and one resource".into(),
            ));
        }
        check_len("values", self.values.len(), n * m)?;
        check_len("demands", self.demands.len(), n * m)?;
        check_len("budgets", self.budgets.len(), m)?;
        check_len("weights", self.weights.len(), n)?;
        let b = &self.bounds;
        if !(b.v_lo > 0.0 && b.v_lo <= b.v_hi && b.x_lo >= 0.0 && b.x_lo <= b.x_hi) {
            return Err(Error::InvalidInstance(format!("bad box bounds {b:?}")));
        }
        for (k, &v) in self.values.iter().enumerate() {
            if !v.is_finite() || v < b.v_lo - BOX_SLACK || v > b.v_hi + BOX_SLACK {
                return Err(Error::InvalidInstance(format!(
                    "value {v} at entry {k} outside [{}, {}]",
                    b.v_lo, b.v_hi
                )));
            }
        }
        for (k, &x) in self.demands.iter().enumerate() {
            if !x.is_finite() || x < 0.0 || x > b.x_hi + BOX_SLACK {
                return Err(Error::InvalidInstance(format!(
                    "demand {x} at entry {k} outside [0, {}]",
                    b.x_hi
                )));
            }
        }
        if self.budgets.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInstance("negative or non-finite budget".into()));
        }
        if self.weights.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInstance("negative or non-finite weight".into()));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_resources(&self) -> usize {
        self.n_resources
    }

    /// Number of allocation variables, `N * M`.
    pub fn dim(&self) -> usize {
        self.n_agents * self.n_resources
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn demands(&self) -> &[f64] {
        &self.demands
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    #[inline]
    pub fn idx(&self, agent: usize, resource: usize) -> usize {
        agent * self.n_resources + resource
    }

    pub fn value(&self, agent: usize, resource: usize) -> f64 {
        self.values[self.idx(agent, resource)]
    }

    pub fn demand(&self, agent: usize, resource: usize) -> f64 {
        self.demands[self.idx(agent, resource)]
    }

    pub fn agent_values(&self, agent: usize) -> &[f64] {
        let m = self.n_resources;
        &self.values[agent * m..(agent + 1) * m]
    }

    pub fn agent_demands(&self, agent: usize) -> &[f64] {
        let m = self.n_resources;
        &self.demands[agent * m..(agent + 1) * m]
    }

    /// Whether the agent can obtain positive utility at all (`v_i . x_i > 0`).
    pub fn agent_has_demand(&self, agent: usize) -> bool {
        self.agent_values(agent)
            .iter()
            .zip(self.agent_demands(agent))
            .any(|(v, x)| v * x > 0.0)
    }

    pub fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.n_agents {
            return Err(Error::IndexOutOfRange {
                index: agent,
                len: self.n_agents,
            });
        }
        Ok(())
    }

    /// Copy of the instance with one agent's report replaced.
    pub fn with_report(&self, agent: usize, values: &[f64], demands: &[f64]) -> Result<Self> {
        self.check_agent(agent)?;
        let m = self.n_resources;
        check_len("reported values", values.len(), m)?;
        check_len("reported demands", demands.len(), m)?;
        let mut out = self.clone();
        out.values[agent * m..(agent + 1) * m].copy_from_slice(values);
        out.demands[agent * m..(agent + 1) * m].copy_from_slice(demands);
        out.validate()?;
        Ok(out)
    }

    /// Copy of the instance with one agent's demand row zeroed.
    pub fn without_agent(&self, agent: usize) -> Result<Self> {
        self.check_agent(agent)?;
        let m = self.n_resources;
        let mut out = self.clone();
        out.demands[agent * m..(agent + 1) * m].fill(0.0);
        Ok(out)
    }

    pub fn with_bounds(mut self, bounds: BoxBounds) -> Result<Self> {
        self.bounds = bounds;
        self.validate()?;
        Ok(self)
    }

    /// Concatenated `(v, x, b)` feature vector of length `2NM + M`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim() + self.n_resources);
        out.extend_from_slice(&self.values);
        out.extend_from_slice(&self.demands);
        out.extend_from_slice(&self.budgets);
        out
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct InstanceRepr {
    n_agents: usize,
    n_resources: usize,
    values: Vec<Vec<f64>>,
    demands: Vec<Vec<f64>>,
    budgets: Vec<f64>,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "is_default_bounds")]
    bounds: Option<BoxBounds>,
}

fn is_default_bounds(b: &Option<BoxBounds>) -> bool {
    b.map_or(true, |b| b == BoxBounds::default())
}

impl TryFrom<InstanceRepr> for ProblemInstance {
    type Error = Error;

    fn try_from(r: InstanceRepr) -> Result<Self> {
        check_len("value rows", r.values.len(), r.n_agents)?;
        check_len("budgets", r.budgets.len(), r.n_resources)?;
        Self::from_rows_with_bounds(
            &r.values,
            &r.demands,
            r.budgets,
            r.weights,
            r.bounds.unwrap_or_default(),
        )
    }
}

impl From<ProblemInstance> for InstanceRepr {
    fn from(p: ProblemInstance) -> Self {
        let m = p.n_resources;
        let rows = |flat: &[f64]| flat.chunks(m).map(<[f64]>::to_vec).collect();
        Self {
            n_agents: p.n_agents,
            n_resources: m,
            values: rows(&p.values),
            demands: rows(&p.demands),
            budgets: p.budgets,
            weights: p.weights,
            bounds: Some(p.bounds),
        }
    }
}

/// An `N x M` allocation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub n_agents: usize,
    pub n_resources: usize,
    pub amounts: Vec<f64>,
}

impl Allocation {
    pub fn new(n_agents: usize, n_resources: usize, amounts: Vec<f64>) -> Result<Self> {
        check_len("allocation", amounts.len(), n_agents * n_resources)?;
        Ok(Self {
            n_agents,
            n_resources,
            amounts,
        })
    }

    pub fn zeros(n_agents: usize, n_resources: usize) -> Self {
        Self {
            n_agents,
            n_resources,
            amounts: vec![0.0; n_agents * n_resources],
        }
    }

    pub fn get(&self, agent: usize, resource: usize) -> f64 {
        self.amounts[agent * self.n_resources + resource]
    }

    pub fn agent(&self, agent: usize) -> &[f64] {
        let m = self.n_resources;
        &self.amounts[agent * m..(agent + 1) * m]
    }

    /// Column sums `D a`.
    pub fn resource_totals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_resources];
        for row in self.amounts.chunks(self.n_resources) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        out
    }

    fn check_shape(&self, inst: &ProblemInstance) -> Result<()> {
        if self.n_agents != inst.n_agents || self.n_resources != inst.n_resources {
            return Err(Error::DimensionMismatch {
                what: "allocation shape",
                expected: inst.dim(),
                got: self.amounts.len(),
            });
        }
        Ok(())
    }
}

/// Thresholded-additive utility of every agent: `u_i = sum_m v_im min(a_im, x_im)`.
pub fn utility(alloc: &Allocation, inst: &ProblemInstance) -> Result<Vec<f64>> {
    alloc.check_shape(inst)?;
    Ok(utility_with(&alloc.amounts, inst.values(), inst.demands(), inst.n_resources()))
}

/// Utility for raw agent-major slices, used where values and demands differ
/// from the reported instance (true preferences under a misreport).
pub fn utility_with(amounts: &[f64], values: &[f64], demands: &[f64], m: usize) -> Vec<f64> {
    amounts
        .chunks(m)
        .zip(values.chunks(m))
        .zip(demands.chunks(m))
        .map(|((a, v), x)| {
            a.iter()
                .zip(v)
                .zip(x)
                .map(|((a, v), x)| v * a.min(*x))
                .sum()
        })
        .collect()
}

/// Weighted log Nash social welfare `sum_i w_i log u_i`. Agents with zero
/// weight are skipped.
pub fn log_nsw(alloc: &Allocation, inst: &ProblemInstance) -> Result<f64> {
    let u = utility(alloc, inst)?;
    let mut total = 0.0;
    for (agent, (&ui, &wi)) in u.iter().zip(inst.weights()).enumerate() {
        if wi == 0.0 {
            continue;
        }
        if ui <= 0.0 {
            return Err(Error::NonPositiveUtility { agent, utility: ui });
        }
        total += wi * ui.ln();
    }
    Ok(total)
}

/// Nash social welfare `prod_i u_i^{w_i}`; zero when a weighted agent gets nothing.
pub fn nsw(alloc: &Allocation, inst: &ProblemInstance) -> Result<f64> {
    match log_nsw(alloc, inst) {
        Ok(l) => Ok(l.exp()),
        Err(Error::NonPositiveUtility { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Fraction of the total budget that is allocated.
pub fn efficiency(alloc: &Allocation, inst: &ProblemInstance) -> Result<f64> {
    alloc.check_shape(inst)?;
    let total_budget: f64 = inst.budgets().iter().sum();
    if total_budget <= 0.0 {
        return Err(Error::ZeroBudget);
    }
    Ok(alloc.amounts.iter().sum::<f64>() / total_budget)
}

/// Membership in `{0 <= a <= x, D a <= b}` up to `tol`.
pub fn is_feasible(alloc: &Allocation, inst: &ProblemInstance, tol: f64) -> bool {
    if alloc.check_shape(inst).is_err() {
        return false;
    }
    let within_box = alloc
        .amounts
        .iter()
        .zip(inst.demands())
        .all(|(&a, &x)| a >= -tol && a <= x + tol);
    within_box
        && alloc
            .resource_totals()
            .iter()
            .zip(inst.budgets())
            .all(|(&s, &b)| s <= b + tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: Vec<f64>, x: Vec<f64>) -> ProblemInstance {
        let m = v.len();
        ProblemInstance::from_rows(&[v], &[x], vec![1.0; m], vec![1.0]).unwrap()
    }

    #[test]
    fn utility_examples() {
        let inst = single(vec![1.0, 0.5], vec![1.0, 1.0]);
        let a = Allocation::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(utility(&a, &inst).unwrap(), vec![0.75]);

        let inst = single(vec![1.0, 1.0], vec![1.0, 1.0]);
        let a = Allocation::new(1, 2, vec![2.0, 2.0]).unwrap();
        assert_eq!(utility(&a, &inst).unwrap(), vec![2.0]);
    }

    #[test]
    fn utility_rejects_bad_shape() {
        let inst = single(vec![1.0, 0.5], vec![1.0, 1.0]);
        let a = Allocation::zeros(2, 2);
        assert!(matches!(
            utility(&a, &inst),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_nsw_symmetric_and_single() {
        let ones = vec![vec![1.0, 1.0]; 2];
        let inst = ProblemInstance::from_rows(&ones, &ones, vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let a = Allocation::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(log_nsw(&a, &inst).unwrap(), 0.0);

        let inst = single(vec![0.3, 0.9], vec![0.4, 1.0]);
        let a = Allocation::new(1, 2, vec![0.4, 1.0]).unwrap();
        let expected = (0.3f64 * 0.4 + 0.9 * 1.0).ln();
        assert!((log_nsw(&a, &inst).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn log_nsw_zero_utility() {
        let inst = ProblemInstance::from_rows(
            &[vec![1.0], vec![1.0]],
            &[vec![1.0], vec![1.0]],
            vec![1.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let a = Allocation::new(2, 1, vec![1.0, 0.0]).unwrap();
        // zero-weight agent is excluded
        assert_eq!(log_nsw(&a, &inst).unwrap(), 0.0);
        let a = Allocation::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            log_nsw(&a, &inst),
            Err(Error::NonPositiveUtility { agent: 0, .. })
        ));
        assert_eq!(nsw(&a, &inst).unwrap(), 0.0);
    }

    #[test]
    fn efficiency_examples() {
        let inst = single(vec![1.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(
            efficiency(&Allocation::new(1, 2, vec![1.0, 1.0]).unwrap(), &inst).unwrap(),
            1.0
        );
        assert_eq!(efficiency(&Allocation::zeros(1, 2), &inst).unwrap(), 0.0);
        let zero_budget =
            ProblemInstance::from_rows(&[vec![1.0]], &[vec![1.0]], vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(
            efficiency(&Allocation::zeros(1, 1), &zero_budget),
            Err(Error::ZeroBudget)
        ));
    }

    #[test]
    fn feasibility_examples() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![0.3, 0.2], vec![0.4, 0.6]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let tol = 1e-9;
        let a = Allocation::new(2, 2, inst.demands().to_vec()).unwrap();
        assert!(is_feasible(&a, &inst, tol));
        let mut over = a.clone();
        over.amounts[1] += 10.0 * tol;
        assert!(!is_feasible(&over, &inst, tol));
    }

    #[test]
    fn json_schema() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.5, 0.25]],
            &[vec![1.0, 0.0]],
            vec![1.0, 2.0],
            vec![1.0],
        )
        .unwrap();
        let s = serde_json::to_string(&inst).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["values"], serde_json::json!([[0.5, 0.25]]));
        assert_eq!(v["n_resources"], 2);
        assert!(v.get("bounds").is_none());
        let back: ProblemInstance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, inst);
        let bad = r#"{"n_agents":1,"n_resources":2,"values":[[0.5]],"demands":[[1,1]],"budgets":[1,1],"weights":[1]}"#;
        assert!(serde_json::from_str::<ProblemInstance>(bad).is_err());
    }

    #[test]
    fn rejects_out_of_box_values() {
        assert!(ProblemInstance::from_rows(&[vec![0.05]], &[vec![1.0]], vec![1.0], vec![1.0]).is_err());
        assert!(ProblemInstance::from_rows(&[vec![0.5]], &[vec![-0.1]], vec![1.0], vec![1.0]).is_err());
        assert!(ProblemInstance::from_rows(&[], &[], vec![1.0], vec![]).is_err());
    }
}
