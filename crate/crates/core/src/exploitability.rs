//! Best-response misreport search and exploitability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::Mechanism;
use crate::problem::{BoxBounds, ProblemInstance};

/// Largest brute-force grid dimension (values plus demands of one agent).
pub const MAX_GRID_DIMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisreportSearchConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Random starts in addition to the truthful one.
    pub restarts: usize,
    pub projection_box: BoxBounds,
    pub seed: u64,
    /// Cosine-decay the step size over the ascent.
    pub cosine_decay: bool,
}

impl Default for MisreportSearchConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            step_size: 0.05,
            restarts: 5,
            projection_box: BoxBounds::default(),
            seed: 0,
            cosine_decay: true,
        }
    }
}

impl MisreportSearchConfig {
    /// Cheaper search used inside training.
    pub fn training() -> Self {
        Self {
            steps: 25,
            restarts: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("misreport step_size must be positive".into()));
        }
        let b = &self.projection_box;
        if !(b.v_lo <= b.v_hi && b.x_lo <= b.x_hi && b.v_lo > 0.0 && b.x_lo >= 0.0) {
            return Err(Error::InvalidConfig("misreport projection box is empty".into()));
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        if self.cosine_decay && self.steps > 1 {
            let frac = t as f64 / (self.steps - 1) as f64;
            0.5 * self.step_size * (1.0 + (std::f64::consts::PI * frac).cos()).max(0.02)
        } else {
            self.step_size
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misreport {
    pub agent: usize,
    pub values: Vec<f64>,
    pub demands: Vec<f64>,
    pub achieved_utility: f64,
}

fn project(values: &mut [f64], demands: &mut [f64], b: &BoxBounds) {
    for v in values {
        *v = v.clamp(b.v_lo, b.v_hi);
    }
    for x in demands {
        *x = x.clamp(b.x_lo, b.x_hi);
    }
}

/// Projected gradient ascent of one agent's utility over its report, from
/// the truthful report, `cfg.restarts` random points and any extra starts.
pub fn best_misreport_from(
    mech: &Mechanism,
    inst: &ProblemInstance,
    agent: usize,
    cfg: &MisreportSearchConfig,
    extra_starts: &[(Vec<f64>, Vec<f64>)],
) -> Result<Misreport> {
    inst.check_agent(agent)?;
    cfg.validate()?;
    if !mech.differentiable_wrt_reports() {
        return Err(Error::GradientUnavailable("mechanism has no report gradient"));
    }
    let m = inst.n_resources();
    let ctx = mech.report_context(inst, agent)?;
    let tv = inst.agent_values(agent).to_vec();
    let tx = inst.agent_demands(agent).to_vec();
    let mut best = Misreport {
        agent,
        achieved_utility: mech.report_utility_in(&ctx, &tv, &tx)?,
        values: tv.clone(),
        demands: tx.clone(),
    };
    if cfg.steps == 0 {
        return Ok(best);
    }
    let bx = cfg.projection_box;
    let mut starts = vec![(tv, tx)];
    starts.extend(extra_starts.iter().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(agent as u64));
    for _ in 0..cfg.restarts {
        let v = (0..m).map(|_| rng.gen_range(bx.v_lo..=bx.v_hi)).collect();
        let x = (0..m).map(|_| rng.gen_range(bx.x_lo..=bx.x_hi)).collect();
        starts.push((v, x));
    }
    for (mut v, mut x) in starts {
        if v.len() != m || x.len() != m {
            return Err(Error::DimensionMismatch {
                what: "misreport start",
                expected: m,
                got: v.len().min(x.len()),
            });
        }
        project(&mut v, &mut x, &bx);
        for t in 0..cfg.steps {
            let resp = mech.report_response_in(&ctx, &v, &x)?;
            if resp.utility > best.achieved_utility {
                best = Misreport {
                    agent,
                    values: v.clone(),
                    demands: x.clone(),
                    achieved_utility: resp.utility,
                };
            }
            let alpha = cfg.step_at(t);
            for r in 0..m {
                v[r] += alpha * resp.grad_values[r];
                x[r] += alpha * resp.grad_demands[r];
            }
            project(&mut v, &mut x, &bx);
        }
        let u = mech.report_utility_in(&ctx, &v, &x)?;
        if u > best.achieved_utility {
            best = Misreport {
                agent,
                values: v,
                demands: x,
                achieved_utility: u,
            };
        }
    }
    Ok(best)
}

pub fn best_misreport(
    mech: &Mechanism,
    inst: &ProblemInstance,
    agent: usize,
    cfg: &MisreportSearchConfig,
) -> Result<Misreport> {
    best_misreport_from(mech, inst, agent, cfg, &[])
}

/// Utility gain of the best misreport found over truthful reporting.
pub fn exploitability_agent(
    mech: &Mechanism,
    inst: &ProblemInstance,
    agent: usize,
    cfg: &MisreportSearchConfig,
) -> Result<f64> {
    let truthful = mech.report_utility(inst, agent, inst.agent_values(agent), inst.agent_demands(agent))?;
    let best = best_misreport(mech, inst, agent, cfg)?;
    Ok((best.achieved_utility - truthful).max(0.0))
}

pub fn exploitability_mean(mech: &Mechanism, inst: &ProblemInstance, cfg: &MisreportSearchConfig) -> Result<f64> {
    let n = inst.n_agents();
    let mut total = 0.0;
    for i in 0..n {
        total += exploitability_agent(mech, inst, i, cfg)?;
    }
    Ok(total / n as f64)
}

/// Coordinates of a brute-force grid: the midpoint for one step, otherwise
/// `steps + 1` evenly spaced points including both ends, so that doubling
/// the step count refines the grid.
pub fn grid_points(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..=steps)
        .map(|j| lo + (hi - lo) * j as f64 / steps as f64)
        .collect()
}

/// Exhaustive search of one agent's report over a grid on the box.
pub fn brute_force_misreport(
    mech: &Mechanism,
    inst: &ProblemInstance,
    agent: usize,
    grid_steps: usize,
    bx: &BoxBounds,
) -> Result<Misreport> {
    inst.check_agent(agent)?;
    let m = inst.n_resources();
    if 2 * m > MAX_GRID_DIMS {
        return Err(Error::GridTooLarge { dims: 2 * m });
    }
    let vs = grid_points(bx.v_lo, bx.v_hi, grid_steps);
    let xs = grid_points(bx.x_lo, bx.x_hi, grid_steps);
    let dims = 2 * m;
    let sizes: Vec<usize> = (0..dims).map(|d| if d < m { vs.len() } else { xs.len() }).collect();
    let ctx = mech.report_context(inst, agent)?;
    let mut idx = vec![0usize; dims];
    let mut best: Option<Misreport> = None;
    let mut v = vec![0.0; m];
    let mut x = vec![0.0; m];
    loop {
        for r in 0..m {
            v[r] = vs[idx[r]];
            x[r] = xs[idx[m + r]];
        }
        let u = mech.report_utility_in(&ctx, &v, &x)?;
        if best.as_ref().map_or(true, |b| u > b.achieved_utility) {
            best = Some(Misreport {
                agent,
                values: v.clone(),
                demands: x.clone(),
                achieved_utility: u,
            });
        }
        let mut d = 0;
        loop {
            if d == dims {
                return Ok(best.expect("grid is non-empty"));
            }
            idx[d] += 1;
            if idx[d] < sizes[d] {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> ProblemInstance {
        ProblemInstance::from_rows(
            &[vec![1.0, 0.5], vec![1.0, 0.25]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_is_truthful() {
        let inst = fig1();
        let cfg = MisreportSearchConfig {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(exploitability_agent(&Mechanism::pf(), &inst, 0, &cfg).unwrap(), 0.0);
        let m = best_misreport(&Mechanism::pf(), &inst, 0, &cfg).unwrap();
        assert_eq!(m.values, inst.agent_values(0));
    }

    #[test]
    fn pf_fig1_gain_in_band() {
        let inst = fig1();
        let pf = Mechanism::pf();
        let truthful = pf.report_utility(&inst, 0, &[1.0, 0.5], &[1.0, 1.0]).unwrap();
        let best = best_misreport(&pf, &inst, 0, &MisreportSearchConfig::default()).unwrap();
        let ratio = best.achieved_utility / truthful;
        assert!((1.15..=1.20).contains(&ratio), "gain ratio {ratio}");
        let e = exploitability_agent(&pf, &inst, 0, &MisreportSearchConfig::default()).unwrap();
        assert!(e > 0.0 && e <= 2.0);
    }

    #[test]
    fn grid_guard_and_midpoint() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.5; 4], vec![0.5; 4]],
            &[vec![0.5; 4], vec![0.5; 4]],
            vec![1.0; 4],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            brute_force_misreport(&Mechanism::pf(), &inst, 0, 2, &BoxBounds::default()),
            Err(Error::GridTooLarge { dims: 8 })
        ));
        let inst = fig1();
        let m = brute_force_misreport(&Mechanism::pf(), &inst, 0, 1, &BoxBounds::default()).unwrap();
        assert_eq!(m.values, vec![0.55, 0.55]);
        assert_eq!(m.demands, vec![0.55, 0.55]);
    }

    #[test]
    fn grid_refines_monotonically() {
        let inst = fig1();
        let pf = Mechanism::pf();
        let bx = BoxBounds::default();
        let coarse = brute_force_misreport(&pf, &inst, 0, 3, &bx).unwrap();
        let fine = brute_force_misreport(&pf, &inst, 0, 6, &bx).unwrap();
        assert!(fine.achieved_utility >= coarse.achieved_utility);
    }

    #[test]
    fn more_budget_never_hurts() {
        let inst = fig1();
        let pf = Mechanism::pf();
        let small = MisreportSearchConfig {
            restarts: 1,
            steps: 10,
            ..Default::default()
        };
        let large = MisreportSearchConfig {
            restarts: 3,
            steps: 10,
            ..Default::default()
        };
        let a = exploitability_agent(&pf, &inst, 1, &small).unwrap();
        let b = exploitability_agent(&pf, &inst, 1, &large).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn exploitability_mean_is_average() {
        let inst = fig1();
        let pf = Mechanism::pf();
        let cfg = MisreportSearchConfig {
            restarts: 1,
            steps: 10,
            ..Default::default()
        };
        let e0 = exploitability_agent(&pf, &inst, 0, &cfg).unwrap();
        let e1 = exploitability_agent(&pf, &inst, 1, &cfg).unwrap();
        let mean = exploitability_mean(&pf, &inst, &cfg).unwrap();
        assert!((mean - 0.5 * (e0 + e1)).abs() < 1e-15);
    }
}
