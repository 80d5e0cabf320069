//! Linearized KKT system of the (regularized) PF program and adjoint
//! back-propagation through it.
//!
//! Unknowns are stacked as `[a; mu; nu; lambda]` of length `3NM + M` and the
//! rows follow the same order: stationarity (multiplied through by
//! `v_i . a_i`), lower-bound complementarity, upper-bound complementarity and
//! budget complementarity.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ProblemInstance;
use crate::solver::PfSolution;

/// Solutions with a KKT residual above this are rejected by [`build_kkt_matrix`].
pub const BUILD_THRESHOLD: f64 = 1e-6;
/// Pivot ratio below which the adjoint system is treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-10;
/// Absolute tolerance for tight-constraint counting.
pub const TIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KktSystem {
    pub matrix: DMatrix<f64>,
    pub regularized: bool,
    pub solution: PfSolution,
    pub instance: ProblemInstance,
    z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointSolution {
    pub g_a: Vec<f64>,
    pub g_mu: Vec<f64>,
    pub g_nu: Vec<f64>,
    pub g_lambda: Vec<f64>,
    pub min_norm: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Differentiability {
    Differentiable,
    Subdifferentiable,
}

pub fn build_kkt_matrix(
    sol: &PfSolution,
    inst: &ProblemInstance,
    z: Option<&[f64]>,
) -> Result<KktSystem> {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let nm = n * m;
    if let Some(z) = z {
        if z.len() != nm {
            return Err(Error::DimensionMismatch {
                what: "regularizer",
                expected: nm,
                got: z.len(),
            });
        }
    }
    if sol.allocation.amounts.len() != nm {
        return Err(Error::DimensionMismatch {
            what: "allocation",
            expected: nm,
            got: sol.allocation.amounts.len(),
        });
    }
    if !(sol.kkt_residual <= BUILD_THRESHOLD) {
        return Err(Error::Unconverged {
            residual: sol.kkt_residual,
            threshold: BUILD_THRESHOLD,
        });
    }
    let zv = z.map_or_else(|| vec![0.0; nm], <[f64]>::to_vec);
    let a = &sol.allocation.amounts;
    let (mu, nu, lam) = (&sol.dual_lower, &sol.dual_upper, &sol.dual_budget);
    let v = inst.values();
    let x = inst.demands();
    let b = inst.budgets();
    let dim = 3 * nm + m;
    let (o_mu, o_nu, o_lam) = (nm, 2 * nm, 3 * nm);
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    let totals = sol.allocation.resource_totals();
    for i in 0..n {
        let s: f64 = (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum();
        for r in 0..m {
            let k = i * m + r;
            let c = mu[k] - nu[k] - lam[r] - zv[k];
            for r2 in 0..m {
                mat[(k, i * m + r2)] = c * v[i * m + r2];
            }
            mat[(k, o_mu + k)] = s;
            mat[(k, o_nu + k)] = -s;
            mat[(k, o_lam + r)] = -s;

            mat[(o_mu + k, k)] = mu[k];
            mat[(o_mu + k, o_mu + k)] = a[k];

            mat[(o_nu + k, k)] = nu[k];
            mat[(o_nu + k, o_nu + k)] = a[k] - x[k];

            mat[(o_lam + r, k)] = lam[r];
        }
    }
    for r in 0..m {
        mat[(o_lam + r, o_lam + r)] = totals[r] - b[r];
    }
    Ok(KktSystem {
        matrix: mat,
        regularized: z.is_some(),
        solution: sol.clone(),
        instance: inst.clone(),
        z: zv,
    })
}

/// Tight-constraint count and strict complementarity over the coordinates
/// that are not pinned to zero by a zero demand or zero budget.
pub fn check_differentiability(
    sol: &PfSolution,
    inst: &ProblemInstance,
    tol: f64,
) -> Differentiability {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let a = &sol.allocation.amounts;
    let x = inst.demands();
    let b = inst.budgets();
    let totals = sol.allocation.resource_totals();
    let mut tight = 0usize;
    let mut strict = true;
    let mut classify = |slack: f64, dual: f64| {
        if slack.abs() <= tol {
            tight += 1;
            strict &= dual > tol;
        } else {
            strict &= dual < tol;
        }
    };
    let mut free = 0usize;
    let mut active_agents = 0usize;
    let mut row_used = vec![false; m];
    for i in 0..n {
        let mut any = false;
        for r in 0..m {
            let k = i * m + r;
            if x[k] > 0.0 && b[r] > 0.0 {
                free += 1;
                any = true;
                row_used[r] = true;
                classify(a[k], sol.dual_lower[k]);
                classify(x[k] - a[k], sol.dual_upper[k]);
            }
        }
        active_agents += usize::from(any);
    }
    for r in (0..m).filter(|&r| row_used[r]) {
        classify(b[r] - totals[r], sol.dual_budget[r]);
    }
    if strict && tight + active_agents >= free {
        Differentiability::Differentiable
    } else {
        Differentiability::Subdifferentiable
    }
}

impl KktSystem {
    fn nm(&self) -> usize {
        self.instance.n_agents() * self.instance.n_resources()
    }

    fn pinned(&self, k: usize) -> bool {
        let m = self.instance.n_resources();
        let v = self.instance.values();
        let a = &self.solution.allocation.amounts;
        let i = k / m;
        let s: f64 = (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum();
        self.instance.demands()[k] <= 0.0 || s <= 0.0
    }

    /// Solves `M^T g = [upstream; 0; 0; 0]`.
    ///
    /// Entries with zero demand make `M` exactly singular: the two bound
    /// rows coincide. Those are eliminated analytically (their multiplier
    /// pair only enters one equation) and the reduced system is factorized.
    pub fn solve_adjoint(&self, upstream: &[f64]) -> Result<AdjointSolution> {
        let nm = self.nm();
        let m = self.instance.n_resources();
        if upstream.len() != nm {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient",
                expected: nm,
                got: upstream.len(),
            });
        }
        let dim = 3 * nm + m;
        let mt = self.matrix.transpose();
        let mut rhs = DVector::<f64>::zeros(dim);
        for k in 0..nm {
            rhs[k] = upstream[k];
        }
        let pinned: Vec<bool> = (0..nm).map(|k| self.pinned(k)).collect();
        let keep: Vec<usize> = (0..dim)
            .filter(|&j| j >= 3 * nm || !pinned[j % nm])
            .collect();
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |p, q| mt[(keep[p], keep[q])]);
        let sub_rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&j| rhs[j]));
        let (sub_g, mut min_norm) = solve_robust(sub, sub_rhs)?;
        let mut g = DVector::<f64>::zeros(dim);
        for (p, &j) in keep.iter().enumerate() {
            g[j] = sub_g[p];
        }
        let (mu, nu) = (&self.solution.dual_lower, &self.solution.dual_upper);
        for k in (0..nm).filter(|&k| pinned[k]) {
            // equation of column a_k with g_mu,k = g_nu,k = 0 so far
            let q = rhs[k] - mt.row(k).dot(&g.transpose());
            let denom = mu[k] * mu[k] + nu[k] * nu[k];
            if denom > 0.0 {
                g[nm + k] = q * mu[k] / denom;
                g[2 * nm + k] = q * nu[k] / denom;
            } else if q.abs() > 0.0 {
                min_norm = true;
            }
            let _ = m;
        }
        let resid = (&mt * &g - &rhs).amax();
        let gv = g.as_slice();
        Ok(AdjointSolution {
            g_a: gv[..nm].to_vec(),
            g_mu: gv[nm..2 * nm].to_vec(),
            g_nu: gv[2 * nm..3 * nm].to_vec(),
            g_lambda: gv[3 * nm..].to_vec(),
            min_norm,
            residual: resid,
        })
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.instance.n_agents() {
            return Err(Error::IndexOutOfRange {
                index: agent,
                len: self.instance.n_agents(),
            });
        }
        Ok(())
    }

    /// Gradient of the downstream scalar with respect to agent `agent`'s
    /// reported values.
    pub fn grad_values(&self, adj: &AdjointSolution, agent: usize) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        let m = self.instance.n_resources();
        let sol = &self.solution;
        let w = self.instance.weights()[agent];
        let base = agent * m;
        let a = &sol.allocation.amounts[base..base + m];
        let ga = &adj.g_a[base..base + m];
        let cg: f64 = (0..m)
            .map(|r| {
                let k = base + r;
                (sol.dual_lower[k] - sol.dual_upper[k] - sol.dual_budget[r] - self.z[k]) * ga[r]
            })
            .sum();
        Ok((0..m).map(|r| -w * ga[r] - a[r] * cg).collect())
    }

    /// Gradient with respect to all demands, agent-major.
    pub fn grad_demands(&self, adj: &AdjointSolution) -> Vec<f64> {
        self.solution
            .dual_upper
            .iter()
            .zip(&adj.g_nu)
            .map(|(nu, g)| nu * g)
            .collect()
    }

    pub fn grad_weights(&self, adj: &AdjointSolution, agent: usize) -> Result<f64> {
        self.check_agent(agent)?;
        let m = self.instance.n_resources();
        let base = agent * m;
        Ok(-(0..m)
            .map(|r| self.instance.values()[base + r] * adj.g_a[base + r])
            .sum::<f64>())
    }

    /// Gradient with respect to the linear regularizer, agent-major.
    pub fn grad_regularizer(&self, adj: &AdjointSolution) -> Result<Vec<f64>> {
        if !self.regularized {
            return Err(Error::VariantMismatch("system was built without a regularizer"));
        }
        let m = self.instance.n_resources();
        let v = self.instance.values();
        let a = &self.solution.allocation.amounts;
        let mut out = vec![0.0; self.nm()];
        for i in 0..self.instance.n_agents() {
            let s: f64 = (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum();
            for r in 0..m {
                out[i * m + r] = s * adj.g_a[i * m + r];
            }
        }
        Ok(out)
    }
}

/// Partial-pivot LU with a minimum-norm SVD fallback for near-singular
/// systems.
fn solve_robust(mat: DMatrix<f64>, rhs: DVector<f64>) -> Result<(DVector<f64>, bool)> {
    if mat.nrows() == 0 {
        return Ok((rhs, false));
    }
    let lu = mat.clone().lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    if max > 0.0 && min / max >= SINGULAR_RATIO {
        if let Some(x) = lu.solve(&rhs) {
            return Ok((x, false));
        }
    }
    let norm = mat.amax();
    let svd = mat.svd(true, true);
    let eps = SINGULAR_RATIO * svd.singular_values.max().max(norm);
    let x = svd
        .solve(&rhs, eps)
        .map_err(|e| Error::Factorization(e.to_string()))?;
    Ok((x, true))
}

pub fn solve_adjoint(sys: &KktSystem, upstream: &[f64]) -> Result<AdjointSolution> {
    sys.solve_adjoint(upstream)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::problem::Allocation;
    use crate::solver::{solve_pf, solve_regularized_pf, SolverConfig};

    /// Forward differential: solves `M dy = -C dp` by least squares for the
    /// allocation response to a parameter perturbation.
    pub(crate) fn forward_differential(
        sys: &KktSystem,
        dv: &[f64],
        dx: &[f64],
        dw: &[f64],
        dz: &[f64],
    ) -> Vec<f64> {
        let inst = &sys.instance;
        let (n, m) = (inst.n_agents(), inst.n_resources());
        let nm = n * m;
        let sol = &sys.solution;
        let a = &sol.allocation.amounts;
        let v = inst.values();
        let mut rhs = DVector::<f64>::zeros(3 * nm + m);
        for i in 0..n {
            let s: f64 = (0..m).map(|r| v[i * m + r] * a[i * m + r]).sum();
            let adv: f64 = (0..m).map(|r| a[i * m + r] * dv[i * m + r]).sum();
            for r in 0..m {
                let k = i * m + r;
                let c = sol.dual_lower[k] - sol.dual_upper[k] - sol.dual_budget[r] - sys.z[k];
                let row = c * adv + inst.weights()[i] * dv[k] + v[k] * dw[i] - s * dz[k];
                rhs[k] = -row;
                rhs[2 * nm + k] = sol.dual_upper[k] * dx[k];
            }
        }
        let svd = sys.matrix.clone().svd(true, true);
        let dy = svd.solve(&rhs, 1e-12).unwrap();
        dy.as_slice()[..nm].to_vec()
    }

    fn scalar_instance(x: f64, b: f64) -> ProblemInstance {
        ProblemInstance::from_rows(&[vec![1.0]], &[vec![x]], vec![b], vec![1.0]).unwrap()
    }

    fn interior_2x2() -> ProblemInstance {
        ProblemInstance::from_rows(
            &[vec![0.9, 0.3], vec![0.4, 0.8]],
            &[vec![0.7, 0.9], vec![0.8, 0.6]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_interior_matrix_closed_form() {
        // z = 2: a = 1/2, duals zero
        let inst = scalar_instance(1.0, 1.0);
        let sol = solve_regularized_pf(&inst, &[2.0], &SolverConfig::default()).unwrap();
        let sys = build_kkt_matrix(&sol, &inst, Some(&[2.0])).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                -2.0, 0.5, -0.5, -0.5, //
                0.0, 0.5, 0.0, 0.0, //
                0.0, 0.0, -0.5, 0.0, //
                0.0, 0.0, 0.0, -0.5,
            ],
        );
        assert!((&sys.matrix - &expected).amax() < 1e-6, "{}", sys.matrix);

        // hand solve of M^T g = [1,0,0,0]: g_a = -1/2, g_mu = g_nu = g_lambda = 1/2
        let adj = sys.solve_adjoint(&[1.0]).unwrap();
        assert!((adj.g_a[0] + 0.5).abs() < 1e-6);
        for g in [adj.g_mu[0], adj.g_nu[0], adj.g_lambda[0]] {
            assert!((g - 0.5).abs() < 1e-6, "{adj:?}");
        }
        // a = w/z: da/dz = -1/z^2 = -1/4
        let gz = sys.grad_regularizer(&adj).unwrap();
        assert!((gz[0] + 0.25).abs() < 1e-6, "{gz:?}");
        // da/dw = 1/z = 1/2
        assert!((sys.grad_weights(&adj, 0).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn second_row_block_differential() {
        let inst = interior_2x2();
        let sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        let sys = build_kkt_matrix(&sol, &inst, None).unwrap();
        let nm = 4;
        let mut dy = DVector::<f64>::zeros(3 * nm + 2);
        let da = [0.1, -0.2, 0.3, 0.05];
        let dmu = [0.7, 0.2, -0.4, 1.0];
        for k in 0..nm {
            dy[k] = da[k];
            dy[nm + k] = dmu[k];
        }
        let out = &sys.matrix * dy;
        for k in 0..nm {
            let expected = dmu[k] * sol.allocation.amounts[k] + sol.dual_lower[k] * da[k];
            assert!((out[nm + k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_regularizer_build_matches_plain() {
        let inst = interior_2x2();
        let sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        let plain = build_kkt_matrix(&sol, &inst, None).unwrap();
        let reg = build_kkt_matrix(&sol, &inst, Some(&[0.0; 4])).unwrap();
        assert_eq!(plain.matrix, reg.matrix);
        assert!(!plain.regularized && reg.regularized);
        let adj = plain.solve_adjoint(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            plain.grad_regularizer(&adj),
            Err(Error::VariantMismatch(_))
        ));
    }

    #[test]
    fn unconverged_rejected() {
        let inst = interior_2x2();
        let mut sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        sol.kkt_residual = 1e-2;
        assert!(matches!(
            build_kkt_matrix(&sol, &inst, None),
            Err(Error::Unconverged { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let inst = interior_2x2();
        let sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        let sys = build_kkt_matrix(&sol, &inst, None).unwrap();
        let adj = sys.solve_adjoint(&[0.0; 4]).unwrap();
        assert!(adj.g_a.iter().chain(&adj.g_mu).chain(&adj.g_nu).chain(&adj.g_lambda).all(|g| *g == 0.0));
        assert!(sys.grad_values(&adj, 0).unwrap().iter().all(|g| *g == 0.0));
        assert!(sys.grad_demands(&adj).iter().all(|g| *g == 0.0));
        assert_eq!(sys.grad_weights(&adj, 1).unwrap(), 0.0);
        assert!(matches!(sys.grad_values(&adj, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn adjoint_is_linear_and_scales() {
        let inst = interior_2x2();
        let sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        let sys = build_kkt_matrix(&sol, &inst, None).unwrap();
        let u1 = [0.3, -1.0, 0.5, 0.2];
        let u2 = [1.0, 0.4, -0.7, 0.9];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| 2.5 * a + b).collect();
        let g1 = sys.solve_adjoint(&u1).unwrap();
        let g2 = sys.solve_adjoint(&u2).unwrap();
        let gs = sys.solve_adjoint(&sum).unwrap();
        for k in 0..4 {
            assert!((gs.g_a[k] - (2.5 * g1.g_a[k] + g2.g_a[k])).abs() < 1e-9);
        }
        let v1 = sys.grad_values(&g1, 0).unwrap();
        let vs = sys.solve_adjoint(&u1.map(|u| 3.0 * u)).unwrap();
        let v3 = sys.grad_values(&vs, 0).unwrap();
        for r in 0..2 {
            assert!((v3[r] - 3.0 * v1[r]).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_matches_forward_differential() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.9, 0.3, 0.5], vec![0.4, 0.8, 0.6], vec![0.2, 0.5, 1.0]],
            &[vec![0.7, 0.0, 0.9], vec![0.8, 0.6, 0.3], vec![0.5, 0.9, 0.0]],
            vec![1.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        let z: Vec<f64> = (0..9).map(|k| 0.6 + 0.1 * k as f64).collect();
        let sol = solve_regularized_pf(&inst, &z, &SolverConfig::default()).unwrap();
        assert_eq!(
            check_differentiability(&sol, &inst, TIGHT_TOL),
            Differentiability::Differentiable
        );
        let sys = build_kkt_matrix(&sol, &inst, Some(&z)).unwrap();
        let upstream: Vec<f64> = (0..9).map(|k| (k as f64 * 0.7).sin()).collect();
        let adj = sys.solve_adjoint(&upstream).unwrap();
        assert!(adj.residual < 1e-9, "{}", adj.residual);
        let dv: Vec<f64> = (0..9).map(|k| (k as f64 * 1.3).cos()).collect();
        let dx: Vec<f64> = (0..9)
            .map(|k| if inst.demands()[k] > 0.0 { (k as f64 * 0.4).sin() } else { 0.0 })
            .collect();
        let dw = [0.3, -0.2, 0.5];
        let dz: Vec<f64> = (0..9).map(|k| (k as f64).sqrt() - 1.0).collect();
        let da = forward_differential(&sys, &dv, &dx, &dw, &dz);
        let forward: f64 = da.iter().zip(&upstream).map(|(a, b)| a * b).sum();
        let mut backward = 0.0;
        let gx = sys.grad_demands(&adj);
        let gz = sys.grad_regularizer(&adj).unwrap();
        for i in 0..3 {
            let gv = sys.grad_values(&adj, i).unwrap();
            for r in 0..3 {
                backward += gv[r] * dv[i * 3 + r];
            }
            backward += sys.grad_weights(&adj, i).unwrap() * dw[i];
        }
        for k in 0..9 {
            backward += gx[k] * dx[k] + gz[k] * dz[k];
        }
        assert!(
            (forward - backward).abs() < 1e-6 * (1.0 + forward.abs()),
            "{forward} vs {backward}"
        );
    }

    #[test]
    fn singular_system_returns_min_norm() {
        // fabricated degenerate point: a on both bounds of a zero-width box is
        // removed by elimination, so use a scalar point with all duals zero and
        // a at the lower bound, which zeroes a whole row of M
        let inst = scalar_instance(1.0, 1.0);
        let sol = PfSolution {
            allocation: Allocation::new(1, 1, vec![0.0]).unwrap(),
            dual_lower: vec![0.0],
            dual_upper: vec![0.0],
            dual_budget: vec![0.0],
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        };
        let sys = build_kkt_matrix(&sol, &inst, Some(&[0.0])).unwrap();
        let adj = sys.solve_adjoint(&[1.0]).unwrap();
        assert!(adj.min_norm);
        let g = DVector::from_iterator(
            4,
            adj.g_a.iter().chain(&adj.g_mu).chain(&adj.g_nu).chain(&adj.g_lambda).copied(),
        );
        let pinv = sys
            .matrix
            .transpose()
            .pseudo_inverse(1e-12)
            .unwrap();
        let reference = pinv * DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((g - reference).amax() < 1e-9);
    }

    #[test]
    fn differentiability_examples() {
        let inst = scalar_instance(1.0, 0.5);
        let sol = solve_pf(&inst, &SolverConfig::default()).unwrap();
        assert!(sol.dual_budget[0] > 0.0);
        assert_eq!(
            check_differentiability(&sol, &inst, TIGHT_TOL),
            Differentiability::Differentiable
        );
        // interior fabricated 2x2 point with no tight constraints: 0 < NM - N = 2
        let inst = interior_2x2();
        let sol = PfSolution {
            allocation: Allocation::new(2, 2, vec![0.3; 4]).unwrap(),
            dual_lower: vec![0.0; 4],
            dual_upper: vec![0.0; 4],
            dual_budget: vec![0.0; 2],
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        };
        assert_eq!(
            check_differentiability(&sol, &inst, TIGHT_TOL),
            Differentiability::Subdifferentiable
        );
    }
}
