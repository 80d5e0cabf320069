//! Evaluation tables, the single-instance ratio sweep and the allocation
//! heatmap. Everything here emits plain data; plotting happens elsewhere.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploitability::{exploitability_agent, MisreportSearchConfig};
use crate::mechanism::{pa_allocate, Mechanism, MechanismKind};
use crate::problem::{efficiency, is_feasible, nsw, Allocation, BoxBounds, ProblemInstance};
use crate::solver::solve_pf;

pub const FEASIBILITY_TOL: f64 = 1e-6;

pub const METRICS: [&str; 3] = ["nsw", "exploitability", "efficiency"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Sample mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub mechanism: String,
    pub nsw: Summary,
    pub exploitability: Summary,
    pub efficiency: Summary,
    /// Metric means divided by PF's, in [`METRICS`] order.
    pub normalized: [f64; 3],
    /// Mean wall time of one allocation, in milliseconds.
    pub inference_ms: f64,
    #[serde(default)]
    pub train_ms: Option<f64>,
    /// Inference time over the cheapest learned mechanism's (or the
    /// cheapest overall when none is learned).
    pub runtime_normalized: f64,
    pub feasibility_violations: usize,
}

impl MechanismRow {
    pub fn metric(&self, name: &str) -> Option<Summary> {
        match name {
            "nsw" => Some(self.nsw),
            "exploitability" => Some(self.exploitability),
            "efficiency" => Some(self.efficiency),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<MechanismRow>,
    pub n_samples: usize,
}

/// Outcomes of a mechanism with their probabilities.
pub fn outcomes(mech: &Mechanism, inst: &ProblemInstance) -> Result<Vec<(f64, Allocation)>> {
    match mech.kind {
        MechanismKind::Mixture { rho } if mech.is_stochastic() => Ok(vec![
            (rho, solve_pf(inst, &mech.solver)?.allocation),
            (1.0 - rho, pa_allocate(inst, &mech.solver)?.allocation),
        ]),
        _ => Ok(vec![(1.0, mech.allocate(inst, None)?)]),
    }
}

fn is_learned(mech: &Mechanism) -> bool {
    mech.network().is_some()
}

struct SampleEval {
    nsw: f64,
    expl: f64,
    efficiency: f64,
    violations: usize,
    allocate_ms: f64,
}

fn eval_sample(mech: &Mechanism, inst: &ProblemInstance, inner: &MisreportSearchConfig) -> Result<SampleEval> {
    let started = Instant::now();
    let outs = outcomes(mech, inst)?;
    let allocate_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut out = SampleEval {
        nsw: 0.0,
        expl: 0.0,
        efficiency: 0.0,
        violations: 0,
        allocate_ms,
    };
    for (p, alloc) in &outs {
        out.nsw += p * nsw(alloc, inst)?;
        out.efficiency += p * efficiency(alloc, inst)?;
        if !is_feasible(alloc, inst, FEASIBILITY_TOL) {
            out.violations += 1;
        }
    }
    let n = inst.n_agents();
    for i in 0..n {
        out.expl += exploitability_agent(mech, inst, i, inner)? / n as f64;
    }
    Ok(out)
}

/// Evaluates each mechanism on the shared test set. PF is evaluated as the
/// normalization reference even when it is not listed.
pub fn run_table(
    mechanisms: &[Mechanism],
    test_set: &[ProblemInstance],
    inner: &MisreportSearchConfig,
) -> Result<ExperimentReport> {
    if test_set.is_empty() {
        return Err(Error::InvalidInstance("empty test set".into()));
    }
    let mut rows = Vec::with_capacity(mechanisms.len());
    let mut reference = None;
    for mech in mechanisms {
        let row = evaluate(mech, test_set, inner)?;
        if matches!(mech.kind, MechanismKind::Pf) && reference.is_none() {
            reference = Some(row.clone());
        }
        rows.push(row);
    }
    let reference = match reference {
        Some(r) => r,
        None => evaluate(&Mechanism::pf(), test_set, inner)?,
    };
    normalize(&mut rows, &reference, mechanisms);
    Ok(ExperimentReport {
        rows,
        n_samples: test_set.len(),
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

fn normalize(rows: &mut [MechanismRow], reference: &MechanismRow, mechanisms: &[Mechanism]) {
    let learned: Vec<f64> = rows
        .iter()
        .zip(mechanisms)
        .filter(|(_, m)| is_learned(m))
        .map(|(r, _)| r.inference_ms)
        .collect();
    let pool = if learned.is_empty() {
        rows.iter().map(|r| r.inference_ms).collect()
    } else {
        learned
    };
    let cheapest = pool.into_iter().fold(f64::INFINITY, f64::min);
    for row in rows.iter_mut() {
        for (k, name) in METRICS.iter().enumerate() {
            row.normalized[k] = ratio(row.metric(name).unwrap().mean, reference.metric(name).unwrap().mean);
        }
        row.runtime_normalized = ratio(row.inference_ms, cheapest);
    }
}

/// Raw metrics of one mechanism; normalization is left at 1.
pub fn evaluate(mech: &Mechanism, test_set: &[ProblemInstance], inner: &MisreportSearchConfig) -> Result<MechanismRow> {
    let evals: Vec<SampleEval> = test_set
        .par_iter()
        .enumerate()
        .map(|(l, inst)| {
            eval_sample(mech, inst, inner).map_err(|e| Error::SampleFailed {
                sample: l,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&SampleEval) -> f64| Summary::of(&evals.iter().map(f).collect::<Vec<_>>());
    Ok(MechanismRow {
        mechanism: mech.name(),
        nsw: col(|e| e.nsw),
        exploitability: col(|e| e.expl),
        efficiency: col(|e| e.efficiency),
        normalized: [1.0; 3],
        inference_ms: col(|e| e.allocate_ms).mean,
        train_ms: None,
        runtime_normalized: 1.0,
        feasibility_violations: evals.iter().map(|e| e.violations).sum(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    mechanism: String,
    metric: String,
    mean: f64,
    std: f64,
    normalized: f64,
}

impl ExperimentReport {
    pub fn row(&self, mechanism: &str) -> Option<&MechanismRow> {
        self.rows.iter().find(|r| r.mechanism == mechanism)
    }

    /// One line per (mechanism, metric), plus runtime lines whose `std`
    /// column is 0.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        for row in &self.rows {
            for (k, name) in METRICS.iter().enumerate() {
                let s = row.metric(name).unwrap();
                out.serialize(CsvRecord {
                    mechanism: row.mechanism.clone(),
                    metric: name.to_string(),
                    mean: s.mean,
                    std: s.std,
                    normalized: row.normalized[k],
                })?;
            }
            out.serialize(CsvRecord {
                mechanism: row.mechanism.clone(),
                metric: "inference_ms".into(),
                mean: row.inference_ms,
                std: 0.0,
                normalized: row.runtime_normalized,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the metric lines back; runtime lines restore inference time.
    /// Fields the CSV does not carry (sample count, training time,
    /// feasibility counts) come back as zero or empty.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows: Vec<MechanismRow> = Vec::new();
        for rec in rdr.deserialize() {
            let rec: CsvRecord = rec?;
            let idx = match rows.iter().position(|r| r.mechanism == rec.mechanism) {
                Some(i) => i,
                None => {
                    rows.push(MechanismRow {
                        mechanism: rec.mechanism.clone(),
                        nsw: Summary::default(),
                        exploitability: Summary::default(),
                        efficiency: Summary::default(),
                        normalized: [1.0; 3],
                        inference_ms: 0.0,
                        train_ms: None,
                        runtime_normalized: 1.0,
                        feasibility_violations: 0,
                    });
                    rows.len() - 1
                }
            };
            let row = &mut rows[idx];
            let s = Summary {
                mean: rec.mean,
                std: rec.std,
            };
            match rec.metric.as_str() {
                "nsw" => (row.nsw, row.normalized[0]) = (s, rec.normalized),
                "exploitability" => (row.exploitability, row.normalized[1]) = (s, rec.normalized),
                "efficiency" => (row.efficiency, row.normalized[2]) = (s, rec.normalized),
                "inference_ms" => (row.inference_ms, row.runtime_normalized) = (rec.mean, rec.normalized),
                other => return Err(Error::InvalidConfig(format!("unknown report metric {other}"))),
            }
        }
        Ok(Self { rows, n_samples: 0 })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Markdown table of means, standard deviations and normalized values.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| mechanism | NSW | exploitability | efficiency | NSW (norm.) | expl. (norm.) | eff. (norm.) | inference ms | runtime (norm.) | infeasible |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.3e} ± {:.1e} | {:.3e} ± {:.1e} | {:.3} ± {:.3} | {:.3} | {:.3} | {:.3} | {:.4} | {:.2} | {} |",
                r.mechanism,
                r.nsw.mean,
                r.nsw.std,
                r.exploitability.mean,
                r.exploitability.std,
                r.efficiency.mean,
                r.efficiency.std,
                r.normalized[0],
                r.normalized[1],
                r.normalized[2],
                r.inference_ms,
                r.runtime_normalized,
                r.feasibility_violations
            );
        }
        s
    }
}

/// Markdown document with one table per report.
pub fn gen_report(reports: &[(String, ExperimentReport)]) -> String {
    let mut s = String::new();
    for (title, report) in reports {
        let _ = writeln!(s, "## {title}\n");
        if report.n_samples > 0 {
            let _ = writeln!(s, "{} test samples.\n", report.n_samples);
        }
        s.push_str(&report.to_markdown());
        s.push('\n');
    }
    s
}

/// Two agents, two unit-budget resources, unit demands. Agent 0 values the
/// resources (1, 0.5), agent 1 values them (1, 0.25). The value box is
/// widened to 3 so the sweep can over-report.
pub fn ratio_sweep_instance() -> ProblemInstance {
    ProblemInstance::from_rows_with_bounds(
        &[vec![1.0, 0.5], vec![1.0, 0.25]],
        &[vec![1.0, 1.0], vec![1.0, 1.0]],
        vec![1.0, 1.0],
        vec![1.0, 1.0],
        BoxBounds {
            v_hi: 3.0,
            ..BoxBounds::default()
        },
    )
    .expect("fixed instance is valid")
}

/// Ratios 0.1, 0.11, ..., 3.0.
pub fn default_ratio_grid() -> Vec<f64> {
    (10..=300).map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub mechanism: String,
    pub ratios: Vec<f64>,
    /// Agent 0's true utility under each reported ratio.
    pub utilities: Vec<f64>,
    pub truthful_utility: f64,
}

impl SweepCurve {
    pub fn max_gain_ratio(&self) -> f64 {
        let best = self.utilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        best / self.truthful_utility
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["ratio", "utility", "truthful_utility"])?;
        for (r, u) in self.ratios.iter().zip(&self.utilities) {
            out.write_record([r.to_string(), u.to_string(), self.truthful_utility.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Agent 0 reports values (1, ratio) with truthful demands; everyone else
/// reports truthfully.
pub fn run_fig1_sweep(mech: &Mechanism, inst: &ProblemInstance, ratios: &[f64]) -> Result<SweepCurve> {
    let demands = inst.agent_demands(0).to_vec();
    let m = inst.n_resources();
    if m != 2 {
        return Err(Error::DimensionMismatch {
            what: "ratio sweep resources",
            expected: 2,
            got: m,
        });
    }
    let truthful = mech.report_utility(inst, 0, inst.agent_values(0), &demands)?;
    let utilities = ratios
        .par_iter()
        .map(|&r| mech.report_utility(inst, 0, &[1.0, r], &demands))
        .collect::<Result<_>>()?;
    Ok(SweepCurve {
        mechanism: mech.name(),
        ratios: ratios.to_vec(),
        utilities,
        truthful_utility: truthful,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub mechanism: String,
    pub grid: Vec<f64>,
    /// `cells[j][k]` is agent 0's allocation with values (grid[j], grid[k]).
    pub cells: Vec<Vec<Vec<f64>>>,
    /// Cells where some entry of agent 0's allocation sits at 0 or at its demand.
    pub saturated_cells: usize,
}

/// Whether a cell's allocation touches a box bound up to `tol`.
pub fn is_saturated(alloc: &[f64], demands: &[f64], tol: f64) -> bool {
    alloc.iter().zip(demands).any(|(a, x)| *a <= tol || *a >= x - tol)
}

pub const SATURATION_TOL: f64 = 1e-7;

/// Sweeps agent 0's two values over `grid` x `grid` with all else fixed.
pub fn run_heatmap(mech: &Mechanism, inst: &ProblemInstance, grid: &[f64]) -> Result<Heatmap> {
    if inst.n_resources() != 2 {
        return Err(Error::DimensionMismatch {
            what: "heatmap resources",
            expected: 2,
            got: inst.n_resources(),
        });
    }
    let demands = inst.agent_demands(0).to_vec();
    let cells: Vec<Vec<Vec<f64>>> = grid
        .par_iter()
        .map(|&v0| {
            grid.iter()
                .map(|&v1| {
                    let rep = inst.with_report(0, &[v0, v1], &demands)?;
                    let a = mech.allocate(&rep, None)?;
                    Ok(a.agent(0).to_vec())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let saturated_cells = cells
        .iter()
        .flatten()
        .filter(|a| is_saturated(a, &demands, SATURATION_TOL))
        .count();
    Ok(Heatmap {
        mechanism: mech.name(),
        grid: grid.to_vec(),
        cells,
        saturated_cells,
    })
}

impl Heatmap {
    /// Long format: v_0, v_1, then one column per resource.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        let m = self.cells.first().and_then(|r| r.first()).map_or(0, |c| c.len());
        let mut header = vec!["v_0".to_string(), "v_1".to_string()];
        header.extend((0..m).map(|r| format!("a_{r}")));
        out.write_record(&header)?;
        for (j, row) in self.cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                let mut rec = vec![self.grid[j].to_string(), self.grid[k].to_string()];
                rec.extend(cell.iter().map(f64::to_string));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Evenly spaced points on [lo, hi], both ends included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_truthful;

    fn quick() -> MisreportSearchConfig {
        MisreportSearchConfig {
            steps: 10,
            restarts: 1,
            ..Default::default()
        }
    }

    #[test]
    fn pf_row_normalizes_to_one() {
        let d = gen_truthful(2, 2, 16, 5).unwrap().instances;
        let r = run_table(&[Mechanism::pf(), Mechanism::pa()], &d, &quick()).unwrap();
        assert_eq!(r.rows[0].normalized, [1.0, 1.0, 1.0]);
        assert!(r.rows[1].normalized[0] < 1.0);
        assert!(r.rows.iter().all(|row| row.feasibility_violations == 0));
    }

    #[test]
    fn mixture_metrics_interpolate() {
        let d = gen_truthful(2, 2, 8, 6).unwrap().instances;
        let steps0 = MisreportSearchConfig {
            steps: 0,
            ..Default::default()
        };
        let mechs = [Mechanism::pf(), Mechanism::pa(), Mechanism::mixture(0.5).unwrap()];
        let r = run_table(&mechs, &d, &steps0).unwrap();
        for k in 0..3 {
            let mid = 0.5 * (r.rows[0].normalized[k] + r.rows[1].normalized[k]);
            if k != 1 {
                assert!((r.rows[2].normalized[k] - mid).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sweep_at_truthful_ratio_matches_truthful_utility() {
        let inst = ratio_sweep_instance();
        let c = run_fig1_sweep(&Mechanism::pf(), &inst, &[0.5]).unwrap();
        assert!((c.utilities[0] - c.truthful_utility).abs() < 1e-12);
    }

    #[test]
    fn default_grid_hits_the_truthful_ratio() {
        let g = default_ratio_grid();
        assert_eq!(g.first(), Some(&0.1));
        assert_eq!(g.last(), Some(&3.0));
        assert!(g.contains(&0.5));
    }

    #[test]
    fn symmetric_heatmap_cell_splits_evenly() {
        let inst = ProblemInstance::from_rows(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![1.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let h = run_heatmap(&Mechanism::pf(), &inst, &[0.5]).unwrap();
        let u0: f64 = h.cells[0][0].iter().map(|a| 0.5 * a).sum();
        assert!((u0 - 0.5).abs() < 1e-6, "{u0}");
    }

    #[test]
    fn csv_and_json_round_trip() {
        let d = gen_truthful(2, 2, 4, 7).unwrap().instances;
        let r = run_table(&[Mechanism::pf(), Mechanism::pa()], &d, &quick()).unwrap();
        let dir = std::env::temp_dir().join(format!("pfmech-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        r.write_json(dir.join("r.json")).unwrap();
        r.write_csv(dir.join("r.csv")).unwrap();
        assert_eq!(ExperimentReport::read_json(dir.join("r.json")).unwrap(), r);
        let back = ExperimentReport::read_csv(dir.join("r.csv")).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        for (a, b) in back.rows.iter().zip(&r.rows) {
            assert_eq!(a.nsw, b.nsw);
            assert_eq!(a.exploitability, b.exploitability);
            assert_eq!(a.efficiency, b.efficiency);
            assert_eq!(a.normalized, b.normalized);
            assert_eq!(a.inference_ms, b.inference_ms);
        }
    }
}
