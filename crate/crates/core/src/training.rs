//! Primal-dual training of the learned mechanisms against the Lagrangian
//! `sum_i gamma_i expl_i - logNSW` over minibatches.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploitability::{best_misreport_from, MisreportSearchConfig};
use crate::mechanism::{utility_slope, Mechanism, NetArch};
use crate::nn::{optimizer_step, OptimizerKind, OptimizerState};
use crate::problem::{utility_with, ProblemInstance};
use crate::solver::{in_log_objective, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LearnedKind {
    #[default]
    RpfNet,
    ExsNet,
    SoftmaxNet,
}

/// Primal learning-rate schedule over the configured iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `primal_lr` to `final_fraction * primal_lr`.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let t = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos());
                base * (final_fraction + (1.0 - final_fraction) * c)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub primal_lr: f64,
    pub lr_schedule: LrSchedule,
    pub dual_lr: f64,
    /// Exploitability budget per agent, compared against batch sums.
    pub epsilon: f64,
    pub initial_dual: f64,
    pub optimizer: OptimizerKind,
    /// Misreport search used inside each step.
    pub inner: MisreportSearchConfig,
    /// Reuse the last misreport found for a sample as an extra start.
    pub warm_start: bool,
    /// Held-out evaluation and checkpoint cadence in steps; 0 disables it.
    pub eval_every: usize,
    pub seed: u64,
    pub mechanism: LearnedKind,
    pub arch: NetArch,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 32,
            primal_lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            dual_lr: 1.0,
            epsilon: 1e-4,
            initial_dual: 1.0,
            optimizer: OptimizerKind::adam(),
            inner: MisreportSearchConfig::training(),
            warm_start: true,
            eval_every: 0,
            seed: 0,
            mechanism: LearnedKind::RpfNet,
            arch: NetArch::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.primal_lr > 0.0) || !(self.dual_lr >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::InvalidConfig("cosine final_fraction must lie in [0, 1]".into()));
            }
        }
        if !(self.epsilon >= 0.0) || !(self.initial_dual >= 0.0) {
            return Err(Error::InvalidConfig("epsilon and initial_dual must be nonnegative".into()));
        }
        self.inner.validate()?;
        self.solver.validate()
    }

    /// Freshly initialized mechanism of the configured kind.
    pub fn init_mechanism(&self, n: usize, m: usize) -> Result<Mechanism> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mech = match self.mechanism {
            LearnedKind::RpfNet => Mechanism::rpf_net(n, m, self.arch, &mut rng)?,
            LearnedKind::ExsNet => Mechanism::exs_net(n, m, self.arch, &mut rng)?,
            LearnedKind::SoftmaxNet => Mechanism::softmax_net(n, m, self.arch, &mut rng)?,
        };
        Ok(mech.with_solver(self.solver))
    }
}

/// One row of the training history. Metrics are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub log_nsw: f64,
    pub expl: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lagrangian: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub log_nsw: f64,
    pub expl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub duals: Vec<f64>,
    pub iteration: usize,
    pub optimizer: OptimizerState,
    pub history: Vec<HistoryRow>,
    #[serde(default)]
    pub evaluations: Vec<EvalRecord>,
    /// Last misreport per (sample, agent).
    #[serde(skip)]
    warm: Vec<Option<Vec<Report>>>,
}

type Report = (Vec<f64>, Vec<f64>);

impl TrainState {
    pub fn new(mech: &Mechanism, n_agents: usize, cfg: &TrainConfig) -> Result<Self> {
        let n_params = mech
            .network()
            .ok_or(Error::VariantMismatch("only learned mechanisms can be trained"))?
            .n_params();
        Ok(Self {
            duals: vec![cfg.initial_dual; n_agents],
            iteration: 0,
            optimizer: OptimizerState::new(cfg.optimizer, cfg.primal_lr, n_params),
            history: Vec::new(),
            evaluations: Vec::new(),
            warm: Vec::new(),
        })
    }
}

/// Batch sums of logNSW and of each agent's exploitability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub log_nsw_sum: f64,
    pub expl_sums: Vec<f64>,
    pub samples: usize,
}

impl BatchMetrics {
    pub fn log_nsw_mean(&self) -> f64 {
        self.log_nsw_sum / self.samples as f64
    }

    pub fn expl_means(&self) -> Vec<f64> {
        self.expl_sums.iter().map(|e| e / self.samples as f64).collect()
    }

    /// Mean over samples and agents.
    pub fn expl_mean(&self) -> f64 {
        let n = self.expl_sums.len().max(1) as f64;
        self.expl_sums.iter().sum::<f64>() / (n * self.samples as f64)
    }
}

/// `sum_i w_i log u_i` over agents that can receive positive utility.
/// Agents with zero weight or no demand are left out.
pub fn sample_log_nsw(utilities: &[f64], inst: &ProblemInstance) -> Result<f64> {
    let mut total = 0.0;
    for (i, &u) in utilities.iter().enumerate() {
        if !in_log_objective(inst, i) {
            continue;
        }
        if !(u > 0.0) {
            return Err(Error::NonPositiveUtility { agent: i, utility: u });
        }
        total += inst.weights()[i] * u.ln();
    }
    Ok(total)
}

/// Per-sample logNSW and per-agent exploitability.
pub fn sample_metrics(mech: &Mechanism, inst: &ProblemInstance, inner: &MisreportSearchConfig) -> Result<(f64, Vec<f64>)> {
    let u = mech.expected_utilities(inst)?;
    let log_nsw = sample_log_nsw(&u, inst)?;
    let mut expl = Vec::with_capacity(inst.n_agents());
    for i in 0..inst.n_agents() {
        let best = best_misreport_from(mech, inst, i, inner, &[])?;
        expl.push((best.achieved_utility - u[i]).max(0.0));
    }
    Ok((log_nsw, expl))
}

pub fn empirical_metrics(
    mech: &Mechanism,
    batch: &[ProblemInstance],
    inner: &MisreportSearchConfig,
) -> Result<BatchMetrics> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidInstance("empty batch".into()))?;
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .enumerate()
        .map(|(l, inst)| {
            sample_metrics(mech, inst, inner).map_err(|e| Error::SampleFailed {
                sample: l,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut out = BatchMetrics {
        log_nsw_sum: 0.0,
        expl_sums: vec![0.0; first.n_agents()],
        samples: batch.len(),
    };
    for (l, e) in per_sample {
        out.log_nsw_sum += l;
        for (s, v) in out.expl_sums.iter_mut().zip(e) {
            *s += v;
        }
    }
    Ok(out)
}

struct SamplePass {
    log_nsw: f64,
    expl: Vec<f64>,
    grad: Vec<f64>,
    misreports: Vec<Report>,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, g) in acc.iter_mut().zip(g) {
        *a += g;
    }
}

/// Misreport search with frozen outcome, then the gradient of the sample's
/// Lagrangian term through the truthful and every misreported allocation.
fn sample_pass(
    mech: &Mechanism,
    inst: &ProblemInstance,
    duals: &[f64],
    inner: &MisreportSearchConfig,
    warm: Option<&[Report]>,
) -> Result<SamplePass> {
    let (n, m) = (inst.n_agents(), inst.n_resources());
    let n_params = mech.network().map_or(0, |net| net.n_params());
    let fwd = mech.forward(inst)?;
    let a = &fwd.allocation.amounts;
    let u = utility_with(a, inst.values(), inst.demands(), m);
    let log_nsw = sample_log_nsw(&u, inst)?;

    let mut upstream = vec![0.0; n * m];
    let mut grad = vec![0.0; n_params];
    let mut expl = vec![0.0; n];
    let mut misreports = Vec::with_capacity(n);
    for i in 0..n {
        let tv = inst.agent_values(i);
        let tx = inst.agent_demands(i);
        let row = i * m..(i + 1) * m;
        let slope = utility_slope(&a[row.clone()], tv, tx);
        let mut coef = 0.0;
        if in_log_objective(inst, i) {
            coef -= inst.weights()[i] / u[i];
        }
        let starts: Vec<Report> = warm.and_then(|w| w.get(i)).cloned().into_iter().collect();
        let best = best_misreport_from(mech, inst, i, inner, &starts)?;
        let truthful = best.values == tv && best.demands == tx;
        if !truthful {
            expl[i] = (best.achieved_utility - u[i]).max(0.0);
            if duals[i] > 0.0 {
                coef -= duals[i];
                let reported = inst.with_report(i, &best.values, &best.demands)?;
                let mis = mech.forward(&reported)?;
                let mut up = vec![0.0; n * m];
                let mis_row = &mis.allocation.amounts[row.clone()];
                for (k, s) in utility_slope(mis_row, tv, tx).into_iter().enumerate() {
                    up[i * m + k] = duals[i] * s;
                }
                add_into(&mut grad, &mech.backward(&reported, &mis, &up)?.params);
            }
        }
        for (k, s) in slope.into_iter().enumerate() {
            upstream[i * m + k] = coef * s;
        }
        misreports.push((best.values, best.demands));
    }
    add_into(&mut grad, &mech.backward(inst, &fwd, &upstream)?.params);
    Ok(SamplePass {
        log_nsw,
        expl,
        grad,
        misreports,
    })
}

/// Per-step inner search seed so random restarts differ across steps and samples.
fn inner_for(cfg: &TrainConfig, iteration: usize, sample: usize) -> MisreportSearchConfig {
    let mut inner = cfg.inner;
    inner.seed = cfg
        .inner
        .seed
        .wrapping_add(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((iteration as u64).wrapping_mul(1_000_003))
        .wrapping_add((sample as u64).wrapping_mul(7919));
    inner
}

/// One primal-dual step on the samples `batch` (indices into `data`).
pub fn train_step(
    mech: &mut Mechanism,
    state: &mut TrainState,
    data: &[ProblemInstance],
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<HistoryRow> {
    let started = Instant::now();
    if batch.is_empty() {
        return Err(Error::InvalidInstance("empty batch".into()));
    }
    if state.warm.len() != data.len() {
        state.warm = vec![None; data.len()];
    }
    let n = data[batch[0]].n_agents();
    let frozen: &Mechanism = mech;
    let passes: Vec<SamplePass> = batch
        .par_iter()
        .map(|&l| {
            let inner = inner_for(cfg, state.iteration, l);
            let warm = if cfg.warm_start { state.warm[l].as_deref() } else { None };
            sample_pass(frozen, &data[l], &state.duals, &inner, warm).map_err(|e| Error::SampleFailed {
                sample: l,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let n_params = state.optimizer_len(mech);
    let mut grad = vec![0.0; n_params];
    let mut log_nsw_sum = 0.0;
    let mut expl_sums = vec![0.0; n];
    for (&l, pass) in batch.iter().zip(passes) {
        add_into(&mut grad, &pass.grad);
        log_nsw_sum += pass.log_nsw;
        add_into(&mut expl_sums, &pass.expl);
        state.warm[l] = Some(pass.misreports);
    }
    let lagrangian: f64 = state.duals.iter().zip(&expl_sums).map(|(g, e)| g * e).sum::<f64>() - log_nsw_sum;
    if !lagrangian.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
        });
    }
    let net = mech
        .network_mut()
        .ok_or(Error::VariantMismatch("only learned mechanisms can be trained"))?;
    optimizer_step(net, &grad, &mut state.optimizer)?;
    for (g, e) in state.duals.iter_mut().zip(&expl_sums) {
        *g = (*g + cfg.dual_lr * (e - cfg.epsilon)).max(0.0);
    }
    let s = batch.len() as f64;
    let row = HistoryRow {
        iteration: state.iteration,
        log_nsw: log_nsw_sum / s,
        expl: expl_sums.iter().map(|e| e / s).collect(),
        gamma: state.duals.clone(),
        lagrangian,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.iteration += 1;
    state.history.push(row.clone());
    Ok(row)
}

impl TrainState {
    fn optimizer_len(&self, mech: &Mechanism) -> usize {
        mech.network().map_or(0, |n| n.n_params())
    }
}

/// Trains a fresh mechanism of the configured kind on `data`.
pub fn train(data: &[ProblemInstance], cfg: &TrainConfig) -> Result<(Mechanism, TrainState)> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidInstance("empty training set".into()))?;
    let mech = cfg.init_mechanism(first.n_agents(), first.n_resources())?;
    train_from(mech, data, None, cfg, &mut |_, _| Ok(()))
}

/// Runs `cfg.iterations` steps from `mech`. Every `cfg.eval_every` steps the
/// held-out set (if any) is evaluated with `cfg.inner` and `on_eval` is called.
pub fn train_from(
    mut mech: Mechanism,
    data: &[ProblemInstance],
    holdout: Option<&[ProblemInstance]>,
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&Mechanism, &TrainState) -> Result<()>,
) -> Result<(Mechanism, TrainState)> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "training set of {} samples is smaller than the batch size {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let n = data[0].n_agents();
    let mut state = TrainState::new(&mech, n, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..cfg.iterations {
        state.optimizer.learning_rate = cfg.lr_schedule.rate(cfg.primal_lr, k, cfg.iterations);
        let batch = sample(&mut rng, data.len(), cfg.batch_size).into_vec();
        let row = train_step(&mut mech, &mut state, data, &batch, cfg)?;
        log::debug!(
            "step {k}: logNSW {:.4} expl {:?} gamma {:?}",
            row.log_nsw,
            row.expl,
            row.gamma
        );
        if cfg.eval_every > 0 && (k + 1) % cfg.eval_every == 0 {
            if let Some(test) = holdout {
                let m = empirical_metrics(&mech, test, &cfg.inner)?;
                state.evaluations.push(EvalRecord {
                    iteration: state.iteration,
                    log_nsw: m.log_nsw_mean(),
                    expl: m.expl_means(),
                });
            }
            on_eval(&mech, &state)?;
        }
    }
    Ok((mech, state))
}

pub fn save_checkpoint(dir: impl AsRef<Path>, mech: &Mechanism, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    mech.save(dir.join("model.json"))?;
    let file = std::fs::File::create(dir.join("state.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), state)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// CSV with columns iteration, logNSW, expl_1..expl_N, gamma_1..gamma_N, wall_time_ms.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let n = history.first().map_or(0, |r| r.expl.len());
    let mut header = vec!["iteration".to_string(), "logNSW".to_string()];
    header.extend((1..=n).map(|i| format!("expl_{i}")));
    header.extend((1..=n).map(|i| format!("gamma_{i}")));
    header.push("wall_time_ms".into());
    out.write_record(&header)?;
    for row in history {
        let mut rec = vec![row.iteration.to_string(), row.log_nsw.to_string()];
        rec.extend(row.expl.iter().map(f64::to_string));
        rec.extend(row.gamma.iter().map(f64::to_string));
        rec.push(row.wall_time_ms.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub train_size: usize,
    pub log_nsw_gap: f64,
    /// Per-agent absolute gap of mean exploitability.
    pub expl_gaps: Vec<f64>,
}

impl GapRow {
    pub fn expl_gap_mean(&self) -> f64 {
        self.expl_gaps.iter().sum::<f64>() / self.expl_gaps.len().max(1) as f64
    }
}

/// Absolute train-minus-test gap of mean logNSW and per-agent mean
/// exploitability for a mechanism and its training set.
pub fn generalization_gap(
    mech: &Mechanism,
    train_set: &[ProblemInstance],
    test_set: &[ProblemInstance],
    inner: &MisreportSearchConfig,
) -> Result<GapRow> {
    let tr = empirical_metrics(mech, train_set, inner)?;
    let te = empirical_metrics(mech, test_set, inner)?;
    Ok(gap_between(train_set.len(), &tr, &te))
}

fn gap_between(train_size: usize, tr: &BatchMetrics, te: &BatchMetrics) -> GapRow {
    GapRow {
        train_size,
        log_nsw_gap: (tr.log_nsw_mean() - te.log_nsw_mean()).abs(),
        expl_gaps: tr
            .expl_means()
            .iter()
            .zip(te.expl_means())
            .map(|(a, b)| (a - b).abs())
            .collect(),
    }
}

/// For each size L, trains on the first L samples of `train_set` and
/// reports the gap on that prefix against `test_set`.
pub fn generalization_report(
    train_set: &[ProblemInstance],
    test_set: &[ProblemInstance],
    sizes: &[usize],
    cfg: &TrainConfig,
    inner: &MisreportSearchConfig,
) -> Result<Vec<GapRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size > train_set.len() || size == 0 {
            return Err(Error::InvalidConfig(format!(
                "train size {size} outside 1..={}",
                train_set.len()
            )));
        }
        let prefix = &train_set[..size];
        let mut c = cfg.clone();
        c.batch_size = c.batch_size.min(size);
        let (mech, _) = train(prefix, &c)?;
        rows.push(generalization_gap(&mech, prefix, test_set, inner)?);
    }
    Ok(rows)
}

/// Writes rows as CSV: train_size, logNSW_gap, expl_gap_1..N.
pub fn write_gap_csv(path: impl AsRef<Path>, rows: &[GapRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = rows.first().map_or(0, |r| r.expl_gaps.len());
    let gaps: Vec<String> = (1..=n).map(|i| format!("expl_gap_{i}")).collect();
    writeln!(f, "train_size,logNSW_gap,{}", gaps.join(","))?;
    for r in rows {
        let g: Vec<String> = r.expl_gaps.iter().map(f64::to_string).collect();
        writeln!(f, "{},{},{}", r.train_size, r.log_nsw_gap, g.join(","))?;
    }
    Ok(())
}
