use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pfmech::data::{gen_adversarial, gen_cauchy_perturbed, gen_truthful, read_jsonl, write_jsonl, DEFAULT_CAUCHY_SCALE};
use pfmech::experiments::{
    default_ratio_grid, gen_report, linspace, ratio_sweep_instance, run_fig1_sweep, run_heatmap, run_table,
    ExperimentReport,
};
use pfmech::mechanism::pa_allocate;
use pfmech::problem::{efficiency, is_feasible, nsw, utility};
use pfmech::training::{save_checkpoint, train_from, write_history_csv, TrainConfig};
use pfmech::{Mechanism, MisreportSearchConfig, ProblemInstance, SolverConfig};
use rand::SeedableRng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "pfmech", version, about = "Payment-free resource allocation mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Truthful,
    Cauchy,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixed {
    Pf,
    Pa,
    Mixture,
}

#[derive(clap::Args)]
struct MechanismArgs {
    /// Learned mechanism JSON; repeatable.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Hand-designed mechanism; repeatable.
    #[arg(long, value_enum)]
    mechanism: Vec<Fixed>,
    /// PF probability of the mixture.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
}

impl MechanismArgs {
    fn load(&self) -> Result<Vec<Mechanism>> {
        let mut out = Vec::new();
        for m in &self.mechanism {
            out.push(fixed(*m, self.rho)?);
        }
        for path in &self.model {
            out.push(Mechanism::load(path).with_context(|| format!("loading model {}", path.display()))?);
        }
        if out.is_empty() {
            bail!("pass at least one --model or --mechanism");
        }
        Ok(out)
    }
}

fn fixed(m: Fixed, rho: f64) -> Result<Mechanism> {
    Ok(match m {
        Fixed::Pf => Mechanism::pf(),
        Fixed::Pa => Mechanism::pa(),
        Fixed::Mixture => Mechanism::mixture(rho)?,
    })
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-lines dataset.
    Datagen {
        #[arg(long, value_enum)]
        dist: Dist,
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        resources: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Cauchy noise scale.
        #[arg(long, default_value_t = DEFAULT_CAUCHY_SCALE)]
        scale: f64,
        /// Misreport search config JSON for adversarial data.
        #[arg(long)]
        search: Option<PathBuf>,
    },
    /// Allocate one instance and print the outcome as JSON.
    Solve {
        #[arg(long, value_enum)]
        mechanism: Fixed,
        /// Instance JSON, or a JSON-lines file whose first line is used.
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        /// Seed for the mixture's coin.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Solver config JSON.
        #[arg(long)]
        solver: Option<PathBuf>,
    },
    /// Train a learned mechanism.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out set evaluated every `eval_every` steps.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Directory for periodic model and state checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// History CSV; defaults to the model path with `.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate mechanisms on a dataset and write a CSV report with a JSON twin.
    Eval {
        #[command(flatten)]
        mechanisms: MechanismArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        search: Option<PathBuf>,
    },
    /// Sweep agent 0's reported value ratio on the fixed two-agent instance.
    SweepFig1 {
        #[command(flatten)]
        mechanisms: MechanismArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Agent 0's allocation over a grid of its two values.
    Heatmap {
        #[command(flatten)]
        mechanisms: MechanismArgs,
        #[arg(long, default_value_t = 46)]
        grid: usize,
        /// Base instance; defaults to the fixed two-agent instance.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect JSON reports into one markdown document.
    GenReport {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_instance(path: &Path) -> Result<ProblemInstance> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(inst) = serde_json::from_str(&text) {
        return Ok(inst);
    }
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .context("instance file is empty")?;
    Ok(serde_json::from_str(line)?)
}

fn read_data(path: &Path) -> Result<Vec<ProblemInstance>> {
    let data = read_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(data)
}

fn search_config(path: &Option<PathBuf>) -> Result<MisreportSearchConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(MisreportSearchConfig::default()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn suffixed(path: &Path, index: usize, count: usize) -> PathBuf {
    if count == 1 {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}-{index}{ext}"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen {
            dist,
            agents,
            resources,
            count,
            seed,
            out,
            scale,
            search,
        } => {
            let d = match dist {
                Dist::Truthful => gen_truthful(agents, resources, count, seed)?,
                Dist::Cauchy => gen_cauchy_perturbed(agents, resources, count, seed, scale)?,
                Dist::Adversarial => gen_adversarial(agents, resources, count, seed, &search_config(&search)?)?,
            };
            d.write_jsonl(&out)?;
            if let Some(base) = &d.base {
                write_jsonl(base, with_suffix(&out, ".base"))?;
            }
            log::info!("wrote {} instances to {}", d.len(), out.display());
        }
        Command::Solve {
            mechanism,
            instance,
            rho,
            seed,
            solver,
        } => {
            let inst = read_instance(&instance)?;
            let cfg: SolverConfig = match &solver {
                Some(p) => read_json(p)?,
                None => SolverConfig::default(),
            };
            let mech = fixed(mechanism, rho)?.with_solver(cfg);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let alloc = mech.allocate(&inst, Some(&mut rng))?;
            let mut out = json!({
                "mechanism": mech.name(),
                "allocation": alloc.amounts,
                "utilities": utility(&alloc, &inst)?,
                "nsw": nsw(&alloc, &inst)?,
                "efficiency": efficiency(&alloc, &inst)?,
                "feasible": is_feasible(&alloc, &inst, 1e-6),
            });
            if matches!(mechanism, Fixed::Pa) {
                out["ratios"] = json!(pa_allocate(&inst, &cfg)?.ratios);
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Train {
            config,
            data,
            out,
            holdout,
            checkpoint_dir,
            history,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let train_set = read_data(&data)?;
            let test_set = holdout.as_deref().map(read_data).transpose()?;
            let mech = cfg.init_mechanism(train_set[0].n_agents(), train_set[0].n_resources())?;
            let (mech, state) = train_from(mech, &train_set, test_set.as_deref(), &cfg, &mut |m, s| {
                if let Some(e) = s.evaluations.last() {
                    log::info!("step {}: held-out logNSW {:.4} exploitability {:?}", e.iteration, e.log_nsw, e.expl);
                }
                if let Some(dir) = &checkpoint_dir {
                    save_checkpoint(dir.join(format!("step-{}", s.iteration)), m, s)?;
                }
                Ok(())
            })?;
            mech.save(&out)?;
            let state_path = with_suffix(&out, ".state.json");
            std::fs::write(&state_path, serde_json::to_string_pretty(&state)?)?;
            let history = history.unwrap_or_else(|| with_suffix(&out, ".history.csv"));
            write_history_csv(&history, &state.history)?;
            log::info!("wrote {} and {}", out.display(), history.display());
        }
        Command::Eval {
            mechanisms,
            data,
            report,
            search,
        } => {
            let mechs = mechanisms.load()?;
            let test_set = read_data(&data)?;
            let r = run_table(&mechs, &test_set, &search_config(&search)?)?;
            r.write_csv(&report)?;
            r.write_json(report.with_extension("json"))?;
            print!("{}", r.to_markdown());
        }
        Command::SweepFig1 { mechanisms, out } => {
            let mechs = mechanisms.load()?;
            let inst = ratio_sweep_instance();
            let grid = default_ratio_grid();
            for (k, mech) in mechs.iter().enumerate() {
                let curve = run_fig1_sweep(mech, &inst, &grid)?;
                let path = suffixed(&out, k, mechs.len());
                curve.write_csv(&path)?;
                println!(
                    "{}: max utility {:.4}x truthful ({})",
                    curve.mechanism,
                    curve.max_gain_ratio(),
                    path.display()
                );
            }
        }
        Command::Heatmap {
            mechanisms,
            grid,
            instance,
            out,
        } => {
            let mechs = mechanisms.load()?;
            let inst = match &instance {
                Some(p) => read_instance(p)?,
                None => ratio_sweep_instance().with_bounds(Default::default())?,
            };
            let points = linspace(inst.bounds().v_lo, inst.bounds().v_hi, grid);
            for (k, mech) in mechs.iter().enumerate() {
                let h = run_heatmap(mech, &inst, &points)?;
                let path = suffixed(&out, k, mechs.len());
                h.write_csv(&path)?;
                println!(
                    "{}: {} of {} cells saturated ({})",
                    h.mechanism,
                    h.saturated_cells,
                    grid * grid,
                    path.display()
                );
            }
        }
        Command::GenReport { inputs, out } => {
            let mut reports = Vec::with_capacity(inputs.len());
            for p in &inputs {
                let title = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                reports.push((title, ExperimentReport::read_json(p)?));
            }
            std::fs::write(&out, gen_report(&reports))?;
            log::info!("wrote {}", out.display());
        }
    }
    Ok(())
}
