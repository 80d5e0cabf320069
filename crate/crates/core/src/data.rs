//! Synthetic datasets: uniform values with Bernoulli-masked uniform demands,
//! a Cauchy-perturbed variant, and PF-adversarial reports.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exploitability::{best_misreport, MisreportSearchConfig};
use crate::mechanism::Mechanism;
use crate::problem::{BoxBounds, ProblemInstance};

pub const DEFAULT_CAUCHY_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Truthful,
    CauchyPerturbed,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_agents: usize,
    pub n_resources: usize,
    pub count: usize,
    /// Cauchy scale for the perturbed distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<ProblemInstance>,
    pub provenance: Provenance,
    pub seed: u64,
    pub params: GenParams,
    /// Truthful parameters behind adversarial reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Vec<ProblemInstance>>,
}

/// Independent stream per sample so generation is order-free and parallel.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sample_cauchy_noise<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    if scale > 0.0 {
        Cauchy::new(0.0, scale).expect("positive scale").sample(rng)
    } else {
        0.0
    }
}

struct BaseDraw {
    values: Vec<f64>,
    demands: Vec<f64>,
    mask: Vec<bool>,
}

fn base_draw(rng: &mut ChaCha8Rng, nm: usize) -> BaseDraw {
    let values = (0..nm).map(|_| rng.gen_range(0.1..1.0)).collect();
    let demands = (0..nm).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mask = (0..nm).map(|_| rng.gen_bool(0.5)).collect();
    BaseDraw { values, demands, mask }
}

fn build(n: usize, m: usize, values: Vec<f64>, demands: Vec<f64>) -> ProblemInstance {
    ProblemInstance::new(
        n,
        m,
        values,
        demands,
        vec![n as f64 / 2.0; m],
        vec![1.0; n],
        BoxBounds::default(),
    )
    .expect("generated instance lies in the default box")
}

fn check_shape(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one agent and resource".into()));
    }
    Ok(())
}

/// Values and demands uniform on [0.1, 1], each demand zeroed with
/// probability 1/2; budgets N/2 and unit weights.
pub fn gen_truthful(n: usize, m: usize, count: usize, seed: u64) -> Result<Dataset> {
    check_shape(n, m)?;
    let instances = (0..count)
        .into_par_iter()
        .map(|l| {
            let d = base_draw(&mut sample_rng(seed, l), n * m);
            let demands = d.demands.iter().zip(&d.mask).map(|(x, keep)| if *keep { *x } else { 0.0 }).collect();
            build(n, m, d.values, demands)
        })
        .collect();
    Ok(Dataset {
        instances,
        provenance: Provenance::Truthful,
        seed,
        params: GenParams {
            n_agents: n,
            n_resources: m,
            count,
            scale: None,
        },
        base: None,
    })
}

/// Base uniforms plus Cauchy noise, clipped to [0.1, 1]; the demand mask is
/// applied after clipping.
pub fn gen_cauchy_perturbed(n: usize, m: usize, count: usize, seed: u64, scale: f64) -> Result<Dataset> {
    check_shape(n, m)?;
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::InvalidConfig(format!("Cauchy scale {scale} must be finite and nonnegative")));
    }
    let nm = n * m;
    let instances = (0..count)
        .into_par_iter()
        .map(|l| {
            let mut rng = sample_rng(seed, l);
            let d = base_draw(&mut rng, nm);
            let values = d
                .values
                .iter()
                .map(|v| (v + sample_cauchy_noise(&mut rng, scale)).clamp(0.1, 1.0))
                .collect();
            let demands = d
                .demands
                .iter()
                .zip(&d.mask)
                .map(|(x, keep)| {
                    let noisy = (x + sample_cauchy_noise(&mut rng, scale)).clamp(0.1, 1.0);
                    if *keep {
                        noisy
                    } else {
                        0.0
                    }
                })
                .collect();
            build(n, m, values, demands)
        })
        .collect();
    Ok(Dataset {
        instances,
        provenance: Provenance::CauchyPerturbed,
        seed,
        params: GenParams {
            n_agents: n,
            n_resources: m,
            count,
            scale: Some(scale),
        },
        base: None,
    })
}

/// Each agent's report replaced by its best PF misreport against the
/// others' base reports. Samples whose search fails are skipped.
pub fn gen_adversarial(
    n: usize,
    m: usize,
    count: usize,
    seed: u64,
    search: &MisreportSearchConfig,
) -> Result<Dataset> {
    let base = gen_truthful(n, m, count, seed)?;
    let pf = Mechanism::pf();
    let pairs: Vec<(ProblemInstance, ProblemInstance)> = base
        .instances
        .into_par_iter()
        .enumerate()
        .filter_map(|(l, inst)| {
            let mut values = inst.values().to_vec();
            let mut demands = inst.demands().to_vec();
            for i in 0..n {
                match best_misreport(&pf, &inst, i, search) {
                    Ok(mis) => {
                        values[i * m..(i + 1) * m].copy_from_slice(&mis.values);
                        demands[i * m..(i + 1) * m].copy_from_slice(&mis.demands);
                    }
                    Err(e) => {
                        log::warn!("skipping adversarial sample {l}: {e}");
                        return None;
                    }
                }
            }
            Some((build(n, m, values, demands), inst))
        })
        .collect();
    let (instances, base): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Dataset {
        instances,
        provenance: Provenance::Adversarial,
        seed,
        params: GenParams {
            n_agents: n,
            n_resources: m,
            count,
            scale: None,
        },
        base: Some(base),
    })
}

/// Default (train, test) sizes for the two desk-scale settings.
pub fn default_split(n: usize, m: usize) -> (usize, usize) {
    if n <= 2 && m <= 2 {
        (4096, 1024)
    } else {
        (2048, 512)
    }
}

impl Dataset {
    pub fn from_instances(instances: Vec<ProblemInstance>, provenance: Provenance) -> Result<Self> {
        let first = instances
            .first()
            .ok_or_else(|| Error::InvalidInstance("dataset is empty".into()))?;
        let (n, m) = (first.n_agents(), first.n_resources());
        if let Some(bad) = instances.iter().position(|i| i.n_agents() != n || i.n_resources() != m) {
            return Err(Error::InvalidInstance(format!(
                "instance {bad} has a different shape than instance 0"
            )));
        }
        Ok(Self {
            params: GenParams {
                n_agents: n,
                n_resources: m,
                count: instances.len(),
                scale: None,
            },
            instances,
            provenance,
            seed: 0,
            base: None,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Writes one instance per line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(&self.instances, path)
    }
}

pub fn write_jsonl(instances: &[ProblemInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ProblemInstance>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
