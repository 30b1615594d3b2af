//! One-dimensional comparison of the disentanglement loss against NT-Xent.
//!
//! Four overlapping discretized Gaussians form two subjects (maps 0, 1 and
//! maps 2, 3). Their logits are optimized directly under the chosen
//! objective; snapshots of the distributions are recorded along the way.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::LossKind;
use crate::distributions::{entropy_normalized_slice, ProbField};
use crate::error::{Error, Result};
use crate::objective::{intergroup_jsd, intra_coherence, loss_gradient, LossConfig, Objective, PromptSpec};
use crate::scalar::Scalar;

/// How logits move along the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyOptimizer {
    /// `z ← z − step · sign(∇z)`.
    Sign { step: f64 },
    /// `z ← z − lr · ∇z`.
    Gradient { lr: f64 },
    /// Adam with the usual `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub cells: usize,
    pub iterations: usize,
    pub optimizer: ToyOptimizer,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub temperature: f64,
    pub seed: u64,
    /// Record a snapshot every this many iterations (0 records only the first and last).
    pub snapshot_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            cells: 100,
            iterations: 2500,
            optimizer: ToyOptimizer::Sign { step: 0.01 },
            loss: LossKind::Jedi,
            loss_config: LossConfig::default(),
            temperature: crate::objective::DEFAULT_TEMPERATURE,
            seed: 0,
            snapshot_every: 100,
        }
    }
}

impl ToyConfig {
    fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Jedi => Objective::Jedi(self.loss_config),
            LossKind::NtXent => Objective::NtXent { temperature: self.temperature },
        }
    }
}

/// Group structure of the toy: `{0, 1}` and `{2, 3}`.
pub fn toy_prompt() -> PromptSpec {
    PromptSpec::contiguous(2, 2).expect("static spec")
}

/// Initial logits: four Gaussians centred at 35/45/55/65 % of the line with
/// width 8 %, jittered per seed (centres ±2 %, widths ×[0.85, 1.15]).
pub fn initial_logits<T: Scalar>(cells: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = cells as f64 / 100.0;
    [35.0, 45.0, 55.0, 65.0]
        .iter()
        .map(|&c| {
            let centre = (c + rng.gen_range(-2.0..=2.0)) * scale;
            let width = 8.0 * scale * rng.gen_range(0.85..=1.15);
            (0..cells)
                .map(|i| {
                    let z = (i as f64 + 0.5 - centre) / width;
                    T::lit(-0.5 * z * z)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMetrics<T> {
    /// Mean normalized JSD within each group.
    pub within: T,
    /// Normalized JSD between the two group mixtures.
    pub between: T,
    /// Normalized entropy of each group mixture.
    pub mixture_entropy: Vec<T>,
}

pub fn toy_metrics<T: Scalar>(prompt: &PromptSpec, pool: &[ProbField<T>]) -> Result<ToyMetrics<T>> {
    let mixture_entropy = prompt
        .subjects()
        .iter()
        .map(|g| {
            let members: Vec<&[T]> = g.map_indices.iter().map(|&i| pool[i].values()).collect();
            entropy_normalized_slice(&crate::distributions::mixture_slices(&members))
        })
        .collect();
    Ok(ToyMetrics {
        within: intra_coherence(prompt, pool)?,
        between: intergroup_jsd(prompt, pool)?,
        mixture_entropy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFrame<T> {
    pub iteration: usize,
    pub maps: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyResult<T> {
    pub initial: ToyMetrics<T>,
    pub final_metrics: ToyMetrics<T>,
    pub frames: Vec<ToyFrame<T>>,
    pub loss_history: Vec<T>,
}

fn fields<T: Scalar>(logits: &[Vec<T>]) -> Result<Vec<ProbField<T>>> {
    logits.iter().map(|z| ProbField::from_logits(z)).collect()
}

pub fn run_toy<T: Scalar>(cfg: &ToyConfig) -> Result<ToyResult<T>> {
    if cfg.cells < 2 {
        return Err(Error::InvalidConfig("toy needs at least 2 cells".into()));
    }
    let prompt = toy_prompt();
    let objective = cfg.objective();
    objective.validate()?;
    let mut logits = initial_logits::<T>(cfg.cells, cfg.seed);
    let initial = toy_metrics(&prompt, &fields(&logits)?)?;
    let mut frames = vec![ToyFrame { iteration: 0, maps: fields(&logits)?.into_iter().map(ProbField::into_values).collect() }];
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut first: Vec<Vec<T>> = logits.iter().map(|z| vec![T::zero(); z.len()]).collect();
    let mut second = first.clone();
    let (beta1, beta2) = (T::lit(0.9), T::lit(0.999));
    for it in 1..=cfg.iterations {
        let grad = loss_gradient(&prompt, &logits, &objective)?;
        loss_history.push(grad.value);
        let bias1 = T::one() - beta1.powi(it as i32);
        let bias2 = T::one() - beta2.powi(it as i32);
        for (k, (z, g)) in logits.iter_mut().zip(&grad.logits).enumerate() {
            for (i, (zi, &gi)) in z.iter_mut().zip(g).enumerate() {
                *zi = *zi
                    - match cfg.optimizer {
                        ToyOptimizer::Sign { step } => T::lit(step) * gi.sign_or_zero(),
                        ToyOptimizer::Gradient { lr } => T::lit(lr) * gi,
                        ToyOptimizer::Adam { lr } => {
                            let m = &mut first[k][i];
                            let v = &mut second[k][i];
                            *m = beta1 * *m + (T::one() - beta1) * gi;
                            *v = beta2 * *v + (T::one() - beta2) * gi * gi;
                            T::lit(lr) * (*m / bias1) / ((*v / bias2).sqrt() + T::lit(1e-8))
                        }
                    };
            }
        }
        if (cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0) || it == cfg.iterations {
            frames.push(ToyFrame { iteration: it, maps: fields(&logits)?.into_iter().map(ProbField::into_values).collect() });
        }
    }
    let final_metrics = toy_metrics(&prompt, &fields(&logits)?)?;
    Ok(ToyResult { initial, final_metrics, frames, loss_history })
}

/// Snapshots in long form: `iteration,map,group,cell,value`.
pub fn write_frames_csv<T: Scalar, W: Write>(frames: &[ToyFrame<T>], out: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "map", "group", "cell", "value"]).map_err(csv_err)?;
    for f in frames {
        for (k, map) in f.maps.iter().enumerate() {
            for (cell, v) in map.iter().enumerate() {
                w.write_record([f.iteration.to_string(), k.to_string(), (k / 2).to_string(), cell.to_string(), v.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}
