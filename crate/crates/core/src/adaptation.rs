//! Test-time latent adaptation: sign-gradient updates of the latent against
//! the disentanglement loss of the model's own attention maps, interleaved
//! with ordinary denoising steps.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distributions::ProbField;
use crate::error::{Error, Result};
use crate::objective::{intergroup_jsd, jedi_loss, loss_gradient, LossConfig, Objective, ObjectiveBreakdown, PromptSpec};
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA: f64 = 3e-3;
pub const DEFAULT_HORIZON: usize = 18;
pub const DEFAULT_STEPS: usize = 28;

/// Learning rates of the published learning-rate sweep, largest first.
pub const SWEEP_ALPHAS: [f64; 9] = [5e-1, 3e-1, 1e-1, 5e-2, 3e-2, 1e-2, 5e-3, 3e-3, 1e-3];

/// Latent vector at a given denoising timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub x: Vec<T>,
    pub timestep: usize,
}

impl<T: Scalar> LatentState<T> {
    pub fn new(x: Vec<T>, timestep: usize) -> Result<Self> {
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { x, timestep })
    }

    /// `max_i |x_i − other_i|`.
    pub fn linf_distance(&self, other: &Self) -> T {
        self.x.iter().zip(&other.x).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

/// A denoiser that exposes differentiable attention maps.
///
/// Implementations must be deterministic in `(state, seed)`.
pub trait AttentionModel<T: Scalar> {
    fn latent_dim(&self) -> usize;

    /// Number of attention maps in the pool the model emits.
    fn pool_size(&self) -> usize;

    /// Starting latent `x_0` for a run.
    fn initial_latent(&self, seed: u64) -> LatentState<T>;

    /// Denoise once: returns `x_{t+1}` and the attention pool observed at `state`.
    fn step(&self, state: &LatentState<T>, seed: u64) -> Result<(LatentState<T>, Vec<ProbField<T>>)>;

    /// Attention pool at `state`, as pre-softmax logits.
    fn attention_logits(&self, state: &LatentState<T>) -> Result<Vec<Vec<T>>>;

    /// Vector-Jacobian product of [`AttentionModel::attention_logits`] at `state`.
    fn pullback(&self, state: &LatentState<T>, logit_adjoint: &[Vec<T>]) -> Result<Vec<T>>;
}

/// `x ← x − α · sign(grad)` with `sign(0) = 0`.
pub fn fgsm_update<T: Scalar>(state: &LatentState<T>, grad: &[T], alpha: T) -> Result<LatentState<T>> {
    if grad.len() != state.x.len() {
        return Err(Error::DimensionMismatch { expected: state.x.len(), found: grad.len() });
    }
    if !(alpha.is_finite() && alpha >= T::zero()) {
        return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    let x = state.x.iter().zip(grad).map(|(&x, &g)| x - alpha * g.sign_or_zero()).collect();
    Ok(LatentState { x, timestep: state.timestep })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Jedi,
    NtXent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub alpha: f64,
    /// Optimization horizon: timesteps `0..k` receive latent updates.
    pub k: usize,
    /// Total denoising steps.
    pub t: usize,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub temperature: f64,
    /// Sign-gradient updates per optimized timestep.
    pub inner_iterations: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_HORIZON,
            t: DEFAULT_STEPS,
            loss: LossKind::Jedi,
            loss_config: LossConfig::default(),
            temperature: crate::objective::DEFAULT_TEMPERATURE,
            inner_iterations: 1,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.k > self.t {
            return Err(Error::InvalidConfig(format!("horizon k = {} exceeds total steps t = {}", self.k, self.t)));
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Jedi => Objective::Jedi(self.loss_config),
            LossKind::NtXent => Objective::NtXent { temperature: self.temperature },
        }
    }

    /// Same run with the optimization loop switched off.
    pub fn baseline(&self) -> Self {
        Self { k: 0, ..*self }
    }
}

/// Per-timestep record of a run. The breakdown uses the run's [`LossConfig`]
/// regardless of which objective drove the updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub timestep: usize,
    pub breakdown: ObjectiveBreakdown<T>,
    pub intergroup_jsd: T,
}

/// One sign-gradient update as applied.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentUpdate<T> {
    pub timestep: usize,
    pub before: Vec<T>,
    /// The applied step `α · sign(grad)`; every entry is exactly `0` or `±α`.
    pub step: Vec<T>,
    pub after: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult<T> {
    pub final_state: LatentState<T>,
    pub trace: Vec<TraceRow<T>>,
    pub updates: Vec<LatentUpdate<T>>,
    /// Latent handed to the denoiser at each timestep (after any update).
    pub denoised_inputs: Vec<LatentState<T>>,
    /// Loss and score of the attention at the final latent.
    pub final_breakdown: ObjectiveBreakdown<T>,
    pub final_intergroup_jsd: T,
}

impl<T: Scalar> RunResult<T> {
    pub fn update_count(&self) -> usize {
        self.updates.len()
    }
}

/// A run that failed part-way; `trace` holds the rows completed before the failure.
#[derive(Debug)]
pub struct Aborted<T> {
    pub error: Error,
    pub trace: Vec<TraceRow<T>>,
}

impl<T> From<Aborted<T>> for Error {
    fn from(a: Aborted<T>) -> Self {
        a.error
    }
}

fn pool_from_logits<T: Scalar>(logits: &[Vec<T>]) -> Result<Vec<ProbField<T>>> {
    logits.iter().map(|z| ProbField::from_logits(z)).collect()
}

/// Runs the test-time adaptation loop.
///
/// For `t < k` the attention at `x_t` is evaluated by an extra model call, the
/// latent takes `inner_iterations` sign-gradient steps, and then the denoiser
/// advances. For `t >= k` only the denoiser runs.
pub fn run_adaptation<T: Scalar, M: AttentionModel<T> + ?Sized>(
    model: &M,
    prompt: &PromptSpec,
    cfg: &LoopConfig,
) -> std::result::Result<RunResult<T>, Aborted<T>> {
    let mut trace = Vec::with_capacity(cfg.t);
    // Inputs were validated up front, so a non-finite value inside the loop
    // means the iteration itself blew up.
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(Error::NonFinite { index }) => {
                    let error = Error::Numerical(format!("non-finite value at index {index} at timestep {}", trace.len()));
                    return Err(Aborted { error, trace });
                }
                Err(error) => return Err(Aborted { error, trace }),
            }
        };
    }
    bail!(cfg.validate());
    bail!(prompt.check_pool(model.pool_size()));
    let objective = cfg.objective();
    let alpha = T::lit(cfg.alpha);

    let mut state = model.initial_latent(cfg.seed);
    let mut updates = Vec::new();
    let mut denoised_inputs = Vec::with_capacity(cfg.t);
    for t in 0..cfg.t {
        state.timestep = t;
        if t < cfg.k {
            for _ in 0..cfg.inner_iterations {
                let logits = bail!(model.attention_logits(&state));
                let grad = bail!(loss_gradient(prompt, &logits, &objective));
                let latent_grad = bail!(model.pullback(&state, &grad.logits));
                let next = bail!(fgsm_update(&state, &latent_grad, alpha));
                let step = latent_grad.iter().map(|g| alpha * g.sign_or_zero()).collect();
                updates.push(LatentUpdate { timestep: t, before: state.x.clone(), step, after: next.x.clone() });
                state = next;
            }
        }
        denoised_inputs.push(state.clone());
        let (next, pool) = bail!(model.step(&state, cfg.seed));
        let breakdown = bail!(jedi_loss(prompt, &pool, &cfg.loss_config));
        let score = bail!(intergroup_jsd(prompt, &pool));
        trace.push(TraceRow { timestep: t, breakdown, intergroup_jsd: score });
        state = next;
    }

    let final_pool = bail!(model.attention_logits(&state).and_then(|z| pool_from_logits(&z)));
    let final_breakdown = bail!(jedi_loss(prompt, &final_pool, &cfg.loss_config));
    let final_intergroup_jsd = bail!(intergroup_jsd(prompt, &final_pool));
    Ok(RunResult { final_state: state, trace, updates, denoised_inputs, final_breakdown, final_intergroup_jsd })
}

/// Trace as CSV: `timestep,intra,inter,diversity,total,intergroup_jsd`.
pub fn write_trace_csv<T: Scalar, W: Write>(trace: &[TraceRow<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["timestep", "intra", "inter", "diversity", "total", "intergroup_jsd"]).map_err(csv_err)?;
    for row in trace {
        let b = &row.breakdown;
        w.write_record([
            row.timestep.to_string(),
            b.intra.to_string(),
            b.inter.to_string(),
            b.diversity.to_string(),
            b.total.to_string(),
            row.intergroup_jsd.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Summary of one learning rate in a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow<T> {
    pub alpha: f64,
    pub final_total: T,
    pub final_intergroup_jsd: T,
    /// `‖x_final − x_final^{baseline}‖∞` against the same-seed run without updates.
    pub displacement: T,
    pub updates: usize,
}

/// One adaptation run per learning rate, all sharing `cfg.seed`.
pub fn alpha_sweep<T: Scalar, M: AttentionModel<T> + ?Sized>(
    model: &M,
    prompt: &PromptSpec,
    cfg: &LoopConfig,
    alphas: &[f64],
) -> Result<Vec<SweepRow<T>>> {
    let baseline = run_adaptation(model, prompt, &cfg.baseline())?;
    alphas
        .iter()
        .map(|&alpha| {
            let run = run_adaptation(model, prompt, &LoopConfig { alpha, ..*cfg })?;
            Ok(SweepRow {
                alpha,
                final_total: run.final_breakdown.total,
                final_intergroup_jsd: run.final_intergroup_jsd,
                displacement: run.final_state.linf_distance(&baseline.final_state),
                updates: run.update_count(),
            })
        })
        .collect()
}

pub fn write_sweep_csv<T: Scalar, W: Write>(rows: &[SweepRow<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["alpha", "final_total", "final_intergroup_jsd", "displacement_inf", "updates"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.alpha.to_string(),
            r.final_total.to_string(),
            r.final_intergroup_jsd.to_string(),
            r.displacement.to_string(),
            r.updates.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Parameters of [`SyntheticModel`] dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Blob width at zero log-scale, in normalized grid units (grid spans `[-1, 1]`).
    pub base_width: f64,
    /// Logit height of a blob at zero log-amplitude.
    pub base_amplitude: f64,
    /// Standard deviation of the initial latent.
    pub init_scale: f64,
    /// Per-step contraction toward the zero equilibrium.
    pub contraction: f64,
    /// Standard deviation of the per-step drift noise.
    pub noise: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { base_width: 0.35, base_amplitude: 4.0, init_scale: 0.1, contraction: 0.05, noise: 0.005 }
    }
}

/// Differentiable stand-in for a text-to-image denoiser.
///
/// The latent holds four parameters per attention map: blob centre `(cx, cy)`,
/// log-width and log-amplitude. Map `j` has logits
/// `a · exp(−|r − c|² / 2σ²)` over the grid cells `r`, so its attention is the
/// softmax of a Gaussian bump. Maps `s·k .. (s+1)·k` belong to subject `s`.
#[derive(Debug, Clone)]
pub struct SyntheticModel<T> {
    num_subjects: usize,
    maps_per_subject: usize,
    grid: (usize, usize),
    seed: u64,
    params: SyntheticParams,
    coords: Vec<(T, T)>,
}

pub const PARAMS_PER_MAP: usize = 4;

impl<T: Scalar> SyntheticModel<T> {
    pub fn new(num_subjects: usize, maps_per_subject: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        Self::with_params(num_subjects, maps_per_subject, grid, seed, SyntheticParams::default())
    }

    pub fn with_params(
        num_subjects: usize,
        maps_per_subject: usize,
        grid: (usize, usize),
        seed: u64,
        params: SyntheticParams,
    ) -> Result<Self> {
        let (h, w) = grid;
        if h * w < 4 {
            return Err(Error::InvalidConfig(format!("grid {h}x{w} has fewer than 4 cells")));
        }
        if num_subjects == 0 || maps_per_subject == 0 {
            return Err(Error::InvalidConfig("need at least one subject and one map per subject".into()));
        }
        let axis = |i: usize, n: usize| T::lit((i as f64 + 0.5) / n as f64 * 2.0 - 1.0);
        let coords = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| (axis(c, w), axis(r, h))).collect();
        Ok(Self { num_subjects, maps_per_subject, grid, seed, params, coords })
    }

    pub fn prompt(&self) -> PromptSpec {
        PromptSpec::contiguous(self.num_subjects, self.maps_per_subject).expect("non-empty groups")
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn rng(&self, run_seed: u64, timestep: u64) -> ChaCha8Rng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ run_seed.rotate_left(17)
            ^ timestep.wrapping_mul(0xD1B5_4A32_D192_ED03);
        ChaCha8Rng::seed_from_u64(mixed)
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn check_dim(&self, state: &LatentState<T>) -> Result<()> {
        if state.x.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch { expected: self.latent_dim(), found: state.x.len() });
        }
        Ok(())
    }

    /// Per-cell bump values `exp(−|r − c|² / 2σ²)` and the blob parameters.
    fn bumps(&self, params: &[T]) -> (Vec<T>, T, T) {
        let (cx, cy) = (params[0], params[1]);
        let sigma = T::lit(self.params.base_width) * params[2].exp();
        let amp = T::lit(self.params.base_amplitude) * params[3].exp();
        let two = T::lit(2.0);
        let g = self
            .coords
            .iter()
            .map(|&(u, v)| {
                let r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                (-r2 / (two * sigma * sigma)).exp()
            })
            .collect();
        (g, sigma, amp)
    }
}

impl<T: Scalar> AttentionModel<T> for SyntheticModel<T> {
    fn latent_dim(&self) -> usize {
        self.pool_size() * PARAMS_PER_MAP
    }

    fn pool_size(&self) -> usize {
        self.num_subjects * self.maps_per_subject
    }

    fn initial_latent(&self, seed: u64) -> LatentState<T> {
        let mut rng = self.rng(seed, u64::MAX);
        let x = (0..self.latent_dim()).map(|_| T::lit(self.params.init_scale * Self::normal(&mut rng))).collect();
        LatentState { x, timestep: 0 }
    }

    fn step(&self, state: &LatentState<T>, seed: u64) -> Result<(LatentState<T>, Vec<ProbField<T>>)> {
        let pool = pool_from_logits(&self.attention_logits(state)?)?;
        let (h, w) = self.grid;
        let pool = pool.into_iter().map(|p| p.reshaped(h, w)).collect::<Result<Vec<_>>>()?;
        let mut rng = self.rng(seed, state.timestep as u64);
        let keep = T::lit(1.0 - self.params.contraction);
        let x = state
            .x
            .iter()
            .map(|&v| keep * v + T::lit(self.params.noise * Self::normal(&mut rng)))
            .collect();
        Ok((LatentState::new(x, state.timestep + 1)?, pool))
    }

    fn attention_logits(&self, state: &LatentState<T>) -> Result<Vec<Vec<T>>> {
        self.check_dim(state)?;
        Ok(state
            .x
            .chunks(PARAMS_PER_MAP)
            .map(|p| {
                let (g, _, amp) = self.bumps(p);
                g.into_iter().map(|v| amp * v).collect()
            })
            .collect())
    }

    fn pullback(&self, state: &LatentState<T>, logit_adjoint: &[Vec<T>]) -> Result<Vec<T>> {
        self.check_dim(state)?;
        if logit_adjoint.len() != self.pool_size() {
            return Err(Error::DimensionMismatch { expected: self.pool_size(), found: logit_adjoint.len() });
        }
        let mut out = vec![T::zero(); self.latent_dim()];
        for ((params, adj), grad) in state.x.chunks(PARAMS_PER_MAP).zip(logit_adjoint).zip(out.chunks_mut(PARAMS_PER_MAP)) {
            if adj.len() != self.coords.len() {
                return Err(Error::DimensionMismatch { expected: self.coords.len(), found: adj.len() });
            }
            let (g, sigma, amp) = self.bumps(params);
            let inv_var = T::one() / (sigma * sigma);
            for ((&(u, v), &gj), &aj) in self.coords.iter().zip(&g).zip(adj) {
                let logit = amp * gj;
                let (du, dv) = (u - params[0], v - params[1]);
                grad[0] = grad[0] + aj * logit * du * inv_var;
                grad[1] = grad[1] + aj * logit * dv * inv_var;
                grad[2] = grad[2] + aj * logit * (du * du + dv * dv) * inv_var;
                grad[3] = grad[3] + aj * logit;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SyntheticModel<f64> {
        SyntheticModel::new(2, 2, (8, 8), 7).unwrap()
    }

    #[test]
    fn fgsm_examples() {
        let s = LatentState::new(vec![0.25, -1.0], 3).unwrap();
        assert_eq!(fgsm_update(&s, &[0.0, 0.0], 3e-3).unwrap(), s);
        let out = fgsm_update(&s, &[2.5, -0.1], 3e-3).unwrap();
        assert_eq!(out.x, vec![0.25 - 3e-3, -1.0 + 3e-3]);
        assert_eq!(out.timestep, 3);
    }

    #[test]
    fn fgsm_rejects_bad_input() {
        let s = LatentState::new(vec![0.0, 0.0], 0).unwrap();
        assert!(matches!(fgsm_update(&s, &[f64::NAN, 0.0], 0.1), Err(Error::NonFiniteGradient { index: 0 })));
        assert!(matches!(fgsm_update(&s, &[1.0], 0.1), Err(Error::DimensionMismatch { .. })));
        assert!(fgsm_update(&s, &[1.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn loop_config_validation() {
        assert!(LoopConfig { k: 29, ..LoopConfig::default() }.validate().is_err());
        assert!(LoopConfig { alpha: f64::NAN, ..LoopConfig::default() }.validate().is_err());
        assert!(LoopConfig { loss: LossKind::NtXent, temperature: 0.0, ..LoopConfig::default() }.validate().is_err());
        LoopConfig::default().validate().unwrap();
    }

    #[test]
    fn synthetic_model_emits_valid_shaped_fields() {
        let m = model();
        let x0 = m.initial_latent(1);
        let (x1, pool) = m.step(&x0, 1).unwrap();
        assert_eq!(x1.timestep, 1);
        assert_eq!(pool.len(), 4);
        for p in &pool {
            assert_eq!(p.shape(), Some((8, 8)));
            assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_model_rejects_tiny_grids() {
        assert!(SyntheticModel::<f64>::new(2, 1, (1, 3), 0).is_err());
        assert!(SyntheticModel::<f64>::new(0, 1, (4, 4), 0).is_err());
    }

    #[test]
    fn coincident_subjects_start_with_near_maximal_penalty() {
        let m = model();
        let prompt = m.prompt();
        let zero = LatentState::new(vec![0.0; m.latent_dim()], 0).unwrap();
        let pool = pool_from_logits(&m.attention_logits(&zero).unwrap()).unwrap();
        let b = jedi_loss(&prompt, &pool, &LossConfig::default()).unwrap();
        assert!((b.inter - 1.0).abs() < 1e-12);
        let (_, pool) = m.step(&m.initial_latent(3), 3).unwrap();
        let b = jedi_loss(&prompt, &pool, &LossConfig::default()).unwrap();
        assert!(b.inter > 0.9, "{}", b.inter);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let m = model();
        let state = m.initial_latent(11);
        let adjoint: Vec<Vec<f64>> = (0..4).map(|j| (0..64).map(|i| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5).collect()).collect();
        let f = |x: &[f64]| -> f64 {
            let s = LatentState { x: x.to_vec(), timestep: 0 };
            m.attention_logits(&s).unwrap().iter().zip(&adjoint).flat_map(|(z, a)| z.iter().zip(a).map(|(p, q)| p * q)).sum()
        };
        let analytic = m.pullback(&state, &adjoint).unwrap();
        let h = 1e-5;
        for i in 0..state.x.len() {
            let mut plus = state.x.clone();
            let mut minus = state.x.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "param {i}: analytic {} vs fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn disabled_loop_equals_plain_sampling() {
        let m = model();
        let prompt = m.prompt();
        let cfg = LoopConfig { k: 0, seed: 5, ..LoopConfig::default() };
        let run = run_adaptation(&m, &prompt, &cfg).unwrap();
        let mut x = m.initial_latent(5);
        for t in 0..cfg.t {
            x.timestep = t;
            x = m.step(&x, 5).unwrap().0;
        }
        assert_eq!(run.final_state, x);
        assert_eq!(run.update_count(), 0);
    }

    #[test]
    fn runs_are_reproducible() {
        let m = model();
        let cfg = LoopConfig { seed: 42, ..LoopConfig::default() };
        let a = run_adaptation(&m, &m.prompt(), &cfg).unwrap();
        let b = run_adaptation(&m, &m.prompt(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 28);
        assert_eq!(a.update_count(), 18);
    }

    #[test]
    fn inner_iterations_multiply_updates() {
        let m = model();
        let cfg = LoopConfig { k: 3, t: 5, inner_iterations: 4, ..LoopConfig::default() };
        assert_eq!(run_adaptation(&m, &m.prompt(), &cfg).unwrap().update_count(), 12);
    }

    #[test]
    fn failures_keep_partial_trace() {
        struct Flaky(SyntheticModel<f64>);
        impl AttentionModel<f64> for Flaky {
            fn latent_dim(&self) -> usize { self.0.latent_dim() }
            fn pool_size(&self) -> usize { self.0.pool_size() }
            fn initial_latent(&self, seed: u64) -> LatentState<f64> { self.0.initial_latent(seed) }
            fn step(&self, s: &LatentState<f64>, seed: u64) -> Result<(LatentState<f64>, Vec<ProbField<f64>>)> {
                if s.timestep == 3 {
                    return Err(Error::Numerical("boom".into()));
                }
                self.0.step(s, seed)
            }
            fn attention_logits(&self, s: &LatentState<f64>) -> Result<Vec<Vec<f64>>> { self.0.attention_logits(s) }
            fn pullback(&self, s: &LatentState<f64>, a: &[Vec<f64>]) -> Result<Vec<f64>> { self.0.pullback(s, a) }
        }
        let m = Flaky(model());
        let err = run_adaptation(&m, &m.0.prompt(), &LoopConfig::default()).unwrap_err();
        assert_eq!(err.trace.len(), 3);
        assert!(err.error.is_numerical());
    }

    #[test]
    fn sweep_zero_alpha_has_zero_displacement() {
        let m = model();
        let rows = alpha_sweep(&m, &m.prompt(), &LoopConfig::default(), &[0.0, 3e-3]).unwrap();
        assert_eq!(rows[0].displacement, 0.0);
        assert!(rows[1].displacement > 0.0);
        assert!(rows[1].displacement <= 18.0 * 3e-3 + 1e-12);
    }

    #[test]
    fn trace_csv_has_expected_header() {
        let m = model();
        let run = run_adaptation(&m, &m.prompt(), &LoopConfig { k: 1, t: 2, ..LoopConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&run.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("timestep,intra,inter,diversity,total,intergroup_jsd"));
        assert_eq!(lines.count(), 2);
    }
}
