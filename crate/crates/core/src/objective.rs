//! The three-term disentanglement loss over subject-grouped attention maps,
//! the NT-Xent contrastive baseline, and exact gradients of both with respect
//! to the pre-softmax logits of every map.
//!
//! Gradients are hand-derived adjoints of a fixed expression graph
//! (softmax → subject mixtures → KL sums → entropy); there is no general
//! autodiff engine behind them.

use std::collections::HashMap;

use crate::distributions::{
    entropy_normalized_slice, jsd_normalized_slices, mixture_slices, ProbField,
};
use crate::error::{Error, Result};
use crate::scalar::{softmax, softmax_pullback, Scalar};

/// Default diversity weight.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Default NT-Xent temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// One subject and the pool indices of the attention maps that belong to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectGroup {
    pub id: String,
    pub map_indices: Vec<usize>,
}

impl SubjectGroup {
    pub fn new(id: impl Into<String>, map_indices: Vec<usize>) -> Self {
        Self { id: id.into(), map_indices }
    }
}

/// Ordered subjects of a prompt. Groups are non-empty and pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    subjects: Vec<SubjectGroup>,
}

impl PromptSpec {
    pub fn new(subjects: Vec<SubjectGroup>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::NoSubjects);
        }
        let mut owner: HashMap<usize, &str> = HashMap::new();
        for group in &subjects {
            if group.map_indices.is_empty() {
                return Err(Error::EmptyGroup(group.id.clone()));
            }
            for &index in &group.map_indices {
                if let Some(first) = owner.insert(index, &group.id) {
                    return Err(Error::OverlappingGroups {
                        index,
                        first: first.to_string(),
                        second: group.id.clone(),
                    });
                }
            }
        }
        Ok(Self { subjects })
    }

    /// `groups` consecutive groups of `per_group` maps each: `[0..k), [k..2k), ...`.
    pub fn contiguous(groups: usize, per_group: usize) -> Result<Self> {
        Self::new(
            (0..groups)
                .map(|s| SubjectGroup::new(format!("subject_{s}"), (s * per_group..(s + 1) * per_group).collect()))
                .collect(),
        )
    }

    pub fn subjects(&self) -> &[SubjectGroup] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// All referenced indices, subject by subject.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.subjects.iter().flat_map(|g| g.map_indices.iter().copied())
    }

    pub fn check_pool(&self, len: usize) -> Result<()> {
        match self.indices().find(|&i| i >= len) {
            Some(index) => Err(Error::IndexOutOfRange { index, len }),
            None => Ok(()),
        }
    }

    /// Re-targets the groups at a pool laid out block-major over `num_blocks`
    /// blocks, each block holding one map per entry of `tokens` in order.
    ///
    /// The current groups must refer to token indices that appear in `tokens`.
    pub fn replicate_over_blocks(&self, tokens: &[usize], num_blocks: usize) -> Result<Self> {
        let position: HashMap<usize, usize> = tokens.iter().enumerate().map(|(p, &t)| (t, p)).collect();
        let subjects = self
            .subjects
            .iter()
            .map(|g| {
                let mut indices = Vec::with_capacity(g.map_indices.len() * num_blocks);
                for b in 0..num_blocks {
                    for t in &g.map_indices {
                        let p = position
                            .get(t)
                            .ok_or(Error::IndexOutOfRange { index: *t, len: tokens.len() })?;
                        indices.push(b * tokens.len() + p);
                    }
                }
                Ok(SubjectGroup::new(g.id.clone(), indices))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subjects)
    }
}

/// Weighting and ablation toggles for the disentanglement loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub enable_intra: bool,
    pub enable_inter: bool,
    pub enable_diversity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, enable_intra: true, enable_inter: true, enable_diversity: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Only the named term switched on, `lambda` unchanged.
    pub fn only(self, intra: bool, inter: bool, diversity: bool) -> Self {
        Self { enable_intra: intra, enable_inter: inter, enable_diversity: diversity, ..self }
    }
}

/// Values of the three terms for one evaluation. Disabled terms read 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown<T> {
    pub intra: T,
    pub inter: T,
    pub diversity: T,
    pub lambda: T,
    pub total: T,
}

/// Which objective drives the optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Jedi(LossConfig),
    NtXent { temperature: f64 },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Jedi(cfg) => cfg.validate(),
            Objective::NtXent { temperature } if !(temperature.is_finite() && *temperature > 0.0) => {
                Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")))
            }
            Objective::NtXent { .. } => Ok(()),
        }
    }
}

/// Loss value and its gradient with respect to each map's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient<T> {
    pub value: T,
    /// Present for [`Objective::Jedi`].
    pub breakdown: Option<ObjectiveBreakdown<T>>,
    /// One gradient vector per pool entry; maps no subject refers to get zeros.
    pub logits: Vec<Vec<T>>,
}

fn pool_slices<'a, T: Scalar>(spec: &PromptSpec, pool: &'a [ProbField<T>]) -> Result<Vec<&'a [T]>> {
    spec.check_pool(pool.len())?;
    let slices: Vec<&[T]> = pool.iter().map(ProbField::values).collect();
    check_common_dim(spec, &slices)?;
    Ok(slices)
}

fn check_common_dim<T>(spec: &PromptSpec, pool: &[&[T]]) -> Result<usize> {
    let mut indices = spec.indices();
    let d = pool[indices.next().expect("non-empty spec")].len();
    for i in indices {
        if pool[i].len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: pool[i].len() });
        }
    }
    Ok(d)
}

fn group_members<'a, T>(group: &SubjectGroup, pool: &[&'a [T]]) -> Vec<&'a [T]> {
    group.map_indices.iter().map(|&i| pool[i]).collect()
}

fn subject_mixtures<T: Scalar>(spec: &PromptSpec, pool: &[&[T]]) -> Vec<Vec<T>> {
    spec.subjects().iter().map(|g| mixture_slices(&group_members(g, pool))).collect()
}

/// Mean normalized JSD within each subject's group.
pub fn intra_coherence<T: Scalar>(spec: &PromptSpec, pool: &[ProbField<T>]) -> Result<T> {
    Ok(intra_value(spec, &pool_slices(spec, pool)?))
}

fn intra_value<T: Scalar>(spec: &PromptSpec, pool: &[&[T]]) -> T {
    let total: T = spec
        .subjects()
        .iter()
        .map(|g| jsd_normalized_slices(&group_members(g, pool)))
        .sum();
    total / T::from_usize_lossy(spec.len())
}

/// `1 − ĴSD` of the subject mixtures; 0 for a single subject.
pub fn inter_separation<T: Scalar>(spec: &PromptSpec, pool: &[ProbField<T>]) -> Result<T> {
    let pool = pool_slices(spec, pool)?;
    Ok(inter_value(spec, &subject_mixtures(spec, &pool)))
}

fn inter_value<T: Scalar>(spec: &PromptSpec, mixtures: &[Vec<T>]) -> T {
    if spec.len() < 2 {
        return T::zero();
    }
    T::one() - mixtures_jsd(mixtures)
}

fn mixtures_jsd<T: Scalar>(mixtures: &[Vec<T>]) -> T {
    let refs: Vec<&[T]> = mixtures.iter().map(Vec::as_slice).collect();
    jsd_normalized_slices(&refs)
}

/// Normalized JSD between subject mixtures: the disentanglement score of one pool.
pub fn intergroup_jsd<T: Scalar>(spec: &PromptSpec, pool: &[ProbField<T>]) -> Result<T> {
    let pool = pool_slices(spec, pool)?;
    Ok(mixtures_jsd(&subject_mixtures(spec, &pool)))
}

/// Mean of `1 − Ĥ(m_s)` over subjects.
pub fn diversity_penalty<T: Scalar>(spec: &PromptSpec, pool: &[ProbField<T>]) -> Result<T> {
    let pool = pool_slices(spec, pool)?;
    Ok(diversity_value(&subject_mixtures(spec, &pool)))
}

fn diversity_value<T: Scalar>(mixtures: &[Vec<T>]) -> T {
    let total: T = mixtures.iter().map(|m| T::one() - entropy_normalized_slice(m)).sum();
    total / T::from_usize_lossy(mixtures.len())
}

/// Evaluates the three-term loss with ablation toggles applied.
pub fn jedi_loss<T: Scalar>(
    spec: &PromptSpec,
    pool: &[ProbField<T>],
    cfg: &LossConfig,
) -> Result<ObjectiveBreakdown<T>> {
    cfg.validate()?;
    let pool = pool_slices(spec, pool)?;
    Ok(breakdown(spec, &pool, cfg))
}

fn breakdown<T: Scalar>(spec: &PromptSpec, pool: &[&[T]], cfg: &LossConfig) -> ObjectiveBreakdown<T> {
    let mixtures = subject_mixtures(spec, pool);
    let intra = if cfg.enable_intra { intra_value(spec, pool) } else { T::zero() };
    let inter = if cfg.enable_inter { inter_value(spec, &mixtures) } else { T::zero() };
    let diversity = if cfg.enable_diversity { diversity_value(&mixtures) } else { T::zero() };
    let lambda = T::lit(cfg.lambda);
    ObjectiveBreakdown { intra, inter, diversity, lambda, total: intra + inter + lambda * diversity }
}

/// Gradient of the total loss with respect to the probabilities of each pool entry.
fn jedi_prob_gradient<T: Scalar>(spec: &PromptSpec, pool: &[&[T]], cfg: &LossConfig) -> Vec<Vec<T>> {
    let d = check_common_dim(spec, pool).expect("checked by caller");
    let num_subjects = T::from_usize_lossy(spec.len());
    let mut grads: Vec<Vec<T>> = pool.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mixtures = subject_mixtures(spec, pool);
    // adjoint of the total with respect to each subject mixture
    let mut mix_adj: Vec<Vec<T>> = vec![vec![T::zero(); d]; spec.len()];

    if cfg.enable_intra {
        for (group, m) in spec.subjects().iter().zip(&mixtures) {
            let n = group.map_indices.len();
            if n < 2 {
                continue;
            }
            let nt = T::from_usize_lossy(n);
            let scale = T::one() / (num_subjects * nt.ln() * nt);
            for &k in &group.map_indices {
                for ((g, &p), &mi) in grads[k].iter_mut().zip(pool[k]).zip(m) {
                    *g = *g + scale * (p.floored_ln() - mi.floored_ln());
                }
            }
        }
    }

    if cfg.enable_inter && spec.len() >= 2 {
        let refs: Vec<&[T]> = mixtures.iter().map(Vec::as_slice).collect();
        let centre = mixture_slices(&refs);
        let scale = -T::one() / (num_subjects.ln() * num_subjects);
        for (adj, m) in mix_adj.iter_mut().zip(&mixtures) {
            for ((a, &mi), &ci) in adj.iter_mut().zip(m).zip(&centre) {
                *a = *a + scale * (mi.floored_ln() - ci.floored_ln());
            }
        }
    }

    if cfg.enable_diversity && d >= 2 {
        let scale = T::lit(cfg.lambda) / (num_subjects * T::from_usize_lossy(d).ln());
        for (adj, m) in mix_adj.iter_mut().zip(&mixtures) {
            for (a, &mi) in adj.iter_mut().zip(m) {
                *a = *a + scale * (mi.floored_ln() + T::one());
            }
        }
    }

    for (group, adj) in spec.subjects().iter().zip(&mix_adj) {
        let inv_n = T::one() / T::from_usize_lossy(group.map_indices.len());
        for &k in &group.map_indices {
            for (g, &a) in grads[k].iter_mut().zip(adj) {
                *g = *g + a * inv_n;
            }
        }
    }
    grads
}

/// NT-Xent over cosine similarities of the maps; positives are same-subject pairs.
///
/// This is the conventional normalized-temperature cross-entropy, averaged over
/// ordered positive pairs. The temperature (default 0.5) and cosine similarity
/// are generic choices: it is a comparison baseline, not a tuned reproduction of
/// any particular contrastive guidance method.
pub fn nt_xent_loss<T: Scalar>(spec: &PromptSpec, pool: &[ProbField<T>], temperature: T) -> Result<T> {
    let pool = pool_slices(spec, pool)?;
    Ok(nt_xent(spec, &pool, temperature, false)?.0)
}

struct Members<'a, T> {
    vectors: Vec<&'a [T]>,
    pool_index: Vec<usize>,
    label: Vec<usize>,
}

fn flatten_members<'a, T>(spec: &PromptSpec, pool: &[&'a [T]]) -> Members<'a, T> {
    let mut out = Members { vectors: Vec::new(), pool_index: Vec::new(), label: Vec::new() };
    for (s, group) in spec.subjects().iter().enumerate() {
        for &i in &group.map_indices {
            out.vectors.push(pool[i]);
            out.pool_index.push(i);
            out.label.push(s);
        }
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn nt_xent<T: Scalar>(
    spec: &PromptSpec,
    pool: &[&[T]],
    temperature: T,
    with_gradient: bool,
) -> Result<(T, Vec<Vec<T>>)> {
    if !(temperature.is_finite() && temperature > T::zero()) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let members = flatten_members(spec, pool);
    let n = members.vectors.len();
    if n < 2 {
        return Err(Error::NoPositivePairs);
    }
    let norms: Vec<T> = members.vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&x| x <= T::zero()) {
        return Err(Error::ZeroVector(members.pool_index[i]));
    }
    let mut sim = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in 0..n {
            sim[i][j] = dot(members.vectors[i], members.vectors[j]) / (norms[i] * norms[j]);
        }
    }
    let positives_of: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && members.label[j] == members.label[i]).count())
        .collect();
    let num_pairs: usize = positives_of.iter().sum();
    if num_pairs == 0 {
        return Err(Error::NoPositivePairs);
    }
    let inv_pairs = T::one() / T::from_usize_lossy(num_pairs);
    let inv_tau = T::one() / temperature;

    let mut loss = T::zero();
    // adjoint of the loss with respect to the ordered similarity sim[i][k]
    let mut sim_adj = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        if positives_of[i] == 0 {
            continue;
        }
        let scaled: Vec<T> = (0..n).map(|k| sim[i][k] * inv_tau).collect();
        let max = (0..n).filter(|&k| k != i).map(|k| scaled[k]).fold(T::neg_infinity(), T::max);
        let denom: T = (0..n).filter(|&k| k != i).map(|k| (scaled[k] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let count = T::from_usize_lossy(positives_of[i]);
        for j in 0..n {
            if j != i && members.label[j] == members.label[i] {
                loss = loss + inv_pairs * (log_denom - scaled[j]);
                sim_adj[i][j] = sim_adj[i][j] - inv_pairs * inv_tau;
            }
        }
        for k in (0..n).filter(|&k| k != i) {
            let w = (scaled[k] - max).exp() / denom;
            sim_adj[i][k] = sim_adj[i][k] + inv_pairs * count * inv_tau * w;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical("NT-Xent loss is not finite".into()));
    }
    if !with_gradient {
        return Ok((loss, Vec::new()));
    }

    let mut grads: Vec<Vec<T>> = pool.iter().map(|p| vec![T::zero(); p.len()]).collect();
    for i in 0..n {
        for k in (0..n).filter(|&k| k != i) {
            let g = sim_adj[i][k];
            if g == T::zero() {
                continue;
            }
            for (a, b) in [(i, k), (k, i)] {
                // ∂cos(a, b)/∂a = b / (|a||b|) − cos · a / |a|²
                let (na, nb) = (norms[a], norms[b]);
                let target = &mut grads[members.pool_index[a]];
                for ((out, &x), &y) in target.iter_mut().zip(members.vectors[a]).zip(members.vectors[b]) {
                    *out = *out + g * (y / (na * nb) - sim[i][k] * x / (na * na));
                }
            }
        }
    }
    Ok((loss, grads))
}

fn check_finite<T: Scalar>(grads: &[Vec<T>]) -> Result<()> {
    let mut offset = 0;
    for g in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index: offset + i });
        }
        offset += g.len();
    }
    Ok(())
}

/// Loss and exact gradient with respect to unconstrained per-map logits.
///
/// Each pool entry is materialized as `softmax(logits)`; the gradient is pulled
/// back through that softmax.
pub fn loss_gradient<T: Scalar>(
    spec: &PromptSpec,
    logits: &[Vec<T>],
    objective: &Objective,
) -> Result<LossGradient<T>> {
    objective.validate()?;
    let pool: Vec<ProbField<T>> = logits.iter().map(|z| ProbField::from_logits(z)).collect::<Result<_>>()?;
    let probs = pool_slices(spec, &pool)?;
    let (value, breakdown, prob_grads) = match objective {
        Objective::Jedi(cfg) => {
            let b = breakdown(spec, &probs, cfg);
            (b.total, Some(b), jedi_prob_gradient(spec, &probs, cfg))
        }
        Objective::NtXent { temperature } => {
            let (v, g) = nt_xent(spec, &probs, T::lit(*temperature), true)?;
            (v, None, g)
        }
    };
    let logit_grads: Vec<Vec<T>> = probs
        .iter()
        .zip(&prob_grads)
        .map(|(p, g)| softmax_pullback(p, g))
        .collect();
    check_finite(&logit_grads)?;
    Ok(LossGradient { value, breakdown, logits: logit_grads })
}

/// Loss value only, for a pool supplied as logits.
pub fn loss_value<T: Scalar>(spec: &PromptSpec, logits: &[Vec<T>], objective: &Objective) -> Result<T> {
    objective.validate()?;
    let pool: Vec<ProbField<T>> = logits.iter().map(|z| ProbField::new(softmax(z))).collect::<Result<_>>()?;
    match objective {
        Objective::Jedi(cfg) => Ok(jedi_loss(spec, &pool, cfg)?.total),
        Objective::NtXent { temperature } => nt_xent_loss(spec, &pool, T::lit(*temperature)),
    }
}
