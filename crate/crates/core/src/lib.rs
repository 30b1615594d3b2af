//! Jensen-Shannon disentanglement of attention distributions.
//!
//! The crate provides:
//!
//! - divergence and entropy primitives over discrete distributions ([`distributions`]),
//! - the three-term disentanglement loss, an NT-Xent baseline and their exact
//!   logit gradients ([`objective`]),
//! - a sign-gradient test-time adaptation loop with a differentiable synthetic
//!   attention model ([`adaptation`]) and a 1-D toy comparison ([`toy`]),
//! - token attention extraction from joint (image + prompt) attention matrices
//!   ([`extraction`]),
//! - the inter-group JSD disentanglement score ([`score`]) and the attention
//!   dump container ([`io`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below fix the precision.

pub mod adaptation;
pub mod distributions;
pub mod error;
pub mod extraction;
pub mod io;
pub mod objective;
pub mod scalar;
pub mod score;
pub mod toy;

pub use adaptation::{
    alpha_sweep, fgsm_update, run_adaptation, AttentionModel, LatentState, LoopConfig, RunResult, SweepRow,
    SyntheticModel, TraceRow,
};
pub use distributions::{
    entropy, entropy_normalized, jsd, jsd_normalized, kl_divergence, mixture, DistributionSet, ProbField,
};
pub use error::{Error, Result};
pub use extraction::{extract_pool, extract_token_field, AttentionKind, Extraction, InclusiveRange, JointAttentionMatrix};
pub use io::{read_dump, write_dump, AttentionDump, DumpManifest};
pub use objective::{
    diversity_penalty, inter_separation, intergroup_jsd, intra_coherence, jedi_loss, loss_gradient, nt_xent_loss,
    LossConfig, LossGradient, Objective, ObjectiveBreakdown, PromptSpec, SubjectGroup,
};
pub use scalar::Scalar;
pub use score::{disentanglement_score, export_series_csv, ScoreSeries};

pub type ProbField64 = ProbField<f64>;
pub type ProbField32 = ProbField<f32>;
pub type DistributionSet64 = DistributionSet<f64>;
pub type DistributionSet32 = DistributionSet<f32>;
pub type ObjectiveBreakdown64 = ObjectiveBreakdown<f64>;
pub type LatentState64 = LatentState<f64>;
pub type LatentState32 = LatentState<f32>;
pub type SyntheticModel64 = SyntheticModel<f64>;
pub type SyntheticModel32 = SyntheticModel<f32>;
pub type JointAttentionMatrix64 = JointAttentionMatrix<f64>;
pub type JointAttentionMatrix32 = JointAttentionMatrix<f32>;
pub type ScoreSeries64 = ScoreSeries<f64>;
