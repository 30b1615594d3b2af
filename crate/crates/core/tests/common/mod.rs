#![allow(dead_code)]

use disentangle::extraction::AttentionKind;
use disentangle::io::{AttentionDump, DumpManifest, FORMAT_VERSION};
use disentangle::objective::{PromptSpec, SubjectGroup};
use disentangle::ProbField;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random distribution of length `d`; about a third of draws contain exact zeros.
pub fn random_distribution(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let scale: f64 = rng.gen_range(0.1..4.0);
    let sparse = rng.gen_bool(0.3);
    let mut w: Vec<f64> = (0..d)
        .map(|_| {
            if sparse && rng.gen_bool(0.4) {
                0.0
            } else {
                (scale * rng.sample::<f64, _>(StandardNormal)).exp()
            }
        })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        w[rng.gen_range(0..d)] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

pub fn field(values: Vec<f64>) -> ProbField<f64> {
    ProbField::new(values).expect("valid distribution")
}

/// Shannon entropy in nats, written out directly with `0 · ln 0 = 0`.
pub fn oracle_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Generalized JSD via the entropy identity `H(mean) − mean(H)`, an
/// algebraically independent route from the KL-to-mixture form.
pub fn oracle_jsd(set: &[Vec<f64>]) -> f64 {
    let n = set.len() as f64;
    let d = set[0].len();
    let mix: Vec<f64> = (0..d).map(|i| set.iter().map(|p| p[i]).sum::<f64>() / n).collect();
    oracle_entropy(&mix) - set.iter().map(|p| oracle_entropy(p)).sum::<f64>() / n
}

/// Literal transcription of the token-map formula: symmetrize the prompt row and
/// column of token `i`, scale by `1/√2`, then softmax (raw) or renormalize (softmaxed).
pub fn oracle_token_field(a: &[f64], n: usize, m: usize, kind: AttentionKind, i: usize) -> Vec<f64> {
    let stride = n + m;
    let row = n + i;
    let sym: Vec<f64> = (0..n)
        .map(|j| (a[row * stride + j] + a[j * stride + row]) / 2f64.sqrt())
        .collect();
    match kind {
        AttentionKind::RawLogits => {
            let mx = sym.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sym.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
        AttentionKind::Softmaxed => {
            let s: f64 = sym.iter().sum();
            sym.iter().map(|v| v / s).collect()
        }
    }
}

/// Two-subject manifest over three prompt tokens: `a` and `a_attr` form one
/// subject, `b` the other.
pub fn manifest(n: usize, kind: AttentionKind, timesteps: Vec<usize>, blocks: Vec<usize>) -> DumpManifest {
    let mut groups = IndexMap::new();
    groups.insert("subject_a".to_string(), vec![0, 1]);
    groups.insert("subject_b".to_string(), vec![2]);
    DumpManifest {
        format_version: FORMAT_VERSION,
        n,
        m: 3,
        heads_averaged: true,
        kind,
        timesteps,
        blocks,
        token_labels: vec!["a".into(), "a_attr".into(), "b".into()],
        subject_groups: groups,
    }
}

/// Softmaxed joint matrix in which token `i` attends uniformly to `supports[i]`
/// and each image cell in a support attends to the first token owning it.
pub fn support_matrix(n: usize, supports: &[Vec<usize>]) -> Vec<f32> {
    let m = supports.len();
    let stride = n + m;
    let mut a = vec![0f32; stride * stride];
    for j in 0..n {
        match supports.iter().position(|s| s.contains(&j)) {
            Some(tok) => a[j * stride + n + tok] = 1.0,
            None => a[j * stride + j] = 1.0,
        }
    }
    for (tok, s) in supports.iter().enumerate() {
        for &j in s {
            a[(n + tok) * stride + j] = 1.0 / s.len() as f32;
        }
    }
    a
}

/// Dump where every (timestep, block) matrix is `support_matrix(n, supports)`.
pub fn support_dump(n: usize, supports: &[Vec<usize>], timesteps: usize, blocks: Vec<usize>) -> AttentionDump {
    let manifest = manifest(n, AttentionKind::Softmaxed, (0..timesteps).collect(), blocks);
    let one = support_matrix(n, supports);
    let payload: Vec<f32> = (0..manifest.matrix_count()).flat_map(|_| one.iter().copied()).collect();
    AttentionDump::new(manifest, payload).expect("valid dump")
}

/// Random subject grouping of `maps` pool entries into `groups` non-empty groups.
pub fn random_prompt(rng: &mut ChaCha8Rng, groups: usize, per_group_max: usize) -> (PromptSpec, usize) {
    let mut subjects = Vec::new();
    let mut next = 0;
    for g in 0..groups {
        let size = rng.gen_range(1..=per_group_max);
        subjects.push(SubjectGroup::new(format!("s{g}"), (next..next + size).collect()));
        next += size;
    }
    (PromptSpec::new(subjects).expect("disjoint groups"), next)
}

pub fn random_logits(rng: &mut ChaCha8Rng, maps: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..maps)
        .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = vec![vec![0.0; x[0].len()]; x.len()];
    for k in 0..x.len() {
        for i in 0..x[k].len() {
            let orig = work[k][i];
            work[k][i] = orig + h;
            let up = f(&work);
            work[k][i] = orig - h;
            let down = f(&work);
            work[k][i] = orig;
            out[k][i] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-8)`: error relative to the gradient's scale.
pub fn relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (ra, rn) in analytic.iter().zip(numeric) {
        for (a, n) in ra.iter().zip(rn) {
            diff = diff.max((a - n).abs());
            scale = scale.max(n.abs());
        }
    }
    diff / scale.max(1e-8)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}
