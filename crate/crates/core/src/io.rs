//! Attention dump container.
//!
//! A dump is a single file: a one-line UTF-8 JSON manifest terminated by
//! `\n`, followed by the payload of little-endian `f32` values. The payload
//! holds one `(n+m)×(n+m)` row-major matrix per `(timestep, block)`,
//! timestep-major then block, in manifest order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{AttentionKind, JointAttentionMatrix};
use crate::objective::{PromptSpec, SubjectGroup};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    /// Image tokens.
    pub n: usize,
    /// Prompt tokens.
    pub m: usize,
    pub heads_averaged: bool,
    pub kind: AttentionKind,
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
    pub token_labels: Vec<String>,
    /// Subject name to prompt-token indices, in prompt order.
    pub subject_groups: IndexMap<String, Vec<usize>>,
}

impl DumpManifest {
    pub fn matrix_len(&self) -> usize {
        (self.n + self.m) * (self.n + self.m)
    }

    pub fn matrix_count(&self) -> usize {
        self.timesteps.len() * self.blocks.len()
    }

    pub fn payload_bytes(&self) -> usize {
        self.matrix_count() * self.matrix_len() * 4
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: self.format_version, expected: FORMAT_VERSION });
        }
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidDump(format!("n = {} and m = {} must both be >= 1", self.n, self.m)));
        }
        for (name, list) in [("timesteps", &self.timesteps), ("blocks", &self.blocks)] {
            if list.is_empty() {
                return Err(Error::InvalidDump(format!("{name} list is empty")));
            }
            if list.iter().collect::<HashSet<_>>().len() != list.len() {
                return Err(Error::InvalidDump(format!("{name} list has duplicates")));
            }
        }
        if self.token_labels.len() != self.m {
            return Err(Error::InvalidDump(format!("{} token labels for m = {}", self.token_labels.len(), self.m)));
        }
        for (subject, tokens) in &self.subject_groups {
            if let Some(&t) = tokens.iter().find(|&&t| t >= self.m) {
                return Err(Error::InvalidDump(format!("subject `{subject}` refers to token {t} but m = {}", self.m)));
            }
        }
        if !self.subject_groups.is_empty() {
            self.prompt_spec()?;
        }
        Ok(())
    }

    /// Subjects as a [`PromptSpec`] over prompt-token indices.
    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        PromptSpec::new(self.subject_groups.iter().map(|(id, t)| SubjectGroup::new(id.clone(), t.clone())).collect())
    }
}

/// A validated dump held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    manifest: DumpManifest,
    payload: Vec<f32>,
}

impl AttentionDump {
    pub fn new(manifest: DumpManifest, payload: Vec<f32>) -> Result<Self> {
        manifest.validate()?;
        let expected = manifest.payload_bytes();
        if payload.len() * 4 != expected {
            return Err(Error::SizeMismatch { expected, found: payload.len() * 4 });
        }
        if let Some(index) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { manifest, payload })
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    fn slot(&self, timestep: usize, block: usize) -> Result<usize> {
        let t = self.manifest.timesteps.iter().position(|&v| v == timestep).ok_or(Error::MissingTimestep(timestep))?;
        let b = self.manifest.blocks.iter().position(|&v| v == block).ok_or(Error::MissingBlock(block))?;
        Ok(t * self.manifest.blocks.len() + b)
    }

    /// Raw `f32` entries of one matrix.
    pub fn matrix_slice(&self, timestep: usize, block: usize) -> Result<&[f32]> {
        let len = self.manifest.matrix_len();
        let start = self.slot(timestep, block)? * len;
        Ok(&self.payload[start..start + len])
    }

    pub fn matrix<T: Scalar>(&self, timestep: usize, block: usize) -> Result<JointAttentionMatrix<T>> {
        let data = self.matrix_slice(timestep, block)?.iter().map(|&v| T::lit(f64::from(v))).collect();
        JointAttentionMatrix::new(data, self.manifest.n, self.manifest.m, self.manifest.kind, block, timestep)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + 1 + self.payload.len() * 4);
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedManifest("no newline after manifest".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::MalformedManifest("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch { found: version as u32, expected: FORMAT_VERSION });
        }
        let manifest: DumpManifest = serde_json::from_value(value).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        manifest.validate()?;
        let body = &bytes[split + 1..];
        let expected = manifest.payload_bytes();
        if body.len() != expected {
            return Err(Error::SizeMismatch { expected, found: body.len() });
        }
        let payload = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(manifest, payload)
    }
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<AttentionDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AttentionDump::from_bytes(&bytes)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Validates and writes the dump; the target is replaced only on success.
pub fn write_dump(dump: &AttentionDump, path: impl AsRef<Path>) -> Result<()> {
    dump.manifest.validate()?;
    if let Some(index) = dump.payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    write_atomic(path.as_ref(), &dump.to_bytes()?)
}

/// Parameters of a generated two-blob attention dump.
#[derive(Debug, Clone)]
pub struct SyntheticDumpSpec {
    /// Image grid side; `n = side²`.
    pub side: usize,
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
    pub kind: AttentionKind,
    /// Logit height of each token's blob.
    pub amplitude: f64,
}

/// Generates a dump with two subjects on a `side × side` image grid.
///
/// Tokens 0 and 1 belong to `subject_a`, token 2 to `subject_b`. Subject `a`
/// is a Gaussian blob at `x = −s/2`, subject `b` at `x = +s/2`, where
/// `s = separation(timestep, block)` in normalized grid units. Token entries
/// are written symmetrically into the prompt row and column; image-to-image
/// entries are zero before any softmax.
pub fn synthetic_dump(spec: &SyntheticDumpSpec, separation: impl Fn(usize, usize) -> f64) -> Result<AttentionDump> {
    let side = spec.side;
    let (n, m) = (side * side, 3);
    let size = n + m;
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let (r, c) = (j / side, j % side);
            ((c as f64 + 0.5) / side as f64 * 2.0 - 1.0, (r as f64 + 0.5) / side as f64 * 2.0 - 1.0)
        })
        .collect();
    let mut payload = Vec::with_capacity(spec.timesteps.len() * spec.blocks.len() * size * size);
    for &t in &spec.timesteps {
        for &b in &spec.blocks {
            let s = separation(t, b);
            let blobs = [(-s / 2.0, 0.40), (-s / 2.0, 0.45), (s / 2.0, 0.40)];
            let mut logits = vec![0.0f64; size * size];
            for (token, &(cx, width)) in blobs.iter().enumerate() {
                let row = n + token;
                for (j, &(u, v)) in coords.iter().enumerate() {
                    let bump = spec.amplitude * (-((u - cx).powi(2) + v * v) / (2.0 * width * width)).exp();
                    logits[row * size + j] = bump;
                    logits[j * size + row] = bump;
                }
            }
            if spec.kind == AttentionKind::Softmaxed {
                for row in logits.chunks_mut(size) {
                    let p = crate::scalar::softmax(row);
                    row.copy_from_slice(&p);
                }
            }
            payload.extend(logits.into_iter().map(|v| v as f32));
        }
    }
    let mut subject_groups = IndexMap::new();
    subject_groups.insert("subject_a".to_string(), vec![0, 1]);
    subject_groups.insert("subject_b".to_string(), vec![2]);
    let manifest = DumpManifest {
        format_version: FORMAT_VERSION,
        n,
        m,
        heads_averaged: true,
        kind: spec.kind,
        timesteps: spec.timesteps.clone(),
        blocks: spec.blocks.clone(),
        token_labels: vec!["a".into(), "a_attr".into(), "b".into()],
        subject_groups,
    };
    AttentionDump::new(manifest, payload)
}
