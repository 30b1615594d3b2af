//! Disentanglement score: normalized JSD between subject mixtures, per
//! `(timestep, block)`, with mean/std aggregation and CSV/JSON export.
//!
//! Standard deviations are population (not sample) deviations.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::extraction::{extract_token_field, InclusiveRange};
use crate::io::{write_atomic, AttentionDump};
use crate::objective::{intergroup_jsd, PromptSpec};
use crate::scalar::{mean, population_std, Scalar};

/// Aggregations restricted to timesteps at or after this one are reported alongside the full ones.
pub const LATE_TIMESTEP: usize = 5;

/// Score per `(timestep, block)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries<T> {
    timesteps: Vec<usize>,
    blocks: Vec<usize>,
    /// `values[ti][bi]`.
    values: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimestepSummary {
    pub timestep: usize,
    pub mean: f64,
    pub std: f64,
}

/// JSON summary of a [`ScoreSeries`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub overall_mean: f64,
    pub overall_std: f64,
    pub late_mean: f64,
    pub late_std: f64,
    pub late_from_timestep: usize,
    pub std_kind: &'static str,
    pub blocks: Vec<usize>,
    pub per_timestep: Vec<TimestepSummary>,
}

impl<T: Scalar> ScoreSeries<T> {
    pub fn new(timesteps: Vec<usize>, blocks: Vec<usize>, values: Vec<Vec<T>>) -> Result<Self> {
        if timesteps.is_empty() || blocks.is_empty() {
            return Err(Error::SeriesMismatch("series needs at least one timestep and one block".into()));
        }
        if values.len() != timesteps.len() || values.iter().any(|row| row.len() != blocks.len()) {
            return Err(Error::SeriesMismatch("values do not match timesteps x blocks".into()));
        }
        Ok(Self { timesteps, blocks, values })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn get(&self, timestep: usize, block: usize) -> Option<T> {
        let t = self.timesteps.iter().position(|&v| v == timestep)?;
        let b = self.blocks.iter().position(|&v| v == block)?;
        Some(self.values[t][b])
    }

    pub fn entries(&self) -> impl Iterator<Item = T> + '_ {
        self.values.iter().flatten().copied()
    }

    /// Mean across blocks, one per timestep.
    pub fn timestep_means(&self) -> Vec<T> {
        self.values.iter().map(|row| mean(row).expect("non-empty row")).collect()
    }

    pub fn timestep_stds(&self) -> Vec<T> {
        self.values.iter().map(|row| population_std(row).expect("non-empty row")).collect()
    }

    pub fn overall_mean(&self) -> T {
        mean(&self.entries().collect::<Vec<_>>()).expect("non-empty series")
    }

    pub fn overall_std(&self) -> T {
        population_std(&self.entries().collect::<Vec<_>>()).expect("non-empty series")
    }

    /// Mean and std over entries with `timestep >= from`; `None` if there are none.
    pub fn mean_std_from(&self, from: usize) -> Option<(T, T)> {
        let late: Vec<T> = self
            .timesteps
            .iter()
            .zip(&self.values)
            .filter(|(&t, _)| t >= from)
            .flat_map(|(_, row)| row.iter().copied())
            .collect();
        Some((mean(&late)?, population_std(&late)?))
    }

    pub fn summary(&self) -> ScoreSummary {
        let (late_mean, late_std) = self
            .mean_std_from(LATE_TIMESTEP)
            .map(|(m, s)| (m.to_f64_lossy(), s.to_f64_lossy()))
            .unwrap_or((f64::NAN, f64::NAN));
        ScoreSummary {
            overall_mean: self.overall_mean().to_f64_lossy(),
            overall_std: self.overall_std().to_f64_lossy(),
            late_mean,
            late_std,
            late_from_timestep: LATE_TIMESTEP,
            std_kind: "population",
            blocks: self.blocks.clone(),
            per_timestep: self
                .timesteps
                .iter()
                .zip(self.timestep_means().into_iter().zip(self.timestep_stds()))
                .map(|(&timestep, (m, s))| TimestepSummary { timestep, mean: m.to_f64_lossy(), std: s.to_f64_lossy() })
                .collect(),
        }
    }
}

/// Scores every requested `(timestep, block)` of a dump.
///
/// `prompt` groups prompt-token indices by subject. When `timesteps` is
/// `None`, every timestep in the dump is scored.
pub fn disentanglement_score<T: Scalar>(
    dump: &AttentionDump,
    prompt: &PromptSpec,
    blocks: InclusiveRange,
    timesteps: Option<InclusiveRange>,
) -> Result<ScoreSeries<T>> {
    let manifest = dump.manifest();
    prompt.check_pool(manifest.m)?;
    let selected: Vec<usize> = match timesteps {
        Some(range) => {
            for t in range.iter() {
                if !manifest.timesteps.contains(&t) {
                    return Err(Error::MissingTimestep(t));
                }
            }
            range.iter().collect()
        }
        None => manifest.timesteps.clone(),
    };
    let block_list: Vec<usize> = blocks.iter().collect();
    let mut values = Vec::with_capacity(selected.len());
    for &t in &selected {
        let mut row = Vec::with_capacity(block_list.len());
        for &b in &block_list {
            let a = dump.matrix::<T>(t, b)?;
            let pool = (0..manifest.m).map(|tok| Ok(extract_token_field(&a, tok)?.field)).collect::<Result<Vec<_>>>()?;
            row.push(intergroup_jsd(prompt, &pool)?);
        }
        values.push(row);
    }
    ScoreSeries::new(selected, block_list, values)
}

/// Scientific notation with 17 significant digits; parses back to the identical `f64`.
fn fmt_value<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.to_f64_lossy())
}

/// Writes both series side by side:
/// `timestep,jedi_0..jedi_{B-1},base_0..base_{B-1},jedi_mean,base_mean`.
pub fn write_series_csv<T: Scalar, W: Write>(jedi: &ScoreSeries<T>, base: &ScoreSeries<T>, out: W) -> Result<()> {
    if jedi.timesteps != base.timesteps {
        return Err(Error::SeriesMismatch("timestep ranges differ".into()));
    }
    if jedi.blocks.len() != base.blocks.len() {
        return Err(Error::SeriesMismatch(format!(
            "block counts differ: {} vs {}",
            jedi.blocks.len(),
            base.blocks.len()
        )));
    }
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let nb = jedi.blocks.len();
    let mut header = vec!["timestep".to_string()];
    header.extend((0..nb).map(|b| format!("jedi_{b}")));
    header.extend((0..nb).map(|b| format!("base_{b}")));
    header.extend(["jedi_mean".to_string(), "base_mean".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    let (jm, bm) = (jedi.timestep_means(), base.timestep_means());
    for (ti, &t) in jedi.timesteps.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(jedi.values[ti].iter().map(|&v| fmt_value(v)));
        rec.extend(base.values[ti].iter().map(|&v| fmt_value(v)));
        rec.push(fmt_value(jm[ti]));
        rec.push(fmt_value(bm[ti]));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

pub fn export_series_csv<T: Scalar>(jedi: &ScoreSeries<T>, base: &ScoreSeries<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_series_csv(jedi, base, &mut buf)?;
    write_atomic(path.as_ref(), &buf)
}

/// Single-series variant: `timestep,score_0..score_{B-1},score_mean`.
pub fn write_single_series_csv<T: Scalar, W: Write>(series: &ScoreSeries<T>, out: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestep".to_string()];
    header.extend((0..series.blocks.len()).map(|b| format!("score_{b}")));
    header.push("score_mean".into());
    w.write_record(&header).map_err(csv_err)?;
    for ((&t, row), m) in series.timesteps.iter().zip(&series.values).zip(series.timestep_means()) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|&v| fmt_value(v)));
        rec.push(fmt_value(m));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// `(timesteps, jedi rows, base rows)` as read back from a two-series CSV.
pub type ParsedSeries = (Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Parses a two-series CSV.
pub fn read_series_csv(text: &str) -> Result<ParsedSeries> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let nb = header.iter().filter(|h| h.starts_with("jedi_") && *h != "jedi_mean").count();
    if header.len() != 2 * nb + 3 {
        return Err(Error::Csv(format!("unexpected header with {} columns", header.len())));
    }
    let (mut ts, mut jedi, mut base) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| Error::Csv(format!("bad number `{}`", &rec[i]))) };
        ts.push(rec[0].parse().map_err(|_| Error::Csv(format!("bad timestep `{}`", &rec[0])))?);
        jedi.push((1..=nb).map(num).collect::<Result<Vec<_>>>()?);
        base.push((nb + 1..=2 * nb).map(num).collect::<Result<Vec<_>>>()?);
    }
    Ok((ts, jedi, base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::AttentionKind;
    use crate::io::{synthetic_dump, SyntheticDumpSpec};

    fn dump(sep: impl Fn(usize, usize) -> f64) -> AttentionDump {
        let spec = SyntheticDumpSpec { side: 4, timesteps: (0..6).collect(), blocks: (5..=15).collect(), kind: AttentionKind::RawLogits, amplitude: 4.0 };
        synthetic_dump(&spec, sep).unwrap()
    }

    #[test]
    fn identical_subjects_score_zero() {
        let d = dump(|_, _| 0.0);
        // tokens 0 and 2 render identical blobs at separation zero
        let prompt = PromptSpec::new(vec![
            crate::SubjectGroup::new("a", vec![0]),
            crate::SubjectGroup::new("b", vec![2]),
        ])
        .unwrap();
        let s = disentanglement_score::<f64>(&d, &prompt, InclusiveRange::new(7, 15).unwrap(), None).unwrap();
        assert!(s.overall_mean() < 1e-12);
        assert!(s.overall_std() < 1e-12);
        assert_eq!(s.blocks().len(), 9);
    }

    #[test]
    fn aggregation_is_consistent() {
        let d = dump(|t, b| 0.2 * t as f64 + 0.05 * b as f64);
        let prompt = d.manifest().prompt_spec().unwrap();
        let s = disentanglement_score::<f64>(&d, &prompt, InclusiveRange::new(7, 15).unwrap(), Some(InclusiveRange::new(1, 4).unwrap())).unwrap();
        let entries: Vec<f64> = s.entries().collect();
        assert_eq!(entries.len(), 36);
        let m = entries.iter().sum::<f64>() / 36.0;
        assert!((s.overall_mean() - m).abs() < 1e-12);
        assert!(entries.iter().all(|v| (0.0..=1.0).contains(v)));
        let summary = s.summary();
        assert_eq!(summary.per_timestep.len(), 4);
        assert_eq!(summary.std_kind, "population");
    }

    #[test]
    fn missing_entries_are_errors() {
        let d = dump(|_, _| 1.0);
        let prompt = d.manifest().prompt_spec().unwrap();
        assert!(matches!(
            disentanglement_score::<f64>(&d, &prompt, InclusiveRange::new(4, 6).unwrap(), None),
            Err(Error::MissingBlock(4))
        ));
        assert!(matches!(
            disentanglement_score::<f64>(&d, &prompt, InclusiveRange::new(7, 7).unwrap(), Some(InclusiveRange::new(5, 9).unwrap())),
            Err(Error::MissingTimestep(6))
        ));
    }

    #[test]
    fn csv_shapes() {
        let one = ScoreSeries::new(vec![0, 1], vec![7], vec![vec![0.5], vec![0.25]]).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&one, &one, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "timestep,jedi_0,base_0,jedi_mean,base_mean");
        assert_eq!(text.lines().count(), 3);
        let other = ScoreSeries::new(vec![0, 1], vec![7, 8], vec![vec![0.5, 0.1], vec![0.25, 0.2]]).unwrap();
        assert!(write_series_csv(&one, &other, Vec::new()).is_err());
        let shifted = ScoreSeries::new(vec![1, 2], vec![7], vec![vec![0.5], vec![0.25]]).unwrap();
        assert!(write_series_csv(&one, &shifted, Vec::new()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let vals: Vec<Vec<f64>> = (0..5).map(|t| (0..3).map(|b| (1.0 + t as f64) / (7.0 + b as f64 * 3.3)).collect()).collect();
        let s = ScoreSeries::new((0..5).collect(), vec![7, 8, 9], vals.clone()).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&s, &s, &mut buf).unwrap();
        let (ts, jedi, base) = read_series_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(ts, (0..5).collect::<Vec<_>>());
        assert_eq!(jedi, vals);
        assert_eq!(base, vals);
    }
}
