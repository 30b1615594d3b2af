//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use disentangle::adaptation::{
    alpha_sweep, run_adaptation, write_sweep_csv, write_trace_csv, LossKind, LoopConfig, SyntheticModel, SWEEP_ALPHAS,
};
use disentangle::extraction::{extract_token_field, AttentionKind, InclusiveRange};
use disentangle::io::{read_dump, synthetic_dump, write_dump, SyntheticDumpSpec};
use disentangle::objective::{LossConfig, DEFAULT_LAMBDA, DEFAULT_TEMPERATURE};
use disentangle::score::{disentanglement_score, write_series_csv, write_single_series_csv};
use disentangle::toy::{run_toy, write_frames_csv, ToyConfig, ToyOptimizer};
use disentangle::Error;

#[derive(Parser)]
#[command(name = "disentangle", version, about = "Jensen-Shannon attention disentanglement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Four-Gaussian 1-D comparison of the JSD objective and NT-Xent.
    Toy(ToyArgs),
    /// Test-time adaptation on the synthetic attention model.
    Adapt(AdaptArgs),
    /// Disentanglement score of an attention dump.
    Score(ScoreArgs),
    /// Learning-rate sweep of the adaptation loop.
    Sweep(SweepArgs),
    /// Dump token attention fields as CSV grids.
    Extract(ExtractArgs),
    /// Write a generated two-subject attention dump.
    GenDump(GenDumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Jedi,
    NtXent,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Jedi => LossKind::Jedi,
            LossArg::NtXent => LossKind::NtXent,
        }
    }
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, value_enum, default_value = "jedi")]
    loss: LossArg,
    #[arg(long = "lambda", default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    no_intra: bool,
    #[arg(long)]
    no_inter: bool,
    #[arg(long)]
    no_diversity: bool,
    /// NT-Xent temperature.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

impl LossArgs {
    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            enable_intra: !self.no_intra,
            enable_inter: !self.no_inter,
            enable_diversity: !self.no_diversity,
        }
    }
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cells: usize,
    #[arg(long, default_value_t = 2500)]
    iterations: usize,
    /// Sign-update step on the logits.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Snapshot interval in iterations.
    #[arg(long, default_value_t = 100)]
    every: usize,
    /// Frames CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 3e-3)]
    alpha: f64,
    #[arg(long, default_value_t = 18)]
    k: usize,
    #[arg(long, default_value_t = 28)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    inner_iterations: usize,
    #[arg(long, default_value_t = 2)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    maps_per_subject: usize,
    /// Attention grid as HxW.
    #[arg(long, default_value = "16x16", value_parser = parse_grid)]
    grid: (usize, usize),
}

impl ModelArgs {
    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            alpha: self.alpha,
            k: self.k,
            t: self.t,
            loss: self.loss.loss.into(),
            loss_config: self.loss.loss_config(),
            temperature: self.loss.temperature,
            inner_iterations: self.inner_iterations,
            seed: self.seed,
        }
    }

    fn model(&self) -> Result<SyntheticModel<f64>, Error> {
        SyntheticModel::new(self.subjects, self.maps_per_subject, self.grid, 0)
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trace CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Final latent, one value per line.
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_ALPHAS.to_vec())]
    alphas: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    dump: PathBuf,
    /// Second dump scored as the baseline series of the CSV.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Inclusive block range lo:hi.
    #[arg(long, default_value = "7:15")]
    blocks: InclusiveRange,
    /// Inclusive timestep range lo:hi (all timesteps when omitted).
    #[arg(long)]
    timesteps: Option<InclusiveRange>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    dump: PathBuf,
    /// Timestep to extract (first in the dump when omitted).
    #[arg(long)]
    timestep: Option<usize>,
    #[arg(long, default_value = "5:15")]
    blocks: InclusiveRange,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Subjects drift apart over the first 18 timesteps.
    Jedi,
    /// Subjects stay largely overlapped.
    Base,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    RawLogits,
    Softmaxed,
}

#[derive(Args)]
struct GenDumpArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "jedi")]
    profile: Profile,
    #[arg(long, value_enum, default_value = "raw-logits")]
    kind: KindArg,
    #[arg(long, default_value_t = 3)]
    side: usize,
    #[arg(long, default_value = "0:27")]
    timesteps: InclusiveRange,
    #[arg(long, default_value = "7:15")]
    blocks: InclusiveRange,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

fn output(path: Option<&Path>, bytes: &[u8]) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => io::stdout().write_all(bytes).map_err(|e| Error::Io { path: "<stdout>".into(), source: e }),
    }
}

fn toy(args: ToyArgs) -> Result<(), Error> {
    let cfg = ToyConfig {
        cells: args.cells,
        iterations: args.iterations,
        optimizer: ToyOptimizer::Sign { step: args.step },
        loss: args.loss.loss.into(),
        loss_config: args.loss.loss_config(),
        temperature: args.loss.temperature,
        seed: args.seed,
        snapshot_every: args.every,
    };
    let r = run_toy::<f64>(&cfg)?;
    let mut buf = Vec::new();
    write_frames_csv(&r.frames, &mut buf)?;
    output(args.out.as_deref(), &buf)?;
    eprintln!(
        "within-group JSD {:.6} -> {:.6}; between-group JSD {:.6} -> {:.6}; mixture entropy {:?} -> {:?}",
        r.initial.within,
        r.final_metrics.within,
        r.initial.between,
        r.final_metrics.between,
        r.initial.mixture_entropy,
        r.final_metrics.mixture_entropy
    );
    Ok(())
}

fn adapt(args: AdaptArgs) -> Result<(), Error> {
    let model = args.model.model()?;
    let run = run_adaptation(&model, &model.prompt(), &args.model.loop_config())?;
    let mut buf = Vec::new();
    write_trace_csv(&run.trace, &mut buf)?;
    output(args.out.as_deref(), &buf)?;
    if let Some(p) = &args.latent_out {
        let text: String = run.final_state.x.iter().map(|v| format!("{v}\n")).collect();
        output(Some(p), text.as_bytes())?;
    }
    eprintln!(
        "updates {}; final total loss {:.6}; final inter-group JSD {:.6}",
        run.update_count(),
        run.final_breakdown.total,
        run.final_intergroup_jsd
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    let model = args.model.model()?;
    let rows = alpha_sweep(&model, &model.prompt(), &args.model.loop_config(), &args.alphas)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    output(args.out.as_deref(), &buf)
}

fn score(args: ScoreArgs) -> Result<(), Error> {
    let dump = read_dump(&args.dump)?;
    let prompt = dump.manifest().prompt_spec()?;
    let series = disentanglement_score::<f64>(&dump, &prompt, args.blocks, args.timesteps)?;
    let baseline = match &args.baseline {
        Some(p) => {
            let base = read_dump(p)?;
            Some(disentanglement_score::<f64>(&base, &base.manifest().prompt_spec()?, args.blocks, args.timesteps)?)
        }
        None => None,
    };
    if let Some(p) = &args.out_csv {
        let mut buf = Vec::new();
        match &baseline {
            Some(base) => write_series_csv(&series, base, &mut buf)?,
            None => write_single_series_csv(&series, &mut buf)?,
        }
        output(Some(p), &buf)?;
    }
    let mut summary = serde_json::json!({ "score": series.summary() });
    if let Some(base) = &baseline {
        summary["baseline"] = serde_json::to_value(base.summary()).expect("plain data");
    }
    let text = serde_json::to_string_pretty(&summary).expect("plain data") + "\n";
    match &args.out_json {
        Some(p) => output(Some(p), text.as_bytes())?,
        None if args.out_csv.is_none() => output(None, text.as_bytes())?,
        None => {}
    }
    eprintln!("overall {:.4} ± {:.4}", series.overall_mean(), series.overall_std());
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<(), Error> {
    let dump = read_dump(&args.dump)?;
    let t = args.timestep.unwrap_or(dump.manifest().timesteps[0]);
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io { path: args.out_dir.clone(), source: e })?;
    for b in args.blocks.iter() {
        let a = dump.matrix::<f64>(t, b)?;
        for tok in 0..a.m() {
            let e = extract_token_field(&a, tok)?;
            if e.degenerate {
                eprintln!("warning: token {tok} at timestep {t}, block {b} has no mass; wrote uniform field");
            }
            let width = e.field.shape().map_or(e.field.len(), |(_, w)| w);
            let text: String = e
                .field
                .values()
                .chunks(width)
                .map(|row| row.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
                .collect();
            let path = args.out_dir.join(format!("t{t:03}_b{b:02}_tok{tok}.csv"));
            output(Some(&path), text.as_bytes())?;
        }
    }
    Ok(())
}

fn gen_dump(args: GenDumpArgs) -> Result<(), Error> {
    let spec = SyntheticDumpSpec {
        side: args.side,
        timesteps: args.timesteps.iter().collect(),
        blocks: args.blocks.iter().collect(),
        kind: match args.kind {
            KindArg::RawLogits => AttentionKind::RawLogits,
            KindArg::Softmaxed => AttentionKind::Softmaxed,
        },
        amplitude: 4.0,
    };
    let dump = match args.profile {
        Profile::Jedi => synthetic_dump(&spec, |t, b| 0.2 + 1.2 * t.min(17) as f64 / 17.0 + 0.05 * (b % 4) as f64)?,
        Profile::Base => synthetic_dump(&spec, |t, b| 0.1 + 0.01 * t as f64 + 0.05 * (b % 3) as f64)?,
    };
    write_dump(&dump, &args.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Toy(a) => toy(a),
        Command::Adapt(a) => adapt(a),
        Command::Score(a) => score(a),
        Command::Sweep(a) => sweep(a),
        Command::Extract(a) => extract(a),
        Command::GenDump(a) => gen_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
