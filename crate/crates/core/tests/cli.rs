mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::data_path;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disentangle")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_horizon_and_zero_rate_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("k0.csv"), dir.path().join("a0.csv"));
    let (la, lb) = (dir.path().join("k0.txt"), dir.path().join("a0.txt"));
    let o1 = run(&["adapt", "--k", "0", "--seed", "4", "--out", arg(&a), "--latent-out", arg(&la)]);
    let o2 = run(&["adapt", "--alpha", "0", "--seed", "4", "--out", arg(&b), "--latent-out", arg(&lb)]);
    assert!(o1.status.success() && o2.status.success());
    assert_eq!(std::fs::read(&la).unwrap(), std::fs::read(&lb).unwrap());
    // Trace losses are evaluated on the same latents, so they match as well.
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn adapt_is_deterministic_and_traces_every_timestep() {
    let first = run(&["adapt", "--seed", "9"]);
    let second = run(&["adapt", "--seed", "9"]);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("timestep,intra,inter,diversity,total,intergroup_jsd"));
    assert_eq!(lines.count(), 28);
    assert!(String::from_utf8_lossy(&first.stderr).contains("updates 18"));
}

#[test]
fn toy_jedi_separates_groups() {
    let out = run(&["toy", "--loss", "jedi", "--seed", "1", "--iterations", "1500", "--every", "500"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("iteration,map,group,cell,value\n"));
    let report = String::from_utf8(out.stderr).unwrap();
    let between: Vec<f64> = report
        .split("between-group JSD ")
        .nth(1)
        .unwrap()
        .split(';')
        .next()
        .unwrap()
        .split(" -> ")
        .map(|v| v.trim().parse().unwrap())
        .collect();
    assert!(between[1] > between[0], "{report}");
}

#[test]
fn score_reproduces_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let json = dir.path().join("s.json");
    let out = run(&[
        "score",
        arg(&data_path("jedi.dump")),
        "--baseline",
        arg(&data_path("base.dump")),
        "--out-csv",
        arg(&csv),
        "--out-json",
        arg(&json),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(data_path("golden_series.csv")).unwrap());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let jedi = summary["score"]["overall_mean"].as_f64().unwrap();
    let base = summary["baseline"]["overall_mean"].as_f64().unwrap();
    assert!(jedi > base);
    assert_eq!(summary["score"]["std_kind"], "population");
}

#[test]
fn golden_csv_parses_back_to_library_scores() {
    use disentangle::extraction::InclusiveRange;
    use disentangle::score::read_series_csv;
    let text = std::fs::read_to_string(data_path("golden_series.csv")).unwrap();
    let (timesteps, jedi, base) = read_series_csv(&text).unwrap();
    assert_eq!(timesteps, (0..28).collect::<Vec<_>>());
    let dump = disentangle::read_dump(data_path("jedi.dump")).unwrap();
    let series = disentangle::disentanglement_score::<f64>(
        &dump,
        &dump.manifest().prompt_spec().unwrap(),
        InclusiveRange::new(7, 15).unwrap(),
        None,
    )
    .unwrap();
    assert_eq!(series.rows(), &jedi[..]);
    assert_eq!(base.len(), 28);
}

#[test]
fn gen_dump_then_extract_writes_grids() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("d.dump");
    let grids = dir.path().join("grids");
    assert!(run(&["gen-dump", "--out", arg(&dump), "--kind", "softmaxed", "--timesteps", "0:1", "--blocks", "5:6"])
        .status
        .success());
    let out = run(&["extract", arg(&dump), "--blocks", "5:6", "--timestep", "1", "--out-dir", arg(&grids)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(grids.join("t001_b06_tok2.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        grid.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 3));
    assert!((rows.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn sweep_writes_one_row_per_rate() {
    let out = run(&["sweep", "--alphas", "0.01,0.003,0", "--grid", "8x8"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("alpha,final_total,final_intergroup_jsd,displacement_inf,updates\n"));
}

#[test]
fn exit_codes_distinguish_usage_data_and_success() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["adapt", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["score", "/nonexistent/x.dump"]).status.code(), Some(2));
    // Horizon longer than the schedule is a configuration error.
    assert_eq!(run(&["adapt", "--k", "30", "--t", "28"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dump");
    std::fs::write(&bad, b"{\"format_version\":99}\n").unwrap();
    let out = run(&["score", arg(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn non_finite_loss_inputs_exit_with_numerical_code() {
    let out = run(&["adapt", "--alpha", "1e308", "--k", "2", "--t", "3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
