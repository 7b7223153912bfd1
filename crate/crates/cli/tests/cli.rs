use std::path::Path;
use std::process::{Command, Output};

use pss_cli::config::RunConfig;

fn pss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pss")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = pss(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_of(out: &Output) -> (i32, String) {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not json: {line}"));
    (out.status.code().unwrap(), v["error"]["kind"].as_str().unwrap().to_string())
}

const MODEL: [&str; 5] = ["manifest=corpus/manifest.tsv", "labels=labels", "d=16", "layers=1", "conv_channels=8"];

fn corpus_and_labels(dir: &Path) {
    ok(dir, &["synth-corpus", "out=corpus", "synth_utterances=8", "seed=2"]);
    ok(dir, &["build-labels", "out=labels", "manifest=corpus/manifest.tsv", "n_clusters=6"]);
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"))
}

#[test]
fn errors_are_json_with_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(error_of(&pss(d, &["pretrain", "out=x", "bogus=1"])), (2, "config".into()));
    assert_eq!(error_of(&pss(d, &["pretrain", "out=x", "k=two"])), (2, "config".into()));
    assert_eq!(error_of(&pss(d, &["build-labels", "out=l", "manifest=missing.tsv"])), (3, "io".into()));

    corpus_and_labels(d);
    let text = std::fs::read_to_string(d.join("corpus/manifest.tsv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut f: Vec<String> = lines[1].split('\t').map(String::from).collect();
    f[2] = (f[2].parse::<usize>().unwrap() + 1).to_string();
    lines[1] = f.join("\t");
    std::fs::write(d.join("corpus/bad.tsv"), lines.join("\n") + "\n").unwrap();
    let out = pss(d, &["build-labels", "out=l2", "manifest=corpus/bad.tsv"]);
    assert_eq!(error_of(&out), (3, "data".into()));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));

    std::fs::write(d.join("eval.cfg"), "stage = eval\n").unwrap();
    assert_eq!(error_of(&pss(d, &["pretrain", "--config", "eval.cfg", "out=y"])).1, "config");
}

#[test]
fn run_directory_stores_resolved_config_and_refuses_a_different_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.cfg"), "# labels\nn_clusters = 5\nseed = 3\n").unwrap();
    ok(d, &["synth-corpus", "out=corpus", "synth_utterances=6"]);
    ok(d, &["build-labels", "--config", "a.cfg", "out=l", "manifest=corpus/manifest.tsv"]);
    let snap = std::fs::read_to_string(d.join("l/config.txt")).unwrap();
    let cfg = RunConfig::parse(&snap).unwrap();
    assert_eq!((cfg.n_clusters, cfg.seed, cfg.manifest.as_str()), (5, 3, "corpus/manifest.tsv"));
    assert_eq!(cfg.render(), snap);
    let out = pss(d, &["build-labels", "--config", "a.cfg", "out=l", "manifest=corpus/manifest.tsv", "seed=4"]);
    assert_eq!(error_of(&out), (2, "config".into()));

    let units = std::fs::read_to_string(d.join("l/units.tsv")).unwrap();
    assert_eq!(units.lines().count(), 6);
    assert!(units
        .lines()
        .flat_map(|l| l.split('\t').nth(1).unwrap().split(' '))
        .all(|u| u.parse::<u32>().unwrap() < 5));
}

#[test]
fn simulate_without_mixing_writes_primaries_and_silent_streams() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus_and_labels(d);
    ok(d, &[&["simulate", "out=sim", "count=6", "p_mix=0"][..], &MODEL[..]].concat());
    let summary: serde_json::Value = serde_json::from_slice(&read(d, "sim/summary.json")).unwrap();
    assert_eq!(summary["n_histogram"], serde_json::json!([6, 0]));
    for line in std::fs::read_to_string(d.join("sim/provenance.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["id"].as_str().unwrap();
        let primary = v["record"]["primary"].as_str().unwrap();
        assert_eq!(read(d, &format!("sim/mixtures/{id}.wav")), read(d, &format!("corpus/wav/{primary}.wav")));
        let targets = std::fs::read_to_string(d.join(format!("sim/mixtures/{id}.targets"))).unwrap();
        let streams: Vec<&str> = targets.lines().collect();
        assert_eq!(streams.len(), 2);
        assert!(streams[1].split(' ').all(|u| u == "6"));
    }
}

#[test]
fn pretraining_resumes_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus_and_labels(d);
    let sched = ["total_steps=6", "warmup_steps=1", "batch_seconds=5", "checkpoint_every=3"];
    let args = |out: &'static str, steps: &'static str| -> Vec<&'static str> {
        [&["pretrain", out, steps][..], &MODEL[..], &sched[..]].concat()
    };
    ok(d, &args("out=full", "steps=0"));
    ok(d, &args("out=split", "steps=3"));
    ok(d, &args("out=split", "steps=0"));
    assert_eq!(read(d, "split/model.ckpt"), read(d, "full/model.ckpt"));
    assert_eq!(read(d, "split/metrics.jsonl"), read(d, "full/metrics.jsonl"));
    assert_eq!(read(d, "split/checkpoints/step000003.ckpt"), read(d, "full/checkpoints/step000003.ckpt"));
}

#[test]
fn finetune_eval_probe_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus_and_labels(d);
    let sched = ["total_steps=4", "warmup_steps=1", "batch_seconds=5"];
    let with = |head: &[&'static str]| -> Vec<&'static str> { [head, &MODEL[..], &sched[..]].concat() };
    ok(d, &with(&["pretrain", "out=pt"]));
    ok(d, &with(&["finetune", "out=ft", "init=pt", "ft_mixtures=4", "dev_mixtures=2", "ft_batch=2"]));
    let epochs = std::fs::read_to_string(d.join("ft/metrics.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("dev_pit_wer"))
        .count();
    assert_eq!(epochs, 2);
    ok(d, &with(&["eval", "out=ev", "init=ft", "eval_mixtures=2", "beam=4"]));
    let s: serde_json::Value = serde_json::from_slice(&read(d, "ev/summary.json")).unwrap();
    assert_eq!(s["mixtures"], 2);
    assert!(s["pit_wer"].as_f64().unwrap() >= 0.0);

    // Unit heads cannot be scored as characters.
    assert_eq!(error_of(&pss(d, &with(&["eval", "out=ev2", "init=pt"]))), (2, "config".into()));

    for speakers in ["probe_speakers=2", "probe_speakers=3"] {
        let out = if speakers.ends_with('2') { "out=sd2" } else { "out=sd3" };
        ok(d, &with(&["probe-sd", out, "init=pt", "k=3", speakers, "probe_mixtures=4", "dev_mixtures=2", "probe_hidden=4"]));
    }
    assert_eq!(read(d, "sd2/model.ckpt"), read(d, "pt/model.ckpt"));
    ok(d, &with(&["eval", "out=evsd", "init=sd2", "task=sd", "k=3", "dev_mixtures=2"]));
    assert_eq!(
        serde_json::from_slice::<serde_json::Value>(&read(d, "evsd/summary.json")).unwrap()["der"],
        serde_json::from_slice::<serde_json::Value>(&read(d, "sd2/summary.json")).unwrap()["der"]
    );

    ok(d, &["grid", "out=grid", "runs=ev,evsd"]);
    let rows = std::fs::read_to_string(d.join("grid/grid.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().all(|l| l.contains("\"k\":2") && l.contains("\"p_mix\":1.0")));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = pss(dir.path(), &["gradcheck", "grad_coords=10"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 3);
}
