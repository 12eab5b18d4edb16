use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fewshot_dml::data::load_dataset;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot-dml"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn lines(path: impl AsRef<Path>) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const TINY_GAN: [&str; 8] = [
    "--set", "gan.epochs=2",
    "--set", "gan.generator_hidden=16,16,16",
    "--set", "gan.critic_hidden=16,16,16",
    "--set", "gan.noise_dim=8",
];

const TINY_DML: [&str; 4] = ["--set", "dml.epochs=2", "--set", "dml.arch.trunk_hidden=32,16"];

#[test]
fn synth_data_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--out", "a", "--seed", "4"]);
    ok(d, &["synth-data", "--out", "b", "--seed", "4"]);
    ok(d, &["synth-data", "--out", "c", "--seed", "5"]);
    for (file, n) in [
        ("ground.jsonl", 800),
        ("real_aerial.jsonl", 400),
        ("game_aerial.jsonl", 700),
        ("real_train.jsonl", 240),
        ("real_val.jsonl", 40),
        ("real_test.jsonl", 120),
        ("real_fewshot.jsonl", 40),
    ] {
        assert_eq!(lines(d.join("a").join(file)), n, "{file}");
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap());
    }
    assert_ne!(fs::read(d.join("a/ground.jsonl")).unwrap(), fs::read(d.join("c/ground.jsonl")).unwrap());
    let config = fs::read_to_string(d.join("a/config.txt")).unwrap();
    assert!(config.lines().any(|l| l == "seed = 4"));
}

#[test]
fn invalid_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.txt"), "synth.spred = 2\n").unwrap();
    let out = cli(dir.path(), &["synth-data", "--out", "x", "--config", "run.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.spred"));
    assert!(!dir.path().join("x/ground.jsonl").exists());
}

#[test]
fn gan_generate_and_dml_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--out", "d"]);

    let missing = cli(d, &["train-gan", "--out", "g", "--ground", "nope.jsonl", "--aerial", "d/real_fewshot.jsonl"]);
    assert!(!missing.status.success());

    let gan = [&["train-gan", "--out", "g", "--ground", "d/ground.jsonl", "--aerial", "d/real_fewshot.jsonl"][..], &TINY_GAN].concat();
    ok(d, &gan);
    assert!(d.join("g/generator.json").exists());
    assert_eq!(lines(d.join("g/gan_log.csv")), 3);
    let literal = [&["train-gan", "--out", "gl", "--ground", "d/ground.jsonl", "--aerial", "d/real_fewshot.jsonl", "--eq2-literal"][..], &TINY_GAN].concat();
    ok(d, &literal);
    assert!(fs::read_to_string(d.join("gl/config.txt")).unwrap().contains("gan.eq2_literal = true"));
    assert_ne!(fs::read(d.join("g/gan_log.csv")).unwrap(), fs::read(d.join("gl/gan_log.csv")).unwrap());

    ok(d, &["generate", "--out", "gen", "--checkpoint", "g/generator.json", "--ground", "d/ground.jsonl", "--per-record", "1"]);
    let ground = load_dataset(d.join("d/ground.jsonl")).unwrap();
    let generated = load_dataset(d.join("gen/generated_aerial.jsonl")).unwrap();
    assert_eq!(generated.len(), 800);
    for (g, src) in generated.records().iter().zip(ground.records()) {
        assert_eq!(g.label, src.label);
    }
    ok(d, &["generate", "--out", "gen2", "--checkpoint", "g/generator.json", "--ground", "d/ground.jsonl"]);
    assert_eq!(
        fs::read(d.join("gen/generated_aerial.jsonl")).unwrap(),
        fs::read(d.join("gen2/generated_aerial.jsonl")).unwrap()
    );

    let base = ["--real", "d/real_fewshot.jsonl", "--val", "d/real_val.jsonl"];
    let no_games = cli(d, &[&["train-dml", "--out", "x", "--mode", "games"][..], &base, &TINY_DML].concat());
    assert!(!no_games.status.success());
    assert!(String::from_utf8_lossy(&no_games.stderr).contains("configuration error"));

    let baseline = ok(d, &[&["train-dml", "--out", "b", "--mode", "baseline", "--games", "d/game_aerial.jsonl"][..], &base, &TINY_DML].concat());
    assert!(String::from_utf8_lossy(&baseline.stderr).contains("ignores auxiliary"));

    ok(d, &[&["train-dml", "--out", "a", "--mode", "games", "--games", "d/game_aerial.jsonl"][..], &base, &TINY_DML].concat());
    ok(
        d,
        &[
            &["train-dml", "--out", "c", "--mode", "games_plus_generated", "--generated", "gen/generated_aerial.jsonl", "--warm-start", "a/dml.json"][..],
            &base,
            &TINY_DML,
        ]
        .concat(),
    );
    assert_eq!(lines(d.join("c/dml_log.csv")), 3);

    ok(d, &["evaluate", "--out", "e", "--checkpoint", "c/dml.json", "--test", "d/real_test.jsonl"]);
    for f in ["report.csv", "report.txt", "report.json", "config.txt"] {
        assert!(d.join("e").join(f).exists(), "{f}");
    }
    assert_eq!(lines(d.join("e/report.csv")), 1 + 8 + 1);
}

#[test]
fn evaluate_on_separable_data_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let clean = [
        "--set", "synth.spread=0.05",
        "--set", "synth.aerial_noise=0",
        "--set", "synth.nuisance_scale=0",
        "--set", "synth.class_separation=4",
    ];
    ok(d, &[&["synth-data", "--out", "d"][..], &clean].concat());
    ok(
        d,
        &[
            "train-dml", "--out", "m", "--mode", "baseline", "--real", "d/real_fewshot.jsonl", "--val", "d/real_val.jsonl",
            "--set", "dml.epochs=100", "--set", "dml.arch.trunk_hidden=32,16",
        ],
    );
    let out = ok(d, &["evaluate", "--out", "e", "--checkpoint", "m/dml.json", "--test", "d/real_test.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall accuracy 1.0000"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["overall_accuracy"], 1.0);
}

#[test]
fn kshot_sweep_writes_one_curve_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[&["kshot-sweep", "--out", "s", "--set", "ks=3,2", "--set", "seeds=0", "--set", "modes=baseline,games"][..], &TINY_DML].concat(),
    );
    for mode in ["baseline", "games"] {
        let csv = fs::read_to_string(d.join(format!("s/curve_{mode}.csv"))).unwrap();
        let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ks, ["2", "3"]);
    }
    assert!(d.join("s/curves.dat").exists());
    let too_many = cli(d, &[&["kshot-sweep", "--out", "t", "--set", "ks=31", "--set", "seeds=0", "--set", "modes=baseline"][..], &TINY_DML].concat());
    assert!(!too_many.status.success());
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--out", "gc"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 10 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert_eq!(lines(dir.path().join("gc/gradcheck.csv")), 11);
}
