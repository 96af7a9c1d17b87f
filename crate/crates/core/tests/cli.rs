use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"version = 1

[representation]
k = 8

[stage1]
dim = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
predictor_hidden = 16

[stage2.generator]
token_dim = 8
f0_dim = 4
resblock_kernels = [3]
resblock_dilations = [1, 3]
base_channels = 8
pre_kernel = 3
post_kernel = 3

[stage2]
mel_scales = [[256, 20], [512, 40]]

[stage2.discriminator]
periods = [2, 3]
fft_sizes = [128, 256]
n_bands = 2
period_channels = [4, 8]
spectral_channels = 4
"#;

fn nhsg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nhsg"))
        .current_dir(dir)
        .env_remove("NHSG_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nhsg(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn toy_recipe_runs_every_subcommand() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    std::fs::write(dir.join("cfg.toml"), TINY).unwrap();
    let run = |args: &[&str]| ok(dir, &[&["--config", "cfg.toml"], args].concat());
    let m = ["--manifest", "corpus/manifest.jsonl", "--cache", "cache"];

    run(&["toy-corpus", "--out", "corpus"]);
    run(&[&["extract"], &m[..]].concat());
    run(&[&["train-kmeans"], &m[..], &["--out", "cb.nhcb"]].concat());
    let summary = run(&[&["extract"], &m[..], &["--codebook", "cb.nhcb"]].concat());
    assert!(summary.contains("skipped 0"), "{summary}");
    run(&[&["train-stage1"], &m[..], &["--codebook", "cb.nhcb", "--out", "s1.nhck", "--epochs", "2"]].concat());
    run(&[&["train-stage2"], &m[..], &["--codebook", "cb.nhcb", "--out", "s2.nhck", "--steps", "3"]].concat());
    run(&[&["train-stage2"], &m[..], &["--codebook", "cb.nhcb", "--out", "s2.nhck", "--steps", "5", "--resume", "s2.nhck"]].concat());
    let log = std::fs::read_to_string(dir.join("s2.nhck.losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 6, "{log}");
    assert!(log.starts_with("step,adv_g,adv_d,fm,mel,gen_total\n"));
    assert!(log.lines().nth(5).unwrap().starts_with("4,"));

    run(&[&["finetune"], &m[..], &["--init", "s2.nhck", "--out", "ft.nhck", "--steps", "2", "--log", "ft.csv"]].concat());
    assert_eq!(std::fs::read_to_string(dir.join("ft.csv")).unwrap().lines().count(), 3);

    let bird = "corpus/audio/bird_00.wav";
    run(&["synthesize", "--score", "corpus/scores/human_00.txt", "--timbre", bird, "--stage1", "s1.nhck", "--vocoder", "ft.nhck", "--out", "syn.wav"]);
    let conv = run(&["convert", "--source", "corpus/audio/human_01.wav", "--timbre", bird, "--ckpt", "ft.nhck", "--out", "conv.wav"]);
    let nums: Vec<usize> = conv.split(|c: char| !c.is_ascii_digit()).filter_map(|s| s.parse().ok()).collect();
    assert_eq!(nums[1], nums[0] * 320, "{conv}");

    std::fs::write(
        dir.join("pairs.jsonl"),
        "{\"id\":\"a\",\"hyp_path\":\"conv.wav\",\"ref_path\":\"corpus/audio/human_01.wav\"}\n{\"id\":\"b\",\"hyp_path\":\"syn.wav\",\"ref_path\":\"corpus/audio/human_00.wav\"}\n",
    )
    .unwrap();
    run(&["evaluate", "--pairs", "pairs.jsonl", "--out-dir", "report"]);
    assert!(dir.join("report/report.csv").exists() && dir.join("report/report.json").exists());

    for artifact in ["cb.nhcb", "s1.nhck", "cache/human_00.nhrc", "cache/bird_00.nhte", "cache/bird_00.nhft"] {
        assert!(!run(&["inspect", artifact]).is_empty(), "{artifact}");
    }

    std::fs::write(dir.join("long.wav"), std::fs::read(dir.join("corpus/audio/human_02.wav")).unwrap()).unwrap();
    run(&["segment", "--input", "long.wav", "--out-dir", "segs", "--manifest", "segs/manifest.jsonl"]);
    assert!(dir.join("segs/manifest.jsonl").exists());
}

#[test]
fn evaluate_exit_code_reflects_failed_rows() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["toy-corpus", "--out", "corpus"]);
    std::fs::write(
        dir.join("pairs.jsonl"),
        "{\"id\":\"a\",\"hyp_path\":\"corpus/audio/human_00.wav\",\"ref_path\":\"corpus/audio/human_00.wav\"}\n{\"id\":\"b\",\"hyp_path\":\"missing.wav\",\"ref_path\":\"corpus/audio/human_00.wav\"}\n",
    )
    .unwrap();
    let out = nhsg(dir, &["evaluate", "--pairs", "pairs.jsonl"]);
    assert_eq!(code(&out), 2);
    let report = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "{report}");

    let first = std::fs::read_to_string(dir.join("pairs.jsonl")).unwrap();
    std::fs::write(dir.join("good.jsonl"), first.lines().next().unwrap()).unwrap();
    assert_eq!(code(&nhsg(dir, &["evaluate", "--pairs", "good.jsonl"])), 0);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    assert_eq!(code(&nhsg(dir, &["no-such-command"])), 1);
    assert_eq!(code(&nhsg(dir, &["extract", "--manifest", "nope.jsonl", "--cache", "c"])), 1);

    std::fs::write(dir.join("bad.toml"), "version = 1\nbogus = 3\n[stage1]\ndimm = 4\n").unwrap();
    let out = nhsg(dir, &["--config", "bad.toml", "config"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("dimm"), "{err}");

    std::fs::write(dir.join("nover.toml"), "[representation]\nk = 8\n").unwrap();
    assert_eq!(code(&nhsg(dir, &["--config", "nover.toml", "config"])), 1);
}

#[test]
fn printed_configs_load_back() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    for flags in [&[][..], &["--reference"][..]] {
        let text = ok(dir, &[&["config"], flags].concat());
        std::fs::write(dir.join("c.toml"), &text).unwrap();
        ok(dir, &["--config", "c.toml", "config"]);
    }
}

#[test]
fn seed_flag_beats_env_beats_config() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    std::fs::write(dir.join("s.toml"), "version = 1\nseed = 9\n").unwrap();
    let corpus = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_nhsg"));
        cmd.current_dir(dir).env_remove("NHSG_SEED").args(["--config", "s.toml"]);
        if let Some(e) = env {
            cmd.env("NHSG_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.args(["toy-corpus", "--out", name]).output().unwrap().status.success());
        std::fs::read(dir.join(name).join("audio/general_00.wav")).unwrap()
    };
    let cfg9 = corpus("a", None, None);
    let env9 = corpus("b", Some("9"), None);
    let env4 = corpus("c", Some("4"), None);
    let flag9 = corpus("d", Some("4"), Some("9"));
    assert_eq!(cfg9, env9);
    assert_ne!(cfg9, env4);
    assert_eq!(cfg9, flag9);
}
