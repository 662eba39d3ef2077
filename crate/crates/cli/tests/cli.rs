use std::path::Path;
use std::process::{Command, Output};

use scaseg_core::config::RunConfig;
use scaseg_core::cost::{count_macs, count_params};
use scaseg_core::tensor::io::{self, DType};
use scaseg_core::Tensor;

const TINY: &[&str] = &[
    "--set", "encoder.channels=2,3,4,5",
    "--set", "decoder.num_blocks=1",
    "--set", "decoder.head_channels=4",
    "--set", "train.iterations=4",
    "--set", "train.batch_size=2",
    "--set", "train.train_samples=4",
    "--set", "train.val_samples=2",
    "--set", "train.eval_every=2",
];

fn scaseg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaseg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn describe_totals_match_the_cost_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = scaseg(&["describe"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("module,params,macs"));
    let (mut params, mut macs) = (0u64, 0u64);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        params += f[1].parse::<u64>().unwrap();
        macs += f[2].parse::<u64>().unwrap();
    }
    let cfg = RunConfig::default();
    assert_eq!(params, count_params(&cfg.model).unwrap());
    assert_eq!(macs, count_macs(&cfg.model, 64, 64).unwrap());
    assert!(dir.path().join("describe.txt").exists());
}

#[test]
fn unknown_keys_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = scaseg(&["train", "--set", "decoder.depth=3"], &out_dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("decoder.depth"));
    assert!(!out_dir.exists());

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "decoder.num_blocks = 2\ntrain.speed = 9\n").unwrap();
    let out = scaseg(&["describe", "--config", cfg.to_str().unwrap()], &out_dir);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.speed") && err.contains("line 2"), "{err}");
    assert!(!out_dir.exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# ablation\ndecoder.attention = self-on-concat\ndecoder.num_blocks = 2\n").unwrap();
    let out = scaseg(&["describe", "--config", cfg.to_str().unwrap(), "--set", "decoder.num_blocks=1"], dir.path());
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("describe.txt")).unwrap();
    assert!(text.contains("decoder.ase.block1.self"));
    assert!(!text.contains("decoder.ase.block2"));
}

#[test]
fn scm_ablation_rows_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = scaseg(&["ablate", "--axis", "scm"], dir.path());
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("ablation_scm.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let costs: Vec<&str> = rows.iter().map(|r| r.split_once(',').unwrap().1).collect();
    assert!(costs.iter().all(|c| *c == costs[0]));
    assert_eq!(rows[0].split(',').next(), Some("scm=eq6"));
}

#[test]
fn forward_writes_logits_and_palette_mask() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("image.sasf");
    let image = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f64 / 7.0);
    io::save(&input, &image, DType::F32).unwrap();
    let out = scaseg(&["forward", "--input", input.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let logits = io::load(dir.path().join("logits.sasf")).unwrap();
    assert_eq!(logits.shape(), &[1, 4, 64, 64]);
    let ppm = std::fs::read(dir.path().join("mask.ppm")).unwrap();
    let header = b"P6\n64 64\n255\n";
    assert!(ppm.starts_with(header));
    assert_eq!(ppm.len(), header.len() + 64 * 64 * 3);
    let palette = scaseg_core::train::PALETTE;
    assert!(ppm[header.len()..].chunks(3).all(|px| palette[..4].iter().any(|c| c == px)));

    let again = tempfile::tempdir().unwrap();
    scaseg(&["forward", "--input", input.to_str().unwrap()], again.path());
    assert_eq!(std::fs::read(again.path().join("mask.ppm")).unwrap(), ppm);
}

#[test]
fn forward_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.sasf");
    io::save(&input, &Tensor::zeros(&[2, 64, 64]), DType::F64).unwrap();
    let out = scaseg(&["forward", "--input", input.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(&input, b"not a tensor").unwrap();
    let out = scaseg(&["forward", "--input", input.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = scaseg(&with_tiny(&["gradcheck", "--coords", "2", "--directions", "1"]), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("max relative error"));
}

#[test]
fn train_is_byte_reproducible_and_feeds_forward() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = scaseg(&with_tiny(&["train", "--seed", "3"]), d.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["metrics.csv", "checkpoint.bin", "config.txt"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let config = std::fs::read_to_string(dirs[0].path().join("config.txt")).unwrap();
    assert!(config.contains("train.seed = 3"));

    let input = dirs[0].path().join("batch.sasf");
    io::save(&input, &Tensor::full(&[2, 3, 64, 64], 0.5), DType::F64).unwrap();
    let ckpt = dirs[0].path().join("checkpoint.bin");
    let args = with_tiny(&["forward", "--input", input.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    let out = scaseg(&args, dirs[1].path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dirs[1].path().join("mask_0.ppm").exists() && dirs[1].path().join("mask_1.ppm").exists());

    // a checkpoint from a differently shaped model is a format error
    let out = scaseg(&["forward", "--input", input.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], dirs[1].path());
    assert_eq!(out.status.code(), Some(3));
}
