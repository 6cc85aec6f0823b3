//! Shared helpers for the integration tests: driving the `tpdiff` binary.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn tpdiff(threads: usize, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_tpdiff"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .expect("spawn tpdiff");
    if !out.status.success() {
        eprintln!("tpdiff {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every subcommand once at toy scale under `root`. Returns the first
/// failing step, if any.
pub fn run_pipeline(root: &Path, threads: usize, seed: u64) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let seed = seed.to_string();
    let (data, dec, fit, model, samples, refined) = (p("data"), p("decoder"), p("fit"), p("model"), p("samples"), p("refined"));
    let dec_ckpt = format!("{dec}/decoder.ckpt");
    let model_ckpt = format!("{model}/denoiser.ckpt");
    let sample_tp = format!("{samples}/sample_000.tpln");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec!["--n-scenes", "3", "--views", "6", "--heldout-views", "1", "--resolution", "16", "--out", &data].into_iter().map(String::from).collect()),
        (
            "train-decoder",
            vec!["--data", &data, "--count", "2", "--steps", "15", "--rays", "128", "--samples", "16", "--resolution", "8", "--out", &dec]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "fit",
            vec!["--data", &data, "--decoder", &dec_ckpt, "--steps", "10", "--rays", "128", "--samples", "16", "--resolution", "8", "--out", &fit]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "train-diffusion",
            vec![
                "--triplanes", &fit, "--data", &data, "--images-per-scene", "2", "--steps", "3", "--widths", "8,8,16", "--groups", "4", "--heads", "2",
                "--temb-dim", "16", "--token-dim", "8", "--diffusion-steps", "100", "--out", &model,
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "sample",
            vec!["--model", &model_ckpt, "--caption", "red sphere", "--steps", "5", "--count", "2", "--out", &samples].into_iter().map(String::from).collect(),
        ),
        (
            "refine",
            vec![
                "--triplane", &sample_tp, "--decoder", &dec_ckpt, "--model", &model_ckpt, "--caption", "red sphere", "--steps", "3", "--samples", "16",
                "--out", &refined,
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "render",
            vec!["--triplane", &sample_tp, "--decoder", &dec_ckpt, "--resolution", "16", "--samples", "16", "--out", &p("render")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "export-mesh",
            vec!["--triplane", &format!("{fit}/00000.tpln"), "--decoder", &dec_ckpt, "--grid", "16", "--out", &p("mesh")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "eval",
            vec!["--triplanes", &fit, "--decoder", &dec_ckpt, "--data", &data, "--oracle-resolution", "16", "--samples", "16", "--out", &p("eval")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
    ];
    for (cmd, args) in steps {
        let mut all: Vec<&str> = vec![cmd, "--seed", &seed];
        all.extend(args.iter().map(String::as_str));
        let code = tpdiff(threads, &all);
        if code != 0 {
            return Err(format!("{cmd} exited with {code}"));
        }
    }
    Ok(())
}
