use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lora-composer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Toy assets with the latent shrunk to 4x8x8 so each job takes a moment.
fn small_job(dir: &Path) -> PathBuf {
    let out = run(&[
        "make-toy-assets",
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let config = dir.join("config.json");
    assert_eq!(text(&out.stdout).trim(), config.display().to_string());
    let json = std::fs::read_to_string(&config).unwrap().replace(
        "\"channels\": 8,\n    \"height\": 16,\n    \"width\": 16",
        "\"channels\": 4,\n    \"height\": 8,\n    \"width\": 8",
    );
    assert!(json.contains("\"height\": 8"));
    std::fs::write(&config, json).unwrap();
    config
}

#[test]
fn make_toy_assets_writes_a_runnable_job() {
    let dir = tempfile::tempdir().unwrap();
    run(&["make-toy-assets", "--out", dir.path().to_str().unwrap()]);
    for f in [
        "config.json",
        "global_prompt.lcb",
        "concept_a.lcb",
        "concept_b.lcb",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn compose_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_job(dir.path());
    let outs = ["a", "b"].map(|n| dir.path().join(n));
    for o in &outs {
        let r = run(&[
            "compose",
            "--config",
            config.to_str().unwrap(),
            "--out",
            o.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", text(&r.stderr));
        assert!(
            text(&r.stdout).contains("guided 18 timesteps"),
            "{}",
            text(&r.stdout)
        );
    }
    for f in ["trace.csv", "latent.lcb", "preview.pgm"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let trace = std::fs::read_to_string(outs[0].join("trace.csv")).unwrap();
    assert!(trace.starts_with("timestep,iteration,l_ce,l_fill,l_region,total,phi_t,accepted\n"));
    assert!(std::fs::read(outs[0].join("preview.pgm"))
        .unwrap()
        .starts_with(b"P5\n8 8\n255\n"));

    let other = dir.path().join("c");
    run(&[
        "compose",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        other.to_str().unwrap(),
    ]);
    assert_ne!(
        std::fs::read(outs[0].join("latent.lcb")).unwrap(),
        std::fs::read(other.join("latent.lcb")).unwrap()
    );
}

#[test]
fn gradcheck_passes_on_the_toy_job() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_job(dir.path());
    let r = run(&[
        "gradcheck",
        "--config",
        config.to_str().unwrap(),
        "--coords",
        "32",
    ]);
    assert!(r.status.success(), "{}{}", text(&r.stdout), text(&r.stderr));
    assert!(text(&r.stdout).lines().any(|l| l == "PASS"));
}

#[test]
fn bad_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let r = run(&["compose", "--config", missing.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(text(&r.stderr).starts_with("error:"));

    let config = small_job(dir.path());
    let json = std::fs::read_to_string(&config)
        .unwrap()
        .replace("\"steps\": 25", "\"steps\": 25, \"stpes\": 3");
    std::fs::write(&config, json).unwrap();
    let r = run(&["gradcheck", "--config", config.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(text(&r.stderr).contains("stpes"), "{}", text(&r.stderr));

    let r = run(&["compose"]);
    assert!(!r.status.success());
}
