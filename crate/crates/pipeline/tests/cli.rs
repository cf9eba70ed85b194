//! The `svhdr` binary: exit codes, configuration layering and the
//! resolved-config echo.

use std::path::Path;
use std::process::{Command, Output};

fn svhdr(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svhdr"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("SVHDR_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&svhdr(d, &["--help"], &[])), 0);
    assert_eq!(code(&svhdr(d, &["--version"], &[])), 0);
    assert_eq!(code(&svhdr(d, &["frobnicate"], &[])), 1);
    assert_eq!(code(&svhdr(d, &["eval", "--set", "no.such.key=1"], &[])), 1);
    assert_eq!(code(&svhdr(d, &["eval", "--set", "crop"], &[])), 1);
    assert_eq!(code(&svhdr(d, &["eval", "--method", "magic"], &[])), 1);
    assert_eq!(code(&svhdr(d, &["train", "--set", "train.steps=9000"], &[])), 1);
    assert_eq!(code(&svhdr(d, &["eval", "--config", "missing.conf"], &[])), 1);
    std::fs::write(d.join("dup.conf"), "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(code(&svhdr(d, &["eval", "--config", "dup.conf"], &[])), 1);
}

#[test]
fn data_and_numerical_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("garbage.png"), b"not a png").unwrap();
    let o = svhdr(d, &["fuse", "garbage.png", "garbage.png", "garbage.png", "--exposures", "1,2,3"], &[]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(d.join("m.txt"), "split=test radiance=absent.pfm\n").unwrap();
    assert_eq!(code(&svhdr(d, &["eval", "--dataset", "m.txt"], &[])), 2);

    let o = svhdr(
        d,
        &["train", "--preset", "overfit", "--out", "nan", "--set", "train.lr=1e30", "--set", "train.sample_size=16", "--set", "train.steps=20"],
        &[],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("nan/last-good.ckpt").is_file());
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.conf"), "# eval settings\ncrop = 32\nsynthetic_sources = 1\nseed = 5\nrepeats = 1\n").unwrap();
    let o = svhdr(d, &["eval", "--config", "run.conf", "--out", "e", "--seed", "6"], &[("SVHDR_SEED", "7"), ("SVHDR_TONEMAP__MU", "100")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = std::fs::read_to_string(d.join("e/resolved-config.txt")).unwrap();
    for line in ["seed = 6", "tonemap.mu = 100", "crop = 32", "out = e"] {
        assert!(echo.lines().any(|l| l == line), "missing {line:?} in\n{echo}");
    }
}

#[test]
fn resolved_config_alone_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = svhdr(d, &["synthesize", "--out", "a", "--seed", "3", "--set", "synthetic_sources=1", "--set", "synthetic_size=160", "--set", "crop=64"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = svhdr(d, &["synthesize", "--config", "a/resolved-config.txt", "--out", "b"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.txt", "sample_00003/gt.pfm", "sample_00003/ldr_2.png", "sample_00007/meta.txt"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn grad_check_command_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = svhdr(tmp.path(), &["grad-check", "--out", "g"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("g/grad-check.csv")).unwrap();
    assert!(csv.starts_with("op,tier,tolerance,max_rel_error,probes,passed\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.contains("\nnetwork+loss,network,"));
}
