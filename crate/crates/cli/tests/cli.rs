use std::path::Path;
use std::process::{Command, Output};

fn hvgg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvgg")).args(args).output().expect("run hvgg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("output = out\n{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["train", "--help"], &["--version"]] {
        let o = hvgg(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    assert!(stdout(&hvgg(&["--help"])).contains("evaluate"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = many\n").unwrap();
    let bad = bad.display().to_string();
    let cases: [&[&str]; 6] = [
        &[],
        &["frobnicate"],
        &["synth"],
        &["train", "--config", &cfg],
        &["train", "--config", &cfg, "--model", "deep"],
        &["synth", "--config", &bad],
    ];
    for args in cases {
        let o = hvgg(args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
    }
    let o = hvgg(&["synth", "--config", &bad]);
    assert!(stderr(&o).contains("config line 1"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "manifest = nowhere.csv\n");
    let o = hvgg(&["patch", "--config", &cfg]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
    let o = hvgg(&["evaluate", "--config", &cfg]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let missing = dir.path().join("absent.cfg").display().to_string();
    assert_eq!(code(&hvgg(&["synth", "--config", &missing])), 2);
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "synth_samples = 4\nfilter = false\nruns = 1\nepochs = 3\nlr = 1:1e12\n");
    for stage in ["synth", "patch", "filter", "normalize"] {
        let o = hvgg(&[stage, "--config", &cfg]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let o = hvgg(&["train", "--config", &cfg, "--model", "hier"]);
    assert_eq!(code(&o), 3, "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn full_chain_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "synth_samples = 8\ncae_epochs = 1\nruns = 2\nepochs = 2\n");
    let mut hashes = Vec::new();
    for args in [
        &["synth", "--config", &cfg][..],
        &["patch", "--config", &cfg],
        &["filter", "--config", &cfg],
        &["normalize", "--config", &cfg],
        &["train", "--config", &cfg, "--model", "flat"],
        &["train", "--model", "hier", "--config", &cfg],
        &["evaluate", "--config", &cfg],
    ] {
        let o = hvgg(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        let out = stdout(&o);
        hashes.push(out.lines().next().unwrap().to_string());
        if args[0] == "evaluate" {
            assert!(out.contains("VGGNet") && out.contains("H-VGGNet"), "{out}");
            assert!(out.contains("cross-coarse mass hier - flat:"), "{out}");
        }
    }
    assert!(hashes.iter().all(|h| h == &hashes[0] && h.starts_with("config hash ")));
    let out = dir.path().join("out");
    for f in ["metrics.csv", "metrics.json", "cross_coarse.json", "confusion_flat.csv", "confusion_hier.csv"] {
        assert!(out.join("evaluate").join(f).exists(), "{f}");
    }

    let o = hvgg(&["synth", "--config", &cfg, "--seed", "7"]);
    assert_eq!(code(&o), 0);
    assert_ne!(stdout(&o).lines().next().unwrap(), hashes[0]);
}
