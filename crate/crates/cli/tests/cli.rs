mod common;

use common::{csv_value, gzsl, ok, read_csv, small_pipeline};

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"],
        &["train", "--epochs", "many"],
        &["train", "--precision", "f16"],
        &[],
    ] {
        let out = gzsl(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = gzsl(&["eval", "--checkpoint", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = gzsl(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = gzsl(&["train", "--learning-rate=-1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&["--help"], dir.path());
    for cmd in [
        "gen-data",
        "train",
        "fit-thresholds",
        "eval",
        "ablate",
        "sweep-beta",
    ] {
        assert!(help.contains(cmd), "{cmd}");
    }
}

#[test]
fn generator_flags_shape_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-data",
            "--seed",
            "3",
            "--classes-seen",
            "3",
            "--classes-unseen",
            "2",
            "--train-per-class",
            "4",
            "--test-per-class",
            "2",
            "--noise",
            "0.1",
            "--sequence-length",
            "10",
            "--out-dir",
            "d",
        ],
        dir.path(),
    );
    let manifest = std::fs::read_to_string(dir.path().join("d/manifest.json")).unwrap();
    assert!(manifest.contains("\"train\": 12"), "{manifest}");
    assert!(manifest.contains("\"test\": 10"), "{manifest}");
}

#[test]
fn full_command_set_on_a_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    // flags override the file
    ok(
        &[
            "train",
            "--config",
            "run.toml",
            "--epochs",
            "3",
            "--out-dir",
            "o3",
            "--checkpoint",
            "m3.json",
        ],
        d,
    );
    assert_eq!(read_csv(&d.join("o3/history.csv")).1.len(), 3);
    assert_eq!(read_csv(&d.join("out/history.csv")).1.len(), 4);

    for f in ["report.csv", "confusion.csv", "summary.txt"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let acc = csv_value(&d.join("out/report.csv"), "end_to_end", "acc_s").unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(
        &[
            "fit-thresholds",
            "--config",
            "run.toml",
            "--beta",
            "1000",
            "--output",
            "refit.json",
        ],
        d,
    );
    let a = std::fs::read_to_string(d.join("model.json")).unwrap();
    let b = std::fs::read_to_string(d.join("refit.json")).unwrap();
    assert_ne!(a, b);

    ok(&["sweep-beta", "--config", "run.toml"], d);
    let (header, rows) = read_csv(&d.join("out/sweep.csv"));
    assert_eq!(header, ["beta", "ar", "rr"]);
    assert_eq!(rows.len(), 6);
    ok(
        &[
            "sweep-beta",
            "--config",
            "run.toml",
            "--values",
            "1,0.1",
            "--out-dir",
            "s2",
        ],
        d,
    );
    assert_eq!(read_csv(&d.join("s2/sweep.csv")).1.len(), 2);

    ok(&["ablate", "--config", "run.toml", "--epochs", "2"], d);
    let (_, rows) = read_csv(&d.join("out/ablation.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names.first(), Some(&"sae_only"));
    assert!(names.contains(&"two_stage"));
    assert_eq!(names.last(), Some(&"end_to_end"));
    assert!(d.join("out/two_stage.json").exists());
}

#[test]
fn training_is_reproducible_in_f64() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), common::SMALL_CONFIG).unwrap();
        ok(&["gen-data", "--config", "run.toml"], dir.path());
        ok(
            &[
                "train",
                "--config",
                "run.toml",
                "--precision",
                "f64",
                "--epochs",
                "2",
            ],
            dir.path(),
        );
        std::fs::read(dir.path().join("model.json")).unwrap()
    };
    assert_eq!(run(), run());
}
