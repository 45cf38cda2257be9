#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn gzsl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gzsl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Runs a subcommand and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = gzsl(args, cwd);
    assert!(
        out.status.success(),
        "gzsl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A run small enough for a few seconds of training.
pub const SMALL_CONFIG: &str = r#"
[data]
seed = 5
seen_classes = 4
unseen_classes = 2
train_per_class = 10
test_per_class = 4
sequence_length = 20

[model]
hidden = 12
layers = 1
prototype_dim = 6
sae_hidden = 12

[train]
epochs = 4
learning_rate = 0.01
threshold_epochs = 200
"#;

/// Writes [`SMALL_CONFIG`] into `dir` and runs gen-data, train and eval there.
pub fn small_pipeline(dir: &Path) {
    std::fs::write(dir.join("run.toml"), SMALL_CONFIG).unwrap();
    ok(&["gen-data", "--config", "run.toml"], dir);
    ok(&["train", "--config", "run.toml"], dir);
    ok(&["eval", "--config", "run.toml"], dir);
}

/// `(header, rows)` of a small CSV file.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().unwrap_or_default();
    (header, lines.collect())
}

/// Value of `column` in the row whose first field is `key`.
pub fn csv_value(path: &Path, key: &str, column: &str) -> Option<f64> {
    let (header, rows) = read_csv(path);
    let col = header.iter().position(|h| h == column)?;
    rows.iter().find(|r| r[0] == key)?.get(col)?.parse().ok()
}
