//! Generate the default synthetic corpus, train, fit thresholds and evaluate.
//! `cargo run --example end_to_end -- [epochs]`

use gzsl::dataset::{generate_synthetic, SyntheticSpec};
use gzsl::eval::{ablation_csv, ablation_rows, evaluate, summary, FIXED_THRESHOLDS};
use gzsl::model::{Model, ModelConfig};
use gzsl::trainer::{fit_thresholds, train, TrainConfig};

fn main() -> gzsl::error::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(10, |s| s.parse().expect("epochs must be a number"));
    let ds = generate_synthetic(&SyntheticSpec::default())?;
    let (train_view, test) = ds.split_views();
    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(ModelConfig::default(), config.seed)?;
    model.normalization = ds.manifest.normalization.clone();
    for e in train(&mut model, &train_view, &ds.table, &config)? {
        println!("epoch {:3}  loss {:.4}", e.epoch, e.total);
    }
    model.thresholds = Some(fit_thresholds(&model, &train_view, &ds.table, &config)?.thresholds);
    println!("{}", summary(&evaluate(&model, &test, &ds.table)?));
    let rows = ablation_rows(&model, None, &test, &ds.table, &FIXED_THRESHOLDS)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
