//! Run the full evaluation harness: seeded sets with one planted anomaly
//! each, a model × feature-selection × method grid, and the CSV report.
//!
//! ```sh
//! cargo run --example evaluate_grid
//! ```

use coad::detector::Method;
use coad::embed::FeatureSelection;
use coad::eval::{
    build_eval_sets, evaluate, generate_synthetic, DummyDetector, ModelDetector, RowDetector,
    SyntheticConfig,
};
use coad::model::{train, TrainConfig, TrainOptions, Variant};
use coad::object_image::ObjectImage;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/evaluate-grid");
    let data = generate_synthetic(
        out.join("data"),
        &SyntheticConfig { classes: 4, per_class: 12, image_size: 32, seed: 5 },
    )?;
    let images: Vec<ObjectImage> = data
        .records()
        .iter()
        .map(|r| data.load_image(&r.id))
        .collect::<coad::error::Result<_>>()?;
    let config = TrainConfig {
        variant: Variant::VitCmDwt,
        epochs: 2,
        lr: 1e-3,
        batch_size: 8,
        seed: 0,
        input_size: 32,
        m: 16,
        heads: 2,
        ff_width: 64,
    };
    let (model, _) = train(&images, &config, &TrainOptions { out_dir: None, checkpoint_interval: None, log: false })?;

    // 12 sets of 5 objects (4 majority + 1 planted anomaly), seed 21.
    let sets = build_eval_sets(&data, 12, 4, 21)?;
    println!(
        "built {} sets; first set plants a {} among {}s at position {}",
        sets.len(),
        sets[0].anomaly_class,
        sets[0].majority_class,
        sets[0].anomaly_position
    );

    let grid: Vec<ModelDetector> = [
        (FeatureSelection::Color, Method::Boxplot),
        (FeatureSelection::Content, Method::Boxplot),
        (FeatureSelection::Both, Method::Boxplot),
        (FeatureSelection::Both, Method::Cluster),
    ]
    .into_iter()
    .map(|(sel, method)| ModelDetector::new(model.clone(), sel, method))
    .collect::<coad::error::Result<_>>()?;
    let dummy = DummyDetector { index: 0 };
    let mut detectors: Vec<&dyn RowDetector> = grid.iter().map(|d| d as &dyn RowDetector).collect();
    detectors.push(&dummy);

    let report = evaluate(&data, &sets, &detectors)?;
    print!("{}", report.to_csv_string());

    report.write_csv(out.join("report.csv"))?;
    report.write_trials_jsonl(out.join("trials.jsonl"))?;
    println!("report: {}", out.join("report.csv").display());
    println!("per-trial verdicts: {}", out.join("trials.jsonl").display());
    Ok(())
}
