//! Detect the odd object in a shelf row without any planogram: embed each
//! crop, compare pairwise distances, flag what sits beyond the boxplot fence.
//!
//! ```sh
//! cargo run --example detect_row
//! ```

use coad::detector::{detect, Method};
use coad::embed::FeatureSelection;
use coad::eval::{generate_synthetic, SyntheticConfig};
use coad::model::{train, TrainConfig, TrainOptions, Variant};
use coad::object_image::ObjectImage;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/detect-row");
    // Quick toy model; a real deployment loads a trained checkpoint instead.
    let data = generate_synthetic(
        out.join("data"),
        &SyntheticConfig { classes: 4, per_class: 8, image_size: 32, seed: 3 },
    )?;
    let images: Vec<ObjectImage> = data
        .records()
        .iter()
        .map(|r| data.load_image(&r.id))
        .collect::<coad::error::Result<_>>()?;
    let config = TrainConfig {
        variant: Variant::VitCmDwt,
        epochs: 1,
        lr: 1e-3,
        batch_size: 8,
        seed: 0,
        input_size: 32,
        m: 8,
        heads: 1,
        ff_width: 32,
    };
    let (model, _) = train(&images, &config, &TrainOptions { out_dir: None, checkpoint_interval: None, log: false })?;

    // A row of one product with a wrong-color intruder at position 3.
    let mut row: Vec<ObjectImage> = (0..8)
        .map(|_| ObjectImage::solid([0.85, 0.2, 0.15], 32, 32))
        .collect::<Result<_, _>>()?;
    row[3] = ObjectImage::solid([0.15, 0.3, 0.9], 32, 32)?;

    for selection in [FeatureSelection::Color, FeatureSelection::Content, FeatureSelection::Both] {
        let verdict = detect(&row, &model, selection, Method::Boxplot)?;
        println!(
            "{selection:?}: flagged={} index={:?}",
            verdict.flagged, verdict.anomaly_index
        );
    }

    let mut verdict = detect(&row, &model, FeatureSelection::Color, Method::Cluster)?;
    verdict.row_id = Some("aisle-4-row-2".into());
    println!("cluster verdict JSON:\n{}", verdict.to_json()?);
    Ok(())
}
