//! The generic pretrained-backbone baseline: frozen conv features plus the
//! same outlier detectors, for comparing against the trained Co-AD models.
//!
//! ```sh
//! cargo run --example pretrained_baseline
//! ```

use coad::detector::{detect_features, Method};
use coad::eval::{write_synthetic_backbone, PretrainedBackbone};
use coad::object_image::ObjectImage;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/baseline");
    std::fs::create_dir_all(out).map_err(|e| coad::error::Error::io(out, e))?;

    // Ship-with-the-repo stand-in for a real pretrained asset: random frozen
    // conv stack written as safetensors. Swap in an exported real backbone
    // by pointing `PretrainedBackbone::load` at its file.
    let asset = out.join("backbone.safetensors");
    write_synthetic_backbone(&asset, 0)?;
    let backbone = PretrainedBackbone::load(&asset, 64)?;
    println!(
        "backbone: {}-dim features at input {} from {}",
        backbone.feature_dim(),
        backbone.input_size(),
        asset.display()
    );

    let mut row: Vec<ObjectImage> = (0..6)
        .map(|_| ObjectImage::solid([0.75, 0.65, 0.2], 48, 48))
        .collect::<Result<_, _>>()?;
    row[2] = ObjectImage::solid([0.2, 0.2, 0.8], 48, 48)?;

    let features = backbone.features(&row)?;
    println!("features: {} x {} dims", features.len(), features[0].len());
    for method in [Method::Boxplot, Method::Cluster] {
        let verdict = detect_features(&features, method)?;
        println!("{method}: flagged={} index={:?}", verdict.flagged, verdict.anomaly_index);
    }
    Ok(())
}
