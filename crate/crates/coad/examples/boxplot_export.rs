//! Export boxplot raw data for a shelf row: per-object outlier scores with
//! quartiles and the Q3 + 1.5·IQR fence, as plot-ready JSON.
//!
//! ```sh
//! cargo run --example boxplot_export
//! ```

use coad::embed::FeatureSelection;
use coad::eval::{emit_boxplot_data, write_boxplot_json};
use coad::model::{Model, ModelConfig, Variant};
use coad::object_image::ObjectImage;
use candle_core::{DType, Device};

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/boxplot");
    std::fs::create_dir_all(out).map_err(|e| coad::error::Error::io(out, e))?;

    // Untrained toy model: scores are already meaningful because identical
    // objects collapse to identical embeddings regardless of training.
    let config = ModelConfig {
        variant: Variant::VitCmDwt,
        input_size: 32,
        patch_size: 16,
        concept_dim: 16,
        heads: 2,
        ff_width: 64,
    };
    let model = Model::new(config, 0, &Device::Cpu, DType::F32)?;

    let mut row: Vec<ObjectImage> = (0..7)
        .map(|_| ObjectImage::solid([0.2, 0.7, 0.3], 32, 32))
        .collect::<Result<_, _>>()?;
    row[5] = ObjectImage::solid([0.8, 0.2, 0.6], 32, 32)?;

    let series = emit_boxplot_data(
        &row,
        &model,
        &[FeatureSelection::Color, FeatureSelection::Content, FeatureSelection::Both],
    )?;
    for s in &series {
        println!(
            "{:>7}: q1 {:.4} q3 {:.4} fence {:.4} outliers {:?}",
            s.selection, s.q1, s.q3, s.fence, s.outliers
        );
        println!("         scores {:?}", s.scores.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }

    let path = out.join("boxplot.json");
    write_boxplot_json(&path, &series)?;
    println!("wrote {}", path.display());
    Ok(())
}
