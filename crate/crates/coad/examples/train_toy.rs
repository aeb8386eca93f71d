//! Train a small ViT-CM-DWT on a toy synthetic set and watch the two-phase
//! loss fall. The alternation is: a modulated step (RGB loss, content blocks
//! detached) then a content step (grayscale loss, color path untouched).
//!
//! ```sh
//! cargo run --example train_toy
//! ```

use coad::eval::{generate_synthetic, SyntheticConfig};
use coad::model::{train, TrainConfig, TrainOptions, Variant};
use coad::object_image::ObjectImage;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/train-toy");
    let data = generate_synthetic(
        out.join("data"),
        &SyntheticConfig { classes: 4, per_class: 10, image_size: 32, seed: 1 },
    )?;
    let images: Vec<ObjectImage> = data
        .records()
        .iter()
        .map(|r| data.load_image(&r.id))
        .collect::<coad::error::Result<_>>()?;

    let config = TrainConfig {
        variant: Variant::VitCmDwt,
        epochs: 3,
        lr: 1e-3,
        batch_size: 8,
        seed: 0,
        input_size: 32,
        m: 16,
        heads: 2,
        ff_width: 64,
    };
    let opts = TrainOptions {
        out_dir: Some(out.join("run")),
        checkpoint_interval: None,
        log: false,
    };
    println!("training {} on {} images ...", config.variant, images.len());
    let (model, report) = train(&images, &config, &opts)?;

    // history: one record per optimizer step, phases interleaved.
    let show = |label: &str, records: &[coad::model::LossRecord]| {
        for r in records {
            println!("  {label} step {:3} epoch {:2} {:9} loss {:.5}", r.step, r.epoch, r.phase.as_str(), r.loss);
        }
    };
    show("first", &report.history[..4.min(report.history.len())]);
    println!("  ...");
    show("last ", &report.history[report.history.len().saturating_sub(4)..]);

    let first: f64 = report.history[..2].iter().map(|r| r.loss).sum();
    let last: f64 = report.history[report.history.len() - 2..].iter().map(|r| r.loss).sum();
    println!("loss sum first two steps {first:.5} -> last two steps {last:.5}");

    if let Some(path) = &report.final_checkpoint {
        println!("checkpoint: {}", path.display());
        println!("model variant {}, {} parameter tensors", model.variant(), model.named_parameters().len());
    }
    Ok(())
}
