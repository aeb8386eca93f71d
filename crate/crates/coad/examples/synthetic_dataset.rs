//! Generate the bundled synthetic colored-shapes dataset: isoluminant class
//! colors (hue varies, perceived brightness stays flat) over cycling shapes,
//! written as PNGs plus a JSON-lines manifest.
//!
//! ```sh
//! cargo run --example synthetic_dataset
//! ```

use coad::eval::synthetic::{class_descriptor, color_dominated_pairs, generate};
use coad::eval::SyntheticConfig;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/synthetic");
    let config = SyntheticConfig { classes: 6, per_class: 8, image_size: 64, seed: 42 };
    let index = generate(out, &config)?;

    println!("wrote {} images under {}", index.records().len(), out.display());
    println!("classes:");
    for (class, label) in index.classes().iter().enumerate() {
        let (shape, hue) = class_descriptor(class, config.classes);
        println!("  {label}: {shape:?} at hue {hue:.0}°, {} members", index.class_members(label).len());
    }

    // Pairs that differ only in hue — the sets where grayscale content
    // features are blind and color features must carry the detection.
    println!("color-dominated class pairs (same shape, different hue):");
    for (a, b) in color_dominated_pairs(config.classes) {
        println!("  class{a:02} vs class{b:02}");
    }

    let first = &index.records()[0];
    println!("first record: id={} path={} label={}", first.id, first.path, first.label);
    Ok(())
}
