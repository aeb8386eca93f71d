//! Cut a whole shelf-row photo into per-object crops from bounding boxes.
//! Boxes are ordered left-to-right by x-center, so crop index = shelf
//! position regardless of the order boxes arrive in.
//!
//! ```sh
//! cargo run --example shelf_layout
//! ```

use coad::eval::{crop_row, BoundingBox};
use coad::object_image::ObjectImage;
use ndarray::Array3;

fn main() -> coad::error::Result<()> {
    // A 48×144 "shelf photo": three product slots painted side by side.
    let colors = [[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8]];
    let shelf = ObjectImage::new(Array3::from_shape_fn((3, 48, 144), |(c, _, x)| {
        colors[(x / 48).min(2)][c] as f32
    }))?;

    // Boxes given out of order on purpose; crop_row sorts by x-center.
    let boxes = vec![
        BoundingBox { x: 96.0, y: 0.0, w: 48.0, h: 48.0 }, // right slot
        BoundingBox { x: 0.0, y: 0.0, w: 48.0, h: 48.0 },  // left slot
        BoundingBox { x: 48.0, y: 0.0, w: 48.0, h: 48.0 }, // middle slot
    ];

    let crops = crop_row(&shelf, &boxes, 32)?;
    println!("{} crops, each {}x{}", crops.len(), crops[0].height(), crops[0].width());
    for (i, crop) in crops.iter().enumerate() {
        let px = crop.pixels();
        let mean = |c: usize| {
            px.index_axis(ndarray::Axis(0), c).iter().sum::<f32>() / (32.0 * 32.0)
        };
        println!("  crop {i}: mean RGB ({:.2}, {:.2}, {:.2})", mean(0), mean(1), mean(2));
    }
    println!("left-to-right order recovered: red, green, blue");
    Ok(())
}
