//! Row-wise crop ingestion from a shelf image plus externally supplied
//! bounding boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::object_image::ObjectImage;

/// Axis-aligned box in pixel coordinates, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn x_center(&self) -> f64 {
        self.x + self.w / 2.0
    }

    /// Pixel rectangle `(x, y, w, h)` after rounding and bounds checking.
    fn pixel_rect(&self, img_w: usize, img_h: usize) -> Result<(usize, usize, usize, usize)> {
        for v in [self.x, self.y, self.w, self.h] {
            if !v.is_finite() {
                return Err(Error::data(format!("non-finite bounding box {self:?}")));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::shape(format!("degenerate bounding box {self:?}")));
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err(Error::shape(format!("bounding box {self:?} extends before the origin")));
        }
        let x = self.x.round() as usize;
        let y = self.y.round() as usize;
        let w = (self.w.round() as usize).max(1);
        let h = (self.h.round() as usize).max(1);
        if x + w > img_w || y + h > img_h {
            return Err(Error::shape(format!(
                "bounding box {self:?} exceeds image bounds {img_w}×{img_h}"
            )));
        }
        Ok((x, y, w, h))
    }

    /// The sub-image this box selects, at its natural size.
    pub fn crop_from(&self, image: &ObjectImage) -> Result<ObjectImage> {
        let (img_h, img_w) = image.dims();
        let (x, y, w, h) = self.pixel_rect(img_w, img_h)?;
        image.crop(x, y, w, h)
    }
}

/// Crops one shelf row. Boxes may arrive in any order; output crops are
/// sorted left-to-right by box x-center and resized to `target_size`.
/// Invalid boxes are reported with their input index.
pub fn crop_row(
    shelf: &ObjectImage,
    boxes: &[BoundingBox],
    target_size: usize,
) -> Result<Vec<ObjectImage>> {
    if boxes.is_empty() {
        return Err(Error::data("a row needs at least one bounding box"));
    }
    let (img_h, img_w) = shelf.dims();
    let mut rects = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let rect = b.pixel_rect(img_w, img_h).map_err(|e| e.at_crop(i))?;
        rects.push((b.x_center(), rect));
    }
    rects.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite centers"));
    rects
        .into_iter()
        .enumerate()
        .map(|(i, (_, (x, y, w, h)))| {
            shelf
                .crop(x, y, w, h)
                .and_then(|c| c.resize(target_size))
                .map_err(|e| e.at_crop(i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gradient_shelf(w: usize, h: usize) -> ObjectImage {
        ObjectImage::new(Array3::from_shape_fn((3, h, w), |(c, _, x)| {
            (x as f32 / w as f32 + c as f32 * 0.01).min(1.0)
        }))
        .unwrap()
    }

    #[test]
    fn crops_are_sorted_by_x_center_and_resized() {
        let shelf = gradient_shelf(96, 32);
        let boxes = vec![
            BoundingBox::from([64.0, 0.0, 32.0, 32.0]),
            BoundingBox::from([0.0, 0.0, 32.0, 32.0]),
            BoundingBox::from([32.0, 0.0, 32.0, 32.0]),
        ];
        let crops = crop_row(&shelf, &boxes, 16).unwrap();
        assert_eq!(crops.len(), 3);
        for c in &crops {
            assert_eq!(c.dims(), (16, 16));
        }
        // The shelf brightens along x, so sorted crops brighten monotonically.
        let mean = |img: &ObjectImage| {
            let p = img.pixels();
            p.iter().sum::<f32>() / p.len() as f32
        };
        assert!(mean(&crops[0]) < mean(&crops[1]));
        assert!(mean(&crops[1]) < mean(&crops[2]));
    }

    #[test]
    fn full_image_box_equals_resized_image() {
        let shelf = gradient_shelf(32, 32);
        let crops = crop_row(&shelf, &[BoundingBox::from([0.0, 0.0, 32.0, 32.0])], 32).unwrap();
        assert_eq!(crops[0].pixels(), shelf.pixels());
    }

    #[test]
    fn bad_boxes_carry_their_index() {
        let shelf = gradient_shelf(32, 32);
        let boxes = vec![
            BoundingBox::from([0.0, 0.0, 16.0, 16.0]),
            BoundingBox::from([20.0, 0.0, 16.0, 16.0]), // exceeds width
        ];
        let err = crop_row(&shelf, &boxes, 16).err().expect("out-of-bounds box");
        assert!(err.to_string().contains("crop 1"), "{err}");
        let degenerate = vec![BoundingBox::from([0.0, 0.0, 0.0, 4.0])];
        assert!(crop_row(&shelf, &degenerate, 16).is_err());
        assert!(crop_row(&shelf, &[], 16).is_err());
    }

    #[test]
    fn bbox_serde_roundtrip() {
        let b: BoundingBox = serde_json::from_str("[1.0,2.0,3.0,4.0]").unwrap();
        assert_eq!(b, BoundingBox { x: 1.0, y: 2.0, w: 3.0, h: 4.0 });
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
    }
}
