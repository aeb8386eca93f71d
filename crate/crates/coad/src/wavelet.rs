//! Single-level 2-D Haar discrete wavelet transform.
//!
//! The transform uses the orthonormal convention: each disjoint 2x2 pixel
//! block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2      HH = (a - b - c + d) / 2
//! ```
//!
//! so the transform is exactly invertible and preserves energy (the sum of
//! squares over all four subbands equals the sum of squares of the input).
//! HL carries horizontal detail (row filter high-pass), LH vertical detail.

use ndarray::Array2;

use crate::error::{Error, Result};

/// One image channel: a 2-D grid of intensities, typically in `[0, 1]`.
///
/// The grid must have even, positive dimensions; there is no implicit
/// padding for odd sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageChannel {
    pixels: Array2<f64>,
}

impl ImageChannel {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "image channel dimensions must be even and positive, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("image channel contains non-finite values"));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// The four level-1 Haar subbands of a channel, each of shape `(H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletComponents {
    pub ll: Array2<f64>,
    pub hl: Array2<f64>,
    pub lh: Array2<f64>,
    pub hh: Array2<f64>,
}

impl WaveletComponents {
    pub fn new(ll: Array2<f64>, hl: Array2<f64>, lh: Array2<f64>, hh: Array2<f64>) -> Result<Self> {
        let shape = ll.dim();
        for (name, band) in [("HL", &hl), ("LH", &lh), ("HH", &hh)] {
            if band.dim() != shape {
                return Err(Error::shape(format!(
                    "subband {name} has shape {:?}, expected {:?}",
                    band.dim(),
                    shape
                )));
            }
        }
        Ok(Self { ll, hl, lh, hh })
    }

    /// Subband shape `(H/2, W/2)`.
    pub fn dim(&self) -> (usize, usize) {
        self.ll.dim()
    }
}

/// Forward single-level Haar transform.
pub fn dwt2_haar(channel: &ImageChannel) -> WaveletComponents {
    let (h, w) = channel.pixels.dim();
    let (hh2, wh2) = (h / 2, w / 2);
    let mut ll = Array2::zeros((hh2, wh2));
    let mut hl = Array2::zeros((hh2, wh2));
    let mut lh = Array2::zeros((hh2, wh2));
    let mut hh = Array2::zeros((hh2, wh2));
    let px = &channel.pixels;
    for i in 0..hh2 {
        for j in 0..wh2 {
            let a = px[[2 * i, 2 * j]];
            let b = px[[2 * i, 2 * j + 1]];
            let c = px[[2 * i + 1, 2 * j]];
            let d = px[[2 * i + 1, 2 * j + 1]];
            ll[[i, j]] = (a + b + c + d) / 2.0;
            hl[[i, j]] = (a - b + c - d) / 2.0;
            lh[[i, j]] = (a + b - c - d) / 2.0;
            hh[[i, j]] = (a - b - c + d) / 2.0;
        }
    }
    // Constructor invariants hold by construction.
    WaveletComponents { ll, hl, lh, hh }
}

/// Inverse single-level Haar transform; exact inverse of [`dwt2_haar`] up to
/// floating-point rounding. Output shape is `(2h, 2w)` for subbands `(h, w)`.
pub fn idwt2_haar(components: &WaveletComponents) -> Result<ImageChannel> {
    let shape = components.ll.dim();
    for (name, band) in [
        ("HL", &components.hl),
        ("LH", &components.lh),
        ("HH", &components.hh),
    ] {
        if band.dim() != shape {
            return Err(Error::shape(format!(
                "subband {name} has shape {:?}, expected {:?}",
                band.dim(),
                shape
            )));
        }
    }
    let (hh2, wh2) = shape;
    if hh2 == 0 || wh2 == 0 {
        return Err(Error::shape("subbands must be non-empty"));
    }
    let mut pixels = Array2::zeros((hh2 * 2, wh2 * 2));
    for i in 0..hh2 {
        for j in 0..wh2 {
            let ll = components.ll[[i, j]];
            let hl = components.hl[[i, j]];
            let lh = components.lh[[i, j]];
            let hh = components.hh[[i, j]];
            pixels[[2 * i, 2 * j]] = (ll + hl + lh + hh) / 2.0;
            pixels[[2 * i, 2 * j + 1]] = (ll - hl + lh - hh) / 2.0;
            pixels[[2 * i + 1, 2 * j]] = (ll + hl - lh - hh) / 2.0;
            pixels[[2 * i + 1, 2 * j + 1]] = (ll - hl - lh + hh) / 2.0;
        }
    }
    Ok(ImageChannel { pixels })
}
