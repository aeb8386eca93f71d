//! Single-level 2-D Haar transform: decompose a channel into LL/HL/LH/HH,
//! inspect subband energies, and reconstruct it exactly.
//!
//! ```sh
//! cargo run --example dwt_roundtrip
//! ```

use coad::wavelet::{dwt2_haar, idwt2_haar, ImageChannel};
use ndarray::Array2;

fn main() -> coad::error::Result<()> {
    // A 16×16 channel with smooth horizontal shading plus a sharp vertical
    // edge, so both low- and high-frequency subbands have something to say.
    let channel = ImageChannel::new(Array2::from_shape_fn((16, 16), |(y, x)| {
        let shade = x as f64 / 15.0;
        let edge = if y >= 9 { 0.5 } else { 0.0 };
        shade * 0.4 + edge
    }))?;

    let bands = dwt2_haar(&channel);
    println!("input:  16x16, subbands: {:?}", bands.ll.dim());

    let energy = |name: &str, band: &Array2<f64>| {
        let e: f64 = band.iter().map(|v| v * v).sum();
        println!("  {name}: energy {e:10.4}");
        e
    };
    let total_in: f64 = channel.pixels().iter().map(|v| v * v).sum();
    let total_out = energy("LL", &bands.ll)
        + energy("HL", &bands.hl)
        + energy("LH", &bands.lh)
        + energy("HH", &bands.hh);
    println!("energy in {total_in:.6} / out {total_out:.6} (orthonormal: preserved)");

    let restored = idwt2_haar(&bands)?;
    let max_err = channel
        .pixels()
        .iter()
        .zip(restored.pixels())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("round-trip max abs error: {max_err:.3e}");
    assert!(max_err < 1e-12);
    Ok(())
}
