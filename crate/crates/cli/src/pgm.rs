//! 8-bit binary PGM (P5) previews of SoS maps.

use ndarray::Array2;

/// Half-width of the display window around `c0`, m/s.
pub const WINDOW_HALF_WIDTH: f64 = 25.0;

/// Maps `[c0 − 25, c0 + 25]` m/s linearly onto `0..=255`; `c0` lands on 128.
pub fn gray_level(c: f64, c0: f64) -> u8 {
    let lo = c0 - WINDOW_HALF_WIDTH;
    let v = (c - lo) / (2.0 * WINDOW_HALF_WIDTH) * 255.0;
    v.round().clamp(0.0, 255.0) as u8
}

pub fn encode(sos: &Array2<f64>, c0: f64) -> Vec<u8> {
    let (nz, nx) = sos.dim();
    let mut out = format!("P5\n{nx} {nz}\n255\n").into_bytes();
    out.extend(sos.iter().map(|&c| gray_level(c, c0)));
    out
}
