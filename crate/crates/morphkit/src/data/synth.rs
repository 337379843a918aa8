//! Hermetic fallback digits: seven-segment glyphs with per-sample jitter,
//! so the full pipeline (coloring, training, evaluation) runs without any
//! external dataset files. Digits cycle 0-9 for exact class balance.

use crate::error::Result;
use crate::rng::{labels, Rng};
use crate::tensor::Tensor;

use super::LabeledBatch;

const SIDE: usize = 28;
/// Segment bit per digit, order A B C D E F G:
/// A top, B top-right, C bottom-right, D bottom, E bottom-left, F top-left,
/// G middle.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],    // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],   // 2
    [true, true, true, true, false, false, true],   // 3
    [false, true, true, false, false, true, true],  // 4
    [true, false, true, true, false, true, true],   // 5
    [true, false, true, true, true, true, true],    // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

/// Renders `n` grayscale 28x28 digit glyphs (labels cycle 0-9). Each glyph
/// is drawn with stroke thickness 3 in a 20x10 box, offset by per-sample
/// jitter (dy in -2..=2, dx in -3..=3) at a per-sample intensity in
/// [0.6, 1.0]; the background stays exactly 0.
pub fn synthetic_digits(n: usize, seed: u64) -> Result<LabeledBatch> {
    let mut rng = Rng::new(seed).derive(labels::DATA_TRAIN);
    let mut images = vec![0.0; n * SIDE * SIDE];
    let mut labels_v = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let dy = rng.below(5) as isize - 2;
        let dx = rng.below(7) as isize - 3;
        let intensity = rng.uniform(0.6, 1.0);
        draw_digit(&mut images[i * SIDE * SIDE..(i + 1) * SIDE * SIDE], digit, dy, dx, intensity);
        labels_v.push(digit);
    }
    LabeledBatch::new(Tensor::new(vec![n, SIDE, SIDE, 1], images)?, labels_v, 10)
}

/// Fills the seven-segment strokes of `digit` into a 28x28 plane.
fn draw_digit(img: &mut [f64], digit: usize, dy: isize, dx: isize, intensity: f64) {
    // Glyph box before jitter: rows 4..24, cols 9..19, stroke 3, midline 14.
    let (y0, y1, x0, x1, ym, t) = (
        4 + dy,
        24 + dy,
        9 + dx,
        19 + dx,
        14 + dy,
        3isize,
    );
    let mut fill = |r0: isize, r1: isize, c0: isize, c1: isize| {
        for r in r0.max(0)..r1.min(SIDE as isize) {
            for c in c0.max(0)..c1.min(SIDE as isize) {
                img[(r * SIDE as isize + c) as usize] = intensity;
            }
        }
    };
    let seg = SEGMENTS[digit];
    if seg[0] {
        fill(y0, y0 + t, x0, x1); // A: top bar
    }
    if seg[1] {
        fill(y0, ym, x1 - t, x1); // B: upper right
    }
    if seg[2] {
        fill(ym, y1, x1 - t, x1); // C: lower right
    }
    if seg[3] {
        fill(y1 - t, y1, x0, x1); // D: bottom bar
    }
    if seg[4] {
        fill(ym, y1, x0, x0 + t); // E: lower left
    }
    if seg[5] {
        fill(y0, ym, x0, x0 + t); // F: upper left
    }
    if seg[6] {
        fill(ym - 1, ym + t - 1, x0, x1); // G: middle bar
    }
}
