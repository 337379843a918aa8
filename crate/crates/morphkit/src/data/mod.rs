//! Dataset construction: IDX digit ingestion, the colored-digits protocol
//! with a tunable spurious color/label correlation, a synthetic
//! shape-on-texture subgroup dataset, background-swap evaluation sets, and
//! triplet minibatch sampling.
//!
//! All generators are pure functions of their seed, so identical seeds
//! reproduce identical datasets byte for byte.

pub mod idx;
pub mod persist;
pub mod synth;

use crate::error::{Error, Result};
use crate::rng::{labels, Rng};
use crate::tensor::Tensor;

/// An image dataset with labels and optional subgroup/foreground metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// `[N,H,W,C]`, values in `[0,1]`.
    pub images: Tensor,
    /// `[N]`, values in `[0, num_classes)`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Optional subgroup ids in `[0, num_groups)` (class x spurious attribute).
    pub groups: Option<Vec<usize>>,
    pub num_groups: usize,
    /// Optional foreground mask `[N,H,W,1]` with entries in {0,1}
    /// (1 = foreground pixel kept from the source image).
    pub fg_mask: Option<Tensor>,
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let b = LabeledBatch { images, labels, num_classes, groups: None, num_groups: 0, fg_mask: None };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)` of one sample.
    pub fn sample_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch images must be [N,H,W,C], got {s:?}")));
        }
        if s[0] != self.labels.len() {
            return Err(Error::data(format!(
                "batch has {} images but {} labels",
                s[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if let Some(groups) = &self.groups {
            if groups.len() != self.labels.len() {
                return Err(Error::data("group ids must cover every sample"));
            }
            if let Some(&bad) = groups.iter().find(|&&g| g >= self.num_groups) {
                return Err(Error::data(format!(
                    "group {bad} out of range for {} groups",
                    self.num_groups
                )));
            }
        }
        if let Some(m) = &self.fg_mask {
            if m.shape() != [s[0], s[1], s[2], 1] {
                return Err(Error::shape(format!(
                    "foreground mask must be [N,H,W,1] matching images, got {:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies the given samples (in order, repeats allowed) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let (h, w, c) = self.sample_dims();
        let per = h * w * c;
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = self.groups.as_ref().map(|_| Vec::with_capacity(indices.len()));
        let mut fg = self.fg_mask.as_ref().map(|_| Vec::with_capacity(indices.len() * h * w));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!("index {i} out of range for batch of {}", self.len())));
            }
            images.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
            if let (Some(out), Some(src)) = (groups.as_mut(), self.groups.as_ref()) {
                out.push(src[i]);
            }
            if let (Some(out), Some(src)) = (fg.as_mut(), self.fg_mask.as_ref()) {
                out.extend_from_slice(&src.data()[i * h * w..(i + 1) * h * w]);
            }
        }
        Ok(LabeledBatch {
            images: Tensor::new(vec![indices.len(), h, w, c], images)?,
            labels,
            num_classes: self.num_classes,
            groups,
            num_groups: self.num_groups,
            fg_mask: match fg {
                Some(d) => Some(Tensor::new(vec![indices.len(), h, w, 1], d)?),
                None => None,
            },
        })
    }

    /// Indices of each class, in sample order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![vec![]; self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

// ---- colored digits -------------------------------------------------------------

/// Which split's coloring rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Background-coloring protocol parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ColorConfig {
    /// Percentage (0-100) of each binary group that keeps its
    /// test-consistent background color in the train split.
    pub alpha: f64,
    /// Test-consistent background for binary label 0 (yellow).
    pub color_a: [f64; 3],
    /// Test-consistent background for binary label 1 (blue).
    pub color_b: [f64; 3],
    /// Pixels with source intensity below this are background.
    pub foreground_threshold: f64,
}

impl ColorConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let cfg = ColorConfig { alpha, ..ColorConfig::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha is a percentage in [0,100], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.foreground_threshold) {
            return Err(Error::config(format!(
                "foreground threshold must lie in [0,1], got {}",
                self.foreground_threshold
            )));
        }
        Ok(())
    }

    /// Test-consistent background for a binary label.
    pub fn consistent_color(&self, binary_label: usize) -> [f64; 3] {
        if binary_label == 0 {
            self.color_a
        } else {
            self.color_b
        }
    }

    /// Color index (0 = `color_a`, 1 = `color_b`) nearest to an RGB mean.
    pub fn nearest_color(&self, rgb: [f64; 3]) -> usize {
        let d = |c: [f64; 3]| -> f64 {
            (0..3).map(|i| (rgb[i] - c[i]) * (rgb[i] - c[i])).sum()
        };
        usize::from(d(self.color_b) < d(self.color_a))
    }
}

impl Default for ColorConfig {
    fn default() -> Self {
        ColorConfig {
            alpha: 0.5,
            color_a: [1.0, 1.0, 0.0],
            color_b: [0.0, 0.0, 1.0],
            foreground_threshold: 0.2,
        }
    }
}

/// Paints digit backgrounds with label-correlated colors.
///
/// Digits 0-4 become binary label 0 (test-consistent color `color_a`,
/// yellow), digits 5-9 label 1 (`color_b`, blue). In the train split exactly
/// `round(alpha/100 * n_g)` samples of each binary group keep the
/// test-consistent color and the rest get the opposite one; the test split
/// is colored deterministically (label 0 yellow, label 1 blue). Background
/// pixels (source intensity below the threshold) are replaced by the color;
/// foreground pixels replicate the source intensity over all three channels.
/// Group ids record (binary label, color): `group = 2 * label + color`.
pub fn colorize(
    batch: &LabeledBatch,
    cfg: &ColorConfig,
    split: Split,
    seed: u64,
) -> Result<LabeledBatch> {
    cfg.validate()?;
    batch.validate()?;
    let (h, w, c) = batch.sample_dims();
    if c != 1 {
        return Err(Error::data(format!("colorize expects grayscale input, got {c} channels")));
    }
    if batch.num_classes != 10 {
        return Err(Error::data(format!(
            "colorize expects digit labels 0-9, got {} classes",
            batch.num_classes
        )));
    }
    let n = batch.len();
    let binary: Vec<usize> = batch.labels.iter().map(|&d| usize::from(d >= 5)).collect();

    // color_of[i] in {0 = color_a, 1 = color_b}.
    let mut color_of = vec![0usize; n];
    match split {
        Split::Test => {
            for i in 0..n {
                color_of[i] = binary[i];
            }
        }
        Split::Train => {
            let mut rng = Rng::new(seed).derive(labels::COLOR_ASSIGN);
            for g in 0..2usize {
                let members: Vec<usize> = (0..n).filter(|&i| binary[i] == g).collect();
                let keep = ((cfg.alpha / 100.0) * members.len() as f64).round() as usize;
                let order = rng.permutation(members.len());
                for (rank, &slot) in order.iter().enumerate() {
                    let i = members[slot];
                    // First `keep` drawn members stay test-consistent.
                    color_of[i] = if rank < keep { g } else { 1 - g };
                }
            }
        }
    }

    let per = h * w;
    let mut images = vec![0.0; n * per * 3];
    let mut fg = vec![0.0; n * per];
    let src = batch.images.data();
    for i in 0..n {
        let color = if color_of[i] == 0 { cfg.color_a } else { cfg.color_b };
        for p in 0..per {
            let v = src[i * per + p];
            let out = &mut images[(i * per + p) * 3..(i * per + p) * 3 + 3];
            if v < cfg.foreground_threshold {
                out.copy_from_slice(&color);
            } else {
                out.fill(v);
                fg[i * per + p] = 1.0;
            }
        }
    }
    let groups: Vec<usize> = (0..n).map(|i| 2 * binary[i] + color_of[i]).collect();
    Ok(LabeledBatch {
        images: Tensor::new(vec![n, h, w, 3], images)?,
        labels: binary,
        num_classes: 2,
        groups: Some(groups),
        num_groups: 4,
        fg_mask: Some(Tensor::new(vec![n, h, w, 1], fg)?),
    })
}

// ---- synthetic subgroup dataset ---------------------------------------------------

/// Generates the shape-on-texture subgroup dataset.
///
/// Each 28x28x3 sample is a striped background with a filled shape on top:
/// class 0 draws a square, class 1 a circle; spurious attribute 0 uses
/// horizontal stripes, attribute 1 vertical. The attribute agrees with the
/// class with probability `rho`. Groups record `2 * class + attribute`.
///
/// Deterministic rasterizer (per sample, drawn from the seeded stream in
/// this order: class, attribute agreement, stripe phase, dx, dy, size):
/// * stripes: intensity 0.75 where `((coord + phase) / 4) % 2 == 0` else
///   0.25, with `coord` = row for horizontal, column for vertical stripes,
///   `phase` in 0..8, on all three channels;
/// * shape: intensity 1.0 on all channels at pixels `(r, q)` with
///   `max(|r - cy|, |q - cx|) <= s` (square) or
///   `(r - cy)^2 + (q - cx)^2 <= s^2` (circle), where `cy = 14 + dy`,
///   `cx = 14 + dx`, `dx, dy` in -3..=3 and `s` in {5, 6, 7}.
pub fn synth_subgroups(n: usize, rho: f64, seed: u64) -> Result<LabeledBatch> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("rho must lie in [0,1], got {rho}")));
    }
    let (h, w) = (28usize, 28usize);
    let mut rng = Rng::new(seed).derive(labels::DATA_TRAIN);
    let mut images = vec![0.0; n * h * w * 3];
    let mut labels_v = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.below(2);
        let agrees = rng.next_f64() < rho;
        let attr = if agrees { class } else { 1 - class };
        let phase = rng.below(8);
        let dx = rng.below(7) as isize - 3;
        let dy = rng.below(7) as isize - 3;
        let s = (5 + rng.below(3)) as isize;
        let (cy, cx) = (14 + dy, 14 + dx);
        let img = &mut images[i * h * w * 3..(i + 1) * h * w * 3];
        for r in 0..h {
            for q in 0..w {
                let coord = if attr == 0 { r } else { q };
                let stripe = if ((coord + phase) / 4) % 2 == 0 { 0.75 } else { 0.25 };
                let (ddy, ddx) = (r as isize - cy, q as isize - cx);
                let inside = if class == 0 {
                    ddy.abs().max(ddx.abs()) <= s
                } else {
                    ddy * ddy + ddx * ddx <= s * s
                };
                let v = if inside { 1.0 } else { stripe };
                img[(r * w + q) * 3..(r * w + q) * 3 + 3].fill(v);
            }
        }
        labels_v.push(class);
        groups.push(2 * class + attr);
    }
    Ok(LabeledBatch {
        images: Tensor::new(vec![n, h, w, 3], images)?,
        labels: labels_v,
        num_classes: 2,
        groups: Some(groups),
        num_groups: 4,
        fg_mask: None,
    })
}

// ---- background swap evaluation ---------------------------------------------------

/// Background assignment for [`background_swap_eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapMode {
    /// Repaint every background with the sample's class-consistent color.
    Same,
    /// Repaint every background with a uniformly random color.
    Random,
}

/// Rebuilds a colored batch with swapped backgrounds (labels unchanged,
/// groups re-derived from the new colors). Requires the foreground masks
/// recorded by [`colorize`].
pub fn background_swap_eval(
    batch: &LabeledBatch,
    cfg: &ColorConfig,
    mode: SwapMode,
    seed: u64,
) -> Result<LabeledBatch> {
    batch.validate()?;
    let fg = batch
        .fg_mask
        .as_ref()
        .ok_or_else(|| Error::data("background swap needs recorded foreground masks"))?;
    let (h, w, c) = batch.sample_dims();
    if c != 3 {
        return Err(Error::data(format!("background swap expects RGB input, got {c} channels")));
    }
    let n = batch.len();
    let mut rng = Rng::new(seed).derive(labels::BACKGROUND_SWAP);
    let mut images = batch.images.data().to_vec();
    let mut groups = Vec::with_capacity(n);
    let per = h * w;
    for i in 0..n {
        let color_idx = match mode {
            SwapMode::Same => batch.labels[i],
            SwapMode::Random => rng.below(2),
        };
        let color = if color_idx == 0 { cfg.color_a } else { cfg.color_b };
        for p in 0..per {
            if fg.data()[i * per + p] == 0.0 {
                images[(i * per + p) * 3..(i * per + p) * 3 + 3].copy_from_slice(&color);
            }
        }
        groups.push(2 * batch.labels[i] + color_idx);
    }
    Ok(LabeledBatch {
        images: Tensor::new(vec![n, h, w, 3], images)?,
        labels: batch.labels.clone(),
        num_classes: batch.num_classes,
        groups: Some(groups),
        num_groups: 4,
        fg_mask: Some(fg.clone()),
    })
}

// ---- triplet sampling -------------------------------------------------------------

/// Index-level plan for one epoch of triplet minibatches: `anchors[i]` pairs
/// with every combination of `positives[i]` x `negatives[i]`.
#[derive(Debug, Clone)]
pub struct TripletIndices {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl TripletIndices {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Materialized triplet minibatch; rows enumerate (anchor, positive,
/// negative) pairings, so one anchor with `k_pos * k_neg` pairings spans
/// that many rows and a plain batch mean averages over pairings.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub negatives: Tensor,
    /// Anchor label per row.
    pub labels: Vec<usize>,
    /// Distinct anchors represented in this batch.
    pub num_anchors: usize,
}

/// Draws `n` anchors without replacement, then `k_pos` same-class positives
/// (never the anchor itself) and `k_neg` different-class negatives per
/// anchor, each uniformly at random.
///
/// Errors if any class present has fewer than 2 samples, fewer than 2
/// classes are present, or `n` exceeds the pool.
pub fn sample_triplet_indices(
    pool: &LabeledBatch,
    n: usize,
    k_pos: usize,
    k_neg: usize,
    rng: &mut Rng,
) -> Result<TripletIndices> {
    if k_pos == 0 || k_neg == 0 {
        return Err(Error::config("need at least one positive and one negative per anchor"));
    }
    if n > pool.len() {
        return Err(Error::data(format!(
            "cannot draw {n} anchors without replacement from {} samples",
            pool.len()
        )));
    }
    let by_class = pool.class_indices();
    let occupied: Vec<usize> =
        (0..pool.num_classes).filter(|&cl| !by_class[cl].is_empty()).collect();
    if occupied.len() < 2 {
        return Err(Error::data("triplet sampling needs at least two classes present"));
    }
    for &cl in &occupied {
        if by_class[cl].len() < 2 {
            return Err(Error::data(format!(
                "class {cl} has {} sample(s); triplet sampling needs at least 2 per class",
                by_class[cl].len()
            )));
        }
    }
    let others: Vec<Vec<usize>> = (0..pool.num_classes)
        .map(|cl| {
            (0..pool.len()).filter(|&i| pool.labels[i] != cl).collect()
        })
        .collect();

    let perm = rng.permutation(pool.len());
    let anchors: Vec<usize> = perm[..n].to_vec();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for &a in &anchors {
        let cl = pool.labels[a];
        let same = &by_class[cl];
        let mut pos = Vec::with_capacity(k_pos);
        for _ in 0..k_pos {
            // Uniform over the class excluding the anchor: draw from a
            // virtual list with the anchor's slot removed.
            let j = rng.below(same.len() - 1);
            let pick = same[j];
            pos.push(if pick == a { same[same.len() - 1] } else { pick });
        }
        let diff = &others[cl];
        let neg: Vec<usize> = (0..k_neg).map(|_| diff[rng.below(diff.len())]).collect();
        positives.push(pos);
        negatives.push(neg);
    }
    Ok(TripletIndices { anchors, positives, negatives })
}

/// Materializes the pairing rows for anchors `range` of an epoch plan.
pub fn gather_triplets(
    pool: &LabeledBatch,
    plan: &TripletIndices,
    range: std::ops::Range<usize>,
) -> Result<TripletBatch> {
    if range.end > plan.len() || range.start >= range.end {
        return Err(Error::data(format!(
            "anchor range {range:?} out of bounds for plan of {}",
            plan.len()
        )));
    }
    let mut ai = vec![];
    let mut pi = vec![];
    let mut ni = vec![];
    let mut labels_v = vec![];
    for idx in range.clone() {
        let a = plan.anchors[idx];
        for &p in &plan.positives[idx] {
            for &ng in &plan.negatives[idx] {
                ai.push(a);
                pi.push(p);
                ni.push(ng);
                labels_v.push(pool.labels[a]);
            }
        }
    }
    Ok(TripletBatch {
        anchors: pool.select(&ai)?.images,
        positives: pool.select(&pi)?.images,
        negatives: pool.select(&ni)?.images,
        labels: labels_v,
        num_anchors: range.len(),
    })
}

// ---- color-threshold probe --------------------------------------------------------

/// The trivial color-only classifier: each background color predicts the
/// label that is in the majority for that color in the fitting split.
#[derive(Debug, Clone, Copy)]
pub struct ColorProbe {
    /// Predicted label when the background is nearest `color_a` / `color_b`.
    pub label_of_color: [usize; 2],
}

/// Mean background RGB of one sample (requires the foreground mask).
fn background_rgb(batch: &LabeledBatch, fg: &Tensor, i: usize) -> [f64; 3] {
    let (h, w, _) = batch.sample_dims();
    let per = h * w;
    let mut acc = [0.0; 3];
    let mut count = 0.0;
    for p in 0..per {
        if fg.data()[i * per + p] == 0.0 {
            for ch in 0..3 {
                acc[ch] += batch.images.data()[(i * per + p) * 3 + ch];
            }
            count += 1.0;
        }
    }
    if count > 0.0 {
        for a in &mut acc {
            *a /= count;
        }
    }
    acc
}

/// Fits the color probe on a colored batch by majority vote per color.
pub fn fit_color_probe(train: &LabeledBatch, cfg: &ColorConfig) -> Result<ColorProbe> {
    let fg = train
        .fg_mask
        .as_ref()
        .ok_or_else(|| Error::data("color probe needs foreground masks"))?;
    // votes[color][label]
    let mut votes = [[0usize; 2]; 2];
    for i in 0..train.len() {
        let color = cfg.nearest_color(background_rgb(train, fg, i));
        let label = train.labels[i].min(1);
        votes[color][label] += 1;
    }
    Ok(ColorProbe {
        label_of_color: [
            usize::from(votes[0][1] > votes[0][0]),
            usize::from(votes[1][1] > votes[1][0]),
        ],
    })
}

/// Accuracy of a fitted color probe on a colored batch.
pub fn color_probe_accuracy(
    probe: &ColorProbe,
    batch: &LabeledBatch,
    cfg: &ColorConfig,
) -> Result<f64> {
    let fg = batch
        .fg_mask
        .as_ref()
        .ok_or_else(|| Error::data("color probe needs foreground masks"))?;
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let color = cfg.nearest_color(background_rgb(batch, fg, i));
        if probe.label_of_color[color] == batch.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synthetic_digits;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Grayscale digit batch with exactly `per_digit` samples per digit.
    fn uniform_digit_batch(per_digit: usize) -> LabeledBatch {
        let n = per_digit * 10;
        let (h, w) = (8, 8);
        let mut images = vec![0.0; n * h * w];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let d = i % 10;
            labels.push(d);
            // A small foreground blob whose extent varies with the digit.
            for r in 2..(3 + d % 4) {
                for q in 2..6 {
                    images[(i * h + r) * w + q] = 0.9;
                }
            }
        }
        LabeledBatch::new(Tensor::new(vec![n, h, w, 1], images).unwrap(), labels, 10).unwrap()
    }

    #[test]
    fn colorize_assigns_exact_counts_and_groups() {
        let base = uniform_digit_batch(200); // 1000 per binary group
        let cfg = ColorConfig::new(2.0).unwrap();
        let out = colorize(&base, &cfg, Split::Train, 7).unwrap();
        out.validate().unwrap();
        assert_eq!(out.num_classes, 2);
        let groups = out.groups.as_ref().unwrap();
        // group = 2*label + color; test-consistent means color == label.
        let consistent0 = groups.iter().filter(|&&g| g == 0).count();
        let consistent1 = groups.iter().filter(|&&g| g == 3).count();
        assert_eq!(consistent0, 20, "round(2% of 1000) group-0 samples keep yellow");
        assert_eq!(consistent1, 20, "round(2% of 1000) group-1 samples keep blue");
        assert_eq!(groups.iter().filter(|&&g| g == 1).count(), 980);
        assert_eq!(groups.iter().filter(|&&g| g == 2).count(), 980);
    }

    #[test]
    fn colorize_protocol_limits() {
        let base = uniform_digit_batch(20);
        for (alpha, expect_consistent) in [(100.0, true), (0.0, false)] {
            let cfg = ColorConfig::new(alpha).unwrap();
            let out = colorize(&base, &cfg, Split::Train, 3).unwrap();
            for (i, &g) in out.groups.as_ref().unwrap().iter().enumerate() {
                let label = out.labels[i];
                let color = g - 2 * label;
                assert_eq!(color == label, expect_consistent, "alpha {alpha}, sample {i}");
            }
        }
    }

    #[test]
    fn colorize_test_split_is_deterministic_and_consistent() {
        let base = uniform_digit_batch(10);
        let cfg = ColorConfig::default();
        let out = colorize(&base, &cfg, Split::Test, 1).unwrap();
        let again = colorize(&base, &cfg, Split::Test, 999).unwrap();
        assert_eq!(out.images.data(), again.images.data(), "test coloring ignores the seed");
        for (i, &g) in out.groups.as_ref().unwrap().iter().enumerate() {
            assert_eq!(g, 3 * out.labels[i], "label 0 -> group 0, label 1 -> group 3");
        }
        // Spot-check pixels: background of a label-0 sample is yellow.
        let (h, w, _) = out.sample_dims();
        let i0 = out.labels.iter().position(|&l| l == 0).unwrap();
        let px = &out.images.data()[i0 * h * w * 3..i0 * h * w * 3 + 3];
        assert_eq!(px, &[1.0, 1.0, 0.0], "corner pixel is background, painted yellow");
    }

    #[test]
    fn colorize_same_seed_reproduces_assignment() {
        let base = uniform_digit_batch(50);
        let cfg = ColorConfig::new(30.0).unwrap();
        let a = colorize(&base, &cfg, Split::Train, 42).unwrap();
        let b = colorize(&base, &cfg, Split::Train, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.groups, b.groups);
        let c = colorize(&base, &cfg, Split::Train, 43).unwrap();
        assert_ne!(a.groups, c.groups, "different seed reassigns colors");
    }

    #[test]
    fn colorize_keeps_foreground_and_masks_it() {
        let base = uniform_digit_batch(5);
        let cfg = ColorConfig::default();
        let out = colorize(&base, &cfg, Split::Test, 0).unwrap();
        let (h, w, _) = out.sample_dims();
        let fg = out.fg_mask.as_ref().unwrap();
        let mut fg_count = 0;
        for i in 0..out.len() {
            for p in 0..h * w {
                let src = base.images.data()[i * h * w + p];
                let rgb = &out.images.data()[(i * h * w + p) * 3..(i * h * w + p) * 3 + 3];
                if src >= cfg.foreground_threshold {
                    assert_eq!(fg.data()[i * h * w + p], 1.0);
                    assert_eq!(rgb, &[src, src, src], "foreground replicated over channels");
                    fg_count += 1;
                } else {
                    assert_eq!(fg.data()[i * h * w + p], 0.0);
                }
            }
        }
        assert!(fg_count > 0, "fixture must contain foreground pixels");
    }

    #[test]
    fn colorize_rejects_bad_inputs() {
        let base = uniform_digit_batch(2);
        assert!(ColorConfig::new(-0.1).is_err());
        assert!(ColorConfig::new(100.1).is_err());
        let rgb = colorize(&base, &ColorConfig::default(), Split::Test, 0).unwrap();
        let err = colorize(&rgb, &ColorConfig::default(), Split::Test, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn synth_subgroups_respects_rho_limits_and_balance() {
        let all_agree = synth_subgroups(300, 1.0, 5).unwrap();
        for (i, &g) in all_agree.groups.as_ref().unwrap().iter().enumerate() {
            let class = all_agree.labels[i];
            assert_eq!(g, 2 * class + class, "rho = 1 puts every class on its own texture");
        }
        let n = 4000;
        let balanced = synth_subgroups(n, 0.5, 9).unwrap();
        let mut counts = [0usize; 4];
        for &g in balanced.groups.as_ref().unwrap() {
            counts[g] += 1;
        }
        // Each group is Binomial(n, 1/4); 3 sigma ~ 82 for n = 4000.
        let sigma3 = 3.0 * (n as f64 * 0.25 * 0.75).sqrt();
        for (g, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 / 4.0).abs();
            assert!(dev <= sigma3, "group {g} count {c} deviates {dev} > {sigma3}");
        }
    }

    // Independent rasterizer oracle: rebuild one sample with explicit region
    // fills (stripes written row-by-row, shape filled from its bounding box)
    // and compare pixel-for-pixel with the generator's predicate form.
    #[test]
    fn synth_subgroups_matches_reference_rasterizer() {
        let n = 6;
        let batch = synth_subgroups(n, 0.7, 123).unwrap();
        let mut rng = Rng::new(123).derive(labels::DATA_TRAIN);
        let (h, w) = (28usize, 28usize);
        for i in 0..n {
            let class = rng.below(2);
            let agrees = rng.next_f64() < 0.7;
            let attr = if agrees { class } else { 1 - class };
            let phase = rng.below(8);
            let dx = rng.below(7) as isize - 3;
            let dy = rng.below(7) as isize - 3;
            let s = (5 + rng.below(3)) as isize;
            assert_eq!(batch.labels[i], class);
            assert_eq!(batch.groups.as_ref().unwrap()[i], 2 * class + attr);

            let mut want = vec![0.0f64; h * w];
            for r in 0..h {
                for q in 0..w {
                    let coord = if attr == 0 { r } else { q };
                    want[r * w + q] = if ((coord + phase) / 4) % 2 == 0 { 0.75 } else { 0.25 };
                }
            }
            let (cy, cx) = (14 + dy, 14 + dx);
            for r in (cy - s).max(0)..=(cy + s).min(h as isize - 1) {
                for q in (cx - s).max(0)..=(cx + s).min(w as isize - 1) {
                    let keep = if class == 0 {
                        true // whole bounding box for the square
                    } else {
                        (r - cy) * (r - cy) + (q - cx) * (q - cx) <= s * s
                    };
                    if keep {
                        want[(r * w as isize + q) as usize] = 1.0;
                    }
                }
            }
            for p in 0..h * w {
                for ch in 0..3 {
                    assert_eq!(
                        batch.images.data()[(i * h * w + p) * 3 + ch],
                        want[p],
                        "sample {i} pixel {p} channel {ch}"
                    );
                }
            }
        }
    }

    #[test]
    fn background_swap_same_mode_is_identity_on_test_split() {
        let base = uniform_digit_batch(10);
        let cfg = ColorConfig::default();
        let test = colorize(&base, &cfg, Split::Test, 0).unwrap();
        let same = background_swap_eval(&test, &cfg, SwapMode::Same, 77).unwrap();
        assert_eq!(same.images.data(), test.images.data());
        assert_eq!(same.groups, test.groups);
    }

    #[test]
    fn background_swap_random_mode_reassigns_and_reproduces() {
        let base = uniform_digit_batch(100); // 1000 samples
        let cfg = ColorConfig::default();
        let test = colorize(&base, &cfg, Split::Test, 0).unwrap();
        let a = background_swap_eval(&test, &cfg, SwapMode::Random, 5).unwrap();
        let b = background_swap_eval(&test, &cfg, SwapMode::Random, 5).unwrap();
        assert_eq!(a.images.data(), b.images.data(), "fixed seed reproduces the assignment");
        let c = background_swap_eval(&test, &cfg, SwapMode::Random, 6).unwrap();
        assert_ne!(a.groups, c.groups);
        let n = test.len();
        let inconsistent = a
            .groups
            .as_ref()
            .unwrap()
            .iter()
            .zip(&a.labels)
            .filter(|(&g, &l)| g != 3 * l)
            .count();
        // Binomial(n, 1/2): 3 sigma ~ 47 at n = 1000.
        let dev = (inconsistent as f64 - n as f64 / 2.0).abs();
        assert!(dev <= 3.0 * (n as f64 * 0.25).sqrt(), "{inconsistent} of {n}");
        assert_eq!(a.labels, test.labels, "labels never change");
    }

    #[test]
    fn background_swap_requires_masks() {
        let mut batch = synth_subgroups(4, 0.5, 1).unwrap();
        batch.fg_mask = None;
        let err =
            background_swap_eval(&batch, &ColorConfig::default(), SwapMode::Random, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn triplet_sampling_draws_anchors_without_replacement() {
        let base = uniform_digit_batch(6);
        let cfg = ColorConfig::default();
        let pool = colorize(&base, &cfg, Split::Train, 1).unwrap();
        let mut rng = Rng::new(2).derive(labels::TRIPLETS);
        let plan = sample_triplet_indices(&pool, pool.len(), 1, 1, &mut rng).unwrap();
        let mut seen = plan.anchors.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), pool.len(), "every sample anchors exactly once per epoch");
        assert!(sample_triplet_indices(&pool, pool.len() + 1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn triplet_sampling_rejects_thin_classes() {
        let images = Tensor::zeros(&[3, 4, 4, 1]);
        let pool = LabeledBatch::new(images, vec![0, 0, 1], 2).unwrap();
        let mut rng = Rng::new(1);
        let err = sample_triplet_indices(&pool, 2, 1, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "class with one sample must be rejected");
        let single = LabeledBatch::new(Tensor::zeros(&[2, 4, 4, 1]), vec![0, 0], 2).unwrap();
        assert!(sample_triplet_indices(&single, 1, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn gather_triplets_expands_pairings() {
        let base = uniform_digit_batch(4);
        let pool = colorize(&base, &ColorConfig::default(), Split::Train, 3).unwrap();
        let mut rng = Rng::new(8).derive(labels::TRIPLETS);
        let plan = sample_triplet_indices(&pool, 10, 3, 2, &mut rng).unwrap();
        let batch = gather_triplets(&pool, &plan, 2..5).unwrap();
        assert_eq!(batch.num_anchors, 3);
        assert_eq!(batch.labels.len(), 3 * 3 * 2, "3 anchors x 3 positives x 2 negatives");
        let (h, w, c) = pool.sample_dims();
        assert_eq!(batch.anchors.shape(), &[18, h, w, c]);
        assert_eq!(batch.positives.shape(), &[18, h, w, c]);
        assert_eq!(batch.negatives.shape(), &[18, h, w, c]);
        assert!(gather_triplets(&pool, &plan, 9..11).is_err());
    }

    #[test]
    fn synthetic_digit_triplets_satisfy_constraints_in_bulk() {
        let digits = synthetic_digits(200, 11).unwrap();
        let pool = colorize(&digits, &ColorConfig::default(), Split::Train, 11).unwrap();
        let by_class = pool.class_indices();
        let mut rng = Rng::new(13).derive(labels::TRIPLETS);
        let mut checked = 0usize;
        for round in 0..50 {
            let mut r = rng.derive2(labels::EPOCH, round);
            let plan = sample_triplet_indices(&pool, 200, 2, 1, &mut r).unwrap();
            for i in 0..plan.len() {
                let a = plan.anchors[i];
                for &p in &plan.positives[i] {
                    assert_eq!(pool.labels[p], pool.labels[a], "positive label must match");
                    assert_ne!(p, a, "anchor must not be its own positive");
                }
                for &ng in &plan.negatives[i] {
                    assert_ne!(pool.labels[ng], pool.labels[a], "negative label must differ");
                }
                checked += 1;
            }
        }
        assert!(checked >= 10_000, "constraint check covered {checked} triplets");
        assert!(by_class.iter().all(|c| c.len() >= 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn triplet_constraints_hold_for_arbitrary_pools(
            seed in 0u64..1_000_000,
            class_counts in proptest::collection::vec(2usize..12, 2..5),
            k_pos in 1usize..4,
            k_neg in 1usize..4,
        ) {
            let n: usize = class_counts.iter().sum();
            let mut labels_v = vec![];
            for (cl, &count) in class_counts.iter().enumerate() {
                labels_v.extend(std::iter::repeat_n(cl, count));
            }
            let pool = LabeledBatch::new(
                Tensor::zeros(&[n, 2, 2, 1]),
                labels_v,
                class_counts.len(),
            ).unwrap();
            let mut rng = Rng::new(seed).derive(labels::TRIPLETS);
            let draw = (n / 2).max(1);
            let plan = sample_triplet_indices(&pool, draw, k_pos, k_neg, &mut rng).unwrap();
            prop_assert_eq!(plan.len(), draw);
            let mut seen = plan.anchors.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), draw);
            for i in 0..plan.len() {
                let a = plan.anchors[i];
                prop_assert_eq!(plan.positives[i].len(), k_pos);
                prop_assert_eq!(plan.negatives[i].len(), k_neg);
                for &p in &plan.positives[i] {
                    prop_assert_eq!(pool.labels[p], pool.labels[a]);
                    prop_assert_ne!(p, a);
                }
                for &ng in &plan.negatives[i] {
                    prop_assert_ne!(pool.labels[ng], pool.labels[a]);
                }
            }
        }
    }

    #[test]
    fn color_probe_exploits_training_correlation_and_fails_on_test() {
        let digits = synthetic_digits(1000, 21).unwrap();
        let cfg = ColorConfig::new(0.5).unwrap();
        let train = colorize(&digits, &cfg, Split::Train, 21).unwrap();
        let test_digits = synthetic_digits(400, 22).unwrap();
        let test = colorize(&test_digits, &cfg, Split::Test, 22).unwrap();
        let probe = fit_color_probe(&train, &cfg).unwrap();
        let train_acc = color_probe_accuracy(&probe, &train, &cfg).unwrap();
        let test_acc = color_probe_accuracy(&probe, &test, &cfg).unwrap();
        assert!(train_acc >= 0.98, "color probe train accuracy {train_acc} < 0.98");
        assert!(test_acc <= 0.02, "color probe test accuracy {test_acc} > 0.02");
    }

    #[test]
    fn select_copies_samples_with_metadata() {
        let base = uniform_digit_batch(3);
        let colored = colorize(&base, &ColorConfig::default(), Split::Test, 0).unwrap();
        let picked = colored.select(&[4, 4, 0]).unwrap();
        assert_eq!(picked.len(), 3);
        assert_eq!(picked.labels[0], colored.labels[4]);
        assert_eq!(picked.labels[2], colored.labels[0]);
        let (h, w, c) = colored.sample_dims();
        let per = h * w * c;
        assert_eq!(
            &picked.images.data()[..per],
            &colored.images.data()[4 * per..5 * per]
        );
        assert_eq!(picked.groups.as_ref().unwrap()[1], colored.groups.as_ref().unwrap()[4]);
        assert!(colored.select(&[30]).is_err());
    }
}
