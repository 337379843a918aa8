//! Differentiable structural-similarity maps and the multi-scale score.
//!
//! Local statistics are taken under a separable Gaussian window (valid
//! extent, so maps shrink by `window - 1` per axis). Per-window luminance,
//! contrast, and structure maps follow the classical form with stability
//! constants; the multi-scale score pools 2x between scales, averages each
//! map to a per-scale scalar, and multiplies `l` from the coarsest scale with
//! `c·s` from every scale, yielding one score per sample. Everything here
//! records onto a [`Tape`], so the score is differentiable w.r.t. both
//! images.
//!
//! [`reference`] holds a non-differentiable brute-force oracle used by tests.

pub mod reference;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Value};

/// Tiny constant added under the square root of `σx²·σy²`, so zero-variance
/// window pairs produce finite values and gradients instead of 0/0. Small
/// enough (√ε = 1e-15) that scores move by < 1e-11 — far inside every
/// tolerance used here. The reference oracle uses the same constant.
pub const SQRT_VARIANCE_EPS: f64 = 1e-30;

/// Window, scale count, and stability constants for SSIM evaluation.
#[derive(Debug, Clone)]
pub struct SsimConfig {
    /// Odd window side length, in pixels.
    pub window_size: usize,
    /// Gaussian window sigma, in pixels.
    pub sigma: f64,
    /// Number of dyadic scales (1 = single-scale).
    pub scales: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Value range of the images (1.0 for [0, 1] data).
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    /// Defaults tuned for 28x28 inputs: 7x7 window, sigma 1.5, 3 scales,
    /// standard constants for range [0, 1].
    fn default() -> Self {
        SsimConfig::new(7, 1.5, 3, 1.0).expect("default config is valid")
    }
}

impl SsimConfig {
    /// Build a config with the standard constants `C1 = (0.01·L)²`,
    /// `C2 = (0.03·L)²`, `C3 = C2/2`.
    pub fn new(window_size: usize, sigma: f64, scales: usize, dynamic_range: f64) -> Result<Self> {
        let c1 = (0.01 * dynamic_range).powi(2);
        let c2 = (0.03 * dynamic_range).powi(2);
        let cfg = SsimConfig {
            window_size,
            sigma,
            scales,
            c1,
            c2,
            c3: c2 / 2.0,
            dynamic_range,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `scales` overridden, everything else default.
    pub fn with_scales(scales: usize) -> Result<Self> {
        SsimConfig::new(7, 1.5, scales, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::config(format!(
                "ssim window must be odd and >= 1, got {}",
                self.window_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("ssim sigma must be > 0, got {}", self.sigma)));
        }
        if self.scales == 0 {
            return Err(Error::config("ssim needs at least one scale".to_string()));
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 || self.c3 <= 0.0 {
            return Err(Error::config("ssim stability constants must be > 0".to_string()));
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::config("ssim dynamic range must be > 0".to_string()));
        }
        Ok(())
    }

    /// Largest odd window that fits `h x w` images at the coarsest of
    /// `scales` dyadic levels (the rule behind the 7-pixel default for
    /// 28x28 at 3 scales).
    pub fn fitted_window(h: usize, w: usize, scales: usize) -> usize {
        let (mut sh, mut sw) = (h, w);
        for _ in 1..scales {
            sh /= 2;
            sw /= 2;
        }
        let m = sh.min(sw).max(1);
        if m % 2 == 0 {
            m - 1
        } else {
            m
        }
    }

    /// Maximum scale count this window supports on `h x w` images.
    pub fn max_feasible_scales(&self, h: usize, w: usize) -> usize {
        let (mut sh, mut sw) = (h, w);
        let mut m = 0;
        loop {
            if sh < self.window_size || sw < self.window_size {
                return m;
            }
            m += 1;
            sh /= 2;
            sw /= 2;
        }
    }
}

/// Normalized 1-D Gaussian taps of odd length.
pub fn gaussian_taps(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::config(format!("gaussian window size must be odd and >= 1, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let half = (size / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

/// Normalized 2-D Gaussian window (row-major `size x size`), the outer
/// product of [`gaussian_taps`] with itself.
pub fn gaussian_window(size: usize, sigma: f64) -> Result<Vec<f64>> {
    let taps = gaussian_taps(size, sigma)?;
    let mut out = Vec::with_capacity(size * size);
    for &a in &taps {
        for &b in &taps {
            out.push(a * b);
        }
    }
    Ok(out)
}

/// Per-window local statistics of two image batches (valid extent).
pub struct SsimStats {
    pub mu_x: Value,
    pub mu_y: Value,
    /// Window variance of x, clamped to be nonnegative.
    pub var_x: Value,
    pub var_y: Value,
    /// Window covariance (unclamped).
    pub cov: Value,
}

/// Per-window luminance / contrast / structure maps, shaped
/// `[N, H-window+1, W-window+1, C]`.
pub struct SsimComponents {
    pub l: Value,
    pub c: Value,
    pub s: Value,
}

fn check_pair(tape: &Tape, x: Value, y: Value, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    let (sx, sy) = (tape.value(x).shape(), tape.value(y).shape());
    if sx != sy {
        return Err(Error::shape(format!("ssim operands differ in shape: {sx:?} vs {sy:?}")));
    }
    if sx.len() != 4 {
        return Err(Error::shape(format!("ssim expects NHWC batches, got {sx:?}")));
    }
    if sx[1] < cfg.window_size || sx[2] < cfg.window_size {
        return Err(Error::shape(format!(
            "image {}x{} smaller than ssim window {}",
            sx[1], sx[2], cfg.window_size
        )));
    }
    Ok(())
}

/// Gaussian-window means, variances, and covariance of a batch pair.
pub fn ssim_stats(tape: &mut Tape, x: Value, y: Value, cfg: &SsimConfig) -> Result<SsimStats> {
    check_pair(tape, x, y, cfg)?;
    let taps = gaussian_taps(cfg.window_size, cfg.sigma)?;
    let mu_x = tape.blur_hw(x, &taps)?;
    let mu_y = tape.blur_hw(y, &taps)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.blur_hw(xx, &taps)?;
    let e_yy = tape.blur_hw(yy, &taps)?;
    let e_xy = tape.blur_hw(xy, &taps)?;
    let mu_x2 = tape.mul(mu_x, mu_x)?;
    let mu_y2 = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let raw_vx = tape.sub(e_xx, mu_x2)?;
    let raw_vy = tape.sub(e_yy, mu_y2)?;
    // float rounding can push a constant window's variance a hair negative;
    // clamp (gradient is 0 on the clamped side)
    let var_x = tape.relu(raw_vx);
    let var_y = tape.relu(raw_vy);
    let cov = tape.sub(e_xy, mu_xy)?;
    Ok(SsimStats { mu_x, mu_y, var_x, var_y, cov })
}

/// Luminance, contrast, and structure maps per window location and channel.
pub fn ssim_components(
    tape: &mut Tape,
    x: Value,
    y: Value,
    cfg: &SsimConfig,
) -> Result<SsimComponents> {
    let st = ssim_stats(tape, x, y, cfg)?;
    // l = (2 μx μy + C1) / (μx² + μy² + C1)
    let mu_xy = tape.mul(st.mu_x, st.mu_y)?;
    let l_num = tape.affine(mu_xy, 2.0, cfg.c1);
    let mu_x2 = tape.mul(st.mu_x, st.mu_x)?;
    let mu_y2 = tape.mul(st.mu_y, st.mu_y)?;
    let mu_sq = tape.add(mu_x2, mu_y2)?;
    let l_den = tape.add_scalar(mu_sq, cfg.c1);
    let l = tape.div(l_num, l_den)?;
    // σx σy = sqrt(σx² σy² + ε)
    let var_prod = tape.mul(st.var_x, st.var_y)?;
    let var_prod_eps = tape.add_scalar(var_prod, SQRT_VARIANCE_EPS);
    let sig_xy = tape.sqrt(var_prod_eps);
    // c = (2 σx σy + C2) / (σx² + σy² + C2)
    let c_num = tape.affine(sig_xy, 2.0, cfg.c2);
    let var_sum = tape.add(st.var_x, st.var_y)?;
    let c_den = tape.add_scalar(var_sum, cfg.c2);
    let c = tape.div(c_num, c_den)?;
    // s = (σxy + C3) / (σx σy + C3)
    let s_num = tape.add_scalar(st.cov, cfg.c3);
    let s_den = tape.add_scalar(sig_xy, cfg.c3);
    let s = tape.div(s_num, s_den)?;
    Ok(SsimComponents { l, c, s })
}

/// Multi-scale structural similarity, one score per sample (shape `[N]`).
///
/// Scale j+1 is a 2x mean-pool of scale j; per-scale `c·s` means enter the
/// product for every scale, and the luminance mean only at the coarsest.
pub fn ms_ssim(tape: &mut Tape, x: Value, y: Value, cfg: &SsimConfig) -> Result<Value> {
    check_pair(tape, x, y, cfg)?;
    let s = tape.value(x).shape();
    let (h, w) = (s[1], s[2]);
    let feasible = cfg.max_feasible_scales(h, w);
    if cfg.scales > feasible {
        return Err(Error::config(format!(
            "{h}x{w} images support at most {feasible} scale(s) with window {}, requested {}",
            cfg.window_size, cfg.scales
        )));
    }
    let (mut cx, mut cy) = (x, y);
    let mut score: Option<Value> = None;
    for scale in 1..=cfg.scales {
        let maps = ssim_components(tape, cx, cy, cfg)?;
        let c_mean = tape.reduce_mean(maps.c, &[1, 2, 3])?;
        let s_mean = tape.reduce_mean(maps.s, &[1, 2, 3])?;
        let cs = tape.mul(c_mean, s_mean)?;
        score = Some(match score {
            None => cs,
            Some(acc) => tape.mul(acc, cs)?,
        });
        if scale == cfg.scales {
            let l_mean = tape.reduce_mean(maps.l, &[1, 2, 3])?;
            score = Some(tape.mul(score.expect("set above"), l_mean)?);
        } else {
            cx = tape.avg_pool2(cx)?;
            cy = tape.avg_pool2(cy)?;
        }
    }
    Ok(score.expect("at least one scale"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn image(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64()).collect()).unwrap()
    }

    #[test]
    fn gaussian_window_size_one_is_identity() {
        assert_eq!(gaussian_window(1, 1.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn gaussian_window_normalizes() {
        for size in [1, 3, 7, 11] {
            let w = gaussian_window(size, 1.5).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "size {size}: sum {sum}");
        }
    }

    #[test]
    fn gaussian_window_matches_direct_formula() {
        let size = 3;
        let sigma = 1.5;
        let w = gaussian_window(size, sigma).unwrap();
        // independent oracle: evaluate exp(-(i²+j²)/(2σ²)) on the grid, then normalize
        let mut direct = Vec::new();
        for i in -1i32..=1 {
            for j in -1i32..=1 {
                direct.push((-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = direct.iter().sum();
        for (a, d) in w.iter().zip(&direct) {
            assert!((a - d / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_window_rejects_bad_sizes() {
        assert!(gaussian_window(0, 1.5).is_err());
        assert!(gaussian_window(4, 1.5).is_err());
        assert!(gaussian_window(3, 0.0).is_err());
    }

    #[test]
    fn fitted_window_shrinks_with_scales() {
        assert_eq!(SsimConfig::fitted_window(28, 28, 3), 7);
        assert_eq!(SsimConfig::fitted_window(28, 28, 1), 27);
        assert_eq!(SsimConfig::fitted_window(9, 30, 2), 3);
    }

    #[test]
    fn identity_pair_has_unit_maps() {
        let mut rng = Rng::new(31);
        let x = image(&[1, 12, 12, 2], &mut rng);
        let cfg = SsimConfig::new(7, 1.5, 1, 1.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let maps = ssim_components(&mut tape, xv, xv, &cfg).unwrap();
        for v in [maps.l, maps.c, maps.s] {
            for &e in tape.value(v).data() {
                assert!((e - 1.0).abs() < 1e-9, "map value {e}");
            }
        }
    }

    #[test]
    fn constant_pair_resolves_via_constants() {
        // x constant, y = L - x: zero variance everywhere; constants keep
        // c and s at exactly 1
        let x = Tensor::full(&[1, 8, 8, 1], 0.3);
        let y = Tensor::full(&[1, 8, 8, 1], 0.7);
        let cfg = SsimConfig::new(7, 1.5, 1, 1.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let maps = ssim_components(&mut tape, xv, yv, &cfg).unwrap();
        for &e in tape.value(maps.c).data() {
            assert!((e - 1.0).abs() < 1e-9, "c {e}");
        }
        for &e in tape.value(maps.s).data() {
            assert!((e - 1.0).abs() < 1e-9, "s {e}");
        }
        // luminance must reflect the mean mismatch
        for &e in tape.value(maps.l).data() {
            assert!(e < 1.0);
        }
    }

    #[test]
    fn component_maps_match_sliding_window_oracle() {
        let mut rng = Rng::new(32);
        let x = image(&[1, 16, 16, 1], &mut rng);
        let y = image(&[1, 16, 16, 1], &mut rng);
        let cfg = SsimConfig::new(7, 1.5, 1, 1.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let maps = ssim_components(&mut tape, xv, yv, &cfg).unwrap();
        let (ol, oc, os) = reference::ssim_maps(&x, &y, &cfg).unwrap();
        for (v, o) in [(maps.l, ol), (maps.c, oc), (maps.s, os)] {
            assert_eq!(tape.value(v).shape(), o.shape());
            for (a, b) in tape.value(v).data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stats_respect_cauchy_schwarz_and_clamping() {
        let mut rng = Rng::new(33);
        for _ in 0..5 {
            let x = image(&[1, 10, 10, 2], &mut rng);
            let y = image(&[1, 10, 10, 2], &mut rng);
            let cfg = SsimConfig::new(7, 1.5, 1, 1.0).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let st = ssim_stats(&mut tape, xv, yv, &cfg).unwrap();
            let vx = tape.value(st.var_x).data();
            let vy = tape.value(st.var_y).data();
            let cov = tape.value(st.cov).data();
            for i in 0..vx.len() {
                assert!(vx[i] >= 0.0);
                assert!(vy[i] >= 0.0);
                assert!(cov[i] * cov[i] <= vx[i] * vy[i] + 1e-9);
            }
        }
    }

    #[test]
    fn ms_ssim_self_score_is_one() {
        let mut rng = Rng::new(34);
        for scales in 1..=3 {
            let x = image(&[2, 28, 28, 3], &mut rng);
            let cfg = SsimConfig::with_scales(scales).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let v = ms_ssim(&mut tape, xv, xv, &cfg).unwrap();
            assert_eq!(tape.value(v).shape(), &[2]);
            for &e in tape.value(v).data() {
                assert!((e - 1.0).abs() < 1e-9, "self score {e}");
            }
        }
        // constant image: zero variance at every scale
        let x = Tensor::full(&[1, 28, 28, 3], 0.5);
        let cfg = SsimConfig::default();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let v = ms_ssim(&mut tape, xv, xv, &cfg).unwrap();
        assert!((tape.value(v).data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_is_symmetric() {
        let mut rng = Rng::new(35);
        let x = image(&[2, 28, 28, 3], &mut rng);
        let y = image(&[2, 28, 28, 3], &mut rng);
        let cfg = SsimConfig::default();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let a = ms_ssim(&mut tape, xv, yv, &cfg).unwrap();
        let b = ms_ssim(&mut tape, yv, xv, &cfg).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }

    #[test]
    fn ms_ssim_matches_composed_oracle() {
        let mut rng = Rng::new(36);
        for scales in 1..=3 {
            let x = image(&[1, 28, 28, 3], &mut rng);
            let y = image(&[1, 28, 28, 3], &mut rng);
            let cfg = SsimConfig::with_scales(scales).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let v = ms_ssim(&mut tape, xv, yv, &cfg).unwrap();
            let want = reference::ms_ssim(&x, &y, &cfg).unwrap();
            for (a, b) in tape.value(v).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-8, "scales {scales}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ms_ssim_scale_feasibility_boundary() {
        let mut rng = Rng::new(37);
        let x = image(&[1, 28, 28, 1], &mut rng);
        for scales in 1..=3 {
            let cfg = SsimConfig::with_scales(scales).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            assert!(ms_ssim(&mut tape, xv, xv, &cfg).is_ok(), "scales {scales} must fit");
        }
        let cfg = SsimConfig::with_scales(4).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let err = ms_ssim(&mut tape, xv, xv, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("at most 3"), "error must name the feasible count: {msg}");
    }

    #[test]
    fn single_pixel_perturbation_strictly_decreases_score() {
        let mut rng = Rng::new(38);
        let x = image(&[1, 28, 28, 3], &mut rng);
        let mut y = x.clone();
        y.data_mut()[5 * 28 * 3 + 7 * 3] += 0.2;
        let cfg = SsimConfig::default();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let v = ms_ssim(&mut tape, xv, yv, &cfg).unwrap();
        let score = tape.value(v).data()[0];
        assert!(score < 1.0 - 1e-6, "perturbed score {score}");
    }

    #[test]
    fn ms_ssim_stays_in_unit_interval() {
        let mut rng = Rng::new(39);
        for _ in 0..10 {
            let x = image(&[1, 14, 14, 2], &mut rng);
            let y = image(&[1, 14, 14, 2], &mut rng);
            let cfg = SsimConfig::new(7, 1.5, 2, 1.0).unwrap();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let v = ms_ssim(&mut tape, xv, yv, &cfg).unwrap();
            for &e in tape.value(v).data() {
                assert!((-1.0..=1.0).contains(&e), "score {e} out of range");
            }
        }
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_differences() {
        let mut rng = Rng::new(40);
        let x = image(&[1, 14, 14, 2], &mut rng);
        let y = image(&[1, 14, 14, 2], &mut rng);
        let cfg = SsimConfig::new(5, 1.5, 2, 1.0).unwrap();
        let r = gradcheck::check_default(
            "ms_ssim",
            |t, v| {
                let s = ms_ssim(t, v[0], v[1], &cfg)?;
                t.mean_all(s)
            },
            &[x, y],
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }
}
