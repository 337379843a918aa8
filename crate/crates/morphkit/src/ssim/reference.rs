//! Brute-force structural-similarity oracle.
//!
//! Everything here recomputes the maps with explicit per-window loops over a
//! 2-D Gaussian kernel — no separable passes, no tape — so tests can compare
//! the differentiable implementation against an independently structured
//! derivation of the same definitions (including the same stability
//! constants).

use super::{gaussian_window, SsimConfig, SQRT_VARIANCE_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<()> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "ssim operands differ in shape: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.rank() != 4 {
        return Err(Error::shape(format!("ssim expects NHWC batches, got {:?}", x.shape())));
    }
    if x.shape()[1] < cfg.window_size || x.shape()[2] < cfg.window_size {
        return Err(Error::shape(format!(
            "image {}x{} smaller than ssim window {}",
            x.shape()[1],
            x.shape()[2],
            cfg.window_size
        )));
    }
    Ok(())
}

/// Per-window `(l, c, s)` maps, each `[N, H-window+1, W-window+1, C]`,
/// computed by direct sliding-window summation.
pub fn ssim_maps(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<(Tensor, Tensor, Tensor)> {
    check_pair(x, y, cfg)?;
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let win = cfg.window_size;
    let kernel = gaussian_window(win, cfg.sigma)?;
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut l = Tensor::zeros(&[n, oh, ow, c]);
    let mut cc = Tensor::zeros(&[n, oh, ow, c]);
    let mut ss = Tensor::zeros(&[n, oh, ow, c]);
    let (xd, yd) = (x.data(), y.data());
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
                    for ky in 0..win {
                        for kx in 0..win {
                            let p = ((b * h + oy + ky) * w + ox + kx) * c + ch;
                            let wgt = kernel[ky * win + kx];
                            mx += wgt * xd[p];
                            my += wgt * yd[p];
                            exx += wgt * xd[p] * xd[p];
                            eyy += wgt * yd[p] * yd[p];
                            exy += wgt * xd[p] * yd[p];
                        }
                    }
                    let vx = (exx - mx * mx).max(0.0);
                    let vy = (eyy - my * my).max(0.0);
                    let cov = exy - mx * my;
                    let sig = (vx * vy + SQRT_VARIANCE_EPS).sqrt();
                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                    l.data_mut()[o] = (2.0 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1);
                    cc.data_mut()[o] = (2.0 * sig + cfg.c2) / (vx + vy + cfg.c2);
                    ss.data_mut()[o] = (cov + cfg.c3) / (sig + cfg.c3);
                }
            }
        }
    }
    Ok((l, cc, ss))
}

fn avg_pool2_plain(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += t.data()[((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch];
                        }
                    }
                    out.data_mut()[((b * oh + i) * ow + j) * c + ch] = acc / 4.0;
                }
            }
        }
    }
    out
}

fn mean_of(t: &Tensor, sample: usize) -> f64 {
    let per = t.numel() / t.shape()[0];
    let slice = &t.data()[sample * per..(sample + 1) * per];
    slice.iter().sum::<f64>() / per as f64
}

/// Multi-scale score per sample via explicit pooling and per-window maps.
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Vec<f64>> {
    check_pair(x, y, cfg)?;
    let n = x.shape()[0];
    let feasible = cfg.max_feasible_scales(x.shape()[1], x.shape()[2]);
    if cfg.scales > feasible {
        return Err(Error::config(format!(
            "{}x{} images support at most {feasible} scale(s) with window {}, requested {}",
            x.shape()[1],
            x.shape()[2],
            cfg.window_size,
            cfg.scales
        )));
    }
    let mut cx = x.clone();
    let mut cy = y.clone();
    let mut score = vec![1.0; n];
    for scale in 1..=cfg.scales {
        let (l, c, s) = ssim_maps(&cx, &cy, cfg)?;
        for (b, sc) in score.iter_mut().enumerate() {
            *sc *= mean_of(&c, b) * mean_of(&s, b);
            if scale == cfg.scales {
                *sc *= mean_of(&l, b);
            }
        }
        if scale != cfg.scales {
            cx = avg_pool2_plain(&cx);
            cy = avg_pool2_plain(&cy);
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn oracle_self_score_is_one() {
        let mut rng = Rng::new(50);
        let data: Vec<f64> = (0..28 * 28).map(|_| rng.next_f64()).collect();
        let x = Tensor::new(vec![1, 28, 28, 1], data).unwrap();
        let cfg = SsimConfig::default();
        let s = ms_ssim(&x, &x, &cfg).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[1, 28, 28, 1]);
        let y = Tensor::zeros(&[1, 28, 28, 3]);
        assert!(ms_ssim(&x, &y, &SsimConfig::default()).is_err());
    }
}
