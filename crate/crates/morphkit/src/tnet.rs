//! Transformation network: a small convolutional autoencoder that maps an
//! image batch to either a per-pixel mask in (0,1) (one channel, broadcast
//! over color channels) or an unconstrained representation with the same
//! channel count as the input.
//!
//! Architecture (fixed):
//!   encoder: conv 3x3 stride 2 (same padding) -> 16 ch, ReLU
//!            conv 3x3 stride 2 (same padding) -> 32 ch, ReLU
//!   decoder: nearest 2x upsample, conv 3x3 (same) -> 16 ch, ReLU
//!            nearest 2x upsample, conv 3x3 (same) -> out channels
//!   head:    sigmoid (mask mode) or identity (representation mode)
//!
//! Inputs whose spatial dims are not divisible by 4 are zero-padded on the
//! bottom/right before the encoder and cropped back afterwards, so the
//! output always matches the input spatially. The final conv layer is
//! zero-initialized, so a fresh network emits a uniform mask of 0.5.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Pad, ParamGroup, ParamStore, Tape, Tensor, Value};

/// Output head of the transformation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TnMode {
    /// Sigmoid head, one output channel: a per-pixel mask in (0,1).
    Mask,
    /// Linear head, same channel count as the input (unconstrained values).
    Representation,
}

/// Convolutional autoencoder configuration. Parameters live in a
/// [`ParamStore`] under the `tn.` prefix (group [`ParamGroup::Tn`]).
#[derive(Debug, Clone, Copy)]
pub struct TransformNet {
    pub in_channels: usize,
    pub mode: TnMode,
}

const ENC1_CH: usize = 16;
const ENC2_CH: usize = 32;
const DEC1_CH: usize = 16;
const KERNEL: usize = 3;

impl TransformNet {
    pub fn new(in_channels: usize, mode: TnMode) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::config("transform net needs at least one input channel"));
        }
        Ok(TransformNet { in_channels, mode })
    }

    /// Number of channels the decoder emits.
    pub fn out_channels(&self) -> usize {
        match self.mode {
            TnMode::Mask => 1,
            TnMode::Representation => self.in_channels,
        }
    }

    /// Registers the network's parameters. Hidden conv layers use uniform
    /// +-sqrt(6/fan_in) weights with zero biases; the final conv layer is
    /// fully zero-initialized so the initial mask is sigmoid(0) = 0.5
    /// everywhere (representation mode starts at exactly zero).
    pub fn init_params(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let mut r = rng.derive(crate::rng::labels::INIT);
        let k = KERNEL;
        store.add_uniform(
            "tn.enc1.w",
            ParamGroup::Tn,
            &[k, k, self.in_channels, ENC1_CH],
            k * k * self.in_channels,
            &mut r,
        )?;
        store.add_zeros("tn.enc1.b", ParamGroup::Tn, &[ENC1_CH])?;
        store.add_uniform(
            "tn.enc2.w",
            ParamGroup::Tn,
            &[k, k, ENC1_CH, ENC2_CH],
            k * k * ENC1_CH,
            &mut r,
        )?;
        store.add_zeros("tn.enc2.b", ParamGroup::Tn, &[ENC2_CH])?;
        store.add_uniform(
            "tn.dec1.w",
            ParamGroup::Tn,
            &[k, k, ENC2_CH, DEC1_CH],
            k * k * ENC2_CH,
            &mut r,
        )?;
        store.add_zeros("tn.dec1.b", ParamGroup::Tn, &[DEC1_CH])?;
        store.add_zeros("tn.dec2.w", ParamGroup::Tn, &[k, k, DEC1_CH, self.out_channels()])?;
        store.add_zeros("tn.dec2.b", ParamGroup::Tn, &[self.out_channels()])?;
        Ok(())
    }

    /// Names of the parameters this network reads, in layer order.
    pub fn param_names() -> [&'static str; 8] {
        [
            "tn.enc1.w", "tn.enc1.b", "tn.enc2.w", "tn.enc2.b",
            "tn.dec1.w", "tn.dec1.b", "tn.dec2.w", "tn.dec2.b",
        ]
    }

    /// Runs the autoencoder on an NHWC batch. `params` must contain staged
    /// tape values for every name in [`TransformNet::param_names`].
    ///
    /// Errors if the batch is not NHWC with the configured channel count or
    /// if H or W is smaller than 4 (two stride-2 stages need at least 4).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &HashMap<String, Value>,
        x: Value,
    ) -> Result<Value> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::shape(format!(
                "transform net expects NHWC input with {} channels, got {s:?}",
                self.in_channels
            )));
        }
        let (h, w) = (s[1], s[2]);
        if h < 4 || w < 4 {
            return Err(Error::shape(format!(
                "transform net needs spatial dims >= 4 for two stride-2 stages, got {h}x{w}"
            )));
        }
        let p = |name: &str| -> Result<Value> {
            params
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("transform net parameter {name} not staged")))
        };

        // Pad bottom/right so both stride-2 stages divide evenly.
        let ph = (4 - h % 4) % 4;
        let pw = (4 - w % 4) % 4;
        let mut cur = if ph > 0 || pw > 0 {
            tape.pad_bottom_right(x, ph, pw)?
        } else {
            x
        };

        cur = tape.conv2d(cur, p("tn.enc1.w")?, 2, Pad::Same)?;
        cur = tape.add(cur, p("tn.enc1.b")?)?;
        cur = tape.relu(cur);

        cur = tape.conv2d(cur, p("tn.enc2.w")?, 2, Pad::Same)?;
        cur = tape.add(cur, p("tn.enc2.b")?)?;
        cur = tape.relu(cur);

        cur = tape.upsample2(cur)?;
        cur = tape.conv2d(cur, p("tn.dec1.w")?, 1, Pad::Same)?;
        cur = tape.add(cur, p("tn.dec1.b")?)?;
        cur = tape.relu(cur);

        cur = tape.upsample2(cur)?;
        cur = tape.conv2d(cur, p("tn.dec2.w")?, 1, Pad::Same)?;
        cur = tape.add(cur, p("tn.dec2.b")?)?;

        if ph > 0 || pw > 0 {
            cur = tape.crop_top_left(cur, h, w)?;
        }
        Ok(match self.mode {
            TnMode::Mask => tape.sigmoid(cur),
            TnMode::Representation => cur,
        })
    }
}

/// Elementwise product of a one-channel mask `[N,H,W,1]` with an image batch
/// `[N,H,W,C]`, broadcasting the mask over channels. Differentiable with
/// respect to both operands.
pub fn apply_mask(tape: &mut Tape, mask: Value, x: Value) -> Result<Value> {
    let sm = tape.value(mask).shape().to_vec();
    let sx = tape.value(x).shape().to_vec();
    if sm.len() != 4 || sx.len() != 4 || sm[3] != 1 || sm[..3] != sx[..3] {
        return Err(Error::shape(format!(
            "apply_mask needs mask [N,H,W,1] matching image [N,H,W,C], got {sm:?} and {sx:?}"
        )));
    }
    tape.mul(x, mask)
}

/// Writes one sample of a `[N,H,W,1]` mask tensor as a binary PGM (P5) file,
/// maxval 255, pixel value `round(m * 255)` clamped to [0,255].
pub fn write_mask_pgm(path: &Path, mask: &Tensor, sample: usize) -> Result<()> {
    let s = mask.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::shape(format!("mask export expects [N,H,W,1], got {s:?}")));
    }
    if sample >= s[0] {
        return Err(Error::data(format!(
            "mask export sample {sample} out of range for batch of {}",
            s[0]
        )));
    }
    let (h, w) = (s[1], s[2]);
    let plane = &mask.data()[sample * h * w..(sample + 1) * h * w];
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("in-memory write");
    out.extend(plane.iter().map(|&v| quantize_u8(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes one sample of a `[N,H,W,C]` image tensor (C = 1 or 3, values in
/// [0,1]) as a binary PPM (P6) file; single-channel input is replicated to
/// gray RGB.
pub fn write_image_ppm(path: &Path, image: &Tensor, sample: usize) -> Result<()> {
    let s = image.shape();
    if s.len() != 4 || (s[3] != 1 && s[3] != 3) {
        return Err(Error::shape(format!(
            "image export expects [N,H,W,1] or [N,H,W,3], got {s:?}"
        )));
    }
    if sample >= s[0] {
        return Err(Error::data(format!(
            "image export sample {sample} out of range for batch of {}",
            s[0]
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let plane = &image.data()[sample * h * w * c..(sample + 1) * h * w * c];
    let mut out = Vec::with_capacity(32 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").expect("in-memory write");
    for px in plane.chunks(c) {
        if c == 3 {
            out.extend(px.iter().map(|&v| quantize_u8(v)));
        } else {
            let g = quantize_u8(px[0]);
            out.extend([g, g, g]);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn random_batch(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    fn staged(store: &ParamStore, tape: &mut Tape) -> HashMap<String, Value> {
        store.stage(tape, &[ParamGroup::Tn])
    }

    #[test]
    fn fresh_network_emits_uniform_half_mask() {
        let net = TransformNet::new(3, TnMode::Mask).unwrap();
        let mut store = ParamStore::new();
        net.init_params(&mut store, &Rng::new(7)).unwrap();
        let mut tape = Tape::new();
        let params = staged(&store, &mut tape);
        let x = tape.leaf(random_batch(&mut Rng::new(1), &[2, 12, 12, 3]), false);
        let m = net.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(m).shape(), &[2, 12, 12, 1]);
        for &v in tape.value(m).data() {
            assert_eq!(v, 0.5, "zero final layer must give sigmoid(0) = 0.5 exactly");
        }
    }

    #[test]
    fn fresh_representation_network_emits_zeros() {
        let net = TransformNet::new(3, TnMode::Representation).unwrap();
        let mut store = ParamStore::new();
        net.init_params(&mut store, &Rng::new(7)).unwrap();
        let mut tape = Tape::new();
        let params = staged(&store, &mut tape);
        let x = tape.leaf(random_batch(&mut Rng::new(1), &[1, 8, 8, 3]), false);
        let s = net.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, 8, 8, 3]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    // Randomize every parameter (including biases and the normally
    // zero-initialized final conv) so the contracts are exercised at a
    // generic point. Nonzero biases also keep pre-activations over the
    // zero-padded border away from the ReLU kink, which finite differences
    // would otherwise straddle.
    fn randomized_params(net: &TransformNet, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        net.init_params(&mut store, &Rng::new(seed)).unwrap();
        let mut r = Rng::new(seed ^ 0xabcdef);
        for name in TransformNet::param_names() {
            if name.ends_with(".b") || name.starts_with("tn.dec2") {
                for v in store.get_mut(name).unwrap().data_mut() {
                    *v = r.uniform(-0.4, 0.4);
                }
            }
        }
        store
    }

    #[test]
    fn output_spatial_shape_matches_input_including_odd_sizes() {
        let net = TransformNet::new(3, TnMode::Mask).unwrap();
        let store = randomized_params(&net, 11);
        for (h, w) in [(28, 28), (32, 32), (7, 9), (4, 5)] {
            let mut tape = Tape::new();
            let params = staged(&store, &mut tape);
            let x = tape.leaf(random_batch(&mut Rng::new(3), &[2, h, w, 3]), false);
            let m = net.forward(&mut tape, &params, x).unwrap();
            assert_eq!(tape.value(m).shape(), &[2, h, w, 1], "size {h}x{w}");
            for &v in tape.value(m).data() {
                assert!(v > 0.0 && v < 1.0, "mask entry {v} outside (0,1)");
            }
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let net = TransformNet::new(1, TnMode::Mask).unwrap();
        let store = randomized_params(&net, 5);
        let mut tape = Tape::new();
        let params = staged(&store, &mut tape);
        let x = tape.leaf(random_batch(&mut Rng::new(3), &[1, 3, 8, 1]), false);
        let err = net.forward(&mut tape, &params, x).unwrap_err();
        assert!(err.to_string().contains(">= 4"), "unexpected error: {err}");
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let net = TransformNet::new(3, TnMode::Mask).unwrap();
        let store = randomized_params(&net, 5);
        let mut tape = Tape::new();
        let params = staged(&store, &mut tape);
        let x = tape.leaf(random_batch(&mut Rng::new(3), &[1, 8, 8, 1]), false);
        assert!(net.forward(&mut tape, &params, x).is_err());
    }

    // The forward pass must equal the documented layer composition exactly:
    // re-evaluate it here op by op on a fresh tape and compare bitwise.
    #[test]
    fn forward_matches_explicit_layer_composition() {
        let net = TransformNet::new(3, TnMode::Mask).unwrap();
        let store = randomized_params(&net, 23);
        let input = random_batch(&mut Rng::new(9), &[2, 10, 10, 3]);

        let mut tape = Tape::new();
        let params = staged(&store, &mut tape);
        let x = tape.leaf(input.clone(), false);
        let got = net.forward(&mut tape, &params, x).unwrap();
        let got = tape.value(got).data().to_vec();

        let mut t2 = Tape::new();
        let lp = |t2: &mut Tape, store: &ParamStore, n: &str| {
            let v = store.get(n).unwrap().clone();
            t2.leaf(v, false)
        };
        let x2 = t2.leaf(input, false);
        let padded = t2.pad_bottom_right(x2, 2, 2).unwrap();
        let w1 = lp(&mut t2, &store, "tn.enc1.w");
        let b1 = lp(&mut t2, &store, "tn.enc1.b");
        let mut cur = t2.conv2d(padded, w1, 2, Pad::Same).unwrap();
        cur = t2.add(cur, b1).unwrap();
        cur = t2.relu(cur);
        let w2 = lp(&mut t2, &store, "tn.enc2.w");
        let b2 = lp(&mut t2, &store, "tn.enc2.b");
        cur = t2.conv2d(cur, w2, 2, Pad::Same).unwrap();
        cur = t2.add(cur, b2).unwrap();
        cur = t2.relu(cur);
        cur = t2.upsample2(cur).unwrap();
        let w3 = lp(&mut t2, &store, "tn.dec1.w");
        let b3 = lp(&mut t2, &store, "tn.dec1.b");
        cur = t2.conv2d(cur, w3, 1, Pad::Same).unwrap();
        cur = t2.add(cur, b3).unwrap();
        cur = t2.relu(cur);
        cur = t2.upsample2(cur).unwrap();
        let w4 = lp(&mut t2, &store, "tn.dec2.w");
        let b4 = lp(&mut t2, &store, "tn.dec2.b");
        cur = t2.conv2d(cur, w4, 1, Pad::Same).unwrap();
        cur = t2.add(cur, b4).unwrap();
        cur = t2.crop_top_left(cur, 10, 10).unwrap();
        cur = t2.sigmoid(cur);
        let want = t2.value(cur).data().to_vec();

        assert_eq!(got, want, "forward deviates from the documented composition");
    }

    #[test]
    fn apply_mask_identity_zero_and_loop_oracle() {
        let mut tape = Tape::new();
        let x_t = random_batch(&mut Rng::new(4), &[2, 3, 3, 3]);
        let x = tape.leaf(x_t.clone(), false);

        let ones = tape.constant(Tensor::full(&[2, 3, 3, 1], 1.0));
        let idm = apply_mask(&mut tape, ones, x).unwrap();
        assert_eq!(tape.value(idm).data(), x_t.data());

        let zeros = tape.constant(Tensor::zeros(&[2, 3, 3, 1]));
        let z = apply_mask(&mut tape, zeros, x).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let m_t = random_batch(&mut Rng::new(5), &[2, 3, 3, 1]);
        let m = tape.leaf(m_t.clone(), false);
        let psi = apply_mask(&mut tape, m, x).unwrap();
        let got = tape.value(psi).data();
        for n in 0..2 {
            for p in 0..9 {
                for c in 0..3 {
                    let idx = (n * 9 + p) * 3 + c;
                    assert_eq!(got[idx], m_t.data()[n * 9 + p] * x_t.data()[idx]);
                }
            }
        }
    }

    #[test]
    fn apply_mask_rejects_spatial_mismatch_and_wide_mask() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let wrong_spatial = tape.constant(Tensor::zeros(&[1, 4, 5, 1]));
        assert!(apply_mask(&mut tape, wrong_spatial, x).is_err());
        let wide = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
        assert!(apply_mask(&mut tape, wide, x).is_err());
    }

    // Finite differences through the whole autoencoder + mask application,
    // with respect to every parameter tensor and the input image.
    #[test]
    fn gradients_flow_to_params_and_input() {
        let net = TransformNet::new(1, TnMode::Mask).unwrap();
        let store = randomized_params(&net, 31);
        let names = TransformNet::param_names();
        let mut inputs: Vec<Tensor> =
            names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        inputs.push(random_batch(&mut Rng::new(2), &[1, 6, 6, 1]));

        let report = gradcheck::check(
            "tnet.forward+apply_mask",
            move |tape, vals| {
                let mut params = HashMap::new();
                for (i, n) in names.iter().enumerate() {
                    params.insert((*n).to_string(), vals[i]);
                }
                let x = vals[names.len()];
                let m = net.forward(tape, &params, x)?;
                let psi = apply_mask(tape, m, x)?;
                tape.mean_all(psi)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn pgm_writer_emits_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Tensor::new(
            vec![2, 2, 2, 1],
            vec![0.0, 0.5, 1.0, 0.25, 0.9, 0.1, 0.6, 0.4],
        )
        .unwrap();
        write_mask_pgm(&path, &mask, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\x80\xff\x40".to_vec());
        write_mask_pgm(&path, &mask, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes[..11], b"P5\n2 2\n255\n"[..]);
        assert_eq!(&bytes[11..], &[230, 26, 153, 102]);
        assert!(write_mask_pgm(&path, &mask, 2).is_err());
    }

    #[test]
    fn ppm_writer_replicates_gray_and_passes_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let gray = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        write_image_ppm(&path, &gray, 0).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"P6\n2 1\n255\n\x00\x00\x00\xff\xff\xff");
        let rgb = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        write_image_ppm(&path, &rgb, 0).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"P6\n1 1\n255\n\xff\x00\x80");
    }
}
