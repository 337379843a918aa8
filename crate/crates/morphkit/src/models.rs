//! Classifier components: a three-hidden-layer MLP, a stochastic
//! variational-bottleneck head with a reparameterized Gaussian code, and a
//! small convolutional encoder producing fixed-size embeddings.
//!
//! All parameters live in a [`ParamStore`] under group
//! [`ParamGroup::Classifier`]; forwards read staged tape values by name, so
//! the same code serves training (gradients on) and evaluation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Pad, ParamGroup, ParamStore, Tape, Tensor, Value};

/// Hidden widths of the MLP classifier.
pub const MLP_HIDDEN: [usize; 3] = [1024, 512, 256];
/// Embedding width of [`ConvEncoder`].
pub const EMBED_DIM: usize = 128;
/// Default bottleneck width of [`VibHead`].
pub const DEFAULT_DZ: usize = 64;

/// Reshapes an NHWC image batch to `[N, H*W*C]` rows for dense layers.
pub fn flatten_images(tape: &mut Tape, x: Value) -> Result<Value> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("flatten_images expects NHWC, got {s:?}")));
    }
    tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])
}

/// Row-wise argmax of an `[N,k]` tensor; ties break toward the lower index.
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let s = t.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::shape(format!("argmax_rows expects [N,k] with k >= 1, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    Ok((0..n)
        .map(|i| {
            let row = &t.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn staged_value(params: &HashMap<String, Value>, name: &str) -> Result<Value> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::config(format!("model parameter {name} not staged")))
}

/// `x W + b` for `x: [N,in]`, `W: [in,out]`, `b: [out]`.
fn linear(tape: &mut Tape, x: Value, w: Value, b: Value) -> Result<Value> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

fn add_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.add_uniform(
        &format!("{prefix}.w"),
        ParamGroup::Classifier,
        &[fan_in, fan_out],
        fan_in,
        rng,
    )?;
    store.add_zeros(&format!("{prefix}.b"), ParamGroup::Classifier, &[fan_out])
}

// ---- MLP classifier ------------------------------------------------------------

/// Fully connected classifier: `in_dim -> 1024 -> 512 -> 256 -> k` with ReLU
/// between hidden layers and a linear readout.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub in_dim: usize,
    pub k: usize,
}

impl Mlp {
    pub fn new(in_dim: usize, k: usize) -> Result<Self> {
        if in_dim == 0 || k < 2 {
            return Err(Error::config(format!(
                "MLP needs in_dim >= 1 and k >= 2, got in_dim {in_dim}, k {k}"
            )));
        }
        Ok(Mlp { in_dim, k })
    }

    pub fn param_names() -> [&'static str; 8] {
        [
            "clf.fc1.w", "clf.fc1.b", "clf.fc2.w", "clf.fc2.b",
            "clf.fc3.w", "clf.fc3.b", "clf.fc4.w", "clf.fc4.b",
        ]
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let mut r = rng.derive(crate::rng::labels::INIT);
        let dims = [self.in_dim, MLP_HIDDEN[0], MLP_HIDDEN[1], MLP_HIDDEN[2], self.k];
        for (i, pair) in dims.windows(2).enumerate() {
            add_linear(store, &format!("clf.fc{}", i + 1), pair[0], pair[1], &mut r)?;
        }
        Ok(())
    }

    /// Last hidden activation `[N, 256]` (input to the readout layer).
    pub fn feature_forward(
        &self,
        tape: &mut Tape,
        params: &HashMap<String, Value>,
        x: Value,
    ) -> Result<Value> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape(format!(
                "MLP expects [N,{}] input, got {s:?}",
                self.in_dim
            )));
        }
        let mut cur = x;
        for i in 1..=3 {
            let w = staged_value(params, &format!("clf.fc{i}.w"))?;
            let b = staged_value(params, &format!("clf.fc{i}.b"))?;
            cur = linear(tape, cur, w, b)?;
            cur = tape.relu(cur);
        }
        Ok(cur)
    }

    /// Logits `[N, k]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &HashMap<String, Value>,
        x: Value,
    ) -> Result<Value> {
        let feat = self.feature_forward(tape, params, x)?;
        let w = staged_value(params, "clf.fc4.w")?;
        let b = staged_value(params, "clf.fc4.b")?;
        linear(tape, feat, w, b)
    }
}

// ---- variational bottleneck head ------------------------------------------------

/// Where the Gaussian code sits relative to the backbone feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VibVariant {
    /// Mean/log-variance heads directly on the backbone feature.
    DirectHeads,
    /// Heads directly on the feature, three FC layers between the code and
    /// the logits.
    DeepReadout,
    /// One FC + ReLU inserted after the backbone feature, then the heads
    /// (default).
    #[default]
    EncoderFc,
}

/// Stochastic classifier head: `features -> (mu, logvar) -> Z -> logits`
/// with the reparameterized sample `Z = mu + exp(logvar/2) * eps`.
#[derive(Debug, Clone, Copy)]
pub struct VibHead {
    pub feature_dim: usize,
    pub dz: usize,
    pub k: usize,
    pub variant: VibVariant,
}

/// Tape values produced by [`VibHead::forward`].
#[derive(Debug, Clone, Copy)]
pub struct VibOutput {
    pub logits: Value,
    pub mu: Value,
    pub logvar: Value,
    pub z: Value,
}

impl VibHead {
    pub fn new(feature_dim: usize, dz: usize, k: usize, variant: VibVariant) -> Result<Self> {
        if feature_dim == 0 || dz == 0 || k < 2 {
            return Err(Error::config(format!(
                "VIB head needs feature_dim, dz >= 1 and k >= 2, got {feature_dim}, {dz}, {k}"
            )));
        }
        Ok(VibHead { feature_dim, dz, k, variant })
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec![];
        if self.variant == VibVariant::EncoderFc {
            names.extend(["vib.pre.w", "vib.pre.b"]);
        }
        names.extend(["vib.mu.w", "vib.mu.b", "vib.lv.w", "vib.lv.b"]);
        if self.variant == VibVariant::DeepReadout {
            names.extend(["vib.ro1.w", "vib.ro1.b", "vib.ro2.w", "vib.ro2.b"]);
        }
        names.extend(["vib.out.w", "vib.out.b"]);
        names
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let mut r = rng.derive(crate::rng::labels::INIT);
        let head_in = self.feature_dim;
        if self.variant == VibVariant::EncoderFc {
            add_linear(store, "vib.pre", self.feature_dim, self.feature_dim, &mut r)?;
        }
        add_linear(store, "vib.mu", head_in, self.dz, &mut r)?;
        add_linear(store, "vib.lv", head_in, self.dz, &mut r)?;
        if self.variant == VibVariant::DeepReadout {
            add_linear(store, "vib.ro1", self.dz, self.dz, &mut r)?;
            add_linear(store, "vib.ro2", self.dz, self.dz, &mut r)?;
        }
        add_linear(store, "vib.out", self.dz, self.k, &mut r)?;
        Ok(())
    }

    /// Runs the head on `[N, feature_dim]` features. `eps` of shape
    /// `[N, dz]` injects the reparameterization noise; `None` evaluates at
    /// the posterior mean (`Z = mu`, bit-identical to zero noise).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &HashMap<String, Value>,
        features: Value,
        eps: Option<&Tensor>,
    ) -> Result<VibOutput> {
        let s = tape.value(features).shape().to_vec();
        if s.len() != 2 || s[1] != self.feature_dim {
            return Err(Error::shape(format!(
                "VIB head expects [N,{}] features, got {s:?}",
                self.feature_dim
            )));
        }
        let n = s[0];
        let mut head_in = features;
        if self.variant == VibVariant::EncoderFc {
            let w = staged_value(params, "vib.pre.w")?;
            let b = staged_value(params, "vib.pre.b")?;
            head_in = linear(tape, head_in, w, b)?;
            head_in = tape.relu(head_in);
        }
        let mu = {
            let w = staged_value(params, "vib.mu.w")?;
            let b = staged_value(params, "vib.mu.b")?;
            linear(tape, head_in, w, b)?
        };
        let logvar = {
            let w = staged_value(params, "vib.lv.w")?;
            let b = staged_value(params, "vib.lv.b")?;
            linear(tape, head_in, w, b)?
        };
        let z = match eps {
            None => mu,
            Some(e) => {
                if e.shape() != [n, self.dz] {
                    return Err(Error::shape(format!(
                        "eps must be [{n},{}], got {:?}",
                        self.dz,
                        e.shape()
                    )));
                }
                let half_lv = tape.scale(logvar, 0.5);
                let sigma = tape.exp(half_lv);
                let ev = tape.constant(e.clone());
                let noise = tape.mul(sigma, ev)?;
                tape.add(mu, noise)?
            }
        };
        let mut cur = z;
        if self.variant == VibVariant::DeepReadout {
            for name in ["vib.ro1", "vib.ro2"] {
                let w = staged_value(params, &format!("{name}.w"))?;
                let b = staged_value(params, &format!("{name}.b"))?;
                cur = linear(tape, cur, w, b)?;
                cur = tape.relu(cur);
            }
        }
        let w = staged_value(params, "vib.out.w")?;
        let b = staged_value(params, "vib.out.b")?;
        let logits = linear(tape, cur, w, b)?;
        Ok(VibOutput { logits, mu, logvar, z })
    }
}

// ---- convolutional encoder ------------------------------------------------------

/// Two stride-2 conv stages (16, 32 channels), global average pooling, and a
/// linear projection to a 128-dim embedding.
#[derive(Debug, Clone, Copy)]
pub struct ConvEncoder {
    pub in_channels: usize,
}

impl ConvEncoder {
    pub fn new(in_channels: usize) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::config("encoder needs at least one input channel"));
        }
        Ok(ConvEncoder { in_channels })
    }

    pub fn param_names() -> [&'static str; 6] {
        ["enc.c1.w", "enc.c1.b", "enc.c2.w", "enc.c2.b", "enc.fc.w", "enc.fc.b"]
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &Rng) -> Result<()> {
        let mut r = rng.derive(crate::rng::labels::INIT);
        let k = 3;
        store.add_uniform(
            "enc.c1.w",
            ParamGroup::Classifier,
            &[k, k, self.in_channels, 16],
            k * k * self.in_channels,
            &mut r,
        )?;
        store.add_zeros("enc.c1.b", ParamGroup::Classifier, &[16])?;
        store.add_uniform("enc.c2.w", ParamGroup::Classifier, &[k, k, 16, 32], k * k * 16, &mut r)?;
        store.add_zeros("enc.c2.b", ParamGroup::Classifier, &[32])?;
        add_linear(store, "enc.fc", 32, EMBED_DIM, &mut r)
    }

    /// Embedding `[N, 128]` of an NHWC batch; needs H, W >= 4.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &HashMap<String, Value>,
        x: Value,
    ) -> Result<Value> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects NHWC input with {} channels, got {s:?}",
                self.in_channels
            )));
        }
        if s[1] < 4 || s[2] < 4 {
            return Err(Error::shape(format!(
                "encoder needs spatial dims >= 4 for two stride-2 stages, got {}x{}",
                s[1], s[2]
            )));
        }
        let mut cur = x;
        let w1 = staged_value(params, "enc.c1.w")?;
        let b1 = staged_value(params, "enc.c1.b")?;
        cur = tape.conv2d(cur, w1, 2, Pad::Same)?;
        cur = tape.add(cur, b1)?;
        cur = tape.relu(cur);
        let w2 = staged_value(params, "enc.c2.w")?;
        let b2 = staged_value(params, "enc.c2.b")?;
        cur = tape.conv2d(cur, w2, 2, Pad::Same)?;
        cur = tape.add(cur, b2)?;
        cur = tape.relu(cur);
        let pooled = tape.reduce_mean(cur, &[1, 2])?;
        let w = staged_value(params, "enc.fc.w")?;
        let b = staged_value(params, "enc.fc.b")?;
        linear(tape, pooled, w, b)
    }
}
