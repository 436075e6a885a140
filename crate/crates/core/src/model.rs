//! Conv encoder `f`, projector `g` and linear classification head.
//!
//! The encoder is three 1D conv layers (in -> 32 -> 32 -> 64, kernel 5,
//! stride 1, ReLU after each) followed by a global average pool over time;
//! the pooled 64-dim vector `h` is the representation probed by linear
//! evaluation. The projector is linear(64 -> 64) + ReLU + linear(64 -> 32)
//! and its L2-normalized output `z` feeds the contrastive losses.

use crate::bytes;
use crate::error::{Error, Result};
use crate::numerics::{tensor, Tape, Tensor, Var};
use crate::synthgen::SensorWindow;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const KERNEL: usize = 5;
pub const CONV_CHANNELS: [usize; 3] = [32, 32, 64];
/// Dimension of the pooled pre-projector representation `h`.
pub const REPR_DIM: usize = 64;
/// Dimension of the projected, normalized embedding `z`.
pub const EMBED_DIM: usize = 32;

/// All trainable tensors of one encoder + projector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub in_channels: usize,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    /// Projector weights stored `[in, out]`.
    pub proj1_w: Tensor,
    pub proj1_b: Tensor,
    pub proj2_w: Tensor,
    pub proj2_b: Tensor,
}

/// Tape handles of one encoder forward pass.
pub struct EncoderForward {
    pub h: Var,
    pub z: Var,
    pub params: Vec<(&'static str, Var)>,
    /// Inputs of each ReLU plus the pre-normalization projector output, for
    /// smoothness diagnostics (finite differences are invalid at the kink).
    pub pre_activations: Vec<Var>,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

impl EncoderParams {
    /// Uniform(-a, a) initialization with `a = sqrt(1 / fan_in)` per layer.
    pub fn init(in_channels: usize, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = CONV_CHANNELS;
        EncoderParams {
            in_channels,
            conv1_w: uniform_init(&[c1, in_channels, KERNEL], in_channels * KERNEL, rng),
            conv1_b: uniform_init(&[c1], in_channels * KERNEL, rng),
            conv2_w: uniform_init(&[c2, c1, KERNEL], c1 * KERNEL, rng),
            conv2_b: uniform_init(&[c2], c1 * KERNEL, rng),
            conv3_w: uniform_init(&[c3, c2, KERNEL], c2 * KERNEL, rng),
            conv3_b: uniform_init(&[c3], c2 * KERNEL, rng),
            proj1_w: uniform_init(&[REPR_DIM, REPR_DIM], REPR_DIM, rng),
            proj1_b: uniform_init(&[REPR_DIM], REPR_DIM, rng),
            proj2_w: uniform_init(&[REPR_DIM, EMBED_DIM], REPR_DIM, rng),
            proj2_b: uniform_init(&[EMBED_DIM], REPR_DIM, rng),
        }
    }

    /// All-zero parameters; encoding through these fails at the embedding
    /// normalization, which is why initialization must be nonzero.
    pub fn zeros(in_channels: usize) -> Self {
        let [c1, c2, c3] = CONV_CHANNELS;
        EncoderParams {
            in_channels,
            conv1_w: Tensor::zeros(&[c1, in_channels, KERNEL]),
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w: Tensor::zeros(&[c2, c1, KERNEL]),
            conv2_b: Tensor::zeros(&[c2]),
            conv3_w: Tensor::zeros(&[c3, c2, KERNEL]),
            conv3_b: Tensor::zeros(&[c3]),
            proj1_w: Tensor::zeros(&[REPR_DIM, REPR_DIM]),
            proj1_b: Tensor::zeros(&[REPR_DIM]),
            proj2_w: Tensor::zeros(&[REPR_DIM, EMBED_DIM]),
            proj2_b: Tensor::zeros(&[EMBED_DIM]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("conv3_w", &self.conv3_w),
            ("conv3_b", &self.conv3_b),
            ("proj1_w", &self.proj1_w),
            ("proj1_b", &self.proj1_b),
            ("proj2_w", &self.proj2_w),
            ("proj2_b", &self.proj2_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1_w", &mut self.conv1_w),
            ("conv1_b", &mut self.conv1_b),
            ("conv2_w", &mut self.conv2_w),
            ("conv2_b", &mut self.conv2_b),
            ("conv3_w", &mut self.conv3_w),
            ("conv3_b", &mut self.conv3_b),
            ("proj1_w", &mut self.proj1_w),
            ("proj1_b", &mut self.proj1_b),
            ("proj2_w", &mut self.proj2_w),
            ("proj2_b", &mut self.proj2_b),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn from_named(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))
        };
        let conv1_w = find("conv1_w")?;
        let in_channels = conv1_w
            .dims3()
            .map_err(|_| Error::format("checkpoint: conv1_w must be rank 3".to_string()))?
            .1;
        let params = EncoderParams {
            in_channels,
            conv1_w,
            conv1_b: find("conv1_b")?,
            conv2_w: find("conv2_w")?,
            conv2_b: find("conv2_b")?,
            conv3_w: find("conv3_w")?,
            conv3_b: find("conv3_b")?,
            proj1_w: find("proj1_w")?,
            proj1_b: find("proj1_b")?,
            proj2_w: find("proj2_w")?,
            proj2_b: find("proj2_b")?,
        };
        let expect = EncoderParams::zeros(in_channels);
        for ((name, got), (_, want)) in params.named().iter().zip(expect.named()) {
            if got.shape() != want.shape() {
                return Err(Error::format(format!(
                    "checkpoint tensor {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(params)
    }

    /// Records the full forward pass on a tape. `x` must be `[B, C, T]` with
    /// `C = in_channels`; parameters are registered as tracked leaves.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<EncoderForward> {
        let (_, c, _) = tape.value(x).dims3()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} channels, window has {c}",
                self.in_channels
            )));
        }
        let conv1_w = tape.param(self.conv1_w.clone());
        let conv1_b = tape.param(self.conv1_b.clone());
        let conv2_w = tape.param(self.conv2_w.clone());
        let conv2_b = tape.param(self.conv2_b.clone());
        let conv3_w = tape.param(self.conv3_w.clone());
        let conv3_b = tape.param(self.conv3_b.clone());
        let proj1_w = tape.param(self.proj1_w.clone());
        let proj1_b = tape.param(self.proj1_b.clone());
        let proj2_w = tape.param(self.proj2_w.clone());
        let proj2_b = tape.param(self.proj2_b.clone());

        let mut pre_activations = Vec::new();
        let mut y = x;
        for (w, b) in [(conv1_w, conv1_b), (conv2_w, conv2_b), (conv3_w, conv3_b)] {
            let c = tape.conv1d(y, w, 1)?;
            let cb = tape.add_bias(c, b, 1)?;
            pre_activations.push(cb);
            y = tape.relu(cb);
        }
        let h = tape.mean_last_axis(y)?;
        let p1 = tape.matmul(h, proj1_w)?;
        let p1 = tape.add_bias(p1, proj1_b, 1)?;
        pre_activations.push(p1);
        let p1 = tape.relu(p1);
        let p2 = tape.matmul(p1, proj2_w)?;
        let p2 = tape.add_bias(p2, proj2_b, 1)?;
        pre_activations.push(p2);
        let z = tape.l2_normalize(p2, 1)?;
        Ok(EncoderForward {
            h,
            z,
            pre_activations,
            params: vec![
                ("conv1_w", conv1_w),
                ("conv1_b", conv1_b),
                ("conv2_w", conv2_w),
                ("conv2_b", conv2_b),
                ("conv3_w", conv3_w),
                ("conv3_b", conv3_b),
                ("proj1_w", proj1_w),
                ("proj1_b", proj1_b),
                ("proj2_w", proj2_w),
                ("proj2_b", proj2_b),
            ],
        })
    }

    /// Encodes one window to `(h [64], z [32])`, `z` unit-norm.
    pub fn encode(&self, window: &SensorWindow) -> Result<(Tensor, Tensor)> {
        let (c, t) = window.values.dims2()?;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(
            vec![1, c, t],
            window.values.data().to_vec(),
        )?);
        let fwd = self.forward(&mut tape, x)?;
        let h = Tensor::from_vec(vec![REPR_DIM], tape.value(fwd.h).data().to_vec())?;
        let z = Tensor::from_vec(vec![EMBED_DIM], tape.value(fwd.z).data().to_vec())?;
        Ok((h, z))
    }
}

/// Linear classification head over representations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `[num_classes, repr_dim]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct HeadForward {
    pub logits: Var,
    pub weight: Var,
    pub bias: Var,
}

impl LinearHead {
    pub fn init(num_classes: usize, repr_dim: usize, rng: &mut impl Rng) -> Self {
        LinearHead {
            weight: uniform_init(&[num_classes, repr_dim], repr_dim, rng),
            bias: uniform_init(&[num_classes], repr_dim, rng),
        }
    }

    pub fn zeros(num_classes: usize, repr_dim: usize) -> Self {
        LinearHead {
            weight: Tensor::zeros(&[num_classes, repr_dim]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Affine logits for `h` of shape `[d]` or `[B, d]`; no softmax.
    pub fn classify(&self, h: &Tensor) -> Result<Tensor> {
        let (k, d) = self.weight.dims2()?;
        match h.shape()[..] {
            [hd] if hd == d => {
                let batched = Tensor::from_vec(vec![1, d], h.data().to_vec())?;
                let logits = self.classify(&batched)?;
                Tensor::from_vec(vec![k], logits.data().to_vec())
            }
            [_, hd] if hd == d => {
                let prod = tensor::matmul_nt(h, &self.weight)?;
                tensor::add_bias(&prod, &self.bias, 1)
            }
            _ => Err(Error::shape(format!(
                "classify: representations {:?} vs head [{k}, {d}]",
                h.shape()
            ))),
        }
    }

    /// Records `logits = h Wᵀ + b` on a tape with the head as tracked leaves.
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<HeadForward> {
        let weight = tape.param(self.weight.clone());
        let bias = tape.param(self.bias.clone());
        let wt = tape.transpose(weight)?;
        let prod = tape.matmul(h, wt)?;
        let logits = tape.add_bias(prod, bias, 1)?;
        Ok(HeadForward {
            logits,
            weight,
            bias,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"SICKPT";
const CHECKPOINT_VERSION: u16 = 1;

/// Writes named tensors: magic `SICKPT`, version u16, entry count u32; per
/// entry a u16-length utf8 name, rank u8, u64 dims, f64 little-endian data.
pub fn write_checkpoint(mut w: impl Write, entries: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    bytes::put_u16(&mut w, CHECKPOINT_VERSION)?;
    bytes::put_u32(&mut w, entries.len() as u32)?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        bytes::put_u16(&mut w, name_bytes.len() as u16)?;
        w.write_all(name_bytes)?;
        bytes::put_u8(&mut w, tensor.rank() as u8)?;
        for &d in tensor.shape() {
            bytes::put_u64(&mut w, d as u64)?;
        }
        for &v in tensor.data() {
            bytes::put_f64(&mut w, v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint: bad magic bytes"));
    }
    let version = bytes::get_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = bytes::get_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = bytes::get_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("checkpoint: tensor name is not utf8"))?;
        let rank = bytes::get_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(bytes::get_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for v in &mut data {
            *v = bytes::get_f64(&mut r)?;
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "checkpoint: non-finite value in tensor {name}"
                )));
            }
        }
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, &Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, entries)?;
    use std::io::Write as _;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
