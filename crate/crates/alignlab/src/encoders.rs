//! Shallow trainable projection encoders: an audio head mapping raw
//! audio features into the shared embedding space and a text head shared
//! by all languages. Heads are affine, optionally with one tanh hidden
//! layer, so analytic gradients stay tractable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Embedding;

const CHECKPOINT_MAGIC: [u8; 4] = *b"ALNP";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture descriptor shared by both heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d_audio: usize,
    pub d_text: usize,
    pub d_embed: usize,
    /// Hidden width; `None` makes each head a single affine map.
    pub hidden: Option<usize>,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.d_audio == 0 || self.d_text == 0 || self.d_embed == 0 {
            return Err(Error::InvalidConfig("arch dims must be >= 1".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::InvalidConfig(
                "hidden width must be >= 1 (use None for affine heads)".into(),
            ));
        }
        Ok(())
    }

    fn head_param_count(&self, d_in: usize) -> usize {
        match self.hidden {
            None => self.d_embed * d_in + self.d_embed,
            Some(h) => h * d_in + h + self.d_embed * h + self.d_embed,
        }
    }

    /// Parameters in the audio head (theta).
    pub fn theta_len(&self) -> usize {
        self.head_param_count(self.d_audio)
    }

    /// Parameters in the text head (phi).
    pub fn phi_len(&self) -> usize {
        self.head_param_count(self.d_text)
    }

    /// Total parameter count of the flattened weight vector.
    pub fn param_count(&self) -> usize {
        self.theta_len() + self.phi_len()
    }
}

/// Encoder parameters, stored as one flat weight vector
/// `[theta | phi]` so weight-distance measurement is a plain norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    arch: Arch,
    w: Vec<f64>,
}

/// Intermediate activations kept for backprop through one head.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden_act: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Head {
    Audio,
    Text,
}

impl EncoderParams {
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    /// Flat view of all parameters.
    pub fn flatten(&self) -> &[f64] {
        &self.w
    }

    /// Rebuild params from a flat weight vector.
    pub fn unflatten(arch: Arch, w: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if w.len() != arch.param_count() {
            return Err(Error::DimMismatch {
                expected: arch.param_count(),
                got: w.len(),
            });
        }
        Ok(EncoderParams { arch, w })
    }

    fn head_slice(&self, head: Head) -> &[f64] {
        match head {
            Head::Audio => &self.w[..self.arch.theta_len()],
            Head::Text => &self.w[self.arch.theta_len()..],
        }
    }

    fn head_in_dim(&self, head: Head) -> usize {
        match head {
            Head::Audio => self.arch.d_audio,
            Head::Text => self.arch.d_text,
        }
    }

    fn forward(&self, head: Head, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let d_in = self.head_in_dim(head);
        if x.len() != d_in {
            return Err(Error::DimMismatch {
                expected: d_in,
                got: x.len(),
            });
        }
        let p = self.head_slice(head);
        let d_out = self.arch.d_embed;
        match self.arch.hidden {
            None => {
                let (weight, bias) = p.split_at(d_out * d_in);
                let y = affine(weight, bias, x, d_out, d_in);
                Ok((
                    y,
                    ForwardCache {
                        input: x.to_vec(),
                        hidden_act: None,
                    },
                ))
            }
            Some(h) => {
                let (w1, rest) = p.split_at(h * d_in);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(d_out * h);
                let mut act = affine(w1, b1, x, h, d_in);
                for v in &mut act {
                    *v = v.tanh();
                }
                let y = affine(w2, b2, &act, d_out, h);
                Ok((
                    y,
                    ForwardCache {
                        input: x.to_vec(),
                        hidden_act: Some(act),
                    },
                ))
            }
        }
    }

    /// Accumulate d(loss)/d(head params) into the matching region of a
    /// flat gradient vector, given d(loss)/d(head output).
    fn backward(&self, head: Head, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.w.len());
        debug_assert_eq!(grad_out.len(), self.arch.d_embed);
        let d_in = self.head_in_dim(head);
        let d_out = self.arch.d_embed;
        let offset = match head {
            Head::Audio => 0,
            Head::Text => self.arch.theta_len(),
        };
        let x = &cache.input;
        match self.arch.hidden {
            None => {
                let g = &mut grad[offset..offset + d_out * d_in + d_out];
                let (gw, gb) = g.split_at_mut(d_out * d_in);
                for o in 0..d_out {
                    for i in 0..d_in {
                        gw[o * d_in + i] += grad_out[o] * x[i];
                    }
                    gb[o] += grad_out[o];
                }
            }
            Some(h) => {
                let act = cache.hidden_act.as_ref().expect("hidden cache");
                let p = self.head_slice(head);
                let w2 = &p[h * d_in + h..h * d_in + h + d_out * h];
                // d(loss)/d(hidden pre-activation)
                let mut dz1 = vec![0.0; h];
                for j in 0..h {
                    let mut dh = 0.0;
                    for o in 0..d_out {
                        dh += grad_out[o] * w2[o * h + j];
                    }
                    dz1[j] = dh * (1.0 - act[j] * act[j]);
                }
                let g = &mut grad[offset..offset + self.head_param_count_for(head)];
                let (gw1, rest) = g.split_at_mut(h * d_in);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(d_out * h);
                for j in 0..h {
                    for i in 0..d_in {
                        gw1[j * d_in + i] += dz1[j] * x[i];
                    }
                    gb1[j] += dz1[j];
                }
                for o in 0..d_out {
                    for j in 0..h {
                        gw2[o * h + j] += grad_out[o] * act[j];
                    }
                    gb2[o] += grad_out[o];
                }
            }
        }
    }

    fn head_param_count_for(&self, head: Head) -> usize {
        match head {
            Head::Audio => self.arch.theta_len(),
            Head::Text => self.arch.phi_len(),
        }
    }

    pub(crate) fn forward_audio(&self, a: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward(Head::Audio, a)
    }

    pub(crate) fn forward_text(&self, t: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward(Head::Text, t)
    }

    pub(crate) fn backward_audio(&self, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) {
        self.backward(Head::Audio, cache, grad_out, grad);
    }

    pub(crate) fn backward_text(&self, cache: &ForwardCache, grad_out: &[f64], grad: &mut [f64]) {
        self.backward(Head::Text, cache, grad_out, grad);
    }
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut y = bias.to_vec();
    for o in 0..d_out {
        let row = &weight[o * d_in..(o + 1) * d_in];
        let mut acc = 0.0;
        for i in 0..d_in {
            acc += row[i] * x[i];
        }
        y[o] += acc;
    }
    y
}

/// Deterministic initialization: layer weights uniform in
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`, biases zero.
pub fn init_params(seed: u64, arch: Arch) -> Result<EncoderParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Vec::with_capacity(arch.param_count());
    for d_in in [arch.d_audio, arch.d_text] {
        match arch.hidden {
            None => init_layer(&mut rng, &mut w, d_in, arch.d_embed),
            Some(h) => {
                init_layer(&mut rng, &mut w, d_in, h);
                init_layer(&mut rng, &mut w, h, arch.d_embed);
            }
        }
    }
    Ok(EncoderParams { arch, w })
}

fn init_layer(rng: &mut ChaCha8Rng, w: &mut Vec<f64>, fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for _ in 0..fan_out * fan_in {
        w.push(rng.gen_range(-limit..=limit));
    }
    w.extend(std::iter::repeat(0.0).take(fan_out));
}

/// Audio head f_theta.
pub fn encode_audio(params: &EncoderParams, a: &[f64]) -> Result<Embedding> {
    let (y, _) = params.forward_audio(a)?;
    Embedding::new(y)
}

/// Text head g_phi, shared by all languages.
pub fn encode_text(params: &EncoderParams, t: &[f64]) -> Result<Embedding> {
    let (y, _) = params.forward_text(t)?;
    Embedding::new(y)
}

/// Euclidean distance between two parameter sets of the same architecture.
pub fn weight_distance(p1: &EncoderParams, p2: &EncoderParams) -> Result<f64> {
    if p1.arch != p2.arch {
        return Err(Error::ArchMismatch(format!(
            "{:?} vs {:?}",
            p1.arch, p2.arch
        )));
    }
    Ok(p1
        .w
        .iter()
        .zip(&p2.w)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Write a parameter checkpoint (magic "ALNP", little-endian).
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(&display, e));
    write(&CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    let a = params.arch;
    for dim in [
        a.d_audio as u32,
        a.d_text as u32,
        a.d_embed as u32,
        a.hidden.unwrap_or(0) as u32,
    ] {
        write(&dim.to_le_bytes())?;
    }
    for v in &params.w {
        write(&v.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Read a checkpoint written by [`save_checkpoint`]; bit-exact round trip.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, &display)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = read_u32(&mut input, &display)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: display,
            got: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let d_audio = read_u32(&mut input, &display)? as usize;
    let d_text = read_u32(&mut input, &display)? as usize;
    let d_embed = read_u32(&mut input, &display)? as usize;
    let hidden_raw = read_u32(&mut input, &display)? as usize;
    let arch = Arch {
        d_audio,
        d_text,
        d_embed,
        hidden: if hidden_raw == 0 { None } else { Some(hidden_raw) },
    };
    arch.validate()?;
    let mut w = Vec::with_capacity(arch.param_count());
    for _ in 0..arch.param_count() {
        w.push(read_f64(&mut input, &display)?);
    }
    EncoderParams::unflatten(arch, w)
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.to_string(),
                needed: buf.len(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, path: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}
