use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Shape-determining hyperparameters, stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.max_len < 2 || self.vocab_size < 3 {
            return Err(Error::InvalidConfig(
                "d_ffn, max_len and vocab_size are too small".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// All trainable weights. There is no output projection: the logit of token
/// `j` at a decoder position is `h_t . tgt_embed[j]`, so `tgt_embed` serves
/// as both input embedding and output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub arch: Architecture,
    pub src_embed: Array2<f64>,
    pub tgt_embed: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
}

/// Visits every tensor of a parameter container in a fixed order.
pub trait Tensors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64]));
}

impl Tensors for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        f(prefix.to_string(), self.as_slice().expect("contiguous"), vec![self.len()]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(prefix.to_string(), self.as_slice_mut().expect("contiguous"));
    }
}

impl Tensors for Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        let shape = self.shape().to_vec();
        f(prefix.to_string(), self.as_slice().expect("contiguous"), shape);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(prefix.to_string(), self.as_slice_mut().expect("contiguous"));
    }
}

impl<T: Tensors> Tensors for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

macro_rules! impl_tensors {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl Tensors for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64], Vec<usize>)) {
                $(self.$field.visit(&join(prefix, stringify!($field)), f);)+
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
                $(self.$field.visit_mut(&join(prefix, stringify!($field)), f);)+
            }
        }
    };
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl_tensors!(Linear { weight, bias });
impl_tensors!(LayerNorm { gain, bias });
impl_tensors!(Attention { query, key, value, output });
impl_tensors!(FeedForward { up, down });
impl_tensors!(EncoderLayer { attn_norm, attn, ffn_norm, ffn });
impl_tensors!(DecoderLayer {
    self_norm,
    self_attn,
    cross_norm,
    cross_attn,
    ffn_norm,
    ffn
});
impl_tensors!(Parameters {
    src_embed,
    tgt_embed,
    encoder,
    enc_norm,
    decoder,
    dec_norm
});

/// Name and shape of one tensor in visit order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const EMBED_STD: f64 = 0.02;

impl Parameters {
    /// Random initialization: Xavier-uniform projections, zero biases, unit
    /// layer-norm gains and small embeddings (std 0.02) so the initial output
    /// distribution is close to uniform.
    pub fn init(arch: Architecture, seed: u64) -> Result<Parameters> {
        arch.validate()?;
        let mut rng = substream(seed, Stream::Init);
        let d = arch.d_model;
        let embed_bound = EMBED_STD * 3f64.sqrt();
        let src_embed = uniform(&mut rng, (arch.vocab_size, d), embed_bound);
        let tgt_embed = uniform(&mut rng, (arch.vocab_size, d), embed_bound);
        let encoder = (0..arch.n_layers)
            .map(|_| EncoderLayer {
                attn_norm: LayerNorm::new(d),
                attn: Attention::init(&mut rng, d),
                ffn_norm: LayerNorm::new(d),
                ffn: FeedForward::init(&mut rng, d, arch.d_ffn),
            })
            .collect();
        let decoder = (0..arch.n_layers)
            .map(|_| DecoderLayer {
                self_norm: LayerNorm::new(d),
                self_attn: Attention::init(&mut rng, d),
                cross_norm: LayerNorm::new(d),
                cross_attn: Attention::init(&mut rng, d),
                ffn_norm: LayerNorm::new(d),
                ffn: FeedForward::init(&mut rng, d, arch.d_ffn),
            })
            .collect();
        Ok(Parameters {
            arch,
            src_embed,
            tgt_embed,
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
        })
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let mut infos = Vec::new();
        self.visit("", &mut |name, _, shape| infos.push(TensorInfo { name, shape }));
        infos
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, data, _| n += data.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, data, _| out.extend_from_slice(data));
        out
    }

    /// Overwrites every tensor from a flat buffer in visit order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }

    pub fn zeros_like(&self) -> Parameters {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, data| data.fill(0.0));
        z
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, data, _| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Applies `f` to matching elements of `self` and `other`.
    pub fn zip_apply(&mut self, other: &Parameters, mut f: impl FnMut(&mut f64, f64)) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut("", &mut |_, data| {
            let n = data.len();
            for (a, &b) in data.iter_mut().zip(&flat[offset..offset + n]) {
                f(a, b);
            }
            offset += n;
        });
    }

    /// Mutable access to a tensor by its visit name.
    pub fn tensor_mut(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> bool {
        let mut f = Some(f);
        self.visit_mut("", &mut |n, data| {
            if n == name {
                if let Some(f) = f.take() {
                    f(data);
                }
            }
        });
        f.is_none()
    }
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            weight: uniform(rng, (fan_in, fan_out), bound),
            bias: Array1::zeros(fan_out),
        }
    }
}

impl Attention {
    fn init<R: Rng>(rng: &mut R, d: usize) -> Self {
        Attention {
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            output: Linear::init(rng, d, d),
        }
    }
}

impl FeedForward {
    fn init<R: Rng>(rng: &mut R, d: usize, d_ffn: usize) -> Self {
        FeedForward {
            up: Linear::init(rng, d, d_ffn),
            down: Linear::init(rng, d_ffn, d),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: (usize, usize), bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 16,
            max_len: 10,
        }
    }

    #[test]
    fn init_is_deterministic_and_flat_round_trips() {
        let a = Parameters::init(arch(), 5).unwrap();
        assert_eq!(a, Parameters::init(arch(), 5).unwrap());
        assert_ne!(a, Parameters::init(arch(), 6).unwrap());
        let flat = a.flatten();
        let mut b = a.zeros_like();
        b.assign_flat(&flat).unwrap();
        assert_eq!(a, b);
        assert!(b.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn tensor_names_are_stable() {
        let p = Parameters::init(arch(), 1).unwrap();
        let infos = p.tensor_infos();
        assert_eq!(infos[0].name, "src_embed");
        assert_eq!(infos[1].name, "tgt_embed");
        assert_eq!(infos[2].name, "encoder.0.attn_norm.gain");
        assert!(infos.iter().any(|t| t.name == "decoder.1.cross_attn.value.weight"));
        assert_eq!(infos.iter().map(TensorInfo::numel).sum::<usize>(), p.num_params());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let bad = Architecture {
            n_heads: 3,
            ..arch()
        };
        assert!(matches!(Parameters::init(bad, 1), Err(Error::InvalidConfig(_))));
    }
}
