//! Desk-scale encoder and projector MLPs.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Layer widths of the encoder and projector, input width first.
///
/// `encoder = [in, h1, …, d_y]`, `projector = [d_y, …, d_z]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
    pub relu: bool,
}

impl Arch {
    pub fn new(encoder: Vec<usize>, projector: Vec<usize>, relu: bool) -> Result<Self> {
        let arch = Arch {
            encoder,
            projector,
            relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Default desk arch: encoder `[input→128→64]`, projector `[64→64→64→32]`.
    pub fn desk_default(input: usize) -> Self {
        Arch {
            encoder: vec![input, 128, 64],
            projector: vec![64, 64, 64, 32],
            relu: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() < 2 || self.projector.len() < 2 {
            return Err(Error::contract(
                "arch needs at least one encoder layer and one projector layer",
            ));
        }
        if self.encoder.iter().chain(&self.projector).any(|&w| w == 0) {
            return Err(Error::contract("layer widths must be >= 1"));
        }
        if self.projector[0] != *self.encoder.last().unwrap() {
            return Err(Error::contract(format!(
                "projector input {} does not match encoder output {}",
                self.projector[0],
                self.encoder.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.encoder[0]
    }

    pub fn representation_width(&self) -> usize {
        *self.encoder.last().unwrap()
    }

    pub fn embedding_width(&self) -> usize {
        *self.projector.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        let count = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        count(&self.encoder) + count(&self.projector)
    }

    /// Shapes of every parameter tensor in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.encoder
            .windows(2)
            .chain(self.projector.windows(2))
            .flat_map(|p| [vec![p[0], p[1]], vec![p[1]]])
            .collect()
    }
}

fn join(widths: &[usize]) -> String {
    widths
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "enc={};proj={};relu={}",
            join(&self.encoder),
            join(&self.projector),
            self.relu
        )
    }
}

pub(crate) fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(['-', ','])
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer width {p:?} in {s:?}")))
        })
        .collect()
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut encoder = None;
        let mut projector = None;
        let mut relu = true;
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad arch descriptor {s:?}")))?;
            match k.trim() {
                "enc" => encoder = Some(parse_widths(v)?),
                "proj" => projector = Some(parse_widths(v)?),
                "relu" => {
                    relu = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad relu flag in {s:?}")))?
                }
                other => return Err(Error::Config(format!("unknown arch field {other:?}"))),
            }
        }
        match (encoder, projector) {
            (Some(e), Some(p)) => Arch::new(e, p, relu),
            _ => Err(Error::Config(format!("incomplete arch descriptor {s:?}"))),
        }
    }
}

/// One affine layer: `weight: [in×out]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub encoder: Vec<Layer>,
    pub projector: Vec<Layer>,
}

impl ModelParams {
    /// Uniform(−s, s) weights with `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |widths: &[usize]| -> Vec<Layer> {
            widths
                .windows(2)
                .map(|p| {
                    let (fan_in, fan_out) = (p[0], p[1]);
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-s, s);
                    let w = (0..fan_in * fan_out)
                        .map(|_| dist.sample(&mut rng))
                        .collect();
                    Layer {
                        weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
                        bias: Tensor::zeros(&[fan_out]),
                    }
                })
                .collect()
        };
        let encoder = make(&arch.encoder);
        let projector = make(&arch.projector);
        Ok(ModelParams {
            arch: arch.clone(),
            encoder,
            projector,
        })
    }

    pub fn zeros(arch: &Arch) -> Result<Self> {
        Self::from_tensors(
            arch,
            arch.param_shapes()
                .iter()
                .map(|s| Tensor::zeros(s))
                .collect(),
        )
    }

    /// Rebuild from tensors in declaration order (weight, bias per layer,
    /// encoder first).
    pub fn from_tensors(arch: &Arch, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(Error::Dimension {
                    op: "ModelParams::from_tensors",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let n_enc = arch.encoder.len() - 1;
        let mut it = tensors.into_iter();
        let mut take = |n: usize| -> Vec<Layer> {
            (0..n)
                .map(|_| Layer {
                    weight: it.next().unwrap(),
                    bias: it.next().unwrap(),
                })
                .collect()
        };
        let encoder = take(n_enc);
        let projector = take(arch.projector.len() - 1);
        Ok(ModelParams {
            arch: arch.clone(),
            encoder,
            projector,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.projector.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// SHA-256 over the arch descriptor and the exact parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.to_string().as_bytes());
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Record every parameter as a leaf of `tape`.
    pub fn attach<'t>(&self, tape: &'t Tape) -> AttachedParams<'t> {
        let attach = |layers: &[Layer]| -> Vec<(Var<'t>, Var<'t>)> {
            layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect()
        };
        AttachedParams {
            encoder: attach(&self.encoder),
            projector: attach(&self.projector),
            relu: self.arch.relu,
        }
    }
}

/// Model parameters as tape leaves.
#[derive(Debug, Clone)]
pub struct AttachedParams<'t> {
    encoder: Vec<(Var<'t>, Var<'t>)>,
    projector: Vec<(Var<'t>, Var<'t>)>,
    relu: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardResult<'t> {
    /// Encoder output (representation).
    pub y: Var<'t>,
    /// Projector output (embedding).
    pub z: Var<'t>,
}

fn mlp<'t>(mut h: Var<'t>, layers: &[(Var<'t>, Var<'t>)], relu: bool) -> Result<Var<'t>> {
    let last = layers.len() - 1;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = h.affine(w, b)?;
        if relu && i < last {
            h = h.relu();
        }
    }
    Ok(h)
}

impl<'t> AttachedParams<'t> {
    /// Parameter leaves in declaration order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        let x = if x.shape().len() > 2 {
            x.flatten_rows()
        } else {
            x
        };
        mlp(x, &self.encoder, self.relu)
    }

    pub fn project(&self, y: Var<'t>) -> Result<Var<'t>> {
        mlp(y, &self.projector, self.relu)
    }
}

/// Encoder then projector; image batches are flattened to `[B×in]` first.
pub fn forward<'t>(x: Var<'t>, params: &AttachedParams<'t>) -> Result<ForwardResult<'t>> {
    let y = params.encode(x)?;
    let z = params.project(y)?;
    Ok(ForwardResult { y, z })
}

/// Encoder-only forward outside of any training graph.
pub fn encode_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let attached = params.attach(&tape);
    Ok(attached.encode(tape.leaf(x.clone()))?.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let arch = Arch::desk_default(16);
        assert_eq!(
            ModelParams::init(&arch, 3).unwrap(),
            ModelParams::init(&arch, 3).unwrap()
        );
        assert_ne!(
            ModelParams::init(&arch, 3).unwrap(),
            ModelParams::init(&arch, 4).unwrap()
        );
    }

    #[test]
    fn encoder_param_count() {
        let arch = Arch::new(vec![4, 8, 8], vec![8, 2], true).unwrap();
        let enc: usize = arch.encoder.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        assert_eq!(enc, 112);
        assert_eq!(arch.param_count(), 112 + 18);
        assert_eq!(
            ModelParams::init(&arch, 0).unwrap().param_count(),
            arch.param_count()
        );
    }

    #[test]
    fn init_weight_spread_matches_uniform_moment() {
        let arch = Arch::new(vec![256, 256], vec![256, 1], true).unwrap();
        let p = ModelParams::init(&arch, 11).unwrap();
        let w = p.encoder[0].weight.data();
        let s = (6.0f64 / 512.0).sqrt();
        let expected = (s * s / 3.0).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(
            (std - expected).abs() < 0.2 * expected,
            "std {std} vs {expected}"
        );
        assert!(w.iter().all(|v| v.abs() <= s));
        assert!(p.encoder[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn empty_arch_rejected() {
        assert!(Arch::new(vec![4], vec![4, 2], true).is_err());
        assert!(Arch::new(vec![4, 3], vec![], true).is_err());
        assert!(Arch::new(vec![4, 3], vec![2, 2], true).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let arch = Arch::desk_default(6);
        let p = ModelParams::zeros(&arch).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 6], 0.7));
        let out = forward(x, &p.attach(&tape)).unwrap();
        assert!(out.y.value().data().iter().all(|&v| v == 0.0));
        assert!(out.z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let arch = Arch::new(vec![3, 3], vec![3, 3], true).unwrap();
        let mut p = ModelParams::zeros(&arch).unwrap();
        p.encoder[0].weight = Tensor::eye(3);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(encode_batch(&p, &x).unwrap(), x);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let p = ModelParams::init(&Arch::desk_default(8), 0).unwrap();
        let x = Tensor::zeros(&[2, 7]);
        assert!(matches!(encode_batch(&p, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn arch_descriptor_roundtrip() {
        let arch = Arch::desk_default(256);
        let parsed: Arch = arch.to_string().parse().unwrap();
        assert_eq!(parsed, arch);
    }

    #[test]
    fn rows_do_not_interact() {
        let p = ModelParams::init(&Arch::desk_default(5), 9).unwrap();
        let a = Tensor::new(vec![2, 5], (0..10).map(|v| f64::from(v) / 10.0).collect()).unwrap();
        let b = Tensor::new(vec![2, 5], (0..10).map(|v| f64::from(v).cos()).collect()).unwrap();
        let both = Tensor::new(vec![4, 5], [a.data(), b.data()].concat()).unwrap();
        let ya = encode_batch(&p, &a).unwrap();
        let yb = encode_batch(&p, &b).unwrap();
        let yab = encode_batch(&p, &both).unwrap();
        assert_eq!(yab.data(), [ya.data(), yb.data()].concat().as_slice());
    }
}
