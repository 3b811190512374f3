//! Parameter store, initialization and checkpoint files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::sampler::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::tensor_io::{read_named_file, write_named_file, Tensor, TensorData};
use crate::tokenizer::EmbedParams;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub q: Linear<T>,
    /// Key projection without bias: a key bias shifts every score of a
    /// query row equally and cancels in the softmax.
    pub k: Mat<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

/// Object-token pooling MLP and the optional per-track identity table.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPool<T> {
    pub mlp: Mlp<T>,
    pub identity: Option<Mat<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub object: Option<ObjectPool<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            w: Mat::zeros(inp, out),
            b: Mat::zeros(1, out),
        }
    }
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Mat::from_vec(1, dim, vec![T::one(); dim]),
            beta: Mat::zeros(1, dim),
        }
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }
}

macro_rules! param_visitor {
    ($name:ident, $iter:ident, $($m:tt)?) => {
        /// Visits every tensor with its dotted name, in a fixed order.
        pub fn $name<'a>(&'a $($m)? self, f: &mut impl FnMut(String, &'a $($m)? Mat<T>)) {
            f("embed.projection".into(), & $($m)? self.embed.projection);
            f("embed.bias".into(), & $($m)? self.embed.bias);
            f("embed.positional".into(), & $($m)? self.embed.positional);
            for (l, b) in self.blocks.$iter().enumerate() {
                let p = format!("blocks.{l}");
                f(format!("{p}.ln1.gamma"), & $($m)? b.ln1.gamma);
                f(format!("{p}.ln1.beta"), & $($m)? b.ln1.beta);
                f(format!("{p}.attn.q.w"), & $($m)? b.attn.q.w);
                f(format!("{p}.attn.q.b"), & $($m)? b.attn.q.b);
                f(format!("{p}.attn.k.w"), & $($m)? b.attn.k);
                f(format!("{p}.attn.v.w"), & $($m)? b.attn.v.w);
                f(format!("{p}.attn.v.b"), & $($m)? b.attn.v.b);
                f(format!("{p}.attn.o.w"), & $($m)? b.attn.o.w);
                f(format!("{p}.attn.o.b"), & $($m)? b.attn.o.b);
                f(format!("{p}.ln2.gamma"), & $($m)? b.ln2.gamma);
                f(format!("{p}.ln2.beta"), & $($m)? b.ln2.beta);
                f(format!("{p}.mlp.fc1.w"), & $($m)? b.mlp.fc1.w);
                f(format!("{p}.mlp.fc1.b"), & $($m)? b.mlp.fc1.b);
                f(format!("{p}.mlp.fc2.w"), & $($m)? b.mlp.fc2.w);
                f(format!("{p}.mlp.fc2.b"), & $($m)? b.mlp.fc2.b);
                if let Some(o) = & $($m)? b.object {
                    f(format!("{p}.object.mlp.fc1.w"), & $($m)? o.mlp.fc1.w);
                    f(format!("{p}.object.mlp.fc1.b"), & $($m)? o.mlp.fc1.b);
                    f(format!("{p}.object.mlp.fc2.w"), & $($m)? o.mlp.fc2.w);
                    f(format!("{p}.object.mlp.fc2.b"), & $($m)? o.mlp.fc2.b);
                    if let Some(id) = & $($m)? o.identity {
                        f(format!("{p}.object.identity"), id);
                    }
                }
            }
            f("norm.gamma".into(), & $($m)? self.norm.gamma);
            f("norm.beta".into(), & $($m)? self.norm.beta);
            f("head.w".into(), & $($m)? self.head.w);
            f("head.b".into(), & $($m)? self.head.b);
        }
    };
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".w") || name == "embed.projection" || name == "embed.positional"
}

impl<T: Scalar> Params<T> {
    param_visitor!(for_each, iter,);
    param_visitor!(for_each_mut, iter_mut, mut);

    /// Parameters of the right shapes with zero weights, unit layer-norm
    /// gains and zero everything else.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let d = cfg.dim;
        let oam = cfg.oam_layer_set();
        let blocks = (0..cfg.depth)
            .map(|l| Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    q: Linear::zeros(d, d),
                    k: Mat::zeros(d, d),
                    v: Linear::zeros(d, d),
                    o: Linear::zeros(d, d),
                },
                ln2: LayerNorm::new(d),
                mlp: Mlp::zeros(d, cfg.mlp_hidden),
                object: oam.contains(&l).then(|| ObjectPool {
                    mlp: Mlp::zeros(d, d),
                    identity: cfg.use_identity_embedding.then(|| Mat::zeros(cfg.max_tracks, d)),
                }),
            })
            .collect();
        Ok(Params {
            embed: EmbedParams::zeros(cfg.tube.patch_len(), d, grid.n()),
            blocks,
            norm: LayerNorm::new(d),
            head: Linear::zeros(d, cfg.num_classes),
        })
    }

    /// Weights from a 0.02-std normal, biases and identity tables zero,
    /// layer-norm gains one. Each tensor draws from its own stream keyed by
    /// name, so models that differ only in optional tensors share the rest.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        p.for_each_mut(&mut |name, m| {
            if is_weight(&name) {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name_hash(&name)));
                for v in &mut m.data {
                    *v = T::lit(normal.sample(&mut rng));
                }
            }
        });
        Ok(p)
    }

    /// Adds independent N(0, std) noise to every tensor. Gradient checks use
    /// this to move away from the near-zero regime of a fresh init, where
    /// many gradients fall below finite-difference resolution.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        self.for_each_mut(&mut |name, m| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x9E37, name_hash(&name)));
            for v in &mut m.data {
                *v += T::lit(normal.sample(&mut rng));
            }
        });
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(&mut |_, m| m.data.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |n, _| out.push(n));
        out
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, m| out.push((n, m)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |n, m| out.push((n, m)));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, m| n += m.len());
        n
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_mut(&mut |_, m| m.scale(s));
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let cast_lin = |l: &Linear<T>| Linear { w: l.w.cast(), b: l.b.cast() };
        let cast_ln = |l: &LayerNorm<T>| LayerNorm { gamma: l.gamma.cast(), beta: l.beta.cast() };
        let cast_mlp = |m: &Mlp<T>| Mlp { fc1: cast_lin(&m.fc1), fc2: cast_lin(&m.fc2) };
        Params {
            embed: EmbedParams {
                projection: self.embed.projection.cast(),
                bias: self.embed.bias.cast(),
                positional: self.embed.positional.cast(),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: cast_ln(&b.ln1),
                    attn: Attention {
                        q: cast_lin(&b.attn.q),
                        k: b.attn.k.cast(),
                        v: cast_lin(&b.attn.v),
                        o: cast_lin(&b.attn.o),
                    },
                    ln2: cast_ln(&b.ln2),
                    mlp: cast_mlp(&b.mlp),
                    object: b.object.as_ref().map(|o| ObjectPool {
                        mlp: cast_mlp(&o.mlp),
                        identity: o.identity.as_ref().map(Mat::cast),
                    }),
                })
                .collect(),
            norm: cast_ln(&self.norm),
            head: cast_lin(&self.head),
        }
    }
}

pub const CONFIG_RECORD: &str = "__config__";

/// Writes the model config and every parameter (as `f32`) to a checkpoint.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, cfg: &ModelConfig, params: &Params<T>) -> Result<()> {
    let mut records = vec![(CONFIG_RECORD.to_string(), Tensor::bytes(serde_json::to_vec(cfg)?))];
    params.for_each(&mut |name, m| {
        records.push((
            name,
            Tensor::f32(
                vec![m.rows as u64, m.cols as u64],
                m.data.iter().map(|v| v.as_f64() as f32).collect(),
            ),
        ));
    });
    write_named_file(path, &records)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, Params<T>)> {
    let records = read_named_file(path)?;
    let mut iter = records.into_iter();
    let cfg: ModelConfig = match iter.next() {
        Some((name, Tensor { data: TensorData::Bytes(b), .. })) if name == CONFIG_RECORD => serde_json::from_slice(&b)?,
        _ => return Err(Error::Format("checkpoint must start with a config record".into())),
    };
    let mut params = Params::zeros(&cfg)?;
    let mut rest: Vec<(String, Tensor)> = iter.collect();
    let mut err = None;
    params.for_each_mut(&mut |name, m| {
        if err.is_some() {
            return;
        }
        match rest.iter().position(|(n, _)| *n == name) {
            Some(i) => {
                let (_, t) = rest.swap_remove(i);
                if t.dims != [m.rows as u64, m.cols as u64] {
                    err = Some(Error::Format(format!("tensor {name} has dims {:?}", t.dims)));
                    return;
                }
                match t.as_f32() {
                    Ok(v) => m.data = v.iter().map(|&x| T::lit(x as f64)).collect(),
                    Err(e) => err = Some(e),
                }
            }
            None => err = Some(Error::Format(format!("checkpoint is missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((name, _)) = rest.first() {
        return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TubeDims;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            tube: TubeDims::new(2, 8, 8),
            depth: 2,
            dim: 16,
            heads: 2,
            mlp_hidden: 64,
            num_classes: 4,
            oam_layers: Some(vec![]),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = tiny();
        let p: Params<f32> = Params::init(&cfg, 0).unwrap();
        let (d, h, n, c, patch) = (16, 64, 64, 4, 2 * 8 * 8 * 3);
        let embed = patch * d + d + n * d;
        let block = 2 * d + 4 * (d * d + d) - d + 2 * d + (d * h + h) + (h * d + d);
        let head = 2 * d + d * c + c;
        assert_eq!(p.num_params(), embed + 2 * block + head);
        assert_eq!(p.num_params(), 7184 + 2 * 3264 + 100);

        let oam = ModelConfig {
            oam_layers: Some(vec![1]),
            max_tracks: 5,
            ..cfg
        };
        let q: Params<f32> = Params::init(&oam, 0).unwrap();
        assert_eq!(q.num_params(), p.num_params() + 2 * (d * d + d) + 5 * d);
    }

    #[test]
    fn init_is_seeded_and_shares_common_tensors() {
        let cfg = tiny();
        let a: Params<f64> = Params::init(&cfg, 7).unwrap();
        assert_eq!(a, Params::init(&cfg, 7).unwrap());
        assert_ne!(a, Params::init(&cfg, 8).unwrap());
        let oam = ModelConfig {
            oam_layers: Some(vec![0]),
            ..cfg
        };
        let b: Params<f64> = Params::init(&oam, 7).unwrap();
        assert_eq!(a.embed, b.embed);
        assert_eq!(a.blocks[0].attn, b.blocks[0].attn);
        let id = b.blocks[0].object.as_ref().unwrap().identity.as_ref().unwrap();
        assert!(id.data.iter().all(|&v| v == 0.0));
        assert!(a.blocks[1].mlp.fc1.b.data.iter().all(|&v| v == 0.0));
        let std = (a.embed.projection.data.iter().map(|v| v * v).sum::<f64>() / a.embed.projection.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() < 0.002, "{std}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            oam_layers: Some(vec![1]),
            ..tiny()
        };
        let p: Params<f32> = Params::init(&cfg, 3).unwrap();
        let a = dir.path().join("a.ovvt");
        let b = dir.path().join("b.ovvt");
        save_checkpoint(&a, &cfg, &p).unwrap();
        let (cfg2, p2) = load_checkpoint::<f32>(&a).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p2, p);
        save_checkpoint(&b, &cfg2, &p2).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
