//! Model configuration, learnable parameters, and their on-disk container.
//!
//! Parameters are stored in memory as f64 tensors and serialized as a JSON
//! shape manifest followed by flat little-endian f32 data.

use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("container format error: {0}")]
    Format(String),
}

/// Architecture hyperparameters; the defaults are the reference
/// configuration (feature width 128, four attention layers, spectral
/// dimension 64, match threshold 0.2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension C.
    pub feature_dim: usize,
    /// Number of alternating self/cross attention layers N.
    pub attention_layers: usize,
    /// Spectral embedding dimension fed to the topology MLP.
    pub spectral_dim: usize,
    /// Mutual-match score threshold θ.
    pub match_threshold: f64,
    /// Sinkhorn normalization iterations.
    pub sinkhorn_iterations: usize,
    /// Probability threshold for the visibility head.
    pub visibility_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 128,
            attention_layers: 4,
            spectral_dim: 64,
            match_threshold: 0.2,
            sinkhorn_iterations: 100,
            visibility_threshold: 0.5,
        }
    }
}

/// One affine map `x ↦ x·Wᵀ + b` with `w: [out, in]`, `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// One conv layer with `w: [c_out, c_in, k, k]`, `b: [c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub l1: AffineParams,
    pub l2: AffineParams,
}

/// Vertex geometric embedding parameters: a three-layer conv stack over the
/// raster image (widths 1 → C/4 → C/2 → C) plus per-vertex MLPs for the
/// normalized position and the spectral topology coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
    pub pos_mlp: Mlp2,
    pub topo_mlp: Mlp2,
}

/// Query/key/value maps of one attention role.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvParams {
    pub q: AffineParams,
    pub k: AffineParams,
    pub v: AffineParams,
}

/// One self+cross layer; both feature streams share these weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub self_attn: QkvParams,
    pub cross_attn: QkvParams,
}

/// The correspondence transformer: N alternating layers plus the learnable
/// dustbin score used by the optimal-transport normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub layers: Vec<AttentionLayer>,
    /// Scalar dustbin score α, stored as a one-element tensor.
    pub dustbin_alpha: Tensor,
}

impl AttentionParams {
    pub fn alpha(&self) -> f64 {
        self.dustbin_alpha.data[0]
    }
}

/// Visibility head: C → C → C/2 → 1 with ReLU between layers; the sigmoid of
/// the final logit is the visibility probability.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityParams {
    pub l1: AffineParams,
    pub l2: AffineParams,
    pub l3: AffineParams,
}

/// Every learnable weight plus the architecture configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: EmbedParams,
    pub attention: AttentionParams,
    pub visibility: VisibilityParams,
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn init_affine(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> AffineParams {
    AffineParams {
        w: init_tensor(rng, &[out, inp], inp),
        b: init_tensor(rng, &[out], inp),
    }
}

fn init_conv(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> ConvParams {
    ConvParams {
        w: init_tensor(rng, &[co, ci, k, k], ci * k * k),
        b: init_tensor(rng, &[co], ci * k * k),
    }
}

impl ModelParams {
    /// Seeded uniform ±sqrt(1/fan_in) initialization; the dustbin score
    /// starts at 1.0.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_dim;
        let embed = EmbedParams {
            conv1: init_conv(&mut rng, c / 4, 1, 3),
            conv2: init_conv(&mut rng, c / 2, c / 4, 3),
            conv3: init_conv(&mut rng, c, c / 2, 3),
            pos_mlp: Mlp2 {
                l1: init_affine(&mut rng, c, 2),
                l2: init_affine(&mut rng, c, c),
            },
            topo_mlp: Mlp2 {
                l1: init_affine(&mut rng, c, config.spectral_dim),
                l2: init_affine(&mut rng, c, c),
            },
        };
        let layers = (0..config.attention_layers)
            .map(|_| AttentionLayer {
                self_attn: QkvParams {
                    q: init_affine(&mut rng, c, c),
                    k: init_affine(&mut rng, c, c),
                    v: init_affine(&mut rng, c, c),
                },
                cross_attn: QkvParams {
                    q: init_affine(&mut rng, c, c),
                    k: init_affine(&mut rng, c, c),
                    v: init_affine(&mut rng, c, c),
                },
            })
            .collect();
        let attention = AttentionParams {
            layers,
            dustbin_alpha: Tensor::from_vec(&[1], vec![1.0]),
        };
        let visibility = VisibilityParams {
            l1: init_affine(&mut rng, c, c),
            l2: init_affine(&mut rng, c / 2, c),
            l3: init_affine(&mut rng, 1, c / 2),
        };
        ModelParams {
            config,
            embed,
            attention,
            visibility,
        }
    }

    /// Visit every named tensor in canonical order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        let e = &self.embed;
        f("embed.conv1.w", &e.conv1.w);
        f("embed.conv1.b", &e.conv1.b);
        f("embed.conv2.w", &e.conv2.w);
        f("embed.conv2.b", &e.conv2.b);
        f("embed.conv3.w", &e.conv3.w);
        f("embed.conv3.b", &e.conv3.b);
        f("embed.pos.l1.w", &e.pos_mlp.l1.w);
        f("embed.pos.l1.b", &e.pos_mlp.l1.b);
        f("embed.pos.l2.w", &e.pos_mlp.l2.w);
        f("embed.pos.l2.b", &e.pos_mlp.l2.b);
        f("embed.topo.l1.w", &e.topo_mlp.l1.w);
        f("embed.topo.l1.b", &e.topo_mlp.l1.b);
        f("embed.topo.l2.w", &e.topo_mlp.l2.w);
        f("embed.topo.l2.b", &e.topo_mlp.l2.b);
        for (i, layer) in self.attention.layers.iter().enumerate() {
            for (role, qkv) in [("self", &layer.self_attn), ("cross", &layer.cross_attn)] {
                f(&format!("attn.{i}.{role}.q.w"), &qkv.q.w);
                f(&format!("attn.{i}.{role}.q.b"), &qkv.q.b);
                f(&format!("attn.{i}.{role}.k.w"), &qkv.k.w);
                f(&format!("attn.{i}.{role}.k.b"), &qkv.k.b);
                f(&format!("attn.{i}.{role}.v.w"), &qkv.v.w);
                f(&format!("attn.{i}.{role}.v.b"), &qkv.v.b);
            }
        }
        f("attn.alpha", &self.attention.dustbin_alpha);
        f("vis.l1.w", &self.visibility.l1.w);
        f("vis.l1.b", &self.visibility.l1.b);
        f("vis.l2.w", &self.visibility.l2.w);
        f("vis.l2.b", &self.visibility.l2.b);
        f("vis.l3.w", &self.visibility.l3.w);
        f("vis.l3.b", &self.visibility.l3.b);
    }

    /// Mutable visit in the same canonical order as [`Self::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let e = &mut self.embed;
        f("embed.conv1.w", &mut e.conv1.w);
        f("embed.conv1.b", &mut e.conv1.b);
        f("embed.conv2.w", &mut e.conv2.w);
        f("embed.conv2.b", &mut e.conv2.b);
        f("embed.conv3.w", &mut e.conv3.w);
        f("embed.conv3.b", &mut e.conv3.b);
        f("embed.pos.l1.w", &mut e.pos_mlp.l1.w);
        f("embed.pos.l1.b", &mut e.pos_mlp.l1.b);
        f("embed.pos.l2.w", &mut e.pos_mlp.l2.w);
        f("embed.pos.l2.b", &mut e.pos_mlp.l2.b);
        f("embed.topo.l1.w", &mut e.topo_mlp.l1.w);
        f("embed.topo.l1.b", &mut e.topo_mlp.l1.b);
        f("embed.topo.l2.w", &mut e.topo_mlp.l2.w);
        f("embed.topo.l2.b", &mut e.topo_mlp.l2.b);
        for (i, layer) in self.attention.layers.iter_mut().enumerate() {
            for (role, qkv) in [
                ("self", &mut layer.self_attn),
                ("cross", &mut layer.cross_attn),
            ] {
                f(&format!("attn.{i}.{role}.q.w"), &mut qkv.q.w);
                f(&format!("attn.{i}.{role}.q.b"), &mut qkv.q.b);
                f(&format!("attn.{i}.{role}.k.w"), &mut qkv.k.w);
                f(&format!("attn.{i}.{role}.k.b"), &mut qkv.k.b);
                f(&format!("attn.{i}.{role}.v.w"), &mut qkv.v.w);
                f(&format!("attn.{i}.{role}.v.b"), &mut qkv.v.b);
            }
        }
        f("attn.alpha", &mut self.attention.dustbin_alpha);
        f("vis.l1.w", &mut self.visibility.l1.w);
        f("vis.l1.b", &mut self.visibility.l1.b);
        f("vis.l2.w", &mut self.visibility.l2.w);
        f("vis.l2.b", &mut self.visibility.l2.b);
        f("vis.l3.w", &mut self.visibility.l3.w);
        f("vis.l3.b", &mut self.visibility.l3.b);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(|name, _| names.push(name.to_string()));
        names
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.all_finite());
        ok
    }

    /// Write the binary container: a little-endian u64 manifest length, the
    /// JSON manifest, then each tensor's values as little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ParamsError> {
        let mut entries = Vec::new();
        self.for_each_tensor(|name, t| {
            entries.push(ManifestTensor {
                name: name.to_string(),
                shape: t.shape.clone(),
            });
        });
        let manifest = Manifest {
            config: self.config.clone(),
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        let mut err = None;
        self.for_each_tensor(|_, t| {
            if err.is_some() {
                return;
            }
            for &v in &t.data {
                if let Err(e) = file.write_all(&(v as f32).to_le_bytes()) {
                    err = Some(e);
                    return;
                }
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        file.flush()?;
        Ok(())
    }

    /// Read a container written by [`Self::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamsError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for entry in &manifest.tensors {
            let len: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 4];
            for _ in 0..len {
                file.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        }
        let mut params = ModelParams::init(manifest.config.clone(), 0);
        let mut missing = None;
        params.for_each_tensor_mut(|name, t| {
            match tensors.remove(name) {
                Some(loaded) => {
                    if loaded.shape != t.shape {
                        missing = Some(format!(
                            "tensor {name}: shape {:?} in file, {:?} expected",
                            loaded.shape, t.shape
                        ));
                    } else {
                        *t = loaded;
                    }
                }
                None => missing = Some(format!("tensor {name} missing from container")),
            };
        });
        if let Some(msg) = missing {
            return Err(ParamsError::Format(msg));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            attention_layers: 2,
            spectral_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(small_config(), 7);
        let b = ModelParams::init(small_config(), 7);
        assert_eq!(a, b);
        let c = ModelParams::init(small_config(), 8);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = ModelParams::init(small_config(), 1);
        let bound = (1.0f64 / 8.0).sqrt();
        for &v in &p.embed.pos_mlp.l2.w.data {
            assert!(v.abs() <= bound);
        }
        assert_eq!(p.attention.alpha(), 1.0);
        assert!(p.all_finite());
    }

    #[test]
    fn container_round_trip_preserves_f32_values() {
        let params = ModelParams::init(small_config(), 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        let mut originals = Vec::new();
        params.for_each_tensor(|_, t| originals.push(t.clone()));
        let mut i = 0;
        loaded.for_each_tensor(|_, t| {
            for (&a, &b) in t.data.iter().zip(&originals[i].data) {
                assert_eq!(a, b as f32 as f64);
            }
            i += 1;
        });
        // Saving the loaded params again is byte-identical.
        let path2 = dir.path().join("model2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
