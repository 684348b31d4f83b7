//! Frozen pre-norm transformer encoder standing in for a pretrained LLM
//! backbone. Gradients flow through its forward pass but never into its
//! parameters.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::tensorio;

fn default_false() -> bool {
    false
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_h: usize,
    pub n_attn_heads: usize,
    pub d_ff: usize,
    pub causal: bool,
    /// Optional frozen sinusoidal positional encoding added to the input.
    #[serde(default = "default_false")]
    pub sinusoidal_pos: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // Desk-scale defaults; larger stacks go through config.
        BackboneConfig {
            n_layers: 2,
            d_h: 32,
            n_attn_heads: 4,
            d_ff: 64,
            causal: true,
            sinusoidal_pos: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Backbone("n_layers must be >= 1".into()));
        }
        if self.n_attn_heads == 0 || self.d_h % self.n_attn_heads != 0 {
            return Err(Error::Backbone(format!(
                "n_attn_heads {} must divide d_h {}",
                self.n_attn_heads, self.d_h
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_offset: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_offset: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1_scale", &self.ln1_scale),
            ("ln1_offset", &self.ln1_offset),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_scale", &self.ln2_scale),
            ("ln2_offset", &self.ln2_offset),
        ]
    }
}

/// All backbone parameters, requires_grad = false throughout.
#[derive(Debug, Clone)]
pub struct FrozenWeights {
    pub cfg: BackboneConfig,
    pub layers: Vec<LayerWeights>,
    pub final_scale: Tensor,
    pub final_offset: Tensor,
}

impl FrozenWeights {
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_scale".into(), &self.final_scale));
        out.push(("final_offset".into(), &self.final_offset));
        out
    }

    /// Combined checksum over every parameter; used by the freeze contract.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.all_tensors() {
            name.hash(&mut h);
            t.checksum().hash(&mut h);
        }
        h.finish()
    }

    /// Keep only the first `k` layers (LLM-layer ablation). Shares storage.
    pub fn truncated(&self, k: usize) -> Result<FrozenWeights> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::Backbone(format!(
                "cannot truncate {}-layer backbone to {k} layers",
                self.layers.len()
            )));
        }
        let mut cfg = self.cfg;
        cfg.n_layers = k;
        Ok(FrozenWeights {
            cfg,
            layers: self.layers[..k].to_vec(),
            final_scale: self.final_scale.clone(),
            final_offset: self.final_offset.clone(),
        })
    }
}

/// Deterministic scaled-Gaussian backbone from a seed; all tensors frozen.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<FrozenWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_h = cfg.d_h;
    let d_ff = cfg.d_ff;
    let std_h = 1.0 / (d_h as f64).sqrt();
    let std_ff = 1.0 / (d_ff as f64).sqrt();
    let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n], false).unwrap();
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            wq: Tensor::gaussian(vec![d_h, d_h], std_h, false, &mut rng),
            wk: Tensor::gaussian(vec![d_h, d_h], std_h, false, &mut rng),
            wv: Tensor::gaussian(vec![d_h, d_h], std_h, false, &mut rng),
            wo: Tensor::gaussian(vec![d_h, d_h], std_h, false, &mut rng),
            ln1_scale: ones(d_h),
            ln1_offset: Tensor::zeros(vec![d_h], false),
            w1: Tensor::gaussian(vec![d_h, d_ff], std_h, false, &mut rng),
            b1: Tensor::zeros(vec![d_ff], false),
            w2: Tensor::gaussian(vec![d_ff, d_h], std_ff, false, &mut rng),
            b2: Tensor::zeros(vec![d_h], false),
            ln2_scale: ones(d_h),
            ln2_offset: Tensor::zeros(vec![d_h], false),
        })
        .collect();
    Ok(FrozenWeights {
        cfg: *cfg,
        layers,
        final_scale: ones(d_h),
        final_offset: Tensor::zeros(vec![d_h], false),
    })
}

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    cfg: BackboneConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Save as a layer-manifest JSON plus a binary file of f64 matrices.
pub fn save_backbone(weights: &FrozenWeights, manifest_path: &Path, bin_path: &Path) -> Result<()> {
    let tensors = weights.all_tensors();
    let manifest = WeightManifest {
        cfg: weights.cfg,
        tensors: tensors
            .iter()
            .map(|(name, t)| (name.clone(), t.shape()))
            .collect(),
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    for (_, t) in &tensors {
        let shape = t.shape();
        let (rows, cols) = if shape.len() == 2 {
            (shape[0], shape[1])
        } else {
            (shape[0], 1)
        };
        tensorio::write_matrix(&mut f, rows, cols, &t.data())?;
    }
    use std::io::Write;
    f.flush()?;
    Ok(())
}

/// Load backbone weights, validating every dimension against `cfg`.
pub fn load_backbone(cfg: &BackboneConfig, manifest_path: &Path, bin_path: &Path) -> Result<FrozenWeights> {
    cfg.validate()?;
    let manifest: WeightManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.cfg.n_layers != cfg.n_layers
        || manifest.cfg.d_h != cfg.d_h
        || manifest.cfg.d_ff != cfg.d_ff
        || manifest.cfg.n_attn_heads != cfg.n_attn_heads
    {
        return Err(Error::Backbone(format!(
            "weight file config (layers={}, d_h={}, d_ff={}, heads={}) does not match requested (layers={}, d_h={}, d_ff={}, heads={})",
            manifest.cfg.n_layers,
            manifest.cfg.d_h,
            manifest.cfg.d_ff,
            manifest.cfg.n_attn_heads,
            cfg.n_layers,
            cfg.d_h,
            cfg.d_ff,
            cfg.n_attn_heads
        )));
    }
    let mut f = std::io::BufReader::new(std::fs::File::open(bin_path)?);
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for (name, shape) in &manifest.tensors {
        let (rows, cols, data) = tensorio::read_matrix(&mut f)?;
        let expect = if shape.len() == 2 {
            (shape[0], shape[1])
        } else {
            (shape[0], 1)
        };
        if (rows, cols) != expect {
            return Err(Error::Backbone(format!(
                "tensor {name}: file has {rows}x{cols}, manifest says {:?}",
                shape
            )));
        }
        loaded.push(Tensor::new(shape.clone(), data, false)?);
    }
    let per_layer = 12;
    if loaded.len() != cfg.n_layers * per_layer + 2 {
        return Err(Error::Backbone(format!(
            "weight file holds {} tensors, expected {}",
            loaded.len(),
            cfg.n_layers * per_layer + 2
        )));
    }
    let mut it = loaded.into_iter();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: it.next().unwrap(),
            wk: it.next().unwrap(),
            wv: it.next().unwrap(),
            wo: it.next().unwrap(),
            ln1_scale: it.next().unwrap(),
            ln1_offset: it.next().unwrap(),
            w1: it.next().unwrap(),
            b1: it.next().unwrap(),
            w2: it.next().unwrap(),
            b2: it.next().unwrap(),
            ln2_scale: it.next().unwrap(),
            ln2_offset: it.next().unwrap(),
        });
    }
    Ok(FrozenWeights {
        cfg: *cfg,
        layers,
        final_scale: it.next().unwrap(),
        final_offset: it.next().unwrap(),
    })
}

fn layernorm_affine(
    tape: &mut Tape,
    x: &Tensor,
    scale: &Tensor,
    offset: &Tensor,
) -> Result<Tensor> {
    let normed = tape.layernorm_rows(x, 1e-5)?;
    let s = tape.broadcast(scale, normed.shape())?;
    let scaled = tape.mul(&normed, &s)?;
    let o = tape.broadcast(offset, scaled.shape())?;
    tape.add(&scaled, &o)
}

fn causal_mask(m: usize) -> Tensor {
    // exp(-1e9) underflows to exactly 0, so masked positions get weight 0.
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            data[i * m + j] = -1e9;
        }
    }
    Tensor::matrix(m, m, data).unwrap()
}

fn sinusoidal_table(m: usize, d_h: usize) -> Tensor {
    let mut data = vec![0.0; m * d_h];
    for pos in 0..m {
        for i in 0..d_h / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_h as f64);
            data[pos * d_h + 2 * i] = rate.sin();
            if 2 * i + 1 < d_h {
                data[pos * d_h + 2 * i + 1] = rate.cos();
            }
        }
    }
    Tensor::matrix(m, d_h, data).unwrap()
}

fn self_attention(
    tape: &mut Tape,
    x: &Tensor,
    layer: &LayerWeights,
    cfg: &BackboneConfig,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let d_h = cfg.d_h;
    let k = cfg.n_attn_heads;
    let dk = d_h / k;
    let q = tape.matmul(x, &layer.wq)?;
    let keys = tape.matmul(x, &layer.wk)?;
    let vals = tape.matmul(x, &layer.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(k);
    for h in 0..k {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice(&q, 1, lo, hi)?;
        let kh = tape.slice(&keys, 1, lo, hi)?;
        let vh = tape.slice(&vals, 1, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let mut scaled = tape.scale(&scores, scale)?;
        if let Some(mask) = mask {
            scaled = tape.add(&scaled, mask)?;
        }
        let weights = tape.softmax_rows(&scaled)?;
        heads.push(tape.matmul(&weights, &vh)?);
    }
    // Column-concatenate heads, then output-project.
    let transposed: Vec<Tensor> = heads
        .iter()
        .map(|h| tape.transpose(h))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = transposed.iter().collect();
    let stacked = tape.concat(&refs)?;
    let merged = tape.transpose(&stacked)?;
    tape.matmul(&merged, &layer.wo)
}

/// Run the frozen stack over a token sequence, producing hidden states H of
/// the same (M x d_h) shape.
pub fn backbone_forward(tape: &mut Tape, tokens: &Tensor, weights: &FrozenWeights) -> Result<Tensor> {
    let cfg = &weights.cfg;
    let shape = tokens.shape();
    if shape.len() != 2 || shape[1] != cfg.d_h {
        return Err(Error::Backbone(format!(
            "tokens have shape {shape:?}, expected (M, {})",
            cfg.d_h
        )));
    }
    let m = shape[0];
    let mask = cfg.causal.then(|| causal_mask(m));
    let mut x = tokens.clone();
    if cfg.sinusoidal_pos {
        let table = sinusoidal_table(m, cfg.d_h);
        x = tape.add(&x, &table)?;
    }
    for (idx, layer) in weights.layers.iter().enumerate() {
        let normed = layernorm_affine(tape, &x, &layer.ln1_scale, &layer.ln1_offset)?;
        let attn = self_attention(tape, &normed, layer, cfg, mask.as_ref())?;
        x = tape.add(&x, &attn)?;
        let normed2 = layernorm_affine(tape, &x, &layer.ln2_scale, &layer.ln2_offset)?;
        let hidden = tape.matmul(&normed2, &layer.w1)?;
        let b1 = tape.broadcast(&layer.b1, hidden.shape())?;
        let hidden = tape.add(&hidden, &b1)?;
        let act = tape.gelu(&hidden)?;
        let ff = tape.matmul(&act, &layer.w2)?;
        let b2 = tape.broadcast(&layer.b2, ff.shape())?;
        let ff = tape.add(&ff, &b2)?;
        x = tape.add(&x, &ff)?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Backbone(format!(
                "non-finite hidden state after layer {idx}"
            )));
        }
    }
    layernorm_affine(tape, &x, &weights.final_scale, &weights.final_offset)
}
