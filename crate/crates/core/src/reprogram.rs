//! Patch-to-token reprogramming: multi-head cross-attention from patch
//! embeddings (queries) onto text prototypes derived from a frozen
//! vocabulary table (keys and values).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::tensorio;

/// Frozen vocabulary embeddings plus a trainable linear map deriving V'
/// prototypes from them.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// (V x d_h), frozen.
    pub vocab_embeddings: Tensor,
    /// (V x V'), trainable.
    pub prototype_map: Tensor,
}

impl PrototypeBank {
    /// Seeded-random vocabulary standing in for a real LLM vocab table.
    pub fn init(vocab_size: usize, n_prototypes: usize, d_h: usize, seed: u64) -> Result<PrototypeBank> {
        if n_prototypes > vocab_size {
            return Err(Error::ReprogramConfig(format!(
                "V'={n_prototypes} exceeds vocab size V={vocab_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab_embeddings = Tensor::gaussian(vec![vocab_size, d_h], 1.0, false, &mut rng);
        let bound = 1.0 / (vocab_size as f64).sqrt();
        let prototype_map = Tensor::uniform(vec![vocab_size, n_prototypes], bound, true, &mut rng);
        Ok(PrototypeBank {
            vocab_embeddings,
            prototype_map,
        })
    }

    /// Load an external (V x d_h) vocabulary matrix; prototype map is seeded.
    pub fn from_vocab_file(path: &Path, n_prototypes: usize, d_h: usize, seed: u64) -> Result<PrototypeBank> {
        let (v, cols, data) = tensorio::read_matrix_file(path)?;
        if cols != d_h {
            return Err(Error::ReprogramConfig(format!(
                "vocab file has hidden dim {cols}, expected {d_h}"
            )));
        }
        if n_prototypes > v {
            return Err(Error::ReprogramConfig(format!(
                "V'={n_prototypes} exceeds vocab size V={v}"
            )));
        }
        let vocab_embeddings = Tensor::new(vec![v, d_h], data, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (v as f64).sqrt();
        let prototype_map = Tensor::uniform(vec![v, n_prototypes], bound, true, &mut rng);
        Ok(PrototypeBank {
            vocab_embeddings,
            prototype_map,
        })
    }

    pub fn n_prototypes(&self) -> usize {
        self.prototype_map.shape()[1]
    }

    /// E' = prototype_map^T * vocab_embeddings, shape (V' x d_h).
    pub fn prototypes(&self, tape: &mut Tape) -> Result<Tensor> {
        let mapped = tape.transpose(&self.prototype_map)?;
        tape.matmul(&mapped, &self.vocab_embeddings)
    }
}

/// Trainable projections of the cross-attention block. Queries come from the
/// d_e-dimensional patch space; keys and values from prototype space.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub heads: usize,
    /// (d_e x d_h)
    pub wq: Tensor,
    /// (d_h x d_h)
    pub wk: Tensor,
    /// (d_h x d_h)
    pub wv: Tensor,
    /// (d_h x d_h)
    pub wo: Tensor,
}

impl CrossAttention {
    pub fn init(d_e: usize, d_h: usize, heads: usize, seed: u64) -> Result<CrossAttention> {
        if heads == 0 || d_h % heads != 0 {
            return Err(Error::ReprogramConfig(format!(
                "heads K={heads} must divide d_h={d_h}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Query/key projections start hot (3x the usual fan-in scale) so the
        // attention over prototypes is peaked rather than near-uniform at
        // init; with a frozen backbone downstream, patch information only
        // reaches the head through how the mixing weights vary.
        let be = 3.0 / (d_e as f64).sqrt();
        let bh = 1.0 / (d_h as f64).sqrt();
        Ok(CrossAttention {
            heads,
            wq: Tensor::uniform(vec![d_e, d_h], be, true, &mut rng),
            wk: Tensor::uniform(vec![d_h, d_h], 3.0 * bh, true, &mut rng),
            wv: Tensor::uniform(vec![d_h, d_h], bh, true, &mut rng),
            wo: Tensor::uniform(vec![d_h, d_h], bh, true, &mut rng),
        })
    }

    pub fn d_h(&self) -> usize {
        self.wk.shape()[0]
    }
}

/// Column-wise concatenation via transpose + row concat + transpose.
fn concat_cols(tape: &mut Tape, parts: &[Tensor]) -> Result<Tensor> {
    let transposed: Vec<Tensor> = parts
        .iter()
        .map(|p| tape.transpose(p))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = transposed.iter().collect();
    let stacked = tape.concat(&refs)?;
    tape.transpose(&stacked)
}

/// Scaled dot-product multi-head cross-attention. Returns Z (m x d_h) and the
/// per-head attention weight matrices (m x V').
pub fn reprogram_patches_with_attention(
    tape: &mut Tape,
    patch_embeddings: &Tensor,
    bank: &PrototypeBank,
    attn: &CrossAttention,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d_h = attn.d_h();
    let k = attn.heads;
    if d_h % k != 0 {
        return Err(Error::ReprogramConfig(format!(
            "heads K={k} must divide d_h={d_h}"
        )));
    }
    let dk = d_h / k;
    let prototypes = bank.prototypes(tape)?;
    let q = tape.matmul(patch_embeddings, &attn.wq)?;
    let keys = tape.matmul(&prototypes, &attn.wk)?;
    let vals = tape.matmul(&prototypes, &attn.wv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(k);
    let mut attentions = Vec::with_capacity(k);
    for h in 0..k {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = tape.slice(&q, 1, lo, hi)?;
        let kh = tape.slice(&keys, 1, lo, hi)?;
        let vh = tape.slice(&vals, 1, lo, hi)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let weights = tape.softmax_rows(&scaled)?;
        head_outputs.push(tape.matmul(&weights, &vh)?);
        attentions.push(weights);
    }
    let merged = concat_cols(tape, &head_outputs)?;
    let z = tape.matmul(&merged, &attn.wo)?;
    Ok((z, attentions))
}

/// Map patch embeddings (m x d_e) into token space (m x d_h).
pub fn reprogram_patches(
    tape: &mut Tape,
    patch_embeddings: &Tensor,
    bank: &PrototypeBank,
    attn: &CrossAttention,
) -> Result<Tensor> {
    reprogram_patches_with_attention(tape, patch_embeddings, bank, attn).map(|(z, _)| z)
}

/// Row-wise concatenation of the d per-feature token sequences: M = d * m.
pub fn concat_features(tape: &mut Tape, sequences: &[Tensor]) -> Result<Tensor> {
    if sequences.is_empty() {
        return Err(Error::ReprogramConfig("concat_features of zero sequences".into()));
    }
    let first = sequences[0].shape();
    for s in sequences {
        if s.shape() != first {
            return Err(Error::ReprogramConfig(format!(
                "ragged feature sequences: {:?} vs {:?}",
                first,
                s.shape()
            )));
        }
    }
    let refs: Vec<&Tensor> = sequences.iter().collect();
    tape.concat(&refs)
}
