//! Overlapping temporal patches and their learnable projection into the
//! embedding space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_length: usize,
    pub stride: usize,
    pub embed_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_length: 8,
            stride: 4,
            embed_dim: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_length || self.embed_dim == 0 {
            return Err(Error::Train(format!(
                "patch config invalid: L={} S={} d_e={}",
                self.patch_length, self.stride, self.embed_dim
            )));
        }
        Ok(())
    }

    /// m = floor((T - L) / S) + 1
    pub fn patch_count(&self, t: usize) -> Result<usize> {
        if t < self.patch_length {
            return Err(Error::TooShort {
                t,
                l: self.patch_length,
            });
        }
        Ok((t - self.patch_length) / self.stride + 1)
    }
}

/// Trainable linear projection from patch space to the embedding space.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    /// (L x d_e)
    pub weight: Tensor,
    /// (d_e)
    pub bias: Tensor,
}

impl PatchEmbedding {
    /// Uniform init in +-1/sqrt(L) from the given seed.
    pub fn init(cfg: &PatchConfig, seed: u64) -> PatchEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cfg.patch_length as f64).sqrt();
        PatchEmbedding {
            weight: Tensor::uniform(
                vec![cfg.patch_length, cfg.embed_dim],
                bound,
                true,
                &mut rng,
            ),
            bias: Tensor::uniform(vec![cfg.embed_dim], bound, true, &mut rng),
        }
    }
}

/// Segment a row of length T into m overlapping patches of length L.
/// Trailing timepoints not covered by the final patch are dropped.
pub fn make_patches(x: &[f64], cfg: &PatchConfig) -> Result<Tensor> {
    let m = cfg.patch_count(x.len())?;
    let mut data = Vec::with_capacity(m * cfg.patch_length);
    for p in 0..m {
        let start = p * cfg.stride;
        data.extend_from_slice(&x[start..start + cfg.patch_length]);
    }
    Tensor::matrix(m, cfg.patch_length, data)
}

/// X_hat = patches * weight + bias, recorded on the tape.
pub fn embed_patches(tape: &mut Tape, patches: &Tensor, emb: &PatchEmbedding) -> Result<Tensor> {
    let projected = tape.matmul(patches, &emb.weight)?;
    let bias = tape.broadcast(&emb.bias, projected.shape())?;
    tape.add(&projected, &bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference_check;
    use proptest::prelude::*;

    #[test]
    fn patch_count_examples() {
        let cfg = PatchConfig::default();
        assert_eq!(cfg.patch_count(100).unwrap(), 24);
        assert_eq!(cfg.patch_count(8).unwrap(), 1);
        assert!(matches!(cfg.patch_count(7), Err(Error::TooShort { t: 7, l: 8 })));
    }

    #[test]
    fn single_patch_is_the_row() {
        let cfg = PatchConfig::default();
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let p = make_patches(&x, &cfg).unwrap();
        assert_eq!(p.shape(), vec![1, 8]);
        assert_eq!(p.data(), x);
    }

    #[test]
    fn identity_weight_passes_patches_through() {
        let cfg = PatchConfig {
            patch_length: 4,
            stride: 2,
            embed_dim: 4,
        };
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let emb = PatchEmbedding {
            weight: Tensor::new(vec![4, 4], eye, true).unwrap(),
            bias: Tensor::zeros(vec![4], true),
        };
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let patches = make_patches(&x, &cfg).unwrap();
        let mut tape = Tape::new();
        let out = embed_patches(&mut tape, &patches, &emb).unwrap();
        assert_eq!(out.data(), patches.data());
    }

    #[test]
    fn zero_weights_zero_output() {
        let cfg = PatchConfig::default();
        let emb = PatchEmbedding {
            weight: Tensor::zeros(vec![8, 8], true),
            bias: Tensor::zeros(vec![8], true),
        };
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let patches = make_patches(&x, &cfg).unwrap();
        let mut tape = Tape::new();
        let out = embed_patches(&mut tape, &patches, &emb).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let cfg = PatchConfig {
            patch_length: 4,
            stride: 2,
            embed_dim: 3,
        };
        let x: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.6).collect();
        let patches = make_patches(&x, &cfg).unwrap();
        let emb = PatchEmbedding::init(&cfg, 99);
        let err = finite_difference_check(
            |tape, w| {
                let probe = PatchEmbedding {
                    weight: w.clone(),
                    bias: emb.bias.clone(),
                };
                let out = embed_patches(tape, &patches, &probe)?;
                tape.sum(&out)
            },
            &emb.weight,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "fd error {err}");
        // Analytic check: d sum / d weight = columnwise patch sums.
        let mut tape = Tape::new();
        let out = embed_patches(&mut tape, &patches, &emb).unwrap();
        let loss = tape.sum(&out).unwrap();
        emb.weight.zero_grad();
        tape.backward(&loss).unwrap();
        let grad = emb.weight.grad().unwrap();
        let pd = patches.data();
        let m = patches.shape()[0];
        for l in 0..cfg.patch_length {
            let col_sum: f64 = (0..m).map(|p| pd[p * cfg.patch_length + l]).sum();
            for e in 0..cfg.embed_dim {
                assert!((grad[l * cfg.embed_dim + e] - col_sum).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_is_linear_without_bias() {
        let cfg = PatchConfig {
            patch_length: 4,
            stride: 2,
            embed_dim: 3,
        };
        let emb = PatchEmbedding {
            weight: PatchEmbedding::init(&cfg, 7).weight,
            bias: Tensor::zeros(vec![3], true),
        };
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
        let alpha = 2.5;
        let patches = make_patches(&x, &cfg).unwrap();
        let scaled_x: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let scaled_patches = make_patches(&scaled_x, &cfg).unwrap();
        let mut tape = Tape::new();
        let a = embed_patches(&mut tape, &patches, &emb).unwrap();
        let b = embed_patches(&mut tape, &scaled_patches, &emb).unwrap();
        for (av, bv) in a.data().iter().zip(b.data().iter()) {
            assert!((alpha * av - bv).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn patch_count_matches_enumeration(t in 1usize..200, l in 1usize..20, s in 1usize..20) {
            prop_assume!(s <= l && l <= t);
            let cfg = PatchConfig { patch_length: l, stride: s, embed_dim: 1 };
            // Naive enumeration: count start offsets whose patch fits.
            let naive = (0..t).step_by(s).take_while(|&start| start + l <= t).count();
            prop_assert_eq!(cfg.patch_count(t).unwrap(), naive);
        }
    }
}
