//! Per-channel patch embedding.
//!
//! Real feature extractors live outside this crate; their vectors enter via
//! bag files. The stub embedder below makes the full pipeline runnable and
//! testable without model weights: a fixed-seed random projection of the
//! normalized pixels followed by tanh.

use super::slide::{gray_to_rgb, Patch};
use crate::error::{Error, Result};
use crate::fusion::EmbeddedBag;
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Maps one replicated-RGB patch plane to a `d_emb` vector.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn d_emb(&self) -> usize;
    fn deterministic(&self) -> bool;
    /// `rgb` is `[3][h][w]` row-major with values in [0, 1].
    fn embed(&self, rgb: &[f32]) -> Result<Vec<f32>>;
}

/// Seeded random projection: `tanh(W x / sqrt(n_in))`, no bias. Each output
/// dimension draws its weight row from its own deterministic stream, so the
/// embedder needs no stored matrix and any input size works.
pub struct StubEmbedder {
    seed: u64,
    d_emb: usize,
}

impl StubEmbedder {
    pub fn new(seed: u64, d_emb: usize) -> Result<Self> {
        if d_emb == 0 {
            return Err(Error::contract("d_emb must be >= 1"));
        }
        Ok(StubEmbedder { seed, d_emb })
    }
}

impl Embedder for StubEmbedder {
    fn name(&self) -> &str {
        "stub"
    }

    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, rgb: &[f32]) -> Result<Vec<f32>> {
        if rgb.is_empty() {
            return Err(Error::contract("cannot embed an empty patch"));
        }
        let n_in = rgb.len();
        let scale = 1.0 / (n_in as f32).sqrt();
        let out = (0..self.d_emb)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut acc = 0.0f32;
                for &x in rgb {
                    let w: f32 = rng.gen_range(-1.0..1.0);
                    acc += w * x;
                }
                (acc * scale).tanh()
            })
            .collect();
        Ok(out)
    }
}

/// Embed every channel of every patch and assemble the `[K, M, d_emb]` bag.
/// Patches are embedded in parallel; output order follows the input order.
pub fn embed_bag(
    sample_id: String,
    channel_names: Vec<String>,
    patches: &[Patch],
    embedder: &dyn Embedder,
) -> Result<EmbeddedBag<f32>> {
    if patches.is_empty() {
        return Err(Error::contract(format!("sample {sample_id}: no foreground patches to embed")));
    }
    let m = patches[0].m;
    if channel_names.len() != m {
        return Err(Error::contract(format!(
            "{} channel names for {m} channels",
            channel_names.len()
        )));
    }
    let d = embedder.d_emb();
    let per_patch: Vec<Vec<f32>> = patches
        .par_iter()
        .map(|patch| -> Result<Vec<f32>> {
            if patch.m != m {
                return Err(Error::contract(format!(
                    "patch {:?} has {} channels, expected {m}",
                    patch.coords, patch.m
                )));
            }
            let plane_len = patch.size * patch.size;
            let max = patch.max_value as f32;
            let mut vecs = Vec::with_capacity(m * d);
            for ci in 0..m {
                let plane: Vec<f32> = patch.data[ci * plane_len..(ci + 1) * plane_len]
                    .iter()
                    .map(|&v| v as f32 / max)
                    .collect();
                let rgb = gray_to_rgb(&plane);
                let v = embedder.embed(&rgb).map_err(|e| {
                    Error::Io(std::io::Error::other(format!(
                        "embedding failed at patch ({}, {}) channel {ci}: {e}",
                        patch.coords.0, patch.coords.1
                    )))
                })?;
                if v.len() != d {
                    return Err(Error::contract(format!(
                        "embedder returned {} values, promised d_emb {d}",
                        v.len()
                    )));
                }
                vecs.extend(v);
            }
            Ok(vecs)
        })
        .collect::<Result<_>>()?;

    let k = patches.len();
    let mut data = Vec::with_capacity(k * m * d);
    for v in per_patch {
        data.extend(v);
    }
    let coords: Vec<(u32, u32)> = patches.iter().map(|p| p.coords).collect();
    EmbeddedBag::new(
        sample_id,
        channel_names,
        coords,
        Tensor::new(vec![k, m, d], data)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(coords: (u32, u32), m: usize, size: usize, fill: impl Fn(usize) -> u16) -> Patch {
        Patch {
            coords,
            m,
            size,
            max_value: 255,
            data: (0..m * size * size).map(fill).collect(),
        }
    }

    #[test]
    fn stub_is_deterministic() {
        let e = StubEmbedder::new(7, 16).unwrap();
        let rgb: Vec<f32> = (0..48).map(|i| (i as f32) / 48.0).collect();
        let a = e.embed(&rgb).unwrap();
        let b = e.embed(&rgb).unwrap();
        assert_eq!(a, b);
        assert!(e.deterministic());
    }

    #[test]
    fn zero_patch_embeds_to_zero() {
        let e = StubEmbedder::new(7, 8).unwrap();
        let rgb = vec![0.0f32; 27];
        let v = e.embed(&rgb).unwrap();
        assert!(v.iter().all(|&x| x == 0.0), "tanh of a zero projection is zero");
    }

    #[test]
    fn different_seeds_give_different_embeddings() {
        let rgb: Vec<f32> = (0..48).map(|i| (i as f32) / 48.0).collect();
        let a = StubEmbedder::new(1, 8).unwrap().embed(&rgb).unwrap();
        let b = StubEmbedder::new(2, 8).unwrap().embed(&rgb).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn embed_bag_matches_straight_line_recomputation() {
        let e = StubEmbedder::new(11, 6);
        let e = e.unwrap();
        let patches = vec![
            patch((0, 0), 2, 4, |i| (i * 7 % 256) as u16),
            patch((0, 1), 2, 4, |i| (i * 13 % 256) as u16),
        ];
        let bag = embed_bag(
            "s1".into(),
            vec!["a".into(), "b".into()],
            &patches,
            &e,
        )
        .unwrap();
        assert_eq!(bag.h.shape(), &[2, 2, 6]);
        assert_eq!(bag.coords, vec![(0, 0), (0, 1)]);

        // straight-line: normalize, replicate, project, in the same layout
        for (pi, p) in patches.iter().enumerate() {
            for ci in 0..2 {
                let plane: Vec<f32> = p.data[ci * 16..(ci + 1) * 16]
                    .iter()
                    .map(|&v| v as f32 / 255.0)
                    .collect();
                let mut rgb = Vec::new();
                for _ in 0..3 {
                    rgb.extend_from_slice(&plane);
                }
                let want = e.embed(&rgb).unwrap();
                for (j, &w) in want.iter().enumerate() {
                    let got = bag.h.data()[(pi * 2 + ci) * 6 + j];
                    assert_eq!(got, w, "patch {pi} channel {ci} dim {j}");
                }
            }
        }
    }

    #[test]
    fn embeddings_lie_in_tanh_range() {
        let e = StubEmbedder::new(3, 32).unwrap();
        let patches = vec![patch((0, 0), 1, 8, |i| (i % 251) as u16)];
        let bag = embed_bag("s".into(), vec!["x".into()], &patches, &e).unwrap();
        assert!(bag.h.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_patch_list_is_rejected() {
        let e = StubEmbedder::new(1, 4).unwrap();
        assert!(embed_bag("s".into(), vec![], &[], &e).is_err());
    }
}
