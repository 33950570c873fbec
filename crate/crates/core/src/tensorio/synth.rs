//! Synthetic latent-concept datasets.
//!
//! Each concept `c` owns a unit latent `μ_c`. An image draws an instance
//! latent `z = μ_c + σ·ξ` (ξ standard normal), and every feature stream
//! (regions, words, image global, text global) is `M_s z` plus independent
//! noise of scale `σ·ρ`, where `M_s` is a fixed random map with orthonormal
//! columns from the latent space into that stream's feature space. Captions
//! of an image share its `z`, so pairs are recoverable from either side and
//! concepts are recoverable from any single vector.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{BundleFiles, DatasetManifest, FeatureDims, PairEntry};
use super::write_mat;
use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub num_concepts: usize,
    /// Training images per concept.
    pub pairs_per_concept: usize,
    /// Additional held-out images per concept, tagged with split "test".
    pub heldout_per_concept: usize,
    pub captions_per_image: usize,
    pub d_v: usize,
    pub d_w: usize,
    pub d_g: usize,
    pub n_r: usize,
    pub n_t: usize,
    pub noise_sigma: f64,
    /// Per-stream noise relative to `noise_sigma`.
    pub modality_noise_ratio: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            num_concepts: 8,
            pairs_per_concept: 25,
            heldout_per_concept: 5,
            captions_per_image: 1,
            d_v: 64,
            d_w: 64,
            d_g: 32,
            n_r: 8,
            n_t: 6,
            noise_sigma: 0.1,
            modality_noise_ratio: 0.5,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.num_concepts < 2 {
            return bad("num_concepts must be at least 2");
        }
        if self.pairs_per_concept + self.heldout_per_concept == 0 {
            return bad("at least one image per concept is required");
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be at least 1");
        }
        if [self.d_v, self.d_w, self.d_g, self.n_r, self.n_t].contains(&0) {
            return bad("dims and counts must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite nonnegative number");
        }
        if !(self.modality_noise_ratio >= 0.0 && self.modality_noise_ratio.is_finite()) {
            return bad("modality_noise_ratio must be a finite nonnegative number");
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.d_v.min(self.d_w).min(self.d_g)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// `out_dim × latent` with orthonormal columns (modified Gram-Schmidt).
fn orthonormal_map(rng: &mut ChaCha8Rng, out_dim: usize, latent: usize) -> Mat {
    let mut m = gaussian(rng, out_dim, latent);
    for j in 0..latent {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

struct Streams {
    regions: Mat,
    words: Mat,
    global_image: Mat,
    global_text: Mat,
}

/// Generates tensors under `out_dir/tensors` and returns the manifest
/// (also written to `out_dir/manifest.json`).
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = spec.latent_dim();
    let maps = Streams {
        regions: orthonormal_map(&mut rng, spec.d_v, latent),
        words: orthonormal_map(&mut rng, spec.d_w, latent),
        global_image: orthonormal_map(&mut rng, spec.d_g, latent),
        global_text: orthonormal_map(&mut rng, spec.d_g, latent),
    };
    let concepts: Vec<Mat> = (0..spec.num_concepts)
        .map(|_| {
            let mu = gaussian(&mut rng, 1, latent);
            let n = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            mu / n
        })
        .collect();

    let sigma = spec.noise_sigma;
    let stream_sigma = sigma * spec.modality_noise_ratio;
    // rows × latent instance latents mapped through `map` plus stream noise.
    let emit = |rng: &mut ChaCha8Rng, z: &Mat, map: &Mat, rows: usize| -> Mat {
        let clean = z.dot(&map.t());
        let mut out = Mat::zeros((rows, map.nrows()));
        for mut row in out.rows_mut() {
            row.assign(&clean.row(0));
        }
        if stream_sigma > 0.0 {
            out += &(gaussian(rng, rows, map.nrows()) * stream_sigma);
        }
        out
    };

    let dims = FeatureDims {
        d_v: spec.d_v,
        d_w: spec.d_w,
        d_g: spec.d_g,
    };
    let mut manifest = DatasetManifest::new(spec.name.clone(), dims, out_dir);
    let per_concept = spec.pairs_per_concept + spec.heldout_per_concept;
    let mut image_idx = 0usize;
    let mut caption_idx = 0usize;
    for (c, mu) in concepts.iter().enumerate() {
        for local in 0..per_concept {
            let split = if local < spec.pairs_per_concept { "train" } else { "test" };
            let mut z = mu.clone();
            if sigma > 0.0 {
                z += &(gaussian(&mut rng, 1, latent) * sigma);
            }
            let image_id = format!("img_{image_idx:05}");
            let regions_rel = format!("tensors/{image_id}.regions.aahr");
            let global_image_rel = format!("tensors/{image_id}.global.aahr");
            write_mat(&emit(&mut rng, &z, &maps.regions, spec.n_r), out_dir.join(&regions_rel))?;
            write_mat(&emit(&mut rng, &z, &maps.global_image, 1), out_dir.join(&global_image_rel))?;

            let mut captions = BTreeSet::new();
            for _ in 0..spec.captions_per_image {
                let caption_id = format!("cap_{caption_idx:05}");
                let words_rel = format!("tensors/{caption_id}.words.aahr");
                let global_text_rel = format!("tensors/{caption_id}.global.aahr");
                write_mat(&emit(&mut rng, &z, &maps.words, spec.n_t), out_dir.join(&words_rel))?;
                write_mat(&emit(&mut rng, &z, &maps.global_text, 1), out_dir.join(&global_text_rel))?;
                manifest.pairs.push(PairEntry {
                    pair_id: format!("pair_{caption_idx:05}_c{c}"),
                    image_id: image_id.clone(),
                    caption_id: caption_id.clone(),
                    split: split.to_string(),
                    n_r: spec.n_r,
                    n_t: spec.n_t,
                    files: BundleFiles {
                        regions: regions_rel.clone(),
                        words: words_rel,
                        global_image: global_image_rel.clone(),
                        global_text: global_text_rel,
                    },
                });
                captions.insert(caption_id);
                caption_idx += 1;
            }
            manifest.positives.insert(image_id, captions);
            image_idx += 1;
        }
    }
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Concept index encoded in a synthetic pair id (`pair_XXXXX_cN`).
pub fn synthetic_concept(pair_id: &str) -> Option<usize> {
    pair_id.rsplit_once("_c").and_then(|(_, c)| c.parse().ok())
}
