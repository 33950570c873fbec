//! Inference-time embeddings. Each image and each caption is encoded on
//! its own, so results never depend on which other items are processed.
//!
//! Output directory layout:
//!
//! ```text
//! image_embeddings.aahr   N_i × d, one row per image
//! text_embeddings.aahr    N_t × d, one row per caption
//! index.json              {"split", "embed_dim", "images": [ids], "texts": [ids]}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::load_checkpoint;
use crate::autodiff::Mat;
use crate::encoder::{check_bundle_dims, encode_modality, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvaluationReport};
use crate::tensorio::{read_mat, write_mat, DatasetManifest, FeatureBundle};

pub const INDEX_FILE: &str = "index.json";
pub const IMAGE_EMBEDDINGS_FILE: &str = "image_embeddings.aahr";
pub const TEXT_EMBEDDINGS_FILE: &str = "text_embeddings.aahr";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub split: Option<String>,
    pub image_ids: Vec<String>,
    pub text_ids: Vec<String>,
    pub images: Mat,
    pub texts: Mat,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    split: Option<String>,
    embed_dim: usize,
    images: Vec<String>,
    texts: Vec<String>,
}

/// Image and text embeddings of the given bundles, one row per bundle.
pub fn embed_bundles(params: &EncoderParams<Mat>, bundles: &[&FeatureBundle]) -> Result<(Mat, Mat)> {
    let d = params.joint_dim();
    let mut images = Mat::zeros((bundles.len(), d));
    let mut texts = Mat::zeros((bundles.len(), d));
    for (i, b) in bundles.iter().enumerate() {
        check_bundle_dims(b, params)?;
        images.row_mut(i).assign(&encode_modality(&b.regions, &b.global_image, params, Modality::Image));
        texts.row_mut(i).assign(&encode_modality(&b.words, &b.global_text, params, Modality::Text));
    }
    Ok((images, texts))
}

/// Embeds every distinct image and caption of a split (all pairs when `split` is `None`).
pub fn embed_split(params: &EncoderParams<Mat>, manifest: &DatasetManifest, split: Option<&str>) -> Result<EmbeddingSet> {
    if manifest.dims != params.input_dims() {
        return Err(Error::Congruence(format!(
            "manifest feature dims {:?} differ from the checkpoint's {:?}",
            manifest.dims,
            params.input_dims()
        )));
    }
    let d = params.joint_dim();
    let mut image_rows: BTreeMap<String, usize> = BTreeMap::new();
    let mut image_ids = Vec::new();
    let mut text_ids = Vec::new();
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for pair in manifest.pairs.iter().filter(|p| split.is_none_or(|s| p.split == s)) {
        let b = manifest.read_bundle(&pair.pair_id)?;
        check_bundle_dims(&b, params)?;
        if !image_rows.contains_key(&pair.image_id) {
            image_rows.insert(pair.image_id.clone(), image_ids.len());
            image_ids.push(pair.image_id.clone());
            images.push(encode_modality(&b.regions, &b.global_image, params, Modality::Image));
        }
        text_ids.push(pair.caption_id.clone());
        texts.push(encode_modality(&b.words, &b.global_text, params, Modality::Text));
    }
    if image_ids.is_empty() {
        return Err(Error::Dataset(format!("no pairs in split {split:?}")));
    }
    let stack = |rows: &[ndarray::Array1<f64>]| {
        let mut m = Mat::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        m
    };
    Ok(EmbeddingSet {
        split: split.map(str::to_string),
        images: stack(&images),
        texts: stack(&texts),
        image_ids,
        text_ids,
    })
}

pub fn write_embeddings(set: &EmbeddingSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_mat(&set.images, dir.join(IMAGE_EMBEDDINGS_FILE))?;
    write_mat(&set.texts, dir.join(TEXT_EMBEDDINGS_FILE))?;
    let index = Index {
        split: set.split.clone(),
        embed_dim: set.images.ncols(),
        images: set.image_ids.clone(),
        texts: set.text_ids.clone(),
    };
    let path = dir.join(INDEX_FILE);
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_embeddings(dir: &Path) -> Result<EmbeddingSet> {
    let path = dir.join(INDEX_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let images = read_mat(dir.join(IMAGE_EMBEDDINGS_FILE))?;
    let texts = read_mat(dir.join(TEXT_EMBEDDINGS_FILE))?;
    if images.dim() != (index.images.len(), index.embed_dim) || texts.dim() != (index.texts.len(), index.embed_dim) {
        return Err(Error::Shape(format!(
            "embedding files {:?} / {:?} disagree with {} ({} images, {} texts, d = {})",
            images.dim(),
            texts.dim(),
            path.display(),
            index.images.len(),
            index.texts.len(),
            index.embed_dim
        )));
    }
    Ok(EmbeddingSet {
        split: index.split,
        image_ids: index.images,
        text_ids: index.texts,
        images,
        texts,
    })
}

/// Loads a checkpoint, embeds a split and writes the embedding directory.
pub fn embed(checkpoint: &Path, manifest: &DatasetManifest, out: &Path, split: Option<&str>) -> Result<EmbeddingSet> {
    let state = load_checkpoint(checkpoint)?;
    let set = embed_split(&state.params.encoder, manifest, split)?;
    write_embeddings(&set, out)?;
    Ok(set)
}

/// Per-image text indices from the manifest's positive sets, restricted to embedded captions.
pub fn ground_truth(set: &EmbeddingSet, manifest: &DatasetManifest) -> Result<Vec<Vec<usize>>> {
    let text_index: BTreeMap<&str, usize> = set.text_ids.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    set.image_ids
        .iter()
        .map(|img| {
            let caps = manifest
                .positives
                .get(img)
                .ok_or_else(|| Error::Protocol(format!("image {img} has no ground-truth entry")))?;
            let found: Vec<usize> = caps.iter().filter_map(|c| text_index.get(c.as_str()).copied()).collect();
            if found.is_empty() {
                return Err(Error::Protocol(format!("image {img} has no positive caption among the embeddings")));
            }
            Ok(found)
        })
        .collect()
}

pub fn evaluate_embeddings(set: &EmbeddingSet, manifest: &DatasetManifest) -> Result<EvaluationReport> {
    evaluate(&set.images, &set.texts, &ground_truth(set, manifest)?)
}
