use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_tensor;
use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Feature widths shared by every pair of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    /// Region feature width.
    pub d_v: usize,
    /// Word feature width.
    pub d_w: usize,
    /// Global (image and text) feature width.
    pub d_g: usize,
}

/// Tensor files of one pair, relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub regions: String,
    pub words: String,
    pub global_image: String,
    pub global_text: String,
}

fn default_split() -> String {
    "train".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pair_id: String,
    pub image_id: String,
    pub caption_id: String,
    #[serde(default = "default_split")]
    pub split: String,
    /// Declared number of regions.
    pub n_r: usize,
    /// Declared number of words.
    pub n_t: usize,
    pub files: BundleFiles,
}

/// A dataset description: pairs, their tensor files, and the many-to-many
/// image ↔ caption ground truth used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dims: FeatureDims,
    pub pairs: Vec<PairEntry>,
    /// image_id → caption_ids that correctly describe it.
    pub positives: BTreeMap<String, BTreeSet<String>>,
    #[serde(skip)]
    root: PathBuf,
}

/// Precomputed inputs for one image-caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub pair_id: String,
    /// `n_r × d_v`
    pub regions: Mat,
    /// `n_t × d_w`
    pub words: Mat,
    /// `1 × d_g`
    pub global_image: Mat,
    /// `1 × d_g`
    pub global_text: Mat,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        if self.regions.nrows() == 0 || self.words.nrows() == 0 {
            return Err(Error::Dataset(format!(
                "pair {}: bundles need at least one region and one word",
                self.pair_id
            )));
        }
        if self.global_image.nrows() != 1 || self.global_text.nrows() != 1 {
            return Err(Error::Shape(format!("pair {}: globals must be vectors", self.pair_id)));
        }
        let finite = [&self.regions, &self.words, &self.global_image, &self.global_text]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numeric(format!("pair {}: non-finite feature", self.pair_id)));
        }
        Ok(())
    }
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, dims: FeatureDims, root: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            dims,
            pairs: Vec::new(),
            positives: BTreeMap::new(),
            root: root.into(),
        }
    }

    /// Directory that relative tensor paths resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check_structure()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness and that each pair is its own positive.
    pub fn check_structure(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate pair_id {}", p.pair_id)));
            }
            if p.n_r == 0 || p.n_t == 0 {
                return Err(Error::Dataset(format!("pair {} declares an empty feature set", p.pair_id)));
            }
            let linked = self
                .positives
                .get(&p.image_id)
                .is_some_and(|caps| caps.contains(&p.caption_id));
            if !linked {
                return Err(Error::Dataset(format!(
                    "pair {} ({} / {}) is missing from positives",
                    p.pair_id, p.image_id, p.caption_id
                )));
            }
        }
        Ok(())
    }

    /// Full validation: structure plus every referenced tensor file parses
    /// with the declared dims.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        for p in &self.pairs {
            self.read_bundle(&p.pair_id)?;
        }
        Ok(())
    }

    pub fn pair(&self, pair_id: &str) -> Option<&PairEntry> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn pairs_in_split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a PairEntry> + 'a {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn read_bundle(&self, pair_id: &str) -> Result<FeatureBundle> {
        let entry = self
            .pair(pair_id)
            .ok_or_else(|| Error::Dataset(format!("pair {pair_id} not in manifest {}", self.name)))?;
        let d = self.dims;
        let load = |rel: &str, expected: [usize; 2], what: &str| -> Result<Mat> {
            let t = read_tensor(self.resolve(rel))?;
            let actual = t.dims();
            let matches = actual == expected || (expected[0] == 1 && actual == [expected[1]]);
            if !matches {
                return Err(Error::Format(format!(
                    "pair {pair_id} {what}: expected dims {expected:?}, found {actual:?}"
                )));
            }
            t.to_mat()
        };
        let bundle = FeatureBundle {
            pair_id: pair_id.to_string(),
            regions: load(&entry.files.regions, [entry.n_r, d.d_v], "regions")?,
            words: load(&entry.files.words, [entry.n_t, d.d_w], "words")?,
            global_image: load(&entry.files.global_image, [1, d.d_g], "global_image")?,
            global_text: load(&entry.files.global_text, [1, d.d_g], "global_text")?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn read_bundle(manifest: &DatasetManifest, pair_id: &str) -> Result<FeatureBundle> {
    manifest.read_bundle(pair_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::{write_tensor, Tensor};

    fn write(dir: &Path, rel: &str, dims: Vec<usize>) {
        let n = dims.iter().product();
        let data = (0..n).map(|i| (i as f32) * 0.01).collect();
        write_tensor(&Tensor::new(dims, data).unwrap(), dir.join(rel)).unwrap();
    }

    fn one_pair(dir: &Path, n_r: usize, n_t: usize, d_v: usize) -> DatasetManifest {
        let dims = FeatureDims { d_v, d_w: 12, d_g: 5 };
        write(dir, "r.aahr", vec![n_r, d_v]);
        write(dir, "w.aahr", vec![n_t, 12]);
        write(dir, "gi.aahr", vec![5]);
        write(dir, "gt.aahr", vec![1, 5]);
        let mut m = DatasetManifest::new("toy", dims, dir);
        m.pairs.push(PairEntry {
            pair_id: "p0".into(),
            image_id: "i0".into(),
            caption_id: "c0".into(),
            split: "train".into(),
            n_r,
            n_t,
            files: BundleFiles {
                regions: "r.aahr".into(),
                words: "w.aahr".into(),
                global_image: "gi.aahr".into(),
                global_text: "gt.aahr".into(),
            },
        });
        m.positives.entry("i0".into()).or_default().insert("c0".into());
        m
    }

    #[test]
    fn full_scale_regions_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_pair(dir.path(), 36, 4, 2048);
        let b = read_bundle(&m, "p0").unwrap();
        assert_eq!(b.regions.dim(), (36, 2048));
        assert_eq!(b.global_image.dim(), (1, 5));
    }

    #[test]
    fn single_word_caption() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_pair(dir.path(), 3, 1, 8);
        assert_eq!(m.read_bundle("p0").unwrap().words.dim(), (1, 12));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_pair(dir.path(), 3, 2, 8);
        let path = dir.path().join("w.aahr");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(m.read_bundle("p0"), Err(Error::Format(_))));
    }

    #[test]
    fn dim_mismatch_names_dims() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = one_pair(dir.path(), 3, 2, 8);
        m.pairs[0].n_r = 4;
        let err = m.read_bundle("p0").unwrap_err().to_string();
        assert!(err.contains("[4, 8]") && err.contains("[3, 8]"), "{err}");
    }

    #[test]
    fn missing_file_and_unknown_pair() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_pair(dir.path(), 3, 2, 8);
        fs::remove_file(dir.path().join("gi.aahr")).unwrap();
        assert!(matches!(m.read_bundle("p0"), Err(Error::MissingFile(_))));
        assert!(matches!(m.read_bundle("nope"), Err(Error::Dataset(_))));
    }

    #[test]
    fn json_round_trip_and_positive_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = one_pair(dir.path(), 3, 2, 8);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();

        let mut broken = m.clone();
        broken.positives.clear();
        assert!(matches!(broken.check_structure(), Err(Error::Dataset(_))));
    }
}
