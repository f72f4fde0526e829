//! Dataset manifests and the sample pipeline: images, binary masks, prompt
//! templates, and deterministic batch iteration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESOLUTION: usize = 352;
pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} is not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("overlapping splits: id {id} appears in both {a} and {b}")]
    OverlappingSplits { id: String, a: &'static str, b: &'static str },
    #[error("manifest must declare at least one prompt template")]
    NoPrompts,
    #[error("prompt template {index} is empty")]
    EmptyPrompt { index: usize },
    #[error("missing {kind} file for id {id}: {path}")]
    MissingFile {
        kind: &'static str,
        id: String,
        path: PathBuf,
    },
    #[error("cannot decode {kind} {path}: {source}")]
    Decode {
        kind: &'static str,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unknown image id {0}")]
    UnknownImageId(String),
    #[error("prompt id {id} out of range (dataset has {count} templates)")]
    BadPromptId { id: usize, count: usize },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("batch size must be >= 1")]
    BadBatchSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// How prompts are assigned when iterating a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPolicy {
    /// One prompt per image, drawn from the iteration seed.
    RandomPerEpoch,
    /// The same template for every image.
    Fixed(usize),
    /// Every image once per template (the prompt-averaged protocol).
    All,
}

/// One training/eval record. The image is CHW in [0,1]; the mask is strictly
/// binary and shares the image's spatial dims.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f32>,
    pub mask: Array2<f32>,
    pub prompt: String,
    pub image_id: String,
    pub dataset_id: String,
    pub prompt_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    dataset_id: String,
    image_dir: String,
    mask_dir: String,
    image_ext: String,
    mask_ext: String,
    prompts: Vec<String>,
    splits: SplitLists,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitLists {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

/// A validated dataset manifest. Immutable after load; iterators borrow it.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub prompts: Vec<String>,
    image_dir: PathBuf,
    mask_dir: PathBuf,
    image_ext: String,
    mask_ext: String,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

impl DatasetManifest {
    /// Load and eagerly validate a manifest JSON document. Relative
    /// image/mask dirs resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let raw: ManifestFile = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let resolve = |dir: &str| {
            let p = PathBuf::from(dir);
            if p.is_absolute() {
                p
            } else {
                root.join(p)
            }
        };
        let manifest = DatasetManifest {
            dataset_id: raw.dataset_id,
            prompts: raw.prompts,
            image_dir: resolve(&raw.image_dir),
            mask_dir: resolve(&raw.mask_dir),
            image_ext: raw.image_ext,
            mask_ext: raw.mask_ext,
            train: raw.splits.train,
            val: raw.splits.val,
            test: raw.splits.test,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.prompts.is_empty() {
            return Err(DataError::NoPrompts);
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(DataError::EmptyPrompt { index: i });
            }
        }
        let pairs: [(&'static str, &[String]); 3] = [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ];
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                let set: BTreeSet<&String> = pairs[i].1.iter().collect();
                if let Some(id) = pairs[j].1.iter().find(|id| set.contains(id)) {
                    return Err(DataError::OverlappingSplits {
                        id: id.clone(),
                        a: pairs[i].0,
                        b: pairs[j].0,
                    });
                }
            }
        }
        for (_, ids) in pairs {
            for id in ids {
                let img = self.image_path(id);
                if !img.is_file() {
                    return Err(DataError::MissingFile {
                        kind: "image",
                        id: id.clone(),
                        path: img,
                    });
                }
                let mask = self.mask_path(id);
                if !mask.is_file() {
                    return Err(DataError::MissingFile {
                        kind: "mask",
                        id: id.clone(),
                        path: mask,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.image_dir.join(format!("{id}{}", self.image_ext))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.mask_dir.join(format!("{id}{}", self.mask_ext))
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.train.iter().chain(&self.val).chain(&self.test).any(|x| x == id)
    }
}

/// Load one (image, mask, prompt) record, resized to `resolution` and
/// normalized: bilinear for the image into [0,1], nearest for the mask with a
/// 0.5 binarization threshold.
pub fn make_sample(
    manifest: &DatasetManifest,
    image_id: &str,
    prompt_id: usize,
    resolution: usize,
) -> Result<Sample, DataError> {
    if !manifest.contains_id(image_id) {
        return Err(DataError::UnknownImageId(image_id.to_string()));
    }
    if prompt_id >= manifest.prompts.len() {
        return Err(DataError::BadPromptId {
            id: prompt_id,
            count: manifest.prompts.len(),
        });
    }

    let img_path = manifest.image_path(image_id);
    let img = image::open(&img_path).map_err(|source| DataError::Decode {
        kind: "image",
        path: img_path.clone(),
        source,
    })?;
    let img = image::imageops::resize(
        &img.to_rgb8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut image_arr = Array3::<f32>::zeros((3, resolution, resolution));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            image_arr[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }

    let mask_path = manifest.mask_path(image_id);
    let mask = image::open(&mask_path).map_err(|source| DataError::Decode {
        kind: "mask",
        path: mask_path.clone(),
        source,
    })?;
    let mask = image::imageops::resize(
        &mask.to_luma8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut mask_arr = Array2::<f32>::zeros((resolution, resolution));
    for (x, y, p) in mask.enumerate_pixels() {
        // threshold 0.5 after scaling to [0,1]
        mask_arr[[y as usize, x as usize]] = if p.0[0] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 };
    }

    Ok(Sample {
        image: image_arr,
        mask: mask_arr,
        prompt: manifest.prompts[prompt_id].clone(),
        image_id: image_id.to_string(),
        dataset_id: manifest.dataset_id.clone(),
        prompt_id,
    })
}

/// Deterministic batch iterator. Training splits are shuffled by the seed;
/// eval splits keep manifest order. Samples are loaded lazily, so IO errors
/// surface per batch.
#[derive(Debug)]
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    pairs: Vec<(String, usize)>,
    batch_size: usize,
    resolution: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    /// Total samples this iterator will yield.
    pub fn sample_count(&self) -> usize {
        self.pairs.len()
    }

    /// The (image_id, prompt_id) schedule, for order-determinism checks.
    pub fn schedule(&self) -> &[(String, usize)] {
        &self.pairs
    }
}

pub fn iterate_batches<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    prompt_policy: PromptPolicy,
    resolution: usize,
) -> Result<BatchIter<'a>, DataError> {
    if batch_size == 0 {
        return Err(DataError::BadBatchSize);
    }
    let ids = manifest.split(split);
    if ids.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    if let PromptPolicy::Fixed(id) = prompt_policy {
        if id >= manifest.prompts.len() {
            return Err(DataError::BadPromptId {
                id,
                count: manifest.prompts.len(),
            });
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ordered: Vec<String> = ids.to_vec();
    if split == Split::Train {
        ordered.shuffle(&mut rng);
    }
    let n_prompts = manifest.prompts.len();
    let pairs: Vec<(String, usize)> = match prompt_policy {
        PromptPolicy::All => ordered
            .iter()
            .flat_map(|id| (0..n_prompts).map(move |p| (id.clone(), p)))
            .collect(),
        PromptPolicy::Fixed(p) => ordered.iter().map(|id| (id.clone(), p)).collect(),
        PromptPolicy::RandomPerEpoch => ordered
            .iter()
            .map(|id| (id.clone(), rng.random_range(0..n_prompts)))
            .collect(),
    };
    Ok(BatchIter {
        manifest,
        pairs,
        batch_size,
        resolution,
        cursor: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Vec<Sample>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.pairs.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.pairs.len());
        let mut batch = Vec::with_capacity(end - self.cursor);
        for (id, prompt) in &self.pairs[self.cursor..end] {
            match make_sample(self.manifest, id, *prompt, self.resolution) {
                Ok(s) => batch.push(s),
                Err(e) => {
                    self.cursor = self.pairs.len();
                    return Some(Err(e));
                }
            }
        }
        self.cursor = end;
        Some(Ok(batch))
    }
}

/// Write a small synthetic dataset of bright discs on dark noisy backgrounds
/// (mask = the disc). Deterministic given the seed; returns the manifest
/// path. Meant for smoke tests and desk-scale training runs.
pub fn write_synthetic_disc_dataset(
    dir: &Path,
    counts: (usize, usize, usize),
    size: u32,
    seed: u64,
) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let p = path.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    std::fs::create_dir_all(dir.join("images")).map_err(io(dir))?;
    std::fs::create_dir_all(dir.join("masks")).map_err(io(dir))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n_train, n_val, n_test) = counts;
    let mut splits: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, n, tag) in [(0, n_train, "train"), (1, n_val, "val"), (2, n_test, "test")] {
        for i in 0..n {
            let id = format!("{tag}{i:03}");
            let cx = rng.random_range(size / 4..3 * size / 4) as f32;
            let cy = rng.random_range(size / 4..3 * size / 4) as f32;
            let radius = rng.random_range(size / 8..size / 4) as f32;
            let mut img = image::RgbImage::new(size, size);
            let mut mask = image::GrayImage::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    let inside =
                        (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) <= radius * radius;
                    let noise = rng.random_range(0..30u8);
                    if inside {
                        img.put_pixel(x, y, image::Rgb([200 + noise / 2, 180, 60]));
                        mask.put_pixel(x, y, image::Luma([255]));
                    } else {
                        img.put_pixel(x, y, image::Rgb([noise, noise, 40 + noise]));
                        mask.put_pixel(x, y, image::Luma([0]));
                    }
                }
            }
            let ip = dir.join(format!("images/{id}.png"));
            img.save(&ip).map_err(|e| DataError::Decode {
                kind: "image",
                path: ip.clone(),
                source: e,
            })?;
            let mp = dir.join(format!("masks/{id}.png"));
            mask.save(&mp).map_err(|e| DataError::Decode {
                kind: "mask",
                path: mp.clone(),
                source: e,
            })?;
            splits[slot].push(id);
        }
    }
    let manifest = serde_json::json!({
        "dataset_id": "synthetic-discs",
        "image_dir": "images",
        "mask_dir": "masks",
        "image_ext": ".png",
        "mask_ext": ".png",
        "prompts": ["a bright round disc", "the circular blob"],
        "splits": {"train": splits[0], "val": splits[1], "test": splits[2]}
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(io(&path))?;
    Ok(path)
}
