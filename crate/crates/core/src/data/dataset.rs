use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::preprocess_png;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Class directories of the NIH `cell_images` layout, in class-index order.
pub const CLASS_DIRS: [&str; 2] = ["Parasitized", "Uninfected"];

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub per_class: Vec<usize>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Sorted image paths per class, before decoding.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub files: Vec<(PathBuf, usize)>,
}

impl DatasetLayout {
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut files = Vec::new();
        for (label, dir) in CLASS_DIRS.iter().enumerate() {
            let path = root.join(dir);
            if !path.is_dir() {
                return Err(Error::Layout(format!(
                    "missing class directory {}",
                    path.display()
                )));
            }
            let mut class_files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .is_some_and(|x| x.eq_ignore_ascii_case("png"))
                })
                .collect();
            if class_files.is_empty() {
                return Err(Error::Layout(format!(
                    "class directory {} contains no PNG images",
                    path.display()
                )));
            }
            class_files.sort();
            files.extend(class_files.into_iter().map(|p| (p, label)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Keeps at most `per_class` files of each class, drawn with a seeded
    /// shuffle; the kept files stay in sorted-path order.
    pub fn subsample(mut self, per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for label in 0..CLASS_DIRS.len() {
            let mut idx: Vec<usize> = (0..self.files.len())
                .filter(|&i| self.files[i].1 == label)
                .collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            keep.extend(idx);
        }
        keep.sort_unstable();
        self.files = keep.into_iter().map(|i| self.files[i].clone()).collect();
        self
    }

    /// Decodes every file, resizing to `size` (H, W). Undecodable files are
    /// logged and skipped.
    pub fn load(&self, size: (usize, usize)) -> Result<(Vec<LabeledImage>, LoadReport)> {
        let mut report = LoadReport {
            per_class: vec![0; CLASS_DIRS.len()],
            ..LoadReport::default()
        };
        let mut out = Vec::with_capacity(self.files.len());
        for (path, label) in &self.files {
            let decoded = std::fs::read(path)
                .map_err(|e| e.to_string())
                .and_then(|b| preprocess_png(&b, size).map_err(|e| e.to_string()));
            match decoded {
                Ok(pixels) => {
                    report.per_class[*label] += 1;
                    out.push(LabeledImage {
                        pixels,
                        label: *label,
                        path: path.clone(),
                    });
                }
                Err(msg) => {
                    log::warn!("skipping {}: {msg}", path.display());
                    report.skipped.push((path.clone(), msg));
                }
            }
        }
        report.loaded = out.len();
        Ok((out, report))
    }
}

/// Loads an NIH-style directory: `Parasitized/` and `Uninfected/` PNGs.
pub fn load_dataset(
    root: impl AsRef<Path>,
    size: (usize, usize),
) -> Result<(Vec<LabeledImage>, LoadReport)> {
    DatasetLayout::scan(root)?.load(size)
}

/// Image count the published NIH download is described as containing.
pub const NIH_REPORTED_COUNT: usize = 27_588;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Stratified split over per-sample labels. Within each class the indices
/// are shuffled, then `floor(val * n)` go to val, `floor(test * n)` to test
/// and the rest to train. Output lists are sorted.
pub fn split_labels(
    labels: &[usize],
    num_classes: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetSplit> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {train}/{val}/{test} must be in [0, 1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (val * n + 1e-9).floor() as usize;
        let n_test = (test * n + 1e-9).floor() as usize;
        out.val.extend_from_slice(&idx[..n_val]);
        out.test.extend_from_slice(&idx[n_val..n_val + n_test]);
        out.train.extend_from_slice(&idx[n_val + n_test..]);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Index(format!("label {bad} outside [0, {num_classes})")));
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn split(samples: &[LabeledImage], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    split_labels(&labels, CLASS_DIRS.len(), ratios, seed)
}
