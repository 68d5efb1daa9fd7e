//! Dataset layouts: MVTec-style category trees, KSDD2 image/GT pairs and
//! flat `images/` + `masks/` folders.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::io::{read_image, read_mask, ResizePolicy};
use crate::error::{DsrError, Result};
use crate::types::{AnomalyMask, ImageTensor};

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<category>/train/good`, `<category>/test/<defect>`,
    /// `<category>/ground_truth/<defect>/<name>_mask.png`.
    Mvtec,
    /// `<split>/<name>.png` with `<split>/<name>_GT.png`.
    Ksdd2,
    /// `[<split>/]images/` with optional `[<split>/]masks/` of matching stems.
    Flat,
}

impl FromStr for Layout {
    type Err = DsrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "ksdd2" => Ok(Layout::Ksdd2),
            "flat" => Ok(Layout::Flat),
            _ => Err(DsrError::Config(format!("unknown dataset layout `{s}` (mvtec, ksdd2, flat)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DsrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(DsrError::Config(format!("unknown split `{s}` (train, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    /// 1 for anomalous.
    pub label: u8,
    pub mask: Option<PathBuf>,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub split: Split,
    /// Sorted by image path.
    pub entries: Vec<ManifestEntry>,
}

/// One loaded image with its label and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Image path relative to the dataset root, without extension.
    pub id: String,
    pub category: String,
    pub image: ImageTensor,
    pub anomalous: bool,
    pub mask: Option<AnomalyMask>,
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Sorted image files of `dir`; a missing directory is recorded as a problem.
fn list_images(dir: &Path, problems: &mut Vec<String>) -> Vec<PathBuf> {
    match fs::read_dir(dir) {
        Ok(rd) => {
            let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_image(p)).collect();
            v.sort();
            v
        }
        Err(_) => {
            problems.push(format!("missing directory {}", dir.display()));
            Vec::new()
        }
    }
}

fn sorted_subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// Lists a dataset without decoding any pixels (except KSDD2 masks, whose
/// content decides the label).
pub fn scan_dataset(root: &Path, layout: Layout, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DsrError::Dataset(vec![format!("dataset root {} does not exist", root.display())]));
    }
    let mut problems = Vec::new();
    let mut entries = match layout {
        Layout::Mvtec => scan_mvtec(root, split, &mut problems),
        Layout::Ksdd2 => scan_ksdd2(root, split, &mut problems),
        Layout::Flat => scan_flat(root, split, &mut problems),
    };
    if problems.is_empty() && entries.is_empty() {
        problems.push(match split {
            Split::Train => format!("no training images under {}", root.display()),
            Split::Test => format!("no test images under {}", root.display()),
        });
    }
    if !problems.is_empty() {
        return Err(DsrError::Dataset(problems));
    }
    entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        layout,
        split,
        entries,
    })
}

fn scan_mvtec(root: &Path, split: Split, problems: &mut Vec<String>) -> Vec<ManifestEntry> {
    let categories: Vec<PathBuf> = if root.join("train").is_dir() || root.join("test").is_dir() {
        vec![root.to_path_buf()]
    } else {
        sorted_subdirs(root)
            .into_iter()
            .filter(|d| d.join("train").is_dir() || d.join("test").is_dir())
            .collect()
    };
    if categories.is_empty() {
        problems.push(format!("no MVTec-style category under {}", root.display()));
    }
    let mut out = Vec::new();
    for cat in categories {
        let category = cat
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        match split {
            Split::Train => {
                let dir = cat.join("train").join("good");
                let imgs = list_images(&dir, problems);
                if imgs.is_empty() && dir.is_dir() {
                    problems.push(format!("no training images in {}", dir.display()));
                }
                out.extend(imgs.into_iter().map(|image| ManifestEntry {
                    image,
                    label: 0,
                    mask: None,
                    category: category.clone(),
                }));
            }
            Split::Test => {
                let test = cat.join("test");
                if !test.is_dir() {
                    problems.push(format!("missing directory {}", test.display()));
                    continue;
                }
                for defect_dir in sorted_subdirs(&test) {
                    let defect = stem(&defect_dir);
                    let imgs = list_images(&defect_dir, problems);
                    if defect == "good" {
                        out.extend(imgs.into_iter().map(|image| ManifestEntry {
                            image,
                            label: 0,
                            mask: None,
                            category: category.clone(),
                        }));
                        continue;
                    }
                    let gt_dir = cat.join("ground_truth").join(&defect);
                    let masks = if gt_dir.is_dir() { list_images(&gt_dir, problems) } else { Vec::new() };
                    let mut used = vec![false; masks.len()];
                    for image in imgs {
                        let want = format!("{}_mask", stem(&image));
                        let found = masks.iter().position(|m| stem(m) == want);
                        if let Some(i) = found {
                            used[i] = true;
                        } else {
                            problems.push(format!("missing mask for {}", image.display()));
                        }
                        out.push(ManifestEntry {
                            image,
                            label: 1,
                            mask: found.map(|i| masks[i].clone()),
                            category: category.clone(),
                        });
                    }
                    for (m, u) in masks.iter().zip(used) {
                        if !u {
                            problems.push(format!("orphan mask {}", m.display()));
                        }
                    }
                }
            }
        }
    }
    out
}

fn scan_ksdd2(root: &Path, split: Split, problems: &mut Vec<String>) -> Vec<ManifestEntry> {
    let dir = root.join(split.name());
    let files = list_images(&dir, problems);
    let (gts, imgs): (Vec<PathBuf>, Vec<PathBuf>) = files.into_iter().partition(|p| stem(p).ends_with("_GT"));
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for image in imgs {
        let want = format!("{}_GT", stem(&image));
        let Some(i) = gts.iter().position(|g| stem(g) == want) else {
            problems.push(format!("missing mask for {}", image.display()));
            continue;
        };
        used[i] = true;
        let label = match read_mask(&gts[i], None, ResizePolicy::Stretch) {
            Ok(m) => u8::from(m.count() > 0),
            Err(e) => {
                problems.push(format!("unreadable mask: {e}"));
                continue;
            }
        };
        out.push(ManifestEntry {
            image,
            label,
            mask: Some(gts[i].clone()),
            category: "ksdd2".into(),
        });
    }
    for (g, u) in gts.iter().zip(used) {
        if !u {
            problems.push(format!("orphan mask {}", g.display()));
        }
    }
    out
}

fn scan_flat(root: &Path, split: Split, problems: &mut Vec<String>) -> Vec<ManifestEntry> {
    let base = if root.join(split.name()).join("images").is_dir() {
        root.join(split.name())
    } else {
        root.to_path_buf()
    };
    let imgs = list_images(&base.join("images"), problems);
    let mask_dir = base.join("masks");
    let masks = if mask_dir.is_dir() { list_images(&mask_dir, problems) } else { Vec::new() };
    let mut used = vec![false; masks.len()];
    let category = stem(root);
    let mut out = Vec::new();
    for image in imgs {
        let found = masks.iter().position(|m| stem(m) == stem(&image));
        let mut label = 0;
        if let Some(i) = found {
            used[i] = true;
            match read_mask(&masks[i], None, ResizePolicy::Stretch) {
                Ok(m) => label = u8::from(m.count() > 0),
                Err(e) => problems.push(format!("unreadable mask: {e}")),
            }
        }
        out.push(ManifestEntry {
            image,
            label,
            mask: found.map(|i| masks[i].clone()),
            category: category.clone(),
        });
    }
    for (m, u) in masks.iter().zip(used) {
        if !u {
            problems.push(format!("orphan mask {}", m.display()));
        }
    }
    out
}

impl DatasetManifest {
    /// Decodes every entry at `size` x `size`. Decoding failures are
    /// collected and reported together.
    pub fn load(&self, size: usize, policy: ResizePolicy) -> Result<Vec<Sample>> {
        let mut problems = Vec::new();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let image = match read_image(&e.image, Some(size), policy) {
                Ok(i) => i,
                Err(err) => {
                    problems.push(err.to_string());
                    continue;
                }
            };
            let mask = match &e.mask {
                Some(p) => match read_mask(p, Some(size), policy) {
                    Ok(m) => Some(m),
                    Err(err) => {
                        problems.push(err.to_string());
                        continue;
                    }
                },
                None => None,
            };
            let rel = e.image.strip_prefix(&self.root).unwrap_or(&e.image).with_extension("");
            out.push(Sample {
                id: rel.to_string_lossy().replace('\\', "/"),
                category: e.category.clone(),
                image,
                anomalous: e.label != 0,
                mask,
            });
        }
        if !problems.is_empty() {
            return Err(DsrError::Dataset(problems));
        }
        Ok(out)
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.entries.iter().map(|e| e.category.clone()).collect();
        c.dedup();
        c.sort();
        c.dedup();
        c
    }
}

/// Scans and decodes in one call.
pub fn load_dataset(root: &Path, layout: Layout, split: Split, size: usize, policy: ResizePolicy) -> Result<Vec<Sample>> {
    scan_dataset(root, layout, split)?.load(size, policy)
}
