//! Tri-modal dataset handling: indexing, synthetic fixtures, augmentation and
//! identity-balanced batch sampling.

mod augment;
mod layout;
mod sampler;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

pub use augment::{AugmentationConfig, Augmenter};
pub use layout::{image_path, load_dataset, load_dataset_with, write_atomic, write_dataset, LoadOptions};
pub use sampler::{pk_batches, PkBatches};
pub use synth::{
    encode_png, generate_synthetic, generate_synthetic_with, simulated_truths, IdentityTruth,
    SyntheticConfig, SyntheticTruth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectType {
    #[default]
    Person,
    Vehicle,
}

impl ObjectType {
    /// Full-scale input size (height, width).
    pub fn full_scale_size(self) -> (usize, usize) {
        match self {
            ObjectType::Person => (256, 128),
            ObjectType::Vehicle => (128, 256),
        }
    }
}

impl FromStr for ObjectType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "person" => Ok(ObjectType::Person),
            "vehicle" => Ok(ObjectType::Vehicle),
            other => Err(format!("unknown object type '{other}'")),
        }
    }
}

impl fmt::Display for ObjectType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectType::Person => "person",
            ObjectType::Vehicle => "vehicle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" | "test" => Ok(Split::Gallery),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// Splits on `.`, `!` or `?` followed by whitespace; the punctuation stays
/// with its sentence and empty pieces are dropped.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(_, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(next_pos, next)) = chars.get(i + 1) {
                if next.is_whitespace() {
                    let s = text[start..next_pos].trim();
                    if !s.is_empty() {
                        out.push(s.to_string());
                    }
                    start = next_pos;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// A caption and its ordered sentence segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub sentences: Vec<String>,
}

impl CaptionRecord {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let sentences = segment_sentences(&text);
        if sentences.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(Self { text, sentences })
    }

    pub fn from_sentences(sentences: Vec<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCaption);
        }
        Ok(Self {
            text: sentences.join(" "),
            sentences,
        })
    }
}

/// One aligned RGB/NIR/TIR instance with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    /// Class label (contiguous for the training split).
    pub identity: usize,
    pub camera: u32,
    pub time_label: Option<u32>,
    pub images: PerModality<RgbImage>,
    pub captions: Option<PerModality<CaptionRecord>>,
}

impl MultiModalSample {
    pub fn size(&self) -> (usize, usize) {
        (self.images.rgb.height() as usize, self.images.rgb.width() as usize)
    }
}

/// Index entry without pixel data.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Contiguous class label for train samples, raw id otherwise.
    pub identity: usize,
    pub raw_identity: u64,
    pub camera: u32,
    pub time_label: Option<u32>,
    pub split: Split,
    pub captions: Option<PerModality<CaptionRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub identities: usize,
    pub cameras: usize,
}

/// Validated dataset: records plus either in-memory images or a root to read
/// them from.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub object_type: ObjectType,
    pub root: Option<PathBuf>,
    pub records: Vec<SampleRecord>,
    images: Option<Vec<PerModality<RgbImage>>>,
    pub truth: Option<SyntheticTruth>,
}

impl DatasetIndex {
    pub(crate) fn in_memory(
        object_type: ObjectType,
        records: Vec<SampleRecord>,
        images: Vec<PerModality<RgbImage>>,
        truth: Option<SyntheticTruth>,
    ) -> Result<Self> {
        let idx = Self {
            object_type,
            root: None,
            records,
            images: Some(images),
            truth,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub(crate) fn on_disk(object_type: ObjectType, root: PathBuf, records: Vec<SampleRecord>) -> Result<Self> {
        let idx = Self {
            object_type,
            root: Some(root),
            records,
            images: None,
            truth: None,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        let ids: BTreeSet<u64> = self.records.iter().map(|r| r.raw_identity).collect();
        let cams: BTreeSet<u32> = self.records.iter().map(|r| r.camera).collect();
        DatasetStats {
            samples: self.records.len(),
            identities: ids.len(),
            cameras: cams.len(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Number of training classes.
    pub fn num_classes(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn has_time_labels(&self) -> bool {
        self.records.iter().all(|r| r.time_label.is_some())
    }

    /// Loads sample `i`, resizing every modality to `size` when given.
    pub fn sample(&self, i: usize, size: Option<(usize, usize)>) -> Result<MultiModalSample> {
        let r = self
            .records
            .get(i)
            .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
        let images = match (&self.images, &self.root) {
            (Some(imgs), _) => imgs[i].clone(),
            (None, Some(root)) => layout::read_images(root, &r.sample_id)?,
            (None, None) => return Err(Error::Data("index has neither images nor root".into())),
        };
        let images = match size {
            Some((h, w)) => images.map(|_, img| {
                if img.height() as usize == h && img.width() as usize == w {
                    img.clone()
                } else {
                    image::imageops::resize(img, w as u32, h as u32, image::imageops::FilterType::Triangle)
                }
            }),
            None => images,
        };
        Ok(MultiModalSample {
            sample_id: r.sample_id.clone(),
            identity: r.identity,
            camera: r.camera,
            time_label: r.time_label,
            images,
            captions: r.captions.clone(),
        })
    }

    /// Replaces every caption with `f(record, caption)`.
    pub fn map_captions(
        &self,
        mut f: impl FnMut(usize, Modality, &CaptionRecord) -> Result<CaptionRecord>,
    ) -> Result<Self> {
        let mut out = self.clone();
        for (i, r) in out.records.iter_mut().enumerate() {
            if let Some(caps) = &r.captions {
                r.captions = Some(PerModality::try_from_fn(|m| f(i, m, caps.get(m)))?);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let train_labels: BTreeSet<usize> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        if let Some(&max) = train_labels.iter().next_back() {
            if max + 1 != train_labels.len() {
                return Err(Error::Data("train labels are not contiguous".into()));
            }
        }
        let query: BTreeSet<u64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Query)
            .map(|r| r.raw_identity)
            .collect();
        let gallery: BTreeSet<u64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Gallery)
            .map(|r| r.raw_identity)
            .collect();
        if let Some(missing) = query.difference(&gallery).next() {
            return Err(Error::Data(format!(
                "query identity {missing} has no gallery samples"
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", r.sample_id)));
            }
        }
        Ok(())
    }
}

/// Remaps raw identities of the training split to `0..C` in ascending raw
/// order; other splits keep their raw ids.
pub(crate) fn remap_identities(records: &mut [SampleRecord]) {
    let train: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.raw_identity)
        .collect();
    let map: BTreeMap<u64, usize> = train.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    for r in records.iter_mut() {
        r.identity = match r.split {
            Split::Train => map[&r.raw_identity],
            _ => r.raw_identity as usize,
        };
    }
}

pub(crate) fn sidecar_path(root: &Path, sample_id: &str) -> PathBuf {
    root.join("captions").join(format!("{sample_id}.json"))
}
