//! Procedural tri-modal person fixtures with known attributes.

use std::collections::BTreeMap;

use image::{ImageEncoder, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{remap_identities, CaptionRecord, DatasetIndex, ObjectType, SampleRecord, Split};
use crate::captions::{render_template, AttributeSchema, ComplementConfig, ConfidenceAttribute, SimulatedTruth};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::rng::{self, tag};

const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [200, 30, 30]),
    ("blue", [30, 60, 200]),
    ("green", [30, 160, 50]),
    ("yellow", [230, 210, 40]),
    ("black", [25, 25, 25]),
    ("white", [235, 235, 235]),
    ("purple", [130, 40, 160]),
    ("orange", [240, 130, 20]),
];
const GENDERS: [&str; 2] = ["man", "woman"];
const AGES: [&str; 3] = ["young adult", "middle-aged adult", "senior"];
const UPPER: [&str; 4] = ["jacket", "t-shirt", "sweater", "coat"];
const LOWER: [&str; 4] = ["trousers", "shorts", "skirt", "jeans"];
const HAIR: [&str; 4] = ["short hair", "long hair", "a ponytail", "a shaved head"];
const FOOTWEAR: [&str; 4] = ["sneakers", "boots", "sandals", "leather shoes"];
const BACKPACK: [&str; 3] = ["a black backpack", "a grey backpack", "no backpack"];
const HANDBAG: [&str; 2] = ["a brown handbag", "no handbag"];
const HOLDING: [&str; 3] = ["a phone", "an umbrella", "nothing"];
const SUPPRESSIBLE: [&str; 4] = ["backpack", "handbag", "footwear", "hairstyle"];
const VIEWS: [&str; 4] = ["front", "back", "left side", "right side"];

pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Training identities.
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// (height, width).
    pub image_size: (usize, usize),
    pub seed: u64,
    /// Extra identities split into query (first sample) and gallery.
    #[serde(default)]
    pub test_ids: usize,
}

impl SyntheticConfig {
    pub fn new(num_ids: usize, samples_per_id: usize, image_size: (usize, usize), seed: u64) -> Self {
        Self {
            num_ids,
            samples_per_id,
            image_size,
            seed,
            test_ids: 0,
        }
    }
}

/// Ground truth for one identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityTruth {
    pub raw_identity: u64,
    pub upper_color: String,
    pub lower_color: String,
    /// Appearance attributes in schema naming.
    pub attributes: BTreeMap<String, String>,
    /// Attribute left out of one modality's caption.
    pub suppressed: String,
    pub suppressed_modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub raw_identity: u64,
    /// Environment attributes for this capture.
    pub environment: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub config: SyntheticConfig,
    pub identities: Vec<IdentityTruth>,
    pub samples: Vec<SampleTruth>,
}

impl SyntheticTruth {
    pub fn identity(&self, raw: u64) -> Option<&IdentityTruth> {
        self.identities.iter().find(|t| t.raw_identity == raw)
    }

    pub fn sample(&self, sample_id: &str) -> Option<&SampleTruth> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Full attribute table (appearance + environment) for a sample.
    pub fn attributes_of(&self, sample_id: &str) -> Option<BTreeMap<String, String>> {
        let s = self.sample(sample_id)?;
        let id = self.identity(s.raw_identity)?;
        let mut out = id.attributes.clone();
        out.extend(s.environment.clone());
        Some(out)
    }
}

/// Deterministic PNG encoding.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(buf)
}

pub fn generate_synthetic(
    num_ids: usize,
    samples_per_id: usize,
    image_size: (usize, usize),
    seed: u64,
) -> Result<DatasetIndex> {
    generate_synthetic_with(&SyntheticConfig::new(num_ids, samples_per_id, image_size, seed))
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<DatasetIndex> {
    if cfg.num_ids < 2 || cfg.samples_per_id < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 identities with 2 samples each (got {} x {})",
            cfg.num_ids, cfg.samples_per_id
        )));
    }
    let (h, w) = cfg.image_size;
    if h < MIN_IMAGE_SIZE || w < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {h}x{w} is too small to render (minimum {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE})"
        )));
    }
    let total = cfg.num_ids + cfg.test_ids;
    let mut pairs: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|a| (0..COLORS.len()).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng::stream(cfg.seed, &[tag::SYNTH, 0]));

    let schema = AttributeSchema::person();
    let mut identities = Vec::with_capacity(total);
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut samples = Vec::new();
    for raw in 0..total as u64 {
        let pair = pairs[raw as usize % pairs.len()];
        let variant = raw as usize / pairs.len();
        let truth = identity_truth(cfg.seed, raw, pair);
        for j in 0..cfg.samples_per_id {
            let sample_id = format!("id{raw:03}_s{j:02}");
            let camera = (j % 4) as u32;
            let time_label = (j / 2) as u32;
            let environment = environment(camera, time_label);
            let mut r = rng::stream(cfg.seed, &[tag::SYNTH, 2, raw, j as u64]);
            images.push(render(&truth, pair, variant, &environment, camera, (h, w), &mut r));
            let captions = PerModality::try_from_fn(|m| {
                let mut attrs: Vec<ConfidenceAttribute> = Vec::new();
                for name in schema.names() {
                    let value = truth.attributes.get(name).or_else(|| environment.get(name));
                    let hidden = m == truth.suppressed_modality && name == truth.suppressed;
                    attrs.push(match value {
                        Some(v) if !hidden => ConfidenceAttribute::new(name, v.clone(), 1.0),
                        _ => ConfidenceAttribute::unknown(name),
                    });
                }
                CaptionRecord::new(render_template(&schema, &attrs, &ComplementConfig::default()))
            })?;
            let split = if raw < cfg.num_ids as u64 {
                Split::Train
            } else if j == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push(SampleRecord {
                sample_id: sample_id.clone(),
                identity: 0,
                raw_identity: raw,
                camera,
                time_label: Some(time_label),
                split,
                captions: Some(captions),
            });
            samples.push(SampleTruth {
                sample_id,
                raw_identity: raw,
                environment,
            });
        }
        identities.push(truth);
    }
    remap_identities(&mut records);
    let truth = SyntheticTruth {
        config: cfg.clone(),
        identities,
        samples,
    };
    DatasetIndex::in_memory(ObjectType::Person, records, images, Some(truth))
}

fn identity_truth(seed: u64, raw: u64, (upper, lower): (usize, usize)) -> IdentityTruth {
    let mut r = rng::stream(seed, &[tag::SYNTH, 1, raw]);
    let mut pick = |xs: &[&str]| xs[r.random_range(0..xs.len())].to_string();
    let upper_garment = pick(&UPPER);
    let lower_garment = pick(&LOWER);
    let mut attributes = BTreeMap::new();
    attributes.insert("gender".to_string(), pick(&GENDERS));
    attributes.insert("age".to_string(), pick(&AGES));
    attributes.insert(
        "upper clothing".to_string(),
        format!("a {} {upper_garment}", COLORS[upper].0),
    );
    attributes.insert(
        "lower clothing".to_string(),
        format!("{} {lower_garment}", COLORS[lower].0),
    );
    attributes.insert("hairstyle".to_string(), pick(&HAIR));
    attributes.insert("footwear".to_string(), pick(&FOOTWEAR));
    attributes.insert("backpack".to_string(), pick(&BACKPACK));
    attributes.insert("handbag".to_string(), pick(&HANDBAG));
    attributes.insert("holding".to_string(), pick(&HOLDING));
    let suppressed = pick(&SUPPRESSIBLE);
    let suppressed_modality = Modality::ALL[r.random_range(0..3)];
    IdentityTruth {
        raw_identity: raw,
        upper_color: COLORS[upper].0.to_string(),
        lower_color: COLORS[lower].0.to_string(),
        attributes,
        suppressed,
        suppressed_modality,
    }
}

fn environment(camera: u32, time_label: u32) -> BTreeMap<String, String> {
    let night = time_label % 2 == 1;
    BTreeMap::from([
        ("view".to_string(), VIEWS[camera as usize % 4].to_string()),
        (
            "illumination".to_string(),
            if night { "dark" } else { "bright" }.to_string(),
        ),
        (
            "capture time".to_string(),
            if night { "night" } else { "daytime" }.to_string(),
        ),
        (
            "target clarity".to_string(),
            if camera % 2 == 0 { "clear" } else { "slightly blurred" }.to_string(),
        ),
    ])
}

/// Heat level per body region, before the identity's palette scale.
#[derive(Clone, Copy)]
enum Region {
    Background,
    Head,
    Upper,
    Lower,
    Feet,
    Backpack,
}

fn render(
    truth: &IdentityTruth,
    (upper, lower): (usize, usize),
    variant: usize,
    env: &BTreeMap<String, String>,
    camera: u32,
    (h, w): (usize, usize),
    r: &mut ChaCha8Rng,
) -> PerModality<RgbImage> {
    let has_backpack = !truth.attributes["backpack"].starts_with("no ");
    let dark = env["illumination"] == "dark";
    let shift: i64 = r.random_range(-1..=1);
    let bg = 90 + 20 * camera as i64;
    let stripe = 2 + (truth.raw_identity as usize + variant) % 3;
    let heat_scale = 0.75 + 0.25 * ((truth.raw_identity * 37) % 8) as f64 / 7.0;
    let noise = Normal::new(0.0, 8.0).expect("valid normal");
    let bg_noise = Normal::new(0.0, 4.0).expect("valid normal");

    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut nir = RgbImage::new(w as u32, h as u32);
    let mut tir = RgbImage::new(w as u32, h as u32);
    let (x0, x1) = (w as i64 / 4 + shift, 3 * w as i64 / 4 + shift);
    for y in 0..h {
        for x in 0..w {
            let (xi, fy) = (x as i64, y as f64 / h as f64);
            let inside = xi >= x0 && xi < x1;
            let region = if !inside {
                if has_backpack && fy >= 0.22 && fy < 0.45 && xi >= x1 && xi < x1 + (w as i64 / 8).max(2) {
                    Region::Backpack
                } else {
                    Region::Background
                }
            } else if fy < 0.2 {
                Region::Head
            } else if fy < 0.5 {
                Region::Upper
            } else if fy < 0.88 {
                Region::Lower
            } else {
                Region::Feet
            };
            let mut c: [f64; 3] = match region {
                Region::Background => {
                    let n = bg_noise.sample(r);
                    [bg as f64 + n, bg as f64 + n, bg as f64 + 10.0 + n]
                }
                Region::Head => [200.0, 160.0, 130.0],
                Region::Upper => COLORS[upper].1.map(f64::from),
                Region::Lower => COLORS[lower].1.map(f64::from),
                Region::Feet => [60.0, 45.0, 35.0],
                Region::Backpack => [50.0, 50.0, 60.0],
            };
            if matches!(region, Region::Upper) && (y % stripe == 0) {
                c = c.map(|v| v * 0.75);
            }
            let luma = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            let n = (luma + noise.sample(r)).clamp(0.0, 255.0) as u8;
            nir.put_pixel(x as u32, y as u32, Rgb([n, n, n]));
            let lit = if dark { 0.45 } else { 1.0 };
            rgb.put_pixel(x as u32, y as u32, Rgb(c.map(|v| (v * lit).clamp(0.0, 255.0) as u8)));
            let heat = match region {
                Region::Background => 0.15,
                Region::Head => 1.0,
                Region::Upper => 0.8,
                Region::Lower => 0.7,
                Region::Feet => 0.55,
                Region::Backpack => 0.35,
            } * if matches!(region, Region::Background) { 1.0 } else { heat_scale };
            tir.put_pixel(x as u32, y as u32, Rgb(heat_palette(heat)));
        }
    }
    PerModality { rgb, nir, tir }
}

fn heat_palette(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (255.0 * t.sqrt()) as u8,
        (255.0 * t * t) as u8,
        (255.0 * (0.5 - (t - 0.3).abs()).max(0.0)) as u8,
    ]
}

/// Simulated-backend truth tables for every (sample, modality) image of a
/// synthetic dataset, keyed by the PNG bytes written to disk.
pub fn simulated_truths(index: &DatasetIndex) -> Result<Vec<(Vec<u8>, SimulatedTruth)>> {
    let truth = index
        .truth
        .as_ref()
        .ok_or_else(|| Error::Data("dataset carries no generator truth".into()))?;
    let mut out = Vec::new();
    for (i, r) in index.records.iter().enumerate() {
        let sample = index.sample(i, None)?;
        let id = truth
            .identity(r.raw_identity)
            .ok_or_else(|| Error::Data(format!("no truth for identity {}", r.raw_identity)))?;
        let attributes = truth
            .attributes_of(&r.sample_id)
            .ok_or_else(|| Error::Data(format!("no truth for sample {}", r.sample_id)))?;
        let alternatives = alternatives(&attributes);
        for m in Modality::ALL {
            out.push((
                encode_png(sample.images.get(m))?,
                SimulatedTruth {
                    sample_id: r.sample_id.clone(),
                    modality: m,
                    attributes: attributes.clone(),
                    suppressed: (m == id.suppressed_modality).then(|| id.suppressed.clone()),
                    alternatives: alternatives.clone(),
                },
            ));
        }
    }
    Ok(out)
}

fn alternatives(attrs: &BTreeMap<String, String>) -> BTreeMap<String, Vec<String>> {
    let table: [(&str, Vec<String>); 7] = [
        ("gender", GENDERS.map(String::from).to_vec()),
        ("age", AGES.map(String::from).to_vec()),
        ("hairstyle", HAIR.map(String::from).to_vec()),
        ("footwear", FOOTWEAR.map(String::from).to_vec()),
        ("backpack", BACKPACK.map(String::from).to_vec()),
        ("handbag", HANDBAG.map(String::from).to_vec()),
        ("holding", HOLDING.map(String::from).to_vec()),
    ];
    table
        .into_iter()
        .map(|(name, all)| {
            let truth = attrs.get(name);
            (
                name.to_string(),
                all.into_iter().filter(|v| Some(v) != truth).collect(),
            )
        })
        .collect()
}
