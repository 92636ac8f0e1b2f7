//! On-disk layout:
//!
//! ```text
//! root/meta.csv                 sample_id,identity,camera,time_label,split
//! root/{rgb,nir,tir}/<id>.png   aligned images, identical file names
//! root/captions/<id>.json       caption sidecar
//! root/truth.json               generator ground truth (synthetic sets only)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::synth::{encode_png, SyntheticTruth};
use super::{remap_identities, sidecar_path, CaptionRecord, DatasetIndex, ObjectType, SampleRecord, Split};
use crate::captions::CaptionSidecar;
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub require_captions: bool,
    /// Read every image header and require equal sizes across modalities.
    pub check_image_sizes: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            require_captions: true,
            check_image_sizes: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    sample_id: String,
    identity: u64,
    camera: u32,
    time_label: Option<u32>,
    split: String,
}

pub fn image_path(root: &Path, m: Modality, sample_id: &str) -> PathBuf {
    root.join(m.as_str()).join(format!("{sample_id}.png"))
}

pub(crate) fn read_images(root: &Path, sample_id: &str) -> Result<PerModality<RgbImage>> {
    PerModality::try_from_fn(|m| {
        let p = image_path(root, m, sample_id);
        image::open(&p)
            .map(|img| img.to_rgb8())
            .map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })
    })
}

fn read_captions(path: &Path) -> Result<PerModality<CaptionRecord>> {
    let sidecar = CaptionSidecar::read(path)?;
    PerModality::try_from_fn(|m| {
        CaptionRecord::new(sidecar.caption(m)).map_err(|_| Error::MalformedSidecar {
            path: path.to_path_buf(),
            message: format!("{m} caption is empty"),
        })
    })
}

/// Loads and validates a dataset root with captions required.
pub fn load_dataset(root: &Path, object_type: ObjectType) -> Result<DatasetIndex> {
    load_dataset_with(root, object_type, LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, object_type: ObjectType, opts: LoadOptions) -> Result<DatasetIndex> {
    let meta = root.join("meta.csv");
    if !meta.exists() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(&meta).map_err(|e| Error::Data(format!("{}: {e}", meta.display())))?;
    let mut records = Vec::new();
    for row in reader.deserialize::<MetaRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", meta.display())))?;
        let split: Split = row.split.parse().map_err(Error::Data)?;
        let mut size = None;
        for m in Modality::ALL {
            let p = image_path(root, m, &row.sample_id);
            if !p.is_file() {
                return Err(Error::MissingModality {
                    sample: row.sample_id.clone(),
                    modality: m,
                    path: p,
                });
            }
            if opts.check_image_sizes {
                let dims = image::image_dimensions(&p).map_err(|e| Error::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
                match size {
                    None => size = Some(dims),
                    Some(s) if s != dims => {
                        return Err(Error::Data(format!(
                            "sample {}: {m} is {dims:?} but rgb is {s:?}",
                            row.sample_id
                        )))
                    }
                    _ => {}
                }
            }
        }
        let cap_path = sidecar_path(root, &row.sample_id);
        let captions = if opts.require_captions {
            if !cap_path.is_file() {
                return Err(Error::MalformedSidecar {
                    path: cap_path,
                    message: "missing".into(),
                });
            }
            Some(read_captions(&cap_path)?)
        } else {
            read_captions(&cap_path).ok()
        };
        records.push(SampleRecord {
            sample_id: row.sample_id,
            identity: 0,
            raw_identity: row.identity,
            camera: row.camera,
            time_label: row.time_label,
            split,
            captions,
        });
    }
    if records.is_empty() {
        return Err(Error::NoSamples(root.to_path_buf()));
    }
    remap_identities(&mut records);
    let mut index = DatasetIndex::on_disk(object_type, root.to_path_buf(), records)?;
    let truth_path = root.join("truth.json");
    if truth_path.is_file() {
        let text = std::fs::read_to_string(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
        index.truth = Some(serde_json::from_str::<SyntheticTruth>(&text)?);
    }
    let stats = index.stats();
    log::info!(
        "loaded {}: {} samples, {} identities, {} cameras",
        root.display(),
        stats.samples,
        stats.identities,
        stats.cameras
    );
    Ok(index)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{:?}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Writes `index` to `root` in the standard layout. Refuses a non-empty
/// target unless `force`, in which case the layout entries are replaced.
pub fn write_dataset(index: &DatasetIndex, root: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(root) {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        for sub in ["rgb", "nir", "tir", "captions"] {
            let p = root.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        for f in ["meta.csv", "truth.json"] {
            let p = root.join(f);
            if p.is_file() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    for sub in ["rgb", "nir", "tir", "captions"] {
        let p = root.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut meta = csv::Writer::from_writer(Vec::new());
    for (i, r) in index.records.iter().enumerate() {
        let sample = index.sample(i, None)?;
        for m in Modality::ALL {
            let p = image_path(root, m, &r.sample_id);
            std::fs::write(&p, encode_png(sample.images.get(m))?).map_err(|e| Error::io(&p, e))?;
        }
        if let Some(c) = &r.captions {
            let sidecar = CaptionSidecar {
                sample_id: Some(r.sample_id.clone()),
                rgb: c.rgb.text.clone(),
                nir: c.nir.text.clone(),
                tir: c.tir.text.clone(),
                attributes: None,
            };
            sidecar.write(&sidecar_path(root, &r.sample_id))?;
        }
        meta.serialize(MetaRow {
            sample_id: r.sample_id.clone(),
            identity: r.raw_identity,
            camera: r.camera,
            time_label: r.time_label,
            split: r.split.to_string(),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = meta.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&root.join("meta.csv"), &bytes)?;
    if let Some(t) = &index.truth {
        let mut text = serde_json::to_string_pretty(t)?;
        text.push('\n');
        write_atomic(&root.join("truth.json"), text.as_bytes())?;
    }
    Ok(())
}
