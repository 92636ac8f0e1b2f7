use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::client::MllmClient;
use super::compose::{compose_caption, CaptionComposer};
use super::merge::{complement_modalities, merge_backends, ComplementConfig};
use super::parse::parse_attribute_response;
use super::prompt::build_attribute_prompt;
use super::schema::AttributeSchema;
use super::{ConfidenceAttribute, Provenance};
use crate::data::{self, LoadOptions, ObjectType};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarAttribute {
    pub name: String,
    pub value: String,
    pub confidence: f64,
    pub provenance: Provenance,
}

impl From<&ConfidenceAttribute> for SidecarAttribute {
    fn from(a: &ConfidenceAttribute) -> Self {
        Self {
            name: a.name.clone(),
            value: a.value.clone(),
            confidence: a.confidence,
            provenance: a.provenance,
        }
    }
}

impl From<&SidecarAttribute> for ConfidenceAttribute {
    fn from(a: &SidecarAttribute) -> Self {
        Self {
            name: a.name.clone(),
            value: a.value.clone(),
            confidence: a.confidence,
            provenance: a.provenance,
        }
    }
}

/// Per-sample caption file: `captions/<sample_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub rgb: String,
    pub nir: String,
    pub tir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PerModality<Vec<SidecarAttribute>>>,
}

impl CaptionSidecar {
    pub fn caption(&self, m: Modality) -> &str {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Nir => &self.nir,
            Modality::Tir => &self.tir,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedSidecar {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        data::write_atomic(path, text.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub object_type: ObjectType,
    /// Backend tie-break order for the merge.
    pub priority: Vec<String>,
    pub complement: ComplementConfig,
    pub composer: CaptionComposer,
    /// Upper bound on samples processed at once.
    pub concurrency: usize,
    /// Skip samples whose sidecar already carries attributes.
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            object_type: ObjectType::Person,
            priority: Vec::new(),
            complement: ComplementConfig::default(),
            composer: CaptionComposer::Template,
            concurrency: 4,
            resume: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl PipelineSummary {
    pub fn ok(&self) -> bool {
        self.failed.is_empty()
    }
}

fn is_complete(path: &Path) -> bool {
    CaptionSidecar::read(path).is_ok_and(|s| s.attributes.is_some())
}

/// Attribute extraction, merge, complement and composition for one sample.
pub fn caption_sample(
    images: &PerModality<Vec<u8>>,
    sample_id: &str,
    clients: &[Arc<dyn MllmClient>],
    cfg: &PipelineConfig,
) -> Result<CaptionSidecar> {
    let schema = AttributeSchema::for_object(cfg.object_type);
    let merged = PerModality::try_from_fn(|m| -> Result<Vec<ConfidenceAttribute>> {
        let prompt = build_attribute_prompt(&schema, m);
        let mut per_backend = Vec::with_capacity(clients.len());
        for c in clients {
            let raw = c.generate(&prompt, Some(images.get(m)))?;
            per_backend.push((c.backend_id().to_string(), parse_attribute_response(&raw, &schema)?));
        }
        Ok(merge_backends(&schema, &per_backend, &cfg.priority))
    })?;
    let complemented = complement_modalities(&schema, &merged, &cfg.complement);
    let captions = PerModality::try_from_fn(|m| {
        compose_caption(&schema, complemented.get(m), m, &cfg.composer, &cfg.complement)
    })?;
    Ok(CaptionSidecar {
        sample_id: Some(sample_id.to_string()),
        rgb: captions.rgb,
        nir: captions.nir,
        tir: captions.tir,
        attributes: Some(complemented.map(|_, v| v.iter().map(SidecarAttribute::from).collect())),
    })
}

fn read_images(root: &Path, sample_id: &str) -> Result<PerModality<Vec<u8>>> {
    PerModality::try_from_fn(|m| {
        let p = data::image_path(root, m, sample_id);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    })
}

/// Captions every sample under `root`, writing sidecars atomically. Samples
/// fail independently; the summary lists every failure.
pub fn run_pipeline(
    root: &Path,
    clients: &[Arc<dyn MllmClient>],
    cfg: &PipelineConfig,
) -> Result<PipelineSummary> {
    if clients.is_empty() {
        return Err(Error::Config("caption pipeline needs at least one client".into()));
    }
    let index = data::load_dataset_with(
        root,
        cfg.object_type,
        LoadOptions {
            require_captions: false,
            check_image_sizes: false,
        },
    )?;
    let ids: Vec<String> = index.records.iter().map(|r| r.sample_id.clone()).collect();
    let captions_dir = root.join("captions");
    std::fs::create_dir_all(&captions_dir).map_err(|e| Error::io(&captions_dir, e))?;

    enum Outcome {
        Written,
        Skipped,
        Failed(String),
    }
    let outcomes: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..ids.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.clamp(1, ids.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= ids.len() {
                    break;
                }
                let id = &ids[i];
                let path: PathBuf = captions_dir.join(format!("{id}.json"));
                let outcome = if cfg.resume && is_complete(&path) {
                    Outcome::Skipped
                } else {
                    match read_images(root, id)
                        .and_then(|imgs| caption_sample(&imgs, id, clients, cfg))
                        .and_then(|sidecar| sidecar.write(&path))
                    {
                        Ok(()) => Outcome::Written,
                        Err(e) => {
                            log::warn!("caption {id}: {e}");
                            Outcome::Failed(e.to_string())
                        }
                    }
                };
                outcomes.lock().expect("outcomes")[i] = Some(outcome);
            });
        }
    });

    let mut summary = PipelineSummary::default();
    for (id, o) in ids.into_iter().zip(outcomes.into_inner().expect("outcomes")) {
        match o.expect("every sample visited") {
            Outcome::Written => summary.written.push(id),
            Outcome::Skipped => summary.skipped.push(id),
            Outcome::Failed(msg) => summary.failed.push((id, msg)),
        }
    }
    Ok(summary)
}
