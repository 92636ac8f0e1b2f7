use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::schema::AttributeSchema;
use super::{default_low_markers, UNKNOWN};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng;

/// A multimodal (or text-only) language model behind a uniform call.
pub trait MllmClient: Send + Sync {
    fn backend_id(&self) -> &str;

    /// `image` is the encoded image file, or `None` for text-only requests.
    fn generate(&self, prompt: &str, image: Option<&[u8]>) -> Result<String>;
}

fn sha_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Key of a recorded exchange: hash over backend, prompt and image digest.
pub fn fixture_key(backend: &str, prompt: &str, image: Option<&[u8]>) -> String {
    let image_digest = image.map_or_else(|| "none".to_string(), sha_hex);
    sha_hex(format!("{backend}\n{prompt}\n{image_digest}").as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    backend: String,
    key: String,
    response: String,
}

fn fixture_path(dir: &Path, backend: &str, key: &str) -> PathBuf {
    dir.join(backend).join(format!("{key}.json"))
}

/// Answers from a fixture store recorded earlier; fully offline.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    backend: String,
    dir: PathBuf,
}

impl ReplayClient {
    pub fn new(backend: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            backend: backend.into(),
            dir: dir.into(),
        }
    }

    /// One replay client per backend subdirectory of `dir`, sorted by name.
    pub fn discover(dir: &Path) -> Result<Vec<ReplayClient>> {
        let mut out = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let e = e.map_err(|e| Error::io(dir, e))?;
            if e.path().is_dir() {
                out.push(ReplayClient::new(e.file_name().to_string_lossy(), dir));
            }
        }
        out.sort_by(|a, b| a.backend.cmp(&b.backend));
        Ok(out)
    }
}

impl MllmClient for ReplayClient {
    fn backend_id(&self) -> &str {
        &self.backend
    }

    fn generate(&self, prompt: &str, image: Option<&[u8]>) -> Result<String> {
        let key = fixture_key(&self.backend, prompt, image);
        let path = fixture_path(&self.dir, &self.backend, &key);
        let text = std::fs::read_to_string(&path).map_err(|_| Error::Client {
            backend: self.backend.clone(),
            message: format!("no fixture {}", path.display()),
        })?;
        let rec: FixtureRecord = serde_json::from_str(&text)?;
        Ok(rec.response)
    }
}

/// Forwards to another client and stores every exchange as a fixture.
pub struct RecordingClient {
    inner: Arc<dyn MllmClient>,
    dir: PathBuf,
}

impl RecordingClient {
    pub fn new(inner: Arc<dyn MllmClient>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl MllmClient for RecordingClient {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate(&self, prompt: &str, image: Option<&[u8]>) -> Result<String> {
        let response = self.inner.generate(prompt, image)?;
        let backend = self.inner.backend_id();
        let key = fixture_key(backend, prompt, image);
        let path = fixture_path(&self.dir, backend, &key);
        let parent = path.parent().expect("fixture path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let rec = FixtureRecord {
            backend: backend.to_string(),
            key,
            response: response.clone(),
        };
        crate::data::write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
        Ok(response)
    }
}

/// Runs an external program per request: the prompt on stdin, the image
/// (if any) as a temporary file whose path is in `MMREID_IMAGE`. Credentials
/// reach the program through its inherited environment.
#[derive(Debug, Clone)]
pub struct ExecClient {
    backend: String,
    program: PathBuf,
    args: Vec<String>,
}

impl ExecClient {
    pub fn new(backend: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            backend: backend.into(),
            program: program.into(),
            args,
        }
    }
}

impl MllmClient for ExecClient {
    fn backend_id(&self) -> &str {
        &self.backend
    }

    fn generate(&self, prompt: &str, image: Option<&[u8]>) -> Result<String> {
        let err = |message: String| Error::Client {
            backend: self.backend.clone(),
            message,
        };
        let image_path = match image {
            Some(bytes) => {
                let p = std::env::temp_dir().join(format!(
                    "mmreid-{}-{}.png",
                    std::process::id(),
                    fixture_key(&self.backend, prompt, Some(bytes))
                ));
                std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
                Some(p)
            }
            None => None,
        };
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(p) = &image_path {
            cmd.env("MMREID_IMAGE", p);
        }
        let mut child = cmd.spawn().map_err(|e| err(format!("spawn failed: {e}")))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(prompt.as_bytes())
            .map_err(|e| err(format!("stdin: {e}")))?;
        let out = child.wait_with_output().map_err(|e| err(e.to_string()))?;
        if let Some(p) = image_path {
            let _ = std::fs::remove_file(p);
        }
        if !out.status.success() {
            return Err(err(format!(
                "exit {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Ground truth the simulated backend sees behind one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTruth {
    pub sample_id: String,
    pub modality: Modality,
    pub attributes: BTreeMap<String, String>,
    /// Attribute that is not recognizable in this image.
    pub suppressed: Option<String>,
    /// Plausible wrong readings per attribute.
    #[serde(default)]
    pub alternatives: BTreeMap<String, Vec<String>>,
}

/// Confidence profile of a simulated backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedBackend {
    pub id: String,
    pub confidence_range: (f64, f64),
    /// Probability of a wrong (low-confidence) reading per attribute.
    pub error_rate: f64,
    /// Wrap the JSON answer in prose, like chatty models do.
    pub chatty: bool,
}

impl SimulatedBackend {
    pub fn reference_pair() -> [SimulatedBackend; 2] {
        [
            SimulatedBackend {
                id: "alpha".into(),
                confidence_range: (0.7, 0.99),
                error_rate: 0.0,
                chatty: false,
            },
            SimulatedBackend {
                id: "beta".into(),
                confidence_range: (0.6, 0.95),
                error_rate: 0.15,
                chatty: true,
            },
        ]
    }
}

/// Offline stand-in for a multimodal model: looks the image up by digest and
/// reports its known attributes with backend-specific confidences. Text-only
/// requests (caption composition) are answered by rendering the attribute
/// lines of the prompt.
pub struct SimulatedClient {
    backend: SimulatedBackend,
    schema: AttributeSchema,
    truth: HashMap<String, SimulatedTruth>,
    seed: u64,
}

impl SimulatedClient {
    pub fn new(
        backend: SimulatedBackend,
        schema: AttributeSchema,
        truths: impl IntoIterator<Item = (Vec<u8>, SimulatedTruth)>,
        seed: u64,
    ) -> Self {
        let truth = truths.into_iter().map(|(img, t)| (sha_hex(&img), t)).collect();
        Self {
            backend,
            schema,
            truth,
            seed,
        }
    }

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    fn describe(&self, digest: &str, truth: &SimulatedTruth) -> String {
        let mut r = rng::stream(
            self.seed,
            &[rng::tag::FIXTURE, rng::string_key(&self.backend.id), rng::string_key(digest)],
        );
        let (lo, hi) = self.backend.confidence_range;
        let markers = default_low_markers();
        let mut obj = serde_json::Map::new();
        for name in self.schema.names() {
            let truth_value = truth.attributes.get(name).cloned();
            let (value, conf) = if truth.suppressed.as_deref() == Some(name) {
                let v = markers[r.random_range(0..markers.len())].clone();
                (v, r.random_range(0.1..0.35))
            } else if let Some(v) = truth_value {
                let alts = truth.alternatives.get(name).filter(|a| !a.is_empty());
                match alts {
                    Some(alts) if r.random::<f64>() < self.backend.error_rate => {
                        (alts[r.random_range(0..alts.len())].clone(), r.random_range(0.3..0.55))
                    }
                    _ => (v, r.random_range(lo..hi)),
                }
            } else {
                (UNKNOWN.to_string(), r.random_range(0.0..0.2))
            };
            obj.insert(
                name.to_string(),
                json!({"value": value, "confidence": Self::round2(conf)}),
            );
        }
        let body = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("json");
        if self.backend.chatty {
            format!("Here are the attributes I can identify:\n```json\n{body}\n```\n")
        } else {
            body
        }
    }

    fn compose(&self, prompt: &str) -> String {
        let mut sentences = Vec::new();
        for line in prompt.lines() {
            let Some(rest) = line.strip_prefix("- ") else { continue };
            let Some((name, tail)) = rest.split_once(": ") else { continue };
            let value = tail.rsplit_once(" (confidence").map_or(tail, |(v, _)| v);
            if crate::captions::is_low(value, &default_low_markers()) {
                continue;
            }
            if let Some(spec) = self.schema.spec(name) {
                sentences.push(spec.render(value));
            }
        }
        sentences.join(" ")
    }
}

impl MllmClient for SimulatedClient {
    fn backend_id(&self) -> &str {
        &self.backend.id
    }

    fn generate(&self, prompt: &str, image: Option<&[u8]>) -> Result<String> {
        match image {
            None => Ok(self.compose(prompt)),
            Some(bytes) => {
                let digest = sha_hex(bytes);
                let truth = self.truth.get(&digest).ok_or_else(|| Error::Client {
                    backend: self.backend.id.clone(),
                    message: format!("image {digest} not in simulated truth table"),
                })?;
                Ok(self.describe(&digest, truth))
            }
        }
    }
}
