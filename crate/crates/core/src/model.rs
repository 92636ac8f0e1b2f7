//! The assembled network, its losses, the optimizer and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{backprop::GradStore, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::csse::{Csse, CsseConfig};
use crate::ctx::ForwardCtx;
use crate::data::{CaptionRecord, MultiModalSample};
use crate::encoders::{patchify_batch, EncoderConfig, TextEncoder, VisualEncoder, VisualFeatures};
use crate::error::{Error, Result};
use crate::mmfa::{build_query, Aggregated, Mmfa, MmfaConfig, QueryPool};
use crate::modality::PerModality;
use crate::nn::{self, Linear, ParamStore};
use crate::rng;
use crate::tmse::{RouteState, TextInput, Tmse, TmseConfig};

pub const CHECKPOINT_FORMAT: &str = "mmreid-next/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleToggles {
    pub mmfa: bool,
    pub tmse: bool,
    pub csse: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self {
            mmfa: true,
            tmse: true,
            csse: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// First-moment decay.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimizerConfig {
    /// Rate suited to training from scratch at desk scale.
    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            ..Self::reference()
        }
    }

    /// Settings for fine-tuning a pretrained backbone.
    pub fn reference() -> Self {
        Self {
            lr: 3.5e-6,
            weight_decay: 1e-4,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NextConfig {
    pub encoder: EncoderConfig,
    pub tmse: TmseConfig,
    pub csse: CsseConfig,
    pub mmfa: MmfaConfig,
    pub modules: ModuleToggles,
    pub dropout: f64,
    pub margin: f64,
    pub label_smoothing: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for NextConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            tmse: TmseConfig::default(),
            csse: CsseConfig::default(),
            mmfa: MmfaConfig::default(),
            modules: ModuleToggles::default(),
            dropout: 0.1,
            margin: 0.3,
            label_smoothing: 0.1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl NextConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let m = self.modules;
        if !m.mmfa && (m.tmse || m.csse) {
            return Err(Error::Config(
                "expert banks feed the aggregation stage; enable mmfa to use tmse or csse".into(),
            ));
        }
        if m.tmse && self.tmse.num_experts == 0 {
            return Err(Error::Config("tmse is enabled with zero experts".into()));
        }
        if m.csse && self.csse.num_experts == 0 {
            return Err(Error::Config("csse is enabled with zero experts".into()));
        }
        if m.tmse && self.tmse.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// Number of expert entries aggregated by the cross-attention stage.
    pub fn num_entries(&self) -> usize {
        let m = self.modules;
        if !m.mmfa {
            return 0;
        }
        let n = if m.tmse { self.tmse.num_experts } else { 0 } + usize::from(m.csse);
        n.max(1)
    }

    pub fn embedding_dim(&self) -> usize {
        let d = self.encoder.dim;
        if !self.modules.mmfa {
            return 3 * d;
        }
        let per = match self.mmfa.query_pool {
            QueryPool::Flatten => 3 * d,
            QueryPool::Mean => d,
        };
        self.num_entries() * per
    }
}

/// Model-ready batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, N, 3*p*p)`.
    pub patches: Tensor,
    pub labels: Vec<usize>,
    pub sample_keys: Vec<u64>,
    pub captions: Option<Vec<PerModality<CaptionRecord>>>,
}

impl Batch {
    pub fn from_samples(samples: &[MultiModalSample], cfg: &EncoderConfig) -> Result<Self> {
        let imgs: Vec<_> = samples.iter().map(|s| &s.images).collect();
        let captions = samples
            .iter()
            .map(|s| s.captions.clone())
            .collect::<Option<Vec<_>>>();
        Ok(Self {
            patches: patchify_batch(&imgs, cfg)?,
            labels: samples.iter().map(|s| s.identity).collect(),
            sample_keys: samples.iter().map(|s| rng::string_key(&s.sample_id)).collect(),
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, embedding_dim)`.
    pub embedding: Tensor,
    /// `(B, C)`.
    pub logits: Tensor,
    pub features: VisualFeatures,
    pub routes: Vec<RouteState>,
    /// Structure routing weights, when the structure bank is on.
    pub omega: Option<Tensor>,
    /// Per-expert outputs of the structure bank, `(B, 3N, D)` each.
    pub structure_outputs: Vec<Tensor>,
    pub aggregation: Vec<Aggregated>,
}

pub struct Next {
    pub cfg: NextConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub tmse: Option<Tmse>,
    pub csse: Option<Csse>,
    pub mmfa: Option<Mmfa>,
    pub classifier: Linear,
}

impl std::fmt::Debug for Next {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Next")
            .field("num_classes", &self.num_classes)
            .field("embedding_dim", &self.cfg.embedding_dim())
            .field("trainable", &self.store.num_trainable())
            .finish()
    }
}

impl Next {
    pub fn new(cfg: &NextConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let store = ParamStore::new(cfg.seed);
        let root = store.root();
        let d = cfg.encoder.dim;
        let m = cfg.modules;
        let visual = VisualEncoder::new(&root.pp("visual"), &cfg.encoder)?;
        let text = TextEncoder::new(&root.pp("text"), &cfg.encoder)?;
        let tmse = if m.tmse {
            Some(Tmse::new(&root.pp("tmse"), d, &cfg.tmse, cfg.dropout)?)
        } else {
            None
        };
        let csse = if m.csse {
            Some(Csse::new(&root.pp("csse"), d, &cfg.csse, cfg.dropout)?)
        } else {
            None
        };
        let mmfa = if m.mmfa {
            Some(Mmfa::new(&root.pp("mmfa"), d, cfg.num_entries(), &cfg.mmfa)?)
        } else {
            None
        };
        let classifier = Linear::no_bias(&root.pp("classifier"), cfg.embedding_dim(), num_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_classes,
            store,
            visual,
            text,
            tmse,
            csse,
            mmfa,
            classifier,
        })
    }

    pub fn forward(&self, batch: &Batch, ctx: &ForwardCtx) -> Result<ForwardOutput> {
        let feats = self.visual.forward(&batch.patches)?;
        let b = feats.batch();
        let mut routes = Vec::new();
        let mut omega = None;
        let mut structure_outputs = Vec::new();
        let mut aggregation = Vec::new();
        let embedding = match &self.mmfa {
            None => feats.cls()?.reshape((b, 3 * self.cfg.encoder.dim))?,
            Some(mmfa) => {
                let mut entries = Vec::new();
                if let Some(tmse) = &self.tmse {
                    let texts = if tmse.modulates(ctx) {
                        let caps = batch.captions.as_ref().ok_or_else(|| {
                            Error::Config("text modulation needs captions for every sample".into())
                        })?;
                        Some(TextInput {
                            captions: caps.iter().collect(),
                            sample_keys: batch.sample_keys.clone(),
                            encoder: &self.text,
                        })
                    } else {
                        None
                    };
                    let (outs, states) = tmse.forward(&feats, texts.as_ref(), ctx)?;
                    entries.extend(outs);
                    routes = states;
                }
                if let Some(csse) = &self.csse {
                    let s = csse.forward(&feats.tok_concat()?, ctx)?;
                    entries.push(s.mixed);
                    omega = Some(s.omega.detach());
                    structure_outputs = s.expert_outputs.iter().map(|t| t.detach()).collect();
                }
                if entries.is_empty() {
                    entries.push(feats.tok_concat()?);
                }
                let (emb, aggs) = mmfa.forward(&build_query(&feats)?, &entries)?;
                aggregation = aggs;
                emb
            }
        };
        let logits = self.classifier.forward(&embedding)?;
        Ok(ForwardOutput {
            embedding,
            logits,
            features: feats,
            routes,
            omega,
            structure_outputs,
            aggregation,
        })
    }

    /// Eval-mode embeddings as plain rows.
    pub fn embed(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        nn::to_vec2(&self.forward(batch, &ForwardCtx::eval())?.embedding)
    }

    /// Loss of a forward pass.
    pub fn loss(&self, out: &ForwardOutput, labels: &[usize]) -> Result<Losses> {
        let id = id_loss(&out.logits, labels, self.cfg.label_smoothing)?;
        let tri = triplet_loss(&out.embedding, labels, self.cfg.margin)?;
        let total = (&id + &tri)?;
        Ok(Losses { id, triplet: tri, total })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Loss tensors (scalars) of one forward pass.
#[derive(Debug, Clone)]
pub struct Losses {
    pub id: Tensor,
    pub triplet: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub total: f64,
    pub accuracy: f64,
}

impl LossReport {
    pub fn new(id_loss: f64, triplet_loss: f64, accuracy: f64) -> Self {
        Self {
            id_loss,
            triplet_loss,
            total: id_loss + triplet_loss,
            accuracy,
        }
    }
}

/// Cross-entropy against `(1 - eps) * onehot + eps / C`, averaged over the
/// batch.
pub fn id_loss(logits: &Tensor, labels: &[usize], eps: f64) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::Config("classification needs at least 2 classes".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} logits", labels.len())));
    }
    let mut target = vec![eps / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        target[i * c + l] += 1.0 - eps;
    }
    let target = nn::tensor(target, &[b, c])?;
    let logp = nn::log_softmax_last(logits)?;
    Ok(((logp * target)?.sum_all()? * (-1.0 / b as f64))?)
}

/// Pairwise Euclidean distances `sqrt(|a - b|^2 + 1e-12)`; the offset keeps
/// the gradient finite on the diagonal.
pub fn pairwise_distances(emb: &Tensor) -> Result<Tensor> {
    let diff = emb.unsqueeze(1)?.broadcast_sub(&emb.unsqueeze(0)?)?;
    Ok((diff.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?)
}

/// Hinge on given anchor distances, averaged.
pub fn triplet_from_distances(d_ap: &[f64], d_an: &[f64], margin: f64) -> f64 {
    d_ap.iter()
        .zip(d_an)
        .map(|(p, n)| (p - n + margin).max(0.0))
        .sum::<f64>()
        / d_ap.len() as f64
}

/// Batch-hard triplet loss. Positives include the anchor itself, so every
/// anchor has one even when its identity appears once.
pub fn triplet_loss(emb: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let b = emb.dims2()?.0;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleIdentity);
    }
    let dist = pairwise_distances(emb)?;
    let values = nn::to_vec2(&dist)?;
    let mut sel_p = vec![0.0; b * b];
    let mut sel_n = vec![0.0; b * b];
    for i in 0..b {
        let mut hp = (f64::NEG_INFINITY, i);
        let mut hn = (f64::INFINITY, i);
        for j in 0..b {
            let v = values[i][j];
            if labels[j] == labels[i] {
                if v > hp.0 {
                    hp = (v, j);
                }
            } else if v < hn.0 {
                hn = (v, j);
            }
        }
        sel_p[i * b + hp.1] = 1.0;
        sel_n[i * b + hn.1] = 1.0;
    }
    let d_ap = (&dist * nn::tensor(sel_p, &[b, b])?)?.sum(1)?;
    let d_an = (&dist * nn::tensor(sel_n, &[b, b])?)?.sum(1)?;
    Ok(((d_ap - d_an)? + margin)?.relu()?.mean_all()?)
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Adam with the weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.momentum.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor().detach();
            let g = if c.weight_decay > 0.0 {
                (g + (&theta * c.weight_decay)?)?
            } else {
                g.clone()
            };
            let m = match self.m.get(&name) {
                Some(m) => ((m * c.momentum)? + (&g * (1.0 - c.momentum))?)?,
                None => (&g * (1.0 - c.momentum))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }
}

/// Forward, loss, backward and one optimizer update.
pub fn train_step(model: &Next, batch: &Batch, opt: &mut Adam, ctx: &ForwardCtx, lr: f64) -> Result<(LossReport, ForwardOutput)> {
    let out = model.forward(batch, ctx)?;
    let losses = model.loss(&out, &batch.labels)?;
    let id = losses.id.to_scalar::<f64>()?;
    let tri = losses.triplet.to_scalar::<f64>()?;
    if !id.is_finite() || !tri.is_finite() {
        let emb = nn::to_vec1(&out.embedding)?;
        let bad = emb.iter().filter(|v| !v.is_finite()).count();
        return Err(Error::NonFiniteLoss {
            step: ctx.step,
            detail: format!(
                "id_loss={id}, triplet_loss={tri}, non-finite embedding entries={bad}/{}",
                emb.len()
            ),
        });
    }
    let grads = losses.total.backward()?;
    opt.step(&model.store, &grads, lr)?;
    let acc = accuracy(&out.logits, &batch.labels)?;
    Ok((LossReport::new(id, tri, acc), out))
}

fn save_checkpoint(model: &Next, path: &Path) -> Result<()> {
    let mut buffers = Vec::new();
    for (name, var, _) in model.store.all() {
        let data = nn::to_vec1(var.as_tensor())?;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name, var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&model.cfg)?);
    meta.insert("num_classes".to_string(), model.num_classes.to_string());
    let bytes = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::data::write_atomic(path, &canonical_header(&bytes)?)
}

/// Rewrites the JSON header with sorted keys so equal models give equal bytes.
fn canonical_header(bytes: &[u8]) -> Result<Vec<u8>> {
    let bad = || Error::Checkpoint("malformed safetensors header".into());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(bad)?;
    let mut entries: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header)?;
    if let Some(meta) = entries.get_mut("__metadata__") {
        let sorted: BTreeMap<String, String> = serde_json::from_value(meta.take())?;
        *meta = serde_json::to_value(sorted)?;
    }
    let mut text = serde_json::to_string(&entries)?.into_bytes();
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - len);
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text);
    out.extend(&bytes[8 + len..]);
    Ok(out)
}

fn load_checkpoint(path: &Path) -> Result<Next> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT}",
            meta.get("format")
        )));
    }
    let cfg: NextConfig = serde_json::from_str(
        meta.get("config")
            .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
    )?;
    let classes: usize = meta
        .get("num_classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing num_classes".into()))?;
    let model = Next::new(&cfg, classes)?;
    let st = safetensors::SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for (name, var, _) in model.store.all() {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("parameter {name} missing")))?;
        if view.dtype() != safetensors::Dtype::F64 || view.shape() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored {:?} {:?}, expected F64 {:?}",
                view.dtype(),
                view.shape(),
                var.dims()
            )));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        var.set(&nn::tensor(data, var.dims())?)?;
    }
    model.text.reset_cache();
    Ok(model)
}
