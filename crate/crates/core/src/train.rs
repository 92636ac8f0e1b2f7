//! Training loop, embedding extraction and periodic evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctx::ForwardCtx;
use crate::data::{pk_batches, AugmentationConfig, Augmenter, DatasetIndex, MultiModalSample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ItemMeta, Protocol, RetrievalSet};
use crate::model::{train_step, Adam, Batch, ForwardOutput, LossReport, Next, NextConfig};
use crate::nn;
use crate::rng::{self, tag};

/// Which samples periodic evaluation ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Query/gallery when the index has them, otherwise the training split.
    #[default]
    Auto,
    /// Query against gallery.
    Test,
    /// Training split against itself (held-in).
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: NextConfig,
    pub steps: u64,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
    /// `None` trains on the raw images.
    pub augment: Option<AugmentationConfig>,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_split: EvalSplit,
    pub protocol: Protocol,
    pub normalize: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: NextConfig::default(),
            steps: 300,
            p: 4,
            k: 4,
            augment: Some(AugmentationConfig::default()),
            eval_every: 100,
            eval_split: EvalSplit::Auto,
            protocol: Protocol::None,
            normalize: false,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSummary {
    /// Batch mean weight per structure expert.
    pub mean: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// Counts over ten equal bins of [0, 1].
    pub histogram: Vec<usize>,
}

impl OmegaSummary {
    /// `omega` rows are per-sample (or per-sample-per-modality) weights.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let width = rows.first()?.len();
        let mut mean = vec![0.0; width];
        let mut histogram = vec![0; 10];
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in rows {
            for (j, &w) in r.iter().enumerate() {
                mean[j] += w / rows.len() as f64;
                min = min.min(w);
                max = max.max(w);
                histogram[((w * 10.0) as usize).min(9)] += 1;
            }
        }
        Some(Self {
            mean,
            min,
            max,
            histogram,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub lr: f64,
    /// Mask density keyed `expert<i>.<modality>`.
    pub mask_density: BTreeMap<String, f64>,
    pub omega: Option<OmegaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub split: String,
    pub report: EvalReport,
}

pub struct TrainOutcome {
    pub model: Next,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step of the best evaluation (by mAP, earliest wins ties).
    pub best_step: Option<u64>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Flattens an `(B, N_C)` or `(B, 3, N_C)` weight tensor into rows.
pub fn omega_rows(omega: &candle_core::Tensor) -> Result<Vec<Vec<f64>>> {
    let last = *omega.dims().last().unwrap_or(&0);
    let n = omega.elem_count() / last.max(1);
    nn::to_vec2(&omega.reshape((n, last))?)
}

fn step_record(step: u64, losses: LossReport, lr: f64, out: &ForwardOutput) -> Result<StepRecord> {
    let mut mask_density = BTreeMap::new();
    for r in &out.routes {
        mask_density.insert(format!("expert{}.{}", r.expert, r.modality), r.density()?);
    }
    let omega = match &out.omega {
        Some(o) => OmegaSummary::from_rows(&omega_rows(o)?),
        None => None,
    };
    Ok(StepRecord {
        step,
        losses,
        lr,
        mask_density,
        omega,
    })
}

/// Learning rate at `step` (0-based) of `total`.
pub fn learning_rate(cfg: &crate::model::OptimizerConfig, step: u64, total: u64) -> f64 {
    if cfg.cosine_decay && total > 1 {
        let t = step as f64 / (total - 1) as f64;
        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
    } else {
        cfg.lr
    }
}

/// Eval-mode embeddings of `indices`, in order.
pub fn embed_indices(model: &Next, index: &DatasetIndex, indices: &[usize], batch: usize) -> Result<Vec<Vec<f64>>> {
    let size = Some(model.cfg.encoder.image_size);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let samples = chunk
            .iter()
            .map(|&i| index.sample(i, size))
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.embed(&Batch::from_samples(&samples, &model.cfg.encoder)?)?);
    }
    Ok(out)
}

pub fn item_meta(index: &DatasetIndex, i: usize) -> ItemMeta {
    let r = &index.records[i];
    ItemMeta {
        key: r.sample_id.clone(),
        identity: r.raw_identity,
        camera: r.camera,
        time_label: r.time_label,
    }
}

/// Builds the retrieval set for `split`, embedding with `model`.
pub fn retrieval_set(model: &Next, index: &DatasetIndex, split: EvalSplit, batch: usize) -> Result<(RetrievalSet, &'static str)> {
    let (q, g) = (index.indices(Split::Query), index.indices(Split::Gallery));
    let use_test = match split {
        EvalSplit::Test => {
            if q.is_empty() || g.is_empty() {
                return Err(Error::Protocol("index has no query/gallery split".into()));
            }
            true
        }
        EvalSplit::Train => false,
        EvalSplit::Auto => !q.is_empty() && !g.is_empty(),
    };
    let (q, g, name) = if use_test {
        (q, g, "query_gallery")
    } else {
        let t = index.indices(Split::Train);
        (t.clone(), t, "train")
    };
    let gallery = embed_indices(model, index, &g, batch)?;
    let query = if name == "train" {
        gallery.clone()
    } else {
        embed_indices(model, index, &q, batch)?
    };
    Ok((
        RetrievalSet {
            query,
            query_meta: q.iter().map(|&i| item_meta(index, i)).collect(),
            gallery,
            gallery_meta: g.iter().map(|&i| item_meta(index, i)).collect(),
        },
        name,
    ))
}

pub fn evaluate_model(model: &Next, index: &DatasetIndex, cfg: &TrainConfig) -> Result<(EvalReport, &'static str)> {
    let (set, name) = retrieval_set(model, index, cfg.eval_split, cfg.eval_batch)?;
    Ok((evaluate(&set, cfg.protocol, cfg.normalize)?, name))
}

/// Files written by [`train`] into its output directory.
pub struct TrainPaths {
    pub log: PathBuf,
    pub evals: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl TrainPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            log: dir.join("train_log.jsonl"),
            evals: dir.join("eval_log.jsonl"),
            best: dir.join("best.safetensors"),
            last: dir.join("last.safetensors"),
        }
    }
}

fn append_json(file: &mut Option<std::fs::File>, path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn training_samples(index: &DatasetIndex, size: (usize, usize)) -> Result<BTreeMap<usize, MultiModalSample>> {
    index
        .indices(Split::Train)
        .into_iter()
        .map(|i| Ok((i, index.sample(i, Some(size))?)))
        .collect()
}

/// Trains a fresh model on the training split of `index`. With `out_dir`,
/// writes the step log, the evaluation log and the best and last checkpoints.
pub fn train(index: &DatasetIndex, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Next::new(&cfg.model, index.num_classes())?;
    train_model(model, index, cfg, out_dir)
}

pub fn train_model(model: Next, index: &DatasetIndex, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.model.seed;
    let size = cfg.model.encoder.image_size;
    let needs_text = model.tmse.as_ref().is_some_and(|t| t.cfg.text_modulation);
    if needs_text && index.indices(Split::Train).iter().any(|&i| index.records[i].captions.is_none()) {
        return Err(Error::Config("text modulation is on but some training samples have no captions".into()));
    }
    let cache = training_samples(index, size)?;
    let augmenter = match &cfg.augment {
        Some(a) => Some(Augmenter::new(a.clone(), size)?),
        None => None,
    };
    let mut batches = pk_batches(index, cfg.p, cfg.k, seed)?;
    let paths = out_dir.map(TrainPaths::new);
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let open = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io(p, e));
    let mut log_file = paths.as_ref().map(|p| open(&p.log)).transpose()?;
    let mut eval_file = paths.as_ref().map(|p| open(&p.evals)).transpose()?;

    let mut opt = Adam::new(cfg.model.optimizer.clone());
    let mut log = Vec::new();
    let mut evals: Vec<EvalRecord> = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    for step in 0..cfg.steps {
        let ids = batches.next().expect("batch stream is endless");
        let samples = ids
            .iter()
            .enumerate()
            .map(|(pos, i)| {
                let s = &cache[i];
                match &augmenter {
                    Some(a) => {
                        let mut r = rng::stream(a.config().seed ^ seed, &[tag::AUGMENT, step, pos as u64]);
                        a.apply(s, &mut r)
                    }
                    None => Ok(s.clone()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_samples(&samples, &cfg.model.encoder)?;
        let lr = learning_rate(&cfg.model.optimizer, step, cfg.steps);
        let ctx = ForwardCtx::train(seed, step);
        let (losses, out) = train_step(&model, &batch, &mut opt, &ctx, lr)?;
        let rec = step_record(step, losses, lr, &out)?;
        log::debug!(
            "step {step}: id {:.4} tri {:.4} acc {:.3}",
            losses.id_loss,
            losses.triplet_loss,
            losses.accuracy
        );
        append_json(&mut log_file, paths.as_ref().map_or(Path::new(""), |p| &p.log), &rec)?;
        log.push(rec);

        let done = step + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let (report, split) = evaluate_model(&model, index, cfg)?;
            log::info!(
                "step {done}: {split} mAP {:.4} R1 {:.4} ({} queries, {} skipped)",
                report.map,
                report.r1,
                report.num_queries,
                report.num_skipped
            );
            let rec = EvalRecord {
                step: done,
                split: split.to_string(),
                report,
            };
            append_json(&mut eval_file, paths.as_ref().map_or(Path::new(""), |p| &p.evals), &rec)?;
            if best.is_none_or(|(_, m)| rec.report.map > m) {
                best = Some((done, rec.report.map));
                if let Some(p) = &paths {
                    model.save(&p.best)?;
                }
            }
            evals.push(rec);
        }
    }
    if let Some(p) = &paths {
        model.save(&p.last)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        evals,
        best_step: best.map(|(s, _)| s),
    })
}
