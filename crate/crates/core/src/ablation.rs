//! Ablation studies: module toggles, routing, sampling, caption quality and
//! expert counts, each trained under one shared budget.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::{CaptionRecord, DatasetIndex};
use crate::error::{Error, Result};
use crate::eval::MetricSummary;
use crate::model::NextConfig;
use crate::rng::{self, tag};
use crate::tmse::{RouteType, SamplingStrategy};
use crate::train::{train, TrainConfig};

/// Number of sentences kept at `quality` percent of `n`: `ceil(q·n/100)`,
/// at least one.
pub fn retained_sentences(n: usize, quality: f64) -> usize {
    let x = quality * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

/// Keeps a seeded uniform subset of each caption's sentences, in order.
pub fn degrade_captions(index: &DatasetIndex, quality: f64, seed: u64) -> Result<DatasetIndex> {
    if !(quality > 0.0 && quality <= 100.0) {
        return Err(Error::Config(format!("caption quality must lie in (0, 100], got {quality}")));
    }
    index.map_captions(|i, m, cap| {
        let n = cap.sentences.len();
        let keep = retained_sentences(n, quality);
        if keep >= n {
            return Ok(cap.clone());
        }
        let key = rng::string_key(&index.records[i].sample_id);
        let mut r = rng::stream(seed, &[tag::DEGRADE, key, m.index() as u64]);
        let mut chosen = sample_indices(&mut r, n, keep).into_vec();
        chosen.sort_unstable();
        CaptionRecord::from_sentences(chosen.into_iter().map(|j| cap.sentences[j].clone()).collect())
    })
}

/// Applies a sampling strategy to a model configuration.
pub fn sampling_strategy_variant(cfg: &NextConfig, strategy: SamplingStrategy) -> Result<NextConfig> {
    if !cfg.modules.tmse {
        return Err(Error::Config("sampling strategies need the semantic experts enabled".into()));
    }
    let mut c = cfg.clone();
    c.tmse.sampling = strategy;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyAxis {
    Modules,
    RouteType,
    SamplingStrategy,
    CaptionQuality,
    ExpertCount,
}

impl std::str::FromStr for StudyAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown study axis {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertBank {
    #[default]
    Semantic,
    Structure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    pub axis: StudyAxis,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Percentages for the caption-quality axis.
    pub qualities: Vec<f64>,
    /// Counts for the expert-count axis.
    pub expert_counts: Vec<usize>,
    pub expert_bank: ExpertBank,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            axis: StudyAxis::Modules,
            base: TrainConfig::default(),
            seeds: vec![0],
            qualities: vec![35.0, 70.0, 100.0],
            expert_counts: (1..=6).collect(),
            expert_bank: ExpertBank::Semantic,
        }
    }
}

/// One configuration of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub description: String,
    pub model: NextConfig,
    /// Caption quality applied to the data, percent.
    pub caption_quality: Option<f64>,
}

fn row(label: &str, description: String, model: NextConfig) -> StudyRow {
    StudyRow {
        label: label.to_string(),
        description,
        model,
        caption_quality: None,
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// The configurations of a study; they differ from `spec.base` only on the
/// study axis.
pub fn study_rows(spec: &StudySpec) -> Result<Vec<StudyRow>> {
    let base = &spec.base.model;
    let rows = match spec.axis {
        StudyAxis::Modules => [("A", false, false, false), ("B", true, false, false), ("C", true, true, false), ("D", true, true, true)]
            .into_iter()
            .map(|(l, mmfa, tmse, csse)| {
                let mut c = base.clone();
                c.modules.mmfa = mmfa;
                c.modules.tmse = tmse;
                c.modules.csse = csse;
                row(l, format!("mmfa={} tmse={} csse={}", mark(mmfa), mark(tmse), mark(csse)), c)
            })
            .collect(),
        StudyAxis::RouteType => {
            use RouteType::{ModalityShared as S, ModalitySpecific as P};
            let name = |r: RouteType| if r == S { "shared" } else { "specific" };
            [("A", P, P), ("B", S, P), ("C", S, S), ("D", P, S)]
                .into_iter()
                .map(|(l, t, c)| {
                    let mut m = base.clone();
                    m.tmse.route_type = t;
                    m.csse.route_type = c;
                    row(l, format!("tmse route={} csse route={}", name(t), name(c)), m)
                })
                .collect()
        }
        StudyAxis::SamplingStrategy => [
            SamplingStrategy::AllToken,
            SamplingStrategy::TopK,
            SamplingStrategy::FixedSigma,
            SamplingStrategy::Dynamic,
        ]
        .into_iter()
        .map(|s| {
            let c = sampling_strategy_variant(base, s)?;
            Ok(row(s.as_str(), format!("sampling={}", s.as_str()), c))
        })
        .collect::<Result<_>>()?,
        StudyAxis::CaptionQuality => spec
            .qualities
            .iter()
            .map(|&q| StudyRow {
                caption_quality: Some(q),
                ..row(&format!("{q}%"), format!("caption quality {q}%"), base.clone())
            })
            .collect(),
        StudyAxis::ExpertCount => spec
            .expert_counts
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                let name = match spec.expert_bank {
                    ExpertBank::Semantic => {
                        c.tmse.num_experts = n;
                        "N_T"
                    }
                    ExpertBank::Structure => {
                        c.csse.num_experts = n;
                        "N_C"
                    }
                };
                row(&format!("{name}={n}"), format!("{name}={n}"), c)
            })
            .collect(),
    };
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: Option<MetricSummary>,
    pub final_total_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub description: String,
    pub runs: Vec<RunResult>,
    /// Mean over successful runs.
    pub mean: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub axis: StudyAxis,
    pub steps: u64,
    pub protocol: crate::eval::Protocol,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

fn mean(ms: &[MetricSummary]) -> Option<MetricSummary> {
    if ms.is_empty() {
        return None;
    }
    let n = ms.len() as f64;
    Some(MetricSummary {
        map: ms.iter().map(|m| m.map).sum::<f64>() / n,
        r1: ms.iter().map(|m| m.r1).sum::<f64>() / n,
        r5: ms.iter().map(|m| m.r5).sum::<f64>() / n,
        r10: ms.iter().map(|m| m.r10).sum::<f64>() / n,
    })
}

/// Trains and evaluates every row for every seed. A failing configuration is
/// recorded in its row and the study moves on. With `out_dir`, each run logs
/// to `<out_dir>/<row>/seed<k>/`.
pub fn run_study(spec: &StudySpec, index: &DatasetIndex, out_dir: Option<&Path>) -> Result<StudyReport> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("a study needs at least one seed".into()));
    }
    let rows = study_rows(spec)?;
    let mut results = Vec::with_capacity(rows.len());
    for r in &rows {
        let mut runs = Vec::new();
        for &seed in &spec.seeds {
            let run_dir = out_dir.map(|d| d.join(sanitize(&r.label)).join(format!("seed{seed}")));
            let outcome = (|| {
                let data = match r.caption_quality {
                    Some(q) => degrade_captions(index, q, seed)?,
                    None => index.clone(),
                };
                let mut cfg = spec.base.clone();
                cfg.model = r.model.clone();
                cfg.model.seed = seed;
                if let Some(a) = &mut cfg.augment {
                    a.seed = seed;
                }
                train(&data, &cfg, run_dir.as_deref())
            })();
            runs.push(match outcome {
                Ok(o) => RunResult {
                    seed,
                    metrics: o.final_eval().map(|e| e.report.summary()),
                    final_total_loss: o.log.last().map(|l| l.losses.total),
                    error: None,
                },
                Err(e) => {
                    log::warn!("study row {} seed {seed} failed: {e}", r.label);
                    RunResult {
                        seed,
                        metrics: None,
                        final_total_loss: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
        let ok: Vec<MetricSummary> = runs.iter().filter_map(|r| r.metrics).collect();
        results.push(RowResult {
            label: r.label.clone(),
            description: r.description.clone(),
            mean: mean(&ok),
            runs,
        });
    }
    Ok(StudyReport {
        axis: spec.axis,
        steps: spec.base.steps,
        protocol: spec.base.protocol,
        seeds: spec.seeds.clone(),
        rows: results,
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

impl StudyReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {} study ({} steps, protocol {}, seeds {:?})\n",
            serde_json::to_value(self.axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            self.steps,
            self.protocol,
            self.seeds
        );
        s.push_str("| row | configuration | mAP | R1 | R5 | R10 | failed runs |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
            match r.mean {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {failed} |",
                        r.label, r.description, m.map, m.r1, m.r5, m.r10
                    );
                }
                None => {
                    let _ = writeln!(s, "| {} | {} | - | - | - | - | {failed} |", r.label, r.description);
                }
            }
        }
        s
    }

    /// Writes `study.json` and `study.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::data::write_atomic(&dir.join("study.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        crate::data::write_atomic(&dir.join("study.md"), self.to_markdown().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_counts() {
        assert_eq!(retained_sentences(3, 35.0), 2);
        assert_eq!(retained_sentences(3, 100.0), 3);
        assert_eq!(retained_sentences(10, 70.0), 7);
        assert_eq!(retained_sentences(5, 1e-9), 1);
        assert_eq!(retained_sentences(1, 35.0), 1);
    }

    #[test]
    fn module_rows_follow_toggle_pattern() {
        let rows = study_rows(&StudySpec::default()).unwrap();
        let pattern: Vec<_> = rows
            .iter()
            .map(|r| (r.label.as_str(), r.model.modules.mmfa, r.model.modules.tmse, r.model.modules.csse))
            .collect();
        assert_eq!(
            pattern,
            [("A", false, false, false), ("B", true, false, false), ("C", true, true, false), ("D", true, true, true)]
        );
        for r in &rows {
            r.model.validate().unwrap();
        }
    }

    #[test]
    fn expert_sweep_has_six_rows() {
        let spec = StudySpec {
            axis: StudyAxis::ExpertCount,
            ..Default::default()
        };
        let rows = study_rows(&spec).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[5].model.tmse.num_experts, 6);
    }
}
