//! Confidence-aware caption generation.
//!
//! Several multimodal LLM backends describe each modality image as a set of
//! `(value, confidence)` attributes. Per modality the most confident backend
//! wins each attribute ([`merge_backends`]); then each modality borrows the
//! attributes it could not recognize from the sibling modality that saw them
//! best ([`complement_modalities`]). The completed sets are rendered into a
//! caption, either by an LLM or by a fixed template.

mod client;
mod compose;
mod merge;
mod parse;
mod pipeline;
mod prompt;
mod schema;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::modality::Modality;

pub use client::{
    fixture_key, ExecClient, MllmClient, RecordingClient, ReplayClient, SimulatedBackend,
    SimulatedClient, SimulatedTruth,
};
pub use compose::{compose_caption, parse_template_caption, render_template, CaptionComposer};
pub use merge::{complement_modalities, merge_backends, ComplementConfig};
pub use parse::parse_attribute_response;
pub use pipeline::{run_pipeline, CaptionSidecar, PipelineConfig, PipelineSummary, SidecarAttribute};
pub use prompt::{build_attribute_prompt, build_caption_prompt};
pub use schema::{AttributeKind, AttributeSchema, AttributeSpec};

/// Where an attribute value came from after the cross-modality complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Native,
    BorrowedFrom(Modality),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Native => f.write_str("native"),
            Provenance::BorrowedFrom(m) => write!(f, "borrowed-from:{m}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "native" {
            return Ok(Provenance::Native);
        }
        match s.strip_prefix("borrowed-from:") {
            Some(m) => Ok(Provenance::BorrowedFrom(m.parse()?)),
            None => Err(format!("bad provenance '{s}'")),
        }
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One attribute reading with the backend's self-reported confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceAttribute {
    pub name: String,
    pub value: String,
    pub confidence: f64,
    #[serde(default = "native")]
    pub provenance: Provenance,
}

fn native() -> Provenance {
    Provenance::Native
}

impl ConfidenceAttribute {
    pub fn new(name: impl Into<String>, value: impl Into<String>, confidence: f64) -> Self {
        let value = value.into();
        Self {
            name: name.into(),
            value: if value.trim().is_empty() {
                UNKNOWN.to_string()
            } else {
                value
            },
            confidence: clamp_confidence(confidence),
            provenance: Provenance::Native,
        }
    }

    pub fn unknown(name: impl Into<String>) -> Self {
        Self::new(name, UNKNOWN, 0.0)
    }
}

pub const UNKNOWN: &str = "unknown";

pub fn default_low_markers() -> Vec<String> {
    vec!["unknown".into(), "unclear".into(), "not carrying".into()]
}

pub(crate) fn clamp_confidence(c: f64) -> f64 {
    if c.is_nan() {
        0.0
    } else {
        c.clamp(0.0, 1.0)
    }
}

pub(crate) fn is_low(value: &str, low_markers: &[String]) -> bool {
    let v = value.trim();
    low_markers.iter().any(|m| m.eq_ignore_ascii_case(v))
}

/// Attributes of one modality: raw per-backend readings, their merge, and the
/// complemented form.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAttributeSet {
    pub modality: Modality,
    pub per_backend: Vec<(String, Vec<ConfidenceAttribute>)>,
    pub merged: Vec<ConfidenceAttribute>,
    pub complemented: Vec<ConfidenceAttribute>,
}
