use std::fmt::Write;

use super::schema::{AttributeKind, AttributeSchema};
use super::ConfidenceAttribute;
use crate::data::ObjectType;
use crate::modality::Modality;

fn object_noun(t: ObjectType) -> &'static str {
    match t {
        ObjectType::Person => "pedestrian",
        ObjectType::Vehicle => "vehicle",
    }
}

fn modality_phrase(m: Modality) -> &'static str {
    match m {
        Modality::Rgb => "visible-light (RGB)",
        Modality::Nir => "near-infrared (NIR)",
        Modality::Tir => "thermal-infrared (TIR)",
    }
}

/// Instruction asking a multimodal model for one `(value, confidence)` pair per
/// schema attribute, as a single JSON object.
pub fn build_attribute_prompt(schema: &AttributeSchema, modality: Modality) -> String {
    let noun = object_noun(schema.object_type);
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You are given a {} image of a {noun} captured by a surveillance camera.",
        modality_phrase(modality)
    );
    let _ = writeln!(
        p,
        "Describe the {noun} by filling in every attribute listed below. For each attribute \
         give a short value and a confidence score between 0 and 1 that reflects how certain \
         you are given the image quality of this modality."
    );
    let _ = writeln!(
        p,
        "If an attribute cannot be recognized, answer with the value unknown and a low confidence."
    );
    let _ = writeln!(p);
    let _ = writeln!(p, "Appearance attributes:");
    for a in schema.attributes.iter().filter(|a| a.kind == AttributeKind::Appearance) {
        let _ = writeln!(p, "- \"{}\"", a.name);
    }
    let _ = writeln!(p, "Environment attributes:");
    for a in schema.attributes.iter().filter(|a| a.kind == AttributeKind::Environment) {
        let _ = writeln!(p, "- \"{}\"", a.name);
    }
    let _ = writeln!(p);
    let _ = writeln!(
        p,
        "Answer with a single JSON object and nothing else. Use every attribute name above as a \
         key exactly as written, each mapping to an object with a value and a confidence, \
         for example:"
    );
    let _ = writeln!(
        p,
        "{{\"<attribute>\": {{\"value\": \"<short description>\", \"confidence\": 0.85}}, ...}}"
    );
    p
}

/// Instruction asking a text model to compose a caption from a completed
/// attribute set.
pub fn build_caption_prompt(
    schema: &AttributeSchema,
    modality: Modality,
    attrs: &[ConfidenceAttribute],
) -> String {
    let noun = object_noun(schema.object_type);
    let mut p = String::new();
    let _ = writeln!(
        p,
        "Write a caption for a {noun} seen in a {} image using only the attributes below.",
        modality_phrase(modality)
    );
    let _ = writeln!(
        p,
        "Describe the identity appearance first and the environment (view, illumination, capture \
         time, target clarity) last. Skip attributes whose value is unknown or unclear. Use plain \
         declarative sentences, each ending with a period. Do not invent details."
    );
    let _ = writeln!(p);
    let _ = writeln!(p, "Attributes:");
    for a in attrs {
        let _ = writeln!(p, "- {}: {} (confidence {:.2})", a.name, a.value, a.confidence);
    }
    p
}
