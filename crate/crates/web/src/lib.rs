//! Browser bindings: token sampling masks, retrieval metrics under each
//! evaluation protocol, and the cross-modality attribute complement.
//!
//! Every exported function takes and returns JSON strings; the `*_json`
//! functions are the plain Rust entry points used by the bindings and tests.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use mmreid::captions::{complement_modalities, merge_backends, AttributeSchema, ComplementConfig, ConfidenceAttribute};
use mmreid::ctx::ForwardCtx;
use mmreid::eval::{evaluate_distances, ItemMeta, Protocol};
use mmreid::nn;
use mmreid::tmse::binarize;
use mmreid::PerModality;

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct MaskInput {
    values: Vec<f64>,
    sigma: f64,
}

#[derive(Serialize)]
struct MaskOutput {
    mask: Vec<f64>,
    kept: usize,
}

/// Hard 0/1 sampling mask `value > sigma` over a flat routing map.
pub fn mask_json(input: &str) -> Result<String, String> {
    let MaskInput { values, sigma } = parse(input)?;
    if values.is_empty() {
        return Err("empty routing map".into());
    }
    let n = values.len();
    let map = nn::tensor(values, &[1, n]).map_err(|e| e.to_string())?;
    let s = nn::tensor(vec![sigma], &[1, 1]).map_err(|e| e.to_string())?;
    let mask = binarize(&map, &s, &ForwardCtx::eval())
        .and_then(|m| nn::to_vec1(&m.flatten_all()?))
        .map_err(|e| e.to_string())?;
    let kept = mask.iter().filter(|&&m| m == 1.0).count();
    emit(&MaskOutput { mask, kept })
}

#[derive(Deserialize)]
struct GalleryItem {
    identity: u64,
    camera: u32,
    time: u32,
    distance: f64,
}

#[derive(Deserialize)]
struct RetrievalInput {
    query: GalleryItem,
    gallery: Vec<GalleryItem>,
}

#[derive(Serialize)]
struct ProtocolResult {
    protocol: &'static str,
    ap: Option<f64>,
    first_hit: Option<usize>,
    r1: Option<f64>,
    kept: Vec<bool>,
}

fn meta(key: String, g: &GalleryItem) -> ItemMeta {
    ItemMeta {
        key,
        identity: g.identity,
        camera: g.camera,
        time_label: Some(g.time),
    }
}

/// Average precision and rank-1 of one query under every protocol.
pub fn retrieval_json(input: &str) -> Result<String, String> {
    let RetrievalInput { query, gallery } = parse(input)?;
    let q = [meta("query".into(), &query)];
    let g: Vec<ItemMeta> = gallery.iter().enumerate().map(|(i, x)| meta(format!("g{i}"), x)).collect();
    let dist = [gallery.iter().map(|x| x.distance).collect::<Vec<_>>()];
    let rows: Vec<ProtocolResult> = Protocol::ALL
        .iter()
        .map(|&p| {
            let kept = mmreid::eval::valid_mask(&q[0], &g, p).unwrap_or_default();
            match evaluate_distances(&dist, &q, &g, p) {
                Ok(r) => ProtocolResult {
                    protocol: p.as_str(),
                    ap: r.per_query_ap[0],
                    first_hit: r.first_hit[0].map(|k| k + 1),
                    r1: Some(r.r1),
                    kept,
                },
                Err(_) => ProtocolResult {
                    protocol: p.as_str(),
                    ap: None,
                    first_hit: None,
                    r1: None,
                    kept,
                },
            }
        })
        .collect();
    emit(&rows)
}

#[derive(Deserialize)]
struct Reading {
    value: String,
    confidence: f64,
}

/// `modality -> backend -> attribute -> reading`.
#[derive(Deserialize)]
struct ComplementInput {
    readings: PerModality<std::collections::BTreeMap<String, std::collections::BTreeMap<String, Reading>>>,
    #[serde(default)]
    priority: Vec<String>,
    #[serde(default)]
    threshold: Option<f64>,
}

#[derive(Serialize)]
struct ComplementOutput {
    merged: PerModality<Vec<ConfidenceAttribute>>,
    complemented: PerModality<Vec<ConfidenceAttribute>>,
}

/// Merges backends per modality by confidence, then fills weak appearance
/// attributes from the other modalities.
pub fn complement_json(input: &str) -> Result<String, String> {
    let inp: ComplementInput = parse(input)?;
    let schema = AttributeSchema::person();
    let mut cfg = ComplementConfig::default();
    if let Some(t) = inp.threshold {
        cfg.threshold = t;
    }
    let merged = inp.readings.map(|_, backends| {
        let per: Vec<(String, Vec<ConfidenceAttribute>)> = backends
            .iter()
            .map(|(b, attrs)| {
                let v = attrs
                    .iter()
                    .map(|(n, r)| ConfidenceAttribute::new(n.clone(), r.value.clone(), r.confidence))
                    .collect();
                (b.clone(), v)
            })
            .collect();
        merge_backends(&schema, &per, &inp.priority)
    });
    let complemented = complement_modalities(&schema, &merged, &cfg);
    emit(&ComplementOutput { merged, complemented })
}

/// Attribute names of the person schema, in order.
pub fn schema_json() -> String {
    let schema = AttributeSchema::person();
    let names: Vec<&str> = schema.names().collect();
    serde_json::to_string(&names).unwrap_or_default()
}

#[wasm_bindgen]
pub fn mask(input: &str) -> Result<String, JsValue> {
    mask_json(input).map_err(js)
}

#[wasm_bindgen]
pub fn retrieval(input: &str) -> Result<String, JsValue> {
    retrieval_json(input).map_err(js)
}

#[wasm_bindgen]
pub fn complement(input: &str) -> Result<String, JsValue> {
    complement_json(input).map_err(js)
}

#[wasm_bindgen]
pub fn schema() -> String {
    schema_json()
}
