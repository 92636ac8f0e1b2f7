//! Retrieval metrics: distances, protocol filtering, AP, mAP and CMC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Only the query itself is removed from its gallery.
    #[default]
    None,
    /// Removes gallery items sharing identity and camera with the query.
    StandardCamera,
    /// Removes gallery items sharing identity and time span with the query.
    Msvr310Strict,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::None, Protocol::StandardCamera, Protocol::Msvr310Strict];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::None => "none",
            Protocol::StandardCamera => "standard_camera",
            Protocol::Msvr310Strict => "msvr310_strict",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?} (none|standard_camera|msvr310_strict)")))
    }
}

/// Metadata of one retrieval item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    /// Unique key; a gallery item with the query's key is the query itself.
    pub key: String,
    pub identity: u64,
    pub camera: u32,
    pub time_label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub query: Vec<Vec<f64>>,
    pub query_meta: Vec<ItemMeta>,
    pub gallery: Vec<Vec<f64>>,
    pub gallery_meta: Vec<ItemMeta>,
}

impl RetrievalSet {
    pub fn validate(&self) -> Result<()> {
        if self.gallery.is_empty() {
            return Err(Error::Protocol("gallery is empty".into()));
        }
        if self.query.len() != self.query_meta.len() || self.gallery.len() != self.gallery_meta.len() {
            return Err(Error::Shape("embedding and metadata counts differ".into()));
        }
        Ok(())
    }
}

/// Pairwise Euclidean distances between rows of `q` and `g`.
pub fn distance_matrix(q: &[Vec<f64>], g: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = q.first().or(g.first()).map_or(0, Vec::len);
    if let Some(bad) = q.iter().chain(g).find(|v| v.len() != dim) {
        return Err(Error::Shape(format!("embedding of length {} among length {dim}", bad.len())));
    }
    Ok(q.iter()
        .map(|a| {
            g.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect()
        })
        .collect())
}

pub fn l2_normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Which gallery items a query may be matched against.
pub fn valid_mask(query: &ItemMeta, gallery: &[ItemMeta], protocol: Protocol) -> Result<Vec<bool>> {
    if protocol == Protocol::Msvr310Strict && query.time_label.is_none() {
        return Err(Error::Protocol(format!(
            "msvr310_strict needs time labels; query {} has none",
            query.key
        )));
    }
    gallery
        .iter()
        .map(|g| {
            if g.key == query.key {
                return Ok(false);
            }
            let same_id = g.identity == query.identity;
            Ok(match protocol {
                Protocol::None => true,
                Protocol::StandardCamera => !(same_id && g.camera == query.camera),
                Protocol::Msvr310Strict => {
                    let t = g.time_label.ok_or_else(|| {
                        Error::Protocol(format!("msvr310_strict needs time labels; gallery item {} has none", g.key))
                    })?;
                    !(same_id && Some(t) == query.time_label)
                }
            })
        })
        .collect()
}

/// Mean over relevant positions of the precision at that position; `None`
/// when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in ranked_relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    pub num_queries: usize,
    pub num_skipped: usize,
    pub protocol: Protocol,
    /// `None` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
    /// Zero-based rank of the first correct match, `None` for skipped queries.
    pub first_hit: Vec<Option<usize>>,
}

impl EvalReport {
    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            map: self.map,
            r1: self.r1,
            r5: self.r5,
            r10: self.r10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
}

/// Ranks each query's valid gallery by ascending distance (ties by gallery
/// index) and aggregates AP and CMC over queries that have a valid match.
pub fn evaluate_distances(
    dist: &[Vec<f64>],
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    protocol: Protocol,
) -> Result<EvalReport> {
    if dist.len() != query.len() || dist.iter().any(|r| r.len() != gallery.len()) {
        return Err(Error::Shape("distance matrix does not match the metadata".into()));
    }
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut first_hit = Vec::with_capacity(query.len());
    for (qi, q) in query.iter().enumerate() {
        let mask = valid_mask(q, gallery, protocol)?;
        let mut order: Vec<usize> = (0..gallery.len()).filter(|&j| mask[j]).collect();
        order.sort_by(|&a, &b| dist[qi][a].total_cmp(&dist[qi][b]).then(a.cmp(&b)));
        let rel: Vec<bool> = order.iter().map(|&j| gallery[j].identity == q.identity).collect();
        per_query_ap.push(average_precision(&rel));
        first_hit.push(rel.iter().position(|&r| r));
    }
    let valid: Vec<usize> = (0..query.len()).filter(|&i| per_query_ap[i].is_some()).collect();
    if valid.is_empty() {
        return Err(Error::Protocol("every query was skipped (no valid relevant gallery item)".into()));
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|&i| per_query_ap[i].unwrap()).sum::<f64>() / n;
    let cmc = |k: usize| valid.iter().filter(|&&i| first_hit[i].unwrap() < k).count() as f64 / n;
    Ok(EvalReport {
        map,
        r1: cmc(1),
        r5: cmc(5),
        r10: cmc(10),
        num_queries: query.len(),
        num_skipped: query.len() - valid.len(),
        protocol,
        per_query_ap,
        first_hit,
    })
}

pub fn evaluate(set: &RetrievalSet, protocol: Protocol, normalize: bool) -> Result<EvalReport> {
    set.validate()?;
    let dist = if normalize {
        distance_matrix(&l2_normalize(&set.query), &l2_normalize(&set.gallery))?
    } else {
        distance_matrix(&set.query, &set.gallery)?
    };
    evaluate_distances(&dist, &set.query_meta, &set.gallery_meta, protocol)
}
