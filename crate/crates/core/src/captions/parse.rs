use std::collections::HashMap;

use serde_json::Value;

use super::schema::AttributeSchema;
use super::{clamp_confidence, ConfidenceAttribute};
use crate::error::{Error, Result};

fn normalize_key(k: &str) -> String {
    k.trim()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c.to_ascii_lowercase() })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn confidence_of(v: &Value) -> f64 {
    match v {
        Value::Number(n) => n.as_f64().unwrap_or(0.0),
        Value::String(s) => s.trim().trim_end_matches('%').parse::<f64>().map_or(0.0, |x| {
            if s.trim().ends_with('%') {
                x / 100.0
            } else {
                x
            }
        }),
        _ => 0.0,
    }
}

fn value_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Reads one entry in any of the shapes models tend to produce:
/// `{"value": .., "confidence": ..}`, `[value, confidence]` or a bare value.
fn entry_of(v: &Value) -> Option<(String, f64)> {
    match v {
        Value::Object(o) => {
            let value = o.iter().find(|(k, _)| normalize_key(k) == "value").and_then(|(_, v)| value_of(v))?;
            let conf = o
                .iter()
                .find(|(k, _)| matches!(normalize_key(k).as_str(), "confidence" | "score" | "conf"))
                .map_or(0.0, |(_, v)| confidence_of(v));
            Some((value, conf))
        }
        Value::Array(a) if !a.is_empty() => {
            let value = value_of(&a[0])?;
            let conf = a.get(1).map_or(0.0, confidence_of);
            Some((value, conf))
        }
        other => value_of(other).map(|v| (v, 0.0)),
    }
}

fn extract_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&raw[start..=end]).ok()? {
        Value::Object(o) => Some(o),
        _ => None,
    }
}

/// Fallback for line-oriented answers: `name: value (confidence)`.
fn parse_lines(raw: &str) -> HashMap<String, (String, f64)> {
    let mut out = HashMap::new();
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((k, rest)) = line.split_once(':') else {
            continue;
        };
        let rest = rest.trim();
        let (value, conf) = match (rest.rfind('('), rest.rfind(')')) {
            (Some(a), Some(b)) if b > a => {
                let inner = rest[a + 1..b].trim().trim_start_matches("confidence").trim();
                (rest[..a].trim().to_string(), confidence_of(&Value::String(inner.to_string())))
            }
            _ => (rest.to_string(), 0.0),
        };
        if !value.is_empty() {
            out.insert(normalize_key(k), (value, conf));
        }
    }
    out
}

/// Parses a backend answer into one entry per schema attribute. Missing
/// attributes become `unknown` at confidence 0; confidences are clamped to
/// `[0, 1]`. Fails only when nothing at all can be read.
pub fn parse_attribute_response(raw: &str, schema: &AttributeSchema) -> Result<Vec<ConfidenceAttribute>> {
    let found: HashMap<String, (String, f64)> = match extract_json_object(raw) {
        Some(obj) => obj
            .iter()
            .filter_map(|(k, v)| entry_of(v).map(|e| (normalize_key(k), e)))
            .collect(),
        None => parse_lines(raw),
    };
    let mut hits = 0;
    let attrs = schema
        .names()
        .map(|name| match found.get(&normalize_key(name)) {
            Some((value, conf)) => {
                hits += 1;
                ConfidenceAttribute::new(name, value.clone(), clamp_confidence(*conf))
            }
            None => ConfidenceAttribute::unknown(name),
        })
        .collect();
    if hits == 0 {
        return Err(Error::UnparseableResponse { raw: raw.to_string() });
    }
    Ok(attrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_response(schema: &AttributeSchema) -> String {
        let obj: serde_json::Map<String, Value> = schema
            .names()
            .map(|n| (n.to_string(), serde_json::json!({"value": format!("v-{n}"), "confidence": 0.7})))
            .collect();
        serde_json::to_string(&obj).unwrap()
    }

    #[test]
    fn well_formed() {
        let s = AttributeSchema::vehicle();
        let parsed = parse_attribute_response(&full_response(&s), &s).unwrap();
        assert_eq!(parsed.len(), 10);
        assert!(parsed.iter().all(|a| a.confidence == 0.7 && a.value == format!("v-{}", a.name)));
    }

    #[test]
    fn missing_attribute_is_unknown() {
        let s = AttributeSchema::person();
        let raw = r#"Sure! {"gender": {"value": "woman", "confidence": 0.9}}"#;
        let parsed = parse_attribute_response(raw, &s).unwrap();
        let footwear = parsed.iter().find(|a| a.name == "footwear").unwrap();
        assert_eq!((footwear.value.as_str(), footwear.confidence), ("unknown", 0.0));
        assert_eq!(parsed[0].value, "woman");
    }

    #[test]
    fn confidence_clamped() {
        let s = AttributeSchema::person();
        let raw = r#"{"gender": {"value": "man", "confidence": "1.3"}, "age": ["young", -2]}"#;
        let parsed = parse_attribute_response(raw, &s).unwrap();
        assert_eq!(parsed[0].confidence, 1.0);
        assert_eq!(parsed[1].confidence, 0.0);
    }

    #[test]
    fn line_fallback_and_key_normalization() {
        let s = AttributeSchema::person();
        let raw = "- Upper_Clothing: red jacket (0.8)\n- capture-time: night (confidence 0.6)";
        let parsed = parse_attribute_response(raw, &s).unwrap();
        let upper = parsed.iter().find(|a| a.name == "upper clothing").unwrap();
        assert_eq!((upper.value.as_str(), upper.confidence), ("red jacket", 0.8));
        let t = parsed.iter().find(|a| a.name == "capture time").unwrap();
        assert_eq!(t.confidence, 0.6);
    }

    #[test]
    fn garbage_is_an_error() {
        let s = AttributeSchema::person();
        match parse_attribute_response("I cannot help with that.", &s) {
            Err(Error::UnparseableResponse { raw }) => assert!(raw.contains("cannot")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
