use std::collections::BTreeMap;
use std::sync::Arc;

use super::client::MllmClient;
use super::merge::ComplementConfig;
use super::prompt::build_caption_prompt;
use super::schema::{AttributeKind, AttributeSchema};
use super::{is_low, ConfidenceAttribute};
use crate::data::segment_sentences;
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone)]
pub enum CaptionComposer {
    /// Fixed sentence per attribute; offline and deterministic.
    Template,
    /// Sends the caption instruction to a text model.
    Llm(Arc<dyn MllmClient>),
}

impl std::fmt::Debug for CaptionComposer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CaptionComposer::Template => f.write_str("Template"),
            CaptionComposer::Llm(c) => write!(f, "Llm({})", c.backend_id()),
        }
    }
}

/// Renders appearance sentences (reliable readings only) followed by every
/// environment sentence, in schema order.
pub fn render_template(schema: &AttributeSchema, attrs: &[ConfidenceAttribute], cfg: &ComplementConfig) -> String {
    let mut sentences = Vec::new();
    for kind in [AttributeKind::Appearance, AttributeKind::Environment] {
        for spec in schema.attributes.iter().filter(|s| s.kind == kind) {
            let Some(a) = attrs.iter().find(|a| a.name == spec.name) else {
                continue;
            };
            let reliable = !is_low(&a.value, &cfg.low_markers) && a.confidence >= cfg.threshold;
            if kind == AttributeKind::Appearance && !reliable {
                continue;
            }
            sentences.push(spec.render(a.value.trim()));
        }
    }
    sentences.join(" ")
}

pub fn compose_caption(
    schema: &AttributeSchema,
    attrs: &[ConfidenceAttribute],
    modality: Modality,
    composer: &CaptionComposer,
    cfg: &ComplementConfig,
) -> Result<String> {
    match composer {
        CaptionComposer::Template => Ok(render_template(schema, attrs, cfg)),
        CaptionComposer::Llm(client) => {
            let prompt = build_caption_prompt(schema, modality, attrs);
            let text = client.generate(&prompt, None)?;
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err(Error::Client {
                    backend: client.backend_id().to_string(),
                    message: "empty caption".into(),
                });
            }
            Ok(text)
        }
    }
}

/// Recovers `attribute -> value` from a template-rendered caption. Sentences
/// that match no template are ignored.
pub fn parse_template_caption(schema: &AttributeSchema, caption: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for sentence in segment_sentences(caption) {
        if let Some((name, value)) = schema
            .attributes
            .iter()
            .find_map(|s| s.match_sentence(&sentence).map(|v| (s.name.clone(), v.to_string())))
        {
            out.insert(name, value);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(schema: &AttributeSchema, pairs: &[(&str, &str, f64)]) -> Vec<ConfidenceAttribute> {
        schema
            .names()
            .map(|n| match pairs.iter().find(|(k, _, _)| *k == n) {
                Some((_, v, c)) => ConfidenceAttribute::new(n, *v, *c),
                None => ConfidenceAttribute::unknown(n),
            })
            .collect()
    }

    #[test]
    fn template_mentions_values() {
        let s = AttributeSchema::person();
        let a = attrs(&s, &[("gender", "woman", 0.9), ("upper clothing", "red jacket", 0.8)]);
        let cfg = ComplementConfig::default();
        let c = compose_caption(&s, &a, Modality::Rgb, &CaptionComposer::Template, &cfg).unwrap();
        assert!(c.contains("woman") && c.contains("red jacket"));
        assert_eq!(c, render_template(&s, &a, &cfg));
    }

    #[test]
    fn low_confidence_only_gives_environment_sentences() {
        let s = AttributeSchema::person();
        let a = attrs(
            &s,
            &[
                ("gender", "woman", 0.2),
                ("backpack", "not carrying", 0.9),
                ("view", "front", 0.9),
                ("illumination", "dark", 0.1),
            ],
        );
        let c = render_template(&s, &a, &ComplementConfig::default());
        let sentences = segment_sentences(&c);
        assert_eq!(
            sentences,
            vec![
                "The view is front.",
                "The illumination is dark.",
                "The capture time is unknown.",
                "The target clarity is unknown.",
            ]
        );
    }

    #[test]
    fn parse_inverts_render() {
        let s = AttributeSchema::person();
        let pairs: Vec<(String, String)> = s.names().map(|n| (n.to_string(), format!("x {n}"))).collect();
        let a: Vec<_> = pairs.iter().map(|(n, v)| ConfidenceAttribute::new(n, v, 1.0)).collect();
        let parsed = parse_template_caption(&s, &render_template(&s, &a, &ComplementConfig::default()));
        assert_eq!(parsed, pairs.into_iter().collect());
    }
}
