use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::schema::AttributeSchema;
use super::{default_low_markers, is_low, ConfidenceAttribute, Provenance};
use crate::modality::{Modality, PerModality};

/// Per attribute, keeps the reading with the highest confidence across
/// backends. Ties go to the earlier backend in `priority`, then to the
/// lexicographically smaller value. Backends absent from `priority` rank after
/// all listed ones, ordered by id.
pub fn merge_backends(
    schema: &AttributeSchema,
    per_backend: &[(String, Vec<ConfidenceAttribute>)],
    priority: &[String],
) -> Vec<ConfidenceAttribute> {
    let rank = |backend: &str| -> (usize, String) {
        match priority.iter().position(|p| p == backend) {
            Some(i) => (i, String::new()),
            None => (priority.len(), backend.to_string()),
        }
    };
    schema
        .names()
        .map(|name| {
            per_backend
                .iter()
                .filter_map(|(backend, attrs)| {
                    attrs.iter().find(|a| a.name == name).map(|a| (rank(backend), a))
                })
                .min_by(|(ra, a), (rb, b)| {
                    b.confidence
                        .partial_cmp(&a.confidence)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| ra.cmp(rb))
                        .then_with(|| a.value.cmp(&b.value))
                })
                .map(|(_, a)| ConfidenceAttribute {
                    provenance: Provenance::Native,
                    ..a.clone()
                })
                .unwrap_or_else(|| ConfidenceAttribute::unknown(name))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementConfig {
    pub low_markers: Vec<String>,
    /// Readings below this confidence are treated as unreliable.
    pub threshold: f64,
}

impl Default for ComplementConfig {
    fn default() -> Self {
        Self {
            low_markers: default_low_markers(),
            threshold: 0.5,
        }
    }
}

impl ComplementConfig {
    fn weak(&self, a: &ConfidenceAttribute) -> bool {
        is_low(&a.value, &self.low_markers) || a.confidence < self.threshold
    }
}

/// Fills weak appearance attributes of each modality with the most confident
/// reliable reading of the same attribute from another modality.
///
/// A reading is weak when its value is a low marker or its confidence is below
/// the threshold; only non-weak readings are ever used as sources, so a source
/// is never itself replaced and a second application changes nothing.
/// Environment attributes describe the capture, not the object, and are never
/// borrowed.
pub fn complement_modalities(
    schema: &AttributeSchema,
    merged: &PerModality<Vec<ConfidenceAttribute>>,
    cfg: &ComplementConfig,
) -> PerModality<Vec<ConfidenceAttribute>> {
    merged.map(|m, attrs| {
        attrs
            .iter()
            .map(|a| {
                if schema.is_environment(&a.name) || !cfg.weak(a) {
                    return a.clone();
                }
                best_source(merged, m, &a.name, cfg)
                    .map(|(src, s)| ConfidenceAttribute {
                        name: a.name.clone(),
                        value: s.value.clone(),
                        confidence: s.confidence,
                        provenance: Provenance::BorrowedFrom(src),
                    })
                    .unwrap_or_else(|| a.clone())
            })
            .collect()
    })
}

fn best_source<'a>(
    merged: &'a PerModality<Vec<ConfidenceAttribute>>,
    target: Modality,
    name: &str,
    cfg: &ComplementConfig,
) -> Option<(Modality, &'a ConfidenceAttribute)> {
    target
        .others()
        .filter_map(|m| merged.get(m).iter().find(|a| a.name == name).map(|a| (m, a)))
        .filter(|(_, a)| !cfg.weak(a))
        .min_by(|(ma, a), (mb, b)| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(Ordering::Equal)
                .then_with(|| ma.cmp(mb))
                .then_with(|| a.value.cmp(&b.value))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(name: &str, value: &str, c: f64) -> ConfidenceAttribute {
        ConfidenceAttribute::new(name, value, c)
    }

    fn with(schema: &AttributeSchema, overrides: &[(&str, &str, f64)]) -> Vec<ConfidenceAttribute> {
        schema
            .names()
            .map(|n| {
                overrides
                    .iter()
                    .find(|(on, _, _)| *on == n)
                    .map(|(_, v, c)| attr(n, v, *c))
                    .unwrap_or_else(|| attr(n, "plain", 0.9))
            })
            .collect()
    }

    #[test]
    fn argmax_confidence() {
        let s = AttributeSchema::person();
        let a = with(&s, &[("upper clothing", "red", 0.9)]);
        let b = with(&s, &[("upper clothing", "blue", 0.6)]);
        let m = merge_backends(&s, &[("A".into(), a), ("B".into(), b)], &["A".into(), "B".into()]);
        let u = m.iter().find(|x| x.name == "upper clothing").unwrap();
        assert_eq!((u.value.as_str(), u.confidence), ("red", 0.9));
    }

    #[test]
    fn tie_goes_to_priority() {
        let s = AttributeSchema::person();
        let a = with(&s, &[("gender", "woman", 0.7)]);
        let b = with(&s, &[("gender", "man", 0.7)]);
        let backends = vec![("B".to_string(), b), ("A".to_string(), a)];
        let m = merge_backends(&s, &backends, &["A".into(), "B".into()]);
        assert_eq!(m[0].value, "woman");
        let m = merge_backends(&s, &backends, &["B".into(), "A".into()]);
        assert_eq!(m[0].value, "man");
        // unlisted backends are ordered by id
        let m = merge_backends(&s, &backends, &[]);
        assert_eq!(m[0].value, "woman");
    }

    #[test]
    fn single_backend_passes_through() {
        let s = AttributeSchema::vehicle();
        let a = with(&s, &[("color", "white", 0.4)]);
        assert_eq!(merge_backends(&s, &[("only".into(), a.clone())], &[]), a);
    }

    #[test]
    fn backpack_borrowed_from_thermal() {
        let s = AttributeSchema::person();
        let merged = PerModality {
            rgb: with(&s, &[("backpack", "unknown", 0.3)]),
            nir: with(&s, &[("backpack", "unclear", 0.2)]),
            tir: with(&s, &[("backpack", "backpack present", 0.8)]),
        };
        let out = complement_modalities(&s, &merged, &ComplementConfig::default());
        let b = out.rgb.iter().find(|a| a.name == "backpack").unwrap();
        assert_eq!(b.value, "backpack present");
        assert_eq!(b.confidence, 0.8);
        assert_eq!(b.provenance, Provenance::BorrowedFrom(Modality::Tir));
        assert_eq!(b.provenance.to_string(), "borrowed-from:tir");
    }

    #[test]
    fn all_unknown_stays_unknown() {
        let s = AttributeSchema::person();
        let merged = PerModality::from_fn(|_| with(&s, &[("handbag", "unknown", 0.1)]));
        let out = complement_modalities(&s, &merged, &ComplementConfig::default());
        for (_, attrs) in out.iter() {
            let h = attrs.iter().find(|a| a.name == "handbag").unwrap();
            assert_eq!((h.value.as_str(), h.provenance), ("unknown", Provenance::Native));
        }
    }

    #[test]
    fn environment_never_borrowed() {
        let s = AttributeSchema::person();
        let merged = PerModality {
            rgb: with(&s, &[("illumination", "dark", 0.2)]),
            nir: with(&s, &[("illumination", "bright", 0.95)]),
            tir: with(&s, &[]),
        };
        let out = complement_modalities(&s, &merged, &ComplementConfig::default());
        let i = out.rgb.iter().find(|a| a.name == "illumination").unwrap();
        assert_eq!((i.value.as_str(), i.confidence), ("dark", 0.2));
    }

    #[test]
    fn idempotent_on_crossed_weak_readings() {
        let s = AttributeSchema::person();
        let merged = PerModality {
            rgb: with(&s, &[("footwear", "boots", 0.4)]),
            nir: with(&s, &[("footwear", "sandals", 0.3)]),
            tir: with(&s, &[("footwear", "sneakers", 0.55)]),
        };
        let cfg = ComplementConfig::default();
        let once = complement_modalities(&s, &merged, &cfg);
        let twice = complement_modalities(&s, &once, &cfg);
        assert_eq!(once, twice);
    }
}
