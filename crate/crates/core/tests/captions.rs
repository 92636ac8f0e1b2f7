mod common;

use std::sync::Arc;

use proptest::prelude::*;


use mmreid::captions::{
    complement_modalities, merge_backends, run_pipeline, AttributeSchema, ComplementConfig, ConfidenceAttribute,
    parse_template_caption, MllmClient, PipelineConfig, Provenance,
};
use mmreid::data::{self, SyntheticConfig};
use mmreid::{Error, Modality, PerModality};

fn fixture() -> data::DatasetIndex {
    data::generate_synthetic_with(&SyntheticConfig {
        test_ids: 1,
        ..SyntheticConfig::new(3, 2, (32, 16), 3)
    })
    .unwrap()
}

#[test]
fn generator_captions_recover_truth_except_suppressed() {
    let idx = fixture();
    let truth = idx.truth.clone().unwrap();
    let schema = AttributeSchema::person();
    for r in &idx.records {
        let id = truth.identity(r.raw_identity).unwrap();
        let want = truth.attributes_of(&r.sample_id).unwrap();
        for (m, cap) in r.captions.as_ref().unwrap().iter() {
            let mut got = parse_template_caption(&schema, &cap.text);
            let mut want = want.clone();
            if m == id.suppressed_modality {
                assert!(!got.contains_key(&id.suppressed), "{} {m} leaks {}", r.sample_id, id.suppressed);
                want.remove(&id.suppressed);
            }
            got.retain(|k, _| want.contains_key(k));
            assert_eq!(got, want, "{} {m}", r.sample_id);
        }
    }
}

#[test]
fn resume_skips_complete_sidecars() {
    let idx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let fx = tmp.path().join("fx");
    common::record_fixtures(&idx, &root, &fx);
    let clients = common::replay_clients(&fx);
    let cfg = PipelineConfig {
        resume: true,
        ..common::replay_config()
    };
    let s = run_pipeline(&root, &clients, &cfg).unwrap();
    assert_eq!(s.skipped.len(), idx.len());
    assert!(s.written.is_empty());
}

struct Flaky;

impl MllmClient for Flaky {
    fn backend_id(&self) -> &str {
        "flaky"
    }

    fn generate(&self, _prompt: &str, image: Option<&[u8]>) -> mmreid::Result<String> {
        if image.is_some_and(|b| b.len() % 2 == 0) {
            return Err(Error::Client {
                backend: "flaky".into(),
                message: "refused".into(),
            });
        }
        let body: serde_json::Map<String, serde_json::Value> = AttributeSchema::person()
            .names()
            .map(|n| (n.to_string(), serde_json::json!({"value": "plain", "confidence": 0.9})))
            .collect();
        Ok(serde_json::Value::Object(body).to_string())
    }
}

#[test]
fn failures_are_reported_per_sample() {
    let idx = fixture();
    let tmp = tempfile::tempdir().unwrap();
    data::write_dataset(&idx, tmp.path(), false).unwrap();
    let clients: Vec<Arc<dyn MllmClient>> = vec![Arc::new(Flaky)];
    let s = run_pipeline(tmp.path(), &clients, &common::replay_config()).unwrap();
    assert_eq!(s.written.len() + s.failed.len(), idx.len());
    assert!(!s.written.is_empty() && !s.failed.is_empty());
    assert!(s.failed.iter().all(|(_, msg)| msg.contains("refused")), "{:?}", s.failed);
}

#[test]
fn no_clients_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_pipeline(tmp.path(), &[], &PipelineConfig::default()).is_err());
}

fn reading() -> impl Strategy<Value = (String, f64)> {
    (
        prop_oneof![Just("unknown"), Just("unclear"), Just("red"), Just("blue"), Just("green")],
        prop_oneof![Just(0.0), Just(0.3), Just(0.5), Just(0.8), Just(1.0), 0.0f64..1.0],
    )
        .prop_map(|(v, c)| (v.to_string(), c))
}

fn attr_set(schema: &AttributeSchema) -> impl Strategy<Value = Vec<ConfidenceAttribute>> {
    let names: Vec<String> = schema.names().map(String::from).collect();
    proptest::collection::vec(reading(), names.len()).prop_map(move |rs| {
        names.iter().zip(rs).map(|(n, (v, c))| ConfidenceAttribute::new(n.clone(), v, c)).collect()
    })
}

fn low_count(attrs: &[ConfidenceAttribute]) -> usize {
    attrs.iter().filter(|a| matches!(a.value.as_str(), "unknown" | "unclear" | "not carrying")).count()
}

proptest! {
    #[test]
    fn merge_keeps_the_most_confident_reading(a in attr_set(&AttributeSchema::person()), b in attr_set(&AttributeSchema::person())) {
        let schema = AttributeSchema::person();
        let per = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let merged = merge_backends(&schema, &per, &["a".into(), "b".into()]);
        for ((m, x), y) in merged.iter().zip(&a).zip(&b) {
            prop_assert_eq!(m.confidence, x.confidence.max(y.confidence));
            let chosen = if y.confidence > x.confidence { y } else { x };
            prop_assert_eq!(&m.value, &chosen.value);
        }
    }

    #[test]
    fn complement_is_idempotent_and_traceable(
        rgb in attr_set(&AttributeSchema::person()),
        nir in attr_set(&AttributeSchema::person()),
        tir in attr_set(&AttributeSchema::person()),
    ) {
        let schema = AttributeSchema::person();
        let cfg = ComplementConfig::default();
        let merged = PerModality { rgb, nir, tir };
        let once = complement_modalities(&schema, &merged, &cfg);
        prop_assert_eq!(&complement_modalities(&schema, &once, &cfg), &once);
        for m in Modality::ALL {
            prop_assert!(low_count(once.get(m)) <= low_count(merged.get(m)));
            for a in once.get(m) {
                if let Provenance::BorrowedFrom(src) = a.provenance {
                    prop_assert!(src != m);
                    prop_assert!(!schema.is_environment(&a.name));
                    let s = merged.get(src).iter().find(|x| x.name == a.name).unwrap();
                    prop_assert_eq!(&s.value, &a.value);
                    prop_assert_eq!(s.confidence, a.confidence);
                }
            }
        }
    }
}
