use proptest::prelude::*;

use mmreid::ablation::{
    degrade_captions, retained_sentences, run_study, study_rows, ExpertBank, StudyAxis, StudySpec,
};
use mmreid::data;
use mmreid::tmse::SamplingStrategy;
use mmreid::train::TrainConfig;

fn tiny_base() -> TrainConfig {
    let mut base = TrainConfig {
        steps: 2,
        p: 2,
        k: 2,
        eval_every: 0,
        ..TrainConfig::default()
    };
    base.model.encoder.dim = 32;
    base
}

#[test]
fn caption_quality_grid_counts() {
    assert_eq!(retained_sentences(10, 35.0), 4);
    assert_eq!(retained_sentences(10, 70.0), 7);
    assert_eq!(retained_sentences(10, 100.0), 10);
    assert_eq!(retained_sentences(1, 35.0), 1);
}

#[test]
fn degraded_captions_are_ordered_subsets() {
    let idx = data::generate_synthetic(3, 2, (32, 16), 2).unwrap();
    let low = degrade_captions(&idx, 35.0, 1).unwrap();
    assert_eq!(degrade_captions(&idx, 35.0, 1).unwrap().records, low.records);
    assert!(degrade_captions(&idx, 0.0, 1).is_err());
    for (a, b) in idx.records.iter().zip(&low.records) {
        for ((_, full), (_, cut)) in a.captions.as_ref().unwrap().iter().zip(b.captions.as_ref().unwrap().iter()) {
            assert_eq!(cut.sentences.len(), retained_sentences(full.sentences.len(), 35.0));
            let mut it = full.sentences.iter();
            assert!(cut.sentences.iter().all(|s| it.any(|f| f == s)));
        }
    }
    assert_eq!(degrade_captions(&idx, 100.0, 1).unwrap().records, idx.records);
}

#[test]
fn sampling_and_expert_count_rows() {
    let spec = StudySpec {
        axis: StudyAxis::SamplingStrategy,
        ..StudySpec::default()
    };
    let rows = study_rows(&spec).unwrap();
    let got: Vec<_> = rows.iter().map(|r| r.model.tmse.sampling).collect();
    assert_eq!(
        got,
        [SamplingStrategy::AllToken, SamplingStrategy::TopK, SamplingStrategy::FixedSigma, SamplingStrategy::Dynamic]
    );
    let spec = StudySpec {
        axis: StudyAxis::ExpertCount,
        expert_bank: ExpertBank::Structure,
        expert_counts: vec![1, 4],
        ..StudySpec::default()
    };
    let counts: Vec<_> = study_rows(&spec).unwrap().iter().map(|r| r.model.csse.num_experts).collect();
    assert_eq!(counts, [1, 4]);
}

#[test]
fn rows_share_the_training_budget() {
    let spec = StudySpec {
        axis: StudyAxis::Modules,
        base: tiny_base(),
        ..StudySpec::default()
    };
    for r in study_rows(&spec).unwrap() {
        assert_eq!(r.model.seed, spec.base.model.seed);
        assert_eq!(r.model.optimizer, spec.base.model.optimizer);
        assert_eq!(r.model.encoder, spec.base.model.encoder);
    }
}

#[test]
fn study_report_is_written() {
    let idx = data::generate_synthetic(4, 2, (32, 16), 9).unwrap();
    let spec = StudySpec {
        axis: StudyAxis::SamplingStrategy,
        base: tiny_base(),
        seeds: vec![0, 1],
        ..StudySpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_study(&spec, &idx, Some(dir.path())).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows.iter().all(|r| r.runs.len() == 2));
    assert!(dir.path().join("top_k").join("seed1").join("train_log.jsonl").is_file());
    report.write(dir.path()).unwrap();
    assert!(dir.path().join("study.json").is_file());
    let md = std::fs::read_to_string(dir.path().join("study.md")).unwrap();
    assert!(md.contains("top_k"), "{md}");
}

proptest! {
    #[test]
    fn retained_count_is_bounded_and_monotone(n in 1usize..40, q in 1.0f64..100.0) {
        let k = retained_sentences(n, q);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k <= retained_sentences(n, (q + 5.0).min(100.0)));
        prop_assert_eq!(retained_sentences(n, 100.0), n);
    }
}
