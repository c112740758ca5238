use vaprobe_core::detector::read_detector;
use vaprobe_core::pipeline::{run_pipeline, PipelineConfig};

fn small(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        train_pairs: 150,
        eval_pairs: 120,
        generation_scenes: 8,
        ..Default::default()
    }
}

#[test]
fn refinement_and_interventions_move_in_the_expected_direction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = run_pipeline(&small(21), &out).unwrap();

    assert!(s.planted_recovered * 10 >= s.planted.len() * 9, "{:?}", s.top_scored);
    assert!(s.refined.acc_no.unwrap() > s.baseline.acc_no.unwrap());
    assert!(s.refined.acc >= s.baseline.acc - 2.0);

    let zero = &s.intervention.rows[1];
    let double = &s.intervention.rows[2];
    assert_eq!(zero.condition, "zero");
    assert!(zero.delta_no.unwrap() < 0.0);
    assert!(double.delta_no.unwrap() >= -1e-9);

    let (b, r) = (s.baseline_hallucination_rate.unwrap(), s.refined_hallucination_rate.unwrap());
    assert!(r <= b, "hallucination {b} -> {r}");

    let det = read_detector(&out.join("detector.bin")).unwrap();
    assert_eq!(det.beta, s.best_beta);
    for f in ["sweep.csv", "heatmap.csv", "accuracy.md", "intervention.csv", "generation.jsonl"] {
        assert!(out.join("reports").join(f).is_file(), "missing {f}");
    }
}

#[test]
fn same_seed_same_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&small(5), &dir.path().join("a")).unwrap();
    let b = run_pipeline(&small(5), &dir.path().join("b")).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("a/detector.bin")).unwrap(),
        std::fs::read(dir.path().join("b/detector.bin")).unwrap()
    );
}
