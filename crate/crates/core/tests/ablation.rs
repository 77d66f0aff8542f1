use segdiff_core::ablation::{params_hash, run_ablation, AblationSpec, Variant, IMAGE_ENCODER_PREFIX};
use segdiff_core::network::{ModelConfig, SegDiffNet};
use segdiff_core::sampler::SamplerConfig;
use segdiff_core::synthdata::{generate_split, CorpusSpec, SegSample, Split};
use segdiff_core::trainer::TrainConfig;

fn data() -> (Vec<SegSample>, Vec<SegSample>) {
    let spec = CorpusSpec {
        train_count: 4,
        val_count: 0,
        test_count: 2,
        image_size: 32,
        seed: 3,
        ..CorpusSpec::default()
    };
    (
        generate_split(&spec, Split::Train).unwrap(),
        generate_split(&spec, Split::Test).unwrap(),
    )
}

fn spec(variants: Vec<Variant>, seeds: Vec<u64>) -> AblationSpec {
    AblationSpec {
        variants,
        seeds,
        train: TrainConfig {
            max_steps: Some(3),
            batch_size: 2,
            learning_rate: 1e-3,
            model: ModelConfig {
                image_size: 32,
                ..ModelConfig::s_toy()
            },
            ..TrainConfig::default()
        },
        eval: SamplerConfig {
            steps: 5,
            ensemble_size: 1,
            ..SamplerConfig::default()
        },
    }
}

#[test]
fn one_seed_two_variants_gives_two_rows_and_a_summary() {
    let (train, test) = data();
    let s = spec(vec![Variant::new("vanilla", false, false), Variant::new("full", true, true)], vec![4]);
    let dir = tempfile::tempdir().unwrap();
    let report = run_ablation(&s, &train, &test, Some(dir.path()), 1).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(report.shared_init);
    assert!(report.error.is_none());
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    assert!(lines[1].starts_with("vanilla,"));
    assert!(lines[2].starts_with("full,"));
    assert!(lines[3].starts_with("gain,"));
    for f in ["ablation.json", "ablation.txt", "runs.csv", "vanilla-seed4/final.tar", "full-seed4/loss.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let table = std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert!(table.contains("vanilla") && table.contains("±"));
}

#[test]
fn variants_share_image_encoder_start() {
    let base = ModelConfig {
        image_size: 32,
        ..ModelConfig::s_toy()
    };
    for seed in [0, 9] {
        let hashes: Vec<String> = Variant::defaults()
            .iter()
            .map(|v| {
                let m = SegDiffNet::<f32>::new(base.clone().with_ablation(v.use_dycond, v.use_ffparser), seed).unwrap();
                params_hash(&m, IMAGE_ENCODER_PREFIX)
            })
            .collect();
        assert!(hashes.iter().all(|h| h == &hashes[0]), "seed {seed}: {hashes:?}");
    }
    let a = SegDiffNet::<f32>::new(base.clone(), 0).unwrap();
    let b = SegDiffNet::<f32>::new(base, 1).unwrap();
    assert_ne!(params_hash(&a, IMAGE_ENCODER_PREFIX), params_hash(&b, IMAGE_ENCODER_PREFIX));
}

#[test]
fn concurrent_jobs_match_sequential() {
    let (train, test) = data();
    let s = spec(Variant::defaults(), vec![1]);
    let one = run_ablation(&s, &train, &test, None, 1).unwrap();
    let three = run_ablation(&s, &train, &test, None, 3).unwrap();
    let strip = |r: &segdiff_core::ablation::AblationReport| {
        r.runs.iter().map(|x| (x.variant.clone(), x.seed, x.dice, x.final_loss)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&one), strip(&three));
}

#[test]
fn failed_run_keeps_partial_results() {
    let (train, test) = data();
    let s = spec(vec![Variant::new("vanilla", false, false), Variant::new("full", true, true)], vec![0]);
    let dir = tempfile::tempdir().unwrap();
    // A plain file where the second run wants its directory.
    std::fs::write(dir.path().join("full-seed0"), b"").unwrap();
    let err = run_ablation(&s, &train, &test, Some(dir.path()), 1).unwrap_err();
    assert!(err.to_string().contains("full-seed0"), "{err}");
    let json = std::fs::read_to_string(dir.path().join("ablation.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["runs"][0]["variant"], "vanilla");
    assert!(report["error"].is_string());
}

#[test]
fn rejects_degenerate_specs() {
    let (train, test) = data();
    let bad = [
        spec(vec![Variant::new("full", true, true)], vec![0]),
        spec(Variant::defaults(), vec![]),
        spec(vec![Variant::new("a", true, true), Variant::new("a", false, false)], vec![0]),
        spec(Variant::defaults(), vec![1, 1]),
    ];
    for s in bad {
        assert!(run_ablation(&s, &train, &test, None, 1).is_err());
    }
}
