//! Library-level flows across modules, driven only through the public API.

use std::fs;

use weakpose::datagen::{generate, GeneratedData, GeneratorConfig};
use weakpose::dataset::{archive_to_jsonl, load_archive, DatasetFile};
use weakpose::metrics::{evaluate, Protocol};
use weakpose::pipeline::{train, Ablation, TrainConfig, TrainData, TrainOptions};
use weakpose::skeleton::{sum_bone_lengths, Skeleton};
use weakpose::study::test_sets;
use weakpose::{Pose3D, PoseSample};

fn small(seed: u64) -> GeneratedData {
    generate(&GeneratorConfig {
        seed,
        train_subjects: 2,
        test_subjects: 1,
        train_samples_per_subject: 30,
        test_samples_per_subject: 15,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn generated_files_survive_a_disk_round_trip() {
    let data = small(3);
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("skeleton.json"), data.skeleton.to_json_string()).unwrap();
    data.dataset3d.save(&p("full3d.jsonl")).unwrap();
    data.dataset2d.save(&p("weak2d.jsonl")).unwrap();
    fs::write(
        p("archive.jsonl"),
        archive_to_jsonl(&data.archive_header, &data.archive),
    )
    .unwrap();

    let skeleton = Skeleton::load(&p("skeleton.json")).unwrap();
    assert_eq!(skeleton, data.skeleton);
    let (full, report) = DatasetFile::load(&p("full3d.jsonl"), &skeleton).unwrap();
    assert_eq!(full, data.dataset3d);
    assert_eq!(report.records, data.dataset3d.records.len());
    let (weak, _) = DatasetFile::load(&p("weak2d.jsonl"), &skeleton).unwrap();
    assert_eq!(weak, data.dataset2d);
    let (_, archive) = load_archive(&p("archive.jsonl"), &skeleton).unwrap();
    assert_eq!(archive, data.archive);

    // the stock skeleton has another schema hash, so the data must not load under it
    assert!(DatasetFile::load(&p("full3d.jsonl"), &Skeleton::mpii16()).is_err());
}

#[test]
fn millimetre_depth_files_load_as_pixels() {
    let data = small(4);
    let mut mm = data.dataset3d.clone();
    let ppm = mm.header.units.pixels_per_mm;
    mm.header.units.depth = "mm".into();
    for r in &mut mm.records {
        if let Some(d) = &mut r.depths {
            d.0.iter_mut().for_each(|v| *v /= ppm);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mm.jsonl");
    mm.save(&path).unwrap();
    let (loaded, _) = DatasetFile::load(&path, &data.skeleton).unwrap();
    let px = loaded.into_pixel_depths().unwrap();
    assert_eq!(px.header.units.depth, "px");
    for (a, b) in px.records.iter().zip(&data.dataset3d.records) {
        let (a, b) = (a.depths.as_ref().unwrap(), b.depths.as_ref().unwrap());
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn generated_ground_truth_has_the_declared_scale() {
    let data = small(5);
    let sets = test_sets(&data).unwrap();
    // lab subjects are sampled around the schema's average total length
    let sums: Vec<f64> = sets
        .lab
        .iter()
        .map(|s| {
            let pose = Pose3D::from_parts(&s.joints2d, s.depth_labels().unwrap()).unwrap();
            sum_bone_lengths(&pose, &data.skeleton, 1.0).unwrap()
        })
        .collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let target = data.skeleton.avg_sum_len();
    assert!((mean - target).abs() / target < 0.25, "{mean} vs {target}");
}

#[test]
fn generate_train_evaluate() {
    let data = small(6);
    let pool3d = data.dataset3d.split("train");
    let pool2d = data.dataset2d.split("train");
    let config = TrainConfig {
        ablation: Ablation::MixedGeo,
        stage2_iterations: 300,
        stage3_iterations: 100,
        hidden_dims: vec![32],
        refine_hidden_dims: vec![16],
        ..TrainConfig::default()
    };
    let data_in = TrainData {
        pool3d: &pool3d,
        pool2d: &pool2d,
    };
    let (state, report) =
        train(&config, &data_in, &data.skeleton, &TrainOptions::default()).unwrap();
    assert_eq!(report.stages.iter().filter(|s| s.stage >= 2).count(), 2);

    let sets = test_sets(&data).unwrap();
    let model = config.model_spec(&data.skeleton);
    let protocol = Protocol::symmetry();
    let oracle = |s: &PoseSample| Pose3D::from_parts(&s.joints2d, s.depth_labels()?);
    let (perfect, _) = evaluate(&sets.wild, oracle, &data.skeleton, &protocol, sets.space).unwrap();
    assert_eq!(perfect.mpjpe_mm, 0.0);

    let predict = |s: &PoseSample| Ok(model.predict(&state, s)?.pose());
    let (trained, rows) =
        evaluate(&sets.wild, predict, &data.skeleton, &protocol, sets.space).unwrap();
    assert_eq!(trained.excluded, 0);
    assert_eq!(rows.len(), sets.wild.len());
    assert!(trained.mpjpe_mm.is_finite() && trained.mpjpe_mm > 0.0);
    // the logged probe outputs are what the trained state predicts
    let by_id = |id: &str| pool3d.iter().chain(&pool2d).find(|s| s.id == id).unwrap();
    assert!(!report.probes.is_empty());
    for probe in &report.probes {
        assert_eq!(
            model.predict(&state, by_id(&probe.id)).unwrap().raw,
            probe.output
        );
    }
}
