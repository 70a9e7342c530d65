use std::collections::BTreeMap;
use std::fs;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use segadapt::data::{
    load_dataset, make_toy_domain, split, write_mask_dirs, AnnotationFormat, DatasetManifest, Sample, ToyKind,
};
use segadapt::tensor::{BinaryMask, ImageTensor};

#[test]
fn mask_dirs_round_trip_preserves_masks_and_quantized_images() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = make_toy_domain(ToyKind::Corrupted, 4, 11).unwrap();
    let manifest = write_mask_dirs(tmp.path(), "rt", &samples).unwrap();
    let loaded = load_dataset(&DatasetManifest::load(&manifest).unwrap()).unwrap();
    assert_eq!(loaded.len(), samples.len());

    let by_id: BTreeMap<&str, &Sample> = loaded.iter().map(|s| (s.id.as_str(), s)).collect();
    for s in &samples {
        let back = by_id[s.id.as_str()];
        assert_eq!(back.instances, s.instances, "masks of {}", s.id);
        let (a, b) = (s.image().unwrap().data(), back.image().unwrap().data());
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            // Eight-bit storage: half a quantization step.
            assert_abs_diff_eq!(x.clamp(0.0, 1.0), *y, epsilon = 0.5 / 255.0 + 1e-9);
        }
    }
}

#[test]
fn coco_polygons_rasterize_by_pixel_centres() {
    let tmp = tempfile::tempdir().unwrap();
    let image = ImageTensor::zeros(20, 30);
    segadapt::data::write_png(&tmp.path().join("a.png"), &image).unwrap();
    let coco = serde_json::json!({
        "images": [{"id": 7, "file_name": "a.png", "width": 30, "height": 20}],
        "annotations": [
            {"image_id": 7, "segmentation": [[2.0, 3.0, 12.0, 3.0, 12.0, 8.0, 2.0, 8.0]]},
            // Covers no pixel centre, so it is dropped.
            {"image_id": 7, "segmentation": [[0.0, 0.0, 0.4, 0.0, 0.4, 0.4]]}
        ]
    });
    fs::write(tmp.path().join("annotations.json"), coco.to_string()).unwrap();
    let manifest = DatasetManifest {
        root: tmp.path().to_path_buf(),
        format: AnnotationFormat::CocoJson,
        ..DatasetManifest::synthetic("coco", ToyKind::Clean, 0, 0)
    };
    let samples = load_dataset(&manifest).unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].id, "7");
    assert_eq!(samples[0].instances.len(), 1);
    let expected = BinaryMask::from_fn(20, 30, |x, y| (2..12).contains(&x) && (3..8).contains(&y));
    assert_eq!(samples[0].instances[0], expected);
    assert_eq!(samples[0].frame().unwrap(), (20, 30));
}

#[test]
fn rle_segmentation_is_rejected_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    let coco = serde_json::json!({
        "images": [{"id": 1, "file_name": "a.png", "width": 4, "height": 4}],
        "annotations": [{"image_id": 1, "segmentation": {"counts": [0, 16], "size": [4, 4]}}]
    });
    fs::write(tmp.path().join("annotations.json"), coco.to_string()).unwrap();
    let manifest = DatasetManifest {
        root: tmp.path().to_path_buf(),
        format: AnnotationFormat::CocoJson,
        ..DatasetManifest::synthetic("coco", ToyKind::Clean, 0, 0)
    };
    let err = load_dataset(&manifest).unwrap_err().to_string();
    assert!(err.contains("annotations.json"), "{err}");
    assert!(err.contains("RLE"), "{err}");
}

#[test]
fn toy_domains_are_seed_deterministic_and_share_geometry() {
    let a = make_toy_domain(ToyKind::Clean, 3, 5).unwrap();
    let b = make_toy_domain(ToyKind::Clean, 3, 5).unwrap();
    let c = make_toy_domain(ToyKind::Corrupted, 3, 5).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.image().unwrap(), y.image().unwrap());
        assert_eq!(x.instances, z.instances, "corruption changes pixels, not labels");
        assert_ne!(x.image().unwrap(), z.image().unwrap());
        assert!(!x.instances.is_empty());
    }
}

fn dummy_samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            Sample::in_memory(
                format!("{i:03}"),
                ImageTensor::zeros(2, 2),
                vec![BinaryMask::from_fn(2, 2, |x, y| x + y == 0)],
            )
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_deterministic_partition(n in 0usize..60, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let samples = dummy_samples(n);
        let (a, b) = split(&samples, ratio, seed).unwrap();
        let (a2, b2) = split(&samples, ratio, seed).unwrap();
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&a2));
        prop_assert_eq!(ids(&b), ids(&b2));
        prop_assert_eq!(a.len() + b.len(), n);
        let mut all = ids(&a);
        all.extend(ids(&b));
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        if n >= 2 {
            prop_assert!(!a.is_empty() && !b.is_empty());
            let target = (ratio * n as f64).round() as usize;
            prop_assert_eq!(a.len(), target.clamp(1, n - 1));
        }
    }
}

#[test]
fn split_rejects_degenerate_ratios() {
    let s = dummy_samples(4);
    assert!(split(&s, 0.0, 0).is_err());
    assert!(split(&s, 1.0, 0).is_err());
}
