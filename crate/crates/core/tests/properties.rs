use ndarray::Array2;
use proptest::prelude::*;
use tcav_core::adapter::{GradientVector, Target};
use tcav_core::cav::{fit_cav, Cav, CavKind, CavParams};
use tcav_core::dataset::{roi_crop, Pathology, Phase, SliceRecord, Split, Structure};
use tcav_core::latent::{kmeans, KMeansParams};
use tcav_core::metrics::dice;
use tcav_core::superpixel::{connected_components, slic, SlicParams};
use tcav_core::tcav::{directional_derivatives, tcav_score};

fn cav_of(direction: Vec<f64>) -> Cav {
    Cav {
        concept_id: 0,
        kind: CavKind::Concept,
        counterpart_seed: 0,
        direction,
        offset: 0.0,
        training_accuracy: 1.0,
        low_quality: false,
        steps: 0,
    }
}

fn grads(rows: &[Vec<f64>]) -> Vec<GradientVector> {
    rows.iter()
        .enumerate()
        .map(|(i, v)| GradientVector { id: i.to_string(), target: Target::ForegroundSum, values: v.clone() })
        .collect()
}

fn score(rows: &[Vec<f64>], v: Vec<f64>) -> f64 {
    tcav_score(&directional_derivatives(&grads(rows), &cav_of(v), Pathology::NOR).unwrap()).unwrap()
}

fn vectors(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n)
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0u8..4, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tcav_score_bounds_scaling_and_negation(
        rows in vectors(1..30, 4),
        v in prop::collection::vec(-1.0..1.0f64, 4),
        scale in 0.01..100.0f64,
    ) {
        let s = score(&rows, v.clone());
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, score(&rows, v.iter().map(|x| x * scale).collect()));
        let zeros = rows.iter().filter(|g| g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() == 0.0).count();
        let neg = score(&rows, v.iter().map(|x| -x).collect());
        prop_assert!((s + neg + zeros as f64 / rows.len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask(6, 7), b in mask(6, 7)) {
        for s in [Structure::LV, Structure::MYO, Structure::RV] {
            let ab = dice(&a, &b, s).unwrap();
            prop_assert!((0.0..=100.0).contains(&ab));
            prop_assert_eq!(ab, dice(&b, &a, s).unwrap());
            prop_assert_eq!(dice(&a, &a, s).unwrap(), 100.0);
        }
    }

    #[test]
    fn slic_labels_partition_into_connected_segments(
        pixels in prop::collection::vec(0.0..1.0f32, 12 * 10),
        n_segments in 1usize..12,
    ) {
        let img = Array2::from_shape_vec((12, 10), pixels).unwrap();
        let labels = slic(&img, &SlicParams { n_segments, ..Default::default() }).unwrap();
        prop_assert_eq!(labels.dim(), (12, 10));
        let n = *labels.iter().max().unwrap() as usize + 1;
        prop_assert!(n <= n_segments);
        for l in 0..n as u32 {
            prop_assert!(labels.iter().any(|&x| x == l));
        }
        let (_, sizes) = connected_components(&labels);
        prop_assert_eq!(sizes.len(), n);
    }

    #[test]
    fn kmeans_ignores_input_order(points in vectors(6..25, 3), k in 1usize..4, seed in any::<u64>()) {
        let a = kmeans(&points, k, seed, KMeansParams::default()).unwrap();
        let mut rev = points.clone();
        rev.reverse();
        let b = kmeans(&rev, k, seed, KMeansParams::default()).unwrap();
        prop_assert!((a.distortion - b.distortion).abs() <= 1e-9 * (1.0 + a.distortion));
        let n = points.len();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(
                    a.assignments[i] == a.assignments[j],
                    b.assignments[n - 1 - i] == b.assignments[n - 1 - j]
                );
            }
        }
    }

    #[test]
    fn cav_direction_is_unit(
        pos in vectors(4..20, 5),
        neg in vectors(4..20, 5),
        seed in any::<u64>(),
    ) {
        let cav = fit_cav(&pos, &neg, seed, &CavParams::default()).unwrap();
        let norm: f64 = cav.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&cav.training_accuracy));
    }

    #[test]
    fn roi_crop_keeps_all_foreground_and_is_stable(
        r0 in 0usize..20, c0 in 0usize..20, h in 1usize..10, w in 1usize..10, margin in 0.0..0.5f64,
    ) {
        let mut m = Array2::<u8>::zeros((30, 30));
        m.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w]).fill(Structure::LV.code());
        let rec = SliceRecord {
            patient_id: "p".into(),
            slice_index: 0,
            phase: Phase::ED,
            pathology: Pathology::NOR,
            split: Split::Train,
            image: m.mapv(|x| x as f32 / 3.0),
            mask: m.clone(),
            pixel_spacing: [1.0, 1.0],
        };
        let (crop, roi) = roi_crop(&rec, margin, None).unwrap();
        prop_assert_eq!(crop.mask.iter().filter(|&&x| x != 0).count(), h * w);
        prop_assert!(roi.fits(30, 30));
        let (again, _) = roi_crop(&crop, 0.0, None).unwrap();
        let (twice, _) = roi_crop(&again, 0.0, None).unwrap();
        prop_assert_eq!(&again.mask, &twice.mask);
    }
}
