use std::collections::BTreeMap;

use neuroalign::align::{contrastive_loss, cosine, TempMode};
use neuroalign::autograd::Mat;
use neuroalign::dataset::Dataset;
use neuroalign::interpret::{
    integrated_gradients_with, mask_biomarkers, top_k_tokens, AttributionResult, Heatmap, MASK,
};
use neuroalign::synthcohort::{gen_subject, DistributionProfile};
use neuroalign::textkit::{render_report, split_tokens};
use neuroalign::trainer::clip_global_norm;
use neuroalign::{Biomarker, CohortConfig, Diagnosis, Grid, Split, Volume3D};
use proptest::prelude::*;

fn square(max: usize) -> impl Strategy<Value = Mat> {
    (1..=max).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Mat::from_shape_vec((n, n), v).unwrap())
    })
}

fn diagnosis() -> impl Strategy<Value = Diagnosis> {
    prop::sample::select(Diagnosis::ALL.to_vec())
}

fn biomarker() -> impl Strategy<Value = Biomarker> {
    prop::sample::select(Biomarker::ALL.to_vec())
}

fn temp_mode() -> impl Strategy<Value = TempMode> {
    prop::sample::select(vec![TempMode::Divide, TempMode::Multiply])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_is_permutation_invariant(
        s in square(6),
        tau in 0.05f64..20.0,
        temp in temp_mode(),
        seed in any::<u64>(),
    ) {
        let n = s.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let permuted = Mat::from_shape_fn((n, n), |(i, j)| s[[perm[i], perm[j]]]);
        let a = contrastive_loss(&s, tau, temp).unwrap();
        let b = contrastive_loss(&permuted, tau, temp).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn contrastive_loss_is_symmetric_and_non_negative(s in square(6), tau in 0.05f64..20.0, temp in temp_mode()) {
        let a = contrastive_loss(&s, tau, temp).unwrap();
        let b = contrastive_loss(&s.t().to_owned(), tau, temp).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn cosine_is_bounded_and_scale_free(
        v in prop::collection::vec(-5.0f64..5.0, 8),
        w in prop::collection::vec(-5.0f64..5.0, 8),
        k in 0.1f64..10.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let a = Mat::from_shape_vec((1, 8), v).unwrap();
        let b = Mat::from_shape_vec((1, 8), w).unwrap();
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled = cosine(&(&a * k), &b).unwrap();
        prop_assert!((c - scaled).abs() < 1e-12);
    }

    #[test]
    fn integrated_gradients_are_exact_for_linear_functions(
        w in prop::collection::vec(-3.0f64..3.0, 12),
        x in prop::collection::vec(-3.0f64..3.0, 12),
        base in prop::collection::vec(-3.0f64..3.0, 12),
        steps in 1usize..64,
    ) {
        let wm = Mat::from_shape_vec((4, 3), w).unwrap();
        let xm = Mat::from_shape_vec((4, 3), x).unwrap();
        let bm = Mat::from_shape_vec((4, 3), base).unwrap();
        let attr = integrated_gradients_with(&xm, &bm, steps, |_| Ok(wm.clone())).unwrap();
        for r in 0..4 {
            let expect: f64 = (0..3).map(|c| wm[[r, c]] * (xm[[r, c]] - bm[[r, c]])).sum();
            prop_assert!((attr[r] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn heatmaps_are_non_negative_and_shaped(
        dims in (1usize..4, 1usize..4, 1usize..4),
        d in 1usize..6,
        seed in any::<u64>(),
    ) {
        let dims = [dims.0, dims.1, dims.2];
        let n = dims.iter().product::<usize>();
        let mut x = seed | 1;
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 2001) as f64 / 1000.0 - 1.0
        };
        let grad = Mat::from_shape_fn((n, d), |_| next());
        let act = Mat::from_shape_fn((n, d), |_| next());
        let h = Heatmap::from_grad_activation(&grad, &act, dims, "ventricular").unwrap();
        prop_assert_eq!(h.dims, dims);
        prop_assert_eq!(h.values.len(), n);
        prop_assert!(h.values.iter().all(|&v| v >= 0.0));
        let zero = Heatmap::from_grad_activation(&Mat::zeros((n, d)), &act, dims, "ventricular").unwrap();
        prop_assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masking_is_idempotent_and_length_preserving(seed in any::<u64>(), dx in diagnosis(), keep in biomarker()) {
        let record = gen_subject(seed, dx, &DistributionProfile::default());
        let report = render_report(&record);
        let once = mask_biomarkers(&report, keep);
        let twice = mask_biomarkers(&once, keep);
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(split_tokens(&once.text).len(), split_tokens(&report.text).len());
        prop_assert!(once.text.contains(keep.report_label()));
        for other in Biomarker::ALL.into_iter().filter(|&b| b != keep) {
            prop_assert!(!once.text.contains(other.report_label()), "{} survived", other.key());
        }
        prop_assert!(once.text.contains(MASK));
    }

    #[test]
    fn subjects_are_valid_and_in_class_range(seed in any::<u64>(), dx in diagnosis()) {
        let profile = DistributionProfile::default();
        let r = gen_subject(seed, dx, &profile);
        prop_assert!(r.validate().is_ok());
        prop_assert_eq!(r.diagnosis, dx);
        let (lo, hi) = profile.class(dx).mmse_range;
        prop_assert!((lo..=hi).contains(&r.mmse));
        prop_assert_eq!(r, gen_subject(seed, dx, &profile));
    }

    #[test]
    fn volume_bytes_round_trip(values in prop::collection::vec(-1.0f32..1.0, 24)) {
        let mut v = Volume3D::zeros([2, 3, 4]);
        v.voxels.copy_from_slice(&values);
        let back = Volume3D::from_le_bytes([2, 3, 4], &v.to_le_bytes()).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn clipping_bounds_the_global_norm(
        a in prop::collection::vec(-50.0f64..50.0, 6),
        b in prop::collection::vec(-50.0f64..50.0, 3),
        max in 0.1f64..10.0,
    ) {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Mat::from_shape_vec((2, 3), a).unwrap());
        grads.insert("b".to_string(), Mat::from_shape_vec((1, 3), b).unwrap());
        let norm = |g: &BTreeMap<String, Mat>| g.values().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>().sqrt();
        let before = norm(&grads);
        let reported = clip_global_norm(&mut grads, max);
        prop_assert!((reported - before).abs() < 1e-9 * (1.0 + before));
        let after = norm(&grads);
        prop_assert!(after <= max * (1.0 + 1e-9));
        if before <= max {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_is_sorted_and_drawn_from_the_scores(scores in prop::collection::vec(-1.0f64..1.0, 1..20), k in 0usize..20) {
        let n = scores.len();
        prop_assume!(k <= n);
        let attr = AttributionResult {
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            positions: (0..n).collect(),
            scores: scores.clone(),
            score: 0.0,
            baseline_score: 0.0,
            completeness_residual: 0.0,
        };
        let top = top_k_tokens(&attr, k).unwrap();
        prop_assert_eq!(top.len(), k);
        prop_assert!(top.windows(2).all(|w| w[0].score >= w[1].score));
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (t, s) in top.iter().zip(&sorted) {
            prop_assert_eq!(t.score, *s);
            prop_assert_eq!(scores[t.position], t.score);
        }
    }
}

#[test]
fn splits_are_disjoint_and_balanced() {
    let mut c = CohortConfig::desk(11);
    c.subjects_per_class = [12, 12, 12];
    c.grid = Grid {
        dims: [8, 8, 8],
        patch: [4, 4, 4],
    };
    let mut seen = std::collections::BTreeSet::new();
    for split in Split::ALL {
        let d = Dataset::generate(&c, split, &Diagnosis::ALL).unwrap();
        let counts = d.class_counts();
        assert!(counts.iter().all(|&n| n == counts[0]), "{split:?} {counts:?}");
        for s in &d.scans {
            assert!(seen.insert(s.record.subject_id.clone()), "subject in two splits");
        }
    }
    assert_eq!(seen.len(), 36);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn subsets_are_ordered_and_unique(n in 0usize..=12, seed in any::<u64>()) {
        let mut c = CohortConfig::desk(5);
        c.subjects_per_class = [6, 6, 6];
        c.grid = Grid { dims: [8, 8, 8], patch: [4, 4, 4] };
        let d = Dataset::generate(&c, Split::Train, &Diagnosis::ALL).unwrap();
        let s = d.subset(n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.scans.windows(2).all(|w| w[0].key < w[1].key));
        prop_assert!(d.subset(d.len() + 1, seed).is_err());
    }
}
