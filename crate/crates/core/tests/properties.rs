use std::collections::HashSet;

use fundus::attention::{cbam_forward, channel_attention, spatial_attention, CbamSpec, FeatureMap};
use fundus::checkpoint::Checkpoint;
use fundus::data::{
    augment, degrade, denormalize_signed, normalize, sample_epoch_subset, AugmentOp, DegradeKind,
    DegradeParams, ImageSample, Quality, RangeKind, UnpairedDataset,
};
use fundus::losses::{
    adv_loss_discriminator, adv_loss_generator, cycle_consistency_loss, full_objective, LossWeights,
};
use fundus::metrics::{
    confusion_counts, psnr, segmentation_scores, ssim, BinSpec, ConfusionCounts, EvalReport, Histogram,
};
use fundus::params::NetParams;
use fundus::segnet::binarize;
use fundus::Tensor;
use proptest::prelude::*;
use proptest::sample::select;

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageSample> {
    prop::collection::vec(any::<u8>(), 3 * h * w).prop_flat_map(move |px| {
        prop::collection::vec(0u8..2, h * w).prop_map(move |m| {
            ImageSample::new("p", h, w, px.clone(), Quality::Unknown)
                .unwrap()
                .with_mask(m)
                .unwrap()
        })
    })
}

fn mask(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0u8..2, n)
        .prop_map(move |v| Tensor::new(&[n], v.into_iter().map(f64::from).collect()).unwrap())
}

/// Entries in [-0.5, 0.5]; with inputs in [-2, 2] every attention logit stays
/// below 19 in magnitude, where the logistic is still representably inside
/// (0, 1) in f64.
fn cbam_params(spec: &CbamSpec, c: usize, seed: u64) -> NetParams {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetParams::init(&spec.layout("", c), &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_and_ssim_are_symmetric(a in tensor(&[3, 12, 12], 0.0, 255.0), b in tensor(&[3, 12, 12], 0.0, 255.0)) {
        prop_assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        let (s1, s2) = (ssim(&a, &b, 255.0).unwrap(), ssim(&b, &a, 255.0).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn ssim_of_self_is_one(a in tensor(&[3, 11, 14], -10.0, 300.0)) {
        prop_assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_falls_as_offset_grows(a in tensor(&[1, 8, 8], 0.0, 255.0), c1 in 0.01f64..50.0, extra in 0.01f64..50.0, neg in any::<bool>()) {
        let sign = if neg { -1.0 } else { 1.0 };
        let shift = |c: f64| a.map(|v| v + sign * c);
        let near = psnr(&a, &shift(c1), 255.0).unwrap();
        let far = psnr(&a, &shift(c1 + extra), 255.0).unwrap();
        prop_assert!(far < near);
    }

    #[test]
    fn f1_is_a_function_of_jaccard(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let s = segmentation_scores(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
        prop_assert!((s.f1 - 2.0 * s.jaccard / (1.0 + s.jaccard)).abs() < 1e-12);
        for v in [s.jaccard, s.f1, s.recall, s.precision, s.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn confusion_counts_partition_pixels(p in mask(64), g in mask(64)) {
        let c = confusion_counts(&p, &g).unwrap();
        prop_assert_eq!(c.total(), 64);
        prop_assert_eq!(c.tp + c.fp, p.sum() as u64);
        prop_assert_eq!(c.tp + c.fn_, g.sum() as u64);
    }

    #[test]
    fn report_mean_and_histogram_agree(values in prop::collection::vec(-5.0f64..50.0, 1..40)) {
        let bins = BinSpec { lo: 10.0, hi: 40.0, width: 1.0 };
        let mut r = EvalReport::new([("psnr".to_string(), bins)].into());
        for (i, v) in values.iter().enumerate() {
            r.push(format!("img{i:03}"), &[("psnr", *v)]);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((r.mean("psnr").unwrap() - mean).abs() < 1e-9);
        let h = Histogram::build(&bins, &values);
        prop_assert_eq!(h.counts.iter().sum::<u64>() + h.underflow + h.overflow, values.len() as u64);
    }

    #[test]
    fn cbam_keeps_shape_and_attenuates(x in tensor(&[2, 4, 5, 5], -2.0, 2.0), seed in 0u64..1000) {
        let spec = CbamSpec { reduction_ratio: 2, spatial_kernel: 3 };
        let p = cbam_params(&spec, 4, seed);
        let f = FeatureMap::new(x.clone()).unwrap();
        for w in [channel_attention(&f, &spec, &p).unwrap(), spatial_attention(&f, &spec, &p).unwrap()] {
            prop_assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let out = cbam_forward(&f, &spec, &p).unwrap().into_tensor();
        prop_assert_eq!(out.shape(), x.shape());
        for (o, i) in out.data().iter().zip(x.data()) {
            if *i != 0.0 {
                prop_assert!(o.abs() < i.abs());
            }
        }
    }

    #[test]
    fn binarize_is_idempotent(p in tensor(&[1, 1, 4, 4], 0.0, 1.0), t in 0.01f64..0.99) {
        let b = binarize(&p, t).unwrap();
        prop_assert_eq!(binarize(&b, 0.5).unwrap(), b);
    }

    #[test]
    fn losses_are_nonnegative_and_cycle_symmetric(
        r in tensor(&[1, 1, 3, 3], -2.0, 2.0),
        f in tensor(&[1, 1, 3, 3], -2.0, 2.0),
        x in tensor(&[1, 3, 4, 4], -1.0, 1.0),
        xc in tensor(&[1, 3, 4, 4], -1.0, 1.0),
        y in tensor(&[1, 3, 4, 4], -1.0, 1.0),
        yc in tensor(&[1, 3, 4, 4], -1.0, 1.0),
    ) {
        prop_assert!(adv_loss_discriminator(&r, &f).unwrap() >= 0.0);
        prop_assert!(adv_loss_generator(&f).unwrap() >= 0.0);
        let c = cycle_consistency_loss(&x, &xc, &y, &yc).unwrap();
        prop_assert!(c >= 0.0);
        prop_assert!((c - cycle_consistency_loss(&y, &yc, &x, &xc).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn objective_is_affine_in_lambda(a1 in 0.0f64..5.0, a2 in 0.0f64..5.0, cyc in 0.0f64..5.0, l1 in 0.0f64..20.0, l2 in 0.0f64..20.0) {
        let at = |l: f64| full_objective(a1, a2, cyc, &LossWeights { lambda_cyc: l }).unwrap();
        let mid = at((l1 + l2) / 2.0);
        prop_assert!((mid - (at(l1) + at(l2)) / 2.0).abs() < 1e-9);
        prop_assert!((at(l1) - at(0.0) - l1 * cyc).abs() < 1e-9);
    }

    #[test]
    fn discriminator_loss_on_equal_constants_is_minimal_at_half(c in -3.0f64..3.0) {
        let s = Tensor::full(&[1, 1, 2, 2], c);
        let v = adv_loss_discriminator(&s, &s).unwrap();
        prop_assert!((v - ((c - 1.0).powi(2) + c * c)).abs() < 1e-12);
        prop_assert!(v >= 0.5 - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augment_ops_invert_exactly(s in image(5, 7), op in select(AugmentOp::ALL.to_vec())) {
        let back = augment(&augment(&s, op), op.inverse());
        prop_assert_eq!(back, s.clone());
        let once = augment(&s, op);
        let mut a = once.pixels.clone();
        let mut b = s.pixels.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalize_round_trips(s in image(4, 6)) {
        prop_assert_eq!(denormalize_signed(normalize(&s, RangeKind::Signed).data()), s.pixels.clone());
    }

    #[test]
    fn identity_degradation_is_exact(s in image(6, 6), k in select(DegradeKind::ALL.to_vec())) {
        let d = degrade(&s, &DegradeParams::identity(k)).unwrap();
        prop_assert_eq!(d.pixels, s.pixels.clone());
        prop_assert_eq!(d.mask, s.mask.clone());
    }

    #[test]
    fn degradation_is_total_and_deterministic(
        s in image(6, 6),
        k in select(DegradeKind::ALL.to_vec()),
        sigma in 0.0f64..4.0,
        gamma in 0.1f64..5.0,
        gain in 0.0f64..5.0,
        depth in 0.0f64..=1.0,
        radius in 0.05f64..2.0,
        g in prop::array::uniform3(0.05f64..5.0),
    ) {
        let p = DegradeParams { kind: k, sigma, gamma, gain, center: [0.3, 0.6], radius, depth, channel_gains: g };
        let a = degrade(&s, &p).unwrap();
        prop_assert_eq!(a.pixels.len(), s.pixels.len());
        prop_assert_eq!(degrade(&s, &p).unwrap(), a);
    }

    #[test]
    fn epoch_subsets_have_no_duplicates(n_pool in 1usize..30, frac in 0.0f64..=1.0, seed in any::<u64>(), epoch in 0u64..100) {
        let img = |i: usize, q| ImageSample::new(format!("{q:?}{i}"), 1, 1, vec![0; 3], q).unwrap();
        let ds = UnpairedDataset::new(
            (0..n_pool).map(|i| img(i, Quality::Low)).collect(),
            (0..n_pool + 3).map(|i| img(i, Quality::High)).collect(),
            (1, 1),
        ).unwrap();
        let n = ((n_pool as f64) * frac) as usize;
        let (lo, hi) = sample_epoch_subset(&ds, n, n, seed, epoch).unwrap();
        prop_assert_eq!(lo.len(), n);
        prop_assert_eq!(lo.iter().collect::<HashSet<_>>().len(), n);
        prop_assert_eq!(hi.iter().collect::<HashSet<_>>().len(), n);
        prop_assert!(lo.iter().all(|&i| i < n_pool));
        prop_assert_eq!(sample_epoch_subset(&ds, n, n, seed, epoch).unwrap(), (lo, hi));
        prop_assert!(sample_epoch_subset(&ds, n_pool + 1, 0, seed, epoch).is_err());
    }

    #[test]
    fn checkpoints_round_trip_f32_values(v in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..50)) {
        let mut p = NetParams::new();
        p.insert("w", Tensor::new(&[v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"k": 1}));
        ck.push("net", p.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.group("net").unwrap(), &p);
    }
}
