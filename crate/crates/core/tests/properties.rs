use bitemporal_core::csdw::compute_weights;
use bitemporal_core::data::{augment, AugmentConfig, Geometry, SamplePair};
use bitemporal_core::infer::tile_origins;
use bitemporal_core::metrics::{confusion, decode_confusion, metrics, render_confusion, BinaryMask, ConfusionCounts};
use bitemporal_core::similarity::{cosine_to_gray, gray_to_cosine};
use bitemporal_core::{Shape, Tensor};
use proptest::prelude::*;

const W_LO: f64 = 0.268_941_421_369_995_1;
const W_HI: f64 = 0.731_058_578_630_004_9;

fn features(dims: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |v| Tensor::new(Shape(dims), v).unwrap())
}

fn feature_pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..3, 1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(n, c, h, w)| (features([n, c, h, w]), features([n, c, h, w])))
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(0u8..2, h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| (mask(h, w), mask(h, w)))
}

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..10_000, 0u64..10_000, 0u64..10_000, 0u64..10_000)
        .prop_filter("non-empty", |c| c.0 + c.1 + c.2 + c.3 > 0)
        .prop_map(|(tp, tn, fp, fn_)| ConfusionCounts { tp, tn, fp, fn_ })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_stay_in_sigmoid_band((a, b) in feature_pair()) {
        let w = compute_weights(&a, &b).unwrap();
        for &v in w.w_c.data().iter().chain(w.w_s.data()) {
            prop_assert!((W_LO - 1e-5..=W_HI + 1e-5).contains(&v), "{v}");
        }
        for &v in w.w.data() {
            prop_assert!((W_LO * W_LO - 1e-5..=W_HI * W_HI + 1e-5).contains(&v), "{v}");
        }
    }

    #[test]
    fn weights_are_symmetric((a, b) in feature_pair()) {
        let ab = compute_weights(&a, &b).unwrap();
        let ba = compute_weights(&b, &a).unwrap();
        prop_assert!(ab.w.max_abs_diff(&ba.w).unwrap() < 1e-6);
    }

    #[test]
    fn weights_ignore_positive_scale((a, b) in feature_pair(), alpha in prop::sample::select(vec![0.1, 3.0, 100.0])) {
        let base = compute_weights(&a, &b).unwrap();
        let scaled = compute_weights(&a.map(|v| v * alpha), &b).unwrap();
        prop_assert!(base.w.max_abs_diff(&scaled.w).unwrap() < 1e-5);
    }

    #[test]
    fn f1_is_a_function_of_iou(c in counts()) {
        let m = metrics(&c).unwrap();
        if c.tp + c.fp + c.fn_ > 0 {
            prop_assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-9);
        }
        prop_assert!((m.oa - (c.tp + c.tn) as f64 / c.total() as f64).abs() < 1e-12);
        for v in [m.iou, m.prec, m.rec, m.f1, m.oa] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn counts_are_additive_over_shards(pairs in prop::collection::vec(mask_pair(), 1..6)) {
        let total: ConfusionCounts = pairs.iter().map(|(p, g)| confusion(p, g).unwrap()).sum();
        let pixels: u64 = pairs.iter().map(|(p, _)| (p.height() * p.width()) as u64).sum();
        prop_assert_eq!(total.total(), pixels);
        let split = pairs.len() / 2;
        let left: ConfusionCounts = pairs[..split].iter().map(|(p, g)| confusion(p, g).unwrap()).sum();
        let right: ConfusionCounts = pairs[split..].iter().map(|(p, g)| confusion(p, g).unwrap()).sum();
        prop_assert_eq!(metrics(&(left + right)).unwrap(), metrics(&total).unwrap());
    }

    #[test]
    fn swapping_roles_swaps_errors((p, g) in mask_pair()) {
        let c = confusion(&p, &g).unwrap();
        let r = confusion(&g, &p).unwrap();
        prop_assert_eq!((c.tp, c.tn, c.fp, c.fn_), (r.tp, r.tn, r.fn_, r.fp));
        let inv = confusion(&p.inverted(), &g.inverted()).unwrap();
        prop_assert_eq!((c.tp, c.tn, c.fp, c.fn_), (inv.tn, inv.tp, inv.fn_, inv.fp));
    }

    #[test]
    fn confusion_render_is_invertible((p, g) in mask_pair()) {
        let (p2, g2) = decode_confusion(&render_confusion(&p, &g).unwrap()).unwrap();
        prop_assert_eq!(p2, p);
        prop_assert_eq!(g2, g);
    }

    #[test]
    fn gray_encoding_round_trips(v in prop::collection::vec(-1.0f32..=1.0, 1..64)) {
        let n = v.len();
        let t = Tensor::new(Shape::new(1, 1, 1, n), v.clone()).unwrap();
        let img = cosine_to_gray(&t).unwrap();
        for (x, &want) in v.iter().enumerate() {
            let got = gray_to_cosine(img.get_pixel(x as u32, 0).0[0]);
            prop_assert!((got - want).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tiles_cover_every_pixel(patch in 1usize..40, extra in 0usize..80, stride_frac in 0.01f64..=1.0) {
        let len = patch + extra;
        let stride = ((patch as f64 * stride_frac).ceil() as usize).clamp(1, patch);
        let origins = tile_origins(len, patch, stride);
        prop_assert_eq!(origins[0], 0);
        prop_assert_eq!(*origins.last().unwrap(), len - patch);
        prop_assert!(origins.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= stride));
    }

    #[test]
    fn augmentation_keeps_mask_binary_and_aligned(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        // Image A encodes the mask in every channel, so geometry must move both identically.
        let m = BinaryMask::new(h, w, (0..h * w).map(|i| ((i * 7 + 3) % 3 == 0) as u8).collect()).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 3, h, w), |[_, _, y, x]| m.get(y, x) as f32);
        let s = SamplePair::new("p", img.clone(), img, m).unwrap();
        let geo_only = AugmentConfig { photometric: false, ..AugmentConfig::default() };
        let out = augment(&s, seed, &geo_only);
        prop_assert!(out.mask.data().iter().all(|&v| v <= 1));
        prop_assert_eq!(out.mask.count_ones(), s.mask.count_ones());
        for y in 0..out.height() {
            for x in 0..out.width() {
                prop_assert_eq!(out.img_a.at(0, 0, y, x), out.mask.get(y, x) as f32);
                prop_assert_eq!(out.img_b.at(0, 2, y, x), out.mask.get(y, x) as f32);
            }
        }
        let full = augment(&s, seed, &AugmentConfig::default());
        prop_assert!(full.mask.data().iter().all(|&v| v <= 1));
        prop_assert!(full.img_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn geometry_has_order_four(turns in 0u8..4, hflip: bool, vflip: bool, h in 1usize..5, w in 1usize..5) {
        let geo = Geometry { quarter_turns: turns, hflip, vflip };
        let img = Tensor::from_fn(Shape::new(1, 2, h, w), |[_, c, y, x]| (c * 100 + y * 10 + x) as f32);
        let mut t = img.clone();
        for _ in 0..4 {
            t = Geometry { quarter_turns: 1, hflip: false, vflip: false }.apply_image(&t);
        }
        prop_assert_eq!(&t, &img);
        let m = BinaryMask::new(h, w, (0..h * w).map(|i| (i % 2) as u8).collect()).unwrap();
        let as_img = Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| m.get(y, x) as f32);
        let (moved, moved_img) = (geo.apply_mask(&m), geo.apply_image(&as_img));
        for y in 0..moved.height() {
            for x in 0..moved.width() {
                prop_assert_eq!(moved.get(y, x) as f32, moved_img.at(0, 0, y, x));
            }
        }
    }
}
