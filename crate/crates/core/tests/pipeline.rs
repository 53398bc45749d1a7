use bitemporal_core::checkpoint::Checkpoint;
use bitemporal_core::config::{LrSchedule, RunConfig};
use bitemporal_core::data::{augment, gen_synthetic, synth_sample, AugmentConfig, SynthConfig};
use bitemporal_core::encoder::{EncoderConfig, LEVELS};
use bitemporal_core::fpn::{Fpn, FpnConfig};
use bitemporal_core::infer::{slide_infer, slide_probs, PatchPredictor};
use bitemporal_core::metrics::metrics;
use bitemporal_core::nn::Init;
use bitemporal_core::train::{evaluate, train};
use bitemporal_core::{Graph, Model, ModelConfig, ParamStore, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_| rng.random_range(0.0..1.0))
}

fn tiny_run(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig { model: ModelConfig::tiny(), ..Default::default() };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 4;
    cfg.infer.patch = 32;
    cfg.data.synth.size = 32;
    cfg.data.train_count = 8;
    cfg.data.val_count = 4;
    cfg.data.test_count = 4;
    cfg
}

#[test]
fn fpn_without_exchange_runs_each_branch_alone() {
    let widths = [4, 8, 12, 16];
    for tied in [true, false] {
        let cfg = FpnConfig { width: 6, exchange: false, tied, ..FpnConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fpn = Fpn::new(&mut Init { store: &mut store, rng: &mut rng }, "fpn", &widths, &cfg);
        let mut g = Graph::new();
        let level = |g: &mut Graph<f64>, k: usize, seed: u64| {
            let side = 16 >> k;
            g.constant(seeded(Shape::new(1, widths[k], side, side), seed + k as u64))
        };
        let a: [_; LEVELS] = std::array::from_fn(|k| level(&mut g, k, 10));
        let b: [_; LEVELS] = std::array::from_fn(|k| level(&mut g, k, 20));
        let pair = fpn.forward(&mut g, &store, &bitemporal_core::encoder::PyramidPair { a, b }).unwrap();
        let alone_a = fpn.branch_a.forward_single(&mut g, &store, &a).unwrap();
        let alone_b = fpn.branch_b.forward_single(&mut g, &store, &b).unwrap();
        for k in 0..LEVELS {
            assert_eq!(g.value(pair.a[k]), g.value(alone_a[k]));
            assert_eq!(g.value(pair.b[k]), g.value(alone_b[k]));
        }

        // With exchange on, identical inputs through tied branches stay identical.
        let cfg = FpnConfig { exchange: true, ..cfg };
        let fpn = Fpn { config: cfg, ..fpn };
        let same = fpn.forward(&mut g, &store, &bitemporal_core::encoder::PyramidPair { a, b: a }).unwrap();
        if tied {
            for k in 0..LEVELS {
                assert_eq!(g.value(same.a[k]), g.value(same.b[k]));
            }
        }
    }
}

#[test]
fn disabled_weighting_is_a_plain_siamese_encoder() {
    let mut cfg = ModelConfig::tiny();
    cfg.csdw_enabled = false;
    let model = Model::<f64>::new(&cfg, 4).unwrap();
    assert!(model.params.iter().all(|(_, name, _)| !name.starts_with("encoder.csdw")));
    let mut g = Graph::new();
    let a = g.constant(seeded(Shape::new(1, 3, 32, 32), 1));
    let b = g.constant(seeded(Shape::new(1, 3, 32, 32), 2));
    let enc = model.arch.encoder.encode_pair(&mut g, &model.params, a, b).unwrap();
    let plain = model.arch.encoder.backbone_pair(&mut g, &model.params, a, b).unwrap();
    for k in 0..LEVELS {
        assert!(enc.weights[k].is_none());
        assert_eq!(g.value(enc.pyramid.a[k]), g.value(plain.a[k]));
        assert_eq!(g.value(enc.pyramid.b[k]), g.value(plain.b[k]));
    }
}

#[test]
fn default_pyramid_shapes() {
    let cfg = ModelConfig { encoder: EncoderConfig::default(), ..ModelConfig::default() };
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let a = g.constant(image(64, 64, 1));
    let b = g.constant(image(64, 64, 2));
    let out = model.arch.forward(&mut g, &model.params, a, b).unwrap();
    let enc: Vec<_> = out.encoded.pyramid.a.iter().map(|&v| g.shape(v)).collect();
    assert_eq!(
        enc,
        [Shape::new(1, 32, 16, 16), Shape::new(1, 64, 8, 8), Shape::new(1, 128, 4, 4), Shape::new(1, 256, 2, 2)]
    );
    assert!(out.pyramid.b.iter().all(|&v| g.shape(v).c() == 128));
    assert_eq!(g.shape(out.decoded.main), Shape::new(1, 2, 64, 64));
    let aux: Vec<_> = out.decoded.aux.iter().map(|&v| g.shape(v)).collect();
    assert_eq!(aux, [Shape::new(1, 2, 4, 4), Shape::new(1, 2, 8, 8), Shape::new(1, 2, 16, 16)]);
}

#[test]
fn synthetic_masks_stay_in_the_fraction_band() {
    let cfg = SynthConfig::default();
    let samples = gen_synthetic(&cfg, 0, 0, 100).unwrap();
    for s in &samples {
        let frac = s.mask.count_ones() as f64 / (s.height() * s.width()) as f64;
        assert!((cfg.min_mask_fraction..=cfg.max_mask_fraction).contains(&frac), "{}: {frac}", s.id);
    }
    assert_eq!(samples, gen_synthetic(&cfg, 0, 0, 100).unwrap());
}

#[test]
fn augmentation_golden_trace() {
    let s = synth_sample(&SynthConfig::default(), 0, 0).unwrap();
    let out = augment(&s, 1234, &AugmentConfig::default());
    let sum = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>();
    let trace = (
        sum(&out.img_a),
        sum(&out.img_b),
        out.mask.count_ones(),
        out.mask.data().iter().position(|&v| v == 1),
    );
    assert_eq!(out.mask.count_ones(), s.mask.count_ones());
    let (ga, gb, ones, first) = GOLDEN;
    assert!((trace.0 - ga).abs() < 1e-2 && (trace.1 - gb).abs() < 1e-2, "{trace:?}");
    assert_eq!((trace.2, trace.3), (ones, first));
}

/// Recorded from the reference run: pixel sums of both images, changed-pixel count, first changed index.
const GOLDEN: (f64, f64, usize, Option<usize>) = (3635.384349361062, 4932.463306561112, 975, Some(87));

struct Constant([f32; 2]);

impl PatchPredictor for Constant {
    fn predict_probs(&self, a: &Tensor<f32>, _: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = a.shape();
        Ok(Tensor::from_fn(Shape::new(1, 2, s.h(), s.w()), |[_, c, _, _]| self.0[c]))
    }
}

#[test]
fn tiling_equivalences() {
    let model = Model::<f32>::new(&ModelConfig::tiny(), 3).unwrap();
    let (a, b) = (image(32, 32, 5), image(32, 32, 6));
    let single = model.probabilities(&a, &b).unwrap();
    for stride in [1, 7, 16, 32] {
        assert_eq!(slide_probs(&model, &a, &b, 32, stride).unwrap(), single);
    }

    let (a, b) = (image(64, 96, 7), image(64, 96, 8));
    let tiled = slide_probs(&model, &a, &b, 32, 32).unwrap();
    for y0 in [0, 32] {
        for x0 in [0, 32, 64] {
            let p = model.probabilities(&a.crop(y0, x0, 32, 32).unwrap(), &b.crop(y0, x0, 32, 32).unwrap()).unwrap();
            for c in 0..2 {
                for y in 0..32 {
                    for x in 0..32 {
                        assert_eq!(tiled.at(0, c, y0 + y, x0 + x), p.at(0, c, y, x));
                    }
                }
            }
        }
    }

    for probs in [[0.3, 0.7], [0.8, 0.2]] {
        let stub = Constant(probs);
        let masks: Vec<_> = [1, 5, 16, 32].iter().map(|&s| slide_infer(&stub, &a, &b, 32, s).unwrap()).collect();
        assert!(masks.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(masks[0].count_ones(), if probs[1] > probs[0] { 64 * 96 } else { 0 });
    }
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let cfg = tiny_run(1);
    let train_set = cfg.data.load_split(bitemporal_core::config::Split::Train, cfg.seed).unwrap();
    let val_set = cfg.data.load_split(bitemporal_core::config::Split::Val, cfg.seed).unwrap();
    let out = train(&cfg, &train_set, &val_set, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.last.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.params, out.last.params);
    assert_eq!(loaded.optimizer, out.last.optimizer);
    let probe = &val_set[0];
    let before = out.last.model().unwrap().logits(&probe.img_a, &probe.img_b).unwrap();
    let after = loaded.model().unwrap().logits(&probe.img_a, &probe.img_b).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_run(2);
    let train_set = cfg.data.load_split(bitemporal_core::config::Split::Train, cfg.seed).unwrap();
    let val_set = cfg.data.load_split(bitemporal_core::config::Split::Val, cfg.seed).unwrap();
    let r1 = train(&cfg, &train_set, &val_set, |_| {}).unwrap();
    let r2 = train(&cfg, &train_set, &val_set, |_| {}).unwrap();
    assert_eq!(r1.best.best_epoch, r2.best.best_epoch);
    assert_eq!(r1.history.last().unwrap().last_loss.to_bits(), r2.history.last().unwrap().last_loss.to_bits());
    assert_eq!(r1.last.params, r2.last.params);
    assert_eq!(r1.data_digest, r2.data_digest);
}

#[test]
fn single_batch_overfit() {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 200;
    cfg.train.batch_size = 4;
    cfg.train.augment = false;
    cfg.train.val_from_epoch = 200;
    cfg.train.schedule = LrSchedule::Cosine;
    cfg.train.warmup_steps = 20;
    cfg.optimizer.lr = 3e-3;
    let samples = gen_synthetic(&cfg.data.synth, 0, 0, 4).unwrap();
    let out = train(&cfg, &samples, &samples, |_| {}).unwrap();
    let model = out.last.model().unwrap();
    let (counts, _) = evaluate(&model, &samples, &cfg.infer).unwrap();
    let iou = metrics(&counts).unwrap().iou;
    assert!(iou >= 0.95, "train IoU {iou}");
}
