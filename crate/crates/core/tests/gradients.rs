use bitemporal_core::csdw::{Csdw, CsdwConfig};
use bitemporal_core::gradcheck::{grad_check, GradCheckOptions};
use bitemporal_core::led::{led_level, LedConfig, LedLevelParams};
use bitemporal_core::nn::Init;
use bitemporal_core::{ChangeDetector, Graph, ModelConfig, ParamStore, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn jitter_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.map_in_place(|name, t| {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    });
}

/// Non-trivial scalar readout: weighted sum so that gradients differ per element.
fn readout(g: &mut Graph<f64>, x: bitemporal_core::Var, seed: u64) -> bitemporal_core::Result<bitemporal_core::Var> {
    let probe = g.constant(seeded(g.shape(x), seed));
    let y = g.mul(x, probe)?;
    Ok(g.sum(y))
}

#[test]
fn csdw_block_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = Csdw::new(&mut Init { store: &mut store, rng: &mut rng }, "csdw", 4, &CsdwConfig::default()).unwrap();
    // Seed chosen so no ReLU pre-activation sits within the finite-difference step of zero.
    jitter_biases(&mut store, 34);
    let fa = store.insert("input.a", seeded(Shape::new(1, 4, 6, 6), 5)).unwrap();
    let fb = store.insert("input.b", seeded(Shape::new(1, 4, 6, 6), 6)).unwrap();
    let report = grad_check(
        &mut store,
        |g, st| {
            let (a, b) = (g.param(st, fa), g.param(st, fb));
            let out = block.forward(g, st, a, b)?;
            let la = readout(g, out.a, 7)?;
            let lb = readout(g, out.b, 8)?;
            g.add(la, lb)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.entries_checked, store.num_scalars());
}

#[test]
fn led_level_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params =
        LedLevelParams::new(&mut Init { store: &mut store, rng: &mut rng }, "lvl", 8, &LedConfig::default()).unwrap();
    jitter_biases(&mut store, 10);
    let ids: Vec<_> = (0..4)
        .map(|k| store.insert(format!("input{k}"), seeded(Shape::new(1, 8, 4, 4), 20 + k)).unwrap())
        .collect();
    let report = grad_check(
        &mut store,
        |g, st| {
            let v: Vec<_> = ids.iter().map(|&id| g.param(st, id)).collect();
            let out = led_level(g, st, &params, v[0], v[1], Some((v[2], v[3])))?;
            readout(g, out.pair, 11)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn main_logit_sum_gradients() {
    let config = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let arch = ChangeDetector::build(&config, &mut store, 1).unwrap();
    let img_a = seeded(Shape::new(1, 3, 32, 32), 30).map(|v| 0.5 + 0.5 * v);
    let img_b = seeded(Shape::new(1, 3, 32, 32), 31).map(|v| 0.5 + 0.5 * v);
    let opts = GradCheckOptions { max_entries_per_param: Some(6), ..GradCheckOptions::default() };
    let report = grad_check(
        &mut store,
        |g, st| {
            let a = g.constant(img_a.clone());
            let b = g.constant(img_b.clone());
            let out = arch.forward(g, st, a, b)?;
            Ok(g.sum(out.decoded.main))
        },
        &opts,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
