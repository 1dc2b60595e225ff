use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;

fn model<F: Scalar>(tiers: bool, seed: u64) -> FarModel<F> {
    let mut m = FarModel::new(ModelConfig::tiny().with_tiers(tiers), seed).unwrap();
    m.randomize(0.08, seed + 1);
    m
}

fn frames<F: Scalar>(count: usize, seed: u64) -> Vec<Tensor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::randn(&[8, 8, 8], 0.5, &mut rng)).collect()
}

fn cfg(mode: CacheMode, steps: usize) -> SamplerConfig {
    SamplerConfig {
        steps,
        cache_mode: mode,
        ..SamplerConfig::default()
    }
}

fn max_diff<F: Scalar>(a: &[Tensor<F>], b: &[Tensor<F>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).unwrap().as_f64())
        .fold(0.0, f64::max)
}

#[test]
fn constant_field_recovers_data_in_one_step() {
    // On a dyadic grid the subtractions are exact, so the step must be too.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = |t: Tensor<f64>| t.map(|v| (v * 256.0).round() / 256.0);
    let x0 = grid(Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng));
    let x1 = grid(Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng));
    let v = x1.sub(&x0).unwrap();
    let out = euler_integrate(x1, 1, |_, _| Ok(v.clone())).unwrap();
    assert_eq!(out, x0);
}

#[test]
fn euler_visits_a_uniform_grid() {
    let mut ts = Vec::new();
    euler_integrate(Tensor::<f64>::zeros(&[1]), 4, |x, t| {
        ts.push(t);
        Ok(x.clone())
    })
    .unwrap();
    assert_eq!(ts, vec![1.0, 0.75, 0.5, 0.25]);
    assert!(euler_integrate(Tensor::<f64>::zeros(&[1]), 0, |x, _| Ok(x.clone())).is_err());
}

#[test]
fn decay_field_matches_closed_form() {
    // dx/dτ = −x in sampling time τ = 1 − t, i.e. v = dx/dt = x; x(t) = e^{t−1}.
    let out = euler_integrate(Tensor::<f64>::full(&[1], 1.0), 100, |x, _| Ok(x.clone())).unwrap();
    assert!((out.data()[0] - (-1f64).exp()).abs() <= 1e-2);
}

#[test]
fn non_finite_state_is_an_error() {
    let r = euler_integrate(Tensor::<f64>::full(&[1], 1.0), 2, |x, _| Ok(x.map(|_| f64::INFINITY)));
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn guidance_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
    let u = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
    assert_eq!(guided_velocity(&c, &u, 1.0).unwrap(), c);
    assert_eq!(guided_velocity(&c, &u, 0.0).unwrap(), u);
    let g = guided_velocity(&c, &u, 2.0).unwrap();
    for i in 0..5 {
        let want = u.data()[i] + 2.0 * (c.data()[i] - u.data()[i]);
        assert!((g.data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn guidance_zero_is_the_unconditional_rollout() {
    let m = model::<f64>(false, 2);
    let ctx = frames::<f64>(2, 3);
    let actions = [1, 2, 3, 4];
    let mut guided = cfg(CacheMode::Kv, 3);
    guided.guidance = 0.0;
    let a = predict(&m, &ctx, Some(&actions), None, 2, &guided).unwrap();
    // The unconditional branch sees null actions everywhere; the same model with
    // no actions at all takes the same path.
    let mut plain = cfg(CacheMode::Kv, 3);
    plain.guidance = 1.0;
    let b = predict(&m, &ctx, None, None, 2, &plain).unwrap();
    assert_eq!(a.frames, b.frames);
}

#[test]
fn kv_cache_matches_recompute() {
    let m = model::<f32>(false, 4);
    let ctx = frames::<f32>(2, 5);
    let a = predict(&m, &ctx, Some(&[0, 1, 2, 3, 4]), None, 3, &cfg(CacheMode::None, 4)).unwrap();
    let b = predict(&m, &ctx, Some(&[0, 1, 2, 3, 4]), None, 3, &cfg(CacheMode::Kv, 4)).unwrap();
    assert!(max_diff(&a.frames, &b.frames) <= 1e-5);
}

#[test]
fn kv_cache_with_guidance_matches_recompute() {
    let m = model::<f64>(false, 6);
    let ctx = frames::<f64>(1, 7);
    let mut c = cfg(CacheMode::None, 3);
    c.guidance = 1.5;
    let a = predict(&m, &ctx, Some(&[1, 2, 3]), None, 2, &c).unwrap();
    c.cache_mode = CacheMode::Kv;
    let b = predict(&m, &ctx, Some(&[1, 2, 3]), None, 2, &c).unwrap();
    assert!(max_diff(&a.frames, &b.frames) <= 1e-10);
}

#[test]
fn multilevel_matches_long_short_recompute() {
    let m = model::<f64>(true, 8);
    let ctx = frames::<f64>(1, 9);
    let mut c = cfg(CacheMode::None, 2);
    c.short_window = Some(2);
    let a = predict(&m, &ctx, None, None, 4, &c).unwrap();
    c.cache_mode = CacheMode::Multilevel;
    let b = predict(&m, &ctx, None, None, 4, &c).unwrap();
    assert!(max_diff(&a.frames, &b.frames) <= 1e-10);
}

#[test]
fn eviction_bookkeeping() {
    let m = model::<f32>(true, 10);
    let mut s = Session::new(
        &m,
        SamplerConfig {
            cache_mode: CacheMode::Multilevel,
            short_window: Some(2),
            steps: 1,
            ..SamplerConfig::default()
        },
        None,
    )
    .unwrap();
    for f in frames::<f32>(2, 11) {
        s.push_frame(f, None).unwrap();
    }
    assert_eq!(s.store().l1().len(), 2);
    assert!(s.store().l2().is_empty());
    // Frame 2 arrives: frame 0 moves to L2, frame 1 stays alongside the pending frame.
    s.sample_next(None).unwrap();
    let l2: Vec<usize> = s.store().l2().iter().map(|f| f.index).collect();
    let l1: Vec<usize> = s.store().l1().iter().map(|f| f.index).collect();
    assert_eq!(l2, vec![0]);
    assert_eq!(l1, vec![1]);
    assert_eq!(s.store().l2()[0].kv.len(), 4);
    assert_eq!(s.store().l1()[0].kv_shape(4), [2, 4, 16, 16]);
    assert!(s.store().l1().iter().chain(s.store().l2()).all(|f| f.t == SENTINEL_CLEAN));
}

#[test]
fn caching_is_deterministic() {
    let m = model::<f32>(false, 12);
    let f = &frames::<f32>(1, 13)[0];
    let cond = EncodeCond {
        class: None,
        null_cond: false,
    };
    let mut a = KvCacheStore::unbounded();
    let mut b = KvCacheStore::unbounded();
    a.cache_frame(&m, 0, f, Some(1), SENTINEL_CLEAN, cond).unwrap();
    b.cache_frame(&m, 0, f, Some(1), SENTINEL_CLEAN, cond).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.l1()[0].kv_shape(4), [2, 4, 16, 16]);
    assert!(a.cache_frame(&m, 5, f, None, SENTINEL_CLEAN, cond).is_err());
    assert!(a.evict_and_reencode(&m, cond).is_err());
}

#[test]
fn empty_prediction_and_determinism() {
    let m = model::<f32>(false, 14);
    let ctx = frames::<f32>(2, 15);
    let r = predict(&m, &ctx, None, None, 0, &cfg(CacheMode::Kv, 2)).unwrap();
    assert!(r.frames.is_empty());
    let a = predict(&m, &ctx, None, None, 2, &cfg(CacheMode::Kv, 2)).unwrap();
    let b = predict(&m, &ctx, None, None, 2, &cfg(CacheMode::Kv, 2)).unwrap();
    assert_eq!(a.frames, b.frames);
    let u = predict(&m, &[], None, None, 1, &cfg(CacheMode::None, 2)).unwrap();
    assert_eq!(u.frames.len(), 1);
}

#[test]
fn future_actions_do_not_change_earlier_frames() {
    let m = model::<f64>(false, 16);
    let ctx = frames::<f64>(1, 17);
    let a = predict(&m, &ctx, Some(&[0, 1, 2, 3]), None, 3, &cfg(CacheMode::Kv, 2)).unwrap();
    let b = predict(&m, &ctx, Some(&[0, 1, 2, 4]), None, 3, &cfg(CacheMode::Kv, 2)).unwrap();
    assert_eq!(a.frames[..2], b.frames[..2]);
    assert_ne!(a.frames[2], b.frames[2]);
}

#[test]
fn context_noise_is_consistent_across_modes() {
    let m = model::<f64>(false, 18);
    let ctx = frames::<f64>(2, 19);
    let mut c = cfg(CacheMode::None, 2);
    c.context_noise = 0.1;
    let a = predict(&m, &ctx, None, None, 2, &c).unwrap();
    c.cache_mode = CacheMode::Kv;
    let b = predict(&m, &ctx, None, None, 2, &c).unwrap();
    assert!(max_diff(&a.frames, &b.frames) <= 1e-10);
    let clean = predict(&m, &ctx, None, None, 2, &cfg(CacheMode::Kv, 2)).unwrap();
    assert_ne!(clean.frames, b.frames);
}

#[test]
fn invalid_sampler_configs() {
    let plain = ModelConfig::tiny();
    let long = ModelConfig::tiny().with_tiers(true);
    let mut c = cfg(CacheMode::Multilevel, 2);
    assert!(c.validate(&long).is_err());
    c.short_window = Some(2);
    assert!(c.validate(&long).is_ok());
    assert!(c.validate(&plain).is_err());
    c.cache_mode = CacheMode::Kv;
    assert!(c.validate(&long).is_err());
    assert!(cfg(CacheMode::None, 0).validate(&plain).is_err());
    assert_eq!("multilevel".parse::<CacheMode>().unwrap(), CacheMode::Multilevel);
    assert!("lru".parse::<CacheMode>().is_err());
}

#[test]
fn slope_of_linear_costs() {
    let s: Vec<f64> = (0..16).map(|i| 0.5 + 0.25 * i as f64).collect();
    assert!((last_quartile_slope(&s).unwrap() - 0.25).abs() < 1e-12);
    assert!((last_quartile_slope(&[1.0; 10]).unwrap()).abs() < 1e-12);
    assert!(last_quartile_slope(&[1.0]).is_none());
}

#[test]
fn timing_rows_and_csv() {
    let m = model::<f32>(true, 20);
    let cfg = TimingConfig {
        frames: 4,
        steps: 1,
        ..TimingConfig::default()
    };
    let rows = timing_harness(&m, &cfg).unwrap();
    assert_eq!(rows.len(), 12);
    let mut buf = Vec::new();
    write_timing_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("mode,frame,seconds\n"));
    assert!(text.contains("\nmultilevel,3,"));
}
