use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tokenizer::{patchify, Kernel};

fn tiny(tiers: bool) -> ModelConfig {
    ModelConfig::tiny().with_tiers(tiers)
}

fn random_model(cfg: ModelConfig, seed: u64) -> FarModel<f64> {
    let mut m = FarModel::new(cfg, seed).unwrap();
    m.randomize(0.2, seed + 100);
    m
}

fn frame(cfg: &ModelConfig, index: usize, t: f64, seed: u64) -> FrameInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&cfg.latent.shape(), 1.0, &mut rng);
    FrameInput {
        index,
        tier: Tier::Short,
        tokens: patchify(&x, cfg.short_kernel).unwrap(),
        t,
        action: Some((seed as usize) % cfg.num_actions.max(1)),
        predict: !is_sentinel(t),
    }
}

fn long_frame(cfg: &ModelConfig, index: usize, seed: u64) -> FrameInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&cfg.latent.shape(), 1.0, &mut rng);
    FrameInput {
        index,
        tier: Tier::Long,
        tokens: patchify(&x, cfg.long_kernel).unwrap(),
        t: crate::schedule::SENTINEL_CLEAN,
        action: None,
        predict: false,
    }
}

fn predictions(m: &FarModel<f64>, input: &ForwardInput<f64>) -> Vec<Tensor<f64>> {
    m.velocity(input, None).unwrap()
}

#[test]
fn zero_head_predicts_zero() {
    let cfg = tiny(true);
    let m = FarModel::<f64>::new(cfg.clone(), 0).unwrap();
    let input = ForwardInput::new(vec![
        long_frame(&cfg, 0, 1),
        frame(&cfg, 1, crate::schedule::SENTINEL_CLEAN, 2),
        frame(&cfg, 2, 0.3, 3),
    ]);
    let v = predictions(&m, &input);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].shape(), &[8, 8, 8]);
    assert!(v[0].data().iter().all(|&x| x == 0.0));
}

#[test]
fn single_frame_shape() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 1);
    let v = predictions(&m, &ForwardInput::new(vec![frame(&cfg, 0, 0.5, 9)]));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].shape(), &cfg.latent.shape());
}

#[test]
fn perturbing_a_frame_never_changes_earlier_predictions() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 2);
    for t_len in 1..=4usize {
        let base: Vec<_> = (0..t_len)
            .map(|i| frame(&cfg, i, 0.1 + 0.2 * i as f64, i as u64))
            .collect();
        let v0 = predictions(&m, &ForwardInput::new(base.clone()));
        for j in 0..t_len {
            let mut pert = base.clone();
            pert[j] = frame(&cfg, j, 0.9, 1000 + j as u64);
            let v1 = predictions(&m, &ForwardInput::new(pert));
            for i in 0..j {
                assert_eq!(v0[i], v1[i], "T={t_len} j={j} frame {i}");
            }
            assert_ne!(v0[j], v1[j]);
        }
    }
}

#[test]
fn full_policy_breaks_causality() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 3);
    let frames: Vec<_> = (0..2).map(|i| frame(&cfg, i, 0.5, i as u64)).collect();
    let mut input = ForwardInput::new(frames.clone());
    input.policy = AttentionPolicy::Full;
    let v0 = predictions(&m, &input);
    input.frames[1] = frame(&cfg, 1, 0.5, 77);
    let v1 = predictions(&m, &input);
    assert_ne!(v0[0], v1[0]);
}

#[test]
fn long_short_causality() {
    let cfg = tiny(true);
    let m = random_model(cfg.clone(), 4);
    let base = vec![
        long_frame(&cfg, 0, 10),
        long_frame(&cfg, 1, 11),
        frame(&cfg, 2, 0.4, 12),
        frame(&cfg, 3, 0.6, 13),
    ];
    let v0 = predictions(&m, &ForwardInput::new(base.clone()));
    let mut pert = base.clone();
    pert[3] = frame(&cfg, 3, 0.2, 99);
    let v1 = predictions(&m, &ForwardInput::new(pert));
    assert_eq!(v0[0], v1[0]);
    let mut pert = base;
    pert[1] = long_frame(&cfg, 1, 98);
    let v2 = predictions(&m, &ForwardInput::new(pert));
    assert_ne!(v0[0], v2[0]);
}

#[test]
fn cached_past_is_bit_identical_to_recompute() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 5);
    let clean = crate::schedule::SENTINEL_CLEAN;
    let ctx: Vec<_> = (0..3).map(|i| frame(&cfg, i, clean, 20 + i as u64)).collect();
    let cur = frame(&cfg, 3, 0.7, 30);
    let mut all = ctx.clone();
    all.push(cur.clone());
    let full = predictions(&m, &ForwardInput::new(all));
    let past = m.encode(&ForwardInput::new(ctx), None).unwrap();
    assert_eq!(past.len(), 3 * cfg.tpf_short());
    let cached = m.velocity(&ForwardInput::new(vec![cur]), Some(&past)).unwrap();
    assert_eq!(full, cached);
}

#[test]
fn tiers_use_separate_projections() {
    // Kernels (2,2) and (1,4) give identical token shapes on an 8×8 latent.
    let mut cfg = tiny(true);
    cfg.long_kernel = Kernel::new(1, 4);
    let m = random_model(cfg.clone(), 6);
    let f = frame(&cfg, 0, crate::schedule::SENTINEL_CLEAN, 1);
    let mut g = f.clone();
    g.tier = Tier::Long;
    assert_eq!(f.tokens.shape(), g.tokens.shape());
    let es = m.embed_tokens(&[f]).unwrap();
    let el = m.embed_tokens(&[g]).unwrap();
    assert_eq!(es.shape(), &[16, 64]);
    assert_ne!(es, el);
}

#[test]
fn embedding_has_no_cross_frame_mixing() {
    let cfg = tiny(true);
    let m = random_model(cfg.clone(), 7);
    let frames = vec![long_frame(&cfg, 0, 1), frame(&cfg, 1, 0.5, 2), frame(&cfg, 2, 0.1, 3)];
    let joint = m.embed_tokens(&frames).unwrap();
    let parts: Vec<Tensor<f64>> = frames
        .iter()
        .map(|f| m.embed_tokens(std::slice::from_ref(f)).unwrap())
        .collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    assert_eq!(joint, Tensor::concat_rows(&refs).unwrap());
    assert_eq!(joint.rows(), cfg.tpf_long() + 2 * cfg.tpf_short());
}

#[test]
fn modulation_is_per_frame() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 8);
    let mut a = frame(&cfg, 0, 0.2, 1);
    let mut b = frame(&cfg, 1, 0.8, 2);
    a.action = Some(1);
    b.action = Some(1);
    let ada = m.modulation(&ForwardInput::new(vec![a.clone(), b.clone()]), 0).unwrap();
    assert_eq!(ada.shape(), &[2, 6 * cfg.hidden]);
    assert_ne!(ada.row(0), ada.row(1));
    b.t = 0.2;
    let ada = m.modulation(&ForwardInput::new(vec![a.clone(), b.clone()]), 1).unwrap();
    assert_eq!(ada.row(0), ada.row(1));
    // The clean sentinel gets its own row, distinct from any scheduler time.
    b.t = crate::schedule::SENTINEL_CLEAN;
    b.predict = false;
    let ada = m.modulation(&ForwardInput::new(vec![a, b]), 0).unwrap();
    assert_ne!(ada.row(0), ada.row(1));
}

#[test]
fn timestep_embedding_gradients_match_finite_differences() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 9);
    let input = ForwardInput::new(vec![
        frame(&cfg, 0, crate::schedule::SENTINEL_CLEAN, 1),
        frame(&cfg, 1, 0.35, 2),
    ]);
    let loss = |model: &FarModel<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &input, None, false).unwrap();
        let l = g.sum_squares(out.pred.unwrap());
        g.backward(l).unwrap();
        (g.scalar_value(l), g.param_grads(model.params()))
    };
    let (_, grads) = loss(&m);
    let h = 1e-5;
    let mut checked = 0;
    for name in ["t_embed.w1", "t_embed.b1", "t_embed.w2", "t_embed.b2", "t_embed.clean"] {
        let id = m.params().id(name).unwrap();
        let n = m.params().get(id).len();
        for k in [0, n / 3, n / 2, n - 1] {
            let mut plus = m.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = m.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
            let an = grads[id.0].data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-5, "{name}[{k}]: fd {fd} vs autodiff {an}");
            checked += 1;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn permuting_tokens_within_a_frame_permutes_outputs() {
    let cfg = tiny(false);
    let m = random_model(cfg.clone(), 10);
    let tpf = cfg.tpf_short();
    let frames = vec![frame(&cfg, 0, 0.3, 1), frame(&cfg, 1, 0.6, 2)];
    let base = {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &ForwardInput::new(frames.clone()), None, false).unwrap();
        g.value(out.pred.unwrap()).clone()
    };
    // Reverse the token order of both frames and move the spatial table rows with them.
    let perm: Vec<usize> = (0..tpf).rev().collect();
    let mut pm = m.clone();
    let pos_id = pm.params().id("pos.short").unwrap();
    let pos = pm.params().get(pos_id).clone();
    let mut frames_p = frames.clone();
    frames_p[1].tokens = Tensor::from_rows(
        &perm.iter().map(|&r| frames[1].tokens.row(r).to_vec()).collect::<Vec<_>>(),
    )
    .unwrap();
    frames_p[0].tokens = Tensor::from_rows(
        &perm.iter().map(|&r| frames[0].tokens.row(r).to_vec()).collect::<Vec<_>>(),
    )
    .unwrap();
    *pm.params_mut().get_mut(pos_id) =
        Tensor::from_rows(&perm.iter().map(|&r| pos.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
    let permuted = {
        let mut g = Graph::new();
        let out = pm.forward(&mut g, &ForwardInput::new(frames_p), None, false).unwrap();
        g.value(out.pred.unwrap()).clone()
    };
    for f in 0..2 {
        for (i, &r) in perm.iter().enumerate() {
            let a = base.row(f * tpf + r);
            let b = permuted.row(f * tpf + i);
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "frame {f} token {r}: {diff}");
        }
    }
}

#[test]
fn parameter_ladder_matches_reference_sizes() {
    for (name, want) in [("b", 130e6), ("m", 230e6), ("l", 457e6), ("xl", 674e6)] {
        let n = ModelConfig::preset(name).unwrap().param_count() as f64;
        assert!((n - want).abs() / want <= 0.05, "{name}: {n}");
    }
}

#[test]
fn long_variant_is_larger() {
    let c = ModelConfig::preset("b").unwrap();
    assert!(c.clone().with_tiers(true).param_count() > c.param_count());
    let m = FarModel::<f32>::new(tiny(true), 0).unwrap();
    assert_eq!(m.param_count(), tiny(true).param_count());
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = tiny(false);
    let m = FarModel::<f64>::new(cfg.clone(), 0).unwrap();
    assert!(m.velocity(&ForwardInput::new(vec![]), None).is_err());
    let mut bad = frame(&cfg, 0, 0.5, 0);
    bad.t = 1.5;
    assert!(m.velocity(&ForwardInput::new(vec![bad]), None).is_err());
    let lf = long_frame(&tiny(true), 0, 0);
    assert!(m.velocity(&ForwardInput::new(vec![lf]), None).is_err());
    let mut big = frame(&cfg, 0, 0.5, 0);
    big.index = cfg.max_frames;
    assert!(m.velocity(&ForwardInput::new(vec![big]), None).is_err());
    let mut wrong = frame(&cfg, 0, 0.5, 0);
    wrong.tokens = Tensor::zeros(&[3, 3]);
    assert!(matches!(
        m.velocity(&ForwardInput::new(vec![wrong]), None),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn forward_is_deterministic_across_execution_modes() {
    let cfg = tiny(true);
    let m = random_model(cfg.clone(), 11);
    let input = ForwardInput::new(vec![long_frame(&cfg, 0, 1), frame(&cfg, 1, 0.5, 2)]);
    let a = m.velocity(&input, None).unwrap();
    let b = m.clone().with_execution(Execution::Sequential).velocity(&input, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn spatial_tables_start_from_sincos() {
    let cfg = tiny(true);
    let m = FarModel::<f64>::new(cfg.clone(), 0).unwrap();
    let short = m.params().get(m.params().id("pos.short").unwrap());
    assert_eq!(short.data(), sincos_2d(4, 4, 64).as_slice());
    let long = m.params().get(m.params().id("pos.long").unwrap());
    assert_eq!(long.data(), sincos_2d(2, 2, 64).as_slice());
    // Row r, column c: first half encodes r, second half encodes c.
    let t = sincos_2d(2, 3, 8);
    assert_eq!(&t[8 * 5..8 * 5 + 4], sinusoidal(1.0, 4).as_slice());
    assert_eq!(&t[8 * 5 + 4..8 * 6], sinusoidal(2.0, 4).as_slice());
    // Odd halves are zero-padded.
    assert_eq!(sincos_2d(1, 1, 6).len(), 6);
}
