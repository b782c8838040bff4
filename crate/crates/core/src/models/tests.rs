use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layers::{grad_check_params, ForwardCtx, Mode};
use crate::par::Execution;
use crate::tensor::{Graph, Tensor, Var};

fn tiny(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        feature_dim: 4,
        frame_tdnn: 5,
        gru_hidden: 4,
        segment_tdnn: vec![6, 5, 4],
        dense: 4,
        num_speakers: 3,
        window: WindowSpec::sliding(5, 3),
    }
}

fn random_utterance(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Tensor {
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![frames, dim], data).unwrap()
}

fn copy_by_name(dst: &mut Model, src: &Model) {
    for entry in src.store().entries() {
        if let Some(id) = dst.store().find(&entry.name) {
            *dst.store_mut().get_mut(id) = entry.tensor.clone();
        }
    }
}

fn set_param(model: &mut Model, name: &str, f: impl Fn(f64) -> f64) {
    let id = model.store().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = model.store().get(id).map(f);
    *model.store_mut().get_mut(id) = t;
}

fn bce(g: &mut Graph, p: Var, labels: &Tensor) -> Var {
    let y = g.constant(labels.clone());
    let one_minus_y = g.constant(labels.map(|v| 1.0 - v));
    let p = g.clamp(p, 1e-12, 1.0 - 1e-12);
    let log_p = g.log(p).unwrap();
    let q = g.mul_scalar(p, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.log(q).unwrap();
    let a = g.mul(y, log_p).unwrap();
    let b = g.mul(one_minus_y, log_q).unwrap();
    let s = g.add(a, b).unwrap();
    let s = g.sum(s);
    g.mul_scalar(s, -1.0)
}

#[test]
fn outputs_are_probabilities_for_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [ModelKind::HVector, ModelKind::XVector, ModelKind::AttXVector] {
        let model = Model::new(tiny(kind), 3).unwrap();
        let x = random_utterance(&mut rng, 17, 4);
        let scores = model.predict(&x).unwrap();
        assert_eq!(scores.len(), 3);
        assert!(scores.as_slice().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn full_size_shapes_follow_the_layer_table() {
    let model = Model::new(ModelConfig::full(ModelKind::HVector, 254), 0).unwrap();
    let x = Tensor::zeros(vec![500, 20]).map(|_| 0.1);
    let trace = model.trace(&x).unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("frame.input", vec![20, 20]),
        ("frame.tdnn", vec![20, 256]),
        ("frame.bigru", vec![20, 512]),
        ("frame.attention", vec![20, 512]),
        ("frame.pool", vec![1, 1024]),
        ("segment.input", vec![49, 1024]),
        ("segment.tdnn1", vec![49, 512]),
        ("segment.tdnn2", vec![49, 512]),
        ("segment.tdnn3", vec![49, 1500]),
        ("segment.attention", vec![49, 1500]),
        ("utterance.pool", vec![1, 3000]),
        ("utterance.dense", vec![1, 512]),
        ("utterance.output", vec![1, 254]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(s, v)| (s.as_str(), v.clone())).collect();
    assert_eq!(got, expected);
}

#[test]
fn too_short_utterance_is_rejected() {
    let model = Model::new(tiny(ModelKind::HVector), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(vec![4, 4])).is_err());
    assert!(model.predict(&Tensor::zeros(vec![8, 3])).is_err());
}

#[test]
fn segment_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(tiny(ModelKind::HVector), 11).unwrap();
    let net = model.hvector().unwrap();
    let segments: Vec<Tensor> = (0..4).map(|_| random_utterance(&mut rng, 5, 4)).collect();
    let run = |segs: Vec<Tensor>| {
        let mut ctx = ForwardCtx::inference(model.store());
        let p = net.forward_segments(&mut ctx, &[segs]).unwrap();
        ctx.graph.value(p).clone()
    };
    let base = run(segments.clone());
    for perm in [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1], [0, 2, 3, 1]] {
        let permuted = perm.iter().map(|&i| segments[i].clone()).collect();
        assert!(run(permuted).max_abs_diff(&base) < 1e-9);
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_utterance(&mut rng, 20, 4);
    for kind in [ModelKind::HVector, ModelKind::XVector, ModelKind::AttXVector] {
        let a = Model::new(tiny(kind), 5).unwrap();
        let b = Model::new(tiny(kind), 5).unwrap();
        assert_eq!(a.store(), b.store());
        assert_eq!(a.predict(&x).unwrap(), a.predict(&x).unwrap());
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }
}

#[test]
fn batched_eval_matches_single_utterances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = vec![random_utterance(&mut rng, 14, 4), random_utterance(&mut rng, 23, 4)];
    for kind in [ModelKind::HVector, ModelKind::XVector, ModelKind::AttXVector] {
        let model = Model::new(tiny(kind), 9).unwrap();
        let mut ctx = ForwardCtx::inference(model.store());
        let refs: Vec<&Tensor> = xs.iter().collect();
        let p = model.forward(&mut ctx, &refs).unwrap();
        let batched = ctx.graph.value(p).clone();
        for (i, x) in xs.iter().enumerate() {
            let single = model.predict(x).unwrap();
            for (a, b) in batched.row(i).iter().zip(single.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let seq = model.predict_all(&xs, Execution::Sequential).unwrap();
        let par = model.predict_all(&xs, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in [ModelKind::HVector, ModelKind::XVector, ModelKind::AttXVector] {
        let model = Model::new(tiny(kind), 13).unwrap();
        let xs: Vec<Tensor> = (0..4).map(|_| random_utterance(&mut rng, 11, 4)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let labels = Tensor::new(vec![4, 3], vec![1., 0., 0., 0., 1., 1., 0., 0., 1., 1., 1., 0.]).unwrap();
        let mut ctx = ForwardCtx::new(model.store(), Mode::Train);
        let p = model.forward(&mut ctx, &refs).unwrap();
        let loss = bce(&mut ctx.graph, p, &labels);
        ctx.graph.backward(loss).unwrap();
        let grads = ctx.param_grads();
        for (entry, grad) in model.store().entries().iter().zip(&grads) {
            if !entry.trainable {
                assert!(grad.is_none());
                continue;
            }
            let grad = grad.as_ref().unwrap_or_else(|| panic!("{kind}: {} unused", entry.name));
            assert!(
                grad.data().iter().any(|&g| g != 0.0),
                "{kind}: {} has zero gradient",
                entry.name
            );
        }
    }
}

#[test]
fn hvector_bce_composite_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = Model::new(tiny(ModelKind::HVector), 17).unwrap();
    // T = 8 frames gives N = 2 windows of M = 5 with step 3.
    let xs: Vec<Tensor> = (0..3).map(|_| random_utterance(&mut rng, 8, 4)).collect();
    let labels = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 1., 1., 0., 1.]).unwrap();
    let report = grad_check_params(model.store(), Mode::Train, 1e-5, |ctx| {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let p = model.forward(ctx, &refs)?;
        Ok(bce(&mut ctx.graph, p, &labels))
    })
    .unwrap();
    for block in &report {
        assert!(block.max_rel_error < 1e-4, "{}: {}", block.name, block.max_rel_error);
    }
}

#[test]
fn attentive_xvector_with_zero_scores_matches_xvector() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = 12;
    let x = random_utterance(&mut rng, frames, 4);
    let mut plain = Model::new(tiny(ModelKind::XVector), 1).unwrap();
    // Keep every top-layer unit active: a constant column pools to
    // sqrt(eps), which does not scale with the weights.
    set_param(&mut plain, "tdnn3.bias", |_| 5.0);
    let mut att = Model::new(tiny(ModelKind::AttXVector), 2).unwrap();
    copy_by_name(&mut att, &plain);
    set_param(&mut att, "attention.w1", |_| 0.0);
    // Uniform weights scale pooled statistics by 1/T; undo that in the head.
    set_param(&mut att, "dense.weight", |w| w * frames as f64);
    let a = att.predict(&x).unwrap();
    let b = plain.predict(&x).unwrap();
    for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((p - q).abs() < 1e-8, "{p} vs {q}");
    }
}

#[test]
fn single_window_hvector_is_an_xvector_over_segment_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = Model::new(tiny(ModelKind::HVector), 3).unwrap();
    let mut cfg = tiny(ModelKind::XVector);
    cfg.feature_dim = 2 * h.config().encoder_width();
    let mut x = Model::new(cfg, 4).unwrap();
    copy_by_name(&mut x, &h);

    let utt = random_utterance(&mut rng, 5, 4);
    let net = h.hvector().unwrap();
    let mut ctx = ForwardCtx::inference(h.store());
    let v = net.segment_vectors(&mut ctx, &[&utt]).unwrap();
    let v = ctx.graph.value(v).clone();

    let a = h.predict(&utt).unwrap();
    let b = x.predict(&v).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(tiny(ModelKind::HVector), 31).unwrap();
    set_param(&mut model, "dense.bn.running_var", |v| v * 1.5);
    model.save(dir.path()).unwrap();
    let loaded = Model::load(dir.path()).unwrap();
    assert_eq!(loaded.store(), model.store());
    assert_eq!(loaded.config(), model.config());
    assert!(Model::load_matching(dir.path(), model.config()).is_ok());
    assert!(Model::load_matching(dir.path(), &tiny(ModelKind::XVector)).is_err());

    let blob = dir.path().join("params.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
    assert!(Model::load(dir.path()).is_err());
}

#[test]
fn checkpoint_bytes_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Model::new(tiny(ModelKind::AttXVector), 8).unwrap().save(a.path()).unwrap();
    Model::new(tiny(ModelKind::AttXVector), 8).unwrap().save(b.path()).unwrap();
    for file in ["index.json", "params.bin"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn constant_input_gives_flat_pooled_std() {
    let model = Model::new(tiny(ModelKind::XVector), 2).unwrap();
    let net = match model.net() {
        Network::XVector(net) => net,
        Network::HVector(_) => unreachable!(),
    };
    let x = Tensor::full(vec![9, 4], 0.3);
    let mut ctx = ForwardCtx::inference(model.store());
    let mut h = ctx.input(x);
    for layer in &net.tdnn {
        h = layer.forward(&mut ctx, h).unwrap();
    }
    let pooled = crate::layers::stats_pool(&mut ctx, h, 9).unwrap();
    let pooled = ctx.graph.value(pooled);
    let width = pooled.cols() / 2;
    for &s in &pooled.data()[width..] {
        assert!(s <= 1e-5 + 1e-12);
    }
}
