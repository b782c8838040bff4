//! Finite-difference verification of every layer and of the full H-vector
//! with its training loss.

use std::fmt::Write as _;

use hvector::layers::{
    grad_check_params, weighted_stats_pool, Activation, AttentionMlp, BatchNorm, BiGru, BlockError, Dense,
    ForwardCtx, Mode, ParamStore, TdnnLayer,
};
use hvector::models::{Model, ModelConfig, ModelKind, WindowSpec};
use hvector::tensor::{grad_check_many, Graph, Tensor, Var};
use hvector::training::bce_loss;
use hvector::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Deliberate mistakes used to confirm the checker notices them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Sigmoid backward returns `g·y` instead of `g·y·(1 − y)`.
    SigmoidBackward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRow {
    pub check: String,
    pub block: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<BlockRow>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Fixed-width table, one line per parameter block.
    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:<28} {:>12}  status\n", "check", "block", "max_rel_err");
        for r in &self.rows {
            let status = if r.passed { "ok" } else { "FAIL" };
            writeln!(out, "{:<12} {:<28} {:>12.3e}  {status}", r.check, r.block, r.max_rel_error)
                .expect("write to String");
        }
        out
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(y ⊙ probe)`: a scalar that depends on every output coordinate with a
/// different weight, so errors cannot cancel.
fn project(g: &mut Graph, y: Var, probe: &Tensor) -> Result<Var> {
    let p = g.constant(probe.clone());
    let prod = g.mul(y, p)?;
    Ok(g.sum(prod))
}

/// Check a layer built into `store`; the layer input is the trainable
/// entry `input` so its gradient is verified as well.
fn check_layer<F>(name: &str, store: &ParamStore, mode: Mode, out_shape: &[usize], seed: u64, f: F) -> Result<Vec<BlockRow>>
where
    F: Fn(&mut ForwardCtx<'_>, Var) -> Result<Var>,
{
    let probe = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), out_shape);
    let input = store.find("input").expect("input registered");
    let blocks = grad_check_params(store, mode, STEP, |ctx| {
        let x = ctx.param(input);
        let y = f(ctx, x)?;
        project(&mut ctx.graph, y, &probe)
    })?;
    Ok(rows(name, blocks))
}

fn rows(check: &str, blocks: Vec<BlockError>) -> Vec<BlockRow> {
    blocks
        .into_iter()
        .map(|b| BlockRow {
            check: check.into(),
            passed: b.max_rel_error < TOLERANCE,
            block: b.name,
            max_rel_error: b.max_rel_error,
        })
        .collect()
}

fn with_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("input", random_tensor(rng, shape), true);
    store
}

fn dense(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    let mut store = with_input(rng, &[6, 5]);
    let layer = Dense::new(&mut store, rng, "dense", 5, 4, Activation::Relu);
    // Nonzero biases keep pre-activations away from the ReLU kink.
    let b = store.find("dense.bias").expect("bias");
    *store.get_mut(b) = random_tensor(rng, &[4]);
    check_layer("dense", &store, Mode::Train, &[6, 4], 1, |ctx, x| layer.forward(ctx, x))
}

fn tdnn(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    let mut store = with_input(rng, &[7, 4]);
    let layer = TdnnLayer::new(&mut store, rng, "tdnn", 4, 5);
    check_layer("tdnn", &store, Mode::Train, &[7, 5], 2, |ctx, x| layer.forward(ctx, x))
}

fn bigru(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    // Two sequences of four steps.
    let mut store = with_input(rng, &[8, 3]);
    let layer = BiGru::new(&mut store, rng, "bigru", 3, 3);
    for entry in ["bigru.fwd.b_z", "bigru.fwd.b_h", "bigru.bwd.b_r"] {
        let id = store.find(entry).expect("gru bias");
        *store.get_mut(id) = random_tensor(rng, &[3]);
    }
    check_layer("bigru", &store, Mode::Train, &[8, 6], 3, |ctx, x| layer.run(ctx, x, 4))
}

fn attention_pool(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    // Two groups of five rows.
    let mut store = with_input(rng, &[10, 4]);
    let att = AttentionMlp::new(&mut store, rng, "attention", 4);
    let b0 = store.find("attention.b0").expect("b0");
    *store.get_mut(b0) = random_tensor(rng, &[4]);
    check_layer("attn_pool", &store, Mode::Train, &[2, 8], 4, |ctx, h| {
        let alpha = att.weights(ctx, h, 5)?;
        weighted_stats_pool(ctx, alpha, h, 5)
    })
}

fn batch_norm(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    let mut store = with_input(rng, &[6, 3]);
    let bn = BatchNorm::new(&mut store, "bn", 3);
    for name in ["bn.gamma", "bn.beta"] {
        let id = store.find(name).expect("bn param");
        *store.get_mut(id) = random_tensor(rng, &[3]);
    }
    check_layer("batch_norm", &store, Mode::Train, &[6, 3], 5, |ctx, x| bn.forward(ctx, x))
}

/// Sigmoid recorded through the custom-op interface with a hand-written
/// backward rule.
pub fn custom_sigmoid(g: &mut Graph, x: Var, fault: Option<Fault>) -> Var {
    let value = g.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
    g.custom(
        &[x],
        value,
        Box::new(move |_inputs, y, grad| {
            let dx: Vec<f64> = y
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&y, &g)| match fault {
                    Some(Fault::SigmoidBackward) => g * y,
                    None => g * y * (1.0 - y),
                })
                .collect();
            vec![Tensor::new(y.shape().to_vec(), dx).expect("shape")]
        }),
    )
}

fn sigmoid(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<Vec<BlockRow>> {
    let x = random_tensor(rng, &[3, 4]);
    let probe = random_tensor(rng, &[3, 4]);
    let errors = grad_check_many(
        |g, v| {
            let y = custom_sigmoid(g, v[0], fault);
            project(g, y, &probe)
        },
        &[x],
        STEP,
    )?;
    Ok(rows(
        "sigmoid",
        vec![BlockError {
            name: "input".into(),
            max_rel_error: errors[0],
        }],
    ))
}

/// Tiny H-vector: 4 features, 8-wide frame encoder, 3 speakers, windows of
/// 5 frames with step 3 over 8 frames so each utterance has 2 segments.
pub fn tiny_hvector_config() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::HVector,
        feature_dim: 4,
        frame_tdnn: 5,
        gru_hidden: 4,
        segment_tdnn: vec![6, 5, 4],
        dense: 4,
        num_speakers: 3,
        window: WindowSpec::sliding(5, 3),
    }
}

fn hvector_bce(rng: &mut ChaCha8Rng) -> Result<Vec<BlockRow>> {
    let model = Model::new(tiny_hvector_config(), 17)?;
    // Batch norm needs several utterances for non-degenerate statistics.
    let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(rng, &[8, 4])).collect();
    let labels = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 1., 1., 0., 1.])?;
    let blocks = grad_check_params(model.store(), Mode::Train, STEP, |ctx| {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let p = model.forward(ctx, &refs)?;
        bce_loss(&mut ctx.graph, p, &labels)
    })?;
    Ok(rows("h_vector", blocks))
}

/// Run every check. `fault` swaps in a broken backward rule.
pub fn run(fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut all = Vec::new();
    all.extend(dense(&mut rng)?);
    all.extend(tdnn(&mut rng)?);
    all.extend(bigru(&mut rng)?);
    all.extend(attention_pool(&mut rng)?);
    all.extend(batch_norm(&mut rng)?);
    all.extend(sigmoid(&mut rng, fault)?);
    all.extend(hvector_bce(&mut rng)?);
    let passed = all.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        step: STEP,
        tolerance: TOLERANCE,
        rows: all,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        let report = run(None).unwrap();
        assert!(report.passed, "\n{}", report.table());
        assert!(report.max_error() < TOLERANCE);
        for check in ["dense", "tdnn", "bigru", "attn_pool", "batch_norm", "sigmoid", "h_vector"] {
            assert!(report.rows.iter().any(|r| r.check == check), "missing {check}");
        }
        assert!(report.rows.iter().any(|r| r.block == "frame.gru.fwd.u_z"));
    }

    #[test]
    fn wrong_backward_is_caught() {
        let report = run(Some(Fault::SigmoidBackward)).unwrap();
        assert!(!report.passed);
        let failing: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
        assert_eq!(failing, ["sigmoid"]);
    }
}
