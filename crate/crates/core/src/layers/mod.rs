//! Neural building blocks on top of the differentiation graph.
//!
//! Layers own no tensors; they hold [`ParamId`]s into a [`ParamStore`] and
//! bind them into the graph of a [`ForwardCtx`] when run.

mod blocks;
mod params;

pub use blocks::{
    reverse_steps, stats_pool, weight_rows, weighted_stats_pool, Activation, AttentionMlp, BatchNorm,
    BiGru, Dense, Gru, TdnnLayer, BN_EPS, STD_EPS,
};
pub use params::{
    apply_norm_updates, glorot_uniform, ForwardCtx, Mode, NormUpdate, ParamEntry, ParamId, ParamStore,
};

use crate::error::Result;
use crate::tensor::{relative_error, Var};

/// Maximum relative gradient error for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

/// Check the analytic gradient of a scalar forward pass with respect to
/// every trainable tensor of `store` against central differences.
pub fn grad_check_params<F>(store: &ParamStore, mode: Mode, h: f64, f: F) -> Result<Vec<BlockError>>
where
    F: Fn(&mut ForwardCtx<'_>) -> Result<Var>,
{
    let mut ctx = ForwardCtx::new(store, mode);
    let out = f(&mut ctx)?;
    ctx.graph.backward(out)?;
    let grads = ctx.param_grads();
    drop(ctx);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = ForwardCtx::new(s, mode);
        let out = f(&mut ctx)?;
        Ok(ctx.graph.value(out).data()[0])
    };

    let mut work = store.clone();
    let mut report = Vec::new();
    for id in store.ids() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..entry.tensor.len() {
            let orig = entry.tensor.data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.push(BlockError {
            name: entry.name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
