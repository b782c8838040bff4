use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{glorot_uniform, ForwardCtx, Mode, NormUpdate, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{NormStats, Tensor, Var};

/// Additive constant inside the square root of pooled standard deviations.
pub const STD_EPS: f64 = 1e-10;

/// Variance floor used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Affine layer `x W + b` with an optional ReLU.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, input, output), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![output]), true);
        Dense {
            weight,
            bias,
            activation,
            input,
            output,
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let width = ctx.graph.shape(x).last().copied().unwrap_or(0);
        if width != self.input {
            return Err(Error::shape(
                "dense",
                format!("expected width {}, got {:?}", self.input, ctx.graph.shape(x)),
            ));
        }
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        let y = ctx.graph.matmul(x, w)?;
        let y = ctx.graph.add_bias(y, b)?;
        match self.activation {
            Activation::Relu => ctx.graph.relu(y),
            Activation::None => Ok(y),
        }
    }
}

/// Per-feature normalization over the rows of a 2-D input.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![width], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![width]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![width]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![width], 1.0), false),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let stats = NormStats::Batch { eps: self.eps };
                let (y, batch) = ctx.graph.batch_norm(x, gamma, beta, stats)?;
                if let Some(stats) = batch {
                    ctx.record_norm(NormUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let stats = NormStats::Fixed {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                    eps: self.eps,
                };
                Ok(ctx.graph.batch_norm(x, gamma, beta, stats)?.0)
            }
        }
    }
}

/// Time-delay layer with current-step context: a per-frame affine map,
/// ReLU, then batch normalization over the frame axis.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub affine: Dense,
    pub norm: Option<BatchNorm>,
}

impl TdnnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let affine = Dense::new(store, rng, name, input, output, Activation::Relu);
        let norm = Some(BatchNorm::new(store, &format!("{name}.bn"), output));
        TdnnLayer { affine, norm }
    }

    pub fn output(&self) -> usize {
        self.affine.output
    }

    /// `x` holds one frame per row.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let y = self.affine.forward(ctx, x)?;
        match &self.norm {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// One direction of a gated recurrent unit:
///
/// ```text
/// z_t = σ(x_t W_z + h_{t−1} U_z + b_z)
/// r_t = σ(x_t W_r + h_{t−1} U_r + b_r)
/// h̃_t = tanh(x_t W_h + (r_t ⊙ h_{t−1}) U_h + b_h)
/// h_t = (1 − z_t) ⊙ h_{t−1} + z_t ⊙ h̃_t
/// ```
///
/// with `h_0 = 0`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut w = |gate: &str| store_weight(store, rng, &format!("{name}.w_{gate}"), input, hidden);
        let (w_z, w_r, w_h) = (w("z"), w("r"), w("h"));
        let mut u = |gate: &str| store_weight(store, rng, &format!("{name}.u_{gate}"), hidden, hidden);
        let (u_z, u_r, u_h) = (u("z"), u("r"), u("h"));
        let mut b = |gate: &str| store.add(format!("{name}.b_{gate}"), Tensor::zeros(vec![hidden]), true);
        let (b_z, b_r, b_h) = (b("z"), b("r"), b("h"));
        Gru {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            input,
            hidden,
        }
    }

    /// Run over `x` whose rows are `sequences × steps` frames, sequence-major.
    /// Returns hidden states in the same row layout.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var, steps: usize) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input || steps == 0 || shape[0] % steps != 0 {
            return Err(Error::shape(
                "gru",
                format!("input {shape:?} with {steps} steps and width {}", self.input),
            ));
        }
        let seqs = shape[0] / steps;
        let hidden = self.hidden;

        // Input projections for every frame at once, viewed as [seqs, steps, hidden].
        let project = |ctx: &mut ForwardCtx<'_>, w: ParamId, b: ParamId| -> Result<Var> {
            let (w, b) = (ctx.param(w), ctx.param(b));
            let p = ctx.graph.matmul(x, w)?;
            let p = ctx.graph.add_bias(p, b)?;
            ctx.graph.reshape(p, &[seqs, steps, hidden])
        };
        let xz = project(ctx, self.w_z, self.b_z)?;
        let xr = project(ctx, self.w_r, self.b_r)?;
        let xh = project(ctx, self.w_h, self.b_h)?;
        let (u_z, u_r, u_h) = (ctx.param(self.u_z), ctx.param(self.u_r), ctx.param(self.u_h));

        let g = &mut ctx.graph;
        let mut h = g.constant(Tensor::zeros(vec![seqs, hidden]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let hz = g.matmul(h, u_z)?;
            let xz_t = g.index_axis(xz, 1, t)?;
            let z = g.add(xz_t, hz)?;
            let z = g.sigmoid(z)?;

            let hr = g.matmul(h, u_r)?;
            let xr_t = g.index_axis(xr, 1, t)?;
            let r = g.add(xr_t, hr)?;
            let r = g.sigmoid(r)?;

            let rh = g.mul(r, h)?;
            let rh = g.matmul(rh, u_h)?;
            let xh_t = g.index_axis(xh, 1, t)?;
            let cand = g.add(xh_t, rh)?;
            let cand = g.tanh(cand)?;

            let delta = g.sub(cand, h)?;
            let step = g.mul(z, delta)?;
            h = g.add(h, step)?;
            states.push(h);
        }
        let out = g.stack(&states, 1)?;
        g.reshape(out, &[seqs * steps, hidden])
    }
}

fn store_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> ParamId {
    store.add(name, glorot_uniform(rng, fan_in, fan_out), true)
}

/// Bidirectional GRU; the backward direction runs on the time-reversed
/// sequence and its states are reversed back before concatenation.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: Gru,
    pub backward: Gru,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        BiGru {
            forward: Gru::new(store, rng, &format!("{name}.fwd"), input, hidden),
            backward: Gru::new(store, rng, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn output(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn run(&self, ctx: &mut ForwardCtx<'_>, x: Var, steps: usize) -> Result<Var> {
        let fwd = self.forward.forward(ctx, x, steps)?;
        let reversed = reverse_steps(ctx, x, steps)?;
        let bwd = self.backward.forward(ctx, reversed, steps)?;
        let bwd = reverse_steps(ctx, bwd, steps)?;
        ctx.graph.concat(&[fwd, bwd], 1)
    }
}

/// Reverse the time order inside each `steps`-row sequence.
pub fn reverse_steps(ctx: &mut ForwardCtx<'_>, x: Var, steps: usize) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    if steps == 0 || shape[0] % steps != 0 {
        return Err(Error::shape("reverse_steps", format!("{shape:?} by {steps}")));
    }
    let g = &mut ctx.graph;
    let v = g.reshape(x, &[shape[0] / steps, steps, shape[1]])?;
    let v = g.flip(v, 1)?;
    g.reshape(v, &shape)
}

/// Two-layer scoring MLP `z = Relu(h W0 + b0) W1` followed by a softmax over
/// the steps of each group.
#[derive(Clone, Debug)]
pub struct AttentionMlp {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub width: usize,
}

impl AttentionMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Self {
        AttentionMlp {
            w0: store_weight(store, rng, &format!("{name}.w0"), width, width),
            b0: store.add(format!("{name}.b0"), Tensor::zeros(vec![width]), true),
            w1: store_weight(store, rng, &format!("{name}.w1"), width, 1),
            width,
        }
    }

    /// One scalar score per row of `h[R×E]`, shape `R×1`.
    pub fn scores(&self, ctx: &mut ForwardCtx<'_>, h: Var) -> Result<Var> {
        let shape = ctx.graph.shape(h);
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::shape(
                "attention",
                format!("expected width {}, got {shape:?}", self.width),
            ));
        }
        let (w0, b0, w1) = (ctx.param(self.w0), ctx.param(self.b0), ctx.param(self.w1));
        let g = &mut ctx.graph;
        let hidden = g.matmul(h, w0)?;
        let hidden = g.add_bias(hidden, b0)?;
        let hidden = g.relu(hidden)?;
        g.matmul(hidden, w1)
    }

    /// Normalized weights `α[R×1]`; rows are split into consecutive groups of
    /// `group` steps and each group sums to one.
    pub fn weights(&self, ctx: &mut ForwardCtx<'_>, h: Var, group: usize) -> Result<Var> {
        let rows = ctx.graph.shape(h)[0];
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("attention", format!("{rows} rows in groups of {group}")));
        }
        let z = self.scores(ctx, h)?;
        let g = &mut ctx.graph;
        let z = g.reshape(z, &[rows / group, group])?;
        let alpha = g.softmax(z, 1)?;
        g.reshape(alpha, &[rows, 1])
    }
}

/// Weighted statistics pooling: `A_t = α_t h_t`, then the mean and
/// population standard deviation of `A` over each group of `group` rows,
/// concatenated. Output shape `(R / group) × 2E`.
pub fn weighted_stats_pool(ctx: &mut ForwardCtx<'_>, alpha: Var, h: Var, group: usize) -> Result<Var> {
    let weighted = weight_rows(ctx, alpha, h, group)?;
    stats_pool(ctx, weighted, group)
}

/// `A_t = α_t h_t` with validation that each group of weights sums to one.
pub fn weight_rows(ctx: &mut ForwardCtx<'_>, alpha: Var, h: Var, group: usize) -> Result<Var> {
    let (sa, sh) = (ctx.graph.shape(alpha), ctx.graph.shape(h));
    if sa.len() != 2 || sa[1] != 1 || sh.len() != 2 || sa[0] != sh[0] {
        return Err(Error::shape(
            "weighted_stats_pool",
            format!("weights {sa:?} do not match sequence {sh:?}"),
        ));
    }
    if group == 0 || sh[0] % group != 0 {
        return Err(Error::shape("weighted_stats_pool", format!("{} rows in groups of {group}", sh[0])));
    }
    for chunk in ctx.graph.value(alpha).data().chunks(group) {
        let total: f64 = chunk.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain {
                op: "weighted_stats_pool",
                detail: format!("weights sum to {total}"),
            });
        }
    }
    ctx.graph.scale_rows(h, alpha)
}

/// Unweighted statistics pooling over each group of `group` rows.
pub fn stats_pool(ctx: &mut ForwardCtx<'_>, h: Var, group: usize) -> Result<Var> {
    let shape = ctx.graph.shape(h).to_vec();
    if shape.len() != 2 || group == 0 || shape[0] % group != 0 {
        return Err(Error::shape("stats_pool", format!("{shape:?} in groups of {group}")));
    }
    let g = &mut ctx.graph;
    let seq = g.reshape(h, &[shape[0] / group, group, shape[1]])?;
    let (mean, std) = g.mean_std_axis(seq, 1, STD_EPS)?;
    g.concat(&[mean, std], 1)
}
