use rand::Rng;

use super::config::{segment_frames, ModelConfig, ModelKind, WindowSpec};
use crate::error::{Error, Result};
use crate::layers::{
    stats_pool, weight_rows, Activation, AttentionMlp, BatchNorm, BiGru, Dense, ForwardCtx,
    ParamStore, TdnnLayer,
};
use crate::tensor::{Tensor, Var};

/// Utterance-level head: dense ReLU layer with batch normalization, then a
/// K-way affine map and an element-wise sigmoid.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: Dense,
    pub norm: BatchNorm,
    pub output: Dense,
}

impl Classifier {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, input: usize, cfg: &ModelConfig) -> Self {
        Classifier {
            hidden: Dense::new(store, rng, "dense", input, cfg.dense, Activation::Relu),
            norm: BatchNorm::new(store, "dense.bn", cfg.dense),
            output: Dense::new(store, rng, "output", cfg.dense, cfg.num_speakers, Activation::None),
        }
    }

    /// `v[B×input]` to posteriors `[B×K]`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, v: Var) -> Result<Var> {
        let units = ctx.graph.shape(v)[0];
        let y = self.hidden.forward(ctx, v)?;
        let y = self.norm.forward(ctx, y)?;
        record(ctx, "utterance.dense", y, units);
        let y = self.output.forward(ctx, y)?;
        let p = ctx.graph.sigmoid(y)?;
        record(ctx, "utterance.output", p, units);
        Ok(p)
    }
}

/// Hierarchical attention network: a frame-level encoder turns each window
/// into a segment vector, a segment-level encoder turns the sequence of
/// segment vectors into one utterance vector.
#[derive(Clone, Debug)]
pub struct HVectorNet {
    pub frame_tdnn: TdnnLayer,
    pub gru: BiGru,
    pub gru_norm: BatchNorm,
    pub frame_attention: AttentionMlp,
    pub segment_tdnn: Vec<TdnnLayer>,
    pub segment_attention: AttentionMlp,
    pub classifier: Classifier,
    pub window: WindowSpec,
}

impl HVectorNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let frame_tdnn = TdnnLayer::new(store, rng, "frame.tdnn", cfg.feature_dim, cfg.frame_tdnn);
        let gru = BiGru::new(store, rng, "frame.gru", cfg.frame_tdnn, cfg.gru_hidden);
        let e = gru.output();
        let gru_norm = BatchNorm::new(store, "frame.gru.bn", e);
        let frame_attention = AttentionMlp::new(store, rng, "frame.attention", e);
        let segment_tdnn = tdnn_stack(store, rng, 2 * e, &cfg.segment_tdnn);
        let top = *cfg.segment_tdnn.last().expect("validated");
        let segment_attention = AttentionMlp::new(store, rng, "segment.attention", top);
        let classifier = Classifier::new(store, rng, 2 * top, cfg);
        HVectorNet {
            frame_tdnn,
            gru,
            gru_norm,
            frame_attention,
            segment_tdnn,
            segment_attention,
            classifier,
            window: cfg.window,
        }
    }

    /// Segment vectors `V_S[G×2E]` for `G` windows of `M` frames each.
    pub fn segment_vectors(&self, ctx: &mut ForwardCtx<'_>, segments: &[&Tensor]) -> Result<Var> {
        let m = self.window.length;
        if segments.is_empty() {
            return Err(Error::shape("h_vector", "no segments"));
        }
        if let Some(bad) = segments.iter().find(|s| s.shape().len() != 2 || s.rows() != m) {
            return Err(Error::shape(
                "h_vector",
                format!("segments must have {m} frames, got {:?}", bad.shape()),
            ));
        }
        let units = segments.len();
        let x = ctx.input(stack_rows(segments)?);
        record(ctx, "frame.input", x, units);
        let h = self.frame_tdnn.forward(ctx, x)?;
        record(ctx, "frame.tdnn", h, units);
        let h = self.gru.run(ctx, h, m)?;
        let h = self.gru_norm.forward(ctx, h)?;
        record(ctx, "frame.bigru", h, units);
        let alpha = self.frame_attention.weights(ctx, h, m)?;
        let a = weight_rows(ctx, alpha, h, m)?;
        record(ctx, "frame.attention", a, units);
        let v = stats_pool(ctx, a, m)?;
        record(ctx, "frame.pool", v, units);
        Ok(v)
    }

    /// Posteriors `[B×K]` for utterances given as lists of windows.
    pub fn forward_segments(&self, ctx: &mut ForwardCtx<'_>, utterances: &[Vec<Tensor>]) -> Result<Var> {
        let counts: Vec<usize> = utterances.iter().map(Vec::len).collect();
        if counts.iter().any(|&n| n == 0) {
            return Err(Error::shape("h_vector", "utterance without segments"));
        }
        let segments: Vec<&Tensor> = utterances.iter().flatten().collect();
        let v = self.segment_vectors(ctx, &segments)?;
        self.utterance_scores(ctx, v, &counts)
    }

    /// Segment-level encoder and classifier over segment vectors `v`, whose
    /// rows are grouped into utterances of `counts[b]` segments.
    pub fn utterance_scores(&self, ctx: &mut ForwardCtx<'_>, v: Var, counts: &[usize]) -> Result<Var> {
        let b = counts.len();
        let mut s = v;
        record_first(ctx, "segment.input", s, counts);
        for (i, layer) in self.segment_tdnn.iter().enumerate() {
            s = layer.forward(ctx, s)?;
            record_first(ctx, &format!("segment.tdnn{}", i + 1), s, counts);
        }
        let attention = &self.segment_attention;
        let u = pool_groups(ctx, s, counts, |ctx, h, n| {
            let alpha = attention.weights(ctx, h, n)?;
            let a = weight_rows(ctx, alpha, h, n)?;
            record_group(ctx, "segment.attention", a, n);
            stats_pool(ctx, a, n)
        })?;
        record(ctx, "utterance.pool", u, b);
        self.classifier.forward(ctx, u)
    }
}

/// X-vector baseline, optionally with one global attention over frames.
#[derive(Clone, Debug)]
pub struct XVectorNet {
    pub tdnn: Vec<TdnnLayer>,
    pub attention: Option<AttentionMlp>,
    pub classifier: Classifier,
}

impl XVectorNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, attentive: bool) -> Self {
        let tdnn = tdnn_stack(store, rng, cfg.feature_dim, &cfg.segment_tdnn);
        let top = *cfg.segment_tdnn.last().expect("validated");
        let attention = attentive.then(|| AttentionMlp::new(store, rng, "attention", top));
        let classifier = Classifier::new(store, rng, 2 * top, cfg);
        XVectorNet {
            tdnn,
            attention,
            classifier,
        }
    }

    /// Posteriors `[B×K]` for whole utterances `x_b[T_b×L]`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, utterances: &[&Tensor]) -> Result<Var> {
        if utterances.is_empty() {
            return Err(Error::shape("x_vector", "empty batch"));
        }
        let lengths: Vec<usize> = utterances.iter().map(|x| x.rows()).collect();
        if lengths.contains(&0) {
            return Err(Error::shape("x_vector", "utterance without frames"));
        }
        let mut h = ctx.input(stack_rows(utterances)?);
        record_first(ctx, "frame.input", h, &lengths);
        for (i, layer) in self.tdnn.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            record_first(ctx, &format!("frame.tdnn{}", i + 1), h, &lengths);
        }
        let u = match &self.attention {
            Some(att) => pool_groups(ctx, h, &lengths, |ctx, h, n| {
                let alpha = att.weights(ctx, h, n)?;
                let a = weight_rows(ctx, alpha, h, n)?;
                record_group(ctx, "frame.attention", a, n);
                stats_pool(ctx, a, n)
            })?,
            None => pool_groups(ctx, h, &lengths, stats_pool)?,
        };
        record(ctx, "utterance.pool", u, utterances.len());
        self.classifier.forward(ctx, u)
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    HVector(HVectorNet),
    XVector(XVectorNet),
}

impl Network {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        match cfg.kind {
            ModelKind::HVector => Network::HVector(HVectorNet::new(store, rng, cfg)),
            ModelKind::XVector => Network::XVector(XVectorNet::new(store, rng, cfg, false)),
            ModelKind::AttXVector => Network::XVector(XVectorNet::new(store, rng, cfg, true)),
        }
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, utterances: &[&Tensor]) -> Result<Var> {
        match self {
            Network::HVector(net) => {
                let segments = utterances
                    .iter()
                    .map(|x| segment_frames(x, &net.window))
                    .collect::<Result<Vec<_>>>()?;
                net.forward_segments(ctx, &segments)
            }
            Network::XVector(net) => net.forward(ctx, utterances),
        }
    }
}

fn tdnn_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    input: usize,
    widths: &[usize],
) -> Vec<TdnnLayer> {
    let mut prev = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let layer = TdnnLayer::new(store, rng, &format!("tdnn{}", i + 1), prev, w);
            prev = w;
            layer
        })
        .collect()
}

/// Pool consecutive row groups of sizes `lens`. Equal sizes go through one
/// reshaped call; ragged ones are sliced apart and concatenated.
fn pool_groups<F>(ctx: &mut ForwardCtx<'_>, h: Var, lens: &[usize], pool: F) -> Result<Var>
where
    F: Fn(&mut ForwardCtx<'_>, Var, usize) -> Result<Var>,
{
    let total: usize = lens.iter().sum();
    if ctx.graph.shape(h)[0] != total {
        return Err(Error::shape("pool", format!("{:?} rows vs groups {lens:?}", ctx.graph.shape(h))));
    }
    if lens.iter().all(|&n| n == lens[0]) {
        return pool(ctx, h, lens[0]);
    }
    let mut parts = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &n in lens {
        let part = ctx.graph.slice_rows(h, start, n)?;
        parts.push(pool(ctx, part, n)?);
        start += n;
    }
    ctx.graph.concat(&parts, 0)
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut rows = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.shape().len() != 2 || p.cols() != cols {
            return Err(Error::shape(
                "stack_rows",
                format!("expected width {cols}, got {:?}", p.shape()),
            ));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Trace the shape of one unit out of `units` equal row blocks.
fn record(ctx: &mut ForwardCtx<'_>, stage: &str, v: Var, units: usize) {
    let shape = ctx.graph.shape(v);
    let unit = vec![shape[0] / units.max(1), shape[1]];
    ctx.record(stage, &unit);
}

/// Trace one `group`-row block the first time `stage` is seen.
fn record_group(ctx: &mut ForwardCtx<'_>, stage: &str, v: Var, group: usize) {
    if ctx.trace().iter().all(|(s, _)| s != stage) {
        let cols = ctx.graph.shape(v)[1];
        ctx.record(stage, &[group, cols]);
    }
}

/// Trace the shape of the first utterance's block of rows.
fn record_first(ctx: &mut ForwardCtx<'_>, stage: &str, v: Var, lens: &[usize]) {
    let cols = ctx.graph.shape(v)[1];
    ctx.record(stage, &[lens[0], cols]);
}
