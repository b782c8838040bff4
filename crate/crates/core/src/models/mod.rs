//! Speaker-scoring networks: the hierarchical H-vector model and the
//! X-vector and attentive X-vector baselines.

mod checkpoint;
mod config;
mod net;

pub use config::{segment_frames, ModelConfig, ModelKind, SpeakerScores, WindowMode, WindowSpec};
pub use net::{Classifier, HVectorNet, Network, XVectorNet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{ForwardCtx, ParamStore};
use crate::par::{self, Execution};
use crate::tensor::{Tensor, Var};

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    net: Network,
}

impl Model {
    /// Build a model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &mut rng, &config);
        Ok(Model { config, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn hvector(&self) -> Option<&HVectorNet> {
        match &self.net {
            Network::HVector(net) => Some(net),
            Network::XVector(_) => None,
        }
    }

    /// Posteriors `[B×K]` for a batch of utterances `x_b[T_b×L]`. In
    /// training mode normalization statistics span the whole batch.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, utterances: &[&Tensor]) -> Result<Var> {
        self.net.forward(ctx, utterances)
    }

    /// Eval-mode scores for one utterance.
    pub fn predict(&self, x: &Tensor) -> Result<SpeakerScores> {
        let mut ctx = ForwardCtx::inference(&self.store);
        let p = self.forward(&mut ctx, &[x])?;
        Ok(SpeakerScores::from_probabilities(ctx.graph.value(p).data().to_vec()))
    }

    /// Eval-mode scores for many utterances, each run independently.
    pub fn predict_all(&self, utterances: &[Tensor], exec: Execution) -> Result<Vec<SpeakerScores>> {
        par::map(exec, utterances, |x| self.predict(x)).into_iter().collect()
    }

    /// Per-unit shapes at every stage of an eval-mode pass over `x`.
    pub fn trace(&self, x: &Tensor) -> Result<Vec<(String, Vec<usize>)>> {
        let mut ctx = ForwardCtx::inference(&self.store).with_trace();
        self.forward(&mut ctx, &[x])?;
        Ok(ctx.trace().to_vec())
    }
}

#[cfg(test)]
mod tests;
