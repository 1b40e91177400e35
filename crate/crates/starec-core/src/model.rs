//! Full model assembly: parameter layout, label-as-input handling, and
//! the end-to-end forward pass from a retrieved context to a click
//! probability.
//!
//! Three independent recurrent networks encode the recent half, the
//! searched half, and similar-user sequences; the target item is
//! appended as the final position of every encoded sequence so each
//! network sees the elapsed time between its own last event and the
//! prediction time (for the searched half that gap is the time since
//! the last same-category event, which carries the periodicity signal).

use crate::data::Interaction;
use crate::encoder::{EncoderError, FieldEmbeddings};
use crate::fusion::{aggregate_sequence, AggWeights, MlpWeights};
use crate::params::{ParamId, ParameterStore};
use crate::search::{RetrievedContext, SearchConfig, SimilarUser};
use crate::sequence::{encode_sequence, DecayMode, SeqStep, SequenceError, TrnnWeights};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint shape mismatch for {0}")]
    ShapeMismatch(String),
}

/// Ablation switches. All on = the full model; `use_search` and
/// `use_time_decay` both off = a plain recurrent baseline over the
/// recent window.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VariantFlags {
    pub use_time_decay: bool,
    pub use_recent_half: bool,
    pub use_label_trick: bool,
    pub use_search: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_time_decay: true,
            use_recent_half: true,
            use_label_trick: false,
            use_search: true,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub decay: DecayMode,
    pub flags: VariantFlags,
    pub search: SearchConfig,
    pub mlp_hidden: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 32,
            dropout: 0.5,
            decay: DecayMode::Reciprocal,
            flags: VariantFlags::default(),
            search: SearchConfig::default(),
            mlp_hidden: (128, 64),
        }
    }
}

impl ModelConfig {
    /// Search configuration after applying variant flags and the
    /// current annealed temperature.
    pub fn effective_search(&self, tau: f64) -> SearchConfig {
        let mut s = self.search.clone();
        s.tau = tau;
        s.iota = tau;
        if !self.flags.use_recent_half {
            s.recent_fraction = 0.0;
        }
        if !self.flags.use_search {
            // recent events fill the whole budget; no similar users
            s.recent_fraction = 1.0;
            s.n_similar_users = 0;
        }
        s
    }

    pub fn mlp_input_width(&self) -> usize {
        (2 + self.search.n_similar_users) * self.hidden_dim
    }
}

/// Label value attached to a history event when it reaches the label
/// input channel.
#[derive(Debug, Clone, Copy)]
pub enum LabelVal {
    Observed(u8),
    /// Feedback not logged yet (delayed feedback at serving time).
    Missing,
    /// Model-imputed probability; embeds as p*y(1) + (1-p)*y(0).
    Imputed(f64),
}

/// Where history labels come from during a forward pass.
pub enum LabelChannel<'a> {
    /// Each event's own logged label.
    Observed,
    /// Per (item, timestamp) overrides for missing/imputed labels.
    WithOverrides(&'a HashMap<(u32, u64), LabelVal>),
}

impl LabelChannel<'_> {
    fn resolve(&self, e: &Interaction) -> LabelVal {
        match self {
            LabelChannel::Observed => LabelVal::Observed(e.label),
            LabelChannel::WithOverrides(map) => map
                .get(&(e.item_id, e.timestamp))
                .copied()
                .unwrap_or(LabelVal::Observed(e.label)),
        }
    }
}

/// Randomness frozen before a forward pass so the identical computation
/// can be replayed (gradient checks re-evaluate the same plan).
#[derive(Debug, Clone)]
pub struct NoisePlan {
    /// Random stand-in label for the target position.
    pub target_label: u8,
    /// Inverted-dropout mask for the fusion-MLP input, absent at eval.
    pub dropout_mask: Option<Vec<f64>>,
}

impl NoisePlan {
    pub fn eval_default() -> Self {
        NoisePlan {
            target_label: 0,
            dropout_mask: None,
        }
    }
}

const LABEL_ROW_UNKNOWN: usize = 2;

pub struct Model {
    pub store: ParameterStore,
    pub cfg: ModelConfig,
    pub user_encoder: FieldEmbeddings,
    pub item_encoder: FieldEmbeddings,
    /// 3 x embed_dim: rows for label 0, label 1, unknown.
    pub label_table: ParamId,
    pub trnn_recent: TrnnWeights,
    pub trnn_searched: TrnnWeights,
    pub trnn_similar: TrnnWeights,
    pub agg_recent: AggWeights,
    pub agg_searched: AggWeights,
    pub agg_similar: AggWeights,
    pub mlp: MlpWeights,
}

impl Model {
    pub fn init(cfg: ModelConfig, user_vocab: &[usize], item_vocab: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let user_encoder = FieldEmbeddings::init(&mut store, "user", user_vocab, d, &mut rng);
        let item_encoder = FieldEmbeddings::init(&mut store, "item", item_vocab, d, &mut rng);
        let label_table = store
            .add_embedding("label.table", 3, d, &mut rng)
            .expect("unique parameter names");
        let in_dim = 2 * d; // [item embedding, label embedding]
        let trnn_recent = TrnnWeights::init(&mut store, "seq.recent", in_dim, h, &mut rng);
        let trnn_searched = TrnnWeights::init(&mut store, "seq.searched", in_dim, h, &mut rng);
        let trnn_similar = TrnnWeights::init(&mut store, "seq.similar", in_dim, h, &mut rng);
        let agg_recent = AggWeights::init(&mut store, "agg.recent", h, &mut rng);
        let agg_searched = AggWeights::init(&mut store, "agg.searched", h, &mut rng);
        let agg_similar = AggWeights::init(&mut store, "agg.similar", h, &mut rng);
        let mlp = MlpWeights::init(
            &mut store,
            "mlp",
            cfg.mlp_input_width(),
            cfg.mlp_hidden.0,
            cfg.mlp_hidden.1,
            &mut rng,
        );
        Model {
            store,
            cfg,
            user_encoder,
            item_encoder,
            label_table,
            trnn_recent,
            trnn_searched,
            trnn_similar,
            agg_recent,
            agg_searched,
            agg_similar,
            mlp,
        }
    }

    /// Copy parameter values from a loaded checkpoint into this model's
    /// store (names and shapes must match).
    pub fn restore_from(&mut self, loaded: &ParameterStore) -> Result<(), ModelError> {
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            let src = loaded
                .lookup(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if loaded.value(src).shape() != self.store.value(id).shape() {
                return Err(ModelError::ShapeMismatch(name));
            }
            *self.store.value_mut(id) = loaded.value(src).clone();
        }
        Ok(())
    }

    /// Fresh noise for one forward pass.
    pub fn draw_noise<R: Rng>(&self, rng: &mut R, training: bool) -> NoisePlan {
        let target_label = rng.random_range(0..2u8);
        let dropout_mask = if training && self.cfg.dropout > 0.0 {
            let keep = 1.0 - self.cfg.dropout;
            Some(
                (0..self.cfg.mlp_input_width())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };
        NoisePlan {
            target_label,
            dropout_mask,
        }
    }

    fn label_node(
        &self,
        tape: &mut Tape,
        val: LabelVal,
    ) -> Result<NodeId, ModelError> {
        if !self.cfg.flags.use_label_trick {
            return Ok(tape.param_row(&self.store, self.label_table, LABEL_ROW_UNKNOWN)?);
        }
        Ok(match val {
            LabelVal::Observed(y) => tape.param_row(&self.store, self.label_table, y as usize)?,
            LabelVal::Missing => tape.param_row(&self.store, self.label_table, LABEL_ROW_UNKNOWN)?,
            LabelVal::Imputed(p) => {
                let y1 = tape.param_row(&self.store, self.label_table, 1)?;
                let y0 = tape.param_row(&self.store, self.label_table, 0)?;
                let a = tape.scale_const(y1, p);
                let b = tape.scale_const(y0, 1.0 - p);
                tape.add(a, b)?
            }
        })
    }

    fn target_label_node(&self, tape: &mut Tape, noise: &NoisePlan) -> Result<NodeId, ModelError> {
        if self.cfg.flags.use_label_trick {
            // randomized stand-in, resampled every forward pass
            Ok(tape.param_row(&self.store, self.label_table, noise.target_label as usize)?)
        } else {
            Ok(tape.param_row(&self.store, self.label_table, LABEL_ROW_UNKNOWN)?)
        }
    }

    /// Build the [item, label] step list for one sequence: the real
    /// events in order, then the target as the final position.
    fn sequence_steps(
        &self,
        tape: &mut Tape,
        events: &[Option<Interaction>],
        target: &Interaction,
        labels: &LabelChannel,
        noise: &NoisePlan,
    ) -> Result<Vec<SeqStep>, ModelError> {
        let mut steps = Vec::new();
        let mut prev_ts: Option<u64> = None;
        for e in events.iter().flatten() {
            let emb = self
                .item_encoder
                .encode(tape, &self.store, &e.item_features)?;
            let y = self.label_node(tape, labels.resolve(e))?;
            let input = tape.concat(&[emb, y])?;
            let dt = match prev_ts {
                Some(p) => e.timestamp.saturating_sub(p),
                None => 1,
            };
            prev_ts = Some(e.timestamp);
            steps.push(SeqStep { input, dt });
        }
        let emb = self
            .item_encoder
            .encode(tape, &self.store, &target.item_features)?;
        let y = self.target_label_node(tape, noise)?;
        let input = tape.concat(&[emb, y])?;
        let dt = match prev_ts {
            Some(p) => target.timestamp.saturating_sub(p),
            None => 1,
        };
        steps.push(SeqStep { input, dt });
        Ok(steps)
    }

    fn encode_and_pool(
        &self,
        tape: &mut Tape,
        trnn: &TrnnWeights,
        agg: &AggWeights,
        steps: &[SeqStep],
    ) -> Result<NodeId, ModelError> {
        let hs = encode_sequence(
            tape,
            &self.store,
            trnn,
            self.cfg.hidden_dim,
            steps,
            self.cfg.flags.use_time_decay,
            self.cfg.decay,
        )?;
        Ok(aggregate_sequence(
            tape,
            &self.store,
            agg,
            self.cfg.hidden_dim,
            &hs,
        )?)
    }

    /// Pre-sigmoid logit for one (user, target) context.
    pub fn predict_logit(
        &self,
        tape: &mut Tape,
        ctx: &RetrievedContext,
        labels: &LabelChannel,
        noise: &NoisePlan,
        training: bool,
    ) -> Result<NodeId, ModelError> {
        let recent_steps = self.sequence_steps(tape, &ctx.recent, &ctx.target, labels, noise)?;
        let e_recent = self.encode_and_pool(tape, &self.trnn_recent, &self.agg_recent, &recent_steps)?;

        let searched_steps =
            self.sequence_steps(tape, &ctx.searched, &ctx.target, labels, noise)?;
        let e_searched =
            self.encode_and_pool(tape, &self.trnn_searched, &self.agg_searched, &searched_steps)?;

        let mut parts = vec![e_recent, e_searched];
        for slot in 0..self.cfg.search.n_similar_users {
            let node = match ctx.similar.get(slot).and_then(|s| s.as_ref()) {
                Some(SimilarUser { items, .. }) => {
                    let steps = self.sequence_steps(tape, items, &ctx.target, labels, noise)?;
                    self.encode_and_pool(tape, &self.trnn_similar, &self.agg_similar, &steps)?
                }
                None => tape.input(Tensor::zeros(&[self.cfg.hidden_dim])),
            };
            parts.push(node);
        }
        let mut x = tape.concat(&parts)?;
        if training {
            if let Some(mask) = &noise.dropout_mask {
                x = tape.dropout_with_mask(x, mask)?;
            }
        }
        Ok(self.mlp.logit(tape, &self.store, x)?)
    }

    /// Click probability in (0,1), evaluation mode (no dropout).
    pub fn predict_proba(
        &self,
        ctx: &RetrievedContext,
        labels: &LabelChannel,
        noise: &NoisePlan,
    ) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let z = self.predict_logit(&mut tape, ctx, labels, noise, false)?;
        Ok(proba_from_logit(tape.value(z).as_scalar()))
    }
}

/// Sigmoid clamped away from exactly 0 and 1 so downstream log losses
/// stay finite.
pub fn proba_from_logit(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(1e-12, 1.0 - 1e-12)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::search::EmbeddingView;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    pub(crate) fn tiny_view(model: &Model) -> EmbeddingView<'_> {
        EmbeddingView {
            store: &model.store,
            item_encoder: &model.item_encoder,
            user_encoder: &model.user_encoder,
        }
    }

    impl Model {
        /// Small model plus a compatible synthetic dataset for unit tests.
        pub(crate) fn tiny_fixture(n_items: u32, n_cats: u32) -> (Model, Dataset) {
            let mut spec = SyntheticSpec::periodic(6, 24, n_cats, 42);
            spec.n_items = n_items;
            let ds = generate_synthetic(&spec).unwrap();
            let cfg = ModelConfig {
                embed_dim: 4,
                hidden_dim: 4,
                dropout: 0.0,
                search: SearchConfig {
                    seq_len: 6,
                    n_similar_users: 1,
                    ..Default::default()
                },
                mlp_hidden: (8, 4),
                ..Default::default()
            };
            let model = Model::init(
                cfg,
                &[8],
                &[n_cats as usize, n_items as usize],
                7,
            );
            (model, ds)
        }
    }

    #[test]
    fn label_blind_predictions_are_deterministic() {
        use crate::data::temporal_split;
        use crate::search::{build_context, UserSearchIndex};
        let (model, ds) = Model::tiny_fixture(20, 4);
        let index = UserSearchIndex::build(&ds);
        let view = tiny_view(&model);
        let split = temporal_split(&ds);
        let ctx = build_context(
            &ds,
            &index,
            split.split.train[0],
            &model.cfg.effective_search(0.99),
            &view,
        );
        let p1 = model
            .predict_proba(&ctx, &LabelChannel::Observed, &NoisePlan::eval_default())
            .unwrap();
        let p2 = model
            .predict_proba(&ctx, &LabelChannel::Observed, &NoisePlan::eval_default())
            .unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits());
        assert!(p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn padded_similar_slots_feed_zero_vectors() {
        use crate::data::temporal_split;
        use crate::search::{build_context, UserSearchIndex};
        let (mut model, ds) = Model::tiny_fixture(20, 4);
        model.cfg.search.n_similar_users = 1;
        let index = UserSearchIndex::build(&ds);
        let view = EmbeddingView {
            store: &model.store,
            item_encoder: &model.item_encoder,
            user_encoder: &model.user_encoder,
        };
        let split = temporal_split(&ds);
        let mut ctx = build_context(
            &ds,
            &index,
            split.split.train[0],
            &model.cfg.effective_search(0.99),
            &view,
        );
        // force-pad the similar slot; prediction still works
        ctx.similar = vec![None];
        let p = model
            .predict_proba(&ctx, &LabelChannel::Observed, &NoisePlan::eval_default())
            .unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn restore_from_checkpoint_roundtrip() {
        let (model, _) = Model::tiny_fixture(12, 3);
        let mut buf = Vec::new();
        model.store.save_checkpoint(&mut buf).unwrap();
        let loaded = ParameterStore::load_checkpoint(buf.as_slice()).unwrap();
        let (mut fresh, _) = Model::tiny_fixture(12, 3);
        // perturb then restore
        for id in fresh.store.ids() {
            for v in fresh.store.value_mut(id).data_mut() {
                *v += 1.0;
            }
        }
        fresh.restore_from(&loaded).unwrap();
        for id in model.store.ids() {
            let other = fresh.store.lookup(model.store.name(id)).unwrap();
            for (a, b) in model
                .store
                .value(id)
                .data()
                .iter()
                .zip(fresh.store.value(other).data())
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
