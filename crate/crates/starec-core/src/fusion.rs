//! Sequence aggregation and the final prediction head.
//!
//! Each encoded sequence collapses to one embedding through attention
//! pooling: `e = sigmoid(W_m (sum_t alpha_t (W_t h_t)) + b_m)` with
//! `alpha` a softmax over per-position logits `h_t . w_alpha`. The
//! personal recent/searched embeddings and the similar-user embeddings
//! (score order, zero vectors in padded slots) are concatenated and fed
//! through a two-hidden-layer rectifier MLP ending in a sigmoid.

use crate::params::{ParamId, ParameterStore};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::Rng;

/// Attention-pooling weights for one sequence kind.
#[derive(Debug, Clone)]
pub struct AggWeights {
    pub w_alpha: ParamId,
    pub w_t: ParamId,
    pub w_m: ParamId,
    pub b_m: ParamId,
}

impl AggWeights {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        AggWeights {
            w_alpha: store
                .add_fan_scaled(&format!("{prefix}.w_alpha"), &[hidden], rng)
                .expect("unique parameter names"),
            // attention pooling averages the sequence, which shrinks
            // task-to-task differences well below the activation scale;
            // the gain restores them
            w_t: store
                .add_fan_scaled_gain(&format!("{prefix}.w_t"), &[hidden, hidden], 3.0, rng)
                .expect("unique parameter names"),
            w_m: store
                .add_fan_scaled_gain(&format!("{prefix}.w_m"), &[hidden, hidden], 3.0, rng)
                .expect("unique parameter names"),
            b_m: store
                .add_zeros(&format!("{prefix}.b_m"), &[hidden])
                .expect("unique parameter names"),
        }
    }
}

/// Pool per-position hidden states into one sequence embedding. An
/// empty sequence (every position masked) yields a zero vector.
pub fn aggregate_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    w: &AggWeights,
    hidden: usize,
    states: &[NodeId],
) -> Result<NodeId, TapeError> {
    if states.is_empty() {
        return Ok(tape.input(Tensor::zeros(&[hidden])));
    }
    let w_alpha = tape.param(store, w.w_alpha);
    let mut logits = Vec::with_capacity(states.len());
    for &h in states {
        logits.push(tape.dot(h, w_alpha)?);
    }
    let logit_vec = tape.concat(&logits)?;
    let alpha = tape.softmax(logit_vec);

    let w_t = tape.param(store, w.w_t);
    let mut projected = Vec::with_capacity(states.len());
    for &h in states {
        projected.push(tape.matvec(w_t, h)?);
    }
    let mat = tape.stack(&projected)?;
    let pooled = tape.weighted_row_sum(mat, alpha)?;

    let w_m = tape.param(store, w.w_m);
    let b_m = tape.param(store, w.b_m);
    let lin = tape.matvec(w_m, pooled)?;
    let lin_b = tape.add(lin, b_m)?;
    Ok(tape.sigmoid(lin_b))
}

/// Two-hidden-layer rectifier MLP with a scalar output.
#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub in_dim: usize,
}

impl MlpWeights {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        h1: usize,
        h2: usize,
        rng: &mut R,
    ) -> Self {
        MlpWeights {
            w1: store
                .add_fan_scaled(&format!("{prefix}.w1"), &[h1, in_dim], rng)
                .expect("unique parameter names"),
            b1: store
                .add_zeros(&format!("{prefix}.b1"), &[h1])
                .expect("unique parameter names"),
            w2: store
                .add_fan_scaled(&format!("{prefix}.w2"), &[h2, h1], rng)
                .expect("unique parameter names"),
            b2: store
                .add_zeros(&format!("{prefix}.b2"), &[h2])
                .expect("unique parameter names"),
            w3: store
                .add_fan_scaled(&format!("{prefix}.w3"), &[1, h2], rng)
                .expect("unique parameter names"),
            b3: store
                .add_zeros(&format!("{prefix}.b3"), &[1])
                .expect("unique parameter names"),
            in_dim,
        }
    }

    /// Scalar pre-sigmoid logit.
    pub fn logit(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<NodeId, TapeError> {
        if tape.value(x).numel() != self.in_dim {
            return Err(TapeError::Shape {
                op: "mlp",
                detail: format!(
                    "input width {} != configured {}",
                    tape.value(x).numel(),
                    self.in_dim
                ),
            });
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let z1 = tape.matvec(w1, x)?;
        let z1b = tape.add(z1, b1)?;
        let a1 = tape.relu(z1b);

        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let z2 = tape.matvec(w2, a1)?;
        let z2b = tape.add(z2, b2)?;
        let a2 = tape.relu(z2b);

        let w3 = tape.param(store, self.w3);
        let b3 = tape.param(store, self.b3);
        let z3 = tape.matvec(w3, a2)?;
        tape.add(z3, b3)
    }
}
