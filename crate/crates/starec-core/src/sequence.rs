//! Time-aware recurrent encoder.
//!
//! Each step runs a bias-free GRU over `[item embedding, label embedding]`
//! inputs, then splits off a short-term memory component and decays it by
//! a function of the elapsed time between consecutive events:
//!
//! ```text
//! f' = sigmoid(W_f x + U_f h'_prev)     i' = sigmoid(W_i x + U_i h'_prev)
//! c' = tanh(W_c x + i' * (U_c h'_prev)) h' = f' * c' + (1 - f') * h'_prev
//! c_short = tanh(W_s c' + b_s)          c_decay = c_short * de(dt)
//! alpha_t = softmax_t'(h'_t . (W_a x_t'))[t]
//! f = alpha_t * f'                      c = c' - c_short + c_decay
//! h = f * c + (1 - f) * h'
//! ```
//!
//! The recurrent state is `h'`; the decayed, attention-modulated `h` is
//! what downstream aggregation consumes. With time awareness disabled the
//! plain GRU states `h'` are returned, which is the classic-recurrent
//! baseline configuration.

use crate::params::{ParamId, ParameterStore};
use crate::tape::{NodeId, Tape, TapeError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("non-finite cell state at position {position}")]
    NonFinite { position: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// de(dt) = 1 / max(dt, 1); for logs whose elapsed times are small.
    Reciprocal,
    /// de(dt) = 1 / ln(e + dt); for logs with large elapsed times.
    Log,
}

/// Elapsed-time decay factor; always in (0, 1] and equal to 1 at a
/// unit (or smaller) gap.
pub fn decay_factor(mode: DecayMode, dt: u64) -> f64 {
    match mode {
        DecayMode::Reciprocal => 1.0 / (dt.max(1) as f64),
        DecayMode::Log => 1.0 / (std::f64::consts::E + dt as f64).ln(),
    }
}

/// Weights for one recurrent network (the recent, searched, and
/// similar-user sequences each own an independent set).
#[derive(Debug, Clone)]
pub struct TrnnWeights {
    pub w_forget: ParamId,
    pub u_forget: ParamId,
    pub w_input: ParamId,
    pub u_input: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    /// Short-term memory transform and its bias.
    pub w_short: ParamId,
    pub b_short: ParamId,
    /// Attention map from inputs to the hidden space.
    pub w_attn: ParamId,
}

impl TrnnWeights {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        fn mat<R: Rng>(
            store: &mut ParameterStore,
            prefix: &str,
            name: &str,
            r: usize,
            c: usize,
            rng: &mut R,
        ) -> ParamId {
            store
                .add_fan_scaled(&format!("{prefix}.{name}"), &[r, c], rng)
                .expect("unique parameter names")
        }
        let w_forget = mat(store, prefix, "w_forget", hidden, in_dim, rng);
        let u_forget = mat(store, prefix, "u_forget", hidden, hidden, rng);
        let w_input = mat(store, prefix, "w_input", hidden, in_dim, rng);
        let u_input = mat(store, prefix, "u_input", hidden, hidden, rng);
        let w_cand = mat(store, prefix, "w_cand", hidden, in_dim, rng);
        let u_cand = mat(store, prefix, "u_cand", hidden, hidden, rng);
        let w_short = mat(store, prefix, "w_short", hidden, hidden, rng);
        // nonzero bias keeps the short-term channel (the only place the
        // elapsed-time factor enters) alive at initialization; with a
        // zero start its gradient is suppressed by tanh(0) = 0
        let b_short = store
            .add(
                &format!("{prefix}.b_short"),
                crate::tensor::Tensor::new(vec![hidden], vec![0.5; hidden]).unwrap(),
            )
            .expect("unique parameter names");
        let w_attn = mat(store, prefix, "w_attn", hidden, in_dim, rng);
        TrnnWeights {
            w_forget,
            u_forget,
            w_input,
            u_input,
            w_cand,
            u_cand,
            w_short,
            b_short,
            w_attn,
        }
    }
}

/// One real (non-padding) sequence position: concatenated
/// `[item, label]` input and the elapsed time since the previous one.
#[derive(Debug, Clone, Copy)]
pub struct SeqStep {
    pub input: NodeId,
    pub dt: u64,
}

/// Encode a sequence of real positions into per-position hidden states.
/// The carried state is the decayed, attention-modulated `h_t`, so
/// elapsed-time effects compound along the sequence. Padding never
/// reaches this function; masked positions contribute zero states
/// upstream.
pub fn encode_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    w: &TrnnWeights,
    hidden: usize,
    steps: &[SeqStep],
    time_aware: bool,
    mode: DecayMode,
) -> Result<Vec<NodeId>, SequenceError> {
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let wf = tape.param(store, w.w_forget);
    let uf = tape.param(store, w.u_forget);
    let wi = tape.param(store, w.w_input);
    let ui = tape.param(store, w.u_input);
    let wc = tape.param(store, w.w_cand);
    let uc = tape.param(store, w.u_cand);

    // attention keys W_a x_t' for every position, stacked so each
    // step's logits are one matrix-vector product
    let keys = if time_aware {
        let wa = tape.param(store, w.w_attn);
        let mut projected = Vec::with_capacity(steps.len());
        for step in steps {
            projected.push(tape.matvec(wa, step.input)?);
        }
        Some(tape.stack(&projected)?)
    } else {
        None
    };
    let ws_bs = if time_aware {
        Some((tape.param(store, w.w_short), tape.param(store, w.b_short)))
    } else {
        None
    };

    let mut h_prev = tape.input(crate::tensor::Tensor::zeros(&[hidden]));
    let mut out = Vec::with_capacity(steps.len());
    for (pos, step) in steps.iter().enumerate() {
        let fx = tape.matvec(wf, step.input)?;
        let fh = tape.matvec(uf, h_prev)?;
        let f_sum = tape.add(fx, fh)?;
        let f = tape.sigmoid(f_sum);

        let ix = tape.matvec(wi, step.input)?;
        let ih = tape.matvec(ui, h_prev)?;
        let i_sum = tape.add(ix, ih)?;
        let i = tape.sigmoid(i_sum);

        let cx = tape.matvec(wc, step.input)?;
        let ch = tape.matvec(uc, h_prev)?;
        let gated = tape.mul(i, ch)?;
        let c_sum = tape.add(cx, gated)?;
        let c = tape.tanh(c_sum);

        let keep = tape.mul(f, c)?;
        let f_inv = tape.one_minus(f);
        let carry = tape.mul(f_inv, h_prev)?;
        let h_gru = tape.add(keep, carry)?;

        let h = match (&keys, &ws_bs) {
            (Some(keys), Some((ws, bs))) => {
                // alpha_t: softmax over all positions' keys, queried by
                // this step's pre-modulation state
                let logits = tape.matvec(*keys, h_gru)?;
                let alpha = tape.softmax(logits);

                let lin = tape.matvec(*ws, c)?;
                let lin_b = tape.add(lin, *bs)?;
                let c_short = tape.tanh(lin_b);
                let c_decay = tape.scale_const(c_short, decay_factor(mode, step.dt));
                let c_stripped = tape.sub(c, c_short)?;
                let c_final = tape.add(c_stripped, c_decay)?;

                let f_mod = tape.scale_by_entry(f, alpha, pos)?;
                let keep = tape.mul(f_mod, c_final)?;
                let f_inv = tape.one_minus(f_mod);
                let carry = tape.mul(f_inv, h_gru)?;
                tape.add(keep, carry)?
            }
            _ => h_gru,
        };
        if !tape.value(h).all_finite() {
            return Err(SequenceError::NonFinite { position: pos });
        }
        out.push(h);
        h_prev = h;
    }
    Ok(out)
}
