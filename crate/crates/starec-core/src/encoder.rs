//! Product-based feature encoder.
//!
//! Each categorical field has an embedding table and a per-field weight
//! vector; the encoding is the sum of first-order terms `v_p * x_p`
//! (elementwise) and second-order terms `(v_p * v_p') <x_p, x_p'>` over
//! field pairs. With one field this degenerates to a weighted ID
//! embedding lookup. Unseen indices map to a dedicated OOV row.

use crate::params::{ParamId, ParameterStore};
use crate::tape::{NodeId, Tape, TapeError};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("at least one feature field is required")]
    NoFields,
    #[error("{got} feature values for {expected} configured fields")]
    FieldCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Embedding tables and field weights for one entity type (user or item).
#[derive(Debug, Clone)]
pub struct FieldEmbeddings {
    /// Per field: (vocab + 1) x dim table; the extra row is OOV.
    pub tables: Vec<ParamId>,
    /// Per field: dim-sized first-order weight vector.
    pub weights: Vec<ParamId>,
    pub vocab: Vec<usize>,
    pub dim: usize,
}

impl FieldEmbeddings {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        vocab: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut tables = Vec::with_capacity(vocab.len());
        let mut weights = Vec::with_capacity(vocab.len());
        for (p, &v) in vocab.iter().enumerate() {
            let t = store
                .add_embedding(&format!("{prefix}.field{p}.table"), v + 1, dim, rng)
                .expect("unique parameter names");
            // identity init: the first-order term starts as the embedding
            // itself, otherwise the product of two small-uniform factors
            // squashes the whole input scale
            let w = store
                .add_ones(&format!("{prefix}.field{p}.weight"), &[dim])
                .expect("unique parameter names");
            tables.push(t);
            weights.push(w);
        }
        FieldEmbeddings {
            tables,
            weights,
            vocab: vocab.to_vec(),
            dim,
        }
    }

    fn row_for(&self, field: usize, idx: u32) -> usize {
        let idx = idx as usize;
        if idx < self.vocab[field] {
            idx
        } else {
            self.vocab[field] // OOV row
        }
    }

    /// Differentiable encoding of one entity's feature indices.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        fields: &[u32],
    ) -> Result<NodeId, EncoderError> {
        if fields.is_empty() {
            return Err(EncoderError::NoFields);
        }
        if fields.len() != self.tables.len() {
            return Err(EncoderError::FieldCountMismatch {
                expected: self.tables.len(),
                got: fields.len(),
            });
        }
        let p = fields.len();
        let mut xs = Vec::with_capacity(p);
        let mut vs = Vec::with_capacity(p);
        for (f, &idx) in fields.iter().enumerate() {
            xs.push(tape.param_row(store, self.tables[f], self.row_for(f, idx))?);
            vs.push(tape.param(store, self.weights[f]));
        }
        // first order: sum_p v_p * x_p
        let mut out = tape.mul(vs[0], xs[0])?;
        for f in 1..p {
            let term = tape.mul(vs[f], xs[f])?;
            out = tape.add(out, term)?;
        }
        // second order: sum_{p<p'} (v_p * v_p') <x_p, x_p'>
        for a in 0..p {
            for b in a + 1..p {
                let inner = tape.dot(xs[a], xs[b])?;
                let vv = tape.mul(vs[a], vs[b])?;
                let term = tape.scale_by_entry(vv, inner, 0)?;
                out = tape.add(out, term)?;
            }
        }
        Ok(out)
    }

    /// Forward-only encoding on raw values (used by the search module,
    /// which reads embeddings without recording gradients).
    pub fn encode_value(
        &self,
        store: &ParameterStore,
        fields: &[u32],
    ) -> Result<Vec<f64>, EncoderError> {
        if fields.is_empty() {
            return Err(EncoderError::NoFields);
        }
        if fields.len() != self.tables.len() {
            return Err(EncoderError::FieldCountMismatch {
                expected: self.tables.len(),
                got: fields.len(),
            });
        }
        let p = fields.len();
        let xs: Vec<&[f64]> = fields
            .iter()
            .enumerate()
            .map(|(f, &idx)| store.value(self.tables[f]).row(self.row_for(f, idx)))
            .collect();
        let vs: Vec<&[f64]> = (0..p)
            .map(|f| store.value(self.weights[f]).data())
            .collect();
        let mut out = vec![0.0; self.dim];
        for f in 0..p {
            for k in 0..self.dim {
                out[k] += vs[f][k] * xs[f][k];
            }
        }
        for a in 0..p {
            for b in a + 1..p {
                let inner: f64 = xs[a].iter().zip(xs[b]).map(|(x, y)| x * y).sum();
                for k in 0..self.dim {
                    out[k] += vs[a][k] * vs[b][k] * inner;
                }
            }
        }
        Ok(out)
    }

    /// Raw category embedding row (first item field) for search scoring.
    pub fn field_row<'s>(&self, store: &'s ParameterStore, field: usize, idx: u32) -> &'s [f64] {
        store.value(self.tables[field]).row(self.row_for(field, idx))
    }
}
