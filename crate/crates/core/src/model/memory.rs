//! Auxiliary slot memory: masked multi-head retrieval, convex slot updates,
//! the update-slot predictor and the diversity / consolidation losses.
//!
//! Slots are flattened latent vectors (d = K3 * F); queries, masks and write
//! vectors share that geometry. Within one training iteration gradients flow
//! through a single read-write cycle; the committed state is detached.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{self, Grads, Tape, Var};
use crate::rng::{stream, Stream};
use crate::tensor::Mat;
use crate::{Error, Result};

use super::AffineVars;

/// Persistent memory: slot matrix, iteration counter and a bounded ring of
/// past update-weight snapshots.
#[derive(Clone, Debug)]
pub struct MemoryState {
    pub slots: Mat,
    pub iteration: u64,
    pub history: Vec<Vec<f64>>,
    pub capacity: usize,
}

impl MemoryState {
    /// Fresh memory with slots i.i.d. uniform in [-0.1, 0.1].
    pub fn init(slots: usize, dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        if slots < 2 {
            return Err(Error::Config("memory needs at least two slots".into()));
        }
        if dim == 0 {
            return Err(Error::Config("slot dimension must be >= 1".into()));
        }
        let mut rng = stream(seed, Stream::MemoryInit);
        Ok(MemoryState {
            slots: Mat::uniform(slots, dim, 0.1, &mut rng),
            iteration: 0,
            history: Vec::new(),
            capacity,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.rows
    }

    pub fn dim(&self) -> usize {
        self.slots.cols
    }

    /// Install the post-update slots, bump the iteration counter and record
    /// the update-weight snapshot.
    pub fn commit(&mut self, new_slots: Mat, snapshot: Vec<f64>) {
        assert_eq!(new_slots.shape(), self.slots.shape());
        assert_eq!(snapshot.len(), self.slot_count());
        self.slots = new_slots;
        self.iteration += 1;
        self.push_history(snapshot);
    }

    pub fn push_history(&mut self, snapshot: Vec<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.history.len() == self.capacity {
            self.history.remove(0);
        }
        self.history.push(snapshot);
    }
}

// ── read path ────────────────────────────────────────────────────────────

/// Affine query from a flattened latent, 1 x d.
pub fn make_query(tape: &mut Tape, params: &AffineVars, latent: Var) -> Var {
    let len = tape.value(latent).len();
    let flat = tape.reshape(latent, 1, len);
    tape.affine(flat, params.w, params.b)
}

/// Softmax over slots of the query/slot dot products; an optional 1 x d mask
/// gates slot columns before scoring.
pub fn attend(tape: &mut Tape, query: Var, memory: Var, mask: Option<Var>) -> Var {
    let gated = match mask {
        Some(m) => tape.mul_row_vec(memory, m),
        None => memory,
    };
    let q_col = tape.transpose(query);
    let scores = tape.matmul(gated, q_col);
    let row = tape.transpose(scores);
    tape.softmax_rows(row)
}

/// Convex slot mixture under the same mask, reshaped back to K3 x F.
pub fn read(
    tape: &mut Tape,
    beta: Var,
    memory: Var,
    mask: Option<Var>,
    shape: (usize, usize),
) -> Var {
    let gated = match mask {
        Some(m) => tape.mul_row_vec(memory, m),
        None => memory,
    };
    let flat = tape.matmul(beta, gated);
    tape.reshape(flat, shape.0, shape.1)
}

/// Mean of the latent and the three retrieved contents, entry by entry.
pub fn aggregate(tape: &mut Tape, mu: Var, mu_sub: Var, mu_task: Var, latent: Var) -> Var {
    let a = tape.add(latent, mu);
    let b = tape.add(a, mu_sub);
    let c = tape.add(b, mu_task);
    tape.scale(c, 0.25)
}

// ── write path ───────────────────────────────────────────────────────────

/// Bounded write vector: affine map of the concatenated retrievals, tanh.
pub fn write_vector(tape: &mut Tape, params: &AffineVars, mu_cat: Var) -> Var {
    let len = tape.value(mu_cat).len();
    let flat = tape.reshape(mu_cat, 1, len);
    let pre = tape.affine(flat, params.w, params.b);
    tape.tanh(pre)
}

/// Mean of the three head weights, staying on the simplex so the slot update
/// remains convex.
pub fn combine_beta(tape: &mut Tape, beta_sub: Var, beta_task: Var, beta_full: Var) -> Var {
    let a = tape.add(beta_sub, beta_task);
    let b = tape.add(a, beta_full);
    tape.scale(b, 1.0 / 3.0)
}

/// Per-slot convex update: M'[i] = (1 - beta[i]) * M[i] + beta[i] * write.
pub fn memory_update(tape: &mut Tape, memory: Var, beta: Var, write: Var) -> Var {
    let beta_col = tape.transpose(beta);
    let erase = tape.mul_col_vec(memory, beta_col);
    let keep = tape.sub(memory, erase);
    let add = tape.matmul(beta_col, write);
    tape.add(keep, add)
}

/// Softmax prediction of the slots that should change, over [write ++ beta].
pub fn predict_update_slots(
    tape: &mut Tape,
    params: &AffineVars,
    write: Var,
    beta: Var,
) -> Var {
    let joined = tape.concat_cols(write, beta);
    let logits = tape.affine(joined, params.w, params.b);
    tape.softmax_rows(logits)
}

// ── stabilisation losses ─────────────────────────────────────────────────

/// Mean pairwise cosine similarity between slots.
pub fn diversity_loss(tape: &mut Tape, memory: Var) -> Var {
    tape.mean_pairwise_cosine(memory)
}

/// Value-level diversity loss.
pub fn diversity_value(memory: &Mat) -> f64 {
    autograd::mean_pairwise_cosine(memory)
}

/// Consolidation loss over the recorded history plus the current snapshot.
pub fn consolidation_loss(
    tape: &mut Tape,
    current: Var,
    history: &[Vec<f64>],
    window: usize,
    cap: usize,
    eps: f64,
) -> Var {
    tape.consolidation(current, Arc::new(history.to_vec()), window, cap, eps)
}

/// Value-level consolidation loss over a complete history (oldest first).
pub fn consolidation_value(history: &[Vec<f64>], window: usize, cap: usize, eps: f64) -> f64 {
    let refs: Vec<&[f64]> = history.iter().map(|v| v.as_slice()).collect();
    autograd::consolidation_value(&refs, window, cap, eps)
}

// ── value-level wrappers (single implementation via the tape) ────────────

pub fn attend_value(query: &Mat, memory: &Mat, mask: Option<&Mat>) -> Result<Vec<f64>> {
    check_read_shapes(query, memory, mask)?;
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let m = tape.leaf(memory.clone());
    let mask_v = mask.map(|mk| tape.leaf(mk.clone()));
    let beta = attend(&mut tape, q, m, mask_v);
    Ok(tape.value(beta).data.clone())
}

pub fn read_value(beta: &[f64], memory: &Mat, mask: Option<&Mat>, shape: (usize, usize)) -> Result<Mat> {
    if beta.len() != memory.rows {
        return Err(Error::Shape(format!(
            "{} attention weights for {} slots",
            beta.len(),
            memory.rows
        )));
    }
    if shape.0 * shape.1 != memory.cols {
        return Err(Error::Shape(format!(
            "target shape {}x{} does not match slot dim {}",
            shape.0, shape.1, memory.cols
        )));
    }
    if let Some(mk) = mask {
        if mk.len() != memory.cols {
            return Err(Error::Shape("mask length does not match slot dim".into()));
        }
    }
    let mut tape = Tape::new();
    let b = tape.leaf(Mat::row(beta));
    let m = tape.leaf(memory.clone());
    let mask_v = mask.map(|mk| tape.leaf(mk.flatten_row()));
    let mu = read(&mut tape, b, m, mask_v, shape);
    Ok(tape.value(mu).clone())
}

pub fn memory_update_value(memory: &Mat, beta: &[f64], write: &[f64]) -> Result<Mat> {
    if beta.len() != memory.rows || write.len() != memory.cols {
        return Err(Error::Shape("memory update shape mismatch".into()));
    }
    if beta.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
        return Err(Error::Argument("update weights must lie in [0, 1]".into()));
    }
    let mut tape = Tape::new();
    let m = tape.leaf(memory.clone());
    let b = tape.leaf(Mat::row(beta));
    let w = tape.leaf(Mat::row(write));
    let updated = memory_update(&mut tape, m, b, w);
    Ok(tape.value(updated).clone())
}

pub fn combine_beta_value(beta_sub: &[f64], beta_task: &[f64], beta_full: &[f64]) -> Vec<f64> {
    beta_sub
        .iter()
        .zip(beta_task)
        .zip(beta_full)
        .map(|((a, b), c)| (a + b + c) / 3.0)
        .collect()
}

fn check_read_shapes(query: &Mat, memory: &Mat, mask: Option<&Mat>) -> Result<()> {
    if query.len() != memory.cols {
        return Err(Error::Shape(format!(
            "query length {} does not match slot dim {}",
            query.len(),
            memory.cols
        )));
    }
    if let Some(mk) = mask {
        if mk.len() != memory.cols {
            return Err(Error::Shape("mask length does not match slot dim".into()));
        }
        if mk.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Argument("mask entries must lie in [0, 1]".into()));
        }
    }
    Ok(())
}

/// Convenience for gradient tests: collect named gradients for one affine.
pub fn affine_grads(grads: &Grads, vars: &AffineVars) -> (Mat, Mat) {
    (grads.get(vars.w).clone(), grads.get(vars.b).clone())
}
