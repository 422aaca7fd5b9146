//! Feature factorisation: fixed masks, learned residuals, channel-softmax
//! normalisation and the auxiliary supervision heads.
//!
//! The three masks compete per coordinate through a softmax over the mask
//! channels, so they always partition unity and the factors sum back to the
//! original embedding.

use crate::autograd::{Tape, Var};
use crate::rng::{gumbel, stream, Stream};
use crate::tensor::Mat;
use crate::{Error, Result};

use super::{AffineVars, MaskNetVars};

/// Hard-coded band masks: 0.5 inside the segment's F/3 feature band, zero
/// outside. Order: subject, task, auxiliary.
pub fn fixed_masks(rows: usize, embed_dim: usize) -> Result<[Mat; 3]> {
    if embed_dim % 3 != 0 {
        return Err(Error::Config(format!(
            "embedding width {embed_dim} is not divisible into three mask bands"
        )));
    }
    let band = embed_dim / 3;
    let mut out = [
        Mat::zeros(rows, embed_dim),
        Mat::zeros(rows, embed_dim),
        Mat::zeros(rows, embed_dim),
    ];
    for (seg, mask) in out.iter_mut().enumerate() {
        for r in 0..rows {
            for c in seg * band..(seg + 1) * band {
                *mask.at_mut(r, c) = 0.5;
            }
        }
    }
    Ok(out)
}

/// Learned residuals for the three masks: flatten, two-layer map, split.
/// Zero-initialised output layer means zero residuals at the start.
pub fn mask_residuals(tape: &mut Tape, net: &MaskNetVars, z: Var) -> [Var; 3] {
    let (rows, cols) = {
        let m = tape.value(z);
        (m.rows, m.cols)
    };
    let d = rows * cols;
    let flat = tape.reshape(z, 1, d);
    let h = tape.affine(flat, net.w1, net.b1);
    let h = tape.tanh(h);
    let out = tape.affine(h, net.w2, net.b2);
    [0, 1, 2].map(|seg| {
        let cols_range = tape.slice_cols(out, seg * d, (seg + 1) * d);
        tape.reshape(cols_range, rows, cols)
    })
}

/// Temperature softmax across the three mask channels at every coordinate;
/// optional per-channel noise makes it a concrete relaxed one-hot draw.
pub fn normalize_masks(
    tape: &mut Tape,
    fixed: &[Var; 3],
    residuals: Option<&[Var; 3]>,
    temperature: f64,
    noise: Option<&[Mat; 3]>,
) -> [Var; 3] {
    assert!(temperature > 0.0, "temperature must be positive");
    let (rows, cols) = {
        let m = tape.value(fixed[0]);
        (m.rows, m.cols)
    };
    let d = rows * cols;
    let mut channels = Vec::with_capacity(3);
    for seg in 0..3 {
        let mut logit = fixed[seg];
        if let Some(res) = residuals {
            logit = tape.add(logit, res[seg]);
        }
        if let Some(noise) = noise {
            let n = tape.leaf(noise[seg].clone());
            logit = tape.add(logit, n);
        }
        let scaled = tape.scale(logit, 1.0 / temperature);
        channels.push(tape.reshape(scaled, d, 1));
    }
    let ab = tape.concat_cols(channels[0], channels[1]);
    let abc = tape.concat_cols(ab, channels[2]);
    let soft = tape.softmax_rows(abc);
    [0, 1, 2].map(|seg| {
        let col = tape.slice_cols(soft, seg, seg + 1);
        tape.reshape(col, rows, cols)
    })
}

/// Draw one Gumbel(0,1) noise matrix per mask channel.
pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> [Mat; 3] {
    [0; 3].map(|_| Mat::from_fn(rows, cols, |_, _| gumbel(rng)))
}

/// Value-level mask normalisation matching the training graph; `stochastic`
/// draws Gumbel noise from the given seed.
pub fn normalize_masks_value(
    fixed: &[Mat; 3],
    residuals: &[Mat; 3],
    temperature: f64,
    stochastic: bool,
    seed: u64,
) -> Result<[Mat; 3]> {
    if temperature <= 0.0 {
        return Err(Error::Config("mask temperature must be positive".into()));
    }
    let noise = if stochastic {
        let mut rng = stream(seed, Stream::GumbelNoise);
        Some(gumbel_noise(fixed[0].rows, fixed[0].cols, &mut rng))
    } else {
        None
    };
    let mut tape = Tape::new();
    let fixed_vars = [
        tape.leaf(fixed[0].clone()),
        tape.leaf(fixed[1].clone()),
        tape.leaf(fixed[2].clone()),
    ];
    let res_vars = [
        tape.leaf(residuals[0].clone()),
        tape.leaf(residuals[1].clone()),
        tape.leaf(residuals[2].clone()),
    ];
    let masks = normalize_masks(&mut tape, &fixed_vars, Some(&res_vars), temperature, noise.as_ref());
    Ok(masks.map(|m| tape.value(m).clone()))
}

/// Split the embedding with elementwise masks.
pub fn factorise(tape: &mut Tape, z: Var, masks: &[Var; 3]) -> [Var; 3] {
    [0, 1, 2].map(|seg| tape.mul_elem(z, masks[seg]))
}

/// Mean of the per-time embeddings; the identity for the single-embedding
/// case this model produces.
pub fn pool_summary(tape: &mut Tape, segments: &[Var]) -> Var {
    assert!(!segments.is_empty(), "pool_summary needs at least one embedding");
    let mut acc = segments[0];
    for seg in &segments[1..] {
        acc = tape.add(acc, *seg);
    }
    tape.scale(acc, 1.0 / segments.len() as f64)
}

/// Margin contrastive loss on flattened summaries: same pairs pull together
/// (squared distance), different pairs push apart to the margin.
pub fn subject_contrastive_loss(
    tape: &mut Tape,
    a: Var,
    b: Var,
    same_subject: bool,
    margin: f64,
) -> Var {
    assert!(margin > 0.0, "margin must be positive");
    let diff = tape.sub(a, b);
    let d2 = tape.sum_sq(diff);
    if same_subject {
        d2
    } else {
        let d = tape.sqrt(d2);
        let neg = tape.scale(d, -1.0);
        let gap = tape.add_const(neg, margin);
        let hinge = tape.relu(gap);
        tape.mul_elem(hinge, hinge)
    }
}

/// Value-level contrastive loss for direct calls.
pub fn contrastive_value(a: &Mat, b: &Mat, same_subject: bool, margin: f64) -> f64 {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let bv = tape.leaf(b.clone());
    let loss = subject_contrastive_loss(&mut tape, av, bv, same_subject, margin);
    tape.scalar_value(loss)
}

/// Linear classifier over the flattened task summary with softmax
/// cross-entropy.
pub fn task_head_loss(
    tape: &mut Tape,
    head: &AffineVars,
    summary: Var,
    label: usize,
    n_classes: usize,
) -> Result<Var> {
    if label >= n_classes {
        return Err(Error::Argument(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    let len = tape.value(summary).len();
    let flat = tape.reshape(summary, 1, len);
    let logits = tape.affine(flat, head.w, head.b);
    Ok(tape.cross_entropy_logits(logits, label))
}

/// Class logits for evaluation-time prediction.
pub fn task_logits(tape: &mut Tape, head: &AffineVars, summary: Var) -> Var {
    let len = tape.value(summary).len();
    let flat = tape.reshape(summary, 1, len);
    tape.affine(flat, head.w, head.b)
}
