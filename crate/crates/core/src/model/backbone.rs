//! Multi-scale GCN encoder, mirrored decoder and per-scale prediction heads.

use crate::autograd::{Tape, Var};

use super::{Activation, GcnLayerVars};

/// One graph convolution: act(A * H * W + bias).
pub fn gcn_layer(tape: &mut Tape, layer: &GcnLayerVars, h: Var) -> Var {
    let ah = tape.matmul(layer.adjacency, h);
    let ahw = tape.matmul(ah, layer.weight);
    let pre = tape.add_row(ahw, layer.bias);
    match layer.activation {
        Activation::Tanh => tape.tanh(pre),
        Activation::Identity => pre,
    }
}

fn run_block(tape: &mut Tape, block: &[GcnLayerVars], input: Var, residual: bool) -> Var {
    let mut h = input;
    for layer in block {
        h = gcn_layer(tape, layer, h);
    }
    if residual && tape.value(input).shape() == tape.value(h).shape() {
        h = tape.add(h, input);
    }
    h
}

pub struct EncodeOut {
    /// Per-level features, finest first; the last entry is the coarsest
    /// encoding handed to factorisation and memory.
    pub scales: Vec<Var>,
}

/// Descend through the blocks, pooling between levels. `input` is the
/// K0 x t_total coordinate matrix; the first layer maps the temporal axis
/// into the embedding width.
pub fn encode(
    tape: &mut Tape,
    blocks: &[Vec<GcnLayerVars>],
    pools: &[Var],
    input: Var,
    block_residual: bool,
) -> EncodeOut {
    let mut scales = Vec::with_capacity(blocks.len());
    let mut h = input;
    for (l, block) in blocks.iter().enumerate() {
        h = run_block(tape, block, h, block_residual);
        scales.push(h);
        if l < pools.len() {
            h = tape.matmul(pools[l], h);
        }
    }
    EncodeOut { scales }
}

pub struct DecodeOut {
    /// Per-level decoder features, indexed by level (0 = finest).
    pub scales: Vec<Var>,
    /// Per-level head outputs, K_l x t_total.
    pub preds: Vec<Var>,
}

/// Ascend from the coarsest feature: refine, unpool (coarse row copied to
/// every group member), refine again; each level's head emits a full-length
/// sequence whose last columns are the forecast.
pub fn decode(
    tape: &mut Tape,
    blocks: &[Vec<GcnLayerVars>],
    heads: &[Vec<GcnLayerVars>],
    unpools: &[Var],
    latent: Var,
    block_residual: bool,
) -> DecodeOut {
    let levels = blocks.len();
    let mut scales = vec![latent; levels];
    let mut h = latent;
    for l in (0..levels).rev() {
        h = run_block(tape, &blocks[l], h, block_residual);
        scales[l] = h;
        if l > 0 {
            h = tape.matmul(unpools[l - 1], h);
        }
    }
    let preds = (0..levels)
        .map(|l| run_block(tape, &heads[l], scales[l], false))
        .collect();
    DecodeOut { scales, preds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PoolingHierarchy;
    use crate::model::{graph_context, Activation, GcnLayerParams, ModelDims, ModelParams};
    use crate::rng::{stream, Stream};
    use crate::tensor::Mat;
    use rand::Rng;

    fn layer_vars(tape: &mut Tape, p: &GcnLayerParams) -> GcnLayerVars {
        GcnLayerVars {
            adjacency: tape.leaf(p.adjacency.clone()),
            weight: tape.leaf(p.weight.clone()),
            bias: tape.leaf(p.bias.clone()),
            activation: p.activation,
        }
    }

    #[test]
    fn identity_composition_passes_input_through() {
        let mut tape = Tape::new();
        let p = GcnLayerParams {
            adjacency: Mat::identity(3),
            weight: Mat::identity(4),
            bias: Mat::zeros(1, 4),
            activation: Activation::Identity,
        };
        let lv = layer_vars(&mut tape, &p);
        let h = tape.leaf(Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64));
        let out = gcn_layer(&mut tape, &lv, h);
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_weight_annihilates() {
        let mut tape = Tape::new();
        let p = GcnLayerParams {
            adjacency: Mat::identity(3),
            weight: Mat::zeros(4, 5),
            bias: Mat::zeros(1, 5),
            activation: Activation::Tanh,
        };
        let lv = layer_vars(&mut tape, &p);
        let h = tape.leaf(Mat::from_fn(3, 4, |r, c| (r + c) as f64));
        let out = gcn_layer(&mut tape, &lv, h);
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_layer_matches_triple_loop_oracle() {
        let mut rng = stream(5, Stream::ParamInit);
        let a = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let w = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = Mat::from_fn(1, 3, |_, _| rng.gen_range(-1.0..1.0));
        let h = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let lv = GcnLayerVars {
            adjacency: tape.leaf(a.clone()),
            weight: tape.leaf(w.clone()),
            bias: tape.leaf(b.clone()),
            activation: Activation::Identity,
        };
        let hv = tape.leaf(h.clone());
        let out = gcn_layer(&mut tape, &lv, hv);

        // Naive scalar oracle: (A * H * W)[i][j] + b[j].
        let mut expected = Mat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        acc += a.at(i, p) * h.at(p, q) * w.at(q, j);
                    }
                }
                *expected.at_mut(i, j) = acc + b.at(0, j);
            }
        }
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn gcn_layer_linear_in_input_at_identity_activation() {
        let mut rng = stream(6, Stream::ParamInit);
        let p = GcnLayerParams {
            adjacency: Mat::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5)),
            weight: Mat::from_fn(3, 2, |_, _| rng.gen_range(-0.5..0.5)),
            bias: Mat::zeros(1, 2),
            activation: Activation::Identity,
        };
        let x = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let eval = |input: &Mat| {
            let mut tape = Tape::new();
            let lv = layer_vars(&mut tape, &p);
            let h = tape.leaf(input.clone());
            let out = gcn_layer(&mut tape, &lv, h);
            tape.value(out).clone()
        };
        let lhs = eval(&x.scale(2.0).add(&y.scale(-0.5)));
        let rhs = eval(&x).scale(2.0).add(&eval(&y).scale(-0.5));
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    fn tiny_model(t_total: usize) -> ModelParams {
        let h = PoolingHierarchy::contiguous(&[12, 8, 6, 4]).unwrap();
        let dims = ModelDims {
            level_sizes: h.level_sizes.clone(),
            embed_dim: 6,
            t_obs: t_total - 4,
            t_total,
            slots: 3,
            mask_hidden: 8,
            n_actions: 2,
        };
        ModelParams::init(dims, h, 11)
    }

    #[test]
    fn encoder_emits_coarsest_scale_and_is_deterministic() {
        let params = tiny_model(9);
        let input = Mat::from_fn(12, 9, |r, c| ((r * 2 + c) as f64 * 0.2).sin());
        let run = || {
            let mut tape = Tape::new();
            let pv = params.load(&mut tape);
            let ctx = graph_context(&mut tape, &params, false).unwrap();
            let iv = tape.leaf(input.clone());
            let enc = encode(&mut tape, &pv.encoder, &ctx.pools, iv, false);
            (
                tape.value(enc.scales[0]).shape(),
                tape.value(*enc.scales.last().unwrap()).clone(),
            )
        };
        let (s0, latent) = run();
        assert_eq!(s0, (12, 6));
        assert_eq!(latent.shape(), (4, 6));
        let (_, latent2) = run();
        assert_eq!(latent, latent2);
    }

    #[test]
    fn encoder_decoder_scale_symmetry() {
        let params = tiny_model(9);
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, false).unwrap();
        let input = tape.leaf(Mat::from_fn(12, 9, |r, c| (r + c) as f64 * 0.01));
        let enc = encode(&mut tape, &pv.encoder, &ctx.pools, input, false);
        let latent = *enc.scales.last().unwrap();
        let dec = decode(&mut tape, &pv.decoder, &pv.heads, &ctx.unpools, latent, false);
        for l in 0..4 {
            assert_eq!(
                tape.value(dec.scales[l]).rows,
                tape.value(enc.scales[l]).rows,
                "row count mismatch at level {l}"
            );
            assert_eq!(tape.value(dec.preds[l]).shape(), (params.dims.level_sizes[l], 9));
        }
    }

    #[test]
    fn unpooling_constant_coarse_tensor_broadcasts() {
        let h = PoolingHierarchy::contiguous(&[6, 3]).unwrap();
        let coarse = Mat::from_fn(3, 2, |_, _| 4.5);
        let fine = h.unpool_matrix(0).matmul(&coarse);
        assert_eq!(fine.shape(), (6, 2));
        assert!(fine.data.iter().all(|&v| v == 4.5));
    }

    #[test]
    fn encode_input_gradient_matches_finite_differences() {
        let params = tiny_model(9);
        let base = Mat::from_fn(12, 9, |r, c| ((r * 5 + c) as f64 * 0.13).sin() * 0.7);
        let loss_of = |input: &Mat| -> f64 {
            let mut tape = Tape::new();
            let pv = params.load(&mut tape);
            let ctx = graph_context(&mut tape, &params, false).unwrap();
            let iv = tape.leaf(input.clone());
            let enc = encode(&mut tape, &pv.encoder, &ctx.pools, iv, false);
            let latent = *enc.scales.last().unwrap();
            let s = tape.sum(latent);
            tape.scalar_value(s)
        };
        // analytic
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, false).unwrap();
        let iv = tape.leaf(base.clone());
        let enc = encode(&mut tape, &pv.encoder, &ctx.pools, iv, false);
        let latent = *enc.scales.last().unwrap();
        let out = tape.sum(latent);
        let grads = tape.backward(out);
        let analytic = grads.get(iv).clone();

        let mut rng = stream(21, Stream::ParamInit);
        let h = 1e-6;
        for _ in 0..5 {
            let i = rng.gen_range(0..base.len());
            let mut plus = base.clone();
            plus.data[i] += h;
            let mut minus = base.clone();
            minus.data[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "coordinate {i}: analytic {a}, fd {fd}");
        }
    }

    #[test]
    fn decode_latent_gradient_matches_finite_differences() {
        let params = tiny_model(9);
        let base = Mat::from_fn(4, 6, |r, c| ((r * 7 + c) as f64 * 0.29).cos() * 0.4);
        let loss_of = |latent_in: &Mat| -> f64 {
            let mut tape = Tape::new();
            let pv = params.load(&mut tape);
            let ctx = graph_context(&mut tape, &params, false).unwrap();
            let lv = tape.leaf(latent_in.clone());
            let dec = decode(&mut tape, &pv.decoder, &pv.heads, &ctx.unpools, lv, false);
            let mut total = tape.scalar(0.0);
            for p in dec.preds {
                let s = tape.sum(p);
                total = tape.add(total, s);
            }
            tape.scalar_value(total)
        };
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, false).unwrap();
        let lv = tape.leaf(base.clone());
        let dec = decode(&mut tape, &pv.decoder, &pv.heads, &ctx.unpools, lv, false);
        let mut total = tape.scalar(0.0);
        for p in dec.preds {
            let s = tape.sum(p);
            total = tape.add(total, s);
        }
        let grads = tape.backward(total);
        let analytic = grads.get(lv).clone();

        let mut rng = stream(22, Stream::ParamInit);
        let h = 1e-6;
        for _ in 0..5 {
            let i = rng.gen_range(0..base.len());
            let mut plus = base.clone();
            plus.data[i] += h;
            let mut minus = base.clone();
            minus.data[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = analytic.data[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "coordinate {i}: analytic {a}, fd {fd}");
        }
    }

    #[test]
    fn identity_weights_preserve_constant_input() {
        // All adjacencies identity, square identity weights, identity
        // activation: the pipeline reduces to pooling/unpooling, which fixes
        // constant inputs. Requires t_total == embed_dim so every weight is
        // square.
        let h = PoolingHierarchy::contiguous(&[12, 8, 6, 4]).unwrap();
        let f = 6;
        let dims = ModelDims {
            level_sizes: h.level_sizes.clone(),
            embed_dim: f,
            t_obs: 2,
            t_total: f,
            slots: 3,
            mask_hidden: 8,
            n_actions: 2,
        };
        let mut params = ModelParams::init(dims, h, 3);
        for blocks in [&mut params.encoder, &mut params.decoder, &mut params.heads] {
            for block in blocks.iter_mut() {
                for layer in block.iter_mut() {
                    layer.adjacency = Mat::identity(layer.adjacency.rows);
                    layer.weight = Mat::from_fn(layer.weight.rows, layer.weight.cols, |r, c| {
                        if r == c {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    layer.bias.fill(0.0);
                    layer.activation = Activation::Identity;
                }
            }
        }
        let constant = 2.5;
        let input = Mat::from_fn(12, f, |_, _| constant);
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, false).unwrap();
        let iv = tape.leaf(input.clone());
        let enc = encode(&mut tape, &pv.encoder, &ctx.pools, iv, false);
        let latent = *enc.scales.last().unwrap();
        let dec = decode(&mut tape, &pv.decoder, &pv.heads, &ctx.unpools, latent, false);
        assert!(tape.value(dec.preds[0]).max_abs_diff(&input) < 1e-12);
    }
}
