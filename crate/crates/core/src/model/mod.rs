//! Model parameters and the per-item forward graph.
//!
//! The network is a multi-scale GCN encoder/decoder sandwiching feature
//! factorisation and an auxiliary slot memory. Parameters live in plain
//! matrices; each training batch loads them onto a fresh tape and builds the
//! forward graph item by item.

pub mod backbone;
pub mod factorise;
pub mod memory;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::RunConfig;
use crate::data::PoolingHierarchy;
use crate::rng::{stream, Stream};
use crate::tensor::Mat;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// One graph-convolution layer: out = act(A * H * W + bias).
#[derive(Clone, Debug)]
pub struct GcnLayerParams {
    pub adjacency: Mat,
    pub weight: Mat,
    pub bias: Mat,
    pub activation: Activation,
}

impl GcnLayerParams {
    /// Learnable adjacency starts at identity plus small uniform noise;
    /// weights are Glorot, biases zero.
    pub fn init(
        nodes: usize,
        f_in: usize,
        f_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut adjacency = Mat::identity(nodes);
        for v in adjacency.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        GcnLayerParams {
            adjacency,
            weight: Mat::glorot(f_in, f_out, rng),
            bias: Mat::zeros(1, f_out),
            activation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AffineParams {
    pub w: Mat,
    pub b: Mat,
}

impl AffineParams {
    pub fn init(f_in: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        AffineParams { w: Mat::glorot(f_in, f_out, rng), b: Mat::zeros(1, f_out) }
    }
}

/// Two-layer residual-mask generator; the output layer starts at zero so the
/// initial masks equal the normalised fixed masks.
#[derive(Clone, Debug)]
pub struct MaskNetParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Static shape information shared by parameters, checkpoints and graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub level_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub t_obs: usize,
    pub t_total: usize,
    pub slots: usize,
    pub mask_hidden: usize,
    pub n_actions: usize,
}

impl ModelDims {
    pub fn from_config(
        cfg: &RunConfig,
        hierarchy: &PoolingHierarchy,
        n_actions: usize,
    ) -> ModelDims {
        ModelDims {
            level_sizes: hierarchy.level_sizes.clone(),
            embed_dim: cfg.embed_dim,
            t_obs: cfg.t_obs,
            t_total: cfg.t_total(),
            slots: cfg.memory_slots,
            mask_hidden: cfg.mask_hidden,
            n_actions,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Row count at the coarsest scale.
    pub fn latent_rows(&self) -> usize {
        *self.level_sizes.last().expect("at least one level")
    }

    /// Flattened latent length; slots, queries and write vectors share it.
    pub fn slot_dim(&self) -> usize {
        self.latent_rows() * self.embed_dim
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub hierarchy: PoolingHierarchy,
    /// Descending blocks, one per level, two layers each.
    pub encoder: Vec<Vec<GcnLayerParams>>,
    /// Ascending blocks, indexed by level (0 = finest), applied coarse to fine.
    pub decoder: Vec<Vec<GcnLayerParams>>,
    /// Per-level prediction heads emitting full-length sequences.
    pub heads: Vec<Vec<GcnLayerParams>>,
    pub mask_net: MaskNetParams,
    pub query_full: AffineParams,
    pub query_subject: AffineParams,
    pub query_task: AffineParams,
    pub write: AffineParams,
    pub slot_predictor: AffineParams,
    pub task_head: AffineParams,
    /// Per-coordinate-row input mean (not trained).
    pub norm_mean: Mat,
    /// Global input scale (not trained).
    pub norm_scale: f64,
}

impl ModelParams {
    pub fn init(dims: ModelDims, hierarchy: PoolingHierarchy, seed: u64) -> Self {
        assert_eq!(dims.level_sizes, hierarchy.level_sizes);
        let mut rng = stream(seed, Stream::ParamInit);
        let f = dims.embed_dim;
        let d = dims.slot_dim();
        let levels = dims.levels();

        let mut encoder = Vec::with_capacity(levels);
        for (l, &k) in dims.level_sizes.iter().enumerate() {
            let f_in = if l == 0 { dims.t_total } else { f };
            encoder.push(vec![
                GcnLayerParams::init(k, f_in, f, Activation::Tanh, &mut rng),
                GcnLayerParams::init(k, f, f, Activation::Tanh, &mut rng),
            ]);
        }
        let decoder = dims
            .level_sizes
            .iter()
            .map(|&k| {
                vec![
                    GcnLayerParams::init(k, f, f, Activation::Tanh, &mut rng),
                    GcnLayerParams::init(k, f, f, Activation::Tanh, &mut rng),
                ]
            })
            .collect();
        let heads = dims
            .level_sizes
            .iter()
            .map(|&k| {
                vec![
                    GcnLayerParams::init(k, f, f, Activation::Tanh, &mut rng),
                    GcnLayerParams::init(k, f, dims.t_total, Activation::Identity, &mut rng),
                ]
            })
            .collect();

        let mask_net = MaskNetParams {
            w1: Mat::glorot(d, dims.mask_hidden, &mut rng),
            b1: Mat::zeros(1, dims.mask_hidden),
            w2: Mat::zeros(dims.mask_hidden, 3 * d),
            b2: Mat::zeros(1, 3 * d),
        };

        let k0 = dims.level_sizes[0];
        ModelParams {
            query_full: AffineParams::init(d, d, &mut rng),
            query_subject: AffineParams::init(d, d, &mut rng),
            query_task: AffineParams::init(d, d, &mut rng),
            write: AffineParams::init(3 * d, d, &mut rng),
            slot_predictor: AffineParams::init(d + dims.slots, dims.slots, &mut rng),
            task_head: AffineParams::init(d, dims.n_actions, &mut rng),
            mask_net,
            encoder,
            decoder,
            heads,
            norm_mean: Mat::zeros(k0, 1),
            norm_scale: 1.0,
            dims,
            hierarchy,
        }
    }

    /// All trainable tensors in a fixed order: (name, matrix).
    pub fn visit(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (section, blocks) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("head", &self.heads),
        ] {
            for (l, block) in blocks.iter().enumerate() {
                for (i, layer) in block.iter().enumerate() {
                    out.push((format!("{section}.{l}.{i}.adjacency"), &layer.adjacency));
                    out.push((format!("{section}.{l}.{i}.weight"), &layer.weight));
                    out.push((format!("{section}.{l}.{i}.bias"), &layer.bias));
                }
            }
        }
        out.push(("mask.w1".into(), &self.mask_net.w1));
        out.push(("mask.b1".into(), &self.mask_net.b1));
        out.push(("mask.w2".into(), &self.mask_net.w2));
        out.push(("mask.b2".into(), &self.mask_net.b2));
        for (name, affine) in [
            ("query.full", &self.query_full),
            ("query.subject", &self.query_subject),
            ("query.task", &self.query_task),
            ("write", &self.write),
            ("slot_predictor", &self.slot_predictor),
            ("task_head", &self.task_head),
        ] {
            out.push((format!("{name}.w"), &affine.w));
            out.push((format!("{name}.b"), &affine.b));
        }
        out
    }

    /// Mutable counterpart of [`visit`], same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (section, blocks) in [
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
            ("head", &mut self.heads),
        ] {
            for (l, block) in blocks.iter_mut().enumerate() {
                for (i, layer) in block.iter_mut().enumerate() {
                    out.push((format!("{section}.{l}.{i}.adjacency"), &mut layer.adjacency));
                    out.push((format!("{section}.{l}.{i}.weight"), &mut layer.weight));
                    out.push((format!("{section}.{l}.{i}.bias"), &mut layer.bias));
                }
            }
        }
        out.push(("mask.w1".into(), &mut self.mask_net.w1));
        out.push(("mask.b1".into(), &mut self.mask_net.b1));
        out.push(("mask.w2".into(), &mut self.mask_net.w2));
        out.push(("mask.b2".into(), &mut self.mask_net.b2));
        for (name, affine) in [
            ("query.full", &mut self.query_full),
            ("query.subject", &mut self.query_subject),
            ("query.task", &mut self.query_task),
            ("write", &mut self.write),
            ("slot_predictor", &mut self.slot_predictor),
            ("task_head", &mut self.task_head),
        ] {
            out.push((format!("{name}.w"), &mut affine.w));
            out.push((format!("{name}.b"), &mut affine.b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, m)| m.len()).sum()
    }

    /// Load every trainable tensor onto a tape.
    pub fn load(&self, tape: &mut Tape) -> ParamVars {
        let gcn = |tape: &mut Tape, layer: &GcnLayerParams| GcnLayerVars {
            adjacency: tape.leaf(layer.adjacency.clone()),
            weight: tape.leaf(layer.weight.clone()),
            bias: tape.leaf(layer.bias.clone()),
            activation: layer.activation,
        };
        let affine = |tape: &mut Tape, a: &AffineParams| AffineVars {
            w: tape.leaf(a.w.clone()),
            b: tape.leaf(a.b.clone()),
        };
        let blocks = |tape: &mut Tape, blocks: &Vec<Vec<GcnLayerParams>>| -> Vec<Vec<GcnLayerVars>> {
            blocks.iter().map(|b| b.iter().map(|l| gcn(tape, l)).collect()).collect()
        };
        ParamVars {
            encoder: blocks(tape, &self.encoder),
            decoder: blocks(tape, &self.decoder),
            heads: blocks(tape, &self.heads),
            mask_net: MaskNetVars {
                w1: tape.leaf(self.mask_net.w1.clone()),
                b1: tape.leaf(self.mask_net.b1.clone()),
                w2: tape.leaf(self.mask_net.w2.clone()),
                b2: tape.leaf(self.mask_net.b2.clone()),
            },
            query_full: affine(tape, &self.query_full),
            query_subject: affine(tape, &self.query_subject),
            query_task: affine(tape, &self.query_task),
            write: affine(tape, &self.write),
            slot_predictor: affine(tape, &self.slot_predictor),
            task_head: affine(tape, &self.task_head),
        }
    }
}

#[derive(Clone, Copy)]
pub struct GcnLayerVars {
    pub adjacency: Var,
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

#[derive(Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct MaskNetVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct ParamVars {
    pub encoder: Vec<Vec<GcnLayerVars>>,
    pub decoder: Vec<Vec<GcnLayerVars>>,
    pub heads: Vec<Vec<GcnLayerVars>>,
    pub mask_net: MaskNetVars,
    pub query_full: AffineVars,
    pub query_subject: AffineVars,
    pub query_task: AffineVars,
    pub write: AffineVars,
    pub slot_predictor: AffineVars,
    pub task_head: AffineVars,
}

impl ParamVars {
    /// Tape handles in the same order as [`ModelParams::visit`].
    pub fn visit(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for blocks in [&self.encoder, &self.decoder, &self.heads] {
            for block in blocks {
                for layer in block {
                    out.push(layer.adjacency);
                    out.push(layer.weight);
                    out.push(layer.bias);
                }
            }
        }
        out.extend([self.mask_net.w1, self.mask_net.b1, self.mask_net.w2, self.mask_net.b2]);
        for affine in [
            &self.query_full,
            &self.query_subject,
            &self.query_task,
            &self.write,
            &self.slot_predictor,
            &self.task_head,
        ] {
            out.push(affine.w);
            out.push(affine.b);
        }
        out
    }
}

/// Per-tape constants: pooling/unpooling matrices and fixed masks.
pub struct GraphContext {
    pub pools: Vec<Var>,
    pub unpools: Vec<Var>,
    pub fixed_masks: Option<[Var; 3]>,
}

pub fn graph_context(
    tape: &mut Tape,
    params: &ModelParams,
    factorisation: bool,
) -> Result<GraphContext> {
    let h = &params.hierarchy;
    let pools = (0..h.levels() - 1).map(|l| tape.leaf(h.pool_matrix(l))).collect();
    let unpools = (0..h.levels() - 1).map(|l| tape.leaf(h.unpool_matrix(l))).collect();
    let fixed_masks = if factorisation {
        let fixed = factorise::fixed_masks(params.dims.latent_rows(), params.dims.embed_dim)?;
        Some([
            tape.leaf(fixed[0].clone()),
            tape.leaf(fixed[1].clone()),
            tape.leaf(fixed[2].clone()),
        ])
    } else {
        None
    };
    Ok(GraphContext { pools, unpools, fixed_masks })
}

/// Dataflow switches for one forward pass, resolved from the run config.
#[derive(Clone, Copy, Debug)]
pub struct ForwardSettings {
    pub factorisation: bool,
    pub multi_head: bool,
    pub memory: bool,
    pub dynamic_mask: bool,
    pub mask_temperature: f64,
    pub global_residual: bool,
    pub block_residual: bool,
}

impl ForwardSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ForwardSettings {
            factorisation: cfg.factorisation,
            // multi-head retrieval needs the factorised queries
            multi_head: cfg.multi_head && cfg.factorisation,
            memory: cfg.memory,
            dynamic_mask: cfg.dynamic_mask,
            mask_temperature: cfg.mask_temperature,
            global_residual: cfg.global_residual,
            block_residual: cfg.block_residual,
        }
    }
}

/// Everything the loss composition needs from one item's forward pass.
pub struct ItemForward {
    /// Per-level predictions, K_l x t_total, normalised space.
    pub preds: Vec<Var>,
    /// Coarsest-scale encoding.
    pub latent: Var,
    pub masks: Option<[Var; 3]>,
    pub factors: Option<[Var; 3]>,
    pub subject_summary: Option<Var>,
    pub task_summary: Option<Var>,
    /// Retrieval weights (full, subject, task), each 1 x s.
    pub betas: Option<[Var; 3]>,
    /// Concatenated retrieved content, K3 x 3F, input to the write path.
    pub write_input: Option<Var>,
}

/// Build the forward graph for one input window (already padded and
/// normalised, K0 x t_total).
pub fn forward_item(
    tape: &mut Tape,
    pv: &ParamVars,
    ctx: &GraphContext,
    set: &ForwardSettings,
    input_norm: &Mat,
    memory_slots: Option<Var>,
    gumbel_noise: Option<&[Mat; 3]>,
) -> ItemForward {
    let input = tape.leaf(input_norm.clone());
    let enc = backbone::encode(tape, &pv.encoder, &ctx.pools, input, set.block_residual);
    let latent = *enc.scales.last().expect("encoder emits all scales");

    // factorisation
    let (masks, factors, subject_summary, task_summary) = if set.factorisation {
        let fixed = ctx.fixed_masks.as_ref().expect("fixed masks present when factorising");
        let residuals = if set.dynamic_mask {
            Some(factorise::mask_residuals(tape, &pv.mask_net, latent))
        } else {
            None
        };
        let masks = factorise::normalize_masks(
            tape,
            fixed,
            residuals.as_ref(),
            set.mask_temperature,
            gumbel_noise,
        );
        let factors = factorise::factorise(tape, latent, &masks);
        // One embedding per window, so the temporal summary is the
        // singleton mean.
        let subject_summary = factorise::pool_summary(tape, &[factors[0]]);
        let task_summary = factorise::pool_summary(tape, &[factors[1]]);
        (Some(masks), Some(factors), Some(subject_summary), Some(task_summary))
    } else {
        (None, None, None, None)
    };

    // memory read path
    let (aggregate, betas, write_input) = match memory_slots {
        Some(mem) if set.memory => {
            let q_full = memory::make_query(tape, &pv.query_full, latent);
            let beta_full = memory::attend(tape, q_full, mem, None);
            let mu_full = memory::read(tape, beta_full, mem, None, latent_shape(tape, latent));
            let (beta_sub, mu_sub, beta_task, mu_task) = if set.multi_head {
                let factors = factors.as_ref().expect("multi-head needs factorised features");
                let masks = masks.as_ref().expect("multi-head needs masks");
                let q_sub = memory::make_query(tape, &pv.query_subject, factors[0]);
                let q_task = memory::make_query(tape, &pv.query_task, factors[1]);
                let mask_sub = flatten_mask(tape, masks[0]);
                let mask_task = flatten_mask(tape, masks[1]);
                let beta_sub = memory::attend(tape, q_sub, mem, Some(mask_sub));
                let beta_task = memory::attend(tape, q_task, mem, Some(mask_task));
                let mu_sub =
                    memory::read(tape, beta_sub, mem, Some(mask_sub), latent_shape(tape, latent));
                let mu_task =
                    memory::read(tape, beta_task, mem, Some(mask_task), latent_shape(tape, latent));
                (beta_sub, mu_sub, beta_task, mu_task)
            } else {
                (beta_full, mu_full, beta_full, mu_full)
            };
            let aggregate = memory::aggregate(tape, mu_full, mu_sub, mu_task, latent);
            let cat = tape.concat_cols(mu_full, mu_sub);
            let write_input = tape.concat_cols(cat, mu_task);
            (aggregate, Some([beta_full, beta_sub, beta_task]), Some(write_input))
        }
        _ => (latent, None, None),
    };

    // decoder + heads
    let dec = backbone::decode(
        tape,
        &pv.decoder,
        &pv.heads,
        &ctx.unpools,
        aggregate,
        set.block_residual,
    );
    let mut preds = dec.preds;

    if set.global_residual {
        // Predict offsets from the padded input, pooled to each scale.
        let mut pooled = input;
        preds[0] = tape.add(preds[0], pooled);
        for l in 1..preds.len() {
            pooled = tape.matmul(ctx.pools[l - 1], pooled);
            preds[l] = tape.add(preds[l], pooled);
        }
    }

    ItemForward {
        preds,
        latent,
        masks,
        factors,
        subject_summary,
        task_summary,
        betas,
        write_input,
    }
}

fn latent_shape(tape: &Tape, latent: Var) -> (usize, usize) {
    let m = tape.value(latent);
    (m.rows, m.cols)
}

fn flatten_mask(tape: &mut Tape, mask: Var) -> Var {
    let len = tape.value(mask).len();
    tape.reshape(mask, 1, len)
}

/// Normalise a raw coordinate matrix in place: (x - row_mean) / scale.
pub fn normalize_input(params: &ModelParams, raw: &Mat) -> Mat {
    Mat::from_fn(raw.rows, raw.cols, |r, c| {
        (raw.at(r, c) - params.norm_mean.at(r, 0)) / params.norm_scale
    })
}

/// Undo [`normalize_input`].
pub fn denormalize_output(params: &ModelParams, norm: &Mat) -> Mat {
    Mat::from_fn(norm.rows, norm.cols, |r, c| {
        norm.at(r, c) * params.norm_scale + params.norm_mean.at(r, 0)
    })
}

/// Build dims + params for a configuration and dataset hierarchy.
pub fn build_model(
    cfg: &RunConfig,
    hierarchy: &PoolingHierarchy,
    n_actions: usize,
) -> Result<ModelParams> {
    if n_actions == 0 {
        return Err(Error::Config("dataset has no action labels".into()));
    }
    let dims = ModelDims::from_config(cfg, hierarchy, n_actions);
    Ok(ModelParams::init(dims, hierarchy.clone(), cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> ModelParams {
        let h = PoolingHierarchy::contiguous(&[12, 8, 6, 4]).unwrap();
        let dims = ModelDims {
            level_sizes: h.level_sizes.clone(),
            embed_dim: 6,
            t_obs: 5,
            t_total: 9,
            slots: 3,
            mask_hidden: 8,
            n_actions: 3,
        };
        ModelParams::init(dims, h, 7)
    }

    #[test]
    fn visit_orders_agree() {
        let mut params = tiny_params();
        let names: Vec<String> = params.visit().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = params.visit_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);

        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        assert_eq!(pv.visit().len(), names.len());
        // Values on tape match the source matrices.
        for ((_, m), v) in params.visit().iter().zip(pv.visit()) {
            assert_eq!(tape.value(v), *m);
        }
    }

    #[test]
    fn forward_shapes_full_model() {
        let params = tiny_params();
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, true).unwrap();
        let set = ForwardSettings {
            factorisation: true,
            multi_head: true,
            memory: true,
            dynamic_mask: true,
            mask_temperature: 0.5,
            global_residual: true,
            block_residual: false,
        };
        let input = Mat::from_fn(12, 9, |r, c| (r as f64 - c as f64) * 0.05);
        let mem = tape.leaf(Mat::uniform(
            3,
            params.dims.slot_dim(),
            0.1,
            &mut stream(3, Stream::MemoryInit),
        ));
        let out = forward_item(&mut tape, &pv, &ctx, &set, &input, Some(mem), None);
        assert_eq!(out.preds.len(), 4);
        for (l, &k) in params.dims.level_sizes.iter().enumerate() {
            assert_eq!(tape.value(out.preds[l]).shape(), (k, 9));
        }
        assert_eq!(tape.value(out.latent).shape(), (4, 6));
        let betas = out.betas.unwrap();
        for b in betas {
            let m = tape.value(b);
            assert_eq!(m.shape(), (1, 3));
            assert!((m.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(tape.value(out.write_input.unwrap()).shape(), (4, 18));
    }

    #[test]
    fn forward_without_memory_skips_read_write() {
        let params = tiny_params();
        let mut tape = Tape::new();
        let pv = params.load(&mut tape);
        let ctx = graph_context(&mut tape, &params, true).unwrap();
        let set = ForwardSettings {
            factorisation: true,
            multi_head: false,
            memory: false,
            dynamic_mask: true,
            mask_temperature: 0.5,
            global_residual: false,
            block_residual: false,
        };
        let input = Mat::from_fn(12, 9, |r, c| ((r + c) as f64).sin());
        let out = forward_item(&mut tape, &pv, &ctx, &set, &input, None, None);
        assert!(out.betas.is_none());
        assert!(out.write_input.is_none());
    }

    #[test]
    fn forward_is_pure_given_parameters() {
        let params = tiny_params();
        let set = ForwardSettings {
            factorisation: true,
            multi_head: true,
            memory: false,
            dynamic_mask: true,
            mask_temperature: 0.5,
            global_residual: true,
            block_residual: false,
        };
        let input = Mat::from_fn(12, 9, |r, c| ((r * 3 + c) as f64 * 0.11).cos());
        let run = || {
            let mut tape = Tape::new();
            let pv = params.load(&mut tape);
            let ctx = graph_context(&mut tape, &params, true).unwrap();
            let out = forward_item(&mut tape, &pv, &ctx, &set, &input, None, None);
            tape.value(out.preds[0]).clone()
        };
        assert_eq!(run(), run());
    }
}
