//! Horizon evaluation, report rendering and the error-curve plot.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::data::metrics::{mpjpe, zero_velocity_baseline};
use crate::data::{self, Dataset, Pose, PoseSequence, Split};
use crate::model::memory::MemoryState;
use crate::model::{self, factorise, memory, ForwardSettings, ModelParams};
use crate::autograd::Tape;
use crate::tensor::Mat;
use crate::{Error, Result};

use super::{build_windows, prepare_window, PreparedWindow};

/// Reportable horizons in milliseconds; at 25 fps they map to
/// {2, 4, 8, 10, 14, 25} frames.
pub const SUPPORTED_HORIZONS_MS: [u32; 6] = [80, 160, 320, 400, 560, 1000];

pub fn horizon_frames(ms: u32, fps: f64) -> Result<usize> {
    if !SUPPORTED_HORIZONS_MS.contains(&ms) {
        return Err(Error::Argument(format!(
            "horizon {ms} ms is not in the supported set {SUPPORTED_HORIZONS_MS:?}"
        )));
    }
    let frames = ms as f64 * fps / 1000.0;
    if (frames - frames.round()).abs() > 1e-9 || frames < 1.0 {
        return Err(Error::Argument(format!(
            "horizon {ms} ms is not a whole frame count at {fps} fps"
        )));
    }
    Ok(frames.round() as usize)
}

/// Per-action, per-horizon position errors plus the cross-action average.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub horizons_ms: Vec<u32>,
    pub horizon_frames: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub average: Vec<f64>,
}

impl EvalReport {
    /// Mean over the report's horizons of the average row.
    pub fn overall_average(&self) -> f64 {
        self.average.iter().sum::<f64>() / self.average.len() as f64
    }
}

pub struct EvalOptions {
    pub horizons_ms: Vec<u32>,
    pub split: Split,
    pub zero_velocity: bool,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Task-head accuracy over the evaluated windows (model path only).
    pub task_accuracy: Option<f64>,
    /// Per-window argmax segment of every mask coordinate (model path with
    /// factorisation only).
    pub mask_argmax: Vec<Vec<u8>>,
    /// Raw per-window predictions, for oracle checks and exports.
    pub predictions: Vec<Vec<Pose>>,
    pub window_actions: Vec<String>,
    /// Memory state after evaluation (changed only under continual mode).
    pub memory: MemoryState,
}

/// Prediction for one prepared window; optionally commits a memory write
/// (continual mode).
fn predict_window(
    params: &ModelParams,
    mem_state: &mut MemoryState,
    cfg: &RunConfig,
    item: &PreparedWindow,
    write_enabled: bool,
) -> (Vec<Pose>, Option<usize>, Option<Vec<u8>>) {
    let set = ForwardSettings::from_config(cfg);
    let mut tape = Tape::new();
    let pv = params.load(&mut tape);
    let ctx = model::graph_context(&mut tape, params, set.factorisation)
        .expect("context valid for trained model");
    let mem_var = cfg.memory.then(|| tape.leaf(mem_state.slots.clone()));
    let fwd = model::forward_item(&mut tape, &pv, &ctx, &set, &item.input_norm, mem_var, None);

    let finest = tape.value(fwd.preds[0]);
    let t_future = item.gt_future.len();
    let future_norm = Mat::from_fn(finest.rows, t_future, |r, c| {
        finest.at(r, finest.cols - t_future + c)
    });
    let future_mm = model::denormalize_output(params, &future_norm);
    let frames = data::frames_from_matrix(&future_mm);

    let task_pred = fwd.task_summary.map(|summary| {
        let logits = factorise::task_logits(&mut tape, &pv.task_head, summary);
        let row = tape.value(logits).row_slice(0);
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .unwrap_or(0)
    });

    let mask_argmax = fwd.masks.as_ref().map(|masks| {
        let m0 = tape.value(masks[0]).clone();
        let m1 = tape.value(masks[1]).clone();
        let m2 = tape.value(masks[2]).clone();
        (0..m0.len())
            .map(|i| {
                let vals = [m0.data[i], m1.data[i], m2.data[i]];
                vals.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite masks"))
                    .map(|(s, _)| s as u8)
                    .unwrap_or(0)
            })
            .collect()
    });

    if write_enabled && cfg.memory {
        if let (Some(write_input), Some(betas)) = (fwd.write_input, fwd.betas) {
            let wv = memory::write_vector(&mut tape, &pv.write, write_input);
            let combined = memory::combine_beta(&mut tape, betas[1], betas[2], betas[0]);
            let snapshot =
                memory::predict_update_slots(&mut tape, &pv.slot_predictor, wv, combined);
            let mem_var = mem_var.expect("memory enabled");
            let updated = memory::memory_update(&mut tape, mem_var, combined, wv);
            let new_slots = tape.value(updated).clone();
            let snap = tape.value(snapshot).row_slice(0).to_vec();
            mem_state.commit(new_slots, snap);
        }
    }

    (frames, task_pred, mask_argmax)
}

/// Score a model (or the zero-velocity baseline) over a split.
pub fn evaluate(
    params: &ModelParams,
    mem: &MemoryState,
    dataset: &Dataset,
    cfg: &RunConfig,
    actions: &[String],
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let dataset = super::preprocess(dataset, cfg)?;
    if dataset.split(opts.split).next().is_none() {
        return Err(Error::Argument(format!("{} split is empty", opts.split)));
    }
    let fps = dataset
        .split(opts.split)
        .next()
        .map(|s| s.fps)
        .expect("split checked non-empty");
    let mut frames_per_horizon = Vec::with_capacity(opts.horizons_ms.len());
    for &ms in &opts.horizons_ms {
        let frames = horizon_frames(ms, fps)?;
        if frames > cfg.t_future {
            return Err(Error::Argument(format!(
                "horizon {ms} ms needs {frames} future frames, model predicts {}",
                cfg.t_future
            )));
        }
        frames_per_horizon.push(frames);
    }

    let subjects = dataset.subject_ids();
    let raw = build_windows(&dataset, opts.split, cfg.t_obs, cfg.t_future, actions, &subjects)?;
    if raw.is_empty() {
        return Err(Error::Argument(format!(
            "{} split has no sequences long enough for a {}-frame window",
            opts.split,
            cfg.t_total()
        )));
    }

    let mut mem_state = mem.clone();
    let mut by_action: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(raw.len());
    let mut window_actions = Vec::with_capacity(raw.len());
    let mut mask_argmax = Vec::new();
    let mut task_hits = 0usize;
    let mut task_total = 0usize;

    for w in &raw {
        let pred = if opts.zero_velocity {
            let seq = PoseSequence::new(
                vec![w.last_obs.clone()],
                fps,
                "baseline",
                w.action.clone(),
                opts.split,
            )?;
            zero_velocity_baseline(&seq, w.gt_future.len())?
        } else {
            let item = prepare_window(params, w);
            let (frames, task_pred, masks) =
                predict_window(params, &mut mem_state, cfg, &item, cfg.continual_eval);
            if let Some(t) = task_pred {
                task_total += 1;
                if t == w.task {
                    task_hits += 1;
                }
            }
            if let Some(m) = masks {
                mask_argmax.push(m);
            }
            frames
        };

        let scores: Vec<f64> = frames_per_horizon
            .iter()
            .map(|&h| mpjpe(&pred[..h], &w.gt_future[..h]))
            .collect::<Result<_>>()?;
        by_action.entry(w.action.clone()).or_default().push(scores);
        window_actions.push(w.action.clone());
        predictions.push(pred);
    }

    let mut rows = Vec::new();
    for (action, scores) in &by_action {
        let n = scores.len() as f64;
        let mean: Vec<f64> = (0..frames_per_horizon.len())
            .map(|h| scores.iter().map(|s| s[h]).sum::<f64>() / n)
            .collect();
        rows.push((action.clone(), mean));
    }
    let average: Vec<f64> = (0..frames_per_horizon.len())
        .map(|h| rows.iter().map(|(_, r)| r[h]).sum::<f64>() / rows.len() as f64)
        .collect();

    Ok(EvalOutcome {
        report: EvalReport {
            horizons_ms: opts.horizons_ms.clone(),
            horizon_frames: frames_per_horizon,
            rows,
            average,
        },
        task_accuracy: (task_total > 0).then(|| task_hits as f64 / task_total as f64),
        mask_argmax,
        predictions,
        window_actions,
        memory: mem_state,
    })
}

// ── rendering ────────────────────────────────────────────────────────────

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("action");
    for ms in &report.horizons_ms {
        out.push_str(&format!(",{ms}"));
    }
    out.push('\n');
    for (action, vals) in &report.rows {
        out.push_str(action);
        for v in vals {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out.push_str("average");
    for v in &report.average {
        out.push_str(&format!(",{v:.6}"));
    }
    out.push('\n');
    out
}

pub fn report_from_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format { path: Default::default(), detail: "empty report".into() })?;
    let mut horizons_ms = Vec::new();
    for tok in header.split(',').skip(1) {
        horizons_ms.push(tok.parse::<u32>().map_err(|_| Error::Format {
            path: Default::default(),
            detail: format!("bad horizon `{tok}`"),
        })?);
    }
    let mut rows = Vec::new();
    let mut average = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split(',');
        let name = toks.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = toks
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Format {
                    path: Default::default(),
                    detail: format!("bad value `{t}`"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != horizons_ms.len() {
            return Err(Error::Format {
                path: Default::default(),
                detail: format!("row `{name}` has {} values, expected {}", vals.len(), horizons_ms.len()),
            });
        }
        if name == "average" {
            average = vals;
        } else {
            rows.push((name, vals));
        }
    }
    Ok(EvalReport { horizon_frames: Vec::new(), horizons_ms, rows, average })
}

/// Aligned text table, one action per row plus the average.
pub fn render_table(report: &EvalReport) -> String {
    let name_w = report
        .rows
        .iter()
        .map(|(a, _)| a.len())
        .chain(["action".len(), "average".len()])
        .max()
        .unwrap_or(8);
    let mut out = format!("{:<name_w$}", "action");
    for ms in &report.horizons_ms {
        out.push_str(&format!(" {:>9}", format!("{ms}ms")));
    }
    out.push('\n');
    for (action, vals) in &report.rows {
        out.push_str(&format!("{action:<name_w$}"));
        for v in vals {
            out.push_str(&format!(" {v:>9.2}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<name_w$}", "average"));
    for v in &report.average {
        out.push_str(&format!(" {v:>9.2}"));
    }
    out.push('\n');
    out
}

/// Minimal static SVG of average error against horizon.
pub fn horizon_curve_svg(report: &EvalReport) -> String {
    let (w, h, ml, mb) = (640.0, 400.0, 60.0, 40.0);
    let xs: Vec<f64> = report.horizons_ms.iter().map(|&m| m as f64).collect();
    let ys = &report.average;
    let x_max = xs.iter().cloned().fold(1.0, f64::max);
    let y_max = ys.iter().cloned().fold(1e-9, f64::max) * 1.1;
    let px = |x: f64| ml + (w - ml - 20.0) * x / x_max;
    let py = |y: f64| (h - mb) - (h - mb - 20.0) * y / y_max;
    let points: Vec<String> =
        xs.iter().zip(ys).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
    let mut marks = String::new();
    for (&x, &y) in xs.iter().zip(ys) {
        marks.push_str(&format!(
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"#,
            px(x),
            py(y)
        ));
        marks.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            px(x),
            h - mb + 16.0,
            x as u32
        ));
    }
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#,
            r#"<rect width="100%" height="100%" fill="white"/>"#,
            r#"<line x1="{ml}" y1="20" x2="{ml}" y2="{y0}" stroke="black"/>"#,
            r#"<line x1="{ml}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#,
            r#"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>"#,
            "{marks}",
            r#"<text x="{xc}" y="{h2}" font-size="13" text-anchor="middle">horizon (ms)</text>"#,
            r#"<text x="14" y="{yc}" font-size="13" transform="rotate(-90 14 {yc})" text-anchor="middle">average error (mm)</text>"#,
            r#"</svg>"#
        ),
        w = w,
        h = h,
        ml = ml,
        y0 = h - mb,
        x1 = w - 20.0,
        points = points.join(" "),
        marks = marks,
        xc = (ml + w) / 2.0,
        h2 = h - 8.0,
        yc = (h - mb) / 2.0,
    )
}
