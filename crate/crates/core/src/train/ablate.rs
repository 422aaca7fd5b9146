//! Ablation grids: per-variant toggle overrides, shared-seed runs and the
//! combined comparison table.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::{Error, Result};

use super::eval::{evaluate, EvalOptions};
use super::train;

/// The six runtime toggles a grid may override.
pub const TOGGLES: [&str; 6] =
    ["memory", "factorisation", "multi_head", "dynamic_mask", "loss_div", "loss_cons"];

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, bool)>,
}

/// Parse a TOML grid of `[[variants]]` entries; every key other than `name`
/// must be one of the six toggles.
pub fn parse_grid(text: &str) -> Result<Vec<Variant>> {
    let table: toml::Table =
        text.parse().map_err(|e| Error::Config(format!("grid parse error: {e}")))?;
    let list = table
        .get("variants")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Config("grid needs a [[variants]] list".into()))?;
    if list.is_empty() {
        return Err(Error::Config("grid lists no variants".into()));
    }
    let mut variants = Vec::new();
    for (i, item) in list.iter().enumerate() {
        let entry = item
            .as_table()
            .ok_or_else(|| Error::Config(format!("variant {i} is not a table")))?;
        let name = entry
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config(format!("variant {i} is missing `name`")))?
            .to_string();
        let mut overrides = Vec::new();
        for (key, value) in entry {
            if key == "name" {
                continue;
            }
            if !TOGGLES.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown toggle `{key}` in variant `{name}` (expected one of {TOGGLES:?})"
                )));
            }
            let flag = value
                .as_bool()
                .ok_or_else(|| Error::Config(format!("toggle `{key}` must be a bool")))?;
            overrides.push((key.clone(), flag));
        }
        variants.push(Variant { name, overrides });
    }
    Ok(variants)
}

pub fn apply_variant(base: &RunConfig, variant: &Variant) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (key, value) in &variant.overrides {
        cfg.set(key, if *value { "true" } else { "false" })?;
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    /// Resolved toggle states in [`TOGGLES`] order.
    pub flags: [bool; 6],
    pub per_horizon: Vec<f64>,
    pub average: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub horizons_ms: Vec<u32>,
    pub rows: Vec<AblationRow>,
    pub seed: u64,
}

fn resolved_flags(cfg: &RunConfig) -> [bool; 6] {
    [
        cfg.memory,
        cfg.factorisation,
        cfg.multi_head,
        cfg.dynamic_mask,
        cfg.loss_div,
        cfg.loss_cons,
    ]
}

fn dir_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Train and evaluate every variant with the shared seed; when `out_dir` is
/// given each variant writes its artifacts into its own sub-directory.
pub fn run_ablation(
    dataset: &Dataset,
    base: &RunConfig,
    variants: &[Variant],
    horizons_ms: &[u32],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for variant in variants {
        let cfg = apply_variant(base, variant)?;
        let trained = train(dataset, &cfg, None)?;
        let outcome = evaluate(
            &trained.model,
            &trained.memory,
            dataset,
            &cfg,
            &trained.actions,
            &EvalOptions {
                horizons_ms: horizons_ms.to_vec(),
                split: Split::Test,
                zero_velocity: false,
            },
        )?;
        if let Some(dir) = out_dir {
            let sub = dir.join(dir_name(&variant.name));
            std::fs::create_dir_all(&sub)?;
            cfg.echo_into(&sub)?;
            crate::checkpoint::save(
                &sub.join("model.ckpt"),
                &crate::checkpoint::Checkpoint {
                    model: trained.model.clone(),
                    memory: trained.memory.clone(),
                    adam: Some(trained.adam.clone()),
                    epoch: trained.epochs_done,
                    actions: trained.actions.clone(),
                },
            )?;
            std::fs::write(sub.join("metrics.csv"), super::metrics_csv(&trained.metrics))?;
            std::fs::write(sub.join("report.csv"), super::eval::report_to_csv(&outcome.report))?;
        }
        rows.push(AblationRow {
            name: variant.name.clone(),
            flags: resolved_flags(&cfg),
            per_horizon: outcome.report.average.clone(),
            average: outcome.report.overall_average(),
        });
    }
    Ok(AblationTable { horizons_ms: horizons_ms.to_vec(), rows, seed: base.seed })
}

pub fn table_csv(table: &AblationTable) -> String {
    let mut out = String::from("model");
    for t in TOGGLES {
        out.push_str(&format!(",{t}"));
    }
    for ms in &table.horizons_ms {
        out.push_str(&format!(",{ms}"));
    }
    out.push_str(",average\n");
    for row in &table.rows {
        out.push_str(&row.name.replace(',', ";"));
        for f in row.flags {
            out.push_str(if f { ",1" } else { ",0" });
        }
        for v in &row.per_horizon {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", row.average));
    }
    out.push_str(&format!("# seed,{}\n", table.seed));
    out
}

/// Aligned text table with checkmark columns, footer recording the shared
/// seed.
pub fn render_ablation(table: &AblationTable) -> String {
    let name_w = table.rows.iter().map(|r| r.name.len()).chain(["model".len()]).max().unwrap();
    let short = ["AM", "F", "Mh", "DM", "Div", "Cons"];
    let mut out = format!("{:<name_w$}", "model");
    for s in short {
        out.push_str(&format!(" {s:>4}"));
    }
    for ms in &table.horizons_ms {
        out.push_str(&format!(" {:>9}", format!("{ms}ms")));
    }
    out.push_str(&format!(" {:>9}\n", "avg"));
    for row in &table.rows {
        out.push_str(&format!("{:<name_w$}", row.name));
        for f in row.flags {
            out.push_str(&format!(" {:>4}", if f { "x" } else { "" }));
        }
        for v in &row.per_horizon {
            out.push_str(&format!(" {v:>9.2}"));
        }
        out.push_str(&format!(" {:>9.2}\n", row.average));
    }
    out.push_str(&format!("shared seed: {}\n", table.seed));
    out
}
