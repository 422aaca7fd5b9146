//! Layered run configuration.
//!
//! Precedence: command-line `--set key=value` overrides > config file >
//! named preset > built-in defaults. Unknown keys are rejected at every
//! layer, and the fully resolved config is echoed into each output
//! directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    // model
    pub embed_dim: usize,
    pub t_obs: usize,
    pub t_future: usize,
    pub memory_slots: usize,
    pub mask_hidden: usize,
    pub mask_temperature: f64,
    pub contrastive_margin: f64,
    // ablation toggles
    pub memory: bool,
    pub factorisation: bool,
    pub multi_head: bool,
    pub dynamic_mask: bool,
    pub loss_div: bool,
    pub loss_cons: bool,
    // architecture switches
    pub block_residual: bool,
    pub global_residual: bool,
    pub continual_eval: bool,
    // loss weights
    pub theta_pose: f64,
    pub theta_div: f64,
    pub theta_cons: f64,
    pub theta_sub: f64,
    pub theta_task: f64,
    // consolidation
    pub window: usize,
    pub window_count: usize,
    pub cons_epsilon: f64,
    // optimiser
    pub lr0: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    // synthetic data
    pub synth_subjects: usize,
    pub synth_tasks: usize,
    pub synth_seqs_per_pair: usize,
    pub synth_length: usize,
    pub synth_joints: usize,
    pub synth_fps: f64,
    pub synth_amplitude: f64,
    pub synth_noise_mm: f64,
    /// Temporal downsampling applied at load time (1 = none).
    pub downsample: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embed_dim: 48,
            t_obs: 10,
            t_future: 25,
            memory_slots: 16,
            mask_hidden: 64,
            mask_temperature: 0.5,
            contrastive_margin: 1.0,
            memory: true,
            factorisation: true,
            multi_head: true,
            dynamic_mask: true,
            loss_div: true,
            loss_cons: true,
            block_residual: false,
            global_residual: true,
            continual_eval: false,
            theta_pose: 0.4,
            theta_div: 0.15,
            theta_cons: 0.15,
            theta_sub: 0.15,
            theta_task: 0.15,
            window: 15,
            window_count: 8,
            cons_epsilon: 1e-8,
            lr0: 2e-4,
            decay: 0.98,
            decay_interval: 2,
            epochs: 30,
            batch_size: 16,
            seed: 1234,
            synth_subjects: 2,
            synth_tasks: 3,
            synth_seqs_per_pair: 4,
            synth_length: 35,
            synth_joints: 22,
            synth_fps: 25.0,
            synth_amplitude: 1.0,
            synth_noise_mm: 2.0,
            downsample: 1,
        }
    }
}

macro_rules! parse_value {
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>()
            .map_err(|_| Error::Config(format!("key `{}` expects an integer, got `{}`", $key, $v)))
    };
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>()
            .map_err(|_| Error::Config(format!("key `{}` expects an integer, got `{}`", $key, $v)))
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>()
            .map_err(|_| Error::Config(format!("key `{}` expects a number, got `{}`", $key, $v)))
    };
    (bool, $key:expr, $v:expr) => {
        match $v {
            "true" | "1" | "on" => Ok(true),
            "false" | "0" | "off" => Ok(false),
            _ => Err(Error::Config(format!("key `{}` expects a bool, got `{}`", $key, $v))),
        }
    };
}

macro_rules! format_value {
    (f64, $v:expr) => {
        format!("{:?}", $v)
    };
    ($kind:ident, $v:expr) => {
        format!("{}", $v)
    };
}

macro_rules! config_keys {
    ($($field:ident : $kind:ident),* $(,)?) => {
        /// All settable key names, in declaration order.
        pub const KEYS: &[&str] = &[$(stringify!($field)),*];

        impl RunConfig {
            /// Apply one `key=value` override.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = parse_value!($kind, key, value)?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), format_value!($kind, &self.$field))),*]
            }
        }
    };
}

config_keys! {
    embed_dim: usize,
    t_obs: usize,
    t_future: usize,
    memory_slots: usize,
    mask_hidden: usize,
    mask_temperature: f64,
    contrastive_margin: f64,
    memory: bool,
    factorisation: bool,
    multi_head: bool,
    dynamic_mask: bool,
    loss_div: bool,
    loss_cons: bool,
    block_residual: bool,
    global_residual: bool,
    continual_eval: bool,
    theta_pose: f64,
    theta_div: f64,
    theta_cons: f64,
    theta_sub: f64,
    theta_task: f64,
    window: usize,
    window_count: usize,
    cons_epsilon: f64,
    lr0: f64,
    decay: f64,
    decay_interval: usize,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    synth_subjects: usize,
    synth_tasks: usize,
    synth_seqs_per_pair: usize,
    synth_length: usize,
    synth_joints: usize,
    synth_fps: f64,
    synth_amplitude: f64,
    synth_noise_mm: f64,
    downsample: usize,
}

impl RunConfig {
    /// Named presets. `desk` is the laptop-scale configuration the test
    /// suites run on; `paper` is the full-scale configuration.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        match name {
            "default" => {}
            "desk" => {
                cfg.synth_seqs_per_pair = 40;
                cfg.lr0 = 1e-3;
            }
            "paper" => {
                cfg.embed_dim = 300;
                cfg.memory_slots = 64;
                cfg.epochs = 100;
                cfg.lr0 = 2e-4;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (expected default, desk or paper)"
                )))
            }
        }
        Ok(cfg)
    }

    /// Overlay keys from a TOML file; unknown keys are rejected by name.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        for (key, value) in table {
            let as_str = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => format!("{f:?}"),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "key `{key}`: unsupported value type {}",
                        other.type_str()
                    )))
                }
            };
            self.set(&key, &as_str)?;
        }
        Ok(())
    }

    /// Apply `key=value` strings from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for kv in overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("--set expects key=value, got `{kv}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.factorisation && self.embed_dim % 3 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by 3 for factorisation",
                self.embed_dim
            )));
        }
        if self.mask_temperature <= 0.0 {
            return Err(Error::Config("mask_temperature must be positive".into()));
        }
        if self.contrastive_margin <= 0.0 {
            return Err(Error::Config("contrastive_margin must be positive".into()));
        }
        for (name, w) in [
            ("theta_pose", self.theta_pose),
            ("theta_div", self.theta_div),
            ("theta_cons", self.theta_cons),
            ("theta_sub", self.theta_sub),
            ("theta_task", self.theta_task),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        if self.decay_interval == 0 {
            return Err(Error::Config("decay_interval must be >= 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be >= 2".into()));
        }
        if self.window_count == 0 {
            return Err(Error::Config("window_count must be >= 1".into()));
        }
        if self.cons_epsilon <= 0.0 {
            return Err(Error::Config("cons_epsilon must be positive".into()));
        }
        if self.memory_slots < 2 {
            return Err(Error::Config("memory_slots must be >= 2".into()));
        }
        if self.t_obs == 0 || self.t_future == 0 {
            return Err(Error::Config("t_obs and t_future must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn t_total(&self) -> usize {
        self.t_obs + self.t_future
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_subjects: self.synth_subjects,
            n_tasks: self.synth_tasks,
            seqs_per_pair: self.synth_seqs_per_pair,
            length: self.synth_length,
            joints: self.synth_joints,
            fps: self.synth_fps,
            amplitude_scale: self.synth_amplitude,
            noise_mm: self.synth_noise_mm,
        }
    }

    /// Render the resolved config, headed by the tool version, so output
    /// directories are self-describing.
    pub fn echo_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# motionmem {}", env!("CARGO_PKG_VERSION"));
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Write the resolved config into an output directory.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.toml"), self.echo_toml())?;
        Ok(())
    }
}

/// Learning-rate schedule: lr0 * decay^floor(epoch / interval).
pub fn lr_schedule(cfg: &RunConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_interval) as i32)
}
