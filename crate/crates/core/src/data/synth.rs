//! Deterministic synthetic motion, desk-scale stand-in for mocap data.
//!
//! Every joint oscillates around a fixed rest skeleton. The frequency bank is
//! decided by the action, amplitudes and phase offsets by the subject, so the
//! two factors are separately recoverable from an observed window. Noise and
//! a global phase jitter are drawn per sequence from its own seeded stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, PoolingHierarchy, Pose, PoseSequence, Split};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

pub const DEFAULT_JOINTS: usize = 22;

/// Rest skeleton in millimetres (z up), matching the default hierarchy's
/// joint order.
#[rustfmt::skip]
const REST_POSE: [[f64; 3]; 22] = [
    [0.0, 0.0, 1000.0],    // pelvis
    [0.0, 0.0, 1150.0],    // spine
    [0.0, 10.0, 1300.0],   // chest
    [0.0, 0.0, 1450.0],    // neck
    [0.0, 20.0, 1550.0],   // head
    [-200.0, 0.0, 1400.0], // l shoulder
    [-320.0, 30.0, 1150.0],// l elbow
    [-380.0, 60.0, 920.0], // l wrist
    [-400.0, 80.0, 830.0], // l hand
    [200.0, 0.0, 1400.0],  // r shoulder
    [320.0, 30.0, 1150.0], // r elbow
    [380.0, 60.0, 920.0],  // r wrist
    [400.0, 80.0, 830.0],  // r hand
    [-110.0, 0.0, 950.0],  // l hip
    [-120.0, 20.0, 520.0], // l knee
    [-130.0, 30.0, 80.0],  // l ankle
    [-140.0, 140.0, 0.0],  // l foot
    [110.0, 0.0, 950.0],   // r hip
    [120.0, 20.0, 520.0],  // r knee
    [130.0, 30.0, 80.0],   // r ankle
    [140.0, 140.0, 0.0],   // r foot
    [0.0, 0.0, 1650.0],    // head top
];

const ACTION_NAMES: [&str; 6] = ["sway", "stride", "bounce", "twist", "reach", "spin"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_tasks: usize,
    pub seqs_per_pair: usize,
    /// Frames per sequence.
    pub length: usize,
    pub joints: usize,
    pub fps: f64,
    /// Global multiplier on all deviation from the rest pose (0 freezes the
    /// skeleton at rest).
    pub amplitude_scale: f64,
    /// Uniform per-coordinate noise half-width, millimetres.
    pub noise_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 2,
            n_tasks: 3,
            seqs_per_pair: 4,
            length: 35,
            joints: DEFAULT_JOINTS,
            fps: 25.0,
            amplitude_scale: 1.0,
            noise_mm: 2.0,
        }
    }
}

impl SynthConfig {
    /// The desk-scale preset: 240 sequences splitting 200/20/20.
    pub fn desk() -> Self {
        SynthConfig { seqs_per_pair: 40, ..SynthConfig::default() }
    }

    pub fn total_sequences(&self) -> usize {
        self.n_subjects * self.n_tasks * self.seqs_per_pair
    }
}

/// Two oscillation frequencies per task, well separated across tasks and
/// comfortably under Nyquist at 25 fps.
fn task_frequencies(task: usize) -> [f64; 2] {
    let base = 0.5 + 0.45 * task as f64;
    [base, 2.0 * base]
}

fn action_name(task: usize) -> String {
    match ACTION_NAMES.get(task) {
        Some(name) => (*name).to_string(),
        None => format!("task{task:02}"),
    }
}

struct SubjectStyle {
    /// Base oscillation amplitude, millimetres.
    amp: f64,
    /// Per joint/axis/frequency amplitude multiplier in [0.4, 1.6].
    gains: Vec<f64>,
    /// Per joint/axis/frequency phase offsets.
    phases: Vec<f64>,
}

fn subject_style(seed: u64, subject: usize, joints: usize) -> SubjectStyle {
    let mut rng = stream(seed, Stream::SynthSubject(subject as u64));
    let n = joints * 3 * 2;
    SubjectStyle {
        amp: 55.0 + 50.0 * subject as f64,
        gains: (0..n).map(|_| rng.gen_range(0.4..1.6)).collect(),
        phases: (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
    }
}

/// Generate the full labelled dataset. Splits cycle deterministically with
/// the global sequence index: 10 train / 1 val / 1 test out of every 12.
pub fn synth_motion(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    if config.n_subjects == 0 || config.n_tasks == 0 || config.seqs_per_pair == 0 {
        return Err(Error::Argument("all synthesis counts must be >= 1".into()));
    }
    if config.length == 0 || config.joints == 0 {
        return Err(Error::Argument("sequence length and joint count must be >= 1".into()));
    }

    let styles: Vec<SubjectStyle> = (0..config.n_subjects)
        .map(|s| subject_style(seed, s, config.joints))
        .collect();

    let mut sequences = Vec::with_capacity(config.total_sequences());
    let mut index = 0u64;
    for subject in 0..config.n_subjects {
        for task in 0..config.n_tasks {
            for _rep in 0..config.seqs_per_pair {
                let split = match index % 12 {
                    10 => Split::Val,
                    11 => Split::Test,
                    _ => Split::Train,
                };
                let mut rng = stream(seed, Stream::SynthSequence(index));
                let jitter = rng.gen_range(0.0..std::f64::consts::TAU);
                let freqs = task_frequencies(task);
                let style = &styles[subject];

                let mut frames = Vec::with_capacity(config.length);
                for frame in 0..config.length {
                    let t = frame as f64 / config.fps;
                    let mut coords = Vec::with_capacity(config.joints);
                    for j in 0..config.joints {
                        let rest = REST_POSE[j % REST_POSE.len()];
                        let mut c = [0.0f64; 3];
                        for a in 0..3 {
                            let mut dev = 0.0;
                            for (k, &f) in freqs.iter().enumerate() {
                                let idx = (j * 3 + a) * 2 + k;
                                dev += style.amp
                                    * style.gains[idx]
                                    * (std::f64::consts::TAU * f * t + style.phases[idx] + jitter)
                                        .sin();
                            }
                            dev += rng.gen_range(-config.noise_mm..=config.noise_mm);
                            c[a] = rest[a] + config.amplitude_scale * dev;
                        }
                        coords.push(c);
                    }
                    frames.push(Pose { coords });
                }

                sequences.push(PoseSequence::new(
                    frames,
                    config.fps,
                    format!("s{subject:02}"),
                    action_name(task),
                    split,
                )?);
                index += 1;
            }
        }
    }

    let hierarchy = if config.joints == DEFAULT_JOINTS {
        PoolingHierarchy::default_skeleton()
    } else {
        let k0 = config.joints * 3;
        PoolingHierarchy::contiguous(&[
            k0,
            (k0 / 2).max(3),
            (k0 / 3).max(2),
            (k0 / 5).max(1),
        ])?
    };
    Ok(Dataset { sequences, hierarchy })
}
