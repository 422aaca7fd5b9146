//! Pose sequences: loading, synthesis, preprocessing and metrics.
//!
//! Canonical on-disk form is one CSV per sequence (one frame per row,
//! 3*J columns ordered x1,y1,z1,...) plus a JSON manifest carrying labels,
//! splits, per-sequence fps and optionally the pooling hierarchy. All
//! distances are millimetres.

pub mod hierarchy;
pub mod metrics;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use hierarchy::PoolingHierarchy;

use crate::tensor::Mat;
use crate::{Error, Result};

/// A single pose: J joints in 3-D, millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub coords: Vec<[f64; 3]>,
}

impl Pose {
    pub fn joints(&self) -> usize {
        self.coords.len()
    }

    /// Flat row x1,y1,z1,x2,... as stored on disk.
    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "pose row has {} values, not a multiple of 3",
                values.len()
            )));
        }
        let coords = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Pose { coords })
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Time-ordered poses with labels; at least one frame, constant joint count.
#[derive(Clone, Debug)]
pub struct PoseSequence {
    pub frames: Vec<Pose>,
    pub fps: f64,
    pub subject_id: String,
    pub action_label: String,
    pub split: Split,
}

impl PoseSequence {
    pub fn new(
        frames: Vec<Pose>,
        fps: f64,
        subject_id: impl Into<String>,
        action_label: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Argument("pose sequence must have at least one frame".into()));
        }
        let j = frames[0].joints();
        if let Some(bad) = frames.iter().position(|f| f.joints() != j) {
            return Err(Error::Shape(format!(
                "frame {bad} has {} joints, expected {j}",
                frames[bad].joints()
            )));
        }
        if frames.iter().any(|f| !f.is_finite()) {
            return Err(Error::Format {
                path: PathBuf::new(),
                detail: "non-finite coordinate in pose sequence".into(),
            });
        }
        Ok(PoseSequence {
            frames,
            fps,
            subject_id: subject_id.into(),
            action_label: action_label.into(),
            split,
        })
    }

    pub fn joints(&self) -> usize {
        self.frames[0].joints()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Replicate the final pose `horizon` more times, the standard padding that
/// turns an observation into a full-length model input.
pub fn replicate_pad(seq: &PoseSequence, horizon: usize) -> Result<PoseSequence> {
    if seq.frames.is_empty() {
        return Err(Error::Argument("cannot pad an empty sequence".into()));
    }
    let mut out = seq.clone();
    let last = out.frames.last().expect("non-empty").clone();
    out.frames.extend(std::iter::repeat(last).take(horizon));
    Ok(out)
}

/// Keep frames 0, factor, 2*factor, ... and divide the fps accordingly.
pub fn temporal_downsample(seq: &PoseSequence, factor: usize) -> Result<PoseSequence> {
    if factor == 0 {
        return Err(Error::Argument("downsample factor must be >= 1".into()));
    }
    let mut out = seq.clone();
    out.frames = seq.frames.iter().step_by(factor).cloned().collect();
    out.fps = seq.fps / factor as f64;
    Ok(out)
}

/// Stack frames into the model's K0 x T coordinate matrix: row 3j+a holds
/// axis a of joint j over the columns (frames).
pub fn coord_matrix(frames: &[Pose]) -> Mat {
    let t = frames.len();
    let k0 = frames.first().map_or(0, |f| f.joints() * 3);
    let mut m = Mat::zeros(k0, t);
    for (col, frame) in frames.iter().enumerate() {
        for (j, c) in frame.coords.iter().enumerate() {
            for a in 0..3 {
                *m.at_mut(j * 3 + a, col) = c[a];
            }
        }
    }
    m
}

/// Inverse of [`coord_matrix`]: columns back into poses.
pub fn frames_from_matrix(m: &Mat) -> Vec<Pose> {
    assert_eq!(m.rows % 3, 0, "coordinate matrix rows must be a multiple of 3");
    let joints = m.rows / 3;
    (0..m.cols)
        .map(|col| {
            let coords = (0..joints)
                .map(|j| [m.at(j * 3, col), m.at(j * 3 + 1, col), m.at(j * 3 + 2, col)])
                .collect();
            Pose { coords }
        })
        .collect()
}

// ── manifest ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    subject_id: String,
    action_label: String,
    split: Split,
    fps: f64,
}

#[derive(Serialize, Deserialize)]
struct HierarchySpec {
    level_sizes: Vec<usize>,
    /// Per level transition, fine row -> coarse row.
    assignments: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hierarchy: Option<HierarchySpec>,
}

/// Sequences plus the pooling hierarchy they are scored against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<PoseSequence>,
    pub hierarchy: PoolingHierarchy,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PoseSequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    /// Sorted distinct action labels across the whole dataset; the stable
    /// class-index mapping for the task head.
    pub fn action_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> =
            self.sequences.iter().map(|s| s.action_label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sequences.iter().map(|s| s.subject_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn parse_pose_csv(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut frames = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: bad number {tok:?}", lineno + 1),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() % 3 != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "line {}: {} columns, not divisible by 3",
                    lineno + 1,
                    values.len()
                ),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {} columns, expected {w}", lineno + 1, values.len()),
                })
            }
            _ => {}
        }
        frames.push(Pose::from_flat(&values)?);
    }
    if frames.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "no frames".into(),
        });
    }
    Ok(frames)
}

/// Load a manifest and every sequence it references. CSV paths are resolved
/// relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("manifest parse error: {e}"),
    })?;
    if manifest.entries.is_empty() {
        log::warn!("manifest {} lists no sequences", path.display());
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut sequences = Vec::new();
    for entry in &manifest.entries {
        let csv_path = base.join(&entry.path);
        let frames = parse_pose_csv(&csv_path)?;
        sequences.push(PoseSequence::new(
            frames,
            entry.fps,
            entry.subject_id.clone(),
            entry.action_label.clone(),
            entry.split,
        )?);
    }
    let hierarchy = match &manifest.hierarchy {
        Some(spec) => {
            PoolingHierarchy::from_assignments(spec.level_sizes.clone(), &spec.assignments)?
        }
        None => {
            let h = PoolingHierarchy::default_skeleton();
            if let Some(seq) = sequences.first() {
                if seq.joints() * 3 != h.level_sizes[0] {
                    return Err(Error::Config(format!(
                        "dataset has {} joints; supply a hierarchy in the manifest (default \
                         grouping expects 22)",
                        seq.joints()
                    )));
                }
            }
            h
        }
    };
    if let Some(seq) = sequences.first() {
        if seq.joints() * 3 != hierarchy.level_sizes[0] {
            return Err(Error::Config(format!(
                "hierarchy K0={} does not match {} joints",
                hierarchy.level_sizes[0],
                seq.joints()
            )));
        }
    }
    Ok(Dataset { sequences, hierarchy })
}

/// Write a dataset as CSV pose files plus `manifest.json` under `dir`.
/// Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let name = format!("seq_{i:04}.csv");
        let mut text = String::new();
        for frame in &seq.frames {
            let row: Vec<String> = frame.flat().iter().map(|v| format!("{v:.6}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(dir.join(&name), text)?;
        entries.push(ManifestEntry {
            path: name,
            subject_id: seq.subject_id.clone(),
            action_label: seq.action_label.clone(),
            split: seq.split,
            fps: seq.fps,
        });
    }
    let manifest = ManifestFile {
        entries,
        hierarchy: Some(HierarchySpec {
            level_sizes: dataset.hierarchy.level_sizes.clone(),
            assignments: dataset.hierarchy.assignments(),
        }),
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_of(frames: Vec<Vec<f64>>, fps: f64) -> PoseSequence {
        let poses = frames.iter().map(|f| Pose::from_flat(f).unwrap()).collect();
        PoseSequence::new(poses, fps, "s0", "act", Split::Train).unwrap()
    }

    #[test]
    fn pad_zero_is_identity() {
        let s = seq_of(vec![vec![1.0, 2.0, 3.0]; 3], 25.0);
        let padded = replicate_pad(&s, 0).unwrap();
        assert_eq!(padded.len(), 3);
    }

    #[test]
    fn pad_replicates_last_pose() {
        let mut frames = vec![vec![0.0, 0.0, 0.0]; 2];
        frames.push(vec![7.0, 8.0, 9.0]);
        let s = seq_of(frames, 25.0);
        let padded = replicate_pad(&s, 2).unwrap();
        assert_eq!(padded.len(), 5);
        assert_eq!(padded.frames[3], padded.frames[2]);
        assert_eq!(padded.frames[4].coords[0], [7.0, 8.0, 9.0]);
    }

    #[test]
    fn downsample_strides_and_divides_fps() {
        let frames: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0, 0.0]).collect();
        let s = seq_of(frames, 50.0);
        let d = temporal_downsample(&s, 2).unwrap();
        assert_eq!(d.len(), 5);
        let kept: Vec<f64> = d.frames.iter().map(|f| f.coords[0][0]).collect();
        assert_eq!(kept, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(d.fps, 25.0);
    }

    #[test]
    fn downsample_factor_one_is_identity() {
        let s = seq_of(vec![vec![1.0, 2.0, 3.0]; 4], 25.0);
        let d = temporal_downsample(&s, 1).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.fps, 25.0);
    }

    #[test]
    fn downsample_factor_zero_rejected() {
        let s = seq_of(vec![vec![1.0, 2.0, 3.0]], 25.0);
        assert!(matches!(temporal_downsample(&s, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn pose_from_66_values_reshapes_to_22_joints() {
        let row: Vec<f64> = (0..66).map(|i| i as f64).collect();
        let p = Pose::from_flat(&row).unwrap();
        assert_eq!(p.joints(), 22);
        assert_eq!(p.coords[1], [3.0, 4.0, 5.0]);
    }

    #[test]
    fn coord_matrix_roundtrip() {
        let frames = vec![
            Pose::from_flat(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            Pose::from_flat(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap(),
        ];
        let m = coord_matrix(&frames);
        assert_eq!(m.shape(), (6, 2));
        assert_eq!(m.at(3, 1), 10.0);
        assert_eq!(frames_from_matrix(&m), frames);
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64; 66]).collect();
        let ds = Dataset {
            sequences: vec![
                seq_of(frames.clone(), 25.0),
                seq_of(frames, 25.0),
            ],
            hierarchy: PoolingHierarchy::default_skeleton(),
        };
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.sequences.len(), 2);
        assert_eq!(loaded.sequences[0].len(), 4);
        assert_eq!(loaded.hierarchy.level_sizes, vec![66, 36, 21, 12]);

        // Missing file names the path.
        let bad = dir.path().join("manifest_bad.json");
        std::fs::write(
            &bad,
            r#"{"entries":[{"path":"nope.csv","subject_id":"s","action_label":"a","split":"train","fps":25.0}]}"#,
        )
        .unwrap();
        match load_manifest(&bad) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("nope.csv")),
            other => panic!("expected ingestion error, got {other:?}"),
        }

        // Column count not divisible by 3.
        std::fs::write(dir.path().join("bad.csv"), "1.0,2.0\n").unwrap();
        let bad2 = dir.path().join("manifest_bad2.json");
        std::fs::write(
            &bad2,
            r#"{"entries":[{"path":"bad.csv","subject_id":"s","action_label":"a","split":"train","fps":25.0}]}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&bad2), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_manifest_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, r#"{"entries":[]}"#).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert!(ds.sequences.is_empty());
    }

    proptest! {
        // Frame-count contract of pad + downsample composition.
        #[test]
        fn pad_then_downsample_count(t_obs in 1usize..20, horizon in 0usize..20, factor in 1usize..6) {
            let s = seq_of(vec![vec![1.0, 2.0, 3.0]; t_obs], 50.0);
            let padded = replicate_pad(&s, horizon).unwrap();
            let down = temporal_downsample(&padded, factor).unwrap();
            let expected = (t_obs + horizon + factor - 1) / factor;
            prop_assert_eq!(down.len(), expected);
        }

        // Pooling is linear in its input.
        #[test]
        fn pooling_linearity(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, crate::rng::Stream::ParamInit);
            let h = PoolingHierarchy::contiguous(&[9, 4]).unwrap();
            let x = Mat::from_fn(9, 3, |_, _| rng.gen_range(-5.0..5.0));
            let y = Mat::from_fn(9, 3, |_, _| rng.gen_range(-5.0..5.0));
            let lhs = h.pool_joints(&x.scale(alpha).add(&y.scale(beta)), 0).unwrap();
            let rhs = h.pool_joints(&x, 0).unwrap().scale(alpha).add(&h.pool_joints(&y, 0).unwrap().scale(beta));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }
}
