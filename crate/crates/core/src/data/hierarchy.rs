//! Joint pooling hierarchy: the grouping maps that take the coordinate rows
//! of a pose through the four spatial scales.

use crate::tensor::Mat;
use crate::{Error, Result};

/// Grouping maps over coordinate rows for the four scales K0..K3.
///
/// `group_maps[l][c]` lists the fine rows of level `l` pooled into coarse row
/// `c` of level `l+1`; every map is a disjoint cover of the finer level.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingHierarchy {
    pub level_sizes: Vec<usize>,
    pub group_maps: Vec<Vec<Vec<usize>>>,
}

/// Joint-level grouping of the default 22-joint skeleton, pooling limb by
/// limb: 22 -> 12 -> 7 -> 4 joints, i.e. 66 -> 36 -> 21 -> 12 coordinate rows.
///
/// Joint order: pelvis, spine, chest, neck, head, l-shoulder, l-elbow,
/// l-wrist, l-hand, r-shoulder, r-elbow, r-wrist, r-hand, l-hip, l-knee,
/// l-ankle, l-foot, r-hip, r-knee, r-ankle, r-foot, head-top.
const SKELETON_JOINT_GROUPS: [&[&[usize]]; 3] = [
    &[
        &[0],
        &[1, 2],
        &[3],
        &[4, 21],
        &[5, 6],
        &[7, 8],
        &[9, 10],
        &[11, 12],
        &[13, 14],
        &[15, 16],
        &[17, 18],
        &[19, 20],
    ],
    &[&[0], &[1, 2], &[3], &[4, 5], &[6, 7], &[8, 9], &[10, 11]],
    &[&[0, 1, 2], &[3, 4], &[5], &[6]],
];

impl PoolingHierarchy {
    pub fn new(level_sizes: Vec<usize>, group_maps: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let h = PoolingHierarchy { level_sizes, group_maps };
        h.validate()?;
        Ok(h)
    }

    /// The default skeleton grouping for 22 joints: [66, 36, 21, 12].
    ///
    /// Coordinate rows interleave as 3*joint + axis, coarse rows follow the
    /// same convention, so each joint group expands to three coordinate
    /// groups (one per axis).
    pub fn default_skeleton() -> Self {
        let mut group_maps = Vec::new();
        for level in SKELETON_JOINT_GROUPS {
            let mut coord_map: Vec<Vec<usize>> = vec![Vec::new(); level.len() * 3];
            for (g, joints) in level.iter().enumerate() {
                for axis in 0..3 {
                    coord_map[g * 3 + axis] = joints.iter().map(|&j| j * 3 + axis).collect();
                }
            }
            group_maps.push(coord_map);
        }
        PoolingHierarchy::new(vec![66, 36, 21, 12], group_maps).expect("skeleton grouping is valid")
    }

    /// Contiguous even-bucket grouping for arbitrary level sizes; used for
    /// non-skeleton data and small test configurations.
    pub fn contiguous(level_sizes: &[usize]) -> Result<Self> {
        if level_sizes.len() < 2 {
            return Err(Error::Config("hierarchy needs at least two levels".into()));
        }
        let mut group_maps = Vec::new();
        for w in level_sizes.windows(2) {
            let (fine, coarse) = (w[0], w[1]);
            if coarse == 0 || coarse > fine {
                return Err(Error::Config(format!(
                    "level sizes must decrease: {fine} -> {coarse}"
                )));
            }
            let mut map = vec![Vec::new(); coarse];
            for f in 0..fine {
                map[f * coarse / fine].push(f);
            }
            group_maps.push(map);
        }
        PoolingHierarchy::new(level_sizes.to_vec(), group_maps)
    }

    /// Rebuild from per-level assignment vectors (fine row -> coarse row),
    /// the flat form stored in manifests and checkpoints.
    pub fn from_assignments(level_sizes: Vec<usize>, assignments: &[Vec<usize>]) -> Result<Self> {
        if assignments.len() + 1 != level_sizes.len() {
            return Err(Error::Config(format!(
                "expected {} assignment maps, got {}",
                level_sizes.len() - 1,
                assignments.len()
            )));
        }
        let mut group_maps = Vec::new();
        for (l, assign) in assignments.iter().enumerate() {
            let coarse = level_sizes[l + 1];
            let mut map = vec![Vec::new(); coarse];
            for (fine, &c) in assign.iter().enumerate() {
                if c >= coarse {
                    return Err(Error::Config(format!(
                        "assignment {c} out of range at level {l}"
                    )));
                }
                map[c].push(fine);
            }
            group_maps.push(map);
        }
        PoolingHierarchy::new(level_sizes, group_maps)
    }

    /// Flat form of the group maps: per level, fine row -> coarse row.
    pub fn assignments(&self) -> Vec<Vec<usize>> {
        self.group_maps
            .iter()
            .enumerate()
            .map(|(l, map)| {
                let mut assign = vec![0usize; self.level_sizes[l]];
                for (c, fines) in map.iter().enumerate() {
                    for &f in fines {
                        assign[f] = c;
                    }
                }
                assign
            })
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.group_maps.len() + 1 != self.level_sizes.len() {
            return Err(Error::Config(format!(
                "{} group maps do not bridge {} levels",
                self.group_maps.len(),
                self.level_sizes.len()
            )));
        }
        for (l, map) in self.group_maps.iter().enumerate() {
            let fine = self.level_sizes[l];
            let coarse = self.level_sizes[l + 1];
            if map.len() != coarse {
                return Err(Error::Config(format!(
                    "level {l} map has {} groups, expected {coarse}",
                    map.len()
                )));
            }
            let mut seen = vec![false; fine];
            for (c, fines) in map.iter().enumerate() {
                if fines.is_empty() {
                    return Err(Error::Config(format!("empty group {c} at level {l}")));
                }
                for &f in fines {
                    if f >= fine {
                        return Err(Error::Config(format!(
                            "fine row {f} out of range at level {l}"
                        )));
                    }
                    if seen[f] {
                        return Err(Error::Config(format!(
                            "fine row {f} covered twice at level {l}"
                        )));
                    }
                    seen[f] = true;
                }
            }
            if let Some(missed) = seen.iter().position(|&s| !s) {
                return Err(Error::Config(format!(
                    "fine row {missed} not covered at level {l}"
                )));
            }
        }
        Ok(())
    }

    /// Mean-pooling matrix of level `l`: K_{l+1} x K_l, rows average groups.
    pub fn pool_matrix(&self, level: usize) -> Mat {
        let map = &self.group_maps[level];
        let fine = self.level_sizes[level];
        let mut p = Mat::zeros(map.len(), fine);
        for (c, fines) in map.iter().enumerate() {
            let w = 1.0 / fines.len() as f64;
            for &f in fines {
                *p.at_mut(c, f) = w;
            }
        }
        p
    }

    /// Copy-to-group-members unpooling matrix of level `l`: K_l x K_{l+1}.
    pub fn unpool_matrix(&self, level: usize) -> Mat {
        let map = &self.group_maps[level];
        let fine = self.level_sizes[level];
        let mut u = Mat::zeros(fine, map.len());
        for (c, fines) in map.iter().enumerate() {
            for &f in fines {
                *u.at_mut(f, c) = 1.0;
            }
        }
        u
    }

    /// Pool a K_l x F feature matrix one level down by group means.
    pub fn pool_joints(&self, features: &Mat, level: usize) -> Result<Mat> {
        if level + 1 >= self.level_sizes.len() {
            return Err(Error::Shape(format!("no pooling below level {level}")));
        }
        if features.rows != self.level_sizes[level] {
            return Err(Error::Shape(format!(
                "pool_joints: {} rows at level {level}, expected {}",
                features.rows, self.level_sizes[level]
            )));
        }
        Ok(self.pool_matrix(level).matmul(features))
    }

    /// Pool a K0 x F matrix down to an arbitrary level.
    pub fn pool_to_level(&self, features: &Mat, level: usize) -> Result<Mat> {
        let mut out = features.clone();
        for l in 0..level {
            out = self.pool_joints(&out, l)?;
        }
        Ok(out)
    }
}
