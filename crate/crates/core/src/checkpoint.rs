//! Checkpoint archive: one binary file mapping tensor names to f64 arrays,
//! plus a plain-text schema sidecar listing name, shape and dtype.
//!
//! Round-trips are bit-exact; everything needed to resume training or run
//! evaluation (parameters, normalisation, memory state, optimiser moments,
//! epoch counter) lives in one archive.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::PoolingHierarchy;
use crate::model::memory::MemoryState;
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Mat;
use crate::train::optim::AdamState;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MMCKPT01";

pub fn save_archive(path: &Path, entries: &[(String, Mat)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut schema = String::new();
    for (name, mat) in entries {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for v in &mat.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        schema.push_str(&format!("{name}\t{}x{}\tf64\n", mat.rows, mat.cols));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    fs::write(schema_path(path), schema)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Vec<(String, Mat)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad name encoding".into()))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        entries.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(entries)
}

fn schema_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".schema.txt");
    std::path::PathBuf::from(s)
}

/// Full training state.
pub struct Checkpoint {
    pub model: ModelParams,
    pub memory: MemoryState,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    pub actions: Vec<String>,
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let model = &ck.model;
    let mut entries: Vec<(String, Mat)> = Vec::new();
    let dims = &model.dims;
    entries.push((
        "meta.dims".into(),
        Mat::row(&[
            dims.embed_dim as f64,
            dims.t_obs as f64,
            dims.t_total as f64,
            dims.slots as f64,
            dims.mask_hidden as f64,
            dims.n_actions as f64,
        ]),
    ));
    entries.push((
        "meta.level_sizes".into(),
        Mat::row(&dims.level_sizes.iter().map(|&v| v as f64).collect::<Vec<_>>()),
    ));
    for (l, assign) in model.hierarchy.assignments().iter().enumerate() {
        entries.push((
            format!("hierarchy.assign.{l}"),
            Mat::row(&assign.iter().map(|&v| v as f64).collect::<Vec<_>>()),
        ));
    }
    // Action labels stored as code points so the archive stays a pure
    // name -> array map.
    for (i, action) in ck.actions.iter().enumerate() {
        entries.push((
            format!("labels.action.{i}"),
            Mat::row(&action.chars().map(|c| c as u32 as f64).collect::<Vec<_>>()),
        ));
    }
    for (name, mat) in model.visit() {
        entries.push((format!("param.{name}"), mat.clone()));
    }
    entries.push(("norm.mean".into(), model.norm_mean.clone()));
    entries.push(("norm.scale".into(), Mat::scalar(model.norm_scale)));
    entries.push(("memory.slots".into(), ck.memory.slots.clone()));
    entries.push(("memory.iteration".into(), Mat::scalar(ck.memory.iteration as f64)));
    entries.push(("memory.capacity".into(), Mat::scalar(ck.memory.capacity as f64)));
    let hist_rows = ck.memory.history.len();
    let hist = if hist_rows == 0 {
        Mat::zeros(0, ck.memory.slot_count())
    } else {
        Mat::from_fn(hist_rows, ck.memory.slot_count(), |r, c| ck.memory.history[r][c])
    };
    entries.push(("memory.history".into(), hist));
    entries.push(("train.epoch".into(), Mat::scalar(ck.epoch as f64)));
    if let Some(adam) = &ck.adam {
        entries.push(("adam.step".into(), Mat::scalar(adam.step as f64)));
        for (idx, (name, _)) in model.visit().iter().enumerate() {
            entries.push((format!("adam.m.{name}"), adam.first[idx].clone()));
            entries.push((format!("adam.v.{name}"), adam.second[idx].clone()));
        }
    }
    save_archive(path, &entries)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let entries = load_archive(path)?;
    let map: BTreeMap<String, Mat> = entries.into_iter().collect();
    let get = |name: &str| -> Result<&Mat> {
        map.get(name).ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    };

    let meta = get("meta.dims")?;
    if meta.len() != 6 {
        return Err(Error::Checkpoint("bad meta.dims length".into()));
    }
    let level_sizes: Vec<usize> =
        get("meta.level_sizes")?.data.iter().map(|&v| v as usize).collect();
    let mut assignments = Vec::new();
    for l in 0..level_sizes.len() - 1 {
        let assign = get(&format!("hierarchy.assign.{l}"))?;
        assignments.push(assign.data.iter().map(|&v| v as usize).collect::<Vec<usize>>());
    }
    let hierarchy = PoolingHierarchy::from_assignments(level_sizes.clone(), &assignments)?;
    let dims = ModelDims {
        level_sizes,
        embed_dim: meta.data[0] as usize,
        t_obs: meta.data[1] as usize,
        t_total: meta.data[2] as usize,
        slots: meta.data[3] as usize,
        mask_hidden: meta.data[4] as usize,
        n_actions: meta.data[5] as usize,
    };

    let mut actions = Vec::with_capacity(dims.n_actions);
    for i in 0..dims.n_actions {
        let codes = get(&format!("labels.action.{i}"))?;
        let label: String =
            codes.data.iter().map(|&v| char::from_u32(v as u32).unwrap_or('?')).collect();
        actions.push(label);
    }

    let mut model = ModelParams::init(dims, hierarchy, 0);
    for (name, tensor) in model.visit_mut() {
        let stored = get(&format!("param.{name}"))?;
        if stored.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: stored {:?}, expected {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored.clone();
    }
    model.norm_mean = get("norm.mean")?.clone();
    model.norm_scale = get("norm.scale")?.data[0];

    let slots = get("memory.slots")?.clone();
    let hist_mat = get("memory.history")?;
    let history: Vec<Vec<f64>> =
        (0..hist_mat.rows).map(|r| hist_mat.row_slice(r).to_vec()).collect();
    let memory = MemoryState {
        slots,
        iteration: get("memory.iteration")?.data[0] as u64,
        history,
        capacity: get("memory.capacity")?.data[0] as usize,
    };

    let adam = if map.contains_key("adam.step") {
        let mut adam = AdamState::new(&model);
        adam.step = get("adam.step")?.data[0] as u64;
        for (idx, (name, _)) in model.visit().iter().enumerate() {
            adam.first[idx] = get(&format!("adam.m.{name}"))?.clone();
            adam.second[idx] = get(&format!("adam.v.{name}"))?.clone();
        }
        Some(adam)
    } else {
        None
    };

    Ok(Checkpoint {
        model,
        memory,
        adam,
        epoch: get("train.epoch")?.data[0] as usize,
        actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let entries = vec![
            ("a.weight".to_string(), Mat::from_vec(2, 3, vec![1.5, -2.25, 0.1, 7.0, -0.0, 3.3])),
            ("b.bias".to_string(), Mat::zeros(0, 4)),
        ];
        save_archive(&path, &entries).unwrap();
        let loaded = load_archive(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "a.weight");
        for (orig, back) in entries[0].1.data.iter().zip(&loaded[0].1.data) {
            assert_eq!(orig.to_bits(), back.to_bits());
        }
        assert_eq!(loaded[1].1.shape(), (0, 4));
        let schema = std::fs::read_to_string(dir.path().join("test.ckpt.schema.txt")).unwrap();
        assert!(schema.contains("a.weight\t2x3\tf64"));
    }

    #[test]
    fn checkpoint_roundtrip_restores_everything() {
        use crate::data::PoolingHierarchy;
        use crate::model::ModelDims;

        let h = PoolingHierarchy::contiguous(&[6, 4, 3, 2]).unwrap();
        let dims = ModelDims {
            level_sizes: h.level_sizes.clone(),
            embed_dim: 3,
            t_obs: 2,
            t_total: 4,
            slots: 2,
            mask_hidden: 4,
            n_actions: 2,
        };
        let mut model = ModelParams::init(dims, h, 33);
        model.norm_scale = 123.5;
        model.norm_mean.data[2] = -9.25;
        let mut memory = MemoryState::init(2, 6, 8, 33).unwrap();
        memory.commit(memory.slots.clone(), vec![0.25, 0.75]);
        let adam = AdamState::new(&model);
        let ck = Checkpoint {
            model,
            memory,
            adam: Some(adam),
            epoch: 17,
            actions: vec!["sway".into(), "stride".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &ck).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(back.actions, vec!["sway".to_string(), "stride".to_string()]);
        assert_eq!(back.model.norm_scale, 123.5);
        assert_eq!(back.memory.iteration, 1);
        assert_eq!(back.memory.history, vec![vec![0.25, 0.75]]);
        for ((_, a), (_, b)) in ck.model.visit().iter().zip(back.model.visit().iter()) {
            assert_eq!(a.data, b.data);
        }
        assert!(back.adam.is_some());
    }
}
