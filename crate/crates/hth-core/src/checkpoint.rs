//! HTH1 checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//!   magic   b"HTH1"
//!   version u32 (currently 1)
//!   count   u32
//!   per tensor:
//!     name_len u32, name UTF-8 bytes,
//!     rank u32, dims u64 × rank,
//!     data f32 × product(dims)
//! ```
//!
//! Values are stored in 32-bit; loading widens back to the crate's 64-bit
//! tensors. Optimizer state rides along under the `opt.` name prefix.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HthError, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::Adam;

pub const MAGIC: &[u8; 4] = b"HTH1";
pub const VERSION: u32 = 1;

pub fn save(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(HthError::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(HthError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(HthError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| HthError::Checkpoint(format!("bad name: {e}")))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(HthError::Checkpoint("trailing bytes".into()));
    }
    Ok(entries)
}

/// Save model weights plus optimizer moments and step counter.
pub fn save_training_state(model: &Model, adam: Option<&Adam>, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if let Some(adam) = adam {
        for (i, (name, _)) in model.store.iter().enumerate() {
            entries.push((format!("opt.m.{name}"), adam.m[i].clone()));
            entries.push((format!("opt.v.{name}"), adam.v[i].clone()));
        }
        entries.push(("opt.step".to_string(), Tensor::scalar(adam.step as f64)));
    }
    save(&entries, path)
}

/// Load weights (and optimizer state when present) into a constructed model.
/// Every model parameter must appear with a matching shape.
pub fn load_training_state(model: &mut Model, path: &Path) -> Result<(Option<Adam>, u64)> {
    let entries = load(path)?;
    let mut opt_step = 0u64;
    let mut m_entries: Vec<(String, Tensor)> = Vec::new();
    let mut v_entries: Vec<(String, Tensor)> = Vec::new();
    let mut weight_entries: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m_entries.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v_entries.push((rest.to_string(), t));
        } else if name == "opt.step" {
            opt_step = t.data()[0] as u64;
        } else {
            weight_entries.push((name, t));
        }
    }
    let ids: Vec<_> = (0..model.store.len()).collect();
    for i in ids {
        let id = crate::model::PId(i);
        let name = model.store.name(id).to_string();
        let (_, t) = weight_entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| HthError::Checkpoint(format!("missing tensor {name:?}")))?;
        if t.shape() != model.store.get(id).shape() {
            return Err(HthError::Checkpoint(format!(
                "shape mismatch for {name:?}: file {:?}, model {:?}",
                t.shape(),
                model.store.get(id).shape()
            )));
        }
        model.store.set(id, t.clone());
    }

    let adam = if !m_entries.is_empty() {
        let mut adam = Adam::new(model.cfg.train.lr, model.store.tensors());
        adam.step = opt_step;
        for (i, (name, _)) in model.store.iter().enumerate() {
            if let Some((_, t)) = m_entries.iter().find(|(n, _)| n == name) {
                adam.m[i] = t.clone();
            }
            if let Some((_, t)) = v_entries.iter().find(|(n, _)| n == name) {
                adam.v[i] = t.clone();
            }
        }
        Some(adam)
    } else {
        None
    };
    Ok((adam, opt_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_names_shapes_and_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let entries = vec![
            ("alpha.w".to_string(), randn(&[3, 4], &mut rng)),
            ("beta.b".to_string(), randn(&[1, 7], &mut rng)),
        ];
        let dir = std::env::temp_dir().join("hth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.hth1");
        save(&entries, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("hth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.hth1");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn model_state_round_trip() {
        let cfg = crate::config::ModelConfig::tiny();
        let model = Model::new(cfg.clone(), 42).unwrap();
        let adam = Adam::new(cfg.train.lr, model.store.tensors());
        let dir = std::env::temp_dir().join("hth_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.hth1");
        save_training_state(&model, Some(&adam), &path).unwrap();

        let mut fresh = Model::new(cfg, 1234).unwrap();
        let (opt, step) = load_training_state(&mut fresh, &path).unwrap();
        assert!(opt.is_some());
        assert_eq!(step, 0);
        for ((_, a), (_, b)) in model.store.iter().zip(fresh.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        std::fs::remove_file(&path).unwrap();
    }
}
