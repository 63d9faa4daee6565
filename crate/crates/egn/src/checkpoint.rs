//! Shared checkpoint container: magic, version, a config echo as JSON text,
//! then named parameter tensors as little-endian 64-bit floats. The same
//! layout backs "EGNX" (extractor) and "EGNM" (prediction model) files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{EgnError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, magic: &[u8; 4], config_json: &str, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_json.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, t) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, magic: &[u8; 4]) -> Result<(String, Vec<(String, Tensor)>)> {
    let buf = fs::read(path).map_err(|_| EgnError::MissingArtifact {
        what: path.display().to_string(),
        produced_by: match magic {
            b"EGNX" => "egn train-extractor".to_string(),
            b"EGNM" => "egn train".to_string(),
            _ => "the producing command".to_string(),
        },
    })?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if buf.len() < *off + n {
            return Err(EgnError::Data(format!("{}: truncated checkpoint", path.display())));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != magic {
        return Err(EgnError::Data(format!(
            "{}: bad magic (expected {})",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(EgnError::Data(format!("{}: unsupported version {version}", path.display())));
    }
    let cfg_len = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize;
    let config = String::from_utf8(take(&mut off, cfg_len)?.to_vec())
        .map_err(|_| EgnError::Data(format!("{}: config block is not UTF-8", path.display())))?;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| EgnError::Data(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(&mut off, 8 * numel)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((config, tensors))
}

/// Copy loaded tensors into a freshly built store by name; every parameter
/// must be covered exactly once.
pub fn restore_params(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(EgnError::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(name)
            .ok_or_else(|| EgnError::Data(format!("checkpoint tensor `{name}` not in model")))?;
        if store.get(id).shape() != t.shape() {
            return Err(EgnError::Data(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}
