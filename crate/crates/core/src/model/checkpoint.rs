use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{infer_config, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::io::{read_stored_tensor, write_tensor};
use crate::numerics::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<F: Float>(w: &mut impl Write, params: &ModelParams<F>) -> Result<()> {
    let named: Vec<_> = params.named_tensors().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("checkpoint truncated in {what}")),
        _ => Error::Io(e),
    })
}

/// Reads every named tensor, converted to precision `F`.
pub fn read_checkpoint<F: Float>(r: &mut impl Read) -> Result<Vec<(String, Tensor<F>)>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "header")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(r, &mut word, "header")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    read_exact(r, &mut word, "header")?;
    let count = u32::from_le_bytes(word) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(r, &mut len, "tensor name")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let t = read_stored_tensor(r).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{name}: {m}")),
            other => other,
        })?;
        out.push((name, t.into_precision()));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

/// Writes through a temporary sibling so a crash never leaves a partial
/// checkpoint under `path`.
pub fn save_checkpoint<F: Float>(path: &Path, params: &ModelParams<F>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    let tmp = path.with_extension("mmck.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. With `config` the tensors must match it exactly;
/// otherwise the architecture is inferred from the stored shapes.
pub fn load_checkpoint<F: Float>(
    path: &Path,
    image_shape: [usize; 3],
    config: Option<ModelConfig>,
) -> Result<ModelParams<F>> {
    let bytes = fs::read(path)?;
    let named = read_checkpoint::<F>(&mut bytes.as_slice())?;
    let config = match config {
        Some(c) => c,
        None => infer_config(&named, image_shape)?,
    };
    ModelParams::from_named(config, named)
}
