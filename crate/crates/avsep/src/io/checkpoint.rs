//! Binary parameter checkpoints.
//!
//! Layout: magic `AVCK`, a format version, the parameter count, then a
//! table of (name, dtype, shape) entries followed by each parameter's raw
//! little-endian payload in table order. A human-readable `<path>.cfg`
//! sidecar carries the model geometry needed to rebuild the module tree
//! before the payloads are poured back in. Writing is a pure function of
//! the parameters, so save → load → save reproduces identical bytes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::config::{parse_run_config, render_model_section};
use crate::model::ExtractorModel;
use crate::tensor::{Dtype, Elem};

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

/// The config sidecar sits next to the checkpoint with `.cfg` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".cfg");
    PathBuf::from(os)
}

fn push_element<E: Elem>(buf: &mut Vec<u8>, v: E) {
    // Every finite f32 widens to f64 and narrows back bit-exactly, so one
    // f64-mediated path serves both element types.
    match E::DTYPE {
        Dtype::F32 => buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes()),
        Dtype::F64 => buf.extend_from_slice(&v.into_f64().to_le_bytes()),
    }
}

fn read_element<E: Elem>(bytes: &[u8]) -> E {
    match E::DTYPE {
        Dtype::F32 => E::of_f64(f32::from_le_bytes(bytes.try_into().unwrap()) as f64),
        Dtype::F64 => E::of_f64(f64::from_le_bytes(bytes.try_into().unwrap())),
    }
}

/// Serializes the model's parameters (plus the config sidecar).
pub fn save_checkpoint<E: Elem>(path: &Path, model: &ExtractorModel<E>) -> Result<()> {
    let params = model.visit_params();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(E::DTYPE.code());
        buf.push(p.shape().len() as u8);
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in &params {
        for v in p.to_vec() {
            push_element(&mut buf, v);
        }
    }
    std::fs::write(path, &buf)?;
    std::fs::write(sidecar_path(path), render_model_section(&model.cfg))?;
    Ok(())
}

/// Cursor over the checkpoint bytes with format-error diagnostics.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Rebuilds a model from a checkpoint and its config sidecar. The stored
/// dtype must match `E`, and the stored table must cover exactly the
/// parameters of a model with the sidecar's geometry.
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<ExtractorModel<E>> {
    let sidecar = std::fs::read_to_string(sidecar_path(path))?;
    let cfg = parse_run_config(&sidecar)?.model;
    let model = ExtractorModel::<E>::init(cfg, 0)?;

    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let params = model.visit_params();
    let n = r.u32("parameter count")? as usize;
    if n != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n} parameters but the model has {}",
            params.len()
        )));
    }

    let mut table = Vec::with_capacity(n);
    for i in 0..n {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("entry {i} has a non-UTF-8 name")))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype code {code}")))?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{name}: stored as {dtype:?} but loading as {:?}",
                E::DTYPE
            )));
        }
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        table.push((name, shape));
    }

    for ((name, shape), (want_name, p)) in table.iter().zip(&params) {
        if name != want_name || shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "table entry ({name}, {shape:?}) does not match model parameter ({want_name}, {:?})",
                p.shape()
            )));
        }
        let width = E::DTYPE.size_bytes();
        let payload = r.take(p.numel() * width, name)?;
        let data: Vec<E> = payload
            .chunks_exact(width)
            .map(read_element::<E>)
            .collect();
        p.set_data(&data);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last payload",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}
