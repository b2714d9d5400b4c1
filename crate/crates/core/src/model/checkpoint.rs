//! Binary checkpoint format.
//!
//! ```text
//! "TOPLABCK"  u32 version
//! spec:  u64 d_model, n_layers, n_heads, vocab_size, max_seq_len, mlp_hidden
//!        f64 rope_theta, u8 tied, u8 objective tag, u64 objective parameter
//! u8 dtype tag, u32 tensor count
//! per tensor: u32 name length, name, u32 ndim, u64 dims…, little-endian payload
//! ```
//!
//! Values are stored at full precision so a load reproduces the saved
//! parameters bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelSpec, Objective, Params};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOPLABCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<F: Float>(mut w: impl Write, spec: &ModelSpec, params: &Params<F>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    for v in [
        spec.d_model,
        spec.n_layers,
        spec.n_heads,
        spec.vocab_size,
        spec.max_seq_len,
        spec.mlp_hidden,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&spec.rope_theta.to_le_bytes());
    buf.push(u8::from(spec.tied_embeddings));
    let (tag, arg) = match spec.objective {
        Objective::Ntp => (0u8, 0usize),
        Objective::Mtp { future_tokens } => (1, future_tokens),
        Objective::Top { window } => (2, window),
    };
    buf.push(tag);
    buf.extend_from_slice(&(arg as u64).to_le_bytes());
    w.write_all(&buf)?;
    write_tensors(&mut w, params.entries())
}

/// Writes a dtype tag, a count, then named tensors.
pub(crate) fn write_tensors<F: Float>(mut w: impl Write, entries: &[(String, Tensor<F>)]) -> Result<()> {
    let mut buf = vec![F::DTYPE.tag()];
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    w.write_all(&buf)?;
    for (name, t) in entries {
        buf.clear();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.reserve(t.numel() * F::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<'a, R: Read> Reader<'a, R> {
    pub(crate) fn new(inner: R, path: &'a Path) -> Self {
        Reader { inner, path }
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => self.fail("truncated file"),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("value {v} does not fit in usize")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn magic(&mut self, magic: &[u8], version: u32) -> Result<()> {
        if self.bytes(magic.len())? != magic {
            return Err(self.fail("bad magic"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(self.fail(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    pub(crate) fn tensors<F: Float>(&mut self) -> Result<Vec<(String, Tensor<F>)>> {
        let tag = self.u8()?;
        match DType::from_tag(tag) {
            Some(d) if d == F::DTYPE => {}
            Some(d) => return Err(self.fail(format!("stored dtype {d:?}, requested {:?}", F::DTYPE))),
            None => return Err(self.fail(format!("unknown dtype tag {tag}"))),
        }
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.bytes(len)?).map_err(|_| self.fail("tensor name is not UTF-8"))?;
            let ndim = self.u32()? as usize;
            if ndim > 8 {
                return Err(self.fail(format!("tensor {name} has {ndim} dims")));
            }
            let shape = (0..ndim).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| self.fail(format!("tensor {name} too large")))?;
            let size = F::DTYPE.size_bytes();
            let raw = self.bytes(numel * size)?;
            let data = raw.chunks_exact(size).map(F::read_le).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

pub fn read_checkpoint<F: Float>(r: impl Read, path: &Path) -> Result<(ModelSpec, Params<F>)> {
    let mut r = Reader::new(r, path);
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
    let d_model = r.usize()?;
    let n_layers = r.usize()?;
    let n_heads = r.usize()?;
    let vocab_size = r.usize()?;
    let max_seq_len = r.usize()?;
    let mlp_hidden = r.usize()?;
    let rope_theta = r.f64()?;
    let tied_embeddings = r.u8()? != 0;
    let tag = r.u8()?;
    let arg = r.usize()?;
    let objective = match tag {
        0 => Objective::Ntp,
        1 => Objective::Mtp { future_tokens: arg },
        2 => Objective::Top { window: arg },
        t => return Err(r.fail(format!("unknown objective tag {t}"))),
    };
    let spec = ModelSpec {
        d_model,
        n_layers,
        n_heads,
        vocab_size,
        max_seq_len,
        rope_theta,
        mlp_hidden,
        tied_embeddings,
        objective,
    };
    spec.validate().map_err(|e| r.fail(format!("invalid model spec: {e}")))?;
    let entries = r.tensors()?;
    let params = Params::from_entries(&spec, entries).map_err(|e| r.fail(e.to_string()))?;
    Ok((spec, params))
}

/// Writes via a temporary sibling file and renames, so a crash never leaves a
/// half-written checkpoint under the final name.
pub fn save_checkpoint<F: Float>(path: &Path, spec: &ModelSpec, params: &Params<F>) -> Result<()> {
    atomic_write(path, |w| write_checkpoint(w, spec, params))
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<(ModelSpec, Params<F>)> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

pub(crate) fn atomic_write(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
