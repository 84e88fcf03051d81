//! Binary checkpoint format.
//!
//! ```text
//! "IGRD"            4 bytes magic
//! version           u32 LE (= 1)
//! name length       u32 LE, followed by that many UTF-8 bytes
//! seed              u64 LE
//! param count       u64 LE
//! params            count × f64 LE, in parameter-store order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{build_model, ArchitectureSpec, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IGRD";
const VERSION: u32 = 1;

fn bad(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Checkpoint { field, detail: detail.into() }
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let name = model.spec().name.as_bytes();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name)?;
    out.write_all(&model.seed().to_le_bytes())?;
    out.write_all(&(model.param_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.param_count() * 8);
    for v in model.flat_params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(field, format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint and rebuilds it against `spec`.
pub fn read_checkpoint<R: Read>(mut input: R, spec: &ArchitectureSpec) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(bad("magic", "not an IGRD checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(bad("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = c.u32("architecture")? as usize;
    let name = std::str::from_utf8(c.take(len, "architecture")?)
        .map_err(|_| bad("architecture", "name is not UTF-8"))?
        .to_string();
    if name != spec.name {
        return Err(bad("architecture", format!("checkpoint holds `{name}`, config expects `{}`", spec.name)));
    }
    let seed = c.u64("seed")?;
    let count = c.u64("param_count")? as usize;
    let mut model = build_model(spec, seed)?;
    if count != model.param_count() {
        return Err(bad(
            "param_count",
            format!("checkpoint has {count} parameters, architecture needs {}", model.param_count()),
        ));
    }
    let payload = c.take(count.checked_mul(8).ok_or_else(|| bad("param_count", "overflow"))?, "params")?;
    if c.pos != bytes.len() {
        return Err(bad("params", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let flat: Vec<f64> = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    model.set_flat_params(&flat)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>, spec: &ArchitectureSpec) -> Result<Model> {
    read_checkpoint(std::fs::File::open(path)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut m = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 4), 9).unwrap();
        // values that would not survive a lossy format
        m.params_mut()[0].data[0] = std::f64::consts::PI * 1e-300;
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let mut a = Vec::new();
        write_checkpoint(&m, &mut a).unwrap();
        let back = read_checkpoint(&a[..], m.spec()).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.seed(), 9);
        assert_eq!(&a[..4], b"IGRD");
    }

    #[test]
    fn truncated_payload_names_params() {
        let m = model();
        let mut a = Vec::new();
        write_checkpoint(&m, &mut a).unwrap();
        a.truncate(a.len() - 3);
        let e = read_checkpoint(&a[..], m.spec()).unwrap_err().to_string();
        assert!(e.contains("params"), "{e}");
    }

    #[test]
    fn header_errors_name_their_field() {
        let m = model();
        let mut a = Vec::new();
        write_checkpoint(&m, &mut a).unwrap();
        let mut wrong = a.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(&wrong[..], m.spec()).unwrap_err().to_string().contains("magic"));
        let mut wrong = a.clone();
        wrong[4] = 2;
        assert!(read_checkpoint(&wrong[..], m.spec()).unwrap_err().to_string().contains("version"));
        let other = ArchitectureSpec::miniresnet([3, 8, 8], 4);
        let e = read_checkpoint(&a[..], &other).unwrap_err().to_string();
        assert!(e.contains("architecture"), "{e}");
        let other = ArchitectureSpec::tinycnn([3, 8, 8], 5);
        let e = read_checkpoint(&a[..], &other).unwrap_err().to_string();
        assert!(e.contains("param_count"), "{e}");
    }
}
