//! Binary trace files for replaying recorded attention inputs.
//!
//! Layout, all little-endian: the 4-byte magic `KVLT`, a `u32` format
//! version, then the header as seven `u64` values `L, h_q, h_kv, d_k,
//! n_prompt, n_steps, element_width`. Float blocks follow, each
//! `element_width` bytes per element (4 or 8), row-major:
//!
//! 1. prompt keys, then prompt values: per layer, per KV head, `n_prompt x d_k`;
//! 2. prompt queries: per layer, per query head, `d_k`;
//! 3. per step, per layer: true queries `h_q x d_k`, approximate queries
//!    `h_q x d_k`, new keys `h_kv x d_k`, new values `h_kv x d_k`.
//!
//! A JSON sidecar named `<trace>.json` carries the same header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{HeadTensor, ModelShape, TensorRole, DEFAULT_BYTES_PER_ELEMENT};
use crate::error::{Error, Result};
use crate::workload::{Prompt, StepInput, Workload};

pub const MAGIC: &[u8; 4] = b"KVLT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    #[serde(rename = "L")]
    pub num_layers: u64,
    pub h_q: u64,
    pub h_kv: u64,
    pub d_k: u64,
    pub n_prompt: u64,
    pub n_steps: u64,
    pub element_width: u64,
}

impl TraceHeader {
    pub fn of(workload: &Workload, element_width: u64) -> Self {
        let s = &workload.shape;
        Self {
            num_layers: s.num_layers as u64,
            h_q: s.num_q_heads as u64,
            h_kv: s.num_kv_heads as u64,
            d_k: s.head_dim as u64,
            n_prompt: workload.prompt.len() as u64,
            n_steps: workload.steps.len() as u64,
            element_width,
        }
    }

    pub fn shape(&self) -> Result<ModelShape> {
        let mut s = ModelShape::new(
            self.num_layers as usize,
            self.h_q as usize,
            self.h_kv as usize,
            self.d_k as usize,
        )
        .map_err(|e| Error::Trace(format!("header geometry: {e}")))?;
        s.bytes_per_element = DEFAULT_BYTES_PER_ELEMENT;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.element_width != 4 && self.element_width != 8 {
            return Err(Error::Trace(format!("element width {} is not 4 or 8", self.element_width)));
        }
        if self.n_prompt == 0 {
            return Err(Error::Trace("empty prompt".into()));
        }
        self.shape().map(|_| ())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct FloatWriter<W: Write> {
    inner: W,
    width: u64,
}

impl<W: Write> FloatWriter<W> {
    fn put(&mut self, xs: &[f64]) -> Result<()> {
        for &x in xs {
            if self.width == 4 {
                self.inner.write_all(&(x as f32).to_le_bytes())?;
            } else {
                self.inner.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn put_rows(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        rows.iter().try_for_each(|r| self.put(r))
    }
}

struct FloatReader<R: Read> {
    inner: R,
    width: u64,
}

impl<R: Read> FloatReader<R> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            let x = if self.width == 4 {
                let mut b = [0u8; 4];
                self.inner.read_exact(&mut b).map_err(truncated)?;
                f64::from(f32::from_le_bytes(b))
            } else {
                self.inner.read_exact(&mut b8).map_err(truncated)?;
                f64::from_le_bytes(b8)
            };
            if !x.is_finite() {
                return Err(Error::Trace("non-finite value".into()));
            }
            out.push(x);
        }
        Ok(out)
    }

    fn take_rows(&mut self, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
        (0..rows).map(|_| self.take(cols)).collect()
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Trace("file ends before the declared data".into())
    } else {
        Error::Io(e)
    }
}

/// Writes `workload` and its sidecar. `element_width` is 4 (f32) or 8 (f64).
pub fn write_trace(path: &Path, workload: &Workload, element_width: u64) -> Result<()> {
    workload.validate()?;
    let header = TraceHeader::of(workload, element_width);
    header.check()?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [
        header.num_layers,
        header.h_q,
        header.h_kv,
        header.d_k,
        header.n_prompt,
        header.n_steps,
        header.element_width,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut w = FloatWriter {
        inner: out,
        width: element_width,
    };
    for grid in [&workload.prompt.keys, &workload.prompt.values] {
        for t in grid.iter().flatten() {
            w.put(t.as_slice())?;
        }
    }
    for layer in &workload.prompt.queries {
        w.put_rows(layer)?;
    }
    for step in &workload.steps {
        for l in 0..workload.shape.num_layers {
            w.put_rows(&step.true_queries[l])?;
            w.put_rows(&step.approx_queries[l])?;
            w.put_rows(&step.keys[l])?;
            w.put_rows(&step.values[l])?;
        }
    }
    w.inner.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Reads a trace; when a sidecar exists its header must agree with the file.
pub fn read_trace(path: &Path) -> Result<Workload> {
    let file = File::open(path).map_err(|e| Error::Trace(format!("cannot open {}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Trace("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4).map_err(truncated)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Trace(format!("unsupported format version {version}")));
    }
    let mut fields = [0u64; 7];
    for f in &mut fields {
        let mut b = [0u8; 8];
        input.read_exact(&mut b).map_err(truncated)?;
        *f = u64::from_le_bytes(b);
    }
    let header = TraceHeader {
        num_layers: fields[0],
        h_q: fields[1],
        h_kv: fields[2],
        d_k: fields[3],
        n_prompt: fields[4],
        n_steps: fields[5],
        element_width: fields[6],
    };
    header.check()?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let side: TraceHeader =
            serde_json::from_str(&text).map_err(|e| Error::Trace(format!("sidecar: {e}")))?;
        if side != header {
            return Err(Error::Trace("sidecar header disagrees with the trace file".into()));
        }
    }
    let shape = header.shape()?;
    let (l, hq, hkv, d, n) = (
        shape.num_layers,
        shape.num_q_heads,
        shape.num_kv_heads,
        shape.head_dim,
        header.n_prompt as usize,
    );
    let mut r = FloatReader {
        inner: input,
        width: header.element_width,
    };
    let mut read_kv = |role| -> Result<Vec<Vec<HeadTensor>>> {
        (0..l)
            .map(|_| (0..hkv).map(|_| HeadTensor::new(role, d, r.take(n * d)?)).collect())
            .collect()
    };
    let keys = read_kv(TensorRole::Key)?;
    let values = read_kv(TensorRole::Value)?;
    let queries = (0..l).map(|_| r.take_rows(hq, d)).collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::with_capacity(header.n_steps as usize);
    for _ in 0..header.n_steps {
        let mut s = StepInput {
            true_queries: Vec::with_capacity(l),
            approx_queries: Vec::with_capacity(l),
            keys: Vec::with_capacity(l),
            values: Vec::with_capacity(l),
        };
        for _ in 0..l {
            s.true_queries.push(r.take_rows(hq, d)?);
            s.approx_queries.push(r.take_rows(hq, d)?);
            s.keys.push(r.take_rows(hkv, d)?);
            s.values.push(r.take_rows(hkv, d)?);
        }
        steps.push(s);
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(Error::Trace("trailing bytes after the declared data".into()));
    }
    let w = Workload {
        shape,
        prompt: Prompt { keys, values, queries },
        steps,
    };
    w.validate()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticModel, SyntheticParams};

    fn workload() -> Workload {
        let shape = ModelShape::new(2, 4, 2, 4).unwrap();
        SyntheticModel::new(shape, SyntheticParams { d_model: 16, ..Default::default() })
            .unwrap()
            .workload(10, 3)
            .unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.kvlt");
        let w = workload();
        write_trace(&p, &w, 8).unwrap();
        assert_eq!(read_trace(&p).unwrap(), w);
        let side: TraceHeader = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side.n_steps, 3);
    }

    #[test]
    fn f32_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.kvlt");
        let w = workload();
        write_trace(&p, &w, 4).unwrap();
        let back = read_trace(&p).unwrap();
        let a = w.prompt.keys[1][1].as_slice();
        let b = back.prompt.keys[1][1].as_slice();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn truncated_and_mismatched_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.kvlt");
        write_trace(&p, &workload(), 8).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_trace(&p), Err(Error::Trace(_))));
        std::fs::write(&p, &bytes).unwrap();
        let mut side: TraceHeader =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        side.n_steps = 9;
        std::fs::write(sidecar_path(&p), serde_json::to_string(&side).unwrap()).unwrap();
        assert!(matches!(read_trace(&p), Err(Error::Trace(_))));
        assert!(write_trace(&p, &workload(), 2).is_err());
    }
}
