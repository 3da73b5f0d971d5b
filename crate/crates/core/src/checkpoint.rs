//! `HGCK` checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "HGCK" | version
//! repeated until EOF:
//!   name_len | name bytes (UTF-8) | rank | dims[rank] | f32 values (LE)
//! ```
//!
//! Parameter names are those of [`HourglassWeights::for_each`], e.g.
//! `pre.w`, `stack0.enc1.b`, `stack1.skip3.w_hz`, `remap0.w`. The network
//! configuration is recovered from the names and shapes on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::cell::CellKind;
use crate::hourglass::{HourglassWeights, NetConfig};
use crate::{Error, Real, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"HGCK";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_weights<T: Real, W: Write>(w: &HourglassWeights<Tensor<T>>, out: &mut W) -> Result<()> {
    write_named(&w.named_tensors(), out)
}

/// Writes arbitrary named tensors in checkpoint layout.
pub fn write_named<T: Real, N: AsRef<str>, W: Write>(items: &[(N, &Tensor<T>)], out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in items {
        let name = name.as_ref();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes<T: Real>(w: &HourglassWeights<Tensor<T>>) -> Vec<u8> {
    let mut v = Vec::new();
    write_weights(w, &mut v).expect("writing to a Vec cannot fail");
    v
}

pub fn save<T: Real>(w: &HourglassWeights<Tensor<T>>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(w))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parses raw named tensors, in file order.
pub fn read_named<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4).map_err(|_| bad("missing magic"))? != MAGIC {
        return Err(bad("bad magic, not an HGCK file"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while !c.done() {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = c.take(len.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

fn infer_config<T: Real>(named: &BTreeMap<String, Tensor<T>>) -> Result<NetConfig> {
    let get = |n: &str| named.get(n).ok_or_else(|| bad(format!("missing parameter {n}")));
    let pre = get("pre.w")?;
    let head = get("stack0.head.w")?;
    let (channels, image_channels, kernel) = (pre.shape()[0], pre.shape()[1], pre.shape()[2]);
    let keypoints = head.shape()[0];
    let cell = match named.get("stack0.skip1.w_hz") {
        None => CellKind::None,
        Some(t) if t.shape()[1] == channels + 2 => CellKind::CoordConvGru,
        Some(_) => CellKind::ConvGru,
    };
    Ok(NetConfig {
        image_channels,
        channels,
        keypoints,
        kernel,
        cell,
    })
}

/// Rebuilds network weights from raw named tensors.
pub fn weights_from_named<T: Real>(named: Vec<(String, Tensor<T>)>) -> Result<HourglassWeights<Tensor<T>>> {
    let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (n, t) in named {
        if map.insert(n.clone(), t).is_some() {
            return Err(bad(format!("duplicate parameter {n}")));
        }
    }
    let config = infer_config(&map)?;
    let mut w = HourglassWeights::zeros(config)?;
    let mut err = None;
    w.for_each_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match map.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                err = Some(bad(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => err = Some(bad(format!("missing parameter {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = map.keys().next() {
        return Err(bad(format!("unexpected parameter {extra}")));
    }
    Ok(w)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<HourglassWeights<Tensor<T>>> {
    weights_from_named(read_named(bytes)?)
}

pub fn load<T: Real>(path: &Path) -> Result<HourglassWeights<Tensor<T>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
