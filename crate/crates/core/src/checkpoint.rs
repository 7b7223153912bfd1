//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    8 bytes  "PSSCKPT\0"
//! version  u32      = 1
//! step     u64      Adam step count
//! entries  u32      number of records that follow
//! record:
//!   kind     u8     0 = parameter, 1 = Adam first moment, 2 = Adam second moment
//!   frozen   u8     1 if the parameter is excluded from updates (parameter records only)
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   values   prod(dims) x f64
//! ```
//!
//! Records appear in parameter-name order; each parameter record is followed by
//! its two moment records.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSSCKPT\0";
pub const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, kind: u8, frozen: bool, name: &str, t: &Tensor) {
    out.push(kind);
    out.push(frozen as u8);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&((store.len() * 3) as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let (m, v) = store.moments(name).expect("moments exist for every parameter");
        put_tensor(&mut out, 0, store.is_frozen(name), name, t);
        put_tensor(&mut out, 1, false, name, m);
        put_tensor(&mut out, 2, false, name, v);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut moments: Vec<(String, u8, Tensor)> = Vec::new();
    let mut frozen = Vec::new();
    for _ in 0..n {
        let kind = r.u8()?;
        let is_frozen = r.u8()? != 0;
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(dims, values)?;
        match kind {
            0 => {
                if is_frozen {
                    frozen.push(name.clone());
                }
                store.insert(name, t);
            }
            1 | 2 => moments.push((name, kind, t)),
            k => return Err(Error::Checkpoint(format!("unknown record kind {k}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let mut pending: std::collections::BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = Default::default();
    for (name, kind, t) in moments {
        let e = pending.entry(name).or_default();
        if kind == 1 {
            e.0 = Some(t);
        } else {
            e.1 = Some(t);
        }
    }
    for (name, (m, v)) in pending {
        let (Some(m), Some(v)) = (m, v) else {
            return Err(Error::Checkpoint(format!("incomplete moments for `{name}`")));
        };
        store
            .set_moments(&name, m, v)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    for name in frozen {
        store.freeze(&name);
    }
    store.set_step(step);
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Gradients;

    #[test]
    fn round_trip_preserves_params_moments_and_step() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        s.insert("b", Tensor::vector(vec![0.1, 0.2, 0.3]));
        s.freeze_prefix("a.");
        let mut g = Gradients::default();
        g.accumulate(&Gradients::from_params(
            [("b".to_string(), Tensor::vector(vec![1.0, -1.0, 0.5]))].into(),
        ));
        s.adam_step(&g, 0.01).unwrap();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout_is_stable() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.5));
        let bytes = encode(&s);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        // kind, frozen, name_len=1, "w", ndim=0, value
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes[25], 0);
        assert_eq!(u32::from_le_bytes(bytes[26..30].try_into().unwrap()), 1);
        assert_eq!(bytes[30], b'w');
        assert_eq!(u32::from_le_bytes(bytes[31..35].try_into().unwrap()), 0);
        assert_eq!(f64::from_le_bytes(bytes[35..43].try_into().unwrap()), 1.5);
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
