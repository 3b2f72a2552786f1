//! Named-tensor container and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LIXT" | version: u32 | count: u32 |
//!   count × { name_len: u16 | name: utf-8 | rank: u8 | extents: u32 × rank |
//!             payload: f64 × prod(extents), row-major }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LIXT";
pub const VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Appends every entry of `other`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Checkpoint {
        let mut out = Checkpoint::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| invalid(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| invalid("rank exceeds 255"))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| invalid("extent exceeds u32"))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            ck.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.insert("ab", Tensor::new(&[2], vec![1.0, -0.5]).unwrap());
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[..4], b"LIXT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..14], &2u16.to_le_bytes());
        assert_eq!(&b[14..16], b"ab");
        assert_eq!(b[16], 1);
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        assert_eq!(&b[21..29], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.insert("x", Tensor::zeros(&[3]));
        let b = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            specs in prop::collection::vec(
                (prop::collection::vec(1usize..4, 1..4), any::<u64>()), 0..5),
        ) {
            let mut ck = Checkpoint::new();
            for (i, (shape, bits)) in specs.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f64::from_bits(bits.wrapping_mul(j as u64 + 1) >> 2)).collect();
                ck.insert(format!("t{i}.w"), Tensor::new(shape, data).unwrap());
            }
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.len(), ck.len());
        }
    }
}
