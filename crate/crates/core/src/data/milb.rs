//! The `MILB` bag container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MILB" | version u32 | feature_dim u32 | bag_count u32
//! per bag:
//!   id_len u16 | id (UTF-8) | label u8 | instance_count u32 | flags u8
//!   instance_count × feature_dim f32 (row-major)
//!   [flags bit0] instance_count × u8 instance labels
//!   [flags bit1] instance_count × (lesion u32, row u32, col u32)
//! trailing sections: tag [u8; 4] | payload_len u32 | payload
//! ```
//!
//! A lesion id of `0xFFFF_FFFF` means "no lesion". Readers skip unknown
//! trailing sections. The `BCTX` section stores bag-context vectors:
//! `context_dim u32` then `bag_count × context_dim` f32.

use std::fs;
use std::path::Path;

use super::{Bag, BagSet, DataError, Instance};

pub const MAGIC: &[u8; 4] = b"MILB";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_LABELS: u8 = 1;
const FLAG_GRID: u8 = 1 << 1;
const NO_LESION: u32 = u32::MAX;
const CONTEXT_TAG: &[u8; 4] = b"BCTX";

pub fn encode_bagset(set: &BagSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.bags.len() as u32).to_le_bytes());
    for bag in &set.bags {
        let id = bag.id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        out.push(bag.label);
        out.extend_from_slice(&(bag.len() as u32).to_le_bytes());
        let mut flags = 0;
        if bag.has_instance_labels() {
            flags |= FLAG_LABELS;
        }
        if bag.has_localization() {
            flags |= FLAG_GRID;
        }
        out.push(flags);
        for inst in &bag.instances {
            for v in &inst.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if flags & FLAG_LABELS != 0 {
            out.extend(bag.instances.iter().map(|i| i.label.unwrap_or(0)));
        }
        if flags & FLAG_GRID != 0 {
            for inst in &bag.instances {
                let (r, c) = inst.grid.unwrap_or((0, 0));
                out.extend_from_slice(&inst.lesion.unwrap_or(NO_LESION).to_le_bytes());
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }

    let ctx_dim = set.bags.first().map_or(0, |b| b.context.len());
    if ctx_dim > 0 && set.bags.iter().all(|b| b.context.len() == ctx_dim) {
        let mut payload = Vec::with_capacity(4 + 4 * ctx_dim * set.bags.len());
        payload.extend_from_slice(&(ctx_dim as u32).to_le_bytes());
        for bag in &set.bags {
            for v in &bag.context {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(CONTEXT_TAG);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, DataError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_bagset(buf: &[u8]) -> Result<BagSet, DataError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"MILB\""),
        });
    }
    let version_at = r.pos;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::Format {
            offset: version_at as u64,
            msg: format!("unsupported format version {version}"),
        });
    }
    let dim = r.u32("feature dimension")? as usize;
    let count = r.u32("bag count")? as usize;
    let mut bags = Vec::with_capacity(count.min(1 << 16));
    for b in 0..count {
        let id_len = r.u16("bag id length")? as usize;
        let id_at = r.pos;
        let id = std::str::from_utf8(r.take(id_len, "bag id")?)
            .map_err(|_| DataError::Format {
                offset: id_at as u64,
                msg: format!("bag {b} id is not UTF-8"),
            })?
            .to_owned();
        let label = r.u8("bag label")?;
        let n = r.u32("instance count")? as usize;
        let flags = r.u8("bag flags")?;
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| r.err("instance block size overflows"))?;
        let features = r.f32s(total, "features")?;
        let mut instances: Vec<Instance> = if dim == 0 {
            (0..n).map(|_| Instance::new(Vec::new())).collect()
        } else {
            features
                .chunks_exact(dim)
                .map(|c| Instance::new(c.to_vec()))
                .collect()
        };
        if flags & FLAG_LABELS != 0 {
            let labels = r.take(n, "instance labels")?;
            for (inst, &l) in instances.iter_mut().zip(labels) {
                inst.label = Some(l);
            }
        }
        if flags & FLAG_GRID != 0 {
            for inst in instances.iter_mut() {
                let lesion = r.u32("lesion id")?;
                let row = r.u32("grid row")?;
                let col = r.u32("grid col")?;
                inst.lesion = (lesion != NO_LESION).then_some(lesion);
                inst.grid = Some((row, col));
            }
        }
        bags.push(Bag {
            id,
            label,
            instances,
            context: Vec::new(),
        });
    }

    while r.remaining() > 0 {
        let tag = r.take(4, "section tag")?;
        let len = r.u32("section length")? as usize;
        let payload_at = r.pos;
        let payload = r.take(len, "section payload")?;
        if tag == CONTEXT_TAG {
            let mut sub = Reader {
                buf: payload,
                pos: 0,
            };
            let shift = |e: DataError| match e {
                DataError::Format { offset, msg } => DataError::Format {
                    offset: offset + payload_at as u64,
                    msg,
                },
                other => other,
            };
            let k = sub.u32("context dimension").map_err(shift)? as usize;
            for bag in bags.iter_mut() {
                bag.context = sub.f32s(k, "bag context").map_err(shift)?;
            }
        }
    }

    Ok(BagSet {
        feature_dim: dim,
        bags,
    })
}

pub fn write_bagset(set: &BagSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_bagset(set)).map_err(|e| DataError::io(path, e))
}

pub fn read_bagset(path: impl AsRef<Path>) -> Result<BagSet, DataError> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_bagset(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec, Split, SplitCounts};
    use proptest::prelude::*;

    fn sample_set() -> BagSet {
        let ds = generate(&GenSpec {
            feature_dim: 10,
            bags_per_class: SplitCounts {
                train: 3,
                val: 0,
                test: 0,
            },
            instances_per_bag: (5, 12),
            seed: 2,
            ..GenSpec::default()
        })
        .unwrap();
        ds.bagset(Split::Train).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let set = sample_set();
        let bytes = encode_bagset(&set);
        let back = decode_bagset(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_bagset(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_bagset(&sample_set());
        assert_eq!(&bytes[..4], b"MILB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_bagset(&sample_set());
        bytes[0] = b'X';
        assert!(matches!(
            decode_bagset(&bytes),
            Err(DataError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = encode_bagset(&sample_set());
        bytes[4] = 9;
        assert!(matches!(
            decode_bagset(&bytes),
            Err(DataError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_bagset(&sample_set());
        let cut = &bytes[..100];
        match decode_bagset(cut) {
            Err(DataError::Format { offset, .. }) => assert!(offset <= 100),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_trailing_sections_are_skipped() {
        let set = sample_set();
        let mut bytes = encode_bagset(&set);
        bytes.extend_from_slice(b"ZZZZ");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_bagset(&bytes).unwrap(), set);
    }

    proptest! {
        #[test]
        fn arbitrary_bags_round_trip(
            dim in 1usize..5,
            bags in prop::collection::vec(
                (any::<u8>().prop_map(|l| l % 2), prop::collection::vec(-1e3f32..1e3, 1..40), any::<bool>()),
                0..6,
            )
        ) {
            let bags: Vec<Bag> = bags
                .into_iter()
                .enumerate()
                .map(|(i, (label, vals, with_grid))| {
                    let n = vals.len().div_ceil(dim);
                    let instances = (0..n)
                        .map(|j| {
                            let mut inst = Instance::new(
                                (0..dim).map(|k| vals[(j * dim + k) % vals.len()]).collect(),
                            );
                            if with_grid {
                                inst.grid = Some((j as u32, 0));
                            }
                            inst
                        })
                        .collect();
                    Bag { id: format!("bag-{i}"), label, instances, context: vec![] }
                })
                .collect();
            let set = BagSet { feature_dim: dim, bags };
            let bytes = encode_bagset(&set);
            prop_assert_eq!(decode_bagset(&bytes).unwrap(), set);
        }
    }
}
