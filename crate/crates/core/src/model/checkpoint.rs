//! Binary checkpoint format.
//!
//! ```text
//! "RDPN"            4 bytes
//! version           u32
//! config            9 x u32   patch_size embed_dim depth out_ch dw_kernel
//!                             in_channels num_classes height width
//! records until EOF:
//!   name_len u32, name (UTF-8)
//!   dtype u8 (0 = f32, 1 = f64)
//!   rank u32, extents rank x u32
//!   payload  product(extents) little-endian scalars
//! ```
//!
//! All integers are little-endian. Records hold every parameter and every
//! running statistic, keyed by registry name.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

use super::{RdpNet, RdpNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RDPN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64 (exact for both stored dtypes).
    pub values: Vec<f64>,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Record {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.values.iter().map(|&v| T::of(v)).collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Appends records in the format above (no header).
pub fn write_records(out: &mut Vec<u8>, records: &[Record]) {
    for r in records {
        put_u32(out, r.name.len());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype.tag());
        put_u32(out, r.shape.len());
        for &e in &r.shape {
            put_u32(out, e);
        }
        for &v in &r.values {
            match r.dtype {
                DType::F32 => (v as f32).write_le(out),
                DType::F64 => v.write_le(out),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses records starting at `offset` until the end of `bytes`.
pub fn read_records(bytes: &[u8], offset: usize) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: offset };
    let mut records = Vec::new();
    while !r.done() {
        let len = r.u32("record name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "record name is not UTF-8".into(),
            })?
            .to_string();
        let tag_at = r.pos;
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            offset: tag_at,
            msg: format!("unknown dtype tag {tag} for {name}"),
        })?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * dtype.size(), "payload")?;
        let values = payload
            .chunks_exact(dtype.size())
            .map(|c| match dtype {
                DType::F32 => f32::read_le(c) as f64,
                DType::F64 => f64::read_le(c),
            })
            .collect();
        records.push(Record {
            name,
            dtype,
            shape,
            values,
        });
    }
    Ok(records)
}

pub(crate) fn encode_header(magic: &[u8; 4], fields: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    for &f in fields {
        put_u32(&mut out, f);
    }
    out
}

/// Checks magic and version, then reads `n_fields` integers. Returns the
/// fields and the offset of the first record.
pub(crate) fn decode_header(bytes: &[u8], magic: &[u8; 4], n_fields: usize) -> Result<(Vec<usize>, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let mut fields = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        fields.push(r.u32("header field")?);
    }
    Ok((fields, r.pos))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl<T: Scalar> RdpNet<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = encode_header(CHECKPOINT_MAGIC, &self.config.fields());
        let records: Vec<Record> = self
            .registry
            .params()
            .map(|(name, p)| Record::from_tensor(name, &p.value))
            .chain(self.registry.buffers().map(|(name, b)| Record::from_tensor(name, b)))
            .collect();
        write_records(&mut out, &records);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (fields, offset) = decode_header(bytes, CHECKPOINT_MAGIC, 9)?;
        let config = RdpNetConfig::from_fields(fields.try_into().expect("nine fields"));
        let mut net = RdpNet::skeleton(config)?;
        let records = read_records(bytes, offset)?;
        let mut seen = std::collections::HashSet::new();
        for rec in &records {
            let slot = net.registry.slot_mut(&rec.name).ok_or_else(|| Error::Format {
                offset,
                msg: format!("unknown tensor {} for this configuration", rec.name),
            })?;
            if slot.shape() != rec.shape.as_slice() {
                return Err(Error::shape("load_checkpoint", slot.shape(), &rec.shape));
            }
            *slot = rec.to_tensor()?;
            seen.insert(rec.name.clone());
        }
        let missing: Vec<String> = net
            .registry
            .params()
            .map(|(n, _)| n.to_string())
            .chain(net.registry.buffers().map(|(n, _)| n.to_string()))
            .filter(|n| !seen.contains(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("checkpoint is missing {}", missing.join(", ")),
            });
        }
        Ok(net)
    }
}

pub fn save_checkpoint<T: Scalar>(net: &RdpNet<T>, path: &Path) -> Result<()> {
    write_file(path, &net.to_bytes())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<RdpNet<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RdpNet::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn net() -> RdpNet<f64> {
        let cfg = RdpNetConfig {
            patch_size: 2,
            embed_dim: 4,
            depth: 2,
            out_ch: 3,
            dw_kernel: 3,
            height: 8,
            width: 8,
            ..Default::default()
        };
        let mut net = RdpNet::build(cfg, &mut Rng::new(3)).unwrap();
        let rm = net
            .registry_mut()
            .slot_mut("division.norm.running_mean")
            .unwrap();
        rm.data_mut()[0] = 0.123;
        net
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = net();
        let b = RdpNet::<f64>::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a.config(), b.config());
        for ((na, pa), (nb, pb)) in a.registry().params().zip(b.registry().params()) {
            assert_eq!(na, nb);
            assert!(pa.value.bitwise_eq(&pb.value));
        }
        for ((_, ba), (_, bb)) in a.registry().buffers().zip(b.registry().buffers()) {
            assert!(ba.bitwise_eq(bb));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = net().to_bytes();
        assert_eq!(&bytes[..4], b"RDPN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut bytes = net().to_bytes();
        bytes[1] = b'X';
        let err = RdpNet::<f64>::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = net().to_bytes();
        let err = RdpNet::<f64>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = net().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            RdpNet::<f64>::from_bytes(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let a = net();
        let mut bytes = a.to_bytes();
        // Claim a wider trunk in the header; records no longer fit.
        bytes[12..16].copy_from_slice(&8u32.to_le_bytes());
        assert!(RdpNet::<f64>::from_bytes(&bytes).is_err());
    }
}
