//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PCAP"  u32 version
//! u64 len, spec JSON
//! u64 epoch, u64 adam t, f64 lr, f64 beta1, f64 beta2, f64 eps
//! u64 entry count
//! entries: u64 name len, name, u64 rank, u64 extents[rank], f64 data[..]
//! ```
//!
//! Entries are the model parameters in order, followed by `adam.m/<name>`
//! and `adam.v/<name>` for each.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, NetworkSpec};
use crate::tensor::Tensor;

use super::adam::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 4] = b"PCAP";
pub const VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Epoch after which the snapshot was taken (1-based; 0 before training).
    pub epoch: u64,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = ckpt.spec.canonical_text();
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.adam.t.to_le_bytes());
    let c = ckpt.adam.config;
    for x in [c.lr, c.beta1, c.beta2, c.eps] {
        out.extend_from_slice(&x.to_le_bytes());
    }

    let n = ckpt.params.len();
    out.extend_from_slice(&(3 * n as u64).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        put_entry(&mut out, name, t);
    }
    for (prefix, moments) in [(MOMENT_M, &ckpt.adam.m), (MOMENT_V, &ckpt.adam.v)] {
        for (i, t) in moments.iter().enumerate() {
            put_entry(&mut out, &format!("{prefix}{}", ckpt.params.name(i)), t);
        }
    }
    out
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                field,
                format!("truncated: need {n} bytes at offset {}, {remaining} left", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(field)?))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)?;
        usize::try_from(n).map_err(|_| Error::format(field, format!("length {n} does not fit in memory")))
    }

    fn entry(&mut self, ordinal: usize) -> Result<(String, Tensor)> {
        let at = format!("entry #{ordinal}");
        let name_len = self.len(&format!("{at} name length"))?;
        let name = std::str::from_utf8(self.take(name_len, &format!("{at} name"))?)
            .map_err(|_| Error::format(format!("{at} name"), "not UTF-8"))?
            .to_string();
        let rank = self.len(&format!("{name} rank"))?;
        if rank > 8 {
            return Err(Error::format(format!("{name} rank"), format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(self.len(&format!("{name} extent[{d}]"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| {
                Error::format(
                    format!("{name} data"),
                    format!("extents {shape:?} exceed the remaining {} bytes", self.bytes.len() - self.pos),
                )
            })?;
        let raw = self.take(count * 8, &format!("{name} data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name.clone(), Tensor::new(&shape, data)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a PCAP checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format("version", format!("expected {VERSION}, found {version}")));
    }
    let spec_len = r.len("spec length")?;
    let spec_text = std::str::from_utf8(r.take(spec_len, "spec")?)
        .map_err(|_| Error::format("spec", "not UTF-8"))?;
    let spec = NetworkSpec::from_canonical_text(spec_text)?;
    spec.validate()?;
    let epoch = r.u64("epoch")?;
    let t = r.u64("adam t")?;
    let config = AdamConfig {
        lr: r.f64("adam lr")?,
        beta1: r.f64("adam beta1")?,
        beta2: r.f64("adam beta2")?,
        eps: r.f64("adam eps")?,
    };

    let count = r.len("entry count")?;
    if count % 3 != 0 {
        return Err(Error::format("entry count", format!("{count} is not three entries per parameter")));
    }
    let n = count / 3;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        entries.push(r.entry(i)?);
    }
    let params = ModelParams::from_entries(entries)?;
    params.check_matches(&spec)?;

    let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for (k, prefix) in [MOMENT_M, MOMENT_V].into_iter().enumerate() {
        for i in 0..n {
            let (name, t) = r.entry(n * (k + 1) + i)?;
            let want = format!("{prefix}{}", params.name(i));
            if name != want || t.shape() != params.tensor(i).shape() {
                return Err(Error::format(
                    name,
                    format!("expected {want} {:?}, found {:?}", params.tensor(i).shape(), t.shape()),
                ));
            }
            moments[k].push(t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", format!("{} unexpected bytes after the last entry", bytes.len() - r.pos)));
    }
    let [m, v] = moments;
    Ok(Checkpoint {
        spec,
        params,
        adam: AdamState { config, t, m, v },
        epoch,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
