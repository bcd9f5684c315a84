//! Binary weight files.
//!
//! Layout (little endian): `b"MSDW"`, `u32` version, then sections of
//! `[4-byte tag][u64 payload length][payload]`:
//!
//! * `TRGT` — target config (u32 length + JSON) followed by tensors
//! * `DRFT` — mode byte, draft config (u32 length + JSON), tensors
//! * `META` — free-form JSON (run config, seeds, code version)
//!
//! A tensor block is a `u32` count followed by, per tensor, `u16` name
//! length, name bytes, `u32` rows, `u32` cols and row-major `f64` data.

use std::io::{Read, Write};

use crate::draft::{DraftConfig, DraftMode, DraftParams};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::target::{TargetConfig, TargetParams};

pub const MAGIC: &[u8; 4] = b"MSDW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub target: Option<TargetParams>,
    pub draft: Option<(DraftConfig, DraftParams)>,
    pub meta: serde_json::Value,
}

fn put_json<T: serde::Serialize>(buf: &mut Vec<u8>, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(())
}

fn put_tensors<P: Parameters>(buf: &mut Vec<u8>, params: &P) {
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

impl WeightFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        if let Some(t) = &self.target {
            let mut p = Vec::new();
            put_json(&mut p, &t.config)?;
            put_tensors(&mut p, t);
            section(&mut out, b"TRGT", &p);
        }
        if let Some((cfg, d)) = &self.draft {
            let mut p = vec![match d.mode {
                DraftMode::Decoupled => 0u8,
                DraftMode::BaselineConcat => 1u8,
            }];
            put_json(&mut p, cfg)?;
            put_tensors(&mut p, d);
            section(&mut out, b"DRFT", &p);
        }
        let mut p = Vec::new();
        put_json(&mut p, &self.meta)?;
        section(&mut out, b"META", &p);
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Parses a file; the draft section needs the target section (shared
    /// embeddings fix its shapes) or `companion_target`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_with(bytes, None)
    }

    pub fn from_bytes_with(bytes: &[u8], companion_target: Option<&TargetParams>) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let mut file = WeightFile::default();
        let mut draft_payload = None;
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let mut p = Cursor { bytes: payload, pos: 0 };
            match &tag {
                b"TRGT" => {
                    let config: TargetConfig = p.json()?;
                    let mut t = TargetParams::new(config);
                    p.fill(&mut t)?;
                    p.finish()?;
                    file.target = Some(t);
                }
                b"DRFT" => draft_payload = Some(payload),
                b"META" => {
                    file.meta = p.json()?;
                    p.finish()?;
                }
                other => {
                    return Err(Error::WeightFormat(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        if let Some(payload) = draft_payload {
            let target = file
                .target
                .as_ref()
                .or(companion_target)
                .ok_or_else(|| Error::WeightFormat("draft section needs target weights".into()))?;
            let mut p = Cursor { bytes: payload, pos: 0 };
            let mode = match p.take(1)?[0] {
                0 => DraftMode::Decoupled,
                1 => DraftMode::BaselineConcat,
                b => return Err(Error::WeightFormat(format!("unknown draft mode {b}"))),
            };
            let config: DraftConfig = p.json()?;
            if config.mode != mode {
                return Err(Error::WeightFormat("draft mode byte disagrees with config".into()));
            }
            let mut d = DraftParams::new(target, &config);
            p.fill(&mut d)?;
            p.finish()?;
            file.draft = Some((config, d));
        }
        Ok(file)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.u32()? as usize;
        Ok(serde_json::from_slice(self.take(len)?)?)
    }

    fn fill<P: Parameters>(&mut self, params: &mut P) -> Result<()> {
        let expected: Vec<(String, usize, usize)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.rows(), t.cols()))
            .collect();
        let count = self.u32()? as usize;
        if count != expected.len() {
            return Err(Error::WeightFormat(format!("{count} tensors, expected {}", expected.len())));
        }
        for ((name, rows, cols), t) in expected.into_iter().zip(params.tensors_mut()) {
            let len = self.u16()? as usize;
            let got = String::from_utf8_lossy(self.take(len)?).into_owned();
            let (r, c) = (self.u32()? as usize, self.u32()? as usize);
            if got != name || r != rows || c != cols {
                return Err(Error::WeightFormat(format!(
                    "tensor {got} {r}x{c} where {name} {rows}x{cols} was expected"
                )));
            }
            for v in t.data_mut() {
                *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::WeightFormat("trailing bytes in section".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        let target = TargetParams::new(TargetConfig { dim: 8, depth: 1, seed: 3, ..TargetConfig::default() });
        let cfg = DraftConfig { mode: DraftMode::BaselineConcat, mlp_hidden: 8, seed: 4 };
        let draft = DraftParams::new(&target, &cfg);
        WeightFile {
            target: Some(target),
            draft: Some((cfg, draft)),
            meta: serde_json::json!({"seed": 3}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(WeightFile::from_bytes(&bytes).unwrap(), f);
        assert_eq!(WeightFile::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn draft_only_file_needs_a_target() {
        let mut f = sample();
        let target = f.target.take().unwrap();
        let bytes = f.to_bytes().unwrap();
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::WeightFormat(_))));
        let back = WeightFile::from_bytes_with(&bytes, Some(&target)).unwrap();
        assert_eq!(back.draft, f.draft);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightFile::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(WeightFile::from_bytes(&bad).is_err());
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
