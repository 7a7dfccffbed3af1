//! `OMNC` checkpoint container.
//!
//! Layout: magic `OMNC`, `u32` version, `u64` header length, a UTF-8 header,
//! then the payload of concatenated little-endian tensor buffers. The header
//! is line oriented and ends with a checksum of the lines before it:
//!
//! ```text
//! payload_bytes 1234
//! payload_sha256 <hex>
//! meta <key> <value>
//! tensor <name> <dtype> <d0>x<d1>.. <offset> <length>
//! header_sha256 <hex>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::encoder::params::hex;
use crate::encoder::{adapter_param_name, Adapter, EncoderConfig, OmniEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OMNC";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64(Vec<i64>),
}

impl Entry {
    fn dtype_name(&self) -> &'static str {
        match self {
            Entry::F32(_) => "f32",
            Entry::F64(_) => "f64",
            Entry::I64(_) => "i64",
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Entry::F32(t) => t.shape().to_vec(),
            Entry::F64(t) => t.shape().to_vec(),
            Entry::I64(v) => vec![v.len()],
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Entry::F32(t) => t.to_le_bytes(),
            Entry::F64(t) => t.to_le_bytes(),
            Entry::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_tensor<F: Float>(t: &Tensor<F>) -> Entry {
        match F::DTYPE {
            DType::F32 => Entry::F32(t.cast()),
            DType::F64 => Entry::F64(t.cast()),
        }
    }

    pub fn to_tensor<F: Float>(&self) -> Result<Tensor<F>> {
        match self {
            Entry::F32(t) if F::DTYPE == DType::F32 => Ok(t.cast()),
            Entry::F64(t) if F::DTYPE == DType::F64 => Ok(t.cast()),
            other => Err(Error::Data(format!("entry of dtype {} cannot load as {}", other.dtype_name(), F::DTYPE))),
        }
    }
}

/// Named entries plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: IndexMap<String, Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut index = String::new();
        for (name, e) in &self.entries {
            check_token(name)?;
            let b = e.bytes();
            let shape: Vec<String> = e.shape().iter().map(|s| s.to_string()).collect();
            index.push_str(&format!(
                "tensor {name} {} {} {} {}\n",
                e.dtype_name(),
                shape.join("x"),
                payload.len(),
                b.len()
            ));
            payload.extend_from_slice(&b);
        }
        let mut header = format!("payload_bytes {}\npayload_sha256 {}\n", payload.len(), hex(&Sha256::digest(&payload)));
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains('\n') {
                return Err(Error::Data(format!("meta value for `{k}` contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        header.push_str(&index);
        seal_header(&mut header);
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body_start) = read_preamble(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut payload_len = None;
        let mut checksum = None;
        let mut meta = BTreeMap::new();
        let mut index = Vec::new();
        let mut line_off = PREAMBLE;
        for line in header.lines() {
            let err = |m: &str| Error::format(line_off, format!("{m}: `{line}`"));
            let mut parts = line.splitn(2, ' ');
            let tag = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match tag {
                "payload_bytes" => payload_len = Some(rest.parse::<usize>().map_err(|_| err("bad payload size"))?),
                "payload_sha256" => checksum = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(err("malformed tensor line"));
                    }
                    let shape = f[2]
                        .split('x')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err("bad shape"))?;
                    let off: usize = f[3].parse().map_err(|_| err("bad offset"))?;
                    let len: usize = f[4].parse().map_err(|_| err("bad length"))?;
                    index.push((f[0].to_string(), f[1].to_string(), shape, off, len, line_off));
                }
                "" => {}
                _ => return Err(err("unknown header line")),
            }
            line_off += line.len() + 1;
        }
        let payload_len = payload_len.ok_or_else(|| Error::format(PREAMBLE, "header lacks payload_bytes"))?;
        let checksum = checksum.ok_or_else(|| Error::format(PREAMBLE, "header lacks payload_sha256"))?;
        let payload = &bytes[body_start..];
        if payload.len() != payload_len {
            return Err(Error::format(
                body_start + payload.len().min(payload_len),
                format!("payload is {} bytes, header declares {payload_len}", payload.len()),
            ));
        }
        if hex(&Sha256::digest(payload)) != checksum {
            return Err(Error::format(body_start, "payload checksum mismatch"));
        }
        let mut entries = IndexMap::new();
        let mut cursor = 0;
        for (name, dtype, shape, off, len, at) in index {
            if off != cursor || off + len > payload.len() {
                return Err(Error::format(at, format!("tensor `{name}` span {off}+{len} is out of order or out of range")));
            }
            cursor += len;
            let raw = &payload[off..off + len];
            let entry = match dtype.as_str() {
                "f32" => Entry::F32(Tensor::from_le_bytes(&shape, raw).map_err(|e| Error::format(at, e.to_string()))?),
                "f64" => Entry::F64(Tensor::from_le_bytes(&shape, raw).map_err(|e| Error::format(at, e.to_string()))?),
                "i64" => {
                    if len % 8 != 0 || shape != [len / 8] {
                        return Err(Error::format(at, format!("integer list `{name}` has inconsistent length")));
                    }
                    Entry::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                other => return Err(Error::format(at, format!("unknown dtype `{other}`"))),
            };
            entries.insert(name, entry);
        }
        if cursor != payload.len() {
            return Err(Error::format(body_start + cursor, "payload has trailing bytes not named in the index"));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Data(format!("name `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

/// Validates magic, version and header length; returns the header text and
/// the offset where the body begins.
pub(crate) fn read_preamble<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<(&'a str, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::format(0, format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap())));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated before version"));
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if v != version {
        return Err(Error::format(4, format!("unsupported version {v}")));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format(8, "truncated before header length"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = PREAMBLE.checked_add(hlen).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::format(bytes.len(), format!("truncated header, declared {hlen} bytes")))?;
    let header =
        std::str::from_utf8(&bytes[PREAMBLE..end]).map_err(|e| Error::format(PREAMBLE + e.valid_up_to(), "header is not UTF-8"))?;
    Ok((verify_header(header)?, end))
}

const HEADER_SEAL: &str = "header_sha256 ";

pub(crate) fn seal_header(header: &mut String) {
    let digest = hex(&Sha256::digest(header.as_bytes()));
    header.push_str(HEADER_SEAL);
    header.push_str(&digest);
    header.push('\n');
}

/// Checks the trailing `header_sha256` line and returns the lines it covers.
fn verify_header(header: &str) -> Result<&str> {
    let body_end = header.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
    let (body, seal) = header.split_at(body_end);
    let digest = seal
        .strip_prefix(HEADER_SEAL)
        .and_then(|d| d.strip_suffix('\n'))
        .ok_or_else(|| Error::format(PREAMBLE + body_end, "header lacks a trailing header_sha256 line"))?;
    if hex(&Sha256::digest(body.as_bytes())) != digest {
        return Err(Error::format(PREAMBLE, "header checksum mismatch"));
    }
    Ok(body)
}

const ADAPTER_PREFIX: &str = "sbora.";

impl<F: Float> OmniEncoder<F> {
    /// Every parameter (adapters included), the config, adapter indices and
    /// any extra metadata such as seeds.
    pub fn to_checkpoint(&self, extra_meta: &[(&str, String)]) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, v) in self.cfg.to_pairs() {
            ck.meta.insert(format!("config.{k}"), v);
        }
        for (k, v) in extra_meta {
            ck.meta.insert((*k).to_string(), v.clone());
        }
        let frozen: Vec<&str> = self.params.iter().filter(|(_, p)| !p.trainable).map(|(k, _)| k).collect();
        if !frozen.is_empty() {
            ck.meta.insert("frozen".into(), frozen.join(","));
        }
        for (k, p) in self.params.iter() {
            ck.entries.insert(k.to_string(), Entry::from_tensor(&p.value));
        }
        for (layer, a) in &self.adapters {
            ck.entries.insert(
                format!("{ADAPTER_PREFIX}{layer}.idx"),
                Entry::I64(a.indices.iter().map(|&i| i as i64).collect()),
            );
            ck.meta.insert(format!("{ADAPTER_PREFIX}{layer}.alpha"), format!("{:?}", a.alpha));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = EncoderConfig::from_pairs(
            ck.meta.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.as_str()))),
        )?;
        let mut params = ParamSet::new();
        let mut adapters = IndexMap::new();
        for (name, e) in &ck.entries {
            if let Some(layer) = name.strip_prefix(ADAPTER_PREFIX).and_then(|n| n.strip_suffix(".idx")) {
                let Entry::I64(idx) = e else {
                    return Err(Error::Data(format!("`{name}` must be an integer list")));
                };
                let alpha: f64 = ck
                    .meta
                    .get(&format!("{ADAPTER_PREFIX}{layer}.alpha"))
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("adapter `{layer}` lacks alpha")))?;
                let indices = idx
                    .iter()
                    .map(|&i| usize::try_from(i).map_err(|_| Error::Data(format!("negative index in `{name}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if !ck.entries.contains_key(&adapter_param_name(layer)) {
                    return Err(Error::Data(format!("adapter `{layer}` lacks its B matrix")));
                }
                adapters.insert(layer.to_string(), Adapter { indices, alpha });
            } else {
                params.insert(name.clone(), e.to_tensor()?);
            }
        }
        if let Some(frozen) = ck.meta.get("frozen") {
            for name in frozen.split(',').filter(|s| !s.is_empty()) {
                params.set_trainable(name, false)?;
            }
        }
        OmniEncoder::from_parts(cfg, params, adapters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("seed".into(), "7".into());
        ck.entries.insert("a".into(), Entry::F32(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, f32::EPSILON]).unwrap()));
        ck.entries.insert("b.idx".into(), Entry::I64(vec![3, 1, 4]));
        ck.entries.insert("c".into(), Entry::F64(Tensor::from_vec(&[1], vec![std::f64::consts::PI]).unwrap()));
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OMNC");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn payload_corruption_fails_checksum() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 3;
        bad[last] ^= 0x01;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i} ^ {flip:#x} went unnoticed");
            }
        }
    }

    #[test]
    fn model_round_trip_keeps_config_and_freezing() {
        let mut cfg = EncoderConfig::desk();
        cfg.head_mode = crate::encoder::HeadMode::Shared;
        let mut enc = OmniEncoder::<f32>::new(cfg, 11).unwrap();
        enc.params.set_trainable("cls_token", false).unwrap();
        let ck = enc.to_checkpoint(&[("seed", "11".into())]);
        let back = OmniEncoder::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, enc);
        assert_eq!(ck.entries.len(), enc.params.len());
    }
}
