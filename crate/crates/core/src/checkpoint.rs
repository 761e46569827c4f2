//! Binary checkpoint format with a JSON sidecar.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "SPTRCKPT"
//! version    u32      = 1
//! config     7 × u64  d_model, n_experts, k_top, d_expert_hidden,
//!                     shared_expert (0/1), d_shared_hidden, vocab
//! router     f64 mu_s, f64 sigma_s, f64 stats_decay,
//!            u64 warmup_horizon, i64 global_step, u8 stats_initialized
//! tensors    u32 count, then per tensor:
//!            u32 name_len, name bytes (UTF-8), u32 ndim, ndim × u64 dims,
//!            product(dims) × f64 data
//! optimizer  u8 present; if 1: f64 beta1, f64 beta2, f64 eps,
//!            f64 weight_decay, u64 step, u32 count, then `count` first-moment
//!            tensors followed by `count` second-moment tensors, each as
//!            u32 ndim, ndim × u64 dims, data
//! ```
//!
//! The sidecar repeats the config in JSON together with the SHA-256 of the
//! binary image.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moe::{MoeConfig, MoeModel, MoeParams, RouterState};
use crate::numcore::Tensor;
use crate::optimizer::{AdamWConfig, AdamWState};

pub const MAGIC: &[u8; 8] = b"SPTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of parameters plus optimizer moments; equal digests mean a step
/// left the trainable state untouched.
pub fn state_digest(params: &MoeParams, opt: Option<&AdamWState>) -> String {
    let mut buf = Vec::new();
    params.write_le_bytes(&mut buf);
    if let Some(o) = opt {
        o.write_le_bytes(&mut buf);
    }
    sha256_hex(&buf)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    t.write_le_bytes(out);
}

pub fn encode(model: &MoeModel, opt: Option<&AdamWState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let c = &model.config;
    for v in [
        c.d_model,
        c.n_experts,
        c.k_top,
        c.d_expert_hidden,
        c.shared_expert as usize,
        c.d_shared_hidden,
        c.vocab,
    ] {
        put_u64(&mut out, v as u64);
    }
    let r = &model.router;
    put_f64(&mut out, r.mu_s);
    put_f64(&mut out, r.sigma_s);
    put_f64(&mut out, r.stats_decay);
    put_u64(&mut out, r.warmup_horizon);
    out.extend_from_slice(&r.global_step.to_le_bytes());
    out.push(r.stats_initialized as u8);

    let params = model.params();
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in params.names().iter().zip(tensors) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }

    match opt {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            put_f64(&mut out, o.config.beta1);
            put_f64(&mut out, o.config.beta2);
            put_f64(&mut out, o.config.eps);
            put_f64(&mut out, o.config.weight_decay);
            put_u64(&mut out, o.step);
            put_u32(&mut out, o.m.len() as u32);
            for t in o.m.iter().chain(&o.v) {
                put_tensor(&mut out, t);
            }
        }
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
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(MoeModel, Option<AdamWState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u64()? as usize;
    }
    let config = MoeConfig {
        d_model: dims[0],
        n_experts: dims[1],
        k_top: dims[2],
        d_expert_hidden: dims[3],
        shared_expert: dims[4] != 0,
        d_shared_hidden: dims[5],
        vocab: dims[6],
    };
    let router = RouterState {
        mu_s: r.f64()?,
        sigma_s: r.f64()?,
        stats_decay: r.f64()?,
        warmup_horizon: r.u64()?,
        global_step: r.i64()?,
        stats_initialized: r.u8()? != 0,
    };

    let count = r.u32()? as usize;
    let mut params = MoeParams::init(&config, &mut crate::numcore::RngStream::new(0, 0))?;
    let names = params.names();
    if count != names.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", names.len())));
    }
    for (slot, expected) in params.tensors_mut().into_iter().zip(&names) {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        if name != expected {
            return Err(Error::Format(format!("tensor {name} where {expected} expected")));
        }
        let t = r.tensor()?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
        }
        *slot = t;
    }
    let model = MoeModel::from_parts(config, params, router)?;

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let config = AdamWConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
            Some(AdamWState { config, step, m, v })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok((model, opt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub config: MoeConfig,
    pub router: RouterState,
    pub param_count: usize,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: Option<u64>,
    pub sha256: String,
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_checkpoint(dir: &Path, stem: &str, model: &MoeModel, opt: Option<&AdamWState>) -> Result<Sidecar> {
    let bytes = encode(model, opt);
    std::fs::write(dir.join(format!("{stem}.bin")), &bytes)?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        router: model.router.clone(),
        param_count: model.params().param_count(),
        optimizer: opt.map(|o| o.config),
        optimizer_step: opt.map(|o| o.step),
        sha256: sha256_hex(&bytes),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

pub fn read_checkpoint(path: &Path) -> Result<(MoeModel, Option<AdamWState>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeConfig;
    use crate::numcore::RngStream;
    use crate::optimizer::adamw_step;

    fn model() -> MoeModel {
        MoeModel::new(MoeConfig::default(), 7, &mut RngStream::new(3, 3)).unwrap()
    }

    #[test]
    fn round_trip_with_optimizer() {
        let mut m = model();
        m.router.global_step = 5;
        m.router.mu_s = 0.25;
        let mut opt = AdamWState::new(AdamWConfig::default(), m.params().tensors());
        let grads = m.params().clone();
        adamw_step(m.params_mut().tensors_mut(), grads.tensors(), &mut opt, 1e-3).unwrap();
        let bytes = encode(&m, Some(&opt));
        let (m2, opt2) = decode(&bytes).unwrap();
        assert_eq!(m2.params(), m.params());
        assert_eq!(m2.router, m.router);
        assert_eq!(opt2.as_ref(), Some(&opt));
        assert_eq!(encode(&m2, opt2.as_ref()), bytes);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&model(), None);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 16);
        assert_eq!(*bytes.last().unwrap(), 0);
    }

    #[test]
    fn corrupt_images_are_rejected() {
        let bytes = encode(&model(), None);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn files_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let side = write_checkpoint(dir.path(), "ckpt", &m, None).unwrap();
        let (back, opt) = read_checkpoint(&dir.path().join("ckpt.bin")).unwrap();
        assert!(opt.is_none());
        assert_eq!(back.params(), m.params());
        let json: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("ckpt.json")).unwrap()).unwrap();
        assert_eq!(json, side);
        assert_eq!(json.param_count, MoeConfig::default().param_count());
    }
}
