//! Parameter file format.
//!
//! ```text
//! magic        4 bytes   "CFL1"
//! n_layers     u32 LE
//! layer_sizes  n_layers × u32 LE
//! output       u8        0 = sigmoid, 1 = identity
//! leaky_slope  f64 LE
//! per hidden layer:
//!   flags      u8        bit 0 = batch-norm
//!   dropout    f64 LE
//! role_len     u32 LE
//! role         role_len bytes, UTF-8 (empty when untagged)
//! n_values     u64 LE
//! values       n_values × f64 LE
//! ```
//!
//! Decoding rejects trailing bytes and any `n_values` that disagrees with the
//! architecture.

use super::{ArchSpec, ModelParams, NnError, OutputActivation};

pub const MAGIC: &[u8; 4] = b"CFL1";

pub fn serialize_params(params: &ModelParams) -> Vec<u8> {
    serialize_tagged(params, "")
}

pub fn serialize_tagged(params: &ModelParams, role: &str) -> Vec<u8> {
    let arch = params.arch();
    let mut out = Vec::with_capacity(64 + params.values().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arch.layer_sizes.len() as u32).to_le_bytes());
    for &s in &arch.layer_sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.push(match arch.output {
        OutputActivation::Sigmoid => 0,
        OutputActivation::Identity => 1,
    });
    out.extend_from_slice(&arch.leaky_slope.to_le_bytes());
    for (bn, p) in arch.batch_norm.iter().zip(&arch.dropout) {
        out.push(u8::from(*bn));
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(role.len() as u32).to_le_bytes());
    out.extend_from_slice(role.as_bytes());
    out.extend_from_slice(&(params.values().len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ModelParams, NnError> {
    deserialize_tagged(bytes).map(|(p, _)| p)
}

/// Decodes a parameter file, returning the role tag alongside.
pub fn deserialize_tagged(bytes: &[u8]) -> Result<(ModelParams, String), NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Parse("bad magic".into()));
    }
    let n_layers = r.u32()? as usize;
    if n_layers > 1 << 16 {
        return Err(NnError::Parse("implausible layer count".into()));
    }
    let layer_sizes = (0..n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let output = match r.u8()? {
        0 => OutputActivation::Sigmoid,
        1 => OutputActivation::Identity,
        t => return Err(NnError::Parse(format!("unknown output activation tag {t}"))),
    };
    let leaky_slope = r.f64()?;
    let hidden = n_layers.saturating_sub(2);
    let mut batch_norm = Vec::with_capacity(hidden);
    let mut dropout = Vec::with_capacity(hidden);
    for _ in 0..hidden {
        let flags = r.u8()?;
        if flags > 1 {
            return Err(NnError::Parse(format!("unknown layer flags {flags:#x}")));
        }
        batch_norm.push(flags == 1);
        dropout.push(r.f64()?);
    }
    let arch = ArchSpec {
        layer_sizes,
        leaky_slope,
        output,
        batch_norm,
        dropout,
    };
    arch.validate().map_err(|e| NnError::Parse(format!("header: {e}")))?;
    let role_len = r.u32()? as usize;
    let role = std::str::from_utf8(r.take(role_len)?)
        .map_err(|_| NnError::Parse("role tag is not UTF-8".into()))?
        .to_owned();
    let n_values = r.u64()? as usize;
    let expected = arch.param_count();
    if n_values != expected {
        return Err(NnError::Parse(format!(
            "header declares {n_values} values, architecture implies {expected}"
        )));
    }
    if r.remaining() != n_values * 8 {
        return Err(NnError::Parse(format!(
            "payload holds {} bytes, expected {}",
            r.remaining(),
            n_values * 8
        )));
    }
    let values = (0..n_values).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let params = ModelParams::new(arch, values).map_err(|e| NnError::Parse(e.to_string()))?;
    Ok((params, role))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.remaining() < n {
            return Err(NnError::Parse(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
