//! Little-endian binary checkpoints.
//!
//! ```text
//! "GFBS" | version u32 | spec_len u32 | spec UTF-8
//! repeated: name_len u32 | name UTF-8 | dtype u8 | ndim u8 | dims u32 × ndim | raw elements
//! ```

use std::fs;
use std::path::Path;

use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GFBS";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = net.spec().to_text();
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    for (name, t) in net.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
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
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_elements<T: Scalar>(raw: &[u8], dtype: DType) -> Vec<T> {
    raw.chunks_exact(dtype.size())
        .map(|b| match dtype {
            DType::F32 => T::of(f32::read_le(b) as f64),
            DType::F64 => T::of(f64::read_le(b)),
        })
        .collect()
}

/// Decodes a checkpoint. Elements stored at another width are converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(Error::format("not a GFBS checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec_text =
        std::str::from_utf8(r.take(spec_len)?).map_err(|_| Error::format("spec text is not UTF-8"))?;
    let spec = NetworkSpec::parse(spec_text).map_err(|e| Error::format(format!("embedded spec: {e}")))?;
    let mut net = Network::<T>::zeroed(&spec)?;
    let mut expected: std::collections::BTreeSet<String> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?.to_string();
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::format(format!("`{name}`: unknown dtype tag")))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * dtype.size())?;
        let tensor = Tensor::new(dims, read_elements(raw, dtype)).map_err(|e| Error::format(format!("`{name}`: {e}")))?;
        if !expected.remove(&name) {
            return Err(Error::format(format!("unexpected or duplicate tensor `{name}`")));
        }
        net.set_named(&name, tensor)?;
    }
    if let Some(missing) = expected.into_iter().next() {
        return Err(Error::format(format!("checkpoint is missing tensor `{missing}`")));
    }
    Ok(net)
}

/// Element type the checkpoint was written with (that of its first tensor).
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(Error::format("not a GFBS checkpoint (bad magic)"));
    }
    r.u32()?;
    let spec_len = r.u32()? as usize;
    r.take(spec_len)?;
    if r.done() {
        return Ok(DType::F32);
    }
    let name_len = r.u32()? as usize;
    r.take(name_len)?;
    DType::from_tag(r.u8()?).ok_or_else(|| Error::format("unknown dtype tag"))
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network<f32> {
        let s = NetworkSpec::parse("input 1 6 6\nconv_bn_relu 4 3 1 1\nresidual_begin 4 1 1 0\nconv_bn 4 3 1 1\nresidual_add\ngap\nlinear 3\n")
            .unwrap();
        Network::build(&s, 5).unwrap()
    }

    #[test]
    fn encode_decode_is_byte_stable() {
        let n = net();
        let bytes = encode(&n);
        let back: Network<f32> = decode(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(encode(&back), bytes);
        assert_eq!(stored_dtype(&bytes).unwrap(), DType::F32);
        assert_eq!(stored_dtype(&encode(&n.cast::<f64>())).unwrap(), DType::F64);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&net());
        let short = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(decode::<f32>(&short), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode::<f32>(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_wrong_version() {
        let mut bytes = encode(&net());
        bytes[4] = 9;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_shape_mismatch_against_spec() {
        let n = net();
        let bytes = encode(&n);
        // widen the first conv in the embedded spec so stored tensors no longer fit
        let spec = n.spec().to_text();
        let patched = spec.replacen("conv_bn_relu 4", "conv_bn_relu 5", 1);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + spec.len()..]);
        assert!(matches!(decode::<f32>(&out), Err(Error::Format(_))));
    }

    #[test]
    fn widens_f32_to_f64() {
        let n = net();
        let wide: Network<f64> = decode(&encode(&n)).unwrap();
        assert_eq!(wide.named_tensors().len(), n.named_tensors().len());
        assert_eq!(wide.cast::<f32>(), n);
    }
}
