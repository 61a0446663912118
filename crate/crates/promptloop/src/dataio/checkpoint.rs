//! Flat binary weight files: a short text header (architecture id, tensor
//! names and shapes, precision) followed by raw little-endian payload.

use std::path::Path;

use crate::autodiff::{Precision, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "PLWEIGHTS 1";
const MAX_ELEMS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub precision: Precision,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>, tensors: Vec<(String, Tensor<f64>)>) -> Self {
        Checkpoint { arch: arch.into(), precision: Precision::Double, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("arch {}\n", ck.arch));
    head.push_str(&format!("precision {}\n", ck.precision.as_str()));
    head.push_str(&format!("tensors {}\n", ck.tensors.len()));
    for (name, t) in &ck.tensors {
        head.push_str(name);
        for d in t.shape() {
            head.push_str(&format!(" {d}"));
        }
        head.push('\n');
    }
    head.push_str("data\n");
    let mut out = head.into_bytes();
    for (_, t) in &ck.tensors {
        match ck.precision {
            Precision::Double => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::Single => {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |msg: &str| Error::config("checkpoint", msg.to_string());
    // Header is ASCII lines up to and including "data\n".
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<&str> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
            if *pos - start > 4096 {
                return Err(err("header line too long"));
            }
        }
        if *pos >= bytes.len() {
            return Err(err("truncated header"));
        }
        let line = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| err("non-utf8 header"))?;
        *pos += 1;
        Ok(line)
    };

    if next_line(&mut pos)? != MAGIC {
        return Err(err("bad magic"));
    }
    let arch_line = next_line(&mut pos)?;
    let arch = arch_line.strip_prefix("arch ").ok_or_else(|| err("missing arch"))?.to_string();
    if arch.is_empty() || arch.len() > 64 {
        return Err(err("bad arch id"));
    }
    let prec_line = next_line(&mut pos)?;
    let prec_str = prec_line.strip_prefix("precision ").ok_or_else(|| err("missing precision"))?;
    let precision = Precision::parse(prec_str).ok_or_else(|| err("unknown precision"))?;
    let count_line = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("missing tensor count"))?;
    if count > 4096 {
        return Err(err("unreasonable tensor count"));
    }

    let mut metas: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    let mut total_elems = 0usize;
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let mut it = line.split(' ');
        let name = it.next().ok_or_else(|| err("missing tensor name"))?.to_string();
        if name.is_empty() {
            return Err(err("empty tensor name"));
        }
        let mut shape = Vec::new();
        for tok in it {
            let d: usize = tok.parse().map_err(|_| err("bad shape dim"))?;
            if d == 0 || d > MAX_ELEMS {
                return Err(err("bad shape dim"));
            }
            shape.push(d);
        }
        if shape.is_empty() || shape.len() > 8 {
            return Err(err("bad shape rank"));
        }
        let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("shape overflow"))?;
        total_elems = total_elems.checked_add(elems).ok_or_else(|| err("shape overflow"))?;
        if total_elems > MAX_ELEMS {
            return Err(err("payload too large"));
        }
        metas.push((name, shape));
    }
    if next_line(&mut pos)? != "data" {
        return Err(err("missing data marker"));
    }

    let width = match precision {
        Precision::Double => 8,
        Precision::Single => 4,
    };
    let payload = &bytes[pos..];
    if payload.len() != total_elems * width {
        return Err(err("payload length mismatch"));
    }
    let mut tensors = Vec::with_capacity(count);
    let mut off = 0usize;
    for (name, shape) in metas {
        let elems: usize = shape.iter().product();
        let mut data = Vec::with_capacity(elems);
        for _ in 0..elems {
            let v = match precision {
                Precision::Double => f64::from_le_bytes(payload[off..off + 8].try_into().unwrap()),
                Precision::Single => f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64,
            };
            if !v.is_finite() {
                return Err(err("non-finite weight"));
            }
            data.push(v);
            off += width;
        }
        tensors.push((name, Tensor::new(&shape, data)));
    }
    Ok(Checkpoint { arch, precision, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::missing("checkpoint", path));
    }
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            "mlp_small",
            vec![
                ("w1".into(), Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0])),
                ("b1".into(), Tensor::new(&[3], vec![1e-17, 2.0, -3.0])),
            ],
        )
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = encode_checkpoint(&sample());
        let text = String::from_utf8_lossy(&bytes[..60]);
        assert!(text.starts_with("PLWEIGHTS 1\narch mlp_small\nprecision double\ntensors 2\n"));
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let good = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
        assert!(decode_checkpoint(b"PLWEIGHTS 2\n").is_err());
        // Huge claimed shape must be rejected before allocation.
        let evil = b"PLWEIGHTS 1\narch x\nprecision double\ntensors 1\nw 99999999 99999999\ndata\n";
        assert!(decode_checkpoint(evil).is_err());
    }

    #[test]
    fn single_precision_payload_parses() {
        let mut ck = sample();
        ck.precision = Precision::Single;
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back.precision, Precision::Single);
        assert!((back.tensors[0].1.data()[0] - 0.1).abs() < 1e-7);
    }
}
