//! Flat binary checkpoint of a layer stack.
//!
//! Layout (all integers `u32` little-endian, all arrays `f32` little-endian):
//!
//! ```text
//! magic "DBCCKPT\0" | version | layer count |
//!   per layer: tag u8 | shape header | arrays
//! ```
//!
//! | tag | kind      | header                   | arrays                               |
//! |-----|-----------|--------------------------|--------------------------------------|
//! | 1   | conv      | in_c, out_c, k, pad      | weight (out_c·in_c·k·k), bias        |
//! | 2   | deconv    | in_c, out_c, k, pad      | weight (in_c·out_c·k·k), bias        |
//! | 3   | maxpool   | none                     | none                                 |
//! | 4   | unpool    | none                     | none                                 |
//! | 5   | batchnorm | channels                 | gamma, beta, running mean, running var |
//! | 6   | relu      | none                     | none                                 |

use std::io::Write;

use super::{BatchNorm, Conv, Deconv, Layer, LayerKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBCCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit the u32 header field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_layers<W: Write>(w: &mut W, layers: &[Layer<f32>]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    put_u32(w, layers.len())?;
    for layer in layers {
        w.write_all(&[layer.kind().tag()])?;
        match layer {
            Layer::Conv(Conv { in_c, out_c, k, pad, weight, bias })
            | Layer::Deconv(Deconv { in_c, out_c, k, pad, weight, bias }) => {
                for v in [*in_c, *out_c, *k, *pad] {
                    put_u32(w, v)?;
                }
                put_f32s(w, weight.data())?;
                put_f32s(w, bias)?;
            }
            Layer::BatchNorm(bn) => {
                put_u32(w, bn.channels)?;
                put_f32s(w, &bn.gamma)?;
                put_f32s(w, &bn.beta)?;
                put_f32s(w, &bn.running_mean)?;
                put_f32s(w, &bn.running_var)?;
            }
            Layer::MaxPool | Layer::Unpool | Layer::Relu => {}
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("truncated checkpoint while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or(Error::Parse { offset: self.pos as u64, message: "array too large".into() })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn read_layers(bytes: &[u8]) -> Result<Vec<Layer<f32>>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        cur.pos = 0;
        return cur.err("bad checkpoint magic");
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        cur.pos -= 4;
        return cur.err(format!("unsupported checkpoint version {version}"));
    }
    let count = cur.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = cur.take(1, "layer tag")?[0];
        let Some(kind) = LayerKind::from_tag(tag) else {
            cur.pos -= 1;
            return cur.err(format!("unknown layer tag {tag} for layer {i}"));
        };
        let layer = match kind {
            LayerKind::Conv | LayerKind::Deconv => {
                let in_c = cur.u32("in channels")?;
                let out_c = cur.u32("out channels")?;
                let k = cur.u32("kernel size")?;
                let pad = cur.u32("padding")?;
                let wlen = in_c * out_c * k * k;
                let weight = cur.f32s(wlen, "weights")?;
                let bias = cur.f32s(out_c, "bias")?;
                if kind == LayerKind::Conv {
                    let mut c = Conv::new(in_c, out_c, k, pad);
                    c.weight.data_mut().copy_from_slice(&weight);
                    c.bias = bias;
                    Layer::Conv(c)
                } else {
                    let mut d = Deconv::new(in_c, out_c, k, pad);
                    d.weight.data_mut().copy_from_slice(&weight);
                    d.bias = bias;
                    Layer::Deconv(d)
                }
            }
            LayerKind::BatchNorm => {
                let channels = cur.u32("channels")?;
                Layer::BatchNorm(BatchNorm {
                    channels,
                    gamma: cur.f32s(channels, "gamma")?,
                    beta: cur.f32s(channels, "beta")?,
                    running_mean: cur.f32s(channels, "running mean")?,
                    running_var: cur.f32s(channels, "running variance")?,
                })
            }
            LayerKind::MaxPool => Layer::MaxPool,
            LayerKind::Unpool => Layer::Unpool,
            LayerKind::Relu => Layer::Relu,
        };
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return cur.err(format!("{} trailing bytes after the last layer", bytes.len() - cur.pos));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_stack() -> Vec<Layer<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv::new(1, 3, 3, 1);
        conv.init(&mut rng);
        conv.bias = vec![0.5, -1.25, f32::MIN_POSITIVE];
        let mut bn = BatchNorm::new(3);
        bn.running_mean = vec![0.1, 0.2, 0.3];
        let mut deconv = Deconv::new(3, 1, 3, 1);
        deconv.init(&mut rng);
        vec![Layer::Conv(conv), Layer::BatchNorm(bn), Layer::Relu, Layer::MaxPool, Layer::Unpool, Layer::Deconv(deconv)]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let layers = sample_stack();
        let mut bytes = Vec::new();
        write_layers(&mut bytes, &layers).unwrap();
        let back = read_layers(&bytes).unwrap();
        assert_eq!(back, layers);
        let mut again = Vec::new();
        write_layers(&mut again, &back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = Vec::new();
        write_layers(&mut bytes, &sample_stack()).unwrap();
        let cut = bytes.len() - 3;
        match read_layers(&bytes[..cut]) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Vec::new();
        write_layers(&mut bytes, &sample_stack()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_layers(&bytes), Err(Error::Parse { offset: 0, .. })));
    }
}
