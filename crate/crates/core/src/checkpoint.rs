//! Binary model checkpoints.
//!
//! Layout: the magic `SRNMT1\n`, one header line of space-separated
//! `key=value` pairs, then every parameter as
//! `name_len:u32 name rank:u32 extents:u32* values`, all little-endian,
//! and finally a CRC32 of every preceding byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CellKind, Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8] = b"SRNMT1\n";

pub fn to_bytes<F: Scalar>(model: &Model<F>) -> Vec<u8> {
    let c = model.config();
    let header = format!(
        "d={} n_layers={} src_vocab={} tgt_vocab={} dropout={} cell={} layer_norm={} multi_attention={} highway={} input_feeding={} seed={} precision={} params={}\n",
        c.d,
        c.n_layers,
        c.src_vocab,
        c.tgt_vocab,
        c.dropout,
        c.cell.as_str(),
        c.layer_norm,
        c.multi_attention,
        c.highway,
        c.input_feeding,
        c.seed,
        F::NAME,
        model.params().len(),
    );
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + model.params().element_count() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    write_tensors(&mut out, model.params().iter());
    seal(out)
}

/// Parses and CRC-verifies a checkpoint written at precision `F`.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Model<F>> {
    let body = unseal(bytes, MAGIC)?;
    let mut r = Reader::new(body);
    let header = parse_header(r.line()?)?;
    let precision = field(&header, "precision")?;
    if precision != F::NAME {
        return Err(Error::Checkpoint(format!("checkpoint holds {precision} values, expected {}", F::NAME)));
    }
    let config = config_from_header(&header)?;
    let count: usize = parse(&header, "params")?;
    let tensors = read_tensors(&mut r, count)?;
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
    }
    Model::from_named(config, tensors)
}

pub fn save<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

fn config_from_header(h: &HashMap<String, String>) -> Result<ModelConfig> {
    let config = ModelConfig {
        d: parse(h, "d")?,
        n_layers: parse(h, "n_layers")?,
        src_vocab: parse(h, "src_vocab")?,
        tgt_vocab: parse(h, "tgt_vocab")?,
        dropout: parse(h, "dropout")?,
        cell: field(h, "cell")?.parse::<CellKind>()?,
        layer_norm: parse(h, "layer_norm")?,
        multi_attention: parse(h, "multi_attention")?,
        highway: parse(h, "highway")?,
        input_feeding: parse(h, "input_feeding")?,
        seed: parse(h, "seed")?,
    };
    config.validate()?;
    Ok(config)
}

pub(crate) fn parse_header(line: &str) -> Result<HashMap<String, String>> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Checkpoint(format!("malformed header entry {kv:?}")))
        })
        .collect()
}

pub(crate) fn field<'h>(h: &'h HashMap<String, String>, key: &str) -> Result<&'h str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header is missing {key}")))
}

pub(crate) fn parse<T: std::str::FromStr>(h: &HashMap<String, String>, key: &str) -> Result<T> {
    let v = field(h, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("header value {key}={v} is invalid")))
}

pub(crate) fn write_tensors<'a, F: Scalar + 'a>(out: &mut Vec<u8>, tensors: impl Iterator<Item = (&'a str, &'a Tensor<F>)>) {
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.values() {
            v.write_le(out);
        }
    }
}

pub(crate) fn read_tensors<F: Scalar>(r: &mut Reader<'_>, count: usize) -> Result<Vec<(String, Tensor<F>)>> {
    (0..count)
        .map(|_| {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if !(1..=3).contains(&rank) {
                return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * F::BYTES)?;
            let values = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
            let t = Tensor::new(&shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

/// Appends the CRC32 of `body`.
pub(crate) fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

/// Verifies magic and CRC; returns the bytes between them.
pub(crate) fn unseal<'b>(bytes: &'b [u8], magic: &[u8]) -> Result<&'b [u8]> {
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "corrupt checkpoint: CRC32 {actual:08x} does not match stored {stored:08x}"
        )));
    }
    Ok(&body[magic.len()..])
}

pub(crate) struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    pub(crate) fn new(bytes: &'b [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn line(&mut self) -> Result<&'b str> {
        let rest = &self.bytes[self.pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let line = std::str::from_utf8(&rest[..n]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        self.pos += n + 1;
        Ok(line)
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenBatch;
    use crate::model::Pass;
    use rand::SeedableRng;

    fn model<F: Scalar>() -> Model<F> {
        let cfg = ModelConfig { d: 6, n_layers: 2, dropout: 0.25, seed: 9, ..ModelConfig::new(11, 13) };
        let mut m = Model::new(cfg).unwrap();
        m.params_mut().perturb(0.2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        m
    }

    fn logits<F: Scalar>(m: &Model<F>) -> Vec<F> {
        let mut pass = Pass::eval(m);
        let mem = pass.encode(&TokenBatch::single(&[4, 7, 9]).unwrap()).unwrap();
        let l = pass.decode_train(&TokenBatch::single(&[2, 5, 6]).unwrap(), &mem).unwrap();
        pass.tape.values(l).to_vec()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model::<f32>();
        let bytes = to_bytes(&m);
        assert!(bytes.starts_with(MAGIC));
        let back: Model<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().tensors().iter().zip(back.params().tensors()) {
            let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(logits(&m)), bits(logits(&back)));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = to_bytes(&model::<f64>());
        let line = bytes[MAGIC.len()..].split(|&b| b == b'\n').next().unwrap();
        let h = parse_header(std::str::from_utf8(line).unwrap()).unwrap();
        assert_eq!(h["d"], "6");
        assert_eq!(h["cell"], "sr");
        assert_eq!(h["precision"], "f64");
        assert_eq!(h["dropout"], "0.25");
    }

    #[test]
    fn every_flipped_bit_is_detected() {
        let bytes = to_bytes(&model::<f32>());
        for pos in (0..bytes.len()).step_by(37) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Checkpoint(_))), "byte {pos}");
        }
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes::<f32>(b"").is_err());
    }

    #[test]
    fn corruption_message_names_the_crc() {
        let mut bytes = to_bytes(&model::<f32>());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = from_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("corrupt") && err.contains("CRC32"), "{err}");
    }

    #[test]
    fn precision_must_match() {
        let bytes = to_bytes(&model::<f64>());
        let err = from_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("f64"), "{err}");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model::<f64>();
        save(&m, &path).unwrap();
        let back: Model<f64> = load(&path).unwrap();
        assert_eq!(logits(&m), logits(&back));
        assert!(load::<f64>(&dir.path().join("missing")).is_err());
    }
}
