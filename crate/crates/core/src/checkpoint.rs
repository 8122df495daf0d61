//! Binary checkpoints of a consensus network and its Adam state.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "REIDCKPT" | version u32 | dtype u8 | header json (u64 len + utf-8)
//! | epochs_completed u64 | parameter count u64
//! | per parameter: name (u32 len + utf-8) | ndim u32 | dims u64… | step_count u64
//! |                value… | adam_m… | adam_v…
//! | crc32 of everything above, u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusConfig, ConsensusNet};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::rng::Rng;
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 8] = b"REIDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ConsensusConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<E: Element> {
    pub header: CheckpointHeader,
    pub epochs_completed: u64,
    pub net: ConsensusNet<E>,
}

pub fn encode<E: Element>(net: &ConsensusNet<E>, seed: u64, epochs_completed: u64) -> Result<Vec<u8>> {
    let params = net.parameters();
    if let Some(p) = params.iter().find(|p| !p.value().all_finite()) {
        return Err(Error::checkpoint(p.name(), "non-finite parameter values"));
    }
    let header = CheckpointHeader {
        model: net.config.clone(),
        seed,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(E::DTYPE.tag());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&epochs_completed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&p.step_count().to_le_bytes());
        for block in [p.value().data(), p.adam_m(), p.adam_v()] {
            for &v in block {
                v.write_le(&mut buf);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save<E: Element>(path: &Path, net: &ConsensusNet<E>, seed: u64, epochs_completed: u64) -> Result<()> {
    let bytes = encode(net, seed, epochs_completed)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::checkpoint(field, "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, format!("implausible length {n}")))
    }

    fn elements<E: Element>(&mut self, n: usize, field: &str) -> Result<Vec<E>> {
        let size = E::DTYPE.size();
        let raw = self.take(n.saturating_mul(size), field)?;
        Ok(raw.chunks_exact(size).map(E::read_le).collect())
    }
}

pub fn decode<E: Element>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::checkpoint("file", "truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::checkpoint("magic", "not a checkpoint file"));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::checkpoint("checksum", "integrity check failed (corrupt or truncated)"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint("version", format!("found {version}, expected {VERSION}")));
    }
    let tag = r.take(1, "dtype")?[0];
    if DType::from_tag(tag) != Some(E::DTYPE) {
        return Err(Error::checkpoint(
            "dtype",
            format!("file holds tag {tag}, expected {:?}", E::DTYPE),
        ));
    }
    let json_len = r.len("header")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(json_len, "header")?)
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let epochs_completed = r.u64("epochs_completed")?;
    let count = r.len("parameter count")?;

    let mut net = ConsensusNet::<E>::new(&header.model, &Rng::new(header.seed))?;
    let mut params = net.parameters_mut();
    if params.len() != count {
        return Err(Error::checkpoint(
            "parameter count",
            format!("file has {count}, model has {}", params.len()),
        ));
    }
    for p in params.iter_mut() {
        let name_len = r.u32("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::checkpoint("parameter name", "invalid utf-8"))?;
        if name != p.name() {
            return Err(Error::checkpoint(
                format!("parameter {}", p.name()),
                format!("found `{name}` in its place"),
            ));
        }
        let ndim = r.u32(name)? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64(name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != p.shape() {
            return Err(Error::checkpoint(
                format!("parameter {name}"),
                format!("shape {shape:?}, model expects {:?}", p.shape()),
            ));
        }
        let step = r.u64(name)?;
        let n = p.numel();
        let value = r.elements::<E>(n, name)?;
        let m = r.elements::<E>(n, name)?;
        let v = r.elements::<E>(n, name)?;
        p.set_data(value)?;
        p.set_state(m, v, step)?;
    }
    if r.pos != body.len() {
        return Err(Error::checkpoint("file", "trailing bytes after the last parameter"));
    }
    Ok(Checkpoint {
        header,
        epochs_completed,
        net,
    })
}

pub fn load<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, StageSpec};
    use crate::optim::AdamConfig;
    use crate::tensor::Tensor;

    fn config() -> ConsensusConfig {
        let backbone = BackboneConfig {
            num_blocks: 2,
            factors_per_block: 2,
            stage_plan: vec![StageSpec::new(1, 4, 1), StageSpec::new(1, 8, 2)],
            stem_channels: 4,
            feature_dim: 6,
            ..BackboneConfig::toy()
        };
        ConsensusConfig::new(vec![(16, 8), (12, 8)], backbone, 3)
    }

    fn trained() -> ConsensusNet<f32> {
        let mut net = ConsensusNet::<f32>::new(&config(), &Rng::new(4)).unwrap();
        let x = [Tensor::full(&[2, 3, 16, 8], 0.3).unwrap(), Tensor::full(&[2, 3, 12, 8], -0.2).unwrap()];
        for _ in 0..2 {
            let loss = net.forward(&x).unwrap().total_loss(&[0, 2]).unwrap();
            loss.total.backward().unwrap();
            for p in net.parameters_mut() {
                p.adam_step(&AdamConfig::default()).unwrap();
            }
            net.zero_grad();
        }
        net
    }

    #[test]
    fn round_trip_is_lossless() {
        let net = trained();
        let bytes = encode(&net, 4, 7).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back.epochs_completed, 7);
        assert_eq!(back.header.seed, 4);
        for (a, b) in net.parameters().iter().zip(back.net.parameters()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value().data(), b.value().data());
            assert_eq!(a.adam_m(), b.adam_m());
            assert_eq!(a.adam_v(), b.adam_v());
            assert_eq!(a.step_count(), 2);
            assert_eq!(b.step_count(), 2);
        }
        assert_eq!(encode(&back.net, 4, 7).unwrap(), bytes);

        let x = [Tensor::full(&[1, 3, 16, 8], 0.1).unwrap(), Tensor::full(&[1, 3, 12, 8], 0.4).unwrap()];
        let f1 = net.forward(&x).unwrap().consensus_feature.to_vec();
        let f2 = back.net.forward(&x).unwrap().consensus_feature.to_vec();
        assert_eq!(f1, f2);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&trained(), 4, 1).unwrap();
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 9]), Err(Error::Checkpoint { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        match decode::<f32>(&flipped) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "checksum"),
            other => panic!("{other:?}"),
        }
        match decode::<f64>(&bytes) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "dtype"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_names_field() {
        let mut bytes = encode(&trained(), 4, 1).unwrap();
        bytes[8] = 9;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        match decode::<f32>(&bytes) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = trained();
        save(&path, &net, 4, 3).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.epochs_completed, 3);
        assert!(matches!(load::<f32>(&dir.path().join("missing")), Err(Error::Load { .. })));
    }
}
