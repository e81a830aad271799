//! Checkpoint container: magic, format version, a JSON header carrying the
//! configuration, vocabulary and tensor index, then little-endian f64 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RegionVocabulary, VocabFile};
use crate::model::{ModelConfig, TrajGpt, Variant};
use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"TRAJGPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: Variant,
    vocab: VocabFile,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &TrajGpt) -> Result<Vec<u8>> {
    let tensors = model
        .store
        .iter()
        .map(|(name, m)| TensorEntry { name: name.to_string(), rows: m.nrows(), cols: m.ncols() })
        .collect();
    let header = Header { config: model.config.clone(), variant: model.variant, vocab: model.vocab.to_file(), tensors };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * model.store.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in model.store.iter() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<TrajGpt> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let vocab = RegionVocabulary::from_file(&header.vocab)?;
    let mut model = TrajGpt::new(header.config, header.variant, vocab, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, file has {}", ids.len(), header.tensors.len())));
    }
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).dim();
        if entry.name != name || (entry.rows, entry.cols) != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {}x{} does not match expected {name} {}x{}",
                entry.name, entry.rows, entry.cols, shape.0, shape.1
            )));
        }
        let raw = take(&mut bytes, 8 * entry.rows * entry.cols)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        *model.store.get_mut(id) = Mat::from_shape_vec(shape, values).expect("shape checked");
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    Ok(model)
}

pub fn save(model: &TrajGpt, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrajGpt> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::types::Point;

    fn model(variant: Variant) -> TrajGpt {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            ff_dim: 4,
            gmm_components: 2,
            encoder: EncoderConfig { s2v_scales: 1, s2v_min: 1.0, s2v_max: 10.0, t2v_dim: 2, region_emb_dim: 2 },
            ..ModelConfig::geolife()
        };
        let vocab = RegionVocabulary::from_cells(10.0, Point::default(), [(0, 0), (1, 0)]).unwrap();
        TrajGpt::new(config, variant, vocab, 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for variant in Variant::ALL {
            let m = model(variant);
            let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
            assert_eq!(back.variant, variant);
            assert_eq!(back.config, m.config);
            assert_eq!(back.vocab, m.vocab);
            assert!(back.store.iter().zip(m.store.iter()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&model(Variant::Full)).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model(Variant::Full);
        let mut bytes = to_bytes(&m).unwrap();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let patched = header.replacen("\"ff_dim\":4", "\"ff_dim\":5", 1);
        assert_eq!(patched.len(), header.len());
        bytes.splice(20..20 + len, patched.into_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
