//! `RLKW` weight container.
//!
//! ```text
//! b"RLKW" | u32 version | u64 header_len | header (JSON, header_len bytes)
//!        | payload (little-endian f32) | u32 CRC32 of payload
//! ```
//!
//! All integers are little-endian. The header is
//! `{"graph": <LayerGraph or null>, "tensors": [{name, shape, dtype, byte_offset}, ...]}`
//! with `byte_offset` relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerGraph, ModelWeights, WeightBlock};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLKW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    graph: Option<LayerGraph>,
    tensors: Vec<TensorEntry>,
}

/// Serializes a graph (optional) and its weights into container bytes.
pub fn encode(graph: Option<&LayerGraph>, weights: &ModelWeights) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(weights.len());
    let mut payload = Vec::new();
    for (name, block) in &weights.blocks {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: block.shape.clone(),
            dtype: "f32".into(),
            byte_offset: payload.len() as u64,
        });
        for v in &block.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        graph: graph.cloned(),
        tensors,
    })?;

    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("{what} needs {len} bytes at offset {at}")))?;
    let slice = &bytes[*at..end];
    *at = end;
    Ok(slice)
}

/// Parses container bytes. Nothing is returned unless the whole file checks out.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Option<LayerGraph>, ModelWeights)> {
    let mut at = 0;
    if take(bytes, &mut at, 4, "magic")? != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut at, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| Error::Truncated("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, header_len, "header")?)
        .map_err(|e| Error::Header(e.to_string()))?;

    if bytes.len() < at + 4 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let payload = &bytes[at..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());

    let expected_len: u64 = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() as u64 * 4)
        .sum();
    if (payload.len() as u64) < expected_len {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header describes {expected_len}",
            payload.len()
        )));
    }
    if payload.len() as u64 != expected_len {
        return Err(Error::Header(format!(
            "payload has {} bytes, header describes {expected_len}",
            payload.len()
        )));
    }
    let computed = crc32fast::hash(payload);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }

    let mut weights = ModelWeights::default();
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::Header(format!(
                "unsupported dtype `{}` for `{}`",
                t.dtype, t.name
            )));
        }
        let len = t.shape.iter().product::<usize>();
        let start = usize::try_from(t.byte_offset).map_err(|_| Error::Header("offset overflows".into()))?;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(Error::Header(format!("`{}` extends past the payload", t.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        weights.insert(t.name.clone(), WeightBlock::new(t.shape.clone(), data)?);
    }
    if let Some(g) = &header.graph {
        g.validate()?;
    }
    Ok((header.graph, weights))
}

pub fn save(graph: &LayerGraph, weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    write_container(Some(graph), weights, path)
}

pub fn write_container(graph: Option<&LayerGraph>, weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(graph, weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(Option<LayerGraph>, ModelWeights)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a model saved with [`save`]; the file must carry a graph.
pub fn load(path: impl AsRef<Path>) -> Result<(LayerGraph, ModelWeights)> {
    let (graph, weights) = read_container(&path)?;
    let graph = graph.ok_or_else(|| Error::Header("container holds no graph".into()))?;
    weights.check_coverage(&graph)?;
    Ok((graph, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSpec, InitOptions};
    use crate::tensor::Rng;

    fn model() -> (LayerGraph, ModelWeights) {
        let arch = ArchSpec {
            small_kernel: Some(3),
            num_classes: 5,
            ..ArchSpec::new([1, 1, 1, 1], [8, 8, 8, 8], [5, 5, 5, 5])
        };
        let g = LayerGraph::build(&arch).unwrap();
        let w = ModelWeights::random(
            &g,
            &mut Rng::new(2),
            InitOptions {
                random_bn: true,
                ..Default::default()
            },
        )
        .unwrap();
        (g, w)
    }

    fn bits(w: &ModelWeights) -> Vec<(String, Vec<u32>)> {
        w.blocks
            .iter()
            .map(|(k, b)| (k.clone(), b.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (g, w) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rlkw");
        save(&g, &w, &path).unwrap();
        let (g2, w2) = load(&path).unwrap();
        assert_eq!(g, g2);
        assert_eq!(bits(&w), bits(&w2));
    }

    #[test]
    fn corrupted_payload_detected() {
        let (g, w) = model();
        let mut bytes = encode(Some(&g), &w).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 0x01;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn distinct_errors() {
        let (g, w) = model();
        let good = encode(Some(&g), &w).unwrap();

        let mut versioned = good.clone();
        versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&versioned, Path::new("x")),
            Err(Error::Version { found: 7, .. })
        ));

        let truncated = &good[..good.len() / 2];
        assert!(matches!(decode(truncated, Path::new("x")), Err(Error::Truncated(_))));

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic, Path::new("x")), Err(Error::BadMagic { .. })));

        assert!(matches!(decode(&good[..3], Path::new("x")), Err(Error::Truncated(_))));
    }

    #[test]
    fn graphless_container() {
        let mut w = ModelWeights::default();
        w.insert(
            "k.weight",
            WeightBlock::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f32).collect()).unwrap(),
        );
        let bytes = encode(None, &w).unwrap();
        let (g, w2) = decode(&bytes, Path::new("x")).unwrap();
        assert!(g.is_none());
        assert_eq!(w, w2);
    }
}
