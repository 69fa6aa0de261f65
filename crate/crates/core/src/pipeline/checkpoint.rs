//! Checkpoints: a JSON manifest plus one little-endian f64 blob.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT: &str = "occflow-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 values.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub crate_version: String,
    /// Producing command, e.g. `pretrain` or `finetune`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Optimizer steps per training phase.
    pub steps: BTreeMap<String, u64>,
    /// Architecture and provenance needed to rebuild the models.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Builds the manifest's tensor table and blob digest from `tensors`.
    pub fn new(
        kind: &str,
        config_hash: &str,
        seed: u64,
        steps: BTreeMap<String, u64>,
        meta: serde_json::Value,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        let mut seen = std::collections::BTreeSet::new();
        for (name, t) in &tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let blob = encode_blob(&tensors);
        Ok(Self {
            manifest: Manifest {
                format: FORMAT.into(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                kind: kind.into(),
                config_hash: config_hash.into(),
                seed,
                steps,
                meta,
                tensors: entries,
                blob_bytes: blob.len() as u64,
                blob_sha256: hex::encode(Sha256::digest(&blob)),
            },
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensor `name` or a format error naming it.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Writes `manifest.json` and `params.bin` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let blob = encode_blob(&self.tensors);
        let mut w = BufWriter::new(File::create(dir.join(BLOB_FILE))?);
        w.write_all(&blob)?;
        w.flush()?;
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Loads and verifies a checkpoint. With `expected_hash`, a manifest
    /// produced under a different config is rejected.
    pub fn load(dir: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if let Some(h) = expected_hash {
            if h != manifest.config_hash {
                return Err(Error::HashMismatch(format!(
                    "checkpoint was written under config {}, current config is {h}",
                    manifest.config_hash
                )));
            }
        }
        let mut blob = Vec::new();
        BufReader::new(File::open(dir.join(BLOB_FILE))?).read_to_end(&mut blob)?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(Error::Format(format!(
                "blob has {} bytes, manifest records {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != manifest.blob_sha256 {
            return Err(Error::HashMismatch(format!(
                "blob digest {digest} differs from manifest {}",
                manifest.blob_sha256
            )));
        }
        let total = blob.len() / 8;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let end = e.offset.checked_add(e.len()).filter(|&end| end <= total).ok_or_else(|| {
                Error::Format(format!("tensor {} overruns the blob", e.name))
            })?;
            let data = blob[e.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self { manifest, tensors })
    }
}

/// Reads only the manifest; the blob is not opened.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}

fn encode_blob(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let n: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(n * 8);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, seeded};

    fn sample() -> Checkpoint {
        let mut rng = seeded(1);
        let mut steps = BTreeMap::new();
        steps.insert("flow".to_string(), 12);
        Checkpoint::new(
            "pretrain",
            "abc",
            7,
            steps,
            serde_json::json!({"k": 1}),
            vec![
                ("a".into(), normal_tensor(&mut rng, &[3, 4])),
                ("b".into(), Tensor::from_vec(vec![-0.0, f64::MIN_POSITIVE, 1e300])),
                ("empty".into(), Tensor::zeros(&[0, 5])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), Some("abc")).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(std::fs::metadata(dir.path().join(BLOB_FILE)).unwrap().len(), 15 * 8);
    }

    #[test]
    fn tamper_truncation_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), Some("other")), Err(Error::HashMismatch(_))));
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), None), Err(Error::HashMismatch(_))));
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path(), None), Err(Error::Format(_))));
        // the manifest alone is still readable
        assert_eq!(read_manifest(dir.path()).unwrap().seed, 7);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        let r = Checkpoint::new("x", "h", 0, BTreeMap::new(), serde_json::Value::Null, vec![("a".into(), t.clone()), ("a".into(), t)]);
        assert!(r.is_err());
    }
}
