//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `manifest.json` (encoder config,
//! tokenizer casing, vocabulary hash, creation metadata, and a name/shape
//! index of every tensor) plus `params.bin`, the concatenation of all
//! parameter tensors in declared order as little-endian 64-bit floats.
//! Nothing time-dependent goes into the manifest, so identical runs write
//! byte-identical checkpoints.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::HeadParams;
use crate::encoder::{EncoderConfig, EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeding::{derive, Stream};
use crate::tokenizer::Casing;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

/// Encoder plus classifier head: everything the optimizer touches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl ModelParams {
    /// Encoder and head get decorrelated sub-seeds of `seed`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = crate::encoder::init_params(config, derive(seed, Stream::InitEncoder, 0))?;
        let head = HeadParams::init(config.d_model, derive(seed, Stream::InitHead, 0));
        Ok(ModelParams { encoder, head })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.head.named_tensors());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_tensors_mut();
        out.extend(self.head.named_tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    fn zeroed(config: &EncoderConfig) -> ModelParams {
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: Tensor::zeros(vec![d, d]),
                wk: Tensor::zeros(vec![d, d]),
                wv: Tensor::zeros(vec![d, d]),
                wo: Tensor::zeros(vec![d, d]),
                attn_norm_gamma: Tensor::zeros(vec![d]),
                attn_norm_beta: Tensor::zeros(vec![d]),
                w1: Tensor::zeros(vec![d, config.d_ff]),
                w2: Tensor::zeros(vec![config.d_ff, d]),
                ff_norm_gamma: Tensor::zeros(vec![d]),
                ff_norm_beta: Tensor::zeros(vec![d]),
            })
            .collect();
        ModelParams {
            encoder: EncoderParams {
                config: *config,
                token_embeddings: Tensor::zeros(vec![config.vocab_size, d]),
                position_embeddings: Tensor::zeros(vec![config.max_position, d]),
                layers,
            },
            head: HeadParams {
                weight: Tensor::zeros(vec![2, d]),
                bias: Tensor::zeros(vec![2]),
            },
        }
    }
}

/// Reproducibility metadata recorded at save time. Deliberately free of
/// wall-clock fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreationMeta {
    pub tool: String,
    pub tool_version: String,
    pub seed: u64,
    pub alpha: f64,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into params.bin in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub max_len: usize,
    pub casing: Casing,
    pub vocab_hash: String,
    pub creation: CreationMeta,
    pub tensors: Vec<TensorIndexEntry>,
}

/// A loaded (or about-to-be-saved) model with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub manifest: Manifest,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        max_len: usize,
        casing: Casing,
        vocab_hash: String,
        creation: CreationMeta,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for (name, t) in params.named_tensors() {
            tensors.push(TensorIndexEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            encoder: params.encoder.config,
            max_len,
            casing,
            vocab_hash,
            creation,
            tensors,
        };
        Checkpoint { params, manifest }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest_json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;

        let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join(PARAMS_FILE))?);
        for (_, t) in self.params.named_tensors() {
            for &x in t.data() {
                blob.write_all(&x.to_le_bytes())?;
            }
        }
        blob.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
        let dir = dir.as_ref();
        let manifest_json = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&manifest_json)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        manifest.encoder.validate()?;

        let mut file = std::fs::File::open(dir.join(PARAMS_FILE))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if bytes.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "params.bin holds {} bytes, manifest expects {}",
                bytes.len(),
                total * 8
            )));
        }

        let mut params = ModelParams::zeroed(&manifest.encoder);
        let named = params.named_tensors_mut();
        if named.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, model wants {}",
                manifest.tensors.len(),
                named.len()
            )));
        }
        for ((name, tensor), entry) in named.into_iter().zip(&manifest.tensors) {
            if name != entry.name || tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match manifest entry {} {:?}",
                    tensor.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            let start = entry.offset * 8;
            for (i, slot) in tensor.data_mut().iter_mut().enumerate() {
                let at = start + i * 8;
                let raw: [u8; 8] = bytes[at..at + 8].try_into().expect("8-byte chunk");
                *slot = f64::from_le_bytes(raw);
            }
        }
        Ok(Checkpoint { params, manifest })
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;

    fn config() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 30,
            max_position: 12,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
        }
    }

    fn creation() -> CreationMeta {
        CreationMeta {
            tool: "causal".into(),
            tool_version: "0.1.0".into(),
            seed: 7,
            alpha: 4.0,
            epochs_trained: 3,
            best_epoch: Some(2),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let params = ModelParams::init(&config(), 41).unwrap();
        let ckpt = Checkpoint::new(params, 12, Casing::Cased, "fnv1a64:aabb".into(), creation());
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let params = ModelParams::init(&config(), 42).unwrap();
        let ckpt = Checkpoint::new(params, 12, Casing::Uncased, "fnv1a64:0011".into(), creation());
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        ckpt.save(a.path()).unwrap();
        ckpt.save(b.path()).unwrap();
        for file in [MANIFEST_FILE, PARAMS_FILE] {
            let x = std::fs::read(a.path().join(file)).unwrap();
            let y = std::fs::read(b.path().join(file)).unwrap();
            assert_eq!(x, y, "{file} differs between identical saves");
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let params = ModelParams::init(&config(), 43).unwrap();
        let ckpt = Checkpoint::new(params, 12, Casing::Cased, "h".into(), creation());
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let blob_path = dir.path().join(PARAMS_FILE);
        let mut bytes = std::fs::read(&blob_path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&blob_path, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_seed_split() {
        let a = ModelParams::init(&config(), 5).unwrap();
        let b = ModelParams::init(&config(), 5).unwrap();
        assert_eq!(a, b);
        // Head and encoder draw from independent streams.
        let c = ModelParams::init(&config(), 6).unwrap();
        assert_ne!(a.head, c.head);
        assert_ne!(a.encoder, c.encoder);
    }

    #[test]
    fn named_tensor_order_is_stable() {
        let params = ModelParams::init(&config(), 1).unwrap();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "token_embeddings");
        assert_eq!(names[1], "position_embeddings");
        assert_eq!(names[2], "layers.0.attn.wq");
        assert_eq!(names.last().unwrap(), "head.bias");
        assert_eq!(names.len(), 2 + 2 * 10 + 2);
    }
}
