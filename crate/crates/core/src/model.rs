//! The full multimodal model: one encoder per contrasted modality, the
//! learnable temperature, and their checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "GCKP" | version u16 | config: u32 length + TOML text | count u32
//! count × { name: u32 length + UTF-8 | rank u32 | rank × u64 dims | Πdims × f64 }
//! ```
//!
//! Parameters appear in registration order. RFF matrices are not stored;
//! they regenerate from the seed and sigmas in the config.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{BatchEmbeddings, LossConfig};
use crate::coord::{CoordEncoder, CoordEncoderConfig};
use crate::error::{Error, Result};
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::modality::{ModalityEncoder, ModalityId};
use crate::synth::MultimodalSample;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const TEMPERATURE_PARAM: &str = "loss/log_temperature";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Modalities to encode and contrast; at least two.
    pub modalities: Vec<ModalityId>,
    /// Raw input dims of street, aerial, dsm and text.
    pub input_dims: [usize; 4],
    pub coord: CoordEncoderConfig,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: ModalityId::ALL.to_vec(),
            input_dims: [32; 4],
            coord: CoordEncoderConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.coord.dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config(format!(
                "duplicate modality in {:?}",
                self.modalities
            )));
        }
        if self.modalities.len() < 2 {
            return Err(Error::Config(
                "at least two modalities are needed for contrastive training".into(),
            ));
        }
        if self.input_dims.contains(&0) {
            return Err(Error::Config("input dims must be positive".into()));
        }
        self.coord.validate()?;
        self.loss.validate()
    }

    /// Modalities in canonical order, which fixes parameter order.
    pub fn canonical_modalities(&self) -> Vec<ModalityId> {
        ModalityId::ALL
            .into_iter()
            .filter(|m| self.modalities.contains(m))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoders: BTreeMap<ModalityId, ModalityEncoder>,
    coord: Option<CoordEncoder>,
    log_tau: ParamId,
    /// Hash of the run configuration that trained the model; may be empty.
    config_hash: String,
}

impl Model {
    /// Fresh model; `seed` drives all learnable initial values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoders = BTreeMap::new();
        let mut coord = None;
        for (k, m) in config.canonical_modalities().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            match m.feature_index() {
                Some(i) => {
                    let enc = ModalityEncoder::new(
                        &mut store,
                        m,
                        config.input_dims[i],
                        config.dim(),
                        &mut rng,
                    )?;
                    encoders.insert(m, enc);
                }
                None => {
                    coord = Some(CoordEncoder::new(
                        config.coord.clone(),
                        &mut store,
                        &mut rng,
                    )?)
                }
            }
        }
        let log_tau = store.add(
            TEMPERATURE_PARAM,
            Tensor::scalar(config.loss.temperature.ln()),
        )?;
        Ok(Self {
            config,
            store,
            encoders,
            coord,
            log_tau,
            config_hash: String::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn set_config_hash(&mut self, hash: &str) {
        self.config_hash = hash.to_string();
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn log_temperature(&self) -> ParamId {
        self.log_tau
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_tau).item().exp()
    }

    pub fn has_modality(&self, m: ModalityId) -> bool {
        self.config.modalities.contains(&m)
    }

    pub fn coord_encoder(&self) -> Option<&CoordEncoder> {
        self.coord.as_ref()
    }

    pub fn modality_encoder(&self, m: ModalityId) -> Option<&ModalityEncoder> {
        self.encoders.get(&m)
    }

    fn missing(&self, m: ModalityId) -> Error {
        Error::Invalid(format!("modality {m} is not part of this model"))
    }

    /// `B × D` block for one modality.
    pub fn forward_modality(
        &self,
        g: &mut Graph,
        m: ModalityId,
        samples: &[&MultimodalSample],
    ) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if m == ModalityId::Gps {
            let enc = self.coord.as_ref().ok_or_else(|| self.missing(m))?;
            let coords: Vec<_> = samples.iter().map(|s| s.coord).collect();
            return enc.forward(g, &self.store, &coords);
        }
        let enc = self.encoders.get(&m).ok_or_else(|| self.missing(m))?;
        let mut data = Vec::with_capacity(samples.len() * enc.input_dim);
        for s in samples {
            let raw = s.raw(m).ok_or_else(|| {
                Error::Invalid(format!("sample {} is missing modality {m}", s.id))
            })?;
            if raw.len() != enc.input_dim {
                return Err(Error::shape(
                    "encode_modality",
                    &[raw.len()],
                    &[enc.input_dim],
                ));
            }
            data.extend(raw.iter().map(|&v| v as f64));
        }
        let x = g.constant(Tensor::matrix(samples.len(), enc.input_dim, data)?);
        enc.forward(g, &self.store, x)
    }

    /// Blocks for every modality of the model, in canonical order.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        samples: &[&MultimodalSample],
    ) -> Result<BatchEmbeddings> {
        let blocks = self
            .config
            .canonical_modalities()
            .into_iter()
            .map(|m| Ok((m, self.forward_modality(g, m, samples)?)))
            .collect::<Result<Vec<_>>>()?;
        BatchEmbeddings::new(g, blocks)
    }

    /// Inference-only embeddings of one modality for many samples.
    pub fn embed(&self, m: ModalityId, samples: &[MultimodalSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let refs: Vec<&MultimodalSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let y = self.forward_modality(&mut g, m, &refs)?;
            let t = g.value(y);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.str(&cfg);
        w.str(&self.config_hash);
        w.u32(self.store.len() as u32);
        for (_, p) in self.store.iter() {
            w.str(&p.name);
            w.u32(p.value.rank() as u32);
            p.value.shape().iter().for_each(|&d| w.u64(d as u64));
            p.value.data().iter().for_each(|&v| w.f64(v));
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let at = r.offset();
        let text = r.str("config")?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Format {
            offset: at,
            msg: format!("bad model config: {e}"),
        })?;
        let mut model = Model::new(config, 0).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        model.config_hash = r.str("config hash")?;
        let count = r.u32("parameter count")? as usize;
        if count != model.store.len() {
            return Err(r.error(format!(
                "{count} parameters, model expects {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let at = r.offset();
            let name = r.str("parameter name")?;
            let id = model.store.id(&name).ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("unknown parameter {name:?}"),
            })?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != model.store.value(id).shape() {
                return Err(r.error(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    model.store.value(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64("value")).collect::<Result<Vec<_>>>()?;
            *model.store.value_mut(id) = Tensor::new(shape, data)?;
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
