//! Modality identifiers and the per-modality feature encoders.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Street,
    Aerial,
    Dsm,
    Text,
    Gps,
}

impl ModalityId {
    pub const ALL: [ModalityId; 5] = [
        ModalityId::Street,
        ModalityId::Aerial,
        ModalityId::Dsm,
        ModalityId::Text,
        ModalityId::Gps,
    ];

    /// Modalities carried as raw feature vectors (everything except gps).
    pub const FEATURES: [ModalityId; 4] = [
        ModalityId::Street,
        ModalityId::Aerial,
        ModalityId::Dsm,
        ModalityId::Text,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityId::Street => "street",
            ModalityId::Aerial => "aerial",
            ModalityId::Dsm => "dsm",
            ModalityId::Text => "text",
            ModalityId::Gps => "gps",
        }
    }

    pub fn is_feature(&self) -> bool {
        *self != ModalityId::Gps
    }

    /// Position in [`ModalityId::FEATURES`].
    pub fn feature_index(&self) -> Option<usize> {
        ModalityId::FEATURES.iter().position(|m| m == self)
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown modality {s:?}")))
    }
}

/// Three-layer GELU MLP `input → 4D → 4D → D` followed by layer norm.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: ModalityId,
    pub input_dim: usize,
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    norm: LayerNorm,
}

impl ModalityEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: ModalityId,
        input_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !modality.is_feature() {
            return Err(Error::Config(
                "gps is encoded by the coordinate encoder".into(),
            ));
        }
        if input_dim == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "{modality} encoder needs positive dims, got {input_dim} -> {dim}"
            )));
        }
        let hidden = 4 * dim;
        let p = format!("enc/{modality}");
        Ok(Self {
            modality,
            input_dim,
            dim,
            fc1: Linear::new(store, &format!("{p}/fc1"), input_dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{p}/fc2"), hidden, hidden, rng)?,
            fc3: Linear::new(store, &format!("{p}/fc3"), hidden, dim, rng)?,
            norm: LayerNorm::new(store, &format!("{p}/norm"), dim)?,
        })
    }

    /// Encodes a `B × input_dim` block of raw features into `B × D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let cols = g.value(raw).cols();
        if cols != self.input_dim {
            return Err(Error::shape(
                "encode_modality",
                &[g.value(raw).rows(), cols],
                &[g.value(raw).rows(), self.input_dim],
            ));
        }
        let h = self.fc1.forward(g, store, raw)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc3.forward(g, store, h)?;
        self.norm.forward(g, store, h)
    }

    /// Embeds one raw vector outside of training.
    pub fn encode(&self, store: &ParamStore, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.input_dim {
            return Err(Error::shape(
                "encode_modality",
                &[raw.len()],
                &[self.input_dim],
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, raw.len(), raw.to_vec())?);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.fc1, &self.fc2, &self.fc3] {
            ids.extend(l.params());
        }
        ids.extend(self.norm.params());
        ids
    }

    #[cfg(test)]
    fn last_layer(&self) -> &Linear {
        &self.fc3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, DEFAULT_STEP};
    use crate::tensor::nn::normal_tensor;
    use crate::tensor::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modality_names_round_trip() {
        for m in ModalityId::ALL {
            assert_eq!(m.as_str().parse::<ModalityId>().unwrap(), m);
        }
        assert!("lidar".parse::<ModalityId>().is_err());
        assert_eq!(ModalityId::Text.feature_index(), Some(3));
        assert_eq!(ModalityId::Gps.feature_index(), None);
    }

    #[test]
    fn zeroed_last_layer_gives_input_independent_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ModalityEncoder::new(&mut store, ModalityId::Street, 6, 8, &mut rng).unwrap();
        let last = enc.last_layer().clone();
        *store.value_mut(last.weight) = Tensor::zeros(32, 8);
        *store.value_mut(last.bias) = normal_tensor(&mut rng, 1, 8, 1.0);
        let a = enc
            .encode(&store, &[0.1, 0.2, -0.3, 0.9, 0.0, 1.0])
            .unwrap();
        let b = enc
            .encode(&store, &[-1.0, 0.5, 0.3, 0.2, 0.7, -0.4])
            .unwrap();
        assert_eq!(a, b);
        let mean: f64 = a.iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_identical_embeddings_and_dim_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ModalityEncoder::new(&mut store, ModalityId::Dsm, 4, 8, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.8, 0.1];
        assert_eq!(
            enc.encode(&store, &x).unwrap(),
            enc.encode(&store, &x).unwrap()
        );
        assert_eq!(enc.encode(&store, &x).unwrap().len(), 8);
        assert!(matches!(
            enc.encode(&store, &x[..3]),
            Err(Error::Shape { .. })
        ));
        assert!(ModalityEncoder::new(&mut store, ModalityId::Gps, 4, 8, &mut rng).is_err());
    }

    #[test]
    fn readout_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = ModalityEncoder::new(&mut store, ModalityId::Text, 3, 4, &mut rng).unwrap();
        for id in enc.params() {
            let (r, c) = (store.value(id).rows(), store.value(id).cols());
            *store.value_mut(id) = normal_tensor(&mut rng, r, c, 0.5);
        }
        let x = normal_tensor(&mut rng, 5, 3, 1.0);
        let w = normal_tensor(&mut rng, 5, 4, 1.0);
        let ids = enc.params();
        let err = check_params(&mut store, &ids, DEFAULT_STEP, |g, s| {
            let xv = g.constant(x.clone());
            let y = enc.forward(g, s, xv)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn updating_one_encoder_leaves_another_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let street = ModalityEncoder::new(&mut store, ModalityId::Street, 4, 8, &mut rng).unwrap();
        let aerial = ModalityEncoder::new(&mut store, ModalityId::Aerial, 4, 8, &mut rng).unwrap();
        let before: Vec<Tensor> = aerial
            .params()
            .iter()
            .map(|&i| store.value(i).clone())
            .collect();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            store.zero_grads();
            let mut g = Graph::new();
            let x = g.constant(normal_tensor(&mut rng, 3, 4, 1.0));
            let y = street.forward(&mut g, &store, x).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let loss = g.sum(y2);
            g.backward(loss, &mut store).unwrap();
            adam.step(&mut store);
        }
        for (id, b) in aerial.params().iter().zip(&before) {
            assert_eq!(store.value(*id), b);
        }
    }
}
