//! All-to-all multi-way InfoNCE.
//!
//! For modalities m, n with blocks `F_m`, `F_n` (B × D), rows are
//! ℓ2-normalized, `s = F̂_m F̂_nᵀ`, and
//! `L_{m→n} = −(1/B) Σ_i log softmax_j(s_ij / τ)_i`. The total loss averages
//! `L_{m→n}` over ordered pairs, with or without `m = n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::tensor::linalg::gemm;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Initial τ; the trainable parameter is `ln τ`.
    pub temperature: f64,
    pub learn_temperature: bool,
    pub include_self_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            learn_temperature: true,
            include_self_pairs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(TAU_MIN..=TAU_MAX).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Number of ordered pairs averaged over for `m` modalities.
    pub fn pair_count(&self, m: usize) -> usize {
        if self.include_self_pairs {
            m * m
        } else {
            m * (m - 1)
        }
    }
}

/// Keeps τ inside `[TAU_MIN, TAU_MAX]` after an optimizer step.
pub fn clamp_log_temperature(store: &mut ParamStore, id: ParamId) {
    let v = &mut store.value_mut(id).data_mut()[0];
    *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
}

/// Per-modality `B × D` blocks of one co-located batch.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    batch_size: usize,
    dim: usize,
    blocks: Vec<(ModalityId, Var)>,
}

impl BatchEmbeddings {
    pub fn new(g: &Graph, blocks: Vec<(ModalityId, Var)>) -> Result<Self> {
        let Some(&(_, first)) = blocks.first() else {
            return Err(Error::Invalid("batch has no modalities".into()));
        };
        let shape = g.value(first).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape(
                "batch_embeddings",
                &shape,
                &[1, shape.last().copied().unwrap_or(0)],
            ));
        }
        for (i, &(m, v)) in blocks.iter().enumerate() {
            if g.value(v).shape() != shape.as_slice() {
                return Err(Error::shape("batch_embeddings", &shape, g.value(v).shape()));
            }
            if blocks[..i].iter().any(|(o, _)| *o == m) {
                return Err(Error::Invalid(format!(
                    "modality {m} appears twice in batch"
                )));
            }
        }
        Ok(Self {
            batch_size: shape[0],
            dim: shape[1],
            blocks,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.blocks.iter().map(|(m, _)| *m)
    }

    pub fn get(&self, m: ModalityId) -> Option<Var> {
        self.blocks.iter().find(|(o, _)| *o == m).map(|(_, v)| *v)
    }

    pub fn blocks(&self) -> &[(ModalityId, Var)] {
        &self.blocks
    }
}

fn infonce_normalized(g: &mut Graph, nm: Var, nn: Var, inv_tau: Var) -> Result<Var> {
    let nt = g.transpose(nn)?;
    let s = g.matmul(nm, nt)?;
    let logits = g.mul_scalar(s, inv_tau)?;
    let ls = g.log_softmax(logits, 1)?;
    let d = g.diag_mean(ls)?;
    Ok(g.scale(d, -1.0))
}

fn inverse_temperature(g: &mut Graph, log_tau: Var) -> Result<Var> {
    if !g.value(log_tau).is_scalar() {
        return Err(Error::shape("infonce", g.value(log_tau).shape(), &[1, 1]));
    }
    let neg = g.scale(log_tau, -1.0);
    Ok(g.exp(neg))
}

/// `L_{m→n}` for unnormalized blocks and a scalar `ln τ` node.
pub fn pairwise_infonce(g: &mut Graph, fm: Var, fn_: Var, log_tau: Var) -> Result<Var> {
    if g.value(fm).shape() != g.value(fn_).shape() {
        return Err(Error::shape(
            "infonce",
            g.value(fm).shape(),
            g.value(fn_).shape(),
        ));
    }
    let inv_tau = inverse_temperature(g, log_tau)?;
    let nm = g.normalize_rows(fm)?;
    let nn = g.normalize_rows(fn_)?;
    infonce_normalized(g, nm, nn, inv_tau)
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Var,
    /// Ordered pairs in evaluation order (row-major over the batch's modalities).
    pub pairs: Vec<(ModalityId, ModalityId, Var)>,
}

/// Mean of `L_{m→n}` over ordered modality pairs.
pub fn total_loss(
    g: &mut Graph,
    batch: &BatchEmbeddings,
    log_tau: Var,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let m = batch.blocks().len();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "the loss needs at least two modalities, got {m}"
        )));
    }
    let inv_tau = inverse_temperature(g, log_tau)?;
    let normed = batch
        .blocks()
        .iter()
        .map(|&(id, v)| Ok((id, g.normalize_rows(v)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(cfg.pair_count(m));
    for &(a, na) in &normed {
        for &(b, nb) in &normed {
            if a == b && !cfg.include_self_pairs {
                continue;
            }
            pairs.push((a, b, infonce_normalized(g, na, nb, inv_tau)?));
        }
    }
    let terms: Vec<Var> = pairs.iter().map(|p| p.2).collect();
    let stacked = g.concat(&terms, 0)?;
    let loss = g.mean(stacked);
    Ok(TotalLoss { loss, pairs })
}

/// Cosine similarity `s_ij = ⟨a_i, b_j⟩ / (‖a_i‖‖b_j‖)` between row sets.
pub fn similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.require_matrix("similarity")?;
    let (n, db) = b.require_matrix("similarity")?;
    if d != db {
        return Err(Error::shape("similarity", a.shape(), b.shape()));
    }
    let na = normalized_rows(a)?;
    let nb = normalized_rows(b)?;
    let mut out = vec![0.0; m * n];
    gemm(m, d, n, &na, false, &nb, true, 0.0, &mut out);
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise ℓ2 normalization; zero rows are an error.
pub fn normalized_rows(t: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = t.require_matrix("normalize_rows")?;
    let mut out = t.data().to_vec();
    for (i, row) in out.chunks_mut(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!(
                "row {i} has norm {norm}; cannot normalize"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}
