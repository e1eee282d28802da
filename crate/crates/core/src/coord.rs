//! Multi-scale location encoder.
//!
//! A coordinate is projected with Equal Earth, rescaled to [-1, 1]², and
//! lifted into K sinusoidal tokens through fixed random Fourier feature
//! matrices of increasing bandwidth. The tokens, together with R learnable
//! register tokens, run through `depth` transformer blocks; the output is the
//! mean of the K frequency tokens. With `depth = 0` the encoder is the plain
//! RFF mean and has no trainable parameters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{cell_centroid, equal_earth_forward, CellId, GeoCoordinate};
use crate::tensor::nn::{normal_tensor, AttentionBlock};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordEncoderConfig {
    /// Embedding dimension D (even).
    pub dim: usize,
    /// Per-scale standard deviations, strictly increasing. K = `sigmas.len()`.
    pub sigmas: Vec<f64>,
    pub depth: usize,
    pub registers: usize,
    pub heads: usize,
    /// Seed of the RFF bank.
    pub seed: u64,
}

impl Default for CoordEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            sigmas: vec![1.0, 16.0, 256.0],
            depth: 4,
            registers: 4,
            heads: 4,
            seed: 0,
        }
    }
}

impl CoordEncoderConfig {
    pub fn scales(&self) -> usize {
        self.sigmas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder dim must be even and positive, got {}",
                self.dim
            )));
        }
        validate_sigmas(&self.sigmas)?;
        if self.depth > 0 && (self.heads == 0 || !self.dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

fn validate_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.is_empty() {
        return Err(Error::Config("at least one RFF scale is required".into()));
    }
    if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Config(format!(
            "sigmas must be positive, got {sigmas:?}"
        )));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "sigmas must be strictly increasing, got {sigmas:?}"
        )));
    }
    Ok(())
}

/// K fixed `(D/2) × 2` projection matrices, entries of matrix k drawn from
/// N(0, σ_k²). Regenerated from `(seed, sigmas, dim)`; never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RffBank {
    seed: u64,
    sigmas: Vec<f64>,
    dim: usize,
    matrices: Vec<Tensor>,
}

impl RffBank {
    pub fn new(seed: u64, dim: usize, sigmas: &[f64]) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "RFF dim must be even and positive, got {dim}"
            )));
        }
        validate_sigmas(sigmas)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrices = sigmas
            .iter()
            .map(|&s| {
                let data = (0..dim)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::matrix(dim / 2, 2, data).expect("dim/2 x 2")
            })
            .collect();
        Ok(Self::from_matrices(seed, sigmas.to_vec(), dim, matrices))
    }

    /// Bank with explicit matrices, each `(dim/2) × 2`.
    pub fn from_matrices(seed: u64, sigmas: Vec<f64>, dim: usize, matrices: Vec<Tensor>) -> Self {
        debug_assert!(matrices.iter().all(|m| m.shape() == [dim / 2, 2]));
        Self {
            seed,
            sigmas,
            dim,
            matrices,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scales(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    /// K tokens `[cos(2π M_k p), sin(2π M_k p)]` for a point already rescaled
    /// to [-1, 1]².
    pub fn encode(&self, p: [f64; 2]) -> Vec<Vec<f64>> {
        self.matrices.iter().map(|m| rff_token(m, p)).collect()
    }

    fn encode_into(&self, p: [f64; 2], out: &mut Vec<f64>) {
        for m in &self.matrices {
            out.extend(rff_token(m, p));
        }
    }
}

fn rff_token(m: &Tensor, p: [f64; 2]) -> Vec<f64> {
    let half = m.rows();
    let mut tok = vec![0.0; 2 * half];
    for j in 0..half {
        let (s, c) = (2.0 * PI * (m.get(j, 0) * p[0] + m.get(j, 1) * p[1])).sin_cos();
        tok[j] = c;
        tok[half + j] = s;
    }
    tok
}

/// Projects and rescales a coordinate to the encoder's input square.
pub fn rescaled(c: GeoCoordinate) -> [f64; 2] {
    equal_earth_forward(c).normalized()
}

#[derive(Debug, Clone)]
pub struct CoordEncoder {
    config: CoordEncoderConfig,
    bank: RffBank,
    registers: Option<ParamId>,
    blocks: Vec<AttentionBlock>,
}

impl CoordEncoder {
    /// Registers parameters under `enc/gps/`. `rng` initializes the learnable
    /// weights; the bank depends only on the config.
    pub fn new<R: Rng + ?Sized>(
        config: CoordEncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let bank = RffBank::new(config.seed, config.dim, &config.sigmas)?;
        let registers = if config.depth > 0 && config.registers > 0 {
            let init = normal_tensor(rng, config.registers, config.dim, 0.02);
            Some(store.add("enc/gps/registers", init)?)
        } else {
            None
        };
        let blocks = (0..config.depth)
            .map(|i| {
                AttentionBlock::new(
                    store,
                    &format!("enc/gps/block{i}"),
                    config.dim,
                    config.heads,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            bank,
            registers,
            blocks,
        })
    }

    pub fn config(&self) -> &CoordEncoderConfig {
        &self.config
    }

    pub fn bank(&self) -> &RffBank {
        &self.bank
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `B × D` embeddings for a batch of coordinates.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coords: &[GeoCoordinate],
    ) -> Result<Var> {
        if coords.is_empty() {
            return Err(Error::Invalid(
                "cannot encode an empty coordinate batch".into(),
            ));
        }
        let k = self.bank.scales();
        let d = self.config.dim;
        let mut data = Vec::with_capacity(coords.len() * k * d);
        for &c in coords {
            self.bank.encode_into(rescaled(c), &mut data);
        }
        let tokens = g.constant(Tensor::matrix(coords.len() * k, d, data)?);
        if self.blocks.is_empty() {
            return g.group_mean(tokens, k, k);
        }
        let (mut x, seq) = match self.registers {
            Some(r) => {
                let regs = g.param(store, r);
                let reg_count = self.config.registers;
                (g.interleave(tokens, k, regs, reg_count)?, k + reg_count)
            }
            None => (tokens, k),
        };
        for block in &self.blocks {
            x = block.forward(g, store, x, seq)?;
        }
        g.group_mean(x, seq, k)
    }

    pub fn encode_location(&self, store: &ParamStore, c: GeoCoordinate) -> Result<Vec<f64>> {
        let mut out = self.encode_many(store, &[c])?;
        Ok(out.pop().expect("one row"))
    }

    /// Embeddings for many coordinates, evaluated in chunks.
    pub fn encode_many(
        &self,
        store: &ParamStore,
        coords: &[GeoCoordinate],
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(coords.len());
        for chunk in coords.chunks(256) {
            let mut g = Graph::new();
            let y = self.forward(&mut g, store, chunk)?;
            let t = g.value(y);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Encodes the centroid of every cell. Cells without a centroid inside
    /// the projection image are skipped with a warning; the returned index
    /// map gives, for each embedding, its position in `cells`.
    pub fn encode_cell_centroids(
        &self,
        store: &ParamStore,
        cells: &[CellId],
    ) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut coords = Vec::with_capacity(cells.len());
        let mut index = Vec::with_capacity(cells.len());
        for (i, &cell) in cells.iter().enumerate() {
            match cell_centroid(cell) {
                Ok(c) => {
                    coords.push(c);
                    index.push(i);
                }
                Err(e) => log::warn!("skipping cell {cell}: {e}"),
            }
        }
        Ok((self.encode_many(store, &coords)?, index))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.registers.into_iter().collect();
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids
    }
}
