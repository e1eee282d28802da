//! Layers built from graph ops: linear maps, layer norm and the pre-norm
//! transformer block.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `rows × cols` matrix with entries drawn from N(0, std²).
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

/// `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = normal_tensor(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        Self::with_weight(store, name, w)
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Self::with_weight(store, name, Tensor::zeros(fan_in, fan_out))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Result<Self> {
        let fan_out = w.cols();
        Ok(Self {
            weight: store.add(format!("{name}/w"), w)?,
            bias: store.add(format!("{name}/b"), Tensor::zeros(1, fan_out))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row_bias(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}/gain"), Tensor::filled(1, dim, 1.0))?,
            bias: store.add(format!("{name}/bias"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Pre-norm transformer block:
/// `h = x + Wo·MHA(LN₁(x))`, `y = h + W₂·GELU(W₁·LN₂(h))`.
///
/// The attention output projection and the second MLP layer start at zero,
/// so a freshly built block is the identity map.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = MLP_RATIO * dim;
        Ok(Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}/ln1"), dim)?,
            query: Linear::new(store, &format!("{name}/attn/q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}/attn/k"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}/attn/v"), dim, dim, rng)?,
            out: Linear::zeroed(store, &format!("{name}/attn/o"), dim, dim)?,
            ln2: LayerNorm::new(store, &format!("{name}/ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}/mlp/fc1"), dim, hidden, rng)?,
            fc2: Linear::zeroed(store, &format!("{name}/mlp/fc2"), hidden, dim)?,
        })
    }

    /// `tokens` holds consecutive groups of `seq` rows; attention mixes rows
    /// only within a group.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        seq: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, tokens)?;
        let q = self.query.forward(g, store, h)?;
        let k = self.key.forward(g, store, h)?;
        let v = self.value.forward(g, store, h)?;
        let a = g.attention(q, k, v, seq, self.heads)?;
        let a = self.out.forward(g, store, a)?;
        let x = g.add(tokens, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.ln1.params());
        for l in [&self.query, &self.key, &self.value, &self.out] {
            ids.extend(l.params());
        }
        ids.extend(self.ln2.params());
        ids.extend(self.fc1.params());
        ids.extend(self.fc2.params());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_params, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_block(seed: u64, dim: usize, heads: usize) -> (ParamStore, AttentionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "blk", dim, heads, &mut rng).unwrap();
        // give the zero-initialized projections non-trivial values
        for id in block.params() {
            let t = store.value(id);
            let (r, c) = (t.rows(), t.cols());
            *store.value_mut(id) = normal_tensor(&mut rng, r, c, 0.4);
        }
        (store, block)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let err = AttentionBlock::new(&mut store, "b", 10, 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fresh_block_single_token_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        let x = normal_tensor(&mut rng, 1, 8, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xv, 1).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let (store, block) = random_block(2, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal_tensor(&mut rng, 5, 8, 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = block.forward(&mut g, &store, v, 5).unwrap();
            g.value(y).clone()
        };
        let (y, yp) = (run(x), run(xp));
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in yp.row(k).iter().zip(y.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_do_not_interact() {
        let (store, block) = random_block(4, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = normal_tensor(&mut rng, 3, 8, 1.0);
        let b = normal_tensor(&mut rng, 3, 8, 1.0);
        let both = Tensor::matrix(6, 8, [a.data(), b.data()].concat()).unwrap();
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = block.forward(&mut g, &store, v, 3).unwrap();
            g.value(y).clone()
        };
        let (ya, yb, yab) = (run(a), run(b), run(both));
        assert_eq!(&yab.data()[..24], ya.data());
        assert_eq!(&yab.data()[24..], yb.data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (mut store, block) = random_block(10 + seed, 8, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let x = normal_tensor(&mut rng, 8, 8, 1.0);
            let ids = block.params();
            let err = check_params(&mut store, &ids, DEFAULT_STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = block.forward(g, s, xv, 4)?;
                Ok(g.mean(y))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
