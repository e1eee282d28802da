//! Seeded gradient checks shared by the integration and acceptance tests.

use geoalign::contrastive::{total_loss, BatchEmbeddings, LossConfig};
use geoalign::coord::{CoordEncoder, CoordEncoderConfig};
use geoalign::geo::GeoCoordinate;
use geoalign::modality::{ModalityEncoder, ModalityId};
use geoalign::tensor::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use geoalign::tensor::nn::normal_tensor;
use geoalign::tensor::{Graph, ParamStore, Tensor, Var};
use geoalign::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

fn rnd(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    normal_tensor(rng, r, c, 1.0)
}

/// Scalar readout `Σ out ⊙ w` with a fixed random weight.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    if shape.is_empty() {
        return Ok(g.scale(out, 0.7));
    }
    let w = rnd(
        &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        shape[0],
        shape[1],
    );
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 2 + (seed % 4) as usize;
    let c = 3 + (seed % 3) as usize;
    let mut x = || rnd(&mut rng, r, c);
    let (a, b, e, f) = (x(), x(), x(), x());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let row = rnd(&mut rng, 1, c);
    let row2 = rnd(&mut rng, 1, c);
    let wide = rnd(&mut rng, c, c + 1);
    let square = rnd(&mut rng, r, r);
    let scalar = Tensor::scalar(rng.random_range(-1.5..1.5));
    let small = Tensor::new(
        a.shape().to_vec(),
        a.data().iter().map(|v| 0.3 * v).collect(),
    )
    .unwrap();
    let (seq, heads) = (2 + (seed % 2) as usize, 2);
    let qkv = |rng: &mut ChaCha8Rng| rnd(rng, 2 * seq, 4);
    let (q, k, v) = (qkv(&mut rng), qkv(&mut rng), qkv(&mut rng));
    let regs = rnd(&mut rng, 2, c);
    let grouped = rnd(&mut rng, 3 * r, c);
    let s = seed;
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        (
            "matmul",
            vec![a.clone(), wide],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                readout(g, y, s)
            }),
        ),
        (
            "transpose",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.transpose(v[0])?;
                readout(g, y, s)
            }),
        ),
        (
            "add_sub_mul",
            vec![a.clone(), b.clone(), e.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add(v[0], v[1])?;
                let y = g.sub(y, v[2])?;
                let y = g.mul(y, v[1])?;
                readout(g, y, s)
            }),
        ),
        (
            "scale_mul_scalar",
            vec![a.clone(), scalar],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.scale(v[0], -1.3);
                let y = g.mul_scalar(y, v[1])?;
                readout(g, y, s)
            }),
        ),
        (
            "add_row_bias",
            vec![a.clone(), row.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.add_row_bias(v[0], v[1])?;
                readout(g, y, s)
            }),
        ),
        (
            "concat_slice",
            vec![a.clone(), b.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let rows = g.concat(&[v[0], v[1]], 0)?;
                let cols = g.concat(&[v[0], v[1]], 1)?;
                let y = g.slice(rows, 0, 1, 2 * r - 1)?;
                let z = g.slice(cols, 1, 1, 2 * c - 1)?;
                let a = readout(g, y, s)?;
                let b = readout(g, z, s + 1)?;
                g.add(a, b)
            }),
        ),
        (
            "gelu",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.gelu(v[0]);
                readout(g, y, s)
            }),
        ),
        (
            "tanh_exp",
            vec![small],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.tanh(v[0]);
                let y = g.exp(y);
                readout(g, y, s)
            }),
        ),
        (
            "layer_norm",
            vec![f.clone(), row, row2],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                readout(g, y, s)
            }),
        ),
        (
            "softmax",
            vec![a.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0], (s % 2) as usize)?;
                readout(g, y, s)
            }),
        ),
        (
            "log_softmax",
            vec![b.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.log_softmax(v[0], ((s + 1) % 2) as usize)?;
                readout(g, y, s)
            }),
        ),
        (
            "normalize_rows",
            vec![e.clone()],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.normalize_rows(v[0])?;
                readout(g, y, s)
            }),
        ),
        (
            "sum_mean_diag_mean",
            vec![a.clone(), square],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let x = g.sum(v[0]);
                let y = g.mean(v[0]);
                let z = g.diag_mean(v[1])?;
                let t = g.add(x, y)?;
                let t = g.scale(t, 0.5);
                g.add(t, z)
            }),
        ),
        (
            "group_mean_interleave",
            vec![grouped, regs],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.interleave(v[0], 3, v[1], 2)?;
                let z = g.group_mean(y, 5, 3 - (s % 2) as usize)?;
                readout(g, z, s)
            }),
        ),
        (
            "attention",
            vec![q, k, v],
            Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.attention(v[0], v[1], v[2], seq, heads)?;
                readout(g, y, s)
            }),
        ),
    ];
    // Broadcast-free interleave path: one b block per group.
    let grouped = rnd(&mut ChaCha8Rng::seed_from_u64(seed + 2000), 2 * r, c);
    let per_group = rnd(&mut ChaCha8Rng::seed_from_u64(seed + 3000), r, c);
    cases.push((
        "interleave_per_group",
        vec![grouped, per_group],
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.interleave(v[0], 2, v[1], 1)?;
            readout(g, y, s)
        }),
    ));
    cases
}

/// Five-modality total loss against its embedding blocks and log temperature.
fn loss_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4000);
    let b = 2 + (seed % 5) as usize;
    let mut inputs: Vec<Tensor> = (0..5).map(|_| rnd(&mut rng, b, 4)).collect();
    inputs.push(Tensor::scalar(rng.random_range(-3.0..0.0)));
    let cfg = LossConfig {
        include_self_pairs: seed % 2 == 1,
        ..Default::default()
    };
    check_inputs(&inputs, DEFAULT_STEP, |g, v| {
        let blocks = ModalityId::ALL
            .iter()
            .zip(v)
            .map(|(&m, &x)| (m, x))
            .collect();
        let batch = BatchEmbeddings::new(g, blocks)?;
        Ok(total_loss(g, &batch, v[5], &cfg)?.loss)
    })
}

/// Full pipeline: raw features and coordinates through every encoder into the
/// five-modality loss, differentiated with respect to all parameters.
fn model_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5000);
    let mut store = ParamStore::new();
    let dim = 4;
    let encoders: Vec<ModalityEncoder> = ModalityId::FEATURES
        .iter()
        .map(|&m| ModalityEncoder::new(&mut store, m, 3, dim, &mut rng))
        .collect::<Result<_>>()?;
    let coord_cfg = CoordEncoderConfig {
        dim,
        sigmas: vec![1.0, 4.0],
        depth: 1 + (seed % 2) as usize,
        registers: (seed % 3) as usize,
        heads: 2,
        seed,
    };
    let coord = CoordEncoder::new(coord_cfg, &mut store, &mut rng)?;
    let log_tau = store.add("loss/log_temperature", Tensor::scalar(0.1f64.ln()))?;
    let b = 3;
    let raw: Vec<Tensor> = (0..4).map(|_| rnd(&mut rng, b, 3)).collect();
    let coords: Vec<GeoCoordinate> = (0..b)
        .map(|_| {
            GeoCoordinate::new(
                rng.random_range(-60.0..60.0),
                rng.random_range(-170.0..170.0),
            )
            .unwrap()
        })
        .collect();
    // Perturb zero-initialized layers so every parameter carries gradient.
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let t = store.value_mut(id);
        let noise = normal_tensor(&mut rng, 1, t.numel(), 0.1);
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += n);
    }
    let cfg = LossConfig::default();
    check_params(&mut store, &ids, DEFAULT_STEP, |g, store| {
        let mut blocks = Vec::new();
        for (enc, x) in encoders.iter().zip(&raw) {
            let xv = g.constant(x.clone());
            blocks.push((enc.modality, enc.forward(g, store, xv)?));
        }
        blocks.push((ModalityId::Gps, coord.forward(g, store, &coords)?));
        let batch = BatchEmbeddings::new(g, blocks)?;
        let lt = g.param(store, log_tau);
        Ok(total_loss(g, &batch, lt, &cfg)?.loss)
    })
}

pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub error: f64,
}

/// Runs every op case, the loss case and the full-model case for each seed.
pub fn run(seeds: std::ops::Range<u64>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in seeds {
        for (name, inputs, build) in op_cases(seed) {
            let error = check_inputs(&inputs, DEFAULT_STEP, |g, v| build(g, v))?;
            out.push(CaseResult {
                name: name.into(),
                seed,
                error,
            });
        }
        out.push(CaseResult {
            name: "total_loss".into(),
            seed,
            error: loss_case(seed)?,
        });
        out.push(CaseResult {
            name: "model_total_loss".into(),
            seed,
            error: model_case(seed)?,
        });
    }
    Ok(out)
}
