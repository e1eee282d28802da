//! Synthetic co-located multimodal data.
//!
//! A fixed smooth latent field `z(p) = tanh(A·[cos 2πΩp, sin 2πΩp])` over the
//! rescaled Equal Earth plane stands in for the geographic content of a
//! location. Every feature modality observes it through its own fixed map,
//! `raw_m = tanh(W_m z) + ε`, so all four views share one latent and
//! alignment is learnable.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! "GSYN" | version u16 | count u64 | dims 4 × u32 (street, aerial, dsm, text)
//! count × { id u64 | lat f64 | lon f64 | timestamp i64 | Σdims × f32 }
//! ```
//!
//! so a file holds `30 + count · (32 + 4·Σdims)` bytes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coord::rescaled;
use crate::error::{Error, Result};
use crate::geo::GeoCoordinate;
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::modality::ModalityId;
use crate::tensor::nn::normal_tensor;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"GSYN";
pub const DATASET_VERSION: u16 = 1;
const HEADER_BYTES: u64 = 4 + 2 + 8 + 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub latent_dim: usize,
    /// Number of random frequencies in the latent field.
    pub field_features: usize,
    /// Standard deviation of the field frequencies, in cycles per unit of the
    /// rescaled plane.
    pub field_sigma: f64,
    pub input_dims: [usize; 4],
    pub noise_scale: f64,
    /// Timestamps are uniform over these calendar years (inclusive, UTC).
    pub first_year: i32,
    pub last_year: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            field_features: 32,
            field_sigma: 16.0,
            input_dims: [32; 4],
            noise_scale: 0.05,
            first_year: 2017,
            last_year: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.field_features == 0 || self.input_dims.contains(&0) {
            return Err(Error::Config("synthetic dims must be positive".into()));
        }
        if !(self.field_sigma > 0.0 && self.field_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "field_sigma must be positive, got {}",
                self.field_sigma
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        if self.first_year > self.last_year {
            return Err(Error::Config("first_year after last_year".into()));
        }
        Ok(())
    }
}

/// Latitude/longitude box in degrees, written `min_lon,min_lat,max_lon,max_lat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    /// Contiguous United States.
    pub const CONUS: BBox = BBox {
        min_lon: -125.0,
        min_lat: 25.0,
        max_lon: -67.0,
        max_lat: 49.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_lat >= -90.0
            && self.max_lat <= 90.0
            && self.min_lon >= -180.0
            && self.max_lon <= 180.0
            && self.min_lat < self.max_lat
            && self.min_lon < self.max_lon;
        if !ok {
            return Err(Error::Domain(format!("degenerate or invalid bbox {self}")));
        }
        Ok(())
    }

    pub fn contains(&self, c: GeoCoordinate) -> bool {
        (self.min_lat..=self.max_lat).contains(&c.lat())
            && (self.min_lon..=self.max_lon).contains(&c.lon())
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.min_lon, self.min_lat, self.max_lon, self.max_lat
        )
    }
}

impl FromStr for BBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("bbox {s:?}: {e}")))?;
        let [min_lon, min_lat, max_lon, max_lat] = v[..] else {
            return Err(Error::Invalid(format!(
                "bbox {s:?} needs four comma-separated numbers"
            )));
        };
        let b = BBox {
            min_lon,
            min_lat,
            max_lon,
            max_lat,
        };
        b.validate()?;
        Ok(b)
    }
}

/// Fixed random smooth field plus the per-modality observation maps.
#[derive(Debug, Clone)]
pub struct LatentField {
    seed: u64,
    config: SynthConfig,
    omega: Tensor,
    mix: Tensor,
    readouts: Vec<Tensor>,
}

impl LatentField {
    pub fn new(seed: u64, config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.field_features;
        let dz = config.latent_dim;
        let omega = normal_tensor(&mut rng, f, 2, config.field_sigma);
        // unit-variance pre-activations: each cos/sin term has variance ½
        let mix = normal_tensor(&mut rng, dz, 2 * f, (1.0 / f as f64).sqrt());
        let readouts = config
            .input_dims
            .iter()
            .map(|&d| normal_tensor(&mut rng, d, dz, (2.0 / dz as f64).sqrt()))
            .collect();
        Ok(Self {
            seed,
            config,
            omega,
            mix,
            readouts,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn latent(&self, c: GeoCoordinate) -> Vec<f64> {
        let p = rescaled(c);
        let f = self.config.field_features;
        let mut phi = vec![0.0; 2 * f];
        for j in 0..f {
            let (s, co) =
                (2.0 * PI * (self.omega.get(j, 0) * p[0] + self.omega.get(j, 1) * p[1])).sin_cos();
            phi[j] = co;
            phi[f + j] = s;
        }
        (0..self.config.latent_dim)
            .map(|i| {
                self.mix
                    .row(i)
                    .iter()
                    .zip(&phi)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .tanh()
            })
            .collect()
    }

    /// Noise-free feature vector of modality `m` at `c`.
    pub fn clean_features(&self, m: ModalityId, c: GeoCoordinate) -> Result<Vec<f64>> {
        let z = self.latent(c);
        self.observe(m, &z)
    }

    fn observe(&self, m: ModalityId, z: &[f64]) -> Result<Vec<f64>> {
        let k = m
            .feature_index()
            .ok_or_else(|| Error::Invalid("gps has no feature vector".into()))?;
        let w = &self.readouts[k];
        Ok((0..w.rows())
            .map(|i| {
                w.row(i)
                    .iter()
                    .zip(z)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .tanh()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    pub coord: GeoCoordinate,
    pub timestamp: i64,
    /// Feature modalities only; gps is `coord`.
    pub raw: BTreeMap<ModalityId, Vec<f32>>,
}

impl MultimodalSample {
    pub fn raw(&self, m: ModalityId) -> Option<&[f32]> {
        self.raw.get(&m).map(Vec::as_slice)
    }
}

/// `n` area-uniform points in `bbox`: uniform longitude and uniform sin(lat).
pub fn gen_locations(n: usize, bbox: &BBox, seed: u64) -> Result<Vec<GeoCoordinate>> {
    bbox.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s0, s1) = (
        bbox.min_lat.to_radians().sin(),
        bbox.max_lat.to_radians().sin(),
    );
    (0..n)
        .map(|_| {
            let lon = rng.random_range(bbox.min_lon..bbox.max_lon);
            let s: f64 = rng.random_range(s0..s1);
            let lat = s.asin().to_degrees().clamp(bbox.min_lat, bbox.max_lat);
            GeoCoordinate::new(lat, lon)
        })
        .collect()
}

/// One sample with noise drawn from a stream keyed by `(seed, id)`.
pub fn gen_sample(
    field: &LatentField,
    id: u64,
    coord: GeoCoordinate,
    timestamp: i64,
    noise_scale: f64,
    seed: u64,
) -> MultimodalSample {
    let z = field.latent(coord);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let raw = ModalityId::FEATURES
        .iter()
        .map(|&m| {
            let clean = field.observe(m, &z).expect("feature modality");
            let v = clean
                .iter()
                .map(|x| (x + noise_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            (m, v)
        })
        .collect();
    MultimodalSample {
        id,
        coord,
        timestamp,
        raw,
    }
}

fn year_start(year: i32) -> i64 {
    NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 4],
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self, m: ModalityId) -> Option<usize> {
        m.feature_index().map(|k| self.dims[k])
    }
}

/// `n` samples with ids `first_id..first_id + n`. Locations, timestamps and
/// noise follow `seed`; the field carries its own seed, so datasets drawn
/// with different `seed` share one world.
pub fn gen_dataset(
    field: &LatentField,
    n: usize,
    bbox: &BBox,
    seed: u64,
    first_id: u64,
) -> Result<Dataset> {
    let cfg = field.config();
    let coords = gen_locations(n, bbox, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (t0, t1) = (year_start(cfg.first_year), year_start(cfg.last_year + 1));
    let samples = coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let ts = rng.random_range(t0..t1);
            gen_sample(
                field,
                first_id + i as u64,
                c,
                ts,
                cfg.noise_scale,
                seed.wrapping_add(1),
            )
        })
        .collect();
    Ok(Dataset {
        dims: cfg.input_dims,
        samples,
    })
}

/// Repeat observations of known locations: same coordinates, fresh noise and
/// timestamps drawn uniformly within calendar year `year`. Ids start at
/// `first_id` in input order.
pub fn gen_revisits(
    field: &LatentField,
    coords: &[GeoCoordinate],
    year: i32,
    seed: u64,
    first_id: u64,
) -> Dataset {
    let cfg = field.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (t0, t1) = (year_start(year), year_start(year + 1));
    let samples = coords
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let ts = rng.random_range(t0..t1);
            gen_sample(
                field,
                first_id + i as u64,
                c,
                ts,
                cfg.noise_scale,
                seed.wrapping_add(1),
            )
        })
        .collect();
    Dataset {
        dims: cfg.input_dims,
        samples,
    }
}

pub fn dataset_file_size(count: usize, dims: [usize; 4]) -> u64 {
    HEADER_BYTES + count as u64 * (32 + 4 * dims.iter().sum::<usize>() as u64)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u64(ds.samples.len() as u64);
    for d in ds.dims {
        w.u32(d as u32);
    }
    for s in &ds.samples {
        w.u64(s.id);
        w.f64(s.coord.lat());
        w.f64(s.coord.lon());
        w.i64(s.timestamp);
        for (k, m) in ModalityId::FEATURES.iter().enumerate() {
            let v = s
                .raw(*m)
                .ok_or_else(|| Error::Invalid(format!("sample {} lacks {m}", s.id)))?;
            if v.len() != ds.dims[k] {
                return Err(Error::shape("write_dataset", &[v.len()], &[ds.dims[k]]));
            }
            v.iter().for_each(|x| w.f32(*x));
        }
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let count = r.u64("count")?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let need = dataset_file_size(count as usize, dims);
    if (bytes.len() as u64) < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated: header announces {count} records ({need} bytes)"),
        });
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.offset();
        let id = r.u64("id")?;
        let lat = r.f64("lat")?;
        let lon = r.f64("lon")?;
        let coord = GeoCoordinate::new(lat, lon).map_err(|e| Error::Format {
            offset: at,
            msg: format!("record {id}: {e}"),
        })?;
        let timestamp = r.i64("timestamp")?;
        let mut raw = BTreeMap::new();
        for (k, m) in ModalityId::FEATURES.iter().enumerate() {
            let v = (0..dims[k])
                .map(|_| r.f32("feature"))
                .collect::<Result<Vec<_>>>()?;
            raw.insert(*m, v);
        }
        samples.push(MultimodalSample {
            id,
            coord,
            timestamp,
            raw,
        });
    }
    r.finish()?;
    Ok(Dataset { dims, samples })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
