//! Cross-modal retrieval, ensembling, geocell retrieval, linear probing and
//! PCA export over persisted embeddings.
//!
//! Embedding store layout (little-endian):
//!
//! ```text
//! "GEMB" | version u16 | modality: u32 length + UTF-8 | dim u32 | count u64
//! count × { id u64 | lat f64 | lon f64 | timestamp i64 | dim × f32 }
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::contrastive::similarity;
use crate::coord::CoordEncoder;
use crate::error::{Error, Result};
use crate::geo::{cell_centroid, haversine_distance, CellId, GeoCoordinate};
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::modality::ModalityId;
use crate::synth::MultimodalSample;
use crate::tensor::{ParamStore, Tensor};

pub const STORE_MAGIC: &[u8; 4] = b"GEMB";
pub const STORE_VERSION: u16 = 1;
pub const DEFAULT_RADIUS_M: f64 = 100.0;
pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub coord: GeoCoordinate,
    pub timestamp: i64,
    pub vector: Vec<f32>,
}

/// Georeferenced embeddings of one modality, kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    modality: ModalityId,
    dim: usize,
    records: Vec<EmbeddingRecord>,
    /// Hash of the run configuration that produced the vectors; may be empty.
    config_hash: String,
}

impl EmbeddingStore {
    pub fn new(
        modality: ModalityId,
        dim: usize,
        mut records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("embedding dim must be positive".into()));
        }
        if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
            return Err(Error::shape("embedding_store", &[r.vector.len()], &[dim]));
        }
        records.sort_by_key(|r| r.id);
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Invalid(format!("duplicate id {} in store", w[0].id)));
        }
        Ok(Self {
            modality,
            dim,
            records,
            config_hash: String::new(),
        })
    }

    /// Pairs each sample with its embedding row.
    pub fn from_samples(
        modality: ModalityId,
        samples: &[MultimodalSample],
        vectors: &[Vec<f64>],
    ) -> Result<Self> {
        if samples.len() != vectors.len() {
            return Err(Error::shape(
                "embedding_store",
                &[samples.len()],
                &[vectors.len()],
            ));
        }
        let dim = vectors.first().map_or(1, Vec::len);
        let records = samples
            .iter()
            .zip(vectors)
            .map(|(s, v)| EmbeddingRecord {
                id: s.id,
                coord: s.coord,
                timestamp: s.timestamp,
                vector: v.iter().map(|&x| x as f32).collect(),
            })
            .collect();
        Self::new(modality, dim, records)
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn coords(&self) -> Vec<GeoCoordinate> {
        self.records.iter().map(|r| r.coord).collect()
    }

    /// `N × D` matrix of the stored vectors.
    pub fn matrix(&self) -> Result<Tensor> {
        let data = self
            .records
            .iter()
            .flat_map(|r| r.vector.iter().map(|&v| v as f64))
            .collect();
        Tensor::matrix(self.records.len(), self.dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(STORE_MAGIC);
        w.u16(STORE_VERSION);
        w.str(self.modality.as_str());
        w.str(&self.config_hash);
        w.u32(self.dim as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.id);
            w.f64(r.coord.lat());
            w.f64(r.coord.lon());
            w.i64(r.timestamp);
            r.vector.iter().for_each(|&v| w.f32(v));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        r.version(STORE_VERSION)?;
        let at = r.offset();
        let tag = r.str("modality tag")?;
        let modality = tag.parse::<ModalityId>().map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        let config_hash = r.str("config hash")?;
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let need = count.saturating_mul(32 + 4 * dim as u64);
        if (r.remaining() as u64) < need {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated: header announces {count} records of dim {dim}"),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
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
            let vector = (0..dim)
                .map(|_| r.f32("vector"))
                .collect::<Result<Vec<_>>>()?;
            records.push(EmbeddingRecord {
                id,
                coord,
                timestamp,
                vector,
            });
        }
        r.finish()?;
        let sorted = records.windows(2).all(|w| w[0].id < w[1].id);
        if !sorted {
            return Err(Error::Format {
                offset: 0,
                msg: "records are not in strictly increasing id order".into(),
            });
        }
        Ok(Self::new(modality, dim, records)?.with_config_hash(&config_hash))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Query-by-gallery cosine scores; rows and columns ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub query_ids: Vec<u64>,
    pub gallery_ids: Vec<u64>,
    pub scores: Tensor,
}

impl SimilarityMatrix {
    pub fn new(query_ids: Vec<u64>, gallery_ids: Vec<u64>, scores: Tensor) -> Result<Self> {
        if scores.shape() != [query_ids.len(), gallery_ids.len()] {
            return Err(Error::shape(
                "similarity_matrix",
                scores.shape(),
                &[query_ids.len(), gallery_ids.len()],
            ));
        }
        Ok(Self {
            query_ids,
            gallery_ids,
            scores,
        })
    }

    /// Per row, the column of the highest score; ties go to the smaller
    /// gallery id.
    pub fn top1(&self) -> Vec<usize> {
        let n = self.gallery_ids.len();
        (0..self.query_ids.len())
            .map(|i| {
                let row = &self.scores.data()[i * n..(i + 1) * n];
                let mut best = 0;
                for j in 1..n {
                    let better = row[j] > row[best]
                        || (row[j] == row[best] && self.gallery_ids[j] < self.gallery_ids[best]);
                    if better {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn build_similarity(
    queries: &EmbeddingStore,
    gallery: &EmbeddingStore,
) -> Result<SimilarityMatrix> {
    if queries.dim() != gallery.dim() {
        return Err(Error::shape(
            "build_similarity",
            &[queries.dim()],
            &[gallery.dim()],
        ));
    }
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Invalid("similarity needs non-empty stores".into()));
    }
    let scores = similarity(&queries.matrix()?, &gallery.matrix()?)?;
    SimilarityMatrix::new(queries.ids(), gallery.ids(), scores)
}

/// Entrywise mean of matrices over identical id lists.
pub fn ensemble(mats: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let Some(first) = mats.first() else {
        return Err(Error::Invalid("ensemble of zero matrices".into()));
    };
    if mats.len() == 1 {
        return Ok(first.clone());
    }
    // running mean: exact when all members are equal
    let mut acc = first.scores.data().to_vec();
    for (k, m) in mats.iter().enumerate().skip(1) {
        if m.query_ids != first.query_ids || m.gallery_ids != first.gallery_ids {
            return Err(Error::Invalid(
                "ensemble members have different query or gallery ids".into(),
            ));
        }
        let w = 1.0 / (k + 1) as f64;
        acc.iter_mut()
            .zip(m.scores.data())
            .for_each(|(a, v)| *a += (v - *a) * w);
    }
    let scores = Tensor::matrix(first.query_ids.len(), first.gallery_ids.len(), acc)?;
    SimilarityMatrix::new(first.query_ids.clone(), first.gallery_ids.clone(), scores)
}

/// Coordinate of each query's best gallery match.
pub fn top1_localize(
    sim: &SimilarityMatrix,
    gallery: &EmbeddingStore,
) -> Result<Vec<GeoCoordinate>> {
    if gallery.is_empty() {
        return Err(Error::Invalid("empty gallery".into()));
    }
    if sim.gallery_ids != gallery.ids() {
        return Err(Error::Invalid(
            "similarity columns do not match the gallery".into(),
        ));
    }
    Ok(sim
        .top1()
        .into_iter()
        .map(|j| gallery.records()[j].coord)
        .collect())
}

/// Share of predictions within `radius_m` meters of the truth.
pub fn acc_at_distance(
    preds: &[GeoCoordinate],
    truths: &[GeoCoordinate],
    radius_m: f64,
) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::shape(
            "acc_at_distance",
            &[preds.len()],
            &[truths.len()],
        ));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("accuracy of zero queries".into()));
    }
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| haversine_distance(**p, **t) <= radius_m)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeocellPrediction {
    pub cell: CellId,
    pub centroid: GeoCoordinate,
}

/// Retrieves, for every query, the cell whose encoded centroid is most
/// similar. Cells without a valid centroid are skipped.
pub fn geocell_retrieve(
    queries: &EmbeddingStore,
    cells: &[CellId],
    encoder: &CoordEncoder,
    params: &ParamStore,
) -> Result<Vec<GeocellPrediction>> {
    if cells.is_empty() {
        return Err(Error::Invalid(
            "geocell retrieval needs at least one cell".into(),
        ));
    }
    let (embs, index) = encoder.encode_cell_centroids(params, cells)?;
    if embs.is_empty() {
        return Err(Error::Invalid("no cell has a valid centroid".into()));
    }
    let kept: Vec<CellId> = index.iter().map(|&i| cells[i]).collect();
    let centroids = kept
        .iter()
        .map(|&c| cell_centroid(c))
        .collect::<Result<Vec<_>>>()?;
    let gallery = Tensor::from_rows(&embs)?;
    let sim = similarity(&queries.matrix()?, &gallery)?;
    let ids: Vec<u64> = (0..kept.len() as u64).collect();
    let sim = SimilarityMatrix::new(queries.ids(), ids, sim)?;
    Ok(sim
        .top1()
        .into_iter()
        .map(|j| GeocellPrediction {
            cell: kept[j],
            centroid: centroids[j],
        })
        .collect())
}

/// A geocell prediction is a hit when its centroid lies within half a cell
/// diagonal of the true location.
pub fn geocell_accuracy(preds: &[GeocellPrediction], truths: &[GeoCoordinate]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::shape(
            "geocell_accuracy",
            &[preds.len()],
            &[truths.len()],
        ));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("accuracy of zero queries".into()));
    }
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| haversine_distance(p.centroid, **t) <= p.cell.half_diagonal_m())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Distinct cells at `level` containing the given coordinates, sorted.
pub fn covering_cells(coords: &[GeoCoordinate], level: u8) -> Result<Vec<CellId>> {
    let set = coords
        .iter()
        .map(|&c| crate::geo::cell_of(c, level))
        .collect::<Result<BTreeSet<_>>>()?;
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    pub radius_m: f64,
    pub accuracy: f64,
    pub n_queries: usize,
    pub config_hash: String,
}

impl RetrievalReport {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

impl ProbeTargets {
    pub fn len(&self) -> usize {
        match self {
            ProbeTargets::Regression(v) => v.len(),
            ProbeTargets::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub features: Vec<Vec<f64>>,
    pub targets: ProbeTargets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeTask {
    /// First `⌈train_fraction·N⌉` rows train, the rest test.
    pub fn with_split(
        features: Vec<Vec<f64>>,
        targets: ProbeTargets,
        train_fraction: f64,
    ) -> Result<Self> {
        let n = features.len();
        let k = ((n as f64) * train_fraction).ceil() as usize;
        let task = Self {
            features,
            targets,
            train: (0..k.min(n)).collect(),
            test: (k.min(n)..n).collect(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.len();
        if self.targets.len() != n {
            return Err(Error::shape("probe", &[n], &[self.targets.len()]));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Invalid(
                "probe needs non-empty train and test splits".into(),
            ));
        }
        let train: BTreeSet<_> = self.train.iter().collect();
        if self.test.iter().any(|i| train.contains(i))
            || self.train.iter().chain(&self.test).any(|&i| i >= n)
        {
            return Err(Error::Invalid(
                "probe split must be disjoint and in range".into(),
            ));
        }
        let d = self.features[0].len();
        if self.features.iter().any(|f| f.len() != d) {
            return Err(Error::Invalid("probe features have ragged rows".into()));
        }
        if let ProbeTargets::Classification(labels) = &self.targets {
            let classes: BTreeSet<_> = labels.iter().collect();
            if classes.len() < 2 {
                return Err(Error::Invalid(
                    "classification probe needs at least two classes".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Ridge fit with an unpenalized intercept: columns are centered on the
/// training means, then `(XᵀX + λI) w = Xᵀy`.
struct Ridge {
    x_mean: DVector<f64>,
    y_mean: DVector<f64>,
    w: DMatrix<f64>,
}

impl Ridge {
    fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = x.nrows() as f64;
        let x_mean = x.row_mean().transpose();
        let y_mean = y.row_mean().transpose();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= x_mean.transpose();
        }
        let mut yc = y.clone();
        for mut row in yc.row_iter_mut() {
            row -= y_mean.transpose();
        }
        let mut a = xc.transpose() * &xc;
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let b = xc.transpose() * yc;
        let chol = a.cholesky().ok_or_else(|| {
            Error::Numeric(format!(
                "normal matrix is singular at λ = {lambda} (n = {n}); use a positive ridge λ"
            ))
        })?;
        Ok(Self {
            x_mean,
            y_mean,
            w: chol.solve(&b),
        })
    }

    fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= self.x_mean.transpose();
        }
        let mut out = xc * &self.w;
        for mut row in out.row_iter_mut() {
            row += self.y_mean.transpose();
        }
        out
    }
}

fn rows_matrix(features: &[Vec<f64>], idx: &[usize]) -> DMatrix<f64> {
    let d = features[idx[0]].len();
    DMatrix::from_fn(idx.len(), d, |i, j| features[idx[i]][j])
}

/// Test-split R² (regression) or overall accuracy (classification) of a
/// ridge read-out trained on the train split.
pub fn linear_probe(task: &ProbeTask, lambda: f64) -> Result<f64> {
    task.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge λ must be >= 0, got {lambda}")));
    }
    let xtr = rows_matrix(&task.features, &task.train);
    let xte = rows_matrix(&task.features, &task.test);
    match &task.targets {
        ProbeTargets::Regression(y) => {
            let ytr = DMatrix::from_fn(task.train.len(), 1, |i, _| y[task.train[i]]);
            let model = Ridge::fit(&xtr, &ytr, lambda)?;
            let pred = model.predict(&xte);
            let truth: Vec<f64> = task.test.iter().map(|&i| y[i]).collect();
            let mean = truth.iter().sum::<f64>() / truth.len() as f64;
            let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
            let ss_res: f64 = truth
                .iter()
                .enumerate()
                .map(|(i, t)| (t - pred[(i, 0)]).powi(2))
                .sum();
            if ss_tot == 0.0 {
                return Err(Error::Numeric(
                    "test targets are constant; R² undefined".into(),
                ));
            }
            Ok(1.0 - ss_res / ss_tot)
        }
        ProbeTargets::Classification(labels) => {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let ytr = DMatrix::from_fn(task.train.len(), classes, |i, c| {
                if labels[task.train[i]] == c {
                    1.0
                } else {
                    0.0
                }
            });
            let model = Ridge::fit(&xtr, &ytr, lambda)?;
            let pred = model.predict(&xte);
            let correct = task
                .test
                .iter()
                .enumerate()
                .filter(|(i, &t)| pred.row(*i).transpose().argmax().0 == labels[t])
                .count();
            Ok(correct as f64 / task.test.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal components, most variance first.
    pub components: Vec<Vec<f64>>,
    /// All covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Raw projections, `N × k`.
    pub projections: Vec<Vec<f64>>,
    /// Projections min-max scaled per component into [0, 1].
    pub rgb: Vec<Vec<f64>>,
}

impl Pca {
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().map(|e| e / total).collect()
    }
}

/// Mean-centered PCA of the rows of `data` via the D × D covariance.
pub fn pca(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = data.len();
    if n <= k || k == 0 {
        return Err(Error::Invalid(format!(
            "PCA needs more rows ({n}) than components ({k}) and k >= 1"
        )));
    }
    let d = data[0].len();
    if k > d {
        return Err(Error::Invalid(format!(
            "cannot take {k} components of {d}-dim data"
        )));
    }
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean = x.row_mean();
    let mut xc = x;
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let cov = (xc.transpose() * &xc) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let projections: Vec<Vec<f64>> = xc
        .row_iter()
        .map(|row| {
            components
                .iter()
                .map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let mut rgb = projections.clone();
    for c in 0..k {
        let lo = projections
            .iter()
            .map(|p| p[c])
            .fold(f64::INFINITY, f64::min);
        let hi = projections
            .iter()
            .map(|p| p[c])
            .fold(f64::NEG_INFINITY, f64::max);
        for row in &mut rgb {
            row[c] = if hi > lo {
                (row[c] - lo) / (hi - lo)
            } else {
                0.5
            };
        }
    }
    Ok(Pca {
        mean: mean.iter().copied().collect(),
        components,
        eigenvalues,
        projections,
        rgb,
    })
}

pub fn pca_export(store: &EmbeddingStore, k: usize) -> Result<Pca> {
    let m = store.matrix()?;
    let rows: Vec<Vec<f64>> = (0..m.rows()).map(|i| m.row(i).to_vec()).collect();
    pca(&rows, k)
}
