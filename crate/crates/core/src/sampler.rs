//! Spatially balanced dataset construction: temporal split, geocell
//! partition, per-cell farthest point sampling with a minimum separation,
//! and removal of sparse cells.
//!
//! Manifests are CSV with a provenance comment line:
//!
//! ```text
//! # config_hash=<hex> seed=<int> level=16 budget=120 min_sep_m=40 min_count=5
//! id,lat,lon,timestamp,cell_id
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{cell_of, haversine_distance, CellId, GeoCoordinate, MAX_LEVEL};
use crate::io::{atomic_write, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub id: u64,
    pub coord: GeoCoordinate,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub level: u8,
    pub budget: usize,
    pub min_sep_m: f64,
    pub min_count: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub eval_year: i32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            level: 16,
            budget: 120,
            min_sep_m: 40.0,
            min_count: 5,
            first_year: 2017,
            last_year: 2024,
            eval_year: 2023,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level > MAX_LEVEL {
            return Err(Error::Config(format!("level {} > {MAX_LEVEL}", self.level)));
        }
        if self.budget < 1 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if !(self.min_sep_m > 0.0 && self.min_sep_m.is_finite()) {
            return Err(Error::Config(format!(
                "min_sep must be positive, got {}",
                self.min_sep_m
            )));
        }
        if !(self.first_year..=self.last_year).contains(&self.eval_year) {
            return Err(Error::Config(
                "eval_year must lie within the year range".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_hex(text.as_bytes()))
    }
}

/// Observations grouped by containing cell; empty cells are absent.
pub fn partition(obs: &[Observation], level: u8) -> Result<BTreeMap<CellId, Vec<Observation>>> {
    let mut map: BTreeMap<CellId, Vec<Observation>> = BTreeMap::new();
    for o in obs {
        map.entry(cell_of(o.coord, level)?).or_default().push(*o);
    }
    Ok(map)
}

/// Greedy farthest point sampling under the haversine metric.
///
/// Starts from the smallest id, then repeatedly adds the point farthest from
/// the selected set (ties to the smaller id). Stops at `budget` points or when
/// the best candidate is closer than `min_sep_m`. Returns selection order.
pub fn fps_select(points: &[Observation], budget: usize, min_sep_m: f64) -> Vec<Observation> {
    let Some(start) = (0..points.len()).min_by_key(|&i| points[i].id) else {
        return Vec::new();
    };
    let mut selected = vec![points[start]];
    let mut taken = vec![false; points.len()];
    taken[start] = true;
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| haversine_distance(p.coord, points[start].coord))
        .collect();
    while selected.len() < budget {
        let mut best: Option<usize> = None;
        for i in (0..points.len()).filter(|&i| !taken[i]) {
            best = match best {
                Some(b)
                    if nearest[b] > nearest[i]
                        || (nearest[b] == nearest[i] && points[b].id < points[i].id) =>
                {
                    Some(b)
                }
                _ => Some(i),
            };
        }
        let Some(b) = best else { break };
        if nearest[b] < min_sep_m {
            break;
        }
        taken[b] = true;
        selected.push(points[b]);
        for i in 0..points.len() {
            if !taken[i] {
                nearest[i] = nearest[i].min(haversine_distance(points[i].coord, points[b].coord));
            }
        }
    }
    selected
}

/// Drops buckets holding fewer than `min_count` observations.
pub fn filter_cells(
    mut buckets: BTreeMap<CellId, Vec<Observation>>,
    min_count: usize,
) -> BTreeMap<CellId, Vec<Observation>> {
    buckets.retain(|_, v| v.len() >= min_count);
    buckets
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub train: Vec<Observation>,
    pub eval: Vec<Observation>,
    /// Observations outside the configured years.
    pub dropped: usize,
}

/// Eval gets `eval_year`; train gets the other years of the range. Years are
/// calendar years in UTC.
pub fn temporal_split(obs: &[Observation], cfg: &SamplerConfig) -> TemporalSplit {
    let mut out = TemporalSplit {
        train: Vec::new(),
        eval: Vec::new(),
        dropped: 0,
    };
    for o in obs {
        match Utc.timestamp_opt(o.timestamp, 0).single().map(|t| t.year()) {
            Some(y) if y == cfg.eval_year => out.eval.push(*o),
            Some(y) if (cfg.first_year..=cfg.last_year).contains(&y) => out.train.push(*o),
            _ => out.dropped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: u64,
    pub coord: GeoCoordinate,
    pub timestamp: i64,
    pub cell: CellId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub split: Split,
    /// Sorted by (cell, id).
    pub records: Vec<ManifestRecord>,
    pub config_hash: String,
    pub seed: u64,
    pub config: SamplerConfig,
}

impl SampleManifest {
    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Record counts per cell.
    pub fn cell_counts(&self) -> BTreeMap<CellId, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.cell).or_insert(0) += 1;
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "# config_hash={} seed={} split={} level={} budget={} min_sep_m={} min_count={}\n",
            self.config_hash, self.seed, self.split, c.level, c.budget, c.min_sep_m, c.min_count
        );
        out.push_str("id,lat,lon,timestamp,cell_id\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.12},{:.12},{},{}\n",
                r.id,
                r.coord.lat(),
                r.coord.lon(),
                r.timestamp,
                r.cell
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        let prov = first.strip_prefix("# ").ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing provenance comment".into(),
        })?;
        let fields: BTreeMap<&str, &str> = prov
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let field = |k: &str| -> Result<&str> {
            fields.get(k).copied().ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("provenance lacks {k}"),
            })
        };
        let num = |k: &str| -> Result<f64> {
            field(k)?.parse::<f64>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("{k}: {e}"),
            })
        };
        let config = SamplerConfig {
            level: num("level")? as u8,
            budget: num("budget")? as usize,
            min_sep_m: num("min_sep_m")?,
            min_count: num("min_count")? as usize,
            ..Default::default()
        };
        let split = field("split")?.parse::<Split>().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        let seed = num("seed")? as u64;
        let config_hash = field("config_hash")?.to_string();
        let body: String = lines.map(|l| format!("{l}\n")).collect();
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let want = ["id", "lat", "lon", "timestamp", "cell_id"];
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        if header.iter().collect::<Vec<_>>() != want {
            return Err(Error::Parse {
                line: 2,
                msg: format!("expected header {}", want.join(",")),
            });
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_error(e, 1))?;
            let line = row.position().map_or(0, |p| p.line() + 1) as usize;
            let bad = |msg: String| Error::Parse { line, msg };
            let id = row[0].parse::<u64>().map_err(|e| bad(format!("id: {e}")))?;
            let lat = row[1]
                .parse::<f64>()
                .map_err(|e| bad(format!("lat: {e}")))?;
            let lon = row[2]
                .parse::<f64>()
                .map_err(|e| bad(format!("lon: {e}")))?;
            let timestamp = row[3]
                .parse::<i64>()
                .map_err(|e| bad(format!("timestamp: {e}")))?;
            let cell = row[4].parse::<CellId>().map_err(|e| bad(e.to_string()))?;
            let coord = GeoCoordinate::new(lat, lon).map_err(|e| bad(e.to_string()))?;
            records.push(ManifestRecord {
                id,
                coord,
                timestamp,
                cell,
            });
        }
        Ok(Self {
            split,
            records,
            config_hash,
            seed,
            config,
        })
    }
}

fn csv_error(e: csv::Error, offset: u64) -> Error {
    let line = e.position().map_or(0, |p| p.line() + offset);
    Error::Parse {
        line: line as usize,
        msg: e.to_string(),
    }
}

/// Reads observations from CSV with header `id,lat,lon,timestamp`.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(e, 0))?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column {name:?}"),
            })
    };
    let (ci, cla, clo, ct) = (col("id")?, col("lat")?, col("lon")?, col("timestamp")?);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map_or(0, |p| p.line()) as usize;
        let bad = |msg: String| Error::Parse { line, msg };
        let get = |i: usize| row.get(i).ok_or_else(|| bad(format!("missing field {i}")));
        let id = get(ci)?
            .parse::<u64>()
            .map_err(|e| bad(format!("id: {e}")))?;
        let lat = get(cla)?
            .parse::<f64>()
            .map_err(|e| bad(format!("lat: {e}")))?;
        let lon = get(clo)?
            .parse::<f64>()
            .map_err(|e| bad(format!("lon: {e}")))?;
        let timestamp = get(ct)?
            .parse::<i64>()
            .map_err(|e| bad(format!("timestamp: {e}")))?;
        let coord = GeoCoordinate::new(lat, lon).map_err(|e| bad(e.to_string()))?;
        out.push(Observation {
            id,
            coord,
            timestamp,
        });
    }
    Ok(out)
}

pub fn observations_to_csv(obs: &[Observation]) -> String {
    let mut out = String::from("id,lat,lon,timestamp\n");
    for o in obs {
        out.push_str(&format!(
            "{},{:.12},{:.12},{}\n",
            o.id,
            o.coord.lat(),
            o.coord.lon(),
            o.timestamp
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub train: SampleManifest,
    pub eval: SampleManifest,
    pub dropped_by_year: usize,
}

fn select_split(obs: &[Observation], cfg: &SamplerConfig) -> Result<Vec<ManifestRecord>> {
    let buckets = partition(obs, cfg.level)?;
    let selected: BTreeMap<CellId, Vec<Observation>> = buckets
        .into_iter()
        .map(|(cell, pts)| (cell, fps_select(&pts, cfg.budget, cfg.min_sep_m)))
        .collect();
    let mut records: Vec<ManifestRecord> = filter_cells(selected, cfg.min_count)
        .into_iter()
        .flat_map(|(cell, pts)| {
            pts.into_iter().map(move |o| ManifestRecord {
                id: o.id,
                coord: o.coord,
                timestamp: o.timestamp,
                cell,
            })
        })
        .collect();
    records.sort_by_key(|r| (r.cell, r.id));
    Ok(records)
}

/// temporal split → partition → per-cell FPS → cell filter, per split.
pub fn build_manifest(obs: &[Observation], cfg: &SamplerConfig, seed: u64) -> Result<SampleOutput> {
    cfg.validate()?;
    let mut ids: Vec<u64> = obs.iter().map(|o| o.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("duplicate observation id {}", w[0])));
    }
    let split = temporal_split(obs, cfg);
    let hash = cfg.hash()?;
    let manifest = |s: Split, o: &[Observation]| -> Result<SampleManifest> {
        Ok(SampleManifest {
            split: s,
            records: select_split(o, cfg)?,
            config_hash: hash.clone(),
            seed,
            config: cfg.clone(),
        })
    };
    Ok(SampleOutput {
        train: manifest(Split::Train, &split.train)?,
        eval: manifest(Split::Eval, &split.eval)?,
        dropped_by_year: split.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_M;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const M_PER_DEG: f64 = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;

    fn obs(id: u64, lat: f64, lon: f64, ts: i64) -> Observation {
        Observation {
            id,
            coord: GeoCoordinate::new(lat, lon).unwrap(),
            timestamp: ts,
        }
    }

    /// Greedy FPS recomputing every minimum distance from scratch.
    fn brute_fps(points: &[Observation], budget: usize, min_sep: f64) -> Vec<u64> {
        if points.is_empty() {
            return vec![];
        }
        let mut sel: Vec<Observation> = vec![*points.iter().min_by_key(|p| p.id).unwrap()];
        while sel.len() < budget {
            let mut best: Option<(f64, u64, Observation)> = None;
            for p in points {
                if sel.iter().any(|s| s.id == p.id) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|s| haversine_distance(s.coord, p.coord))
                    .fold(f64::INFINITY, f64::min);
                let better = match best {
                    None => true,
                    Some((bd, bid, _)) => d > bd || (d == bd && p.id < bid),
                };
                if better {
                    best = Some((d, p.id, *p));
                }
            }
            match best {
                Some((d, _, p)) if d >= min_sep => sel.push(p),
                _ => break,
            }
        }
        sel.iter().map(|s| s.id).collect()
    }

    #[test]
    fn partition_basics() {
        assert!(partition(&[], 16).unwrap().is_empty());
        let cell = cell_of(GeoCoordinate::new(40.0, -100.0).unwrap(), 16).unwrap();
        let c = crate::geo::cell_centroid(cell).unwrap();
        let tight: Vec<Observation> = (0..10)
            .map(|i| obs(i, c.lat() + i as f64 * 1e-6, c.lon(), 0))
            .collect();
        assert_eq!(partition(&tight, 16).unwrap().len(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scattered: Vec<Observation> = (0..1000)
            .map(|i| {
                obs(
                    i,
                    rng.random_range(30.0..31.0),
                    rng.random_range(-90.0..-89.0),
                    0,
                )
            })
            .collect();
        let parts = partition(&scattered, 12).unwrap();
        let mut back: Vec<u64> = parts.values().flatten().map(|o| o.id).collect();
        back.sort();
        assert_eq!(back, (0..1000).collect::<Vec<_>>());
        for (cell, pts) in &parts {
            assert!(pts.iter().all(|o| cell_of(o.coord, 12).unwrap() == *cell));
        }
    }

    #[test]
    fn fps_small_cases() {
        let one = [obs(5, 1.0, 1.0, 0)];
        assert_eq!(fps_select(&one, 120, 40.0), one);
        let step = 50.0 / M_PER_DEG;
        let line = [
            obs(2, 0.0, step, 0),
            obs(0, 0.0, 0.0, 0),
            obs(1, 0.0, 2.0 * step, 0),
        ];
        let ids: Vec<u64> = fps_select(&line, 2, 40.0).iter().map(|o| o.id).collect();
        assert_eq!(ids, [0, 1]);
        assert!(fps_select(&[], 3, 40.0).is_empty());
    }

    #[test]
    fn dense_disc_yields_one_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 35 m diameter disc: every pair is closer than 40 m
        let r_deg = 17.5 / M_PER_DEG;
        let pts: Vec<Observation> = (0..30)
            .map(|i| {
                let (a, r): (f64, f64) = (
                    rng.random_range(0.0..std::f64::consts::TAU),
                    r_deg * rng.random::<f64>().sqrt(),
                );
                obs(
                    i,
                    10.0 + r * a.sin(),
                    20.0 + r * a.cos() / 10f64.to_radians().cos(),
                    0,
                )
            })
            .collect();
        assert_eq!(fps_select(&pts, 120, 40.0).len(), 1);
    }

    #[test]
    fn fps_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in 0..100 {
            let n = rng.random_range(1..=200);
            let spread = rng.random_range(0.0005..0.01);
            let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
            ids.shuffle(&mut rng);
            let pts: Vec<Observation> = (0..n)
                .map(|i| {
                    obs(
                        ids[i],
                        45.0 + rng.random_range(0.0..spread),
                        7.0 + rng.random_range(0.0..spread),
                        0,
                    )
                })
                .collect();
            let budget = rng.random_range(1..=130);
            let got: Vec<u64> = fps_select(&pts, budget, 40.0)
                .iter()
                .map(|o| o.id)
                .collect();
            assert_eq!(got, brute_fps(&pts, budget, 40.0), "instance {inst}");
        }
    }

    #[test]
    fn filter_boundary() {
        let mut m = BTreeMap::new();
        let a = CellId::new(2, 0, 0).unwrap();
        let b = CellId::new(2, 1, 0).unwrap();
        m.insert(a, vec![obs(0, 0.0, 0.0, 0); 4]);
        m.insert(b, vec![obs(0, 0.0, 0.0, 0); 5]);
        let f = filter_cells(m, 5);
        assert_eq!(f.keys().collect::<Vec<_>>(), [&b]);
        assert!(filter_cells(BTreeMap::new(), 5).is_empty());
    }

    #[test]
    fn temporal_boundaries() {
        let cfg = SamplerConfig::default();
        let t2023 = 1_672_531_200; // 2023-01-01T00:00:00Z
        let o = [
            obs(0, 0.0, 0.0, t2023),
            obs(1, 0.0, 0.0, t2023 + 160 * 86_400),
            obs(2, 0.0, 0.0, t2023 - 1),
            obs(3, 0.0, 0.0, 1_460_000_000), // 2016
            obs(4, 0.0, 0.0, 1_735_689_600), // 2025-01-01
        ];
        let s = temporal_split(&o, &cfg);
        assert_eq!(s.eval.iter().map(|o| o.id).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(s.train.iter().map(|o| o.id).collect::<Vec<_>>(), [2]);
        assert_eq!(s.dropped, 2);
    }

    fn synthetic_obs(n: usize, seed: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // clustered in a few small neighborhoods so cells are populated
        let centers: Vec<(f64, f64)> = (0..8)
            .map(|_| {
                (
                    rng.random_range(30.0..45.0),
                    rng.random_range(-120.0..-75.0),
                )
            })
            .collect();
        (0..n)
            .map(|i| {
                let (la, lo) = centers[i % centers.len()];
                let ts = rng.random_range(1_451_606_400..1_767_225_600); // 2016..2026
                obs(
                    i as u64,
                    la + rng.random_range(0.0..0.02),
                    lo + rng.random_range(0.0..0.02),
                    ts,
                )
            })
            .collect()
    }

    #[test]
    fn manifest_invariants_hold() {
        let o = synthetic_obs(10_000, 4);
        let cfg = SamplerConfig::default();
        let out = build_manifest(&o, &cfg, 11).unwrap();
        assert!(out.dropped_by_year > 0);
        assert!(!out.train.records.is_empty() && !out.eval.records.is_empty());
        for m in [&out.train, &out.eval] {
            for (cell, count) in m.cell_counts() {
                assert!(
                    (cfg.min_count..=cfg.budget).contains(&count),
                    "{cell}: {count}"
                );
                let pts: Vec<&ManifestRecord> =
                    m.records.iter().filter(|r| r.cell == cell).collect();
                for i in 0..pts.len() {
                    assert_eq!(cell_of(pts[i].coord, cfg.level).unwrap(), cell);
                    for j in 0..i {
                        assert!(haversine_distance(pts[i].coord, pts[j].coord) >= cfg.min_sep_m);
                    }
                }
            }
            assert!(m
                .records
                .windows(2)
                .all(|w| (w[0].cell, w[0].id) < (w[1].cell, w[1].id)));
        }
        let train: std::collections::BTreeSet<u64> = out.train.ids().into_iter().collect();
        assert!(out.eval.ids().iter().all(|i| !train.contains(i)));
        let again = build_manifest(&o, &cfg, 11).unwrap();
        assert_eq!(again.train.to_csv(), out.train.to_csv());
        assert_eq!(again.eval.to_csv(), out.eval.to_csv());
    }

    #[test]
    fn empty_input_and_config_errors() {
        let out = build_manifest(&[], &SamplerConfig::default(), 0).unwrap();
        assert!(out.train.records.is_empty() && out.eval.records.is_empty());
        let bad = SamplerConfig {
            budget: 0,
            ..Default::default()
        };
        assert!(build_manifest(&[], &bad, 0).is_err());
        let bad = SamplerConfig {
            min_sep_m: 0.0,
            ..Default::default()
        };
        assert!(build_manifest(&[], &bad, 0).is_err());
    }

    #[test]
    fn manifest_csv_round_trip_and_provenance() {
        let out = build_manifest(&synthetic_obs(3000, 5), &SamplerConfig::default(), 42).unwrap();
        let text = out.train.to_csv();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# config_hash="));
        assert!(first.contains(" seed=42 "));
        assert!(first.contains("level=16 budget=120 min_sep_m=40 min_count=5"));
        let back = SampleManifest::from_csv(&text).unwrap();
        assert_eq!(back.ids(), out.train.ids());
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "id,lat,lon,timestamp\n1,10.0,20.0,0\n2,abc,20.0,0\n";
        match read_observations(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "id,lat,lon,timestamp\n1,95.0,20.0,0\n";
        assert!(matches!(
            read_observations(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let o = synthetic_obs(20, 6);
        assert_eq!(
            read_observations(observations_to_csv(&o).as_bytes())
                .unwrap()
                .len(),
            20
        );
    }
}
