//! Command-line front end: dataset synthesis, sampling, training, encoding,
//! retrieval evaluation, depth ablation, probing and PCA export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use geoalign::eval::{
    acc_at_distance, build_similarity, covering_cells, ensemble, geocell_accuracy,
    geocell_retrieve, linear_probe, pca_export, top1_localize, EmbeddingStore, ProbeTargets,
    ProbeTask, RetrievalReport, DEFAULT_RADIUS_M, DEFAULT_RIDGE,
};
use geoalign::geo::GeoCoordinate;
use geoalign::io::{atomic_write, file_sha256};
use geoalign::modality::ModalityId;
use geoalign::model::Model;
use geoalign::sampler::{
    build_manifest, read_observations, Observation, SampleManifest, SamplerConfig,
};
use geoalign::synth::{
    decode_dataset, gen_dataset, gen_revisits, read_dataset, write_dataset, BBox, LatentField,
    MultimodalSample, SynthConfig, DATASET_MAGIC,
};
use geoalign::train::{train, RunConfig, TrainReport};
use geoalign::Error;

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "geoalign",
    version,
    about = "Multimodal geospatial embedding alignment"
)]
pub struct Cli {
    /// Maximum worker threads. Every command currently runs on one.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset.
    Synth(SynthArgs),
    /// Build spatially balanced train/eval manifests.
    Sample(SampleArgs),
    /// Train the encoders with the multi-way contrastive loss.
    Train(TrainArgs),
    /// Embed one modality of a dataset.
    Encode(EncodeArgs),
    /// Street-view retrieval against one or more galleries.
    Eval(EvalArgs),
    /// Train one model per location-encoder depth and compare retrieval.
    AblateDepth(AblateArgs),
    /// Linear probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Export the top principal components of a store.
    Pca(PcaArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// min_lon,min_lat,max_lon,max_lat
    #[arg(long, default_value_t = BBox::CONUS)]
    pub bbox: BBox,
    /// Drives locations, timestamps and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Drives the latent field; keep it fixed to draw held-out data from the same world.
    #[arg(long, default_value_t = 0)]
    pub field_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub first_id: u64,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Re-observe the locations of this dataset (fresh noise and timestamps)
    /// instead of drawing new ones; `--n` and `--bbox` are then ignored.
    #[arg(long)]
    pub revisit: Option<PathBuf>,
    /// Calendar year of revisit timestamps.
    #[arg(long, default_value_t = 2023)]
    pub year: i32,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the observation CSV `id,lat,lon,timestamp`.
    #[arg(long)]
    pub observations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Observation CSV or synthetic dataset file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub level: u8,
    #[arg(long, default_value_t = 120)]
    pub budget: usize,
    /// Minimum separation in metres.
    #[arg(long, default_value_t = 40.0)]
    pub min_sep: f64,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    /// Recorded in the manifests; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving train.csv and eval.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Run-config overrides shared by train and ablate-depth.
#[derive(Debug, Clone, Default, Args)]
pub struct RunOverrides {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub registers: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub self_pairs: Option<bool>,
    /// Comma separated subset of street,aerial,dsm,text,gps.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<ModalityId>>,
}

impl RunOverrides {
    pub fn resolve(&self) -> geoalign::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.data.dataset = Some(v.clone());
        }
        if let Some(v) = &self.manifest {
            cfg.data.manifest = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.dim {
            cfg.model.coord.dim = v;
        }
        if let Some(v) = self.depth {
            cfg.model.coord.depth = v;
        }
        if let Some(v) = self.registers {
            cfg.model.coord.registers = v;
        }
        if let Some(v) = self.temperature {
            cfg.model.loss.temperature = v;
        }
        if let Some(v) = self.self_pairs {
            cfg.model.loss.include_self_pairs = v;
        }
        if let Some(v) = &self.modalities {
            cfg.model.modalities = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with `.loss.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub modality: ModalityId,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Street-view (or other) query store.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, num_args = 1..)]
    pub gallery: Vec<PathBuf>,
    /// Also score the mean of the gallery similarity matrices.
    #[arg(long)]
    pub ensemble: bool,
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    pub radius: f64,
    /// Retrieve against encoded cell centroids instead of galleries.
    #[arg(long, requires = "checkpoint")]
    pub geocell: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub level: u8,
    /// Write the report as TOML.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long, value_delimiter = ',', default_value = "0,4,8,12")]
    pub depths: Vec<usize>,
    /// Training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Held-out dataset used for retrieval.
    #[arg(long)]
    pub eval_dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    pub radius: f64,
    /// Table CSV `depth,seed,target,accuracy`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Regression,
    Classification,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// CSV `id,target`.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ProbeKind,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// CSV `id,lat,lon,pc1,pc2,pc3`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command, printing to `out`. Returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> geoalign::Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let text = match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Sample(a) => cmd_sample(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Encode(a) => cmd_encode(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::AblateDepth(a) => cmd_ablate_depth(a)?,
        Command::Probe(a) => cmd_probe(a)?,
        Command::Pca(a) => cmd_pca(a)?,
    };
    out.write_all(text.as_bytes())?;
    Ok(())
}

fn hash_line(label: &str, path: &Path) -> geoalign::Result<String> {
    Ok(format!(
        "{label} {} sha256={}\n",
        path.display(),
        file_sha256(path)?
    ))
}

pub fn cmd_synth(a: &SynthArgs) -> geoalign::Result<String> {
    let mut cfg = SynthConfig::default();
    if let Some(n) = a.noise {
        cfg.noise_scale = n;
    }
    let field = LatentField::new(a.field_seed, cfg)?;
    let ds = match &a.revisit {
        Some(p) => {
            let coords: Vec<GeoCoordinate> =
                read_dataset(p)?.samples.iter().map(|s| s.coord).collect();
            gen_revisits(&field, &coords, a.year, a.seed, a.first_id)
        }
        None => gen_dataset(&field, a.n, &a.bbox, a.seed, a.first_id)?,
    };
    write_dataset(&ds, &a.out)?;
    let mut s = format!("samples {}\n", ds.len());
    s += &hash_line("dataset", &a.out)?;
    if let Some(p) = &a.observations {
        let obs: Vec<Observation> = ds.samples.iter().map(sample_observation).collect();
        atomic_write(p, geoalign::sampler::observations_to_csv(&obs).as_bytes())?;
        s += &hash_line("observations", p)?;
    }
    Ok(s)
}

fn sample_observation(s: &MultimodalSample) -> Observation {
    Observation {
        id: s.id,
        coord: s.coord,
        timestamp: s.timestamp,
    }
}

/// Reads a synthetic dataset file or an observation CSV, by magic bytes.
pub fn load_observations(path: &Path) -> geoalign::Result<Vec<Observation>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        Ok(decode_dataset(&bytes)?
            .samples
            .iter()
            .map(sample_observation)
            .collect())
    } else {
        read_observations(bytes.as_slice())
    }
}

pub fn cmd_sample(a: &SampleArgs) -> geoalign::Result<String> {
    let cfg = SamplerConfig {
        level: a.level,
        budget: a.budget,
        min_sep_m: a.min_sep,
        min_count: a.min_count,
        ..Default::default()
    };
    cfg.validate()?;
    let obs = load_observations(&a.input)?;
    let result = build_manifest(&obs, &cfg, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut s = format!(
        "observations {} outside_years {} config_hash {}\n",
        obs.len(),
        result.dropped_by_year,
        result.train.config_hash
    );
    for (name, m) in [("train", &result.train), ("eval", &result.eval)] {
        let path = a.out_dir.join(format!("{name}.csv"));
        m.save(&path)?;
        let counts: Vec<usize> = m.cell_counts().into_values().collect();
        let (min, max) = (counts.iter().min(), counts.iter().max());
        writeln!(
            s,
            "{name}: records {} cells {} per_cell_min {} per_cell_max {}",
            m.records.len(),
            counts.len(),
            min.map_or("-".into(), |v| v.to_string()),
            max.map_or("-".into(), |v| v.to_string())
        )
        .expect("string write");
        s += &hash_line(name, &path)?;
    }
    Ok(s)
}

/// Dataset samples restricted to the run's manifest ids, if any.
pub fn training_samples(cfg: &RunConfig) -> geoalign::Result<Vec<MultimodalSample>> {
    let path = cfg
        .data
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given (--dataset or data.dataset)".into()))?;
    let ds = read_dataset(path)?;
    let Some(mpath) = &cfg.data.manifest else {
        return Ok(ds.samples);
    };
    let manifest = SampleManifest::load(mpath)?;
    let wanted: BTreeSet<u64> = manifest.ids().into_iter().collect();
    let samples: Vec<MultimodalSample> = ds
        .samples
        .into_iter()
        .filter(|s| wanted.contains(&s.id))
        .collect();
    if samples.len() != wanted.len() {
        return Err(Error::Invalid(format!(
            "manifest lists {} ids but only {} are in the dataset",
            wanted.len(),
            samples.len()
        )));
    }
    Ok(samples)
}

/// Builds and trains a model for `cfg`, optionally logging per-step losses.
pub fn train_run(
    cfg: &RunConfig,
    samples: &[MultimodalSample],
    log: Option<&mut dyn std::io::Write>,
) -> geoalign::Result<(Model, TrainReport)> {
    let hash = cfg.hash()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.set_config_hash(&hash);
    let report = train(&mut model, samples, &cfg.train, cfg.seed, &hash, log)?;
    Ok((model, report))
}

pub fn cmd_train(a: &TrainArgs) -> geoalign::Result<String> {
    let cfg = a.run.resolve()?;
    let hash = cfg.hash()?;
    let samples = training_samples(&cfg)?;
    let mut log: Vec<u8> = Vec::new();
    writeln!(log, "# config_hash={hash} seed={}", cfg.seed)?;
    let (model, report) = train_run(&cfg, &samples, Some(&mut log))?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    model.save(&a.out)?;
    atomic_write(&log_path, &log)?;
    let mut s = format!(
        "config_hash {hash}\nsamples {}\nsteps {}\n",
        samples.len(),
        report.losses.len()
    );
    if let (Some(first), Some(last)) = (report.initial_loss(), report.final_loss()) {
        writeln!(s, "initial_loss {first:.6}\nfinal_loss {last:.6}").expect("string write");
    }
    writeln!(
        s,
        "ln_batch {:.6}\ntemperature {:.6}",
        (report.batch_size as f64).ln(),
        report.temperature
    )
    .expect("string write");
    s += &hash_line("checkpoint", &a.out)?;
    s += &hash_line("loss_log", &log_path)?;
    Ok(s)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Embeds one modality of `samples` into a store stamped with the model's config hash.
pub fn encode_store(
    model: &Model,
    m: ModalityId,
    samples: &[MultimodalSample],
) -> geoalign::Result<EmbeddingStore> {
    if !model.has_modality(m) {
        return Err(Error::Invalid(format!("checkpoint has no {m} encoder")));
    }
    let vectors = model.embed(m, samples)?;
    Ok(EmbeddingStore::from_samples(m, samples, &vectors)?.with_config_hash(model.config_hash()))
}

pub fn cmd_encode(a: &EncodeArgs) -> geoalign::Result<String> {
    let model = Model::load(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    let store = encode_store(&model, a.modality, &ds.samples)?;
    store.save(&a.out)?;
    Ok(format!(
        "modality {} records {} dim {}\nconfig_hash {}\n{}",
        a.modality,
        store.len(),
        store.dim(),
        model.config_hash(),
        hash_line("store", &a.out)?
    ))
}

/// Top-1 Acc@radius of `query` against each gallery, keyed by gallery
/// modality, plus `ensemble` over all galleries when requested.
pub fn retrieval_scores(
    query: &EmbeddingStore,
    galleries: &[EmbeddingStore],
    radius_m: f64,
    with_ensemble: bool,
) -> geoalign::Result<Vec<(String, f64)>> {
    if galleries.is_empty() {
        return Err(Error::Config("at least one gallery is required".into()));
    }
    let truths = query.coords();
    let mut mats = Vec::with_capacity(galleries.len());
    let mut rows = Vec::new();
    for g in galleries {
        if g.dim() != query.dim() {
            return Err(Error::Invalid(format!(
                "gallery {} has dim {}, query has {}",
                g.modality(),
                g.dim(),
                query.dim()
            )));
        }
        let sim = build_similarity(query, g)?;
        let acc = acc_at_distance(&top1_localize(&sim, g)?, &truths, radius_m)?;
        rows.push((g.modality().to_string(), acc));
        mats.push(sim);
    }
    if with_ensemble {
        if galleries.iter().any(|g| g.ids() != galleries[0].ids()) {
            return Err(Error::Invalid(
                "ensemble galleries must hold the same ids".into(),
            ));
        }
        let sim = ensemble(&mats)?;
        let acc = acc_at_distance(&top1_localize(&sim, &galleries[0])?, &truths, radius_m)?;
        rows.push(("ensemble".into(), acc));
    }
    Ok(rows)
}

/// Encodes a held-out dataset with every modality of `model` and scores
/// street queries against all other modalities and their ensemble.
pub fn evaluate_model(
    model: &Model,
    samples: &[MultimodalSample],
    radius_m: f64,
) -> geoalign::Result<Vec<(String, f64)>> {
    let query = encode_store(model, ModalityId::Street, samples)?;
    let galleries = model
        .config()
        .canonical_modalities()
        .into_iter()
        .filter(|&m| m != ModalityId::Street)
        .map(|m| encode_store(model, m, samples))
        .collect::<geoalign::Result<Vec<_>>>()?;
    retrieval_scores(&query, &galleries, radius_m, galleries.len() > 1)
}

pub fn cmd_eval(a: &EvalArgs) -> geoalign::Result<String> {
    if a.radius.is_nan() || a.radius <= 0.0 {
        return Err(Error::Config(format!(
            "radius must be positive, got {}",
            a.radius
        )));
    }
    let query = EmbeddingStore::load(&a.query)?;
    let hash = query.config_hash().to_string();
    let mut reports = Vec::new();
    if a.geocell {
        let model = Model::load(a.checkpoint.as_ref().expect("clap requires checkpoint"))?;
        let encoder = model
            .coord_encoder()
            .ok_or_else(|| Error::Invalid("checkpoint has no gps encoder".into()))?;
        if encoder.config().dim != query.dim() {
            return Err(Error::Invalid(format!(
                "query dim {} vs encoder dim {}",
                query.dim(),
                encoder.config().dim
            )));
        }
        let truths = query.coords();
        let cells = covering_cells(&truths, a.level)?;
        let preds = geocell_retrieve(&query, &cells, encoder, model.store())?;
        reports.push(RetrievalReport {
            task: format!("{}->geocell{}", query.modality(), a.level),
            radius_m: f64::NAN,
            accuracy: geocell_accuracy(&preds, &truths)?,
            n_queries: query.len(),
            config_hash: hash.clone(),
        });
    }
    let galleries = a
        .gallery
        .iter()
        .map(|p| EmbeddingStore::load(p))
        .collect::<geoalign::Result<Vec<_>>>()?;
    if !galleries.is_empty() {
        for (target, acc) in retrieval_scores(&query, &galleries, a.radius, a.ensemble)? {
            reports.push(RetrievalReport {
                task: format!("{}->{target}", query.modality()),
                radius_m: a.radius,
                accuracy: acc,
                n_queries: query.len(),
                config_hash: hash.clone(),
            });
        }
    } else if !a.geocell {
        return Err(Error::Config("give --gallery stores or --geocell".into()));
    }
    let mut s = String::new();
    for r in &reports {
        writeln!(s, "{} acc {:.4} n {}", r.task, r.accuracy, r.n_queries).expect("string write");
    }
    if let Some(p) = &a.out {
        let mut text = String::new();
        for r in &reports {
            text += "[[report]]\n";
            text += &r.to_text()?;
        }
        atomic_write(p, text.as_bytes())?;
        s += &hash_line("report", p)?;
    }
    Ok(s)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_ablate_depth(a: &AblateArgs) -> geoalign::Result<String> {
    if a.depths.is_empty() {
        return Err(Error::Config("no depths given".into()));
    }
    let base = a.run.resolve()?;
    let samples = training_samples(&base)?;
    let held_out = read_dataset(&a.eval_dataset)?.samples;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let mut csv = String::from("depth,seed,target,accuracy\n");
    let mut by_depth: BTreeMap<usize, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for &depth in &a.depths {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.coord.depth = depth;
            let (model, _) = train_run(&cfg, &samples, None)?;
            for (target, acc) in evaluate_model(&model, &held_out, a.radius)? {
                writeln!(csv, "{depth},{seed},{target},{acc}").expect("string write");
                by_depth
                    .entry(depth)
                    .or_default()
                    .entry(target)
                    .or_default()
                    .push(acc);
            }
        }
    }
    atomic_write(&a.out, csv.as_bytes())?;
    let mut s = format!(
        "seeds {}\n",
        seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    for (depth, targets) in &mut by_depth {
        let cols: Vec<String> = targets
            .iter_mut()
            .map(|(t, v)| format!("{t} {:.4}", median(v)))
            .collect();
        writeln!(s, "depth {depth} median {}", cols.join(" ")).expect("string write");
    }
    let mut gps_median = |d: usize| {
        by_depth
            .get_mut(&d)
            .and_then(|t| t.get_mut("gps"))
            .map(|v| median(v))
    };
    if let (Some(d4), Some(d0)) = (gps_median(4), gps_median(0)) {
        writeln!(s, "depth4_ge_depth0 {}", d4 >= d0).expect("string write");
    }
    s += &hash_line("table", &a.out)?;
    Ok(s)
}

/// Reads `id,target` rows.
pub fn read_targets(path: &Path) -> geoalign::Result<BTreeMap<u64, String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line()) as usize;
        if row.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "expected id,target".into(),
            });
        }
        let id = row[0].parse::<u64>().map_err(|e| Error::Parse {
            line,
            msg: format!("id: {e}"),
        })?;
        out.insert(id, row[1].to_string());
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            msg: e.to_string(),
        },
        None => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            k => Error::Invalid(format!("{k:?}")),
        },
    }
}

pub fn cmd_probe(a: &ProbeArgs) -> geoalign::Result<String> {
    let store = EmbeddingStore::load(&a.store)?;
    let targets = read_targets(&a.targets)?;
    if targets.len() != store.len() {
        return Err(Error::Invalid(format!(
            "store has {} rows, targets file {}",
            store.len(),
            targets.len()
        )));
    }
    let mut features = Vec::with_capacity(store.len());
    let mut raw = Vec::with_capacity(store.len());
    for r in store.records() {
        let t = targets
            .get(&r.id)
            .ok_or_else(|| Error::Invalid(format!("no target for id {}", r.id)))?;
        features.push(r.vector.iter().map(|&v| v as f64).collect::<Vec<f64>>());
        raw.push(t.as_str());
    }
    let parsed = match a.kind {
        ProbeKind::Regression => ProbeTargets::Regression(
            raw.iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Invalid(format!("target {t:?}: {e}")))
                })
                .collect::<geoalign::Result<_>>()?,
        ),
        ProbeKind::Classification => ProbeTargets::Classification(
            raw.iter()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Invalid(format!("class {t:?}: {e}")))
                })
                .collect::<geoalign::Result<_>>()?,
        ),
    };
    let task = ProbeTask::with_split(features, parsed, a.train_fraction)?;
    let score = linear_probe(&task, a.lambda)?;
    let metric = match a.kind {
        ProbeKind::Regression => "r2",
        ProbeKind::Classification => "overall_accuracy",
    };
    Ok(format!(
        "{metric} {score:.6}\ntrain {} test {}\nconfig_hash {}\n",
        task.train.len(),
        task.test.len(),
        store.config_hash()
    ))
}

pub fn cmd_pca(a: &PcaArgs) -> geoalign::Result<String> {
    let store = EmbeddingStore::load(&a.store)?;
    let k = 3.min(store.dim());
    let p = pca_export(&store, k)?;
    let mut text = format!(
        "# config_hash={} modality={}\nid,lat,lon,pc1,pc2,pc3\n",
        store.config_hash(),
        store.modality()
    );
    for (r, proj) in store.records().iter().zip(&p.projections) {
        write!(text, "{},{:.12},{:.12}", r.id, r.coord.lat(), r.coord.lon()).expect("string write");
        for j in 0..3 {
            write!(text, ",{:.12}", proj.get(j).copied().unwrap_or(0.0)).expect("string write");
        }
        text.push('\n');
    }
    atomic_write(&a.out, text.as_bytes())?;
    let ratio = p.explained_ratio();
    let explained: Vec<String> = ratio.iter().take(k).map(|r| format!("{r:.4}")).collect();
    Ok(format!(
        "rows {}\nexplained {}\n{}",
        store.len(),
        explained.join(","),
        hash_line("pca", &a.out)?
    ))
}

/// Reads a PCA export back as `(id, coord, [pc1, pc2, pc3])`.
pub fn read_pca(path: &Path) -> geoalign::Result<Vec<(u64, GeoCoordinate, [f64; 3])>> {
    let text = std::fs::read_to_string(path)?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line() + 1) as usize;
        let f = |i: usize| -> geoalign::Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("missing column {i}"),
                })?
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })
        };
        let id = row[0].parse::<u64>().map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let coord = GeoCoordinate::new(f(1)?, f(2)?)?;
        out.push((id, coord, [f(3)?, f(4)?, f(5)?]));
    }
    Ok(out)
}
