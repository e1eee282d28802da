use geoalign::eval::{acc_at_distance, build_similarity, top1_localize, EmbeddingStore};
use geoalign::io::sha256_hex;
use geoalign::modality::ModalityId;
use geoalign::model::{Model, ModelConfig};
use geoalign::sampler::{build_manifest, Observation, SamplerConfig};
use geoalign::synth::{
    decode_dataset, encode_dataset, gen_dataset, BBox, LatentField, SynthConfig,
};
use geoalign::train::{train, RunConfig, TrainConfig};

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.coord.dim = 8;
    cfg.model.coord.depth = 1;
    cfg.train = TrainConfig {
        batch_size: 16,
        steps: 20,
        lr: 1e-3,
    };
    cfg
}

fn trained(cfg: &RunConfig) -> Model {
    let field = LatentField::new(0, SynthConfig::default()).unwrap();
    let ds = gen_dataset(&field, 48, &BBox::CONUS, 1, 0).unwrap();
    let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    train(
        &mut model,
        &ds.samples,
        &cfg.train,
        cfg.seed,
        &cfg.hash().unwrap(),
        None,
    )
    .unwrap();
    model
}

#[test]
fn training_reruns_reproduce_checkpoint_bytes() {
    let cfg = small_run();
    let a = trained(&cfg).to_bytes().unwrap();
    let b = trained(&cfg).to_bytes().unwrap();
    assert_eq!(sha256_hex(&a), sha256_hex(&b));
    let back = Model::from_bytes(&a).unwrap();
    assert_eq!(back.to_bytes().unwrap(), a);
    assert_eq!(back.config_hash(), cfg.hash().unwrap());
}

#[test]
fn stores_and_datasets_round_trip_bit_exactly() {
    let field = LatentField::new(2, SynthConfig::default()).unwrap();
    let ds = gen_dataset(&field, 30, &BBox::CONUS, 5, 100).unwrap();
    let bytes = encode_dataset(&ds).unwrap();
    assert_eq!(
        encode_dataset(&decode_dataset(&bytes).unwrap()).unwrap(),
        bytes
    );

    let model = trained(&small_run());
    for m in ModalityId::ALL {
        let store =
            EmbeddingStore::from_samples(m, &ds.samples, &model.embed(m, &ds.samples).unwrap())
                .unwrap()
                .with_config_hash(model.config_hash());
        let bytes = store.to_bytes();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);
    }
}

#[test]
fn trained_model_beats_chance_on_training_locations() {
    let mut cfg = small_run();
    cfg.train.steps = 150;
    let field = LatentField::new(0, SynthConfig::default()).unwrap();
    let ds = gen_dataset(&field, 48, &BBox::CONUS, 1, 0).unwrap();
    let mut model = Model::new(cfg.model.clone(), 0).unwrap();
    let report = train(&mut model, &ds.samples, &cfg.train, 0, "t", None).unwrap();
    assert!(report.final_loss().unwrap() < report.initial_loss().unwrap());
    let store = |m| {
        EmbeddingStore::from_samples(m, &ds.samples, &model.embed(m, &ds.samples).unwrap()).unwrap()
    };
    let (q, g) = (store(ModalityId::Street), store(ModalityId::Aerial));
    let acc = acc_at_distance(
        &top1_localize(&build_similarity(&q, &g).unwrap(), &g).unwrap(),
        &q.coords(),
        100.0,
    )
    .unwrap();
    assert!(acc > 5.0 / 48.0, "{acc}");
}

#[test]
fn model_config_rejects_bad_subsets() {
    let cfg = ModelConfig {
        modalities: vec![ModalityId::Street],
        ..Default::default()
    };
    assert!(Model::new(cfg, 0).is_err());
    let cfg = ModelConfig {
        modalities: vec![ModalityId::Street, ModalityId::Street],
        ..Default::default()
    };
    assert!(Model::new(cfg, 0).is_err());
    let cfg = ModelConfig {
        modalities: vec![ModalityId::Gps, ModalityId::Text],
        ..Default::default()
    };
    assert_eq!(
        Model::new(cfg, 0).unwrap().config().canonical_modalities(),
        [ModalityId::Text, ModalityId::Gps]
    );
}

#[test]
fn sampler_over_synthetic_observations() {
    let field = LatentField::new(0, SynthConfig::default()).unwrap();
    let bbox: BBox = "-100.01,40.0,-100.0,40.01".parse().unwrap();
    let ds = gen_dataset(&field, 3000, &bbox, 8, 0).unwrap();
    let obs: Vec<Observation> = ds
        .samples
        .iter()
        .map(|s| Observation {
            id: s.id,
            coord: s.coord,
            timestamp: s.timestamp,
        })
        .collect();
    let cfg = SamplerConfig::default();
    let out = build_manifest(&obs, &cfg, 0).unwrap();
    assert_eq!(out.dropped_by_year, 0);
    let total = out.train.records.len() + out.eval.records.len();
    assert!(total > 0 && total < 3000);
    for m in [&out.train, &out.eval] {
        assert!(m.cell_counts().values().all(|&n| (5..=120).contains(&n)));
    }
}
