//! Shared fixtures for the benchmarks.

use ccsfg_core::generator::StepNoise;
use ccsfg_core::numerics::rng::seeded;
use ccsfg_core::synthdata::{generate_dataset, DataConfig, DatasetBundle};
use ccsfg_core::trainer::{pk_sample, Batch, IdentityIndex, ModelDims, ModelState, TrainConfig};

pub struct Fixture {
    pub data: DatasetBundle,
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub batch: Batch,
    pub noise: StepNoise,
}

/// Default dataset and configuration with one PK batch and its noise.
pub fn fixture(cfg: TrainConfig) -> Fixture {
    let data = generate_dataset(&DataConfig::default(), cfg.data_seed).expect("default dataset");
    let model = ModelState::init(&cfg, ModelDims::of(&data));
    let mut rng = seeded(3);
    let idx = pk_sample(&IdentityIndex::new(&data.train), cfg.p, cfg.k, &mut rng).expect("pk batch");
    let batch = Batch::gather(&data.train, &idx);
    let noise = StepNoise::draw(
        &mut rng,
        batch.len(),
        data.cameras(),
        cfg.latent_dim,
        cfg.share_id_latent,
    );
    Fixture {
        data,
        cfg,
        model,
        batch,
        noise,
    }
}
