//! Fixtures shared by the benchmarks.

pub use groundlab_core as core;

use groundlab_core::dataset::Dataset;
use groundlab_core::experiment::{build_all, ExperimentConfig};
use groundlab_core::model::{GroundingModel, ModelParams};
use groundlab_core::trainer::TrainData;

/// Default model at its seed-0 initialization plus a small train split and
/// augmented pool built from the default data settings.
pub struct Fixture {
    pub config: ExperimentConfig,
    pub model: GroundingModel,
    pub params: ModelParams,
    pub data: TrainData,
    pub test: Dataset,
}

pub fn fixture(train_size: usize) -> Fixture {
    let mut config = ExperimentConfig::default();
    config.data.train_size = train_size;
    config.data.test_size = train_size;
    config.data.augment.images_per_category = 5;
    let (data, test) = build_all(&config).expect("fixture data");
    Fixture {
        model: GroundingModel::new(config.model.clone()).expect("default model"),
        params: ModelParams::init(&config.model, 0).expect("default params"),
        config,
        data,
        test,
    }
}
