//! Dataset plumbing shared by the subcommands: build the training set and the
//! kNN-monitor (index, query) pair from a run config.

use std::path::PathBuf;

use unmix_core::data::{load_cifar, make_synthetic, CifarVariant, LabeledDataset, Split};
use unmix_core::error::{Error, Result};
use unmix_core::RunConfig;

/// XORed into the seed for the synthetic held-out split so its noise draws
/// are independent of the training split (class templates are seed-free, so
/// both splits share the same class structure).
const TEST_NOISE_SALT: u64 = 0xa5a5_5a5a_c3c3_3c3c;

/// Feature-extraction caps keep the in-loop monitor affordable on CIFAR.
const EVAL_INDEX_CAP: usize = 5000;
const EVAL_QUERY_CAP: usize = 2000;

pub struct RunData {
    pub train: LabeledDataset,
    pub eval_index: LabeledDataset,
    pub eval_query: LabeledDataset,
}

fn data_root(cfg: &RunConfig) -> Result<PathBuf> {
    if !cfg.data_dir.is_empty() {
        return Ok(PathBuf::from(&cfg.data_dir));
    }
    match std::env::var("UNMIX_DATA_DIR") {
        Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(
            "data.dir is empty and UNMIX_DATA_DIR is unset".into(),
        )),
    }
}

pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    match cfg.data_dataset.as_str() {
        "synthetic" => {
            let mut train = make_synthetic(&cfg.synthetic_spec(cfg.seed))?;
            if cfg.data_subset > 0 {
                train = train.subset(cfg.data_subset);
            }
            let mut query_spec = cfg.synthetic_spec(cfg.seed ^ TEST_NOISE_SALT);
            query_spec.samples_per_class = (query_spec.samples_per_class / 4).max(1);
            let eval_query = make_synthetic(&query_spec)?;
            let eval_index = train.subset(train.n.min(EVAL_INDEX_CAP));
            Ok(RunData {
                train,
                eval_index,
                eval_query,
            })
        }
        name @ ("cifar10" | "cifar100") => {
            let variant = if name == "cifar10" {
                CifarVariant::C10
            } else {
                CifarVariant::C100
            };
            let dir = data_root(cfg)?;
            let mut train = load_cifar(&dir, variant, Split::Train)?;
            if cfg.data_subset > 0 {
                train = train.subset(cfg.data_subset);
            }
            let test = load_cifar(&dir, variant, Split::Test)?;
            let eval_index = train.subset(train.n.min(EVAL_INDEX_CAP));
            let eval_query = test.subset(test.n.min(EVAL_QUERY_CAP));
            Ok(RunData {
                train,
                eval_index,
                eval_query,
            })
        }
        other => Err(Error::Config(format!(
            "data.dataset must be synthetic|cifar10|cifar100, got {other}"
        ))),
    }
}
