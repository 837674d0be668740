use log::info;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::fsio::OutputDir;
use crate::synthgen::{generate_dataset, Dataset, Domain, Split};

/// The four splits of one benchmark.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub source_test: Dataset,
    pub target_test: Dataset,
}

struct SplitSpec {
    name: &'static str,
    domain: Domain,
    split: Split,
    split_seed: u64,
}

const SPLITS: [SplitSpec; 4] = [
    SplitSpec {
        name: "source_train",
        domain: Domain::Source,
        split: Split::Train,
        split_seed: 1,
    },
    SplitSpec {
        name: "target_train",
        domain: Domain::Target,
        split: Split::Train,
        split_seed: 2,
    },
    SplitSpec {
        name: "source_test",
        domain: Domain::Source,
        split: Split::Test,
        split_seed: 3,
    },
    SplitSpec {
        name: "target_test",
        domain: Domain::Target,
        split: Split::Test,
        split_seed: 4,
    },
];

#[derive(Serialize)]
struct ManifestEntry {
    name: &'static str,
    file: String,
    images: usize,
    digest: String,
}

#[derive(Serialize)]
struct Manifest {
    config_digest: String,
    master_seed: u64,
    datasets: Vec<ManifestEntry>,
}

fn count(config: &ExperimentConfig, name: &str) -> usize {
    let d = &config.data;
    match name {
        "source_train" => d.source_train,
        "target_train" => d.target_train,
        "source_test" => d.source_test,
        _ => d.target_test,
    }
}

fn matches(ds: &Dataset, config: &ExperimentConfig, spec: &SplitSpec, n: usize) -> bool {
    ds.config == config.world()
        && ds.domain == spec.domain
        && ds.split == spec.split
        && ds.len() == n
}

/// Generates the benchmark in memory.
pub fn generate_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let world = config.world();
    let mut sets = SPLITS.iter().map(|s| {
        generate_dataset(
            &world,
            s.domain,
            s.split,
            count(config, s.name),
            s.split_seed,
        )
    });
    Ok(Datasets {
        source_train: sets.next().expect("four splits")?,
        target_train: sets.next().expect("four splits")?,
        source_test: sets.next().expect("four splits")?,
        target_test: sets.next().expect("four splits")?,
    })
}

/// Loads the benchmark from `data/` under the output directory when the
/// cached files match the configuration, otherwise generates and writes it.
pub fn prepare_datasets(config: &ExperimentConfig, out: &OutputDir) -> Result<Datasets> {
    let world = config.world();
    let mut sets = Vec::with_capacity(4);
    let mut entries = Vec::with_capacity(4);
    let mut wrote = false;
    for spec in &SPLITS {
        let n = count(config, spec.name);
        let file = format!("data/{}.bin", spec.name);
        let path = out.resolve(&file)?;
        let cached = if path.exists() {
            Dataset::load(&path)
                .ok()
                .filter(|ds| matches(ds, config, spec, n))
        } else {
            None
        };
        let ds = match cached {
            Some(ds) => {
                info!("reusing cached {}", path.display());
                ds
            }
            None => {
                let ds = generate_dataset(&world, spec.domain, spec.split, n, spec.split_seed)?;
                out.write(&file, &crate::synthgen::encode(&ds))?;
                wrote = true;
                ds
            }
        };
        entries.push(ManifestEntry {
            name: spec.name,
            file,
            images: ds.len(),
            digest: ds.digest(),
        });
        sets.push(ds);
    }
    let manifest = Manifest {
        config_digest: config.digest(),
        master_seed: config.master_seed,
        datasets: entries,
    };
    let manifest_path = out.resolve("data/manifest.json")?;
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    if wrote || !manifest_path.exists() || out.force() {
        crate::fsio::write_atomic(&manifest_path, &bytes)?;
    }
    let mut sets = sets.into_iter();
    Ok(Datasets {
        source_train: sets.next().expect("four splits"),
        target_train: sets.next().expect("four splits"),
        source_test: sets.next().expect("four splits"),
        target_test: sets.next().expect("four splits"),
    })
}
