//! `gen-data`: materializes train and test corpora into the dataset cache.

use std::path::{Path, PathBuf};

use ctrnn_lab::data::{
    cache_path, encode_seqmnist, event_encode, gen_xor, load_mnist_idx, read_cache, write_cache, CacheKey, CacheStatus,
    IrregularSequence, Task,
};

use crate::config::{RunConfig, TEST_SEED_OFFSET};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Cache key of one split. seqMNIST keys carry seed 0: its content does not
/// depend on a seed.
pub fn cache_key(cfg: &RunConfig, split: Split) -> CacheKey {
    let count = match split {
        Split::Train => cfg.train_count,
        Split::Test => cfg.test_count,
    };
    match cfg.task {
        Task::XorDense | Task::XorEvent => {
            let seed = match split {
                Split::Train => cfg.data_seed,
                Split::Test => cfg.data_seed.wrapping_add(TEST_SEED_OFFSET),
            };
            CacheKey::new(cfg.task, seed)
                .with("bits", cfg.bits)
                .with("count", count)
                .with("split", split.name())
        }
        Task::SeqmnistEvent => CacheKey::new(cfg.task, 0)
            .with("count", count)
            .with("split", split.name()),
    }
}

fn generate_xor(task: Task, key: &CacheKey, bits: usize) -> CliResult<Vec<IrregularSequence>> {
    let count: usize = key.params["count"].parse().expect("count is numeric");
    let dense = gen_xor(count, bits, key.seed);
    Ok(match task {
        Task::XorEvent => dense.iter().map(event_encode).collect::<ctrnn_lab::Result<_>>()?,
        _ => dense,
    })
}

/// IDX file names of an MNIST split.
pub fn mnist_files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Encodes the first `count` images of an MNIST split.
pub fn encode_mnist_split(dir: &Path, split: Split, count: usize) -> CliResult<Vec<IrregularSequence>> {
    let (images, labels) = mnist_files(dir, split);
    let set = load_mnist_idx(&images, &labels)?;
    if count > set.len() {
        return Err(CliError::usage(format!(
            "{} split has {} images, {count} requested",
            split.name(),
            set.len()
        )));
    }
    (0..count)
        .map(|i| Ok(encode_seqmnist(set.image(i), set.labels[i], i)?))
        .collect()
}

#[derive(Debug)]
pub struct Generated {
    pub path: PathBuf,
    pub status: CacheStatus,
    pub sequences: usize,
}

/// Writes both splits. Existing caches are verified rather than rewritten.
pub fn gen_data(cfg: &RunConfig, cache_dir: &Path, mnist_dir: &Path) -> CliResult<Vec<Generated>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Test] {
        let key = cache_key(cfg, split);
        let data = match cfg.task {
            Task::SeqmnistEvent => {
                encode_mnist_split(mnist_dir, split, key.params["count"].parse().expect("count is numeric"))?
            }
            task => generate_xor(task, &key, cfg.bits)?,
        };
        let path = cache_path(cache_dir, &key);
        let status = write_cache(&path, &key, &data)?;
        log::debug!("{:?} {}", status, path.display());
        out.push(Generated {
            path,
            status,
            sequences: data.len(),
        });
    }
    Ok(out)
}

/// Loads one split written by [`gen_data`].
pub fn load_split(cfg: &RunConfig, cache_dir: &Path, split: Split) -> CliResult<Vec<IrregularSequence>> {
    let key = cache_key(cfg, split);
    let path = cache_path(cache_dir, &key);
    if !path.exists() {
        return Err(ctrnn_lab::Error::Io {
            path: path.clone(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset cache missing, run `ctrnn-lab gen-data` with the same config first",
            ),
        }
        .into());
    }
    let (stored, data) = read_cache(&path)?;
    if stored != key {
        return Err(ctrnn_lab::Error::Format {
            path,
            offset: 0,
            detail: format!("cache holds {stored:?}, expected {key:?}"),
        }
        .into());
    }
    Ok(data)
}
