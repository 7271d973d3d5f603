//! Datasets, their train/validation/test partitions, and the split into a
//! source domain and a few-shot target domain.

mod cifar;
mod mnist;
mod pianoroll;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::Samples;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

pub use cifar::{load_cifar10, CIFAR10_CLASSES, CIFAR_RECORD_BYTES};
pub use mnist::{load_mnist, read_idx_images, read_idx_labels};
pub use pianoroll::{
    load_pianoroll, write_raster, write_synthetic_pianoroll, COMPOSER_CLASSES, PITCH_ROWS,
    TIME_COLUMNS,
};
pub use synthetic::synthetic_images;

/// Environment variable naming the default data root.
pub const DATA_ROOT_VAR: &str = "ADAPTNET_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        })
    }
}

/// A labelled image collection, every item tagged with its partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub partitions: Vec<Partition>,
    pub class_names: Vec<String>,
    /// Source piece of each item, for corpora cut from longer recordings.
    pub piece_ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        items: Vec<Tensor>,
        labels: Vec<usize>,
        partitions: Vec<Partition>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            items,
            labels,
            partitions,
            class_names,
            piece_ids: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_piece_ids(mut self, piece_ids: Vec<String>) -> Result<Self> {
        self.piece_ids = Some(piece_ids);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.items.len();
        if self.labels.len() != n || self.partitions.len() != n {
            return Err(Error::Usage(format!(
                "dataset `{}`: {} items, {} labels, {} partition tags",
                self.name,
                n,
                self.labels.len(),
                self.partitions.len()
            )));
        }
        if let Some(p) = &self.piece_ids {
            if p.len() != n {
                return Err(Error::Usage(format!(
                    "dataset `{}`: {} piece ids for {n} items",
                    self.name,
                    p.len()
                )));
            }
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Usage(format!(
                "dataset `{}`: label {l} outside {} classes",
                self.name,
                self.class_names.len()
            )));
        }
        if let Some(first) = self.items.first() {
            if let Some(bad) = self.items.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Usage(format!(
                    "dataset `{}`: mixed item shapes {:?} and {:?}",
                    self.name,
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn item_shape(&self) -> Option<&[usize]> {
        self.items.first().map(Tensor::shape)
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.partitions.iter().filter(|&&p| p == partition).count()
    }

    /// Indices of the items in `partition` whose label is in `labels`, in order.
    pub fn indices(&self, partition: Partition, labels: &BTreeSet<usize>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.partitions[i] == partition && labels.contains(&self.labels[i]))
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Items drawn from a dataset, with labels possibly re-indexed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subset {
    pub items: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Position of each item in the originating dataset.
    pub indices: Vec<usize>,
}

impl Subset {
    fn gather(ds: &Dataset, indices: Vec<usize>, relabel: impl Fn(usize) -> usize) -> Self {
        Subset {
            items: indices.iter().map(|&i| ds.items[i].clone()).collect(),
            labels: indices.iter().map(|&i| relabel(ds.labels[i])).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples {
            inputs: &self.items,
            labels: &self.labels,
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor> {
        self.items.iter().collect()
    }

    /// At most `limit` items chosen without replacement, kept in their
    /// original order.
    pub fn subsample(&self, limit: usize, seed: u64) -> Subset {
        if limit >= self.len() {
            return self.clone();
        }
        let mut pick: Vec<usize> = (0..self.len()).collect();
        let mut rng = seed::rng(seed, Stream::SourceSubset, 0);
        pick.partial_shuffle(&mut rng, limit);
        let mut pick = pick[..limit].to_vec();
        pick.sort_unstable();
        Subset {
            items: pick.iter().map(|&i| self.items[i].clone()).collect(),
            labels: pick.iter().map(|&i| self.labels[i]).collect(),
            indices: pick.iter().map(|&i| self.indices[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &l in &self.labels {
            *out.entry(l).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub train: Subset,
    pub valid: Subset,
    pub test: Subset,
    /// Original class ids of the domain. When `reindexed`, subset label `k`
    /// stands for `classes[k]`; otherwise subsets keep the original ids.
    pub classes: Vec<usize>,
    pub reindexed: bool,
}

impl Domain {
    /// Output units needed by a classifier for this domain's labels.
    pub fn output_units(&self) -> usize {
        if self.reindexed {
            self.classes.len()
        } else {
            self.classes.iter().max().map_or(0, |&m| m + 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub source: Domain,
    pub target: Domain,
}

impl DomainSplit {
    /// The six subsets in a fixed order, for disjointness checks.
    pub fn subsets(&self) -> [(&'static str, &Subset); 6] {
        [
            ("source train", &self.source.train),
            ("source valid", &self.source.valid),
            ("source test", &self.source.test),
            ("target train", &self.target.train),
            ("target valid", &self.target.valid),
            ("target test", &self.target.test),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotSpec {
    pub k_per_class: usize,
    pub seed: u64,
}

/// Source keeps every source-label item of each partition with its original
/// label. The target draws `k_per_class` training and validation items per
/// class, keeps every target-label test item, and re-indexes its labels to
/// `0..target_labels.len()` in the order given.
pub fn split_domains(
    dataset: &Dataset,
    source_labels: &[usize],
    target_labels: &[usize],
    few_shot: FewShotSpec,
) -> Result<DomainSplit> {
    let src: BTreeSet<usize> = source_labels.iter().copied().collect();
    let tgt: BTreeSet<usize> = target_labels.iter().copied().collect();
    if src.len() != source_labels.len() || tgt.len() != target_labels.len() {
        return Err(Error::Config(
            "repeated label in a domain label list".into(),
        ));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Config("both domains need at least one label".into()));
    }
    if let Some(l) = src.intersection(&tgt).next() {
        return Err(Error::Config(format!(
            "label {l} is in both the source and the target domain"
        )));
    }
    if let Some(l) = src.union(&tgt).find(|&&l| l >= dataset.num_classes()) {
        return Err(Error::Config(format!(
            "label {l} does not exist in `{}` ({} classes)",
            dataset.name,
            dataset.num_classes()
        )));
    }
    if few_shot.k_per_class == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }

    let keep = |l: usize| l;
    let source = Domain {
        train: Subset::gather(dataset, dataset.indices(Partition::Train, &src), keep),
        valid: Subset::gather(dataset, dataset.indices(Partition::Valid, &src), keep),
        test: Subset::gather(dataset, dataset.indices(Partition::Test, &src), keep),
        classes: src.iter().copied().collect(),
        reindexed: false,
    };

    let position: BTreeMap<usize, usize> = target_labels
        .iter()
        .enumerate()
        .map(|(k, &l)| (l, k))
        .collect();
    let relabel = |l: usize| position[&l];
    let draw = |partition: Partition, stream_index: u64| -> Result<Vec<usize>> {
        let mut rng = seed::rng(few_shot.seed, Stream::FewShot, stream_index);
        let mut chosen = Vec::with_capacity(few_shot.k_per_class * target_labels.len());
        for &label in target_labels {
            let mut pool = dataset.indices(partition, &BTreeSet::from([label]));
            if pool.len() < few_shot.k_per_class {
                return Err(Error::Config(format!(
                    "class {label} has {} {partition} items, {} requested",
                    pool.len(),
                    few_shot.k_per_class
                )));
            }
            pool.partial_shuffle(&mut rng, few_shot.k_per_class);
            chosen.extend_from_slice(&pool[..few_shot.k_per_class]);
        }
        chosen.sort_unstable();
        Ok(chosen)
    };
    let target = Domain {
        train: Subset::gather(dataset, draw(Partition::Train, 0)?, relabel),
        valid: Subset::gather(dataset, draw(Partition::Valid, 1)?, relabel),
        test: Subset::gather(dataset, dataset.indices(Partition::Test, &tgt), relabel),
        classes: target_labels.to_vec(),
        reindexed: true,
    };
    Ok(DomainSplit { source, target })
}

/// Datasets the harness knows how to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetId {
    Mnist,
    Cifar10,
    Composers,
    /// Generated on the fly; needs no files.
    Synthetic,
}

impl DatasetId {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Composers => "composers",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetId::Cifar10),
            "composers" | "pianoroll" => Ok(DatasetId::Composers),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// `$ADAPTNET_DATA/<dataset>` when the variable is set.
pub fn default_data_dir(id: DatasetId) -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_VAR).map(|root| Path::new(&root).join(id.name()))
}

/// Loads `id` from `dir`. The synthetic set ignores `dir`.
pub fn load(id: DatasetId, dir: &Path) -> Result<Dataset> {
    match id {
        DatasetId::Mnist => load_mnist(dir),
        DatasetId::Cifar10 => load_cifar10(dir),
        DatasetId::Composers => load_pianoroll(dir),
        DatasetId::Synthetic => Ok(synthetic_images(10, [60, 20, 30], &[1, 12, 12], 0)),
    }
}

/// Opens `dir/name`, or `dir/name.gz` decompressed, whichever exists.
pub(crate) fn read_maybe_gz(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>)> {
    use std::io::Read;
    let plain = dir.join(name);
    if plain.is_file() {
        let bytes = std::fs::read(&plain).map_err(|e| Error::io(&plain, e))?;
        return Ok((plain, bytes));
    }
    let gz = dir.join(format!("{name}.gz"));
    let file = std::fs::File::open(&gz).map_err(|e| Error::io(&gz, e))?;
    let mut bytes = Vec::new();
    flate2::read::GzDecoder::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&gz, e))?;
    Ok((gz, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        synthetic_images(4, [6, 4, 5], &[1, 4, 4], 3)
    }

    #[test]
    fn split_is_disjoint_and_balanced() {
        let ds = toy();
        let split = split_domains(
            &ds,
            &[0, 1],
            &[2, 3],
            FewShotSpec {
                k_per_class: 2,
                seed: 5,
            },
        )
        .unwrap();
        let mut seen = BTreeSet::new();
        for (_, s) in split.subsets() {
            for &i in &s.indices {
                assert!(seen.insert(i), "item {i} used twice");
            }
        }
        assert_eq!(split.source.train.len(), 12);
        assert_eq!(split.source.valid.len(), 8);
        assert_eq!(split.source.test.len(), 10);
        assert_eq!(
            split.target.train.class_counts(),
            BTreeMap::from([(0, 2), (1, 2)])
        );
        assert_eq!(
            split.target.valid.class_counts(),
            BTreeMap::from([(0, 2), (1, 2)])
        );
        assert_eq!(split.target.test.len(), 10);
        assert_eq!(split.source.output_units(), 2);
        assert_eq!(split.target.output_units(), 2);
        for (k, &i) in split.target.train.indices.iter().enumerate() {
            assert_eq!(
                split.target.classes[split.target.train.labels[k]],
                ds.labels[i]
            );
        }
    }

    #[test]
    fn split_is_seeded() {
        let ds = toy();
        let a = split_domains(
            &ds,
            &[0],
            &[1, 2],
            FewShotSpec {
                k_per_class: 3,
                seed: 1,
            },
        )
        .unwrap();
        let b = split_domains(
            &ds,
            &[0],
            &[1, 2],
            FewShotSpec {
                k_per_class: 3,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let c = split_domains(
            &ds,
            &[0],
            &[1, 2],
            FewShotSpec {
                k_per_class: 3,
                seed: 2,
            },
        )
        .unwrap();
        assert_ne!(a.target.train.indices, c.target.train.indices);
    }

    #[test]
    fn split_rejects_bad_requests() {
        let ds = toy();
        let fs = FewShotSpec {
            k_per_class: 2,
            seed: 0,
        };
        assert!(split_domains(&ds, &[0, 1], &[1, 2], fs).is_err());
        assert!(split_domains(&ds, &[0], &[9], fs).is_err());
        let greedy = FewShotSpec {
            k_per_class: 7,
            seed: 0,
        };
        assert!(matches!(
            split_domains(&ds, &[0], &[1], greedy),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn subsample_keeps_order_and_provenance() {
        let ds = toy();
        let split = split_domains(
            &ds,
            &[0, 1, 2],
            &[3],
            FewShotSpec {
                k_per_class: 1,
                seed: 0,
            },
        )
        .unwrap();
        let small = split.source.train.subsample(5, 9);
        assert_eq!(small.len(), 5);
        assert!(small.indices.windows(2).all(|w| w[0] < w[1]));
        for (k, &i) in small.indices.iter().enumerate() {
            assert_eq!(small.items[k], ds.items[i]);
        }
        assert_eq!(small, split.source.train.subsample(5, 9));
    }
}
