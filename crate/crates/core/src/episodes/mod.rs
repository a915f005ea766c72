//! Datasets, augmentation, synthetic domain shift and N-way K-shot episodes.

mod augment;
mod io;
mod synth;

pub use augment::{augment, flip_horizontal, Augment};
pub use io::{load_image_dataset, read_csv, write_csv, IMAGE_EXTENSIONS};
pub use synth::{synth_task_domain, ShiftConfig};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub input: Vec<f64>,
    pub label: usize,
    pub domain: String,
}

/// A labelled pool of items with contiguous class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetTable {
    items: Vec<Item>,
    class_names: Vec<String>,
    domain_name: String,
    input_shape: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl DatasetTable {
    pub fn new(items: Vec<Item>, class_names: Vec<String>, domain_name: impl Into<String>, input_shape: Vec<usize>) -> Result<Self> {
        let input_len: usize = input_shape.iter().product();
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, item) in items.iter().enumerate() {
            if item.label >= class_names.len() {
                return Err(Error::Index {
                    index: item.label,
                    len: class_names.len(),
                });
            }
            if item.input.len() != input_len {
                return shape_err(format!(
                    "item {i} holds {} values, table input shape {input_shape:?} needs {input_len}",
                    item.input.len()
                ));
            }
            by_class[item.label].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class {:?} has no items", class_names[c])));
        }
        Ok(DatasetTable {
            items,
            class_names,
            domain_name: domain_name.into(),
            input_shape,
            by_class,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `H x W x C` inputs are images; flat inputs are vectors.
    pub fn is_image(&self) -> bool {
        self.input_shape.len() == 3
    }

    /// Item indices of class `c`.
    pub fn class_items(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }

    /// Stacks the inputs of `indices` into a `B x input_len` matrix.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.input_len());
        for &i in indices {
            data.extend_from_slice(&self.items[i].input);
        }
        Tensor::new(vec![indices.len(), self.input_len()], data).expect("uniform item length")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.items[i].label).collect()
    }

    /// Keeps `classes` (in the given order, reindexed from 0).
    pub fn subset(&self, classes: &[usize]) -> Result<DatasetTable> {
        let mut remap = vec![None; self.n_classes()];
        for (new, &old) in classes.iter().enumerate() {
            if old >= self.n_classes() {
                return Err(Error::Config(format!("class {old} out of range for {} classes", self.n_classes())));
            }
            if remap[old].is_some() {
                return Err(Error::Config(format!("class {old} listed twice")));
            }
            remap[old] = Some(new);
        }
        let items = self
            .items
            .iter()
            .filter_map(|it| {
                remap[it.label].map(|label| Item {
                    input: it.input.clone(),
                    label,
                    domain: it.domain.clone(),
                })
            })
            .collect();
        let names = classes.iter().map(|&c| self.class_names[c].clone()).collect();
        DatasetTable::new(items, names, self.domain_name.clone(), self.input_shape.clone())
    }
}

/// Splits a table into disjoint base and novel class sets, each reindexed
/// from 0.
pub fn split_classes(data: &DatasetTable, base: &[usize], novel: &[usize]) -> Result<(DatasetTable, DatasetTable)> {
    if let Some(c) = base.iter().find(|c| novel.contains(c)) {
        return Err(Error::Config(format!("class {c} is in both the base and the novel list")));
    }
    Ok((data.subset(base)?, data.subset(novel)?))
}

/// Base classes as given; every remaining class becomes novel.
pub fn split_base_novel(data: &DatasetTable, base: &[usize]) -> Result<(DatasetTable, DatasetTable)> {
    let novel: Vec<usize> = (0..data.n_classes()).filter(|c| !base.contains(c)).collect();
    split_classes(data, base, &novel)
}

/// One N-way K-shot task. Support and query rows are grouped by episode
/// class, `K` (respectively `Q`) consecutive rows per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Original class index of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.len() / self.classes.len()
    }

    pub fn n_query(&self) -> usize {
        self.query.len() / self.classes.len()
    }
}

/// Random stream for episode `index` of a run seeded with `master_seed`.
/// Streams are independent of each other and of the order they are drawn.
pub fn episode_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Checks that every class can supply `k + q` distinct items.
pub fn check_capacity(data: &DatasetTable, n: usize, k: usize, q: usize) -> Result<()> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Config(format!("episode sizes must be positive (N={n}, K={k}, Q={q})")));
    }
    if data.n_classes() < n {
        return Err(Error::Capacity(format!(
            "{}-way episodes need {n} classes, dataset {:?} has {}",
            n,
            data.domain_name(),
            data.n_classes()
        )));
    }
    for c in 0..data.n_classes() {
        let have = data.class_items(c).len();
        if have < k + q {
            return Err(Error::Capacity(format!(
                "class {:?} has {have} items, a {k}-shot episode with {q} queries needs {}",
                data.class_names()[c],
                k + q
            )));
        }
    }
    Ok(())
}

/// Draws `n` classes without replacement, then `k + q` distinct items of each.
pub fn sample_episode<R: Rng + ?Sized>(data: &DatasetTable, n: usize, k: usize, q: usize, rng: &mut R) -> Result<Episode> {
    check_capacity(data, n, k, q)?;
    let classes: Vec<usize> = index::sample(rng, data.n_classes(), n).into_vec();
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * q),
        query_labels: Vec::with_capacity(n * q),
    };
    for (label, &c) in classes.iter().enumerate() {
        let pool = data.class_items(c);
        let picks = index::sample(rng, pool.len(), k + q).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < k {
                ep.support.push(pool[p]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(pool[p]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}
