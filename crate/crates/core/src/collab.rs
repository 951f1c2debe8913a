//! Item and user embeddings from co-occurrence statistics.
//!
//! Items co-occur when the same user interacted with both. The item–item
//! shifted positive PMI matrix is factorised as `M ≈ U Vᵀ` by ridge-regularised
//! alternating least squares; an item's vector is `(U + V) / 2` and a user's
//! vector is the mean of the vectors of the items they interacted with. Items
//! absent from the fitting stream are cold and keep the zero vector. Cosine
//! against a zero vector is 0.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, InteractionStream, ItemId, UserId};
use crate::rng;
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "toolrank.collab";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollabConfig {
    pub dim: usize,
    /// Alternating least-squares sweeps.
    pub iterations: usize,
    /// Ridge penalty on both factors.
    pub ridge: f64,
    /// PMI shift `k`: entries below `ln k` are clipped to zero.
    pub ppmi_shift: f64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            iterations: 15,
            ridge: 0.1,
            ppmi_shift: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabModel {
    dim: usize,
    seed: u64,
    item_ids: Vec<ItemId>,
    item_cold: Vec<bool>,
    item_vectors: Vec<f64>,
    user_ids: Vec<UserId>,
    user_vectors: Vec<f64>,
    #[serde(skip)]
    item_index: HashMap<ItemId, usize>,
    #[serde(skip)]
    user_index: HashMap<UserId, usize>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: CollabModel,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sparse shifted-PPMI rows over catalog positions.
fn ppmi_rows(catalog: &Catalog, stream: &InteractionStream, shift: f64) -> Vec<Vec<(usize, f64)>> {
    let n = catalog.len();
    let mut counts: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for (_, list) in stream.users() {
        let mut items: Vec<usize> = list
            .iter()
            .filter_map(|it| catalog.position(it.item_id.as_str()))
            .collect();
        items.sort_unstable();
        items.dedup();
        for (x, &a) in items.iter().enumerate() {
            for &b in &items[x + 1..] {
                *counts[a].entry(b).or_default() += 1.0;
                *counts[b].entry(a).or_default() += 1.0;
            }
        }
    }
    let row_sums: Vec<f64> = counts.iter().map(|r| r.values().sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let log_shift = shift.max(f64::MIN_POSITIVE).ln();
    counts
        .iter()
        .enumerate()
        .map(|(a, row)| {
            row.iter()
                .filter_map(|(&b, &c)| {
                    let pmi = (c * total / (row_sums[a] * row_sums[b])).ln() - log_shift;
                    (pmi > 0.0).then_some((b, pmi))
                })
                .collect()
        })
        .collect()
}

/// `rows · F · (FᵀF + λI)⁻¹`, with `F` stored row-major `n × d`.
fn ls_update(rows: &[Vec<(usize, f64)>], f: &[f64], d: usize, ridge: f64) -> Vec<f64> {
    let n = rows.len();
    let fm = DMatrix::from_row_slice(n, d, f);
    let gram = fm.transpose() * &fm + DMatrix::identity(d, d) * ridge;
    let inv = gram
        .cholesky()
        .expect("ridge-regularised gram matrix is positive definite")
        .inverse();
    let mut mf = DMatrix::<f64>::zeros(n, d);
    for (a, row) in rows.iter().enumerate() {
        for &(b, v) in row {
            for j in 0..d {
                mf[(a, j)] += v * f[b * d + j];
            }
        }
    }
    let out = mf * inv;
    let mut flat = Vec::with_capacity(n * d);
    for a in 0..n {
        for j in 0..d {
            flat.push(out[(a, j)]);
        }
    }
    flat
}

/// Fits item and user vectors on `stream`. The caller restricts `stream` to
/// what the training period may see.
pub fn fit(
    catalog: &Catalog,
    stream: &InteractionStream,
    config: &CollabConfig,
    seed: u64,
) -> Result<CollabModel> {
    if stream.is_empty() {
        return Err(Error::Config("collaborative model needs training interactions".into()));
    }
    if config.dim < 2 {
        return Err(Error::Config(format!(
            "embedding dimension must be at least 2, got {}",
            config.dim
        )));
    }
    if config.ridge.is_nan() || config.ridge <= 0.0 {
        return Err(Error::Config("ridge penalty must be positive".into()));
    }
    let d = config.dim;
    let n = catalog.len();
    let rows = ppmi_rows(catalog, stream, config.ppmi_shift);

    let mut rng = rng::stream(&[seed, 0x00C0_11AB]);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut v: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    let mut u = vec![0.0; n * d];
    for _ in 0..config.iterations.max(1) {
        u = ls_update(&rows, &v, d, config.ridge);
        v = ls_update(&rows, &u, d, config.ridge);
    }

    let mut observed = vec![false; n];
    for it in stream.iter() {
        if let Some(p) = catalog.position(it.item_id.as_str()) {
            observed[p] = true;
        }
    }
    let item_vectors: Vec<f64> = (0..n * d)
        .map(|x| if observed[x / d] { 0.5 * (u[x] + v[x]) } else { 0.0 })
        .collect();

    let mut user_ids = Vec::with_capacity(stream.user_count());
    let mut user_vectors = Vec::with_capacity(stream.user_count() * d);
    for (user, list) in stream.users() {
        let mut acc = vec![0.0; d];
        let mut count = 0usize;
        for it in list {
            if let Some(p) = catalog.position(it.item_id.as_str()) {
                for j in 0..d {
                    acc[j] += item_vectors[p * d + j];
                }
                count += 1;
            }
        }
        if count > 0 {
            acc.iter_mut().for_each(|x| *x /= count as f64);
        }
        user_ids.push(user.clone());
        user_vectors.extend(acc);
    }

    let mut model = CollabModel {
        dim: d,
        seed,
        item_ids: catalog.items().iter().map(|i| i.item_id.clone()).collect(),
        item_cold: observed.iter().map(|o| !o).collect(),
        item_vectors,
        user_ids,
        user_vectors,
        item_index: HashMap::new(),
        user_index: HashMap::new(),
    };
    model.reindex();
    Ok(model)
}

fn top_k<I: Clone + Ord>(mut scored: Vec<(I, f64)>, k: usize) -> Vec<(I, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

impl CollabModel {
    fn reindex(&mut self) {
        self.item_index = self
            .item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        self.user_index = self
            .user_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn item_vector(&self, id: &str) -> Option<&[f64]> {
        let i = *self.item_index.get(id)?;
        Some(&self.item_vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn user_vector(&self, id: &str) -> Option<&[f64]> {
        let i = *self.user_index.get(id)?;
        Some(&self.user_vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn is_cold(&self, id: &str) -> bool {
        self.item_index
            .get(id)
            .map(|&i| self.item_cold[i])
            .unwrap_or(true)
    }

    /// Cosine between two items; unknown or cold items score 0.
    pub fn item_similarity(&self, a: &str, b: &str) -> f64 {
        match (self.item_vector(a), self.item_vector(b)) {
            (Some(x), Some(y)) => cosine(x, y),
            _ => 0.0,
        }
    }

    /// Mean vector of the known items in `items`.
    pub fn mean_item_vector<'a>(&self, items: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for id in items {
            if let Some(v) = self.item_vector(id) {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                count += 1;
            }
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        acc
    }

    /// Top-`k` items by cosine to `item_id`, excluding it; ties by ascending id.
    pub fn similar_items(&self, item_id: &str, k: usize) -> Result<Vec<(ItemId, f64)>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        let query = self.item_vector(item_id).ok_or_else(|| Error::Lookup {
            kind: "item",
            id: item_id.to_owned(),
        })?;
        let scored = self
            .item_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| id.as_str() != item_id)
            .map(|(i, id)| {
                let v = &self.item_vectors[i * self.dim..(i + 1) * self.dim];
                (id.clone(), cosine(query, v))
            })
            .collect();
        Ok(top_k(scored, k))
    }

    /// Top-`k` users by cosine to `user_id`, excluding it; ties by ascending id.
    pub fn similar_users(&self, user_id: &str, k: usize) -> Result<Vec<(UserId, f64)>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        let query = self.user_vector(user_id).ok_or_else(|| Error::Lookup {
            kind: "user",
            id: user_id.to_owned(),
        })?;
        Ok(self.similar_users_to(query, k, Some(user_id)))
    }

    /// Top-`k` users by cosine to an arbitrary query vector.
    pub fn similar_users_to(
        &self,
        query: &[f64],
        k: usize,
        exclude: Option<&str>,
    ) -> Vec<(UserId, f64)> {
        let scored = self
            .user_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| Some(id.as_str()) != exclude)
            .map(|(i, id)| {
                let v = &self.user_vectors[i * self.dim..(i + 1) * self.dim];
                (id.clone(), cosine(query, v))
            })
            .collect();
        top_k(scored, k.max(1))
    }

    /// Dot product of user and item vectors; unknown or cold ids score 0.
    pub fn score(&self, user_id: &str, item_id: &str) -> f64 {
        match (self.user_vector(user_id), self.item_vector(item_id)) {
            (Some(u), Some(i)) => u.iter().zip(i).map(|(a, b)| a * b).sum(),
            _ => 0.0,
        }
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: &'a str,
            version: u32,
            #[serde(flatten)]
            model: &'a CollabModel,
        }
        serde_json::to_writer(
            w,
            &Out {
                format: CHECKPOINT_FORMAT,
                version: CHECKPOINT_VERSION,
                model: self,
            },
        )?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = ckpt.model;
        let d = model.dim;
        if model.item_vectors.len() != model.item_ids.len() * d
            || model.user_vectors.len() != model.user_ids.len() * d
            || model.item_cold.len() != model.item_ids.len()
        {
            return Err(Error::Checkpoint("vector table sizes do not match ids".into()));
        }
        model.reindex();
        Ok(model)
    }

    #[cfg(test)]
    pub(crate) fn from_parts(
        dim: usize,
        items: Vec<(&str, Vec<f64>)>,
        users: Vec<(&str, Vec<f64>)>,
    ) -> Self {
        let mut m = CollabModel {
            dim,
            seed: 0,
            item_cold: items.iter().map(|(_, v)| v.iter().all(|x| *x == 0.0)).collect(),
            item_ids: items.iter().map(|(id, _)| ItemId::from(*id)).collect(),
            item_vectors: items.into_iter().flat_map(|(_, v)| v).collect(),
            user_ids: users.iter().map(|(id, _)| UserId::from(*id)).collect(),
            user_vectors: users.into_iter().flat_map(|(_, v)| v).collect(),
            item_index: HashMap::new(),
            user_index: HashMap::new(),
        };
        m.reindex();
        m
    }
}
