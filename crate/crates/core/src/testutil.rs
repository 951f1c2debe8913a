//! Shared fixtures for unit tests.

use crate::collab::CollabConfig;
use crate::corpus::{generate_synthetic, DatasetSplit, SplitConfig, SyntheticConfig};
use crate::Environment;

/// A small planted world: 80 items, 60 users, 8-dimensional embeddings.
pub(crate) fn small_env() -> (Environment, DatasetSplit) {
    let data = generate_synthetic(
        &SyntheticConfig {
            n_items: 80,
            n_users: 60,
            n_categories: 5,
            ..Default::default()
        },
        11,
    )
    .unwrap();
    Environment::build(
        data.catalog,
        data.stream,
        &SplitConfig {
            seed: 5,
            ..Default::default()
        },
        Some(&CollabConfig {
            dim: 8,
            iterations: 5,
            ..Default::default()
        }),
    )
    .unwrap()
}
