//! Catalog and interaction data, request construction and splitting.
//!
//! Records follow the Amazon-review JSONL shapes:
//!
//! | file | required fields | optional fields |
//! |------|-----------------|-----------------|
//! | catalog | `item_id`, `title`, `categories` | `price`, `avg_rating`, `review_count` |
//! | interactions | `user_id`, `item_id`, `timestamp` | `rating` |
//!
//! Any other field is kept in `extra` and written back out unchanged.
//! Timestamps are integer seconds.

mod ingest;
mod split;
mod synthetic;

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Result};

pub use ingest::{
    ingest_interactions, read_catalog, read_interactions, write_catalog, write_interactions,
};
pub use split::{
    build_request, chronological_split, split_targets, train_visible, DatasetSplit, RequestShape,
    SplitConfig, TargetRef, HISTORY_CAP,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SyntheticMeta};

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(ItemId);
string_id!(UserId);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: String,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_count: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Item {
    /// First category label; the grouping key used by the behavioural tools.
    pub fn primary_category(&self) -> &str {
        &self.categories[0]
    }

    pub fn category_path(&self) -> String {
        self.categories.join(" > ")
    }
}

/// Items keyed by id, in file order.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
}

impl Catalog {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.categories.is_empty() {
                return Err(Error::Contract(format!(
                    "item `{}` has no categories",
                    item.item_id
                )));
            }
            if index.insert(item.item_id.clone(), pos).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate item id `{}`",
                    item.item_id
                )));
            }
        }
        Ok(Self { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Looks up an item that must exist.
    pub fn item(&self, id: &str) -> Result<&Item> {
        self.get(id).ok_or_else(|| Error::Lookup {
            kind: "item",
            id: id.to_owned(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Per-user interaction lists, each sorted by timestamp (stable for ties).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionStream {
    users: BTreeMap<UserId, Vec<Interaction>>,
}

impl InteractionStream {
    pub fn from_interactions(interactions: impl IntoIterator<Item = Interaction>) -> Self {
        let mut users: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        for it in interactions {
            users.entry(it.user_id.clone()).or_default().push(it);
        }
        for list in users.values_mut() {
            list.sort_by_key(|it| it.timestamp);
        }
        Self { users }
    }

    pub fn user(&self, id: &str) -> &[Interaction] {
        self.users.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn users(&self) -> impl Iterator<Item = (&UserId, &[Interaction])> {
        self.users.iter().map(|(u, v)| (u, v.as_slice()))
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn len(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All interactions, grouped by user (ascending id) then by time.
    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.users.values().flatten()
    }

    /// Keeps interactions for which `keep(user, position, interaction)` holds.
    pub fn filtered(&self, mut keep: impl FnMut(&UserId, usize, &Interaction) -> bool) -> Self {
        let users = self
            .users
            .iter()
            .map(|(u, list)| {
                let kept: Vec<_> = list
                    .iter()
                    .enumerate()
                    .filter(|(pos, it)| keep(u, *pos, it))
                    .map(|(_, it)| it.clone())
                    .collect();
                (u.clone(), kept)
            })
            .filter(|(_, list)| !list.is_empty())
            .collect();
        Self { users }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// One ranking instance: a user's history, a shuffled candidate list and the
/// 1-based position of the logged next item within it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRequest {
    /// Chronological index of the target among all targets.
    pub id: u64,
    pub user_id: UserId,
    /// Timestamp of the target interaction.
    pub timestamp: i64,
    /// Position of the target within the user's sorted stream.
    pub target_position: usize,
    pub history: Vec<ItemId>,
    pub candidates: Vec<ItemId>,
    pub positive_index: usize,
    pub split: SplitTag,
}

impl RecommendationRequest {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn positive(&self) -> &ItemId {
        &self.candidates[self.positive_index - 1]
    }

    /// The part of the request an agent is allowed to see.
    pub fn view(&self) -> RequestView<'_> {
        RequestView {
            id: self.id,
            user_id: &self.user_id,
            timestamp: self.timestamp,
            target_position: self.target_position,
            history: &self.history,
            candidates: &self.candidates,
        }
    }
}

/// A request with the positive stripped.
#[derive(Clone, Copy, Debug)]
pub struct RequestView<'a> {
    pub id: u64,
    pub user_id: &'a UserId,
    pub timestamp: i64,
    pub target_position: usize,
    pub history: &'a [ItemId],
    pub candidates: &'a [ItemId],
}

impl RequestView<'_> {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }
}
