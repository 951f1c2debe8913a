//! Planted-preference synthetic data.
//!
//! Each user prefers 1–3 categories. At every step the next item is drawn, with
//! probability `affinity`, from the preferred categories (and then, with
//! probability `cooccurrence`, from the planted partners of the previous item
//! when that item is itself preferred); otherwise it is drawn uniformly from the
//! whole catalog. Ratings are high inside preferred categories and low outside.
//! The planted structure is returned as [`SyntheticMeta`].

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, IndexedRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Map;

use super::{Catalog, Interaction, InteractionStream, Item, ItemId, UserId};
use crate::rng;
use crate::{Error, Result};

const CATEGORY_NAMES: [&str; 12] = [
    "Games",
    "Music",
    "Office",
    "Instruments",
    "Books",
    "Garden",
    "Kitchen",
    "Toys",
    "Sports",
    "Beauty",
    "Tools",
    "Pets",
];
const SUBCATEGORY_NAMES: [&str; 4] = ["Accessories", "Classics", "Essentials", "Deluxe"];
const ADJECTIVES: [&str; 10] = [
    "Compact", "Classic", "Wireless", "Deluxe", "Vintage", "Portable", "Premium", "Smart",
    "Retro", "Ultra",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_categories: usize,
    pub subcategories: usize,
    /// Inclusive range of sessions per user.
    pub sessions_per_user: [usize; 2],
    /// Inclusive range of interactions per session.
    pub items_per_session: [usize; 2],
    pub affinity: f64,
    pub cooccurrence: f64,
    pub partners_per_item: usize,
    pub horizon_days: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_users: 500,
            n_categories: 10,
            subcategories: 3,
            sessions_per_user: [2, 4],
            items_per_session: [2, 4],
            affinity: 0.9,
            cooccurrence: 0.5,
            partners_per_item: 3,
            horizon_days: 365,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.n_items == 0 {
            return bad("n_items must be positive");
        }
        if self.n_users == 0 {
            return bad("n_users must be positive");
        }
        if self.n_categories == 0 {
            return bad("n_categories must be positive");
        }
        if self.subcategories == 0 {
            return bad("subcategories must be positive");
        }
        if !(0.0..=1.0).contains(&self.affinity) || !(0.0..=1.0).contains(&self.cooccurrence) {
            return bad("affinity and cooccurrence must lie in [0, 1]");
        }
        let [s0, s1] = self.sessions_per_user;
        let [i0, i1] = self.items_per_session;
        if s0 == 0 || s0 > s1 || i0 == 0 || i0 > i1 {
            return bad("session ranges must be nonempty with min >= 1");
        }
        if self.horizon_days < s1 {
            return bad("horizon_days must be at least the maximum session count");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub seed: u64,
    pub config: SyntheticConfig,
    pub categories: Vec<String>,
    pub user_preferences: BTreeMap<String, Vec<String>>,
    pub partners: BTreeMap<String, Vec<String>>,
    /// Share of generated interactions whose item lies in a preferred category.
    pub within_preferred_fraction: f64,
    /// Share of generated interactions that followed a planted partner link.
    pub partner_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub catalog: Catalog,
    pub stream: InteractionStream,
    pub meta: SyntheticMeta,
}

fn category_name(c: usize) -> String {
    CATEGORY_NAMES
        .get(c)
        .map(|s| (*s).to_owned())
        .unwrap_or_else(|| format!("Category {c}"))
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let n = config.n_items;
    let cats: Vec<String> = (0..config.n_categories).map(category_name).collect();

    // catalog
    let mut rng = rng::stream(&[seed, 1]);
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut item_cat = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % config.n_categories;
        let sub = rng.random_range(0..config.subcategories);
        let sub_name = SUBCATEGORY_NAMES
            .get(sub)
            .map(|s| (*s).to_owned())
            .unwrap_or_else(|| format!("Line {sub}"));
        let adjective = ADJECTIVES.choose(&mut rng).expect("nonempty");
        let base = 8.0 * (1 + c % 5) as f64;
        let price = (base * f64::exp(noise.sample(&mut rng)) * 100.0).round() / 100.0;
        let rating = (30.0 + 20.0 * rng.random::<f64>().sqrt()).round() / 10.0;
        let reviews = f64::exp(rng.random::<f64>() * 7.0).floor() as u64;
        item_cat.push(c);
        weights.push(rating * rating);
        items.push(Item {
            item_id: ItemId(format!("I{i:04}")),
            title: format!("{adjective} {} {sub_name} #{i:03}", cats[c]),
            categories: vec![cats[c].clone(), format!("{} {sub_name}", cats[c])],
            price: Some(price),
            avg_rating: Some(rating),
            review_count: Some(reviews),
            extra: Map::new(),
        });
    }
    let by_cat: Vec<Vec<usize>> = (0..config.n_categories)
        .map(|c| (0..n).filter(|&i| item_cat[i] == c).collect())
        .collect();

    // planted partners, same category
    let mut rng = rng::stream(&[seed, 2]);
    let partners: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let pool: Vec<usize> = by_cat[item_cat[i]]
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect();
            let k = config.partners_per_item.min(pool.len());
            index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|p| pool[p])
                .collect()
        })
        .collect();

    // users and their streams
    let mut interactions = Vec::new();
    let mut user_preferences = BTreeMap::new();
    let mut within = 0usize;
    let mut via_partner = 0usize;
    for u in 0..config.n_users {
        let mut rng = rng::stream(&[seed, 3, u as u64]);
        let user_id = UserId(format!("U{u:04}"));
        let n_pref = rng.random_range(1..=3usize).min(config.n_categories);
        let preferred: Vec<usize> = index::sample(&mut rng, config.n_categories, n_pref).into_vec();
        user_preferences.insert(
            user_id.0.clone(),
            preferred.iter().map(|&c| cats[c].clone()).collect(),
        );

        let n_sessions =
            rng.random_range(config.sessions_per_user[0]..=config.sessions_per_user[1]);
        let mut days = index::sample(&mut rng, config.horizon_days, n_sessions).into_vec();
        days.sort_unstable();

        let mut seen: HashSet<usize> = HashSet::new();
        let mut prev: Option<usize> = None;
        for day in days {
            let mut ts = day as i64 * 86_400 + rng.random_range(0..43_200);
            let len = rng.random_range(config.items_per_session[0]..=config.items_per_session[1]);
            for _ in 0..len {
                let mut pick = None;
                let mut partner_pick = false;
                for _attempt in 0..10 {
                    let (cand, is_partner) = if rng.random::<f64>() < config.affinity {
                        match prev {
                            Some(p)
                                if preferred.contains(&item_cat[p])
                                    && !partners[p].is_empty()
                                    && rng.random::<f64>() < config.cooccurrence =>
                            {
                                (*partners[p].choose(&mut rng).expect("nonempty"), true)
                            }
                            _ => {
                                let c = *preferred.choose(&mut rng).expect("nonempty");
                                let pool = &by_cat[c];
                                if pool.is_empty() {
                                    (rng.random_range(0..n), false)
                                } else {
                                    let w: Vec<f64> = pool.iter().map(|&i| weights[i]).collect();
                                    (pool[weighted_index(&w, rng.random::<f64>())], false)
                                }
                            }
                        }
                    } else {
                        (rng.random_range(0..n), false)
                    };
                    pick = Some(cand);
                    partner_pick = is_partner;
                    if !seen.contains(&cand) {
                        break;
                    }
                }
                let item = pick.expect("at least one attempt");
                seen.insert(item);
                let in_pref = preferred.contains(&item_cat[item]);
                within += usize::from(in_pref);
                via_partner += usize::from(partner_pick);
                let rating = if rng.random::<f64>() < 0.8 {
                    Some(if in_pref {
                        rng.random_range(4..=5) as f64
                    } else {
                        rng.random_range(1..=3) as f64
                    })
                } else {
                    None
                };
                interactions.push(Interaction {
                    user_id: user_id.clone(),
                    item_id: items[item].item_id.clone(),
                    timestamp: ts,
                    rating,
                    extra: Map::new(),
                });
                prev = Some(item);
                ts += rng.random_range(300..2_400);
            }
        }
    }

    let total = interactions.len().max(1) as f64;
    let meta = SyntheticMeta {
        seed,
        config: config.clone(),
        categories: cats,
        user_preferences,
        partners: partners
            .iter()
            .enumerate()
            .map(|(i, ps)| {
                (
                    items[i].item_id.0.clone(),
                    ps.iter().map(|&p| items[p].item_id.0.clone()).collect(),
                )
            })
            .collect(),
        within_preferred_fraction: within as f64 / total,
        partner_fraction: via_partner as f64 / total,
    };
    Ok(SyntheticData {
        catalog: Catalog::new(items)?,
        stream: InteractionStream::from_interactions(interactions),
        meta,
    })
}

fn weighted_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}
