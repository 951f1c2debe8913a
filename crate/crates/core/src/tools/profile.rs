use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, Interaction, UserId};

/// Templated summary of a user's persistent preferences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub user_id: String,
    pub interactions: usize,
    /// Primary categories by descending count, ties by name.
    pub top_categories: Vec<(String, usize)>,
    pub mean_price: Option<f64>,
    pub price_band: Option<String>,
    pub rated: usize,
    pub mean_rating: Option<f64>,
}

fn price_band(mean: f64) -> &'static str {
    if mean < 15.0 {
        "budget"
    } else if mean < 35.0 {
        "mid-range"
    } else {
        "premium"
    }
}

impl Profile {
    pub fn from_history(user_id: &str, history: &[Interaction], catalog: &Catalog) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut prices = Vec::new();
        let mut ratings = Vec::new();
        let mut known = 0usize;
        for it in history {
            if let Some(item) = catalog.get(it.item_id.as_str()) {
                known += 1;
                *counts.entry(item.primary_category()).or_default() += 1;
                prices.extend(item.price);
            }
            ratings.extend(it.rating);
        }
        let mut top_categories: Vec<(String, usize)> =
            counts.into_iter().map(|(c, n)| (c.to_owned(), n)).collect();
        top_categories.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let mean_price = mean(&prices);
        Self {
            user_id: user_id.to_owned(),
            interactions: known,
            top_categories,
            price_band: mean_price.map(|p| price_band(p).to_owned()),
            mean_price,
            rated: ratings.len(),
            mean_rating: mean(&ratings),
        }
    }

    /// Fraction of the profiled interactions whose primary category is `category`.
    pub fn category_share(&self, category: &str) -> f64 {
        if self.interactions == 0 {
            return 0.0;
        }
        self.top_categories
            .iter()
            .find(|(c, _)| c == category)
            .map(|(_, n)| *n as f64 / self.interactions as f64)
            .unwrap_or(0.0)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "User profile for {} ({} interactions):\n",
            self.user_id, self.interactions
        );
        let cats: Vec<String> = self
            .top_categories
            .iter()
            .take(3)
            .map(|(c, n)| format!("{c} ({n})"))
            .collect();
        if cats.is_empty() {
            out.push_str("- Top categories: none yet\n");
        } else {
            out.push_str(&format!("- Top categories: {}\n", cats.join(", ")));
        }
        match (&self.price_band, self.mean_price) {
            (Some(band), Some(p)) => {
                out.push_str(&format!("- Price band: {band} (mean ${p:.2})\n"))
            }
            _ => out.push_str("- Price band: unknown\n"),
        }
        match self.mean_rating {
            Some(r) => out.push_str(&format!(
                "- Rating habits: {} rated, mean {r:.1} stars",
                self.rated
            )),
            None => out.push_str("- Rating habits: no ratings given"),
        }
        out
    }
}

/// Profiles refreshed by the optional post-episode hook.
///
/// Without stored entries every profile is computed on demand from the
/// interactions before the request. A stored profile is used only for
/// requests at or after the time it was computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub update_enabled: bool,
    stored: BTreeMap<UserId, (i64, Profile)>,
}

impl ProfileStore {
    pub fn with_updates() -> Self {
        Self {
            update_enabled: true,
            stored: BTreeMap::new(),
        }
    }

    pub fn profile(
        &self,
        user_id: &UserId,
        as_of: i64,
        prior: &[Interaction],
        catalog: &Catalog,
    ) -> Profile {
        match self.stored.get(user_id) {
            Some((at, p)) if *at <= as_of => p.clone(),
            _ => Profile::from_history(user_id.as_str(), prior, catalog),
        }
    }

    /// Post-episode hook: recompute a user's profile from `history` as of
    /// `as_of`. No-op unless updates are enabled.
    pub fn update(
        &mut self,
        user_id: &UserId,
        as_of: i64,
        history: &[Interaction],
        catalog: &Catalog,
    ) {
        if self.update_enabled {
            let p = Profile::from_history(user_id.as_str(), history, catalog);
            self.stored.insert(user_id.clone(), (as_of, p));
        }
    }

    pub fn stored(&self) -> usize {
        self.stored.len()
    }
}
