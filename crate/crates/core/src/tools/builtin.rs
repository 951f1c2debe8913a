use std::collections::{BTreeMap, HashMap};

use super::{
    CategoryGroup, ItemSummary, Neighbor, Observation, SessionSummary, ToolContext, ToolId,
    ToolOutput,
};
use crate::collab::cosine;
use crate::corpus::{Interaction, Item};

pub(super) fn run(tool: ToolId, arg: Option<&str>, ctx: &ToolContext<'_>) -> Observation {
    match tool {
        ToolId::GetUserProfile => user_profile(ctx),
        ToolId::ItemInfoSearch => item_info(arg.unwrap_or_default(), ctx),
        ToolId::CandidatesAnalyze => candidates_analyze(ctx),
        ToolId::GetSessionBehavior => session_behavior(ctx),
        ToolId::GetRatingBehavior => rating_behavior(ctx),
        ToolId::GetSimilarItems => similar_items(arg.unwrap_or_default(), ctx),
        ToolId::GetSimilarUsers => similar_users(ctx),
    }
}

fn candidate_items<'a>(ctx: &ToolContext<'a>) -> Vec<Option<&'a Item>> {
    ctx.request
        .candidates
        .iter()
        .map(|c| ctx.catalog.get(c.as_str()))
        .collect()
}

/// Share of `pool` falling in each candidate's primary category.
fn category_shares(ctx: &ToolContext<'_>, pool: &[&Item]) -> Vec<f64> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for item in pool {
        *counts.entry(item.primary_category()).or_default() += 1;
    }
    let total = pool.len().max(1) as f64;
    candidate_items(ctx)
        .iter()
        .map(|c| match c {
            Some(item) => *counts.get(item.primary_category()).unwrap_or(&0) as f64 / total,
            None => 0.0,
        })
        .collect()
}

fn humanize(seconds: i64) -> String {
    let s = seconds.max(0);
    if s < 3600 {
        format!("{}m", s / 60)
    } else if s < 86_400 {
        format!("{}h", s / 3600)
    } else {
        format!("{}d", s / 86_400)
    }
}

fn find_by_title<'a>(ctx: &ToolContext<'a>, name: &str) -> Vec<&'a Item> {
    let items = ctx.catalog.items();
    if let Some(exact) = items.iter().find(|i| i.title == name) {
        return vec![exact];
    }
    let needle = name.to_lowercase();
    if needle.trim().is_empty() {
        return Vec::new();
    }
    items
        .iter()
        .filter(|i| i.title.to_lowercase().contains(&needle))
        .take(5)
        .collect()
}

fn user_profile(ctx: &ToolContext<'_>) -> Observation {
    let profile = ctx.profiles.profile(
        ctx.request.user_id,
        ctx.request.timestamp,
        ctx.prior,
        ctx.catalog,
    );
    let candidate_signal = candidate_items(ctx)
        .iter()
        .map(|c| c.map_or(0.0, |item| profile.category_share(item.primary_category())))
        .collect();
    Observation::success(
        profile.render(),
        ToolOutput::UserProfile {
            profile,
            candidate_signal,
        },
    )
}

fn item_info(name: &str, ctx: &ToolContext<'_>) -> Observation {
    let found = find_by_title(ctx, name);
    if found.is_empty() {
        return Observation::failure(format!("item named \"{name}\" not found"));
    }
    let mut text = format!(
        "Found {} item{} named \"{name}\":\n",
        found.len(),
        if found.len() == 1 { "" } else { "s" }
    );
    let matches: Vec<ItemSummary> = found
        .iter()
        .map(|item| ItemSummary {
            item_id: item.item_id.0.clone(),
            title: item.title.clone(),
            categories: item.categories.clone(),
            price: item.price,
            avg_rating: item.avg_rating,
            review_count: item.review_count,
        })
        .collect();
    for m in &matches {
        text.push_str(&format!("- {}\n  Categories: {}\n", m.title, m.categories.join(", ")));
        if let Some(p) = m.price {
            text.push_str(&format!("  Price: ${p:.2}\n"));
        }
        if let Some(r) = m.avg_rating {
            text.push_str(&format!(
                "  Rating: {r:.1} ({} reviews)\n",
                m.review_count.unwrap_or(0)
            ));
        }
    }
    let candidate_signal = ctx
        .request
        .candidates
        .iter()
        .map(|c| {
            found
                .iter()
                .find(|item| item.item_id == *c)
                .map(|item| item.avg_rating.map_or(0.5, |r| r / 5.0))
        })
        .collect();
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::ItemInfo {
            matches,
            candidate_signal,
        },
    )
}

fn candidates_analyze(ctx: &ToolContext<'_>) -> Observation {
    let mut groups: BTreeMap<String, CategoryGroup> = BTreeMap::new();
    for (i, c) in ctx.request.candidates.iter().enumerate() {
        let (path, title) = match ctx.catalog.get(c.as_str()) {
            Some(item) => (item.category_path(), item.title.clone()),
            None => ("Unknown".to_owned(), c.0.clone()),
        };
        let g = groups.entry(path.clone()).or_insert_with(|| CategoryGroup {
            category_path: path,
            indices: Vec::new(),
            titles: Vec::new(),
        });
        g.indices.push(i + 1);
        g.titles.push(title);
    }
    let groups: Vec<CategoryGroup> = groups.into_values().collect();
    let mut text = format!(
        "Candidate Analysis by Category ({} groups):\n",
        groups.len()
    );
    for g in &groups {
        text.push_str(&format!("[{}] {} items\n", g.category_path, g.indices.len()));
        for (idx, title) in g.indices.iter().zip(&g.titles) {
            text.push_str(&format!("  {idx}. {title}\n"));
        }
    }
    let history: Vec<&Item> = ctx
        .request
        .history
        .iter()
        .filter_map(|h| ctx.catalog.get(h.as_str()))
        .collect();
    let candidate_signal = category_shares(ctx, &history);
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::CandidateGroups {
            groups,
            candidate_signal,
        },
    )
}

fn sessions(prior: &[Interaction], gap: i64) -> Vec<&[Interaction]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=prior.len() {
        if i == prior.len() || prior[i].timestamp - prior[i - 1].timestamp > gap {
            if i > start {
                out.push(&prior[start..i]);
            }
            start = i;
        }
    }
    out
}

fn session_behavior(ctx: &ToolContext<'_>) -> Observation {
    let all = sessions(ctx.prior, ctx.config.session_gap);
    let recent: Vec<&[Interaction]> = all
        .iter()
        .rev()
        .take(ctx.config.sessions_shown.max(1))
        .copied()
        .collect();
    let summaries: Vec<SessionSummary> = recent
        .iter()
        .map(|s| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for it in *s {
                if let Some(item) = ctx.catalog.get(it.item_id.as_str()) {
                    *counts.entry(item.primary_category().to_owned()).or_default() += 1;
                }
            }
            let mut dominant: Vec<(String, usize)> = counts.into_iter().collect();
            dominant.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            SessionSummary {
                age: ctx.request.timestamp - s.last().map_or(0, |it| it.timestamp),
                size: s.len(),
                dominant,
            }
        })
        .collect();
    let mut text = format!("User's most recent {} sessions:\n", summaries.len());
    for (i, s) in summaries.iter().enumerate() {
        let cats: Vec<String> = s.dominant.iter().map(|(c, n)| format!("{c} ({n})")).collect();
        text.push_str(&format!(
            "- Session {} ({} ago, {} items): {}\n",
            i + 1,
            humanize(s.age),
            s.size,
            cats.join(", ")
        ));
    }
    let latest: Vec<&Item> = recent
        .first()
        .map(|s| {
            s.iter()
                .filter_map(|it| ctx.catalog.get(it.item_id.as_str()))
                .collect()
        })
        .unwrap_or_default();
    let candidate_signal = category_shares(ctx, &latest);
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::Sessions {
            sessions: summaries,
            candidate_signal,
        },
    )
}

fn rating_behavior(ctx: &ToolContext<'_>) -> Observation {
    let (mut five, mut neutral, mut low) = (Vec::new(), Vec::new(), Vec::new());
    // per primary category: (five, neutral, low)
    let mut by_cat: HashMap<&str, (f64, f64, f64)> = HashMap::new();
    let mut rated = 0usize;
    for it in ctx.prior.iter().rev() {
        let (Some(r), Some(item)) = (it.rating, ctx.catalog.get(it.item_id.as_str())) else {
            continue;
        };
        rated += 1;
        let slot = by_cat.entry(item.primary_category()).or_default();
        if r >= 5.0 {
            five.push(item.title.clone());
            slot.0 += 1.0;
        } else if r >= 3.0 {
            neutral.push(item.title.clone());
            slot.1 += 1.0;
        } else {
            low.push(item.title.clone());
            slot.2 += 1.0;
        }
    }
    let mut text = format!("Rating behaviour over {rated} rated items:\n");
    for (label, list) in [
        ("Five-star items (=5)", &five),
        ("Neutral items (>=3)", &neutral),
        ("Low-rated items (<3)", &low),
    ] {
        let shown: Vec<&str> = list.iter().take(5).map(String::as_str).collect();
        text.push_str(&format!("- {label}: {}", list.len()));
        if !shown.is_empty() {
            text.push_str(&format!(" [{}]", shown.join("; ")));
        }
        text.push('\n');
    }
    let denom = rated.max(1) as f64;
    let candidate_signal = candidate_items(ctx)
        .iter()
        .map(|c| {
            c.and_then(|item| by_cat.get(item.primary_category()))
                .map_or(0.0, |(f, n, l)| (f + 0.5 * n - l) / denom)
        })
        .collect();
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::Ratings {
            five_star: five,
            neutral,
            low,
            candidate_signal,
        },
    )
}

fn similar_items(title: &str, ctx: &ToolContext<'_>) -> Observation {
    let collab = ctx.collab.expect("checked by the registry");
    let Some(query) = find_by_title(ctx, title).into_iter().next() else {
        return Observation::failure(format!("item titled \"{title}\" not found"));
    };
    let qid = query.item_id.as_str();
    let neighbors: Vec<(String, f64)> = collab
        .similar_items(qid, ctx.config.similar_k.max(1))
        .map(|v| v.into_iter().map(|(id, s)| (id.0, s)).collect())
        .unwrap_or_default();
    let mut text = format!("Items frequently co-interacted with \"{}\":\n", query.title);
    for (i, (id, s)) in neighbors.iter().enumerate() {
        let t = ctx.catalog.get(id).map_or(id.as_str(), |it| it.title.as_str());
        text.push_str(&format!("{}. {t} (similarity {s:.3})\n", i + 1));
    }
    let candidate_signal = ctx
        .request
        .candidates
        .iter()
        .map(|c| collab.item_similarity(qid, c.as_str()))
        .collect();
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::SimilarItems {
            query_item: query.item_id.0.clone(),
            neighbors,
            candidate_signal,
        },
    )
}

fn similar_users(ctx: &ToolContext<'_>) -> Observation {
    let collab = ctx.collab.expect("checked by the registry");
    // Query with the visible history, not the stored user vector, so the
    // target interaction never shapes the query.
    let query = collab.mean_item_vector(ctx.request.history.iter().map(|h| h.as_str()));
    let hits = collab.similar_users_to(
        &query,
        ctx.config.neighbor_k.max(1),
        Some(ctx.request.user_id.as_str()),
    );
    let neighbors: Vec<Neighbor> = hits
        .into_iter()
        .map(|(uid, score)| {
            let recent_titles = ctx
                .visible
                .user(uid.as_str())
                .iter()
                .rev()
                .filter(|it| it.timestamp < ctx.request.timestamp)
                .take(ctx.config.neighbor_titles)
                .map(|it| {
                    ctx.catalog
                        .get(it.item_id.as_str())
                        .map_or_else(|| it.item_id.0.clone(), |item| item.title.clone())
                })
                .collect();
            Neighbor {
                user_id: uid.0,
                score,
                recent_titles,
            }
        })
        .collect();
    let mut text = format!("Found {} users with similar behaviour:\n", neighbors.len());
    for n in &neighbors {
        text.push_str(&format!("- {} (similarity {:.3})", n.user_id, n.score));
        if !n.recent_titles.is_empty() {
            text.push_str(&format!(": recently {}", n.recent_titles.join("; ")));
        }
        text.push('\n');
    }
    let candidate_signal = ctx
        .request
        .candidates
        .iter()
        .map(|c| collab.item_vector(c.as_str()).map_or(0.0, |v| cosine(&query, v)))
        .collect();
    Observation::success(
        text.trim_end().to_owned(),
        ToolOutput::SimilarUsers {
            neighbors,
            candidate_signal,
        },
    )
}

#[cfg(test)]
pub(super) fn split_sessions(prior: &[Interaction], gap: i64) -> Vec<usize> {
    sessions(prior, gap).iter().map(|s| s.len()).collect()
}
