use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{Catalog, InteractionStream, ItemId, RecommendationRequest, SplitTag, UserId};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Maximum number of history items shown to the agent.
pub const HISTORY_CAP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestShape {
    pub n_candidates: usize,
    pub history_cap: usize,
}

impl Default for RequestShape {
    fn default() -> Self {
        Self {
            n_candidates: 20,
            history_cap: HISTORY_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    #[serde(flatten)]
    pub shape: RequestShape,
    /// Minimum number of prior interactions for a target to be kept (at least 1).
    pub min_history: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            shape: RequestShape::default(),
            min_history: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<RecommendationRequest>,
    pub val: Vec<RecommendationRequest>,
    pub test: Vec<RecommendationRequest>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn part(&self, tag: SplitTag) -> &[RecommendationRequest] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &RecommendationRequest> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// A target interaction: the `position`-th entry of a user's sorted stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetRef {
    pub user_id: UserId,
    pub position: usize,
    pub timestamp: i64,
}

fn check_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Orders every eligible target globally by time and cuts it at the ratios.
pub fn split_targets(
    stream: &InteractionStream,
    ratios: [f64; 3],
    min_history: usize,
) -> Result<[Vec<TargetRef>; 3]> {
    check_ratios(&ratios)?;
    let min_history = min_history.max(1);
    let mut targets: Vec<TargetRef> = stream
        .users()
        .flat_map(|(user, list)| {
            list.iter()
                .enumerate()
                .skip(min_history)
                .map(move |(position, it)| TargetRef {
                    user_id: user.clone(),
                    position,
                    timestamp: it.timestamp,
                })
        })
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptySplit(
            "no interaction has enough prior history to serve as a target".into(),
        ));
    }
    targets.sort_by(|a, b| {
        (a.timestamp, &a.user_id, a.position).cmp(&(b.timestamp, &b.user_id, b.position))
    });

    let total = targets.len();
    let cut = |frac: f64| ((frac * total as f64 + 1e-9).floor() as usize).min(total);
    let c1 = cut(ratios[0]);
    let c2 = cut(ratios[0] + ratios[1]).max(c1);
    let test = targets.split_off(c2);
    let val = targets.split_off(c1);
    Ok([targets, val, test])
}

/// Builds one request for the target at `target_position` of `user_id`'s stream.
///
/// Negatives are drawn uniformly without replacement from catalog items the user
/// has not interacted with before the target (and never the target itself), then
/// the candidate list is shuffled. The returned request has `id = 0` and the
/// train tag; callers assign both.
pub fn build_request(
    catalog: &Catalog,
    stream: &InteractionStream,
    user_id: &str,
    target_position: usize,
    shape: &RequestShape,
    rng: &mut Rng,
) -> Result<RecommendationRequest> {
    let list = stream.user(user_id);
    if target_position >= list.len() {
        return Err(Error::Construction(format!(
            "user `{user_id}` has no interaction at position {target_position}"
        )));
    }
    if target_position == 0 {
        return Err(Error::Construction(format!(
            "target of user `{user_id}` has no prior interaction"
        )));
    }
    if shape.n_candidates == 0 {
        return Err(Error::Construction("candidate set size must be positive".into()));
    }
    let target = &list[target_position];
    let prior = &list[..target_position];
    let keep = shape.history_cap.min(prior.len());
    let history: Vec<ItemId> = prior[prior.len() - keep..]
        .iter()
        .map(|it| it.item_id.clone())
        .collect();

    let excluded: HashSet<&str> = prior
        .iter()
        .map(|it| it.item_id.as_str())
        .chain(std::iter::once(target.item_id.as_str()))
        .collect();
    let pool: Vec<&ItemId> = catalog
        .items()
        .iter()
        .map(|item| &item.item_id)
        .filter(|id| !excluded.contains(id.as_str()))
        .collect();
    let need = shape.n_candidates - 1;
    if pool.len() < need {
        return Err(Error::Construction(format!(
            "user `{user_id}` leaves only {} eligible negatives, need {need}",
            pool.len()
        )));
    }
    let mut candidates: Vec<ItemId> = index::sample(rng, pool.len(), need)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    candidates.push(target.item_id.clone());
    candidates.shuffle(rng);
    let positive_index = candidates
        .iter()
        .position(|c| *c == target.item_id)
        .expect("target was inserted")
        + 1;

    Ok(RecommendationRequest {
        id: 0,
        user_id: target.user_id.clone(),
        timestamp: target.timestamp,
        target_position,
        history,
        candidates,
        positive_index,
        split: SplitTag::Train,
    })
}

/// Splits chronologically and materialises one request per target.
///
/// Request ids are the global chronological rank of the target; each request's
/// negatives and shuffle come from a stream keyed by `(seed, id)`.
pub fn chronological_split(
    catalog: &Catalog,
    stream: &InteractionStream,
    config: &SplitConfig,
) -> Result<DatasetSplit> {
    let parts = split_targets(stream, config.ratios, config.min_history)?;
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut out = DatasetSplit {
        split_seed: config.seed,
        ..Default::default()
    };
    let mut next_id = 0u64;
    for (targets, tag) in parts.iter().zip(tags) {
        let mut requests = Vec::with_capacity(targets.len());
        for t in targets {
            let id = next_id;
            next_id += 1;
            let mut rng = rng::stream(&[config.seed, id]);
            let mut req = build_request(
                catalog,
                stream,
                t.user_id.as_str(),
                t.position,
                &config.shape,
                &mut rng,
            )?;
            req.id = id;
            req.split = tag;
            requests.push(req);
        }
        match tag {
            SplitTag::Train => out.train = requests,
            SplitTag::Val => out.val = requests,
            SplitTag::Test => out.test = requests,
        }
    }
    Ok(out)
}

/// The stream with every validation and test target removed: what models fit
/// on the training period may see.
pub fn train_visible(stream: &InteractionStream, split: &DatasetSplit) -> InteractionStream {
    let held_out: HashSet<(&str, usize)> = split
        .val
        .iter()
        .chain(&split.test)
        .map(|r| (r.user_id.as_str(), r.target_position))
        .collect();
    stream.filtered(|user, pos, _| !held_out.contains(&(user.as_str(), pos)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Interaction, Item};
    use serde_json::Map;

    fn catalog(n: usize) -> Catalog {
        Catalog::new(
            (0..n)
                .map(|i| Item {
                    item_id: ItemId(format!("i{i:03}")),
                    title: format!("Item {i}"),
                    categories: vec![format!("c{}", i % 4)],
                    price: None,
                    avg_rating: None,
                    review_count: None,
                    extra: Map::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn inter(user: &str, item: usize, ts: i64) -> Interaction {
        Interaction {
            user_id: UserId::from(user),
            item_id: ItemId(format!("i{item:03}")),
            timestamp: ts,
            rating: None,
            extra: Map::new(),
        }
    }

    #[test]
    fn default_ratios_cut_ten_targets_eight_one_one() {
        // two users, 6 interactions each -> 5 targets each
        let mut v = Vec::new();
        for k in 0..6 {
            v.push(inter("a", k, 10 * k as i64));
            v.push(inter("b", 10 + k, 10 * k as i64 + 5));
        }
        let stream = InteractionStream::from_interactions(v);
        let split = chronological_split(&catalog(60), &stream, &SplitConfig::default()).unwrap();
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let stream =
            InteractionStream::from_interactions((0..5).map(|k| inter("a", k, k as i64)));
        let [train, val, test] = split_targets(&stream, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (4, 0, 0));
    }

    #[test]
    fn ratios_are_validated() {
        let stream = InteractionStream::from_interactions((0..5).map(|k| inter("a", k, k as i64)));
        assert!(matches!(
            split_targets(&stream, [0.5, 0.1, 0.1], 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split_targets(&InteractionStream::default(), [0.8, 0.1, 0.1], 1),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn history_is_capped_and_negatives_avoid_it() {
        let stream =
            InteractionStream::from_interactions((0..15).map(|k| inter("a", k, k as i64)));
        let cat = catalog(60);
        let mut rng = rng::stream(&[3]);
        let req = build_request(&cat, &stream, "a", 14, &RequestShape::default(), &mut rng).unwrap();
        assert_eq!(req.history.len(), 10);
        assert_eq!(req.history.last().unwrap().as_str(), "i013");
        assert_eq!(req.candidates.len(), 20);
        assert_eq!(req.positive().as_str(), "i014");
        let prior: HashSet<String> = (0..14).map(|k| format!("i{k:03}")).collect();
        let negatives: Vec<_> = req
            .candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| i + 1 != req.positive_index)
            .collect();
        assert_eq!(negatives.len(), 19);
        assert!(negatives.iter().all(|(_, c)| !prior.contains(c.as_str())));
        assert_eq!(req.candidates.iter().filter(|c| c.as_str() == "i014").count(), 1);
    }

    #[test]
    fn request_construction_is_seed_deterministic() {
        let stream =
            InteractionStream::from_interactions((0..4).map(|k| inter("a", k, k as i64)));
        let cat = catalog(40);
        let shape = RequestShape::default();
        let a = build_request(&cat, &stream, "a", 3, &shape, &mut rng::stream(&[9])).unwrap();
        let b = build_request(&cat, &stream, "a", 3, &shape, &mut rng::stream(&[9])).unwrap();
        assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn too_small_catalog_is_a_construction_error() {
        let stream =
            InteractionStream::from_interactions((0..4).map(|k| inter("a", k, k as i64)));
        let err = build_request(
            &catalog(10),
            &stream,
            "a",
            3,
            &RequestShape::default(),
            &mut rng::stream(&[1]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn train_visible_drops_held_out_targets_only() {
        let mut v = Vec::new();
        for k in 0..6 {
            v.push(inter("a", k, 10 * k as i64));
            v.push(inter("b", 10 + k, 10 * k as i64 + 5));
        }
        let stream = InteractionStream::from_interactions(v);
        let split = chronological_split(&catalog(60), &stream, &SplitConfig::default()).unwrap();
        let visible = train_visible(&stream, &split);
        assert_eq!(visible.len(), stream.len() - 2);
        for r in split.val.iter().chain(&split.test) {
            assert!(visible
                .user(r.user_id.as_str())
                .iter()
                .all(|it| it.timestamp != r.timestamp || it.item_id != *r.positive()));
        }
    }
}
