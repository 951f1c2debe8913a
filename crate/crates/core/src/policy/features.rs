use serde::{Deserialize, Serialize};

use crate::tools::{Observation, ToolCall, ToolContext, ToolId, ToolOutput, ToolRegistry};

/// Width of the per-candidate scoring feature vector.
pub const SCORE_DIM: usize = 8;

/// Scoring feature slots. Slot 0 is available before any tool runs; every
/// other slot stays 0 until the tool that provides it has returned.
pub mod slot {
    pub const PRICE_MATCH: usize = 0;
    pub const CATEGORY_MATCH: usize = 1;
    pub const PROFILE: usize = 2;
    pub const SESSION: usize = 3;
    pub const RATING: usize = 4;
    pub const ITEM_SIMILARITY: usize = 5;
    pub const USER_SIMILARITY: usize = 6;
    pub const ITEM_QUALITY: usize = 7;
}

pub fn slot_for(tool: ToolId) -> usize {
    match tool {
        ToolId::GetUserProfile => slot::PROFILE,
        ToolId::ItemInfoSearch => slot::ITEM_QUALITY,
        ToolId::CandidatesAnalyze => slot::CATEGORY_MATCH,
        ToolId::GetSessionBehavior => slot::SESSION,
        ToolId::GetRatingBehavior => slot::RATING,
        ToolId::GetSimilarItems => slot::ITEM_SIMILARITY,
        ToolId::GetSimilarUsers => slot::USER_SIMILARITY,
    }
}

/// What the agent has learned so far about one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceState {
    /// Calls attempted per tool, in [`ToolId::ALL`] order.
    pub calls: [u32; 7],
    /// Per-candidate feature rows.
    pub features: Vec<[f64; SCORE_DIM]>,
    /// Candidates already looked up with `item_info_search`.
    pub searched: Vec<bool>,
}

impl EvidenceState {
    pub fn from_features(features: Vec<[f64; SCORE_DIM]>) -> Self {
        let n = features.len();
        Self {
            calls: [0; 7],
            features,
            searched: vec![false; n],
        }
    }

    /// Evidence available before any tool call: price proximity of each
    /// candidate to the mean price of the visible history.
    pub fn initial(ctx: &ToolContext<'_>) -> Self {
        let prices: Vec<f64> = ctx
            .request
            .history
            .iter()
            .filter_map(|h| ctx.catalog.get(h.as_str()).and_then(|i| i.price))
            .filter(|p| *p > 0.0)
            .collect();
        let mean = (!prices.is_empty()).then(|| prices.iter().sum::<f64>() / prices.len() as f64);
        let features = ctx
            .request
            .candidates
            .iter()
            .map(|c| {
                let mut row = [0.0; SCORE_DIM];
                let price = ctx.catalog.get(c.as_str()).and_then(|i| i.price);
                if let (Some(m), Some(p)) = (mean, price) {
                    if p > 0.0 {
                        row[slot::PRICE_MATCH] = 1.0 / (1.0 + (p / m).ln().abs());
                    }
                }
                row
            })
            .collect();
        Self::from_features(features)
    }

    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn invoked(&self, tool: ToolId) -> bool {
        self.calls[tool.index()] > 0
    }

    pub fn distinct_invoked(&self, registry: &ToolRegistry) -> usize {
        registry.tools().iter().filter(|t| self.invoked(**t)).count()
    }

    pub fn record_call(&mut self, call: &ToolCall) {
        if let Some(tool) = call.tool() {
            self.calls[tool.index()] += 1;
        }
    }

    /// Folds a tool's candidate signal into the feature rows. Absorbing the
    /// same observation twice is a no-op; failed observations add nothing.
    pub fn absorb(&mut self, obs: &Observation) {
        let Some(out) = obs.structured.as_ref().filter(|_| obs.ok) else {
            return;
        };
        let col = slot_for(out.tool());
        let signal = out.candidate_signal();
        if signal.len() != self.n() {
            return;
        }
        for (i, v) in signal.into_iter().enumerate() {
            if let Some(v) = v {
                self.features[i][col] = v;
                if matches!(out, ToolOutput::ItemInfo { .. }) {
                    self.searched[i] = true;
                }
            }
        }
    }

    /// Sum of a candidate's features; used to pick default lookup targets.
    fn evidence_mass(&self, i: usize) -> f64 {
        self.features[i].iter().sum()
    }
}

/// The call the reference policy makes when it picks `tool`.
///
/// `item_info_search` looks up the not-yet-searched candidate with the most
/// accumulated evidence (lowest index on ties); `get_similar_items` queries
/// the most recent history item. The choice never depends on parameters.
pub fn default_call(tool: ToolId, ctx: &ToolContext<'_>, evidence: &EvidenceState) -> ToolCall {
    let title_of = |id: &str| {
        ctx.catalog
            .get(id)
            .map_or_else(|| id.to_owned(), |i| i.title.clone())
    };
    match tool {
        ToolId::ItemInfoSearch => {
            let pool: Vec<usize> = (0..evidence.n()).filter(|&i| !evidence.searched[i]).collect();
            let pool = if pool.is_empty() {
                (0..evidence.n()).collect()
            } else {
                pool
            };
            let mut best = pool[0];
            for &i in &pool[1..] {
                if evidence.evidence_mass(i) > evidence.evidence_mass(best) {
                    best = i;
                }
            }
            ToolCall::with_arg(
                tool,
                "item_name",
                title_of(ctx.request.candidates[best].as_str()),
            )
        }
        ToolId::GetSimilarItems => {
            let query = ctx
                .request
                .history
                .last()
                .or_else(|| ctx.request.candidates.first())
                .map(|id| title_of(id.as_str()))
                .unwrap_or_default();
            ToolCall::with_arg(tool, "item_title", query)
        }
        _ => ToolCall::new(tool),
    }
}

/// Evidence after running every registered tool once with default
/// arguments, and `item_info_search` on every candidate.
pub fn full_evidence(ctx: &ToolContext<'_>, registry: &ToolRegistry) -> EvidenceState {
    let mut ev = EvidenceState::initial(ctx);
    for &tool in registry.tools() {
        let repeats = if tool == ToolId::ItemInfoSearch {
            ev.n()
        } else {
            1
        };
        for _ in 0..repeats {
            let call = default_call(tool, ctx, &ev);
            ev.record_call(&call);
            let obs = registry.invoke(&call, ctx);
            ev.absorb(&obs);
        }
    }
    ev
}
