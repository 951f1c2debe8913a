//! List-wise reward: NDCG of the logged item behind a validity gate, plus a
//! small bonus for tool-assisted top-1 hits.

use serde::{Deserialize, Serialize};

use crate::agentloop::{check_ranking, Trajectory};
use crate::corpus::RecommendationRequest;
use crate::{Error, Result};

pub const MISS_PENALTY: f64 = -0.5;
pub const INVALID_PENALTY: f64 = -1.0;
pub const TOOL_BONUS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Ndcg,
    MissPenalty,
    InvalidPenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    /// NDCG on the `Ndcg` branch, otherwise the penalty itself.
    pub rank_component: f64,
    pub gate: Gate,
    pub tool_bonus: f64,
    /// 1-based position of the logged item within the list, if listed.
    pub hit_rank: Option<usize>,
}

/// 1-based position of `positive_index` within `ranking`.
pub fn hit_rank(ranking: &[usize], positive_index: usize) -> Option<usize> {
    ranking.iter().position(|&r| r == positive_index).map(|p| p + 1)
}

/// `1 / log2(rank + 1)` for a listed positive, 0 otherwise. With a single
/// relevant item the ideal DCG is 1.
pub fn ndcg_at_k(ranking: &[usize], positive_index: usize, k: usize) -> Result<f64> {
    let n = ranking.iter().copied().max().unwrap_or(0).max(positive_index);
    if !check_ranking(ranking, n, k).is_valid {
        return Err(Error::Contract(format!(
            "ndcg needs a valid top-{k} ranking, got {ranking:?}"
        )));
    }
    Ok(match hit_rank(ranking, positive_index) {
        Some(r) => 1.0 / ((r + 1) as f64).log2(),
        None => 0.0,
    })
}

pub fn overall_reward(trajectory: &Trajectory, request: &RecommendationRequest, k: usize) -> RewardBreakdown {
    let ranking = match (&trajectory.ranking, trajectory.verdict.is_valid) {
        (Some(r), true) if check_ranking(r, request.n(), k).is_valid => r,
        _ => {
            return RewardBreakdown {
                total: INVALID_PENALTY,
                rank_component: INVALID_PENALTY,
                gate: Gate::InvalidPenalty,
                tool_bonus: 0.0,
                hit_rank: None,
            }
        }
    };
    let hit = hit_rank(ranking, request.positive_index);
    let Some(rank) = hit else {
        return RewardBreakdown {
            total: MISS_PENALTY,
            rank_component: MISS_PENALTY,
            gate: Gate::MissPenalty,
            tool_bonus: 0.0,
            hit_rank: None,
        };
    };
    let ndcg = ndcg_at_k(ranking, request.positive_index, k).expect("ranking checked above");
    let tool_bonus = if rank == 1 && trajectory.n_tool > 0 {
        TOOL_BONUS
    } else {
        0.0
    };
    RewardBreakdown {
        total: ndcg + tool_bonus,
        rank_component: ndcg,
        gate: Gate::Ndcg,
        tool_bonus,
        hit_rank: hit,
    }
}

/// Scores `trajectory` in place and returns the total.
pub fn assign_reward(trajectory: &mut Trajectory, request: &RecommendationRequest, k: usize) -> f64 {
    let r = overall_reward(trajectory, request, k);
    let total = r.total;
    trajectory.reward = Some(r);
    total
}
