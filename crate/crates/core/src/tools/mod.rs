//! Tool registry and the seven recommendation tools.
//!
//! Every tool is a pure function of a [`ToolCall`] and a [`ToolContext`]. The
//! context only carries a [`RequestView`], so no tool can tell which candidate
//! is the logged positive. Tool failures come back as observations with
//! `ok = false`; they never abort a trajectory.
//!
//! Besides human-readable text, each successful observation carries a
//! per-candidate signal: the number the reference policy folds into its
//! scoring features once that tool has run.

mod builtin;
mod profile;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::collab::CollabModel;
use crate::corpus::{Catalog, Interaction, InteractionStream, RequestView};
use crate::{Error, Result};

pub use profile::{Profile, ProfileStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    GetUserProfile,
    ItemInfoSearch,
    CandidatesAnalyze,
    GetSessionBehavior,
    GetRatingBehavior,
    GetSimilarItems,
    GetSimilarUsers,
}

impl ToolId {
    /// All tools in action-index order.
    pub const ALL: [ToolId; 7] = [
        ToolId::GetUserProfile,
        ToolId::ItemInfoSearch,
        ToolId::CandidatesAnalyze,
        ToolId::GetSessionBehavior,
        ToolId::GetRatingBehavior,
        ToolId::GetSimilarItems,
        ToolId::GetSimilarUsers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToolId::GetUserProfile => "get_user_profile",
            ToolId::ItemInfoSearch => "item_info_search",
            ToolId::CandidatesAnalyze => "candidates_analyze",
            ToolId::GetSessionBehavior => "get_session_behavior",
            ToolId::GetRatingBehavior => "get_rating_behavior",
            ToolId::GetSimilarItems => "get_similar_items",
            ToolId::GetSimilarUsers => "get_similar_users",
        }
    }

    /// Position in [`ToolId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn needs_collab(self) -> bool {
        matches!(self, ToolId::GetSimilarItems | ToolId::GetSimilarUsers)
    }

    fn description(self) -> &'static str {
        match self {
            ToolId::GetUserProfile => {
                "Summarise the user's persistent preferences: top categories, price band and rating habits."
            }
            ToolId::ItemInfoSearch => {
                "Look up an item by name and return its categories, price, rating and review count."
            }
            ToolId::CandidatesAnalyze => {
                "Group the candidate items by category path, listing index and title per group."
            }
            ToolId::GetSessionBehavior => {
                "Summarise the user's most recent sessions by dominant category."
            }
            ToolId::GetRatingBehavior => {
                "Partition the user's rated history into five-star, neutral and low-rated items."
            }
            ToolId::GetSimilarItems => {
                "Retrieve items that co-occur with a given item in other users' histories."
            }
            ToolId::GetSimilarUsers => {
                "Retrieve users with similar histories and their recent items."
            }
        }
    }

    /// Required string argument, if any.
    fn argument(self) -> Option<(&'static str, &'static str)> {
        match self {
            ToolId::ItemInfoSearch => Some(("item_name", "Exact or partial item title.")),
            ToolId::GetSimilarItems => Some(("item_title", "Title of the query item.")),
            _ => None,
        }
    }

    pub fn schema(self) -> ToolSchema {
        let mut properties = BTreeMap::new();
        let mut required = Vec::new();
        if let Some((arg, desc)) = self.argument() {
            properties.insert(
                arg.to_owned(),
                ParamSpec {
                    kind: "string".into(),
                    description: desc.into(),
                },
            );
            required.push(arg.to_owned());
        }
        ToolSchema {
            name: self.name().to_owned(),
            description: self.description().to_owned(),
            parameters: Parameters {
                kind: "object".into(),
                properties,
                required,
            },
        }
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToolId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Lookup {
                kind: "tool",
                id: s.to_owned(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    #[serde(rename = "type")]
    pub kind: String,
    pub properties: BTreeMap<String, ParamSpec>,
    pub required: Vec<String>,
}

/// Function-calling signature of one tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Parameters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(tool: ToolId) -> Self {
        Self {
            name: tool.name().to_owned(),
            arguments: Map::new(),
        }
    }

    pub fn with_arg(tool: ToolId, key: &str, value: impl Into<String>) -> Self {
        let mut call = Self::new(tool);
        call.arguments.insert(key.to_owned(), Value::String(value.into()));
        call
    }

    pub fn tool(&self) -> Option<ToolId> {
        self.name.parse().ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub category_path: String,
    /// 1-based candidate indices.
    pub indices: Vec<usize>,
    pub titles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub title: String,
    pub categories: Vec<String>,
    pub price: Option<f64>,
    pub avg_rating: Option<f64>,
    pub review_count: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// Seconds between the session's last interaction and the request.
    pub age: i64,
    pub size: usize,
    /// Categories by descending count.
    pub dominant: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub user_id: String,
    pub score: f64,
    pub recent_titles: Vec<String>,
}

/// Machine-readable payload of a successful observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolOutput {
    UserProfile {
        profile: Profile,
        candidate_signal: Vec<f64>,
    },
    ItemInfo {
        matches: Vec<ItemSummary>,
        /// Quality prior for candidates among the matches, `None` elsewhere.
        candidate_signal: Vec<Option<f64>>,
    },
    CandidateGroups {
        groups: Vec<CategoryGroup>,
        candidate_signal: Vec<f64>,
    },
    Sessions {
        sessions: Vec<SessionSummary>,
        candidate_signal: Vec<f64>,
    },
    Ratings {
        five_star: Vec<String>,
        neutral: Vec<String>,
        low: Vec<String>,
        candidate_signal: Vec<f64>,
    },
    SimilarItems {
        query_item: String,
        neighbors: Vec<(String, f64)>,
        candidate_signal: Vec<f64>,
    },
    SimilarUsers {
        neighbors: Vec<Neighbor>,
        candidate_signal: Vec<f64>,
    },
}

impl ToolOutput {
    pub fn tool(&self) -> ToolId {
        match self {
            ToolOutput::UserProfile { .. } => ToolId::GetUserProfile,
            ToolOutput::ItemInfo { .. } => ToolId::ItemInfoSearch,
            ToolOutput::CandidateGroups { .. } => ToolId::CandidatesAnalyze,
            ToolOutput::Sessions { .. } => ToolId::GetSessionBehavior,
            ToolOutput::Ratings { .. } => ToolId::GetRatingBehavior,
            ToolOutput::SimilarItems { .. } => ToolId::GetSimilarItems,
            ToolOutput::SimilarUsers { .. } => ToolId::GetSimilarUsers,
        }
    }

    /// Per-candidate values, `None` where the tool said nothing about a candidate.
    pub fn candidate_signal(&self) -> Vec<Option<f64>> {
        match self {
            ToolOutput::ItemInfo {
                candidate_signal, ..
            } => candidate_signal.clone(),
            ToolOutput::UserProfile {
                candidate_signal, ..
            }
            | ToolOutput::CandidateGroups {
                candidate_signal, ..
            }
            | ToolOutput::Sessions {
                candidate_signal, ..
            }
            | ToolOutput::Ratings {
                candidate_signal, ..
            }
            | ToolOutput::SimilarItems {
                candidate_signal, ..
            }
            | ToolOutput::SimilarUsers {
                candidate_signal, ..
            } => candidate_signal.iter().copied().map(Some).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<ToolOutput>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_note: Option<String>,
}

impl Observation {
    pub fn success(text: String, output: ToolOutput) -> Self {
        Self {
            text,
            structured: Some(output),
            ok: true,
            error_note: None,
        }
    }

    pub fn failure(note: impl Into<String>) -> Self {
        let note = note.into();
        Self {
            text: format!("Error: {note}"),
            structured: None,
            ok: false,
            error_note: Some(note),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    /// A gap longer than this (timestamp units) starts a new session.
    pub session_gap: i64,
    pub sessions_shown: usize,
    pub similar_k: usize,
    pub neighbor_k: usize,
    pub neighbor_titles: usize,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            session_gap: 4 * 3600,
            sessions_shown: 2,
            similar_k: 5,
            neighbor_k: 3,
            neighbor_titles: 3,
        }
    }
}

/// Everything a tool may read while serving one request.
#[derive(Clone, Copy)]
pub struct ToolContext<'a> {
    pub request: RequestView<'a>,
    pub catalog: &'a Catalog,
    /// The user's interactions strictly before the target.
    pub prior: &'a [Interaction],
    /// Interactions visible during training; neighbours' items are further
    /// restricted to those before the request time.
    pub visible: &'a InteractionStream,
    pub collab: Option<&'a CollabModel>,
    pub profiles: &'a ProfileStore,
    pub config: &'a ToolConfig,
}

/// The set of tools an agent may call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistry {
    tools: Vec<ToolId>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self {
            tools: ToolId::ALL.to_vec(),
        }
    }
}

impl ToolRegistry {
    pub fn without_collab() -> Self {
        Self::with_tools(ToolId::ALL.into_iter().filter(|t| !t.needs_collab()))
    }

    pub fn with_tools(tools: impl IntoIterator<Item = ToolId>) -> Self {
        let mut tools: Vec<ToolId> = tools.into_iter().collect();
        tools.sort();
        tools.dedup();
        Self { tools }
    }

    /// Enabled tools in action-index order.
    pub fn tools(&self) -> &[ToolId] {
        &self.tools
    }

    pub fn contains(&self, tool: ToolId) -> bool {
        self.tools.contains(&tool)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Schemas sorted by tool name.
    pub fn list_schemas(&self) -> Vec<ToolSchema> {
        let mut out: Vec<ToolSchema> = self.tools.iter().map(|t| t.schema()).collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn invoke(&self, call: &ToolCall, ctx: &ToolContext<'_>) -> Observation {
        let tool = match call.tool() {
            Some(t) if self.contains(t) => t,
            _ => return Observation::failure(format!("unknown tool `{}`", call.name)),
        };
        let arg = match validate_arguments(tool, &call.arguments) {
            Ok(arg) => arg,
            Err(note) => return Observation::failure(note),
        };
        if tool.needs_collab() && ctx.collab.is_none() {
            return Observation::failure(format!("{tool} needs a collaborative model"));
        }
        builtin::run(tool, arg, ctx)
    }
}

fn validate_arguments(
    tool: ToolId,
    args: &Map<String, Value>,
) -> std::result::Result<Option<&str>, String> {
    let expected = tool.argument().map(|(name, _)| name);
    if let Some(extra) = args.keys().find(|k| Some(k.as_str()) != expected) {
        return Err(format!("schema violation: {tool} takes no argument `{extra}`"));
    }
    match expected {
        None => Ok(None),
        Some(name) => match args.get(name) {
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(other) => Err(format!(
                "schema violation: `{name}` must be a string, got {other}"
            )),
            None => Err(format!("schema violation: {tool} requires `{name}`")),
        },
    }
}

/// Schema list as the JSON array embedded in agent prompts and logs.
pub fn schemas_json(registry: &ToolRegistry) -> Value {
    json!(registry.list_schemas())
}
