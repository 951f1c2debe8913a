//! The shared, read-only world an agent acts in.

use crate::collab::{self, CollabConfig, CollabModel};
use crate::corpus::{
    chronological_split, train_visible, Catalog, DatasetSplit, InteractionStream,
    RecommendationRequest, SplitConfig,
};
use crate::tools::{Observation, ProfileStore, ToolCall, ToolConfig, ToolContext, ToolRegistry};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Environment {
    pub catalog: Catalog,
    /// Full interaction stream; a request only ever sees the prefix before
    /// its target.
    pub stream: InteractionStream,
    /// Interactions outside val/test targets.
    pub visible: InteractionStream,
    pub collab: Option<CollabModel>,
    pub profiles: ProfileStore,
    pub tool_config: ToolConfig,
    pub registry: ToolRegistry,
}

impl Environment {
    /// The registry holds all seven tools when a collaborative model is
    /// present and the five non-collaborative ones otherwise.
    pub fn new(
        catalog: Catalog,
        stream: InteractionStream,
        visible: InteractionStream,
        collab: Option<CollabModel>,
    ) -> Self {
        let registry = if collab.is_some() {
            ToolRegistry::default()
        } else {
            ToolRegistry::without_collab()
        };
        Self {
            catalog,
            stream,
            visible,
            collab,
            profiles: ProfileStore::default(),
            tool_config: ToolConfig::default(),
            registry,
        }
    }

    /// Splits `stream`, fits the collaborative model on the train-visible
    /// part (when `collab` is given) and assembles the environment.
    pub fn build(
        catalog: Catalog,
        stream: InteractionStream,
        split: &SplitConfig,
        collab: Option<&CollabConfig>,
    ) -> Result<(Self, DatasetSplit)> {
        let data = chronological_split(&catalog, &stream, split)?;
        let visible = train_visible(&stream, &data);
        let model = match collab {
            Some(cfg) => Some(collab::fit(&catalog, &visible, cfg, split.seed)?),
            None => None,
        };
        Ok((Self::new(catalog, stream, visible, model), data))
    }

    pub fn context<'a>(&'a self, request: &'a RecommendationRequest) -> ToolContext<'a> {
        let own = self.stream.user(request.user_id.as_str());
        ToolContext {
            request: request.view(),
            catalog: &self.catalog,
            prior: &own[..request.target_position.min(own.len())],
            visible: &self.visible,
            collab: self.collab.as_ref(),
            profiles: &self.profiles,
            config: &self.tool_config,
        }
    }

    pub fn invoke(&self, call: &ToolCall, request: &RecommendationRequest) -> Observation {
        self.registry.invoke(call, &self.context(request))
    }
}
