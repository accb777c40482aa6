use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    /// Learned queries cross-attending to vision tokens.
    QueryCrossAttention,
    /// A single unquantized projection of the vision tokens.
    LinearProjector,
}

/// Shape and seed of the toy vision → connector → language pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSpec {
    pub d_model: usize,
    pub vision_blocks: usize,
    pub connector_blocks: usize,
    pub language_blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub query_count: usize,
    pub connector_kind: ConnectorKind,
    pub seed: u64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            vision_blocks: 6,
            connector_blocks: 3,
            language_blocks: 6,
            heads: 4,
            ffn_mult: 4,
            patch_count: 16,
            patch_dim: 32,
            vocab: 256,
            max_positions: 64,
            query_count: 8,
            connector_kind: ConnectorKind::QueryCrossAttention,
            seed: 7,
        }
    }
}

impl PipelineSpec {
    /// Projector connector, no connector blocks.
    pub fn projector() -> Self {
        Self { connector_kind: ConnectorKind::LinearProjector, connector_blocks: 0, ..Self::default() }
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Number of visual tokens the connector hands to the language decoder.
    pub fn prefix_len(&self) -> usize {
        match self.connector_kind {
            ConnectorKind::QueryCrossAttention => self.query_count,
            ConnectorKind::LinearProjector => self.patch_count,
        }
    }

    pub fn blocks(&self, component: super::ComponentId) -> usize {
        match component {
            super::ComponentId::Vision => self.vision_blocks,
            super::ComponentId::Connector => self.connector_blocks,
            super::ComponentId::Language => self.language_blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidSpec(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        for (name, n) in [("vision_blocks", self.vision_blocks), ("language_blocks", self.language_blocks)] {
            if n == 0 || n % 3 != 0 {
                return fail(format!("{name} = {n} must be a positive multiple of 3"));
            }
        }
        match self.connector_kind {
            ConnectorKind::QueryCrossAttention => {
                if self.connector_blocks == 0 || self.query_count == 0 {
                    return fail("query connector needs at least one block and one query".into());
                }
            }
            ConnectorKind::LinearProjector => {
                if self.connector_blocks != 0 {
                    return fail("linear projector connector has no blocks".into());
                }
            }
        }
        if self.ffn_mult == 0 || self.patch_count == 0 || self.patch_dim == 0 {
            return fail("ffn_mult, patch_count and patch_dim must be positive".into());
        }
        if self.vocab < 4 || self.vocab > u16::MAX as usize {
            return fail(format!("vocab {} outside [4, 65535]", self.vocab));
        }
        if self.max_positions <= self.prefix_len() {
            return fail(format!(
                "max_positions {} must exceed the visual prefix ({})",
                self.max_positions,
                self.prefix_len()
            ));
        }
        Ok(())
    }
}
