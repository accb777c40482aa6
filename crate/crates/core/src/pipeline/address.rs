use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn token(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($token => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

token_enum!(
    /// Pipeline stage.
    ComponentId { Vision => "vision", Connector => "connector", Language => "language" }
);
token_enum!(
    /// Contiguous third of a component's blocks.
    BlockGroup { Front => "front", Middle => "middle", End => "end" }
);
token_enum!(LayerType { Attn => "attn", Ff => "ff" });

impl BlockGroup {
    /// Group of block `index` among `blocks`: `⌊3·index / blocks⌋`.
    pub fn of(index: usize, blocks: usize) -> BlockGroup {
        match 3 * index / blocks.max(1) {
            0 => BlockGroup::Front,
            1 => BlockGroup::Middle,
            _ => BlockGroup::End,
        }
    }
}

/// Linear sublayer within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    FfUp,
    FfDown,
}

impl Sublayer {
    pub const ALL: [Sublayer; 6] =
        [Sublayer::AttnQ, Sublayer::AttnK, Sublayer::AttnV, Sublayer::AttnOut, Sublayer::FfUp, Sublayer::FfDown];

    pub fn layer_type(self) -> LayerType {
        match self {
            Sublayer::AttnQ | Sublayer::AttnK | Sublayer::AttnV | Sublayer::AttnOut => LayerType::Attn,
            Sublayer::FfUp | Sublayer::FfDown => LayerType::Ff,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::AttnQ => "attn.q_proj",
            Sublayer::AttnK => "attn.k_proj",
            Sublayer::AttnV => "attn.v_proj",
            Sublayer::AttnOut => "attn.out_proj",
            Sublayer::FfUp => "ff.up",
            Sublayer::FfDown => "ff.down",
        }
    }

    /// Projections that write back into the residual stream.
    pub fn is_residual_output(self) -> bool {
        matches!(self, Sublayer::AttnOut | Sublayer::FfDown)
    }
}

/// Names one quantizable weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerAddress {
    pub component: ComponentId,
    pub block_index: usize,
    pub group: BlockGroup,
    pub layer_type: LayerType,
    pub sublayer: Sublayer,
}

impl LayerAddress {
    pub fn new(component: ComponentId, block_index: usize, blocks: usize, sublayer: Sublayer) -> Self {
        Self {
            component,
            block_index,
            group: BlockGroup::of(block_index, blocks),
            layer_type: sublayer.layer_type(),
            sublayer,
        }
    }

    /// e.g. `language.3.attn.out_proj`.
    pub fn name(&self) -> String {
        format!("{}.{}.{}", self.component, self.block_index, self.sublayer.name())
    }
}

impl fmt::Display for LayerAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Subsets of components, block groups and layer types; a layer is selected
/// when all three of its coordinates are members.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selector {
    pub components: BTreeSet<ComponentId>,
    pub groups: BTreeSet<BlockGroup>,
    pub layer_types: BTreeSet<LayerType>,
}

impl Selector {
    pub fn new(
        components: impl IntoIterator<Item = ComponentId>,
        groups: impl IntoIterator<Item = BlockGroup>,
        layer_types: impl IntoIterator<Item = LayerType>,
    ) -> Self {
        Self {
            components: components.into_iter().collect(),
            groups: groups.into_iter().collect(),
            layer_types: layer_types.into_iter().collect(),
        }
    }

    pub fn all() -> Self {
        Self::new(
            ComponentId::ALL.iter().copied(),
            BlockGroup::ALL.iter().copied(),
            LayerType::ALL.iter().copied(),
        )
    }

    /// Every block group and layer type of the given components.
    pub fn components(components: impl IntoIterator<Item = ComponentId>) -> Self {
        Self::new(components, BlockGroup::ALL.iter().copied(), LayerType::ALL.iter().copied())
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn matches(&self, addr: &LayerAddress) -> bool {
        self.components.contains(&addr.component)
            && self.groups.contains(&addr.group)
            && self.layer_types.contains(&addr.layer_type)
    }
}

/// Sorted `+`-joined tokens, e.g. `front+end`.
pub fn join_tokens<T: Copy + Ord + fmt::Display>(set: &BTreeSet<T>) -> String {
    set.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("+")
}

pub fn parse_tokens<T: FromStr<Err = Error> + Ord>(s: &str) -> Result<BTreeSet<T>> {
    if s.trim().is_empty() {
        return Ok(BTreeSet::new());
    }
    s.split(['+', ',']).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirds() {
        let groups: Vec<_> = (0..6).map(|b| BlockGroup::of(b, 6)).collect();
        use BlockGroup::*;
        assert_eq!(groups, vec![Front, Front, Middle, Middle, End, End]);
        assert_eq!(BlockGroup::of(0, 1), Front);
        assert_eq!(BlockGroup::of(1, 2), Middle);
    }

    #[test]
    fn token_sets() {
        let set: BTreeSet<BlockGroup> = [BlockGroup::End, BlockGroup::Front].into();
        assert_eq!(join_tokens(&set), "front+end");
        assert_eq!(parse_tokens::<BlockGroup>("end+front").unwrap(), set);
        assert!(parse_tokens::<LayerType>("").unwrap().is_empty());
        assert!(parse_tokens::<LayerType>("attn+mlp").is_err());
    }

    #[test]
    fn names() {
        let a = LayerAddress::new(ComponentId::Language, 3, 6, Sublayer::AttnOut);
        assert_eq!(a.name(), "language.3.attn.out_proj");
        assert_eq!(a.group, BlockGroup::Middle);
        assert_eq!(a.layer_type, LayerType::Attn);
    }
}
