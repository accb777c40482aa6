use std::collections::BTreeMap;
use std::sync::Arc;

use super::{ComponentId, ConnectorKind, LayerAddress, PipelineSpec, Selector, Sublayer};
use crate::error::{Error, Result};
use crate::numerics::{randn_matrix, RngStream};
use crate::Matrix;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    fn unit(d: usize) -> Self {
        Self { gain: vec![1.0; d], bias: vec![0.0; d] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockNorms {
    pub attn: LayerNorm,
    pub ff: LayerNorm,
}

/// Tensors that are never quantized: embeddings, norms, queries, projector
/// and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTensors {
    /// d_model × patch_dim.
    pub patch_embed: Matrix,
    /// patch_count × d_model.
    pub vision_pos: Matrix,
    pub vision_norms: Vec<BlockNorms>,
    pub vision_final: LayerNorm,
    /// query_count × d_model (query connector only).
    pub queries: Option<Matrix>,
    pub connector_norms: Vec<BlockNorms>,
    pub connector_final: Option<LayerNorm>,
    /// d_model × d_model (projector connector only).
    pub projector: Option<Matrix>,
    /// vocab × d_model.
    pub token_embed: Matrix,
    /// max_positions × d_model.
    pub language_pos: Matrix,
    pub language_norms: Vec<BlockNorms>,
    pub language_final: LayerNorm,
    /// vocab × d_model.
    pub head: Matrix,
}

/// Full-precision or simulated-quantized weights of one pipeline.
///
/// Layer matrices sit behind `Arc`, so quantized variants share every
/// untouched layer with the model they were derived from.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    spec: PipelineSpec,
    layers: BTreeMap<LayerAddress, Arc<Matrix>>,
    fixed: Arc<FixedTensors>,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers && self.fixed == other.fixed
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a of the tensor name.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    randn_matrix(&mut RngStream::derive(seed, name_key(name)), rows, cols, std)
}

/// Shape (out, in) of a sublayer's weight.
fn layer_shape(spec: &PipelineSpec, sublayer: Sublayer) -> (usize, usize) {
    let (d, f) = (spec.d_model, spec.ffn_dim());
    match sublayer {
        Sublayer::FfUp => (f, d),
        Sublayer::FfDown => (d, f),
        _ => (d, d),
    }
}

/// Every quantizable address of `spec`, in canonical order.
pub fn layer_addresses(spec: &PipelineSpec) -> Vec<LayerAddress> {
    let mut out = Vec::new();
    for &component in ComponentId::ALL {
        let blocks = spec.blocks(component);
        for b in 0..blocks {
            for sub in Sublayer::ALL {
                out.push(LayerAddress::new(component, b, blocks, sub));
            }
        }
    }
    out
}

/// Deterministic initialization from `spec.seed`.
pub fn build_model(spec: &PipelineSpec) -> Result<ModelWeights> {
    spec.validate()?;
    let seed = spec.seed;
    let (d, v) = (spec.d_model, spec.vocab);
    let mut layers = BTreeMap::new();
    for addr in layer_addresses(spec) {
        let (rows, cols) = layer_shape(spec, addr.sublayer);
        let mut std = INIT_STD;
        if addr.sublayer.is_residual_output() {
            std /= (2.0 * spec.blocks(addr.component) as f64).sqrt();
        }
        layers.insert(addr, Arc::new(init(seed, &addr.name(), rows, cols, std)?));
    }
    let norms = |n: usize| (0..n).map(|_| BlockNorms { attn: LayerNorm::unit(d), ff: LayerNorm::unit(d) }).collect();
    let query = spec.connector_kind == ConnectorKind::QueryCrossAttention;
    let fixed = FixedTensors {
        patch_embed: init(seed, "vision.patch_embed", d, spec.patch_dim, INIT_STD)?,
        vision_pos: init(seed, "vision.pos", spec.patch_count, d, INIT_STD)?,
        vision_norms: norms(spec.vision_blocks),
        vision_final: LayerNorm::unit(d),
        queries: if query { Some(init(seed, "connector.queries", spec.query_count, d, INIT_STD)?) } else { None },
        connector_norms: norms(spec.connector_blocks),
        connector_final: query.then(|| LayerNorm::unit(d)),
        projector: if query { None } else { Some(init(seed, "connector.projector", d, d, INIT_STD)?) },
        token_embed: init(seed, "language.token_embed", v, d, INIT_STD)?,
        language_pos: init(seed, "language.pos", spec.max_positions, d, INIT_STD)?,
        language_norms: norms(spec.language_blocks),
        language_final: LayerNorm::unit(d),
        head: init(seed, "language.head", v, d, INIT_STD)?,
    };
    Ok(ModelWeights { spec: spec.clone(), layers, fixed: Arc::new(fixed) })
}

impl ModelWeights {
    pub(crate) fn from_parts(
        spec: PipelineSpec,
        layers: BTreeMap<LayerAddress, Arc<Matrix>>,
        fixed: FixedTensors,
    ) -> Self {
        Self { spec, layers, fixed: Arc::new(fixed) }
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn fixed(&self) -> &FixedTensors {
        &self.fixed
    }

    pub fn layers(&self) -> &BTreeMap<LayerAddress, Arc<Matrix>> {
        &self.layers
    }

    pub fn layer(&self, addr: &LayerAddress) -> Result<&Matrix> {
        self.layers.get(addr).map(Arc::as_ref).ok_or_else(|| Error::UnknownLayer(addr.name()))
    }

    pub(crate) fn block_layer(&self, component: ComponentId, block: usize, sub: Sublayer) -> &Matrix {
        let addr = LayerAddress::new(component, block, self.spec.blocks(component), sub);
        &self.layers[&addr]
    }

    /// Copy sharing every layer except the replaced ones.
    pub fn with_layers(&self, replacements: impl IntoIterator<Item = (LayerAddress, Arc<Matrix>)>) -> Result<Self> {
        let mut layers = self.layers.clone();
        for (addr, m) in replacements {
            let slot = layers.get_mut(&addr).ok_or_else(|| Error::UnknownLayer(addr.name()))?;
            if slot.rows() != m.rows() || slot.cols() != m.cols() {
                return Err(Error::ShapeMismatch(format!("replacement for {addr}")));
            }
            *slot = m;
        }
        Ok(Self { spec: self.spec.clone(), layers, fixed: Arc::clone(&self.fixed) })
    }

    /// Addresses matching `sel`, in canonical order.
    pub fn enumerate_layers(&self, sel: &Selector) -> Vec<LayerAddress> {
        self.layers.keys().filter(|a| sel.matches(a)).copied().collect()
    }

    /// Components that own at least one quantizable layer.
    pub fn components(&self) -> Vec<ComponentId> {
        ComponentId::ALL.iter().copied().filter(|&c| self.spec.blocks(c) > 0).collect()
    }

    pub fn quantizable_parameters(&self) -> u64 {
        self.layers.values().map(|m| m.len() as u64).sum()
    }

    pub fn total_parameters(&self) -> u64 {
        let f = &*self.fixed;
        let norm = |n: &LayerNorm| (n.gain.len() + n.bias.len()) as u64;
        let blocks = |v: &[BlockNorms]| v.iter().map(|b| norm(&b.attn) + norm(&b.ff)).sum::<u64>();
        let opt = |m: &Option<Matrix>| m.as_ref().map_or(0, |m| m.len() as u64);
        self.quantizable_parameters()
            + (f.patch_embed.len() + f.vision_pos.len() + f.token_embed.len() + f.language_pos.len() + f.head.len())
                as u64
            + blocks(&f.vision_norms)
            + blocks(&f.connector_norms)
            + blocks(&f.language_norms)
            + norm(&f.vision_final)
            + norm(&f.language_final)
            + f.connector_final.as_ref().map_or(0, norm)
            + opt(&f.queries)
            + opt(&f.projector)
    }
}

/// `enumerate_layers` as a free function.
pub fn enumerate_layers(weights: &ModelWeights, sel: &Selector) -> Vec<LayerAddress> {
    weights.enumerate_layers(sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{BlockGroup, LayerType};

    #[test]
    fn build_is_deterministic() {
        let spec = PipelineSpec::default();
        assert_eq!(build_model(&spec).unwrap(), build_model(&spec).unwrap());
        let other = build_model(&PipelineSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(build_model(&spec).unwrap(), other);
    }

    #[test]
    fn default_parameter_count_is_closed_form() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        let (d, f, p, pd, v, pos, q) = (64u64, 256, 16, 32, 256, 64, 8);
        let linear = 4 * d * d + 2 * d * f;
        let block = linear + 4 * d; // two layer norms, gain + bias each
        let vision = d * pd + p * d + 6 * block + 2 * d;
        let connector = q * d + 3 * block + 2 * d;
        let language = v * d + pos * d + 6 * block + 2 * d + v * d;
        assert_eq!(w.quantizable_parameters(), 15 * linear);
        assert_eq!(w.total_parameters(), vision + connector + language);
        assert_eq!(w.total_parameters(), 781_952);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = PipelineSpec { language_blocks: 7, ..PipelineSpec::default() };
        assert!(build_model(&spec).is_err());
    }

    #[test]
    fn residual_projections_are_scaled() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        let std = |m: &Matrix| (m.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / m.len() as f64).sqrt();
        let down = w.block_layer(ComponentId::Vision, 0, Sublayer::FfDown);
        let up = w.block_layer(ComponentId::Vision, 0, Sublayer::FfUp);
        assert!((std(up) - 0.02).abs() < 0.002);
        assert!((std(down) - 0.02 / 12f64.sqrt()).abs() < 0.0005);
    }

    #[test]
    fn enumeration() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        let all = w.enumerate_layers(&Selector::all());
        // 4 attention + 2 feed-forward matrices in each of 6 + 3 + 6 blocks.
        assert_eq!(all.len(), 6 * 15);
        assert_eq!(all.iter().filter(|a| a.layer_type == LayerType::Attn).count(), 4 * 15);
        assert!(w.enumerate_layers(&Selector::new([], BlockGroup::ALL.to_vec(), LayerType::ALL.to_vec())).is_empty());
        let front_attn =
            w.enumerate_layers(&Selector::new([ComponentId::Vision], [BlockGroup::Front], [LayerType::Attn]));
        assert_eq!(front_attn.len(), 8);
        assert!(front_attn.iter().all(|a| a.block_index < 2 && a.layer_type == LayerType::Attn));
    }

    #[test]
    fn groups_partition_the_layer_set() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        for &c in ComponentId::ALL {
            for &t in LayerType::ALL {
                let all = w.enumerate_layers(&Selector::new([c], BlockGroup::ALL.to_vec(), [t]));
                let mut parts: Vec<LayerAddress> = BlockGroup::ALL
                    .iter()
                    .flat_map(|&g| w.enumerate_layers(&Selector::new([c], [g], [t])))
                    .collect();
                parts.sort();
                assert_eq!(parts, all);
            }
        }
    }

    #[test]
    fn projector_has_no_connector_layers() {
        let w = build_model(&PipelineSpec::projector()).unwrap();
        assert_eq!(w.components(), vec![ComponentId::Vision, ComponentId::Language]);
        assert!(w.enumerate_layers(&Selector::components([ComponentId::Connector])).is_empty());
    }
}
