//! Pre-norm transformer forward pass with `f64` accumulation.
//!
//! The vision tower is a bidirectional encoder over patch tokens, the query
//! connector cross-attends learned queries to the vision tokens, and the
//! language decoder is causal with a per-block key/value cache. Decoding one
//! token at a time through the cache performs exactly the arithmetic of a
//! full recomputation, so cached and uncached outputs are bit-identical.

use serde::{Deserialize, Serialize};

use super::{ComponentId, ConnectorKind, LayerAddress, LayerNorm, ModelWeights, Sublayer};
use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::tasks::ProbePair;
use crate::Matrix;

pub const LN_EPS: f64 = 1e-5;
pub const BOS_TOKEN: u32 = 0;
pub const SEP_TOKEN: u32 = 1;
pub const CAPTION_HORIZON: usize = 16;
pub const VQA_HORIZON: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Retrieval,
    Caption,
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Retrieval, TaskKind::Caption, TaskKind::Vqa];

    pub fn token(self) -> &'static str {
        match self {
            TaskKind::Retrieval => "retrieval",
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "retrieval" => Ok(TaskKind::Retrieval),
            "caption" => Ok(TaskKind::Caption),
            "vqa" => Ok(TaskKind::Vqa),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

/// Receives the input of every addressable linear layer during a forward pass.
pub trait ActivationTap {
    /// `layers` all consume `input` (rows = tokens).
    fn record(&mut self, layers: &[LayerAddress], input: &Matrix);
}

struct NoTap;

impl ActivationTap for NoTap {
    fn record(&mut self, _: &[LayerAddress], _: &Matrix) {}
}

/// `x · wᵀ`.
fn linear(x: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(x.cols(), w.cols());
    let mut out = Vec::with_capacity(x.rows() * w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        for o in 0..w.rows() {
            out.push(dot(xr, w.row(o)) as f32);
        }
    }
    Matrix::from_parts(x.rows(), w.rows(), out)
}

fn layer_norm(x: &Matrix, ln: &LayerNorm) -> Matrix {
    let d = x.cols() as f64;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, &v) in row.iter().enumerate() {
            out.push(((v as f64 - mean) * inv * ln.gain[i] as f64 + ln.bias[i] as f64) as f32);
        }
    }
    Matrix::from_parts(x.rows(), x.cols(), out)
}

fn gelu(x: &mut Matrix) {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    for r in 0..x.rows() {
        for v in x.row_mut(r) {
            let z = *v as f64;
            *v = (0.5 * z * (1.0 + (C * (z + 0.044715 * z * z * z)).tanh())) as f32;
        }
    }
}

fn add_assign(x: &mut Matrix, y: &Matrix) {
    for r in 0..x.rows() {
        for (a, &b) in x.row_mut(r).iter_mut().zip(y.row(r)) {
            *a = (*a as f64 + b as f64) as f32;
        }
    }
}

/// Multi-head scaled dot-product attention over row-major buffers.
///
/// With `causal_base = Some(p)`, query `i` sits at absolute position `p + i`
/// and sees keys `0..=p + i`.
fn attention(q: &Matrix, k: &[f32], v: &[f32], heads: usize, causal_base: Option<usize>) -> Matrix {
    let d = q.cols();
    let hd = d / heads;
    let tk = k.len() / d;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0f32; q.rows() * d];
    let mut scores = vec![0.0f64; tk];
    let mut acc = vec![0.0f64; hd];
    for i in 0..q.rows() {
        let visible = causal_base.map_or(tk, |p| (p + i + 1).min(tk));
        let qi = q.row(i);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = &qi[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let s = dot(qh, &k[j * d + cols.start..j * d + cols.end]) * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for s in &mut scores[..visible] {
                *s = (*s - max).exp();
                total += *s;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..visible {
                let p = scores[j] / total;
                for (a, &vv) in acc.iter_mut().zip(&v[j * d + cols.start..j * d + cols.end]) {
                    *a += p * vv as f64;
                }
            }
            for (o, a) in out[i * d + cols.start..i * d + cols.end].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Matrix::from_parts(q.rows(), d, out)
}

struct Block<'a> {
    weights: &'a ModelWeights,
    component: ComponentId,
    index: usize,
}

impl Block<'_> {
    fn addr(&self, sub: Sublayer) -> LayerAddress {
        LayerAddress::new(self.component, self.index, self.weights.spec().blocks(self.component), sub)
    }

    fn w(&self, sub: Sublayer) -> &Matrix {
        self.weights.block_layer(self.component, self.index, sub)
    }

    fn norms(&self) -> &super::BlockNorms {
        let f = self.weights.fixed();
        match self.component {
            ComponentId::Vision => &f.vision_norms[self.index],
            ComponentId::Connector => &f.connector_norms[self.index],
            ComponentId::Language => &f.language_norms[self.index],
        }
    }

    /// One residual block. `memory` switches attention to cross-attention
    /// over those rows; `cache` makes self-attention causal and incremental.
    fn run(&self, x: &mut Matrix, memory: Option<&Matrix>, cache: Option<&mut KvCache>, tap: &mut dyn ActivationTap) {
        use Sublayer::*;
        let heads = self.weights.spec().heads;
        let h = layer_norm(x, &self.norms().attn);
        let attn = match (memory, cache) {
            (Some(mem), _) => {
                tap.record(&[self.addr(AttnQ)], &h);
                tap.record(&[self.addr(AttnK), self.addr(AttnV)], mem);
                let q = linear(&h, self.w(AttnQ));
                let k = linear(mem, self.w(AttnK));
                let v = linear(mem, self.w(AttnV));
                attention(&q, k.data(), v.data(), heads, None)
            }
            (None, cache) => {
                tap.record(&[self.addr(AttnQ), self.addr(AttnK), self.addr(AttnV)], &h);
                let q = linear(&h, self.w(AttnQ));
                let k = linear(&h, self.w(AttnK));
                let v = linear(&h, self.w(AttnV));
                match cache {
                    Some(c) => {
                        let base = c.len;
                        c.k.extend_from_slice(k.data());
                        c.v.extend_from_slice(v.data());
                        c.len += k.rows();
                        attention(&q, &c.k, &c.v, heads, Some(base))
                    }
                    None => attention(&q, k.data(), v.data(), heads, None),
                }
            }
        };
        tap.record(&[self.addr(AttnOut)], &attn);
        add_assign(x, &linear(&attn, self.w(AttnOut)));

        let h = layer_norm(x, &self.norms().ff);
        tap.record(&[self.addr(FfUp)], &h);
        let mut up = linear(&h, self.w(FfUp));
        gelu(&mut up);
        tap.record(&[self.addr(FfDown)], &up);
        add_assign(x, &linear(&up, self.w(FfDown)));
    }
}

#[derive(Debug, Clone, Default)]
struct KvCache {
    k: Vec<f32>,
    v: Vec<f32>,
    len: usize,
}

/// Visual tokens handed to the decoder plus the pooled, unit-norm image
/// embedding used for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrefix {
    pub tokens: Matrix,
    pub embedding: Vec<f32>,
}

fn check_image(weights: &ModelWeights, image: &Matrix) -> Result<()> {
    let spec = weights.spec();
    if image.rows() != spec.patch_count || image.cols() != spec.patch_dim {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}, expected {}x{}",
            image.rows(),
            image.cols(),
            spec.patch_count,
            spec.patch_dim
        )));
    }
    Ok(())
}

/// Vision tower output after its final norm (patch_count × d_model).
pub fn encode_vision(weights: &ModelWeights, image: &Matrix, tap: &mut dyn ActivationTap) -> Result<Matrix> {
    check_image(weights, image)?;
    let f = weights.fixed();
    let mut x = linear(image, &f.patch_embed);
    add_assign(&mut x, &f.vision_pos);
    for index in 0..weights.spec().vision_blocks {
        Block { weights, component: ComponentId::Vision, index }.run(&mut x, None, None, tap);
    }
    Ok(layer_norm(&x, &f.vision_final))
}

/// Connector output tokens for the given vision tokens.
pub fn connect(weights: &ModelWeights, vision: &Matrix, tap: &mut dyn ActivationTap) -> Matrix {
    let f = weights.fixed();
    match weights.spec().connector_kind {
        ConnectorKind::QueryCrossAttention => {
            let mut x = f.queries.clone().expect("query connector has queries");
            for index in 0..weights.spec().connector_blocks {
                Block { weights, component: ComponentId::Connector, index }.run(&mut x, Some(vision), None, tap);
            }
            layer_norm(&x, f.connector_final.as_ref().expect("query connector has a final norm"))
        }
        ConnectorKind::LinearProjector => linear(vision, f.projector.as_ref().expect("projector connector")),
    }
}

pub(crate) fn unit_mean(x: &Matrix) -> Vec<f32> {
    let n = x.rows() as f64;
    let mean: Vec<f64> = (0..x.cols()).map(|c| (0..x.rows()).map(|r| x.get(r, c) as f64).sum::<f64>() / n).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; mean.len()];
    }
    mean.iter().map(|v| (v / norm) as f32).collect()
}

pub fn encode_image_with(weights: &ModelWeights, image: &Matrix, tap: &mut dyn ActivationTap) -> Result<VisualPrefix> {
    let vision = encode_vision(weights, image, tap)?;
    let tokens = connect(weights, &vision, tap);
    let embedding = unit_mean(&tokens);
    Ok(VisualPrefix { tokens, embedding })
}

pub fn encode_image(weights: &ModelWeights, image: &Matrix) -> Result<VisualPrefix> {
    encode_image_with(weights, image, &mut NoTap)
}

/// Incremental causal decoder.
pub struct Decoder<'a> {
    weights: &'a ModelWeights,
    caches: Vec<KvCache>,
    position: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        Self { weights, caches: vec![KvCache::default(); weights.spec().language_blocks], position: 0 }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    fn embed(&self, prefix: Option<&Matrix>, ids: &[u32]) -> Result<Matrix> {
        let spec = self.weights.spec();
        let f = self.weights.fixed();
        let d = spec.d_model;
        let n_prefix = prefix.map_or(0, Matrix::rows);
        let total = n_prefix + ids.len();
        if self.position + total > spec.max_positions {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {} positions exceeds max_positions {}",
                self.position + total,
                spec.max_positions
            )));
        }
        let mut data = Vec::with_capacity(total * d);
        if let Some(p) = prefix {
            if p.cols() != d {
                return Err(Error::ShapeMismatch(format!("prefix width {} != d_model {d}", p.cols())));
            }
            data.extend_from_slice(p.data());
        }
        for &id in ids {
            if id as usize >= spec.vocab {
                return Err(Error::ShapeMismatch(format!("token {id} outside vocab {}", spec.vocab)));
            }
            data.extend_from_slice(f.token_embed.row(id as usize));
        }
        for (i, v) in data.chunks_mut(d).enumerate() {
            for (a, &b) in v.iter_mut().zip(f.language_pos.row(self.position + i)) {
                *a = (*a as f64 + b as f64) as f32;
            }
        }
        Ok(Matrix::from_parts(total, d, data))
    }

    /// Appends `prefix` rows then `ids` and returns their final-norm hidden states.
    pub fn extend_with(
        &mut self,
        prefix: Option<&Matrix>,
        ids: &[u32],
        tap: &mut dyn ActivationTap,
    ) -> Result<Matrix> {
        let mut x = self.embed(prefix, ids)?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty decoder input".into()));
        }
        for (index, cache) in self.caches.iter_mut().enumerate() {
            Block { weights: self.weights, component: ComponentId::Language, index }.run(
                &mut x,
                None,
                Some(cache),
                tap,
            );
        }
        self.position += x.rows();
        Ok(layer_norm(&x, &self.weights.fixed().language_final))
    }

    pub fn extend(&mut self, prefix: Option<&Matrix>, ids: &[u32]) -> Result<Matrix> {
        self.extend_with(prefix, ids, &mut NoTap)
    }

    /// Greedy next token from the last hidden row; ties go to the lower id.
    pub fn next_token(&self, hidden: &Matrix) -> u32 {
        let last = hidden.row(hidden.rows() - 1);
        let head = &self.weights.fixed().head;
        let mut best = 0usize;
        let mut best_logit = f64::NEG_INFINITY;
        for t in 0..head.rows() {
            let logit = dot(last, head.row(t));
            if logit > best_logit {
                best_logit = logit;
                best = t;
            }
        }
        best as u32
    }
}

/// Greedy continuation of `prefix + prompt` for `horizon` tokens.
pub fn generate(weights: &ModelWeights, prefix: &VisualPrefix, prompt: &[u32], horizon: usize) -> Result<Vec<u32>> {
    let mut dec = Decoder::new(weights);
    let mut hidden = dec.extend(Some(&prefix.tokens), prompt)?;
    let mut out = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let tok = dec.next_token(&hidden);
        out.push(tok);
        if step + 1 < horizon {
            hidden = dec.extend(None, &[tok])?;
        }
    }
    Ok(out)
}

/// Mean-pooled, unit-norm decoder states of the text alone.
pub fn text_embedding(weights: &ModelWeights, text: &[u32]) -> Result<Vec<f32>> {
    let hidden = Decoder::new(weights).extend(None, text)?;
    Ok(unit_mean(&hidden))
}

pub fn caption_prompt() -> Vec<u32> {
    vec![BOS_TOKEN]
}

pub fn vqa_prompt(question: &[u32]) -> Vec<u32> {
    let mut p = question.to_vec();
    p.push(SEP_TOKEN);
    p
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutput {
    Embeddings { image: Vec<f32>, text: Vec<f32> },
    Tokens(Vec<u32>),
}

pub fn forward(weights: &ModelWeights, probe: &ProbePair, mode: TaskKind) -> Result<TaskOutput> {
    match mode {
        TaskKind::Retrieval => Ok(TaskOutput::Embeddings {
            image: encode_image(weights, &probe.image)?.embedding,
            text: text_embedding(weights, &probe.text_ids)?,
        }),
        TaskKind::Caption => {
            let prefix = encode_image(weights, &probe.image)?;
            Ok(TaskOutput::Tokens(generate(weights, &prefix, &caption_prompt(), CAPTION_HORIZON)?))
        }
        TaskKind::Vqa => {
            let prefix = encode_image(weights, &probe.image)?;
            Ok(TaskOutput::Tokens(generate(weights, &prefix, &vqa_prompt(&probe.question_ids), VQA_HORIZON)?))
        }
    }
}

/// Teacher-forced pass over `prefix + question + SEP + text`, reporting
/// every layer input to `tap`.
pub fn trace_probe(weights: &ModelWeights, probe: &ProbePair, tap: &mut dyn ActivationTap) -> Result<()> {
    let prefix = encode_image_with(weights, &probe.image, tap)?;
    let mut ids = vqa_prompt(&probe.question_ids);
    ids.extend_from_slice(&probe.text_ids);
    Decoder::new(weights).extend_with(Some(&prefix.tokens), &ids, tap)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{build_model, PipelineSpec};
    use crate::tasks::make_probe_set;

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 3, 1).unwrap();
        let prefix = encode_image(&w, &probes.pairs[0].image).unwrap();
        let tokens = generate(&w, &prefix, &caption_prompt(), 6).unwrap();
        // Feed the same sequence in one go and compare the final hidden row.
        let mut seq = caption_prompt();
        seq.extend_from_slice(&tokens[..5]);
        let full = Decoder::new(&w).extend(Some(&prefix.tokens), &seq).unwrap();
        let mut dec = Decoder::new(&w);
        let mut h = dec.extend(Some(&prefix.tokens), &caption_prompt()).unwrap();
        for &t in &tokens[..5] {
            h = dec.extend(None, &[t]).unwrap();
        }
        assert_eq!(full.row(full.rows() - 1), h.row(0));
        assert_eq!(dec.next_token(&h), tokens[5]);
    }

    #[test]
    fn retrieval_embeddings_are_unit_norm() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 5, 2).unwrap();
        for p in &probes.pairs {
            let TaskOutput::Embeddings { image, text } = forward(&w, p, TaskKind::Retrieval).unwrap() else {
                panic!("expected embeddings");
            };
            for e in [image, text] {
                let n = e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "{n}");
            }
        }
    }

    #[test]
    fn identical_probes_identical_outputs() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 5, 1).unwrap();
        let p = &probes.pairs[0];
        for mode in TaskKind::ALL {
            assert_eq!(forward(&w, p, mode).unwrap(), forward(&w, &p.clone(), mode).unwrap());
        }
    }

    #[test]
    fn shape_errors() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        assert!(encode_image(&w, &Matrix::zeros(3, 3)).is_err());
        assert!(text_embedding(&w, &[9999]).is_err());
        assert!(text_embedding(&w, &vec![2; spec.max_positions + 1]).is_err());
    }

    #[test]
    fn projector_pipeline_runs() {
        let spec = PipelineSpec::projector();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 5, 1).unwrap();
        let out = forward(&w, &probes.pairs[0], TaskKind::Vqa).unwrap();
        assert!(matches!(out, TaskOutput::Tokens(t) if t.len() == VQA_HORIZON));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let q = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = [1.0f32, 0.0, 0.0, 1.0];
        let v = [2.0f32, 4.0, 6.0, 8.0];
        let causal = attention(&q, &k, &v, 1, Some(0));
        assert_eq!(causal.row(0), &[2.0, 4.0]);
        let full = attention(&q, &k, &v, 2, None);
        // head 0 uses column 0 only: both queries see k0=1, k1=0 with scale 1.
        assert!(full.row(0)[0] > 2.0 && full.row(0)[0] < 6.0);
    }
}
