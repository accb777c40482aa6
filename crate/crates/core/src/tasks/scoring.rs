use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ProbePair, ProbeSet};
use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::pipeline::forward::{
    caption_prompt, encode_image, generate, text_embedding, vqa_prompt, CAPTION_HORIZON, VQA_HORIZON,
};
use crate::pipeline::{ModelWeights, TaskKind, VisualPrefix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub task: TaskKind,
    pub score: f64,
    pub n_probes: usize,
}

/// Pooled embeddings of every probe, in probe order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutputs {
    pub image: Vec<Vec<f32>>,
    pub text: Vec<Vec<f32>>,
}

/// Everything a task's fidelity score is computed from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutputs {
    Retrieval(RetrievalOutputs),
    Tokens(Vec<Vec<u32>>),
}

pub fn default_horizon(task: TaskKind) -> usize {
    match task {
        TaskKind::Retrieval => 0,
        TaskKind::Caption => CAPTION_HORIZON,
        TaskKind::Vqa => VQA_HORIZON,
    }
}

fn prompt(task: TaskKind, probe: &ProbePair) -> Result<Vec<u32>> {
    match task {
        TaskKind::Caption => Ok(caption_prompt()),
        TaskKind::Vqa => Ok(vqa_prompt(&probe.question_ids)),
        TaskKind::Retrieval => Err(Error::InvalidArgument("retrieval is not a generation task".into())),
    }
}

pub fn visual_prefixes(weights: &ModelWeights, probes: &ProbeSet) -> Result<Vec<VisualPrefix>> {
    probes.pairs.par_iter().map(|p| encode_image(weights, &p.image)).collect()
}

pub fn text_embeddings(weights: &ModelWeights, probes: &ProbeSet) -> Result<Vec<Vec<f32>>> {
    probes.pairs.par_iter().map(|p| text_embedding(weights, &p.text_ids)).collect()
}

/// Greedy continuations given precomputed visual prefixes (one per probe).
pub fn generate_tokens(
    weights: &ModelWeights,
    prefixes: &[VisualPrefix],
    probes: &ProbeSet,
    task: TaskKind,
    horizon: usize,
) -> Result<Vec<Vec<u32>>> {
    if prefixes.len() != probes.len() {
        return Err(Error::ShapeMismatch(format!("{} prefixes for {} probes", prefixes.len(), probes.len())));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    prefixes
        .par_iter()
        .zip(probes.pairs.par_iter())
        .map(|(prefix, p)| generate(weights, prefix, &prompt(task, p)?, horizon))
        .collect()
}

pub fn task_outputs(weights: &ModelWeights, probes: &ProbeSet, task: TaskKind) -> Result<TaskOutputs> {
    let prefixes = visual_prefixes(weights, probes)?;
    match task {
        TaskKind::Retrieval => Ok(TaskOutputs::Retrieval(RetrievalOutputs {
            image: prefixes.into_iter().map(|p| p.embedding).collect(),
            text: text_embeddings(weights, probes)?,
        })),
        _ => Ok(TaskOutputs::Tokens(generate_tokens(weights, &prefixes, probes, task, default_horizon(task))?)),
    }
}

/// Index of the best-matching candidate for each query; ties go to the
/// lower index.
fn top1(queries: &[Vec<f32>], candidates: &[Vec<f32>]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, c) in candidates.iter().enumerate() {
                let s = dot(q, c);
                if s > best.0 {
                    best = (s, j);
                }
            }
            best.1
        })
        .collect()
}

fn matches<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

/// Fraction of text→image and image→text top-1 choices that agree between
/// the two runs, averaged over both directions.
pub fn top1_agreement(q: &RetrievalOutputs, fp: &RetrievalOutputs) -> Result<f64> {
    let n = fp.image.len();
    if n < 2 {
        return Err(Error::InsufficientProbes { needed: 2, available: n });
    }
    if q.image.len() != n || q.text.len() != n || fp.text.len() != n {
        return Err(Error::ShapeMismatch("retrieval outputs cover different probe counts".into()));
    }
    let t2i = matches(&top1(&q.text, &q.image), &top1(&fp.text, &fp.image));
    let i2t = matches(&top1(&q.image, &q.text), &top1(&fp.image, &fp.text));
    Ok((t2i + i2t) as f64 / (2 * n) as f64)
}

/// Mean positionwise exact-match fraction.
pub fn token_agreement(q: &[Vec<u32>], fp: &[Vec<u32>]) -> Result<f64> {
    if q.len() != fp.len() || q.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} token sequences", q.len(), fp.len())));
    }
    let total: f64 = q
        .iter()
        .zip(fp)
        .map(|(a, b)| {
            let h = a.len().max(b.len()).max(1);
            matches(a, b) as f64 / h as f64
        })
        .sum();
    Ok(total / q.len() as f64)
}

pub fn agreement(q: &TaskOutputs, fp: &TaskOutputs) -> Result<f64> {
    match (q, fp) {
        (TaskOutputs::Retrieval(a), TaskOutputs::Retrieval(b)) => top1_agreement(a, b),
        (TaskOutputs::Tokens(a), TaskOutputs::Tokens(b)) => token_agreement(a, b),
        _ => Err(Error::InvalidArgument("outputs belong to different tasks".into())),
    }
}

pub fn score_retrieval(q_weights: &ModelWeights, fp_weights: &ModelWeights, probes: &ProbeSet) -> Result<ScoreRecord> {
    if probes.len() < 2 {
        return Err(Error::InsufficientProbes { needed: 2, available: probes.len() });
    }
    let q = task_outputs(q_weights, probes, TaskKind::Retrieval)?;
    let fp = task_outputs(fp_weights, probes, TaskKind::Retrieval)?;
    Ok(ScoreRecord { task: TaskKind::Retrieval, score: agreement(&q, &fp)?, n_probes: probes.len() })
}

/// Greedy decoding agreement for `task` (caption or VQA) over `horizon` steps.
pub fn score_generation(
    q_weights: &ModelWeights,
    fp_weights: &ModelWeights,
    probes: &ProbeSet,
    task: TaskKind,
    horizon: usize,
) -> Result<ScoreRecord> {
    let run = |w: &ModelWeights| generate_tokens(w, &visual_prefixes(w, probes)?, probes, task, horizon);
    let score = token_agreement(&run(q_weights)?, &run(fp_weights)?)?;
    Ok(ScoreRecord { task, score, n_probes: probes.len() })
}

/// Scores `task` with its default horizon.
pub fn score_task(q_weights: &ModelWeights, fp_weights: &ModelWeights, probes: &ProbeSet, task: TaskKind) -> Result<ScoreRecord> {
    match task {
        TaskKind::Retrieval => score_retrieval(q_weights, fp_weights, probes),
        _ => score_generation(q_weights, fp_weights, probes, task, default_horizon(task)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{apply_quantization, build_model, PipelineSpec, QuantConfig, QuantMethod, Selector};
    use crate::tasks::make_probe_set;

    fn small() -> PipelineSpec {
        PipelineSpec { d_model: 32, heads: 2, vision_blocks: 3, language_blocks: 3, vocab: 64, ..PipelineSpec::default() }
    }

    #[test]
    fn self_agreement_is_one() {
        let spec = small();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 2, 6).unwrap();
        for task in TaskKind::ALL {
            let r = score_task(&w, &w, &probes, task).unwrap();
            assert_eq!((r.score, r.n_probes), (1.0, 6));
        }
    }

    #[test]
    fn sixteen_bits_is_lossless_for_every_task() {
        let spec = small();
        let w = build_model(&spec).unwrap();
        let (q, _) = apply_quantization(&w, &Selector::all(), &QuantConfig::new(QuantMethod::Uniform, 16), None).unwrap();
        let probes = make_probe_set(&spec, 2, 6).unwrap();
        for task in TaskKind::ALL {
            assert_eq!(score_task(&q, &w, &probes, task).unwrap().score, 1.0, "{task}");
        }
    }

    #[test]
    fn retrieval_needs_two_probes() {
        let spec = small();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 2, 1).unwrap();
        assert!(matches!(score_retrieval(&w, &w, &probes), Err(Error::InsufficientProbes { .. })));
    }

    #[test]
    fn agreement_arithmetic() {
        let fp = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let q = vec![vec![1, 0, 3, 0], vec![5, 6, 7, 8]];
        assert_eq!(token_agreement(&q, &fp).unwrap(), 0.75);
        // horizon 1: fraction of probes whose first token matches
        let q1 = vec![vec![1], vec![0]];
        let fp1 = vec![vec![1], vec![5]];
        assert_eq!(token_agreement(&q1, &fp1).unwrap(), 0.5);

        let e = |v: &[f32]| v.to_vec();
        let fp = RetrievalOutputs { image: vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])], text: vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])] };
        let swapped = RetrievalOutputs { image: vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])], text: vec![e(&[0.0, 1.0]), e(&[0.0, 1.0])] };
        // text→image: [1,1] vs [0,1]; image→text: [0,0] vs [0,1], ties going to index 0.
        assert_eq!(top1_agreement(&swapped, &fp).unwrap(), 0.5);
    }

    #[test]
    fn generation_horizon_one_counts_first_tokens() {
        let spec = small();
        let w = build_model(&spec).unwrap();
        let (q, _) = apply_quantization(&w, &Selector::all(), &QuantConfig::new(QuantMethod::Uniform, 2), None).unwrap();
        let probes = make_probe_set(&spec, 3, 8).unwrap();
        let r = score_generation(&q, &w, &probes, TaskKind::Caption, 1).unwrap();
        let a = generate_tokens(&q, &visual_prefixes(&q, &probes).unwrap(), &probes, TaskKind::Caption, 1).unwrap();
        let b = generate_tokens(&w, &visual_prefixes(&w, &probes).unwrap(), &probes, TaskKind::Caption, 1).unwrap();
        let same = a.iter().zip(&b).filter(|(x, y)| x[0] == y[0]).count();
        assert_eq!(r.score, same as f64 / 8.0);
        assert!(score_generation(&q, &w, &probes, TaskKind::Caption, 0).is_err());
        assert!(score_generation(&q, &w, &probes, TaskKind::Retrieval, 2).is_err());
    }
}
