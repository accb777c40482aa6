//! Synthetic probe pairs and fidelity scoring against a full-precision
//! reference.

mod probes;
mod scoring;

pub use probes::{make_probe_set, ProbePair, ProbeSet, FIRST_CONTENT_TOKEN, LATENT_DIM, QUESTION_LEN, TEXT_LEN};
pub use scoring::{
    agreement, default_horizon, generate_tokens, score_generation, score_retrieval, score_task, task_outputs,
    text_embeddings, token_agreement, top1_agreement, visual_prefixes, RetrievalOutputs, ScoreRecord, TaskOutputs,
};
