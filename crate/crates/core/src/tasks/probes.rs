use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::pipeline::PipelineSpec;
use crate::Matrix;

pub const LATENT_DIM: usize = 8;
pub const TEXT_LEN: usize = 12;
pub const QUESTION_LEN: usize = 6;
/// Ids below this are reserved for BOS and SEP.
pub const FIRST_CONTENT_TOKEN: u32 = 2;
const MODALITY_NOISE: f64 = 0.5;
const PATCH_NOISE: f64 = 0.1;

/// One synthetic image/text pair. Both sides are rendered from noisy copies
/// of a shared latent vector, which is kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePair {
    #[serde(skip)]
    pub image: Matrix,
    pub text_ids: Vec<u32>,
    pub question_ids: Vec<u32>,
    pub image_latent: Vec<f64>,
    pub text_latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub pairs: Vec<ProbePair>,
    pub seed: u64,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` pairs.
    pub fn truncated(&self, n: usize) -> ProbeSet {
        ProbeSet { pairs: self.pairs[..n.min(self.pairs.len())].to_vec(), seed: self.seed }
    }
}

fn normals(rng: &mut RngStream, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.next_normal() * std).collect()
}

fn tokens(table: &[f64], latent: &[f64], vocab: usize, len: usize, rng: &mut RngStream) -> Vec<u32> {
    (0..len)
        .map(|_| {
            let mut best = (f64::NEG_INFINITY, FIRST_CONTENT_TOKEN);
            for v in FIRST_CONTENT_TOKEN as usize..vocab {
                let row = &table[v * LATENT_DIM..(v + 1) * LATENT_DIM];
                let logit = row.iter().zip(latent).map(|(a, b)| a * b).sum::<f64>() + rng.next_normal();
                if logit > best.0 {
                    best = (logit, v as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Deterministic probe pairs for `spec`.
pub fn make_probe_set(spec: &PipelineSpec, seed: u64, n_pairs: usize) -> Result<ProbeSet> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("a probe set needs at least one pair".into()));
    }
    if spec.vocab <= FIRST_CONTENT_TOKEN as usize {
        return Err(Error::InvalidSpec(format!("vocab {} leaves no content tokens", spec.vocab)));
    }
    let (patches, dim) = (spec.patch_count, spec.patch_dim);
    let mut world = RngStream::derive(seed, 0x9e0b);
    let render = normals(&mut world, patches * LATENT_DIM * dim, 1.0 / (LATENT_DIM as f64).sqrt());
    let table = normals(&mut world, spec.vocab * LATENT_DIM, 1.0);

    let pairs = (0..n_pairs)
        .map(|i| {
            let mut rng = RngStream::derive(seed, 0x7a1e_0000 + i as u64);
            let shared = normals(&mut rng, LATENT_DIM, 1.0);
            let noisy = |rng: &mut RngStream| -> Vec<f64> {
                shared.iter().map(|z| z + rng.next_normal() * MODALITY_NOISE).collect()
            };
            let image_latent = noisy(&mut rng);
            let text_latent = noisy(&mut rng);
            let mut data = Vec::with_capacity(patches * dim);
            for p in 0..patches {
                let block = &render[p * LATENT_DIM * dim..(p + 1) * LATENT_DIM * dim];
                for c in 0..dim {
                    let v: f64 = (0..LATENT_DIM).map(|l| block[l * dim + c] * image_latent[l]).sum();
                    data.push((v + rng.next_normal() * PATCH_NOISE) as f32);
                }
            }
            let text_ids = tokens(&table, &text_latent, spec.vocab, TEXT_LEN, &mut rng);
            let question_ids = tokens(&table, &text_latent, spec.vocab, QUESTION_LEN, &mut rng);
            ProbePair { image: Matrix::from_parts(patches, dim, data), text_ids, question_ids, image_latent, text_latent }
        })
        .collect();
    Ok(ProbeSet { pairs, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn deterministic_and_sized() {
        let spec = PipelineSpec::default();
        let a = make_probe_set(&spec, 4, 128).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, make_probe_set(&spec, 4, 128).unwrap());
        assert_ne!(a.pairs[0], make_probe_set(&spec, 5, 1).unwrap().pairs[0]);
        // A prefix of a larger set is the smaller set.
        assert_eq!(a.pairs[..3], make_probe_set(&spec, 4, 3).unwrap().pairs[..]);
    }

    #[test]
    fn ids_and_shapes() {
        let spec = PipelineSpec { vocab: 40, ..PipelineSpec::default() };
        let probes = make_probe_set(&spec, 1, 16).unwrap();
        for p in &probes.pairs {
            assert_eq!((p.image.rows(), p.image.cols()), (spec.patch_count, spec.patch_dim));
            assert_eq!((p.text_ids.len(), p.question_ids.len()), (TEXT_LEN, QUESTION_LEN));
            assert!(p.text_ids.iter().chain(&p.question_ids).all(|&t| (2..40).contains(&t)));
        }
        assert!(make_probe_set(&spec, 1, 0).is_err());
    }

    #[test]
    fn paired_latents_are_closer() {
        let probes = make_probe_set(&PipelineSpec::default(), 9, 64).unwrap();
        let n = probes.len();
        let (mut matched, mut mismatched) = (0.0, 0.0);
        for i in 0..n {
            let p = &probes.pairs[i];
            matched += cosine(&p.image_latent, &p.text_latent);
            mismatched += cosine(&p.image_latent, &probes.pairs[(i + 1) % n].text_latent);
        }
        assert!(matched / n as f64 > mismatched / n as f64 + 0.3);
    }
}
