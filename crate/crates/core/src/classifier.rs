//! Prototype classifier: per-slot mean of the support embeddings, softmax over
//! query-to-prototype similarities, cross-entropy loss with analytic
//! gradients, and the parameter-free baselines.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

/// Score used inside the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negated squared Euclidean distance.
    Euclidean,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "euclidean" => Ok(Similarity::Euclidean),
            other => Err(Error::Config(format!("unknown similarity `{other}`"))),
        }
    }
}

/// Embedded support and query videos of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFeatures {
    pub n_way: usize,
    /// `(embedding, slot)` for every support video.
    pub support: Vec<(Vec<f64>, usize)>,
    pub query: Vec<f64>,
    pub true_slot: usize,
}

impl EpisodeFeatures {
    fn validate(&self) -> Result<usize> {
        let l = self.query.len();
        if self.n_way == 0 || self.support.is_empty() {
            return Err(Error::shape("episode needs at least one class and one support video"));
        }
        if self.true_slot >= self.n_way {
            return Err(Error::Index {
                index: self.true_slot,
                len: self.n_way,
            });
        }
        for (i, (v, slot)) in self.support.iter().enumerate() {
            if v.len() != l {
                return Err(Error::shape(format!(
                    "support video {i} has width {}, query has {l}",
                    v.len()
                )));
            }
            if *slot >= self.n_way {
                return Err(Error::Index {
                    index: *slot,
                    len: self.n_way,
                });
            }
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub vectors: Vec<Vec<f64>>,
    /// Number of support videos averaged into each prototype.
    pub counts: Vec<usize>,
}

pub fn compute_prototypes(ep: &EpisodeFeatures) -> Result<Prototypes> {
    let l = ep.validate()?;
    let mut vectors = vec![vec![0.0; l]; ep.n_way];
    let mut counts = vec![0usize; ep.n_way];
    for (v, slot) in &ep.support {
        counts[*slot] += 1;
        for (p, x) in vectors[*slot].iter_mut().zip(v) {
            *p += x;
        }
    }
    for (slot, (p, &n)) in vectors.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::shape(format!("slot {slot} has no support videos")));
        }
        p.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(Prototypes { vectors, counts })
}

fn scores(protos: &Prototypes, query: &[f64], sim: Similarity) -> Result<Vec<f64>> {
    if numerics::norm(query) == 0.0 && sim == Similarity::Cosine {
        return Err(Error::Degenerate("query embedding has zero norm".into()));
    }
    protos
        .vectors
        .iter()
        .enumerate()
        .map(|(slot, p)| {
            if p.len() != query.len() {
                return Err(Error::shape(format!("prototype {slot} width differs from the query")));
            }
            match sim {
                Similarity::Cosine => numerics::cosine_similarity(query, p).map_err(|_| {
                    Error::Degenerate(format!("prototype for slot {slot} has zero norm"))
                }),
                Similarity::Euclidean => Ok(-query.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()),
            }
        })
        .collect()
}

/// Class-slot probabilities for `query`.
pub fn score_query(protos: &Prototypes, query: &[f64]) -> Result<Vec<f64>> {
    score_query_with(protos, query, Similarity::Cosine)
}

pub fn score_query_with(protos: &Prototypes, query: &[f64], sim: Similarity) -> Result<Vec<f64>> {
    numerics::softmax(&scores(protos, query, sim)?)
}

/// Index of the largest probability; the lowest slot wins ties.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLoss {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub grad_query: Vec<f64>,
    /// Gradient for each support embedding, in `EpisodeFeatures::support` order.
    pub grad_support: Vec<Vec<f64>>,
}

impl EpisodeLoss {
    pub fn correct(&self, true_slot: usize) -> bool {
        predict(&self.probs) == true_slot
    }
}

pub fn episode_loss(ep: &EpisodeFeatures) -> Result<EpisodeLoss> {
    episode_loss_with(ep, Similarity::Cosine)
}

pub fn episode_loss_with(ep: &EpisodeFeatures, sim: Similarity) -> Result<EpisodeLoss> {
    let protos = compute_prototypes(ep)?;
    let s = scores(&protos, &ep.query, sim)?;
    let probs = numerics::softmax(&s)?;
    let loss = numerics::cross_entropy(&probs, ep.true_slot)?;

    let l = ep.query.len();
    let mut grad_query = vec![0.0; l];
    let mut grad_protos = vec![vec![0.0; l]; ep.n_way];
    let q = &ep.query;
    let qn = numerics::norm(q);
    for (c, p) in protos.vectors.iter().enumerate() {
        let g_score = probs[c] - if c == ep.true_slot { 1.0 } else { 0.0 };
        match sim {
            Similarity::Cosine => {
                let pn = numerics::norm(p);
                let cos = s[c];
                for i in 0..l {
                    grad_query[i] += g_score * (p[i] / (qn * pn) - cos * q[i] / (qn * qn));
                    grad_protos[c][i] = g_score * (q[i] / (qn * pn) - cos * p[i] / (pn * pn));
                }
            }
            Similarity::Euclidean => {
                for i in 0..l {
                    let diff = q[i] - p[i];
                    grad_query[i] += g_score * -2.0 * diff;
                    grad_protos[c][i] = g_score * 2.0 * diff;
                }
            }
        }
    }
    let grad_support = ep
        .support
        .iter()
        .map(|(_, slot)| {
            let n = protos.counts[*slot] as f64;
            grad_protos[*slot].iter().map(|g| g / n).collect()
        })
        .collect();
    Ok(EpisodeLoss {
        loss,
        probs,
        grad_query,
        grad_support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Mean-pooled RGB clip only.
    RgbOnly,
    /// Mean-pooled RGB and depth clips, concatenated.
    Concat,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::RgbOnly => "rgb_only",
            BaselineMode::Concat => "concat",
        })
    }
}

fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= m.rows() as f64);
    out
}

pub fn baseline_embed(mode: BaselineMode, rgb_clip: &Matrix, depth_clip: &Matrix) -> Result<Vec<f64>> {
    if rgb_clip.rows() != depth_clip.rows() || rgb_clip.cols() != depth_clip.cols() {
        return Err(Error::shape("rgb and depth clips differ in shape"));
    }
    if rgb_clip.rows() == 0 {
        return Err(Error::shape("empty clip"));
    }
    let mut pooled = mean_rows(rgb_clip);
    if mode == BaselineMode::Concat {
        pooled.extend(mean_rows(depth_clip));
    }
    numerics::l2_normalize(&pooled)
}
