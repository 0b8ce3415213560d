//! Trainable fusion variants built on the DGAdaIN block, plus clip gathering.

use std::fmt;
use std::str::FromStr;

use crate::classifier::EpisodeFeatures;
use crate::dgadain::{self, DgadainGrads, DgadainParams, FeatureNorm, FusionCache, PoolCache};
use crate::error::{Error, Result};
use crate::featurestore::{Dataset, VideoRecord};
use crate::numerics::{Batch3, Matrix};
use crate::sampler::{ClipPlan, Episode};

/// Selects the frames of `plan` from a T×L feature matrix.
pub fn gather_clip(features: &Matrix, plan: &ClipPlan) -> Result<Matrix> {
    let l = features.cols();
    let mut data = Vec::with_capacity(plan.len() * l);
    for &i in &plan.indices {
        if i >= features.rows() {
            return Err(Error::Index {
                index: i,
                len: features.rows(),
            });
        }
        data.extend_from_slice(features.row(i));
    }
    Matrix::from_vec(plan.len(), l, data)
}

/// RGB and depth clips of one video for one clip pair.
pub fn gather_pair(record: &VideoRecord, rgb: &ClipPlan, depth: &ClipPlan) -> Result<(Matrix, Matrix)> {
    Ok((gather_clip(&record.rgb, rgb)?, gather_clip(&record.depth, depth)?))
}

/// RGB and depth batches for pair `pair` of every episode video, support
/// first and the query last.
pub fn pair_batches(dataset: &Dataset, episode: &Episode, pair: usize) -> Result<(Batch3, Batch3)> {
    let mut rgb = Vec::with_capacity(episode.support.len() + 1);
    let mut depth = Vec::with_capacity(episode.support.len() + 1);
    for v in episode.videos() {
        let p = v.pairs.get(pair).ok_or(Error::Index {
            index: pair,
            len: v.pairs.len(),
        })?;
        let (r, d) = gather_pair(dataset.record(v.video), &p.rgb, &p.depth)?;
        rgb.push(r);
        depth.push(d);
    }
    Ok((Batch3::stack(&rgb)?, Batch3::stack(&depth)?))
}

/// Pairs per-video embeddings (in [`Episode::videos`] order) with their slots.
pub fn episode_features(episode: &Episode, embeddings: &[Vec<f64>]) -> Result<EpisodeFeatures> {
    let n = episode.support.len();
    if embeddings.len() != n + 1 {
        return Err(Error::shape(format!(
            "episode has {} videos, got {} embeddings",
            n + 1,
            embeddings.len()
        )));
    }
    Ok(EpisodeFeatures {
        n_way: episode.n_way,
        support: episode.support.iter().zip(embeddings).map(|(v, e)| (e.clone(), v.slot)).collect(),
        query: embeddings[n].clone(),
        true_slot: episode.query.slot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FusionKind {
    /// Depth produces the affine parameters applied to normalized RGB.
    #[default]
    DepthGuided,
    /// Stream roles swapped: RGB guides normalized depth.
    RgbGuided,
    /// Both directions, averaged after pooling.
    TwoWay,
}

impl FusionKind {
    pub fn param_sets(self) -> usize {
        match self {
            FusionKind::TwoWay => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::DepthGuided => "dgadain",
            FusionKind::RgbGuided => "rgb_guide_depth",
            FusionKind::TwoWay => "two_way",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dgadain" => Ok(FusionKind::DepthGuided),
            "rgb_guide_depth" => Ok(FusionKind::RgbGuided),
            "two_way" => Ok(FusionKind::TwoWay),
            other => Err(Error::Config(format!("`{other}` is not a trainable fusion mode"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    kind: FusionKind,
    /// One parameter set, or `[depth_guided, rgb_guided]` for two-way fusion.
    params: Vec<DgadainParams>,
}

/// Forward intermediates of [`FusionModel::embed`].
#[derive(Debug, Clone)]
pub struct EmbedCache {
    fusion: Vec<FusionCache>,
    pool: PoolCache,
}

impl EmbedCache {
    pub fn outputs(&self) -> &[Vec<f64>] {
        self.pool.outputs()
    }
}

impl FusionModel {
    pub fn new(kind: FusionKind, params: Vec<DgadainParams>) -> Result<Self> {
        if params.len() != kind.param_sets() {
            return Err(Error::Config(format!(
                "{kind} fusion needs {} parameter set(s), got {}",
                kind.param_sets(),
                params.len()
            )));
        }
        let l = params[0].width();
        for p in &params {
            p.validate()?;
            if p.width() != l {
                return Err(Error::shape("parameter sets have different widths"));
            }
        }
        Ok(Self { kind, params })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.params[0].width()
    }

    pub fn params(&self) -> &[DgadainParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DgadainParams] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<DgadainParams> {
        self.params
    }

    /// Unit-norm embeddings for a (B, D, L) batch of clip pairs.
    pub fn embed(&self, rgb: &Batch3, depth: &Batch3, norm: FeatureNorm) -> Result<EmbedCache> {
        let (fused, fusion) = match self.kind {
            FusionKind::DepthGuided => {
                let (f, c) = dgadain::forward(&self.params[0], rgb, depth)?;
                (f, vec![c])
            }
            FusionKind::RgbGuided => {
                let (f, c) = dgadain::forward(&self.params[0], depth, rgb)?;
                (f, vec![c])
            }
            FusionKind::TwoWay => {
                let (mut f, c1) = dgadain::forward(&self.params[0], rgb, depth)?;
                let (g, c2) = dgadain::forward(&self.params[1], depth, rgb)?;
                // Mean pooling is linear, so averaging frames equals averaging pooled vectors.
                for (a, b) in f.data_mut().iter_mut().zip(g.data()) {
                    *a = 0.5 * (*a + b);
                }
                (f, vec![c1, c2])
            }
        };
        let pool = dgadain::pool_normalize(&fused, norm)?;
        Ok(EmbedCache { fusion, pool })
    }

    /// Parameter gradients given the gradient of each output embedding.
    pub fn backward(&self, cache: &EmbedCache, grad_outputs: &[Vec<f64>]) -> Result<Vec<DgadainGrads>> {
        let mut g_fused = dgadain::pool_normalize_backward(&cache.pool, grad_outputs)?;
        if self.kind == FusionKind::TwoWay {
            g_fused.data_mut().iter_mut().for_each(|g| *g *= 0.5);
        }
        self.params
            .iter()
            .zip(&cache.fusion)
            .map(|(p, c)| Ok(dgadain::backward(p, c, &g_fused)?.params))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgadain::{init_params, InitScheme};
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::rng::{indexed_stream, Purpose, Stream};
    use rand::Rng;

    fn batch(b: usize, d: usize, l: usize, rng: &mut Stream) -> Batch3 {
        let data = (0..b * d * l).map(|_| rng.random_range(-2.0..2.0)).collect();
        Batch3::from_vec(b, d, l, data).unwrap()
    }

    fn model(kind: FusionKind, l: usize, rng: &mut Stream) -> FusionModel {
        let params = (0..kind.param_sets())
            .map(|_| init_params(l, InitScheme::Default, 1e-5, rng).unwrap())
            .collect();
        FusionModel::new(kind, params).unwrap()
    }

    #[test]
    fn gather_picks_rows_in_plan_order() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let plan = ClipPlan {
            num_seg: 1,
            num_f: 3,
            offsets: vec![0],
            indices: vec![2, 0, 2],
        };
        let clip = gather_clip(&m, &plan).unwrap();
        assert_eq!(clip.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let bad = ClipPlan {
            indices: vec![3],
            ..plan
        };
        assert!(matches!(gather_clip(&m, &bad), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn rgb_guided_swaps_stream_roles() {
        let mut rng = indexed_stream(1, Purpose::Init, 0);
        let m = model(FusionKind::RgbGuided, 4, &mut rng);
        let (rgb, depth) = (batch(2, 3, 4, &mut rng), batch(2, 3, 4, &mut rng));
        let swapped = m.embed(&rgb, &depth, FeatureNorm::Pooled).unwrap();
        let direct = FusionModel::new(FusionKind::DepthGuided, m.params().to_vec())
            .unwrap()
            .embed(&depth, &rgb, FeatureNorm::Pooled)
            .unwrap();
        assert_eq!(swapped.outputs(), direct.outputs());
    }

    #[test]
    fn two_way_averages_pooled_directions() {
        let mut rng = indexed_stream(2, Purpose::Init, 0);
        let m = model(FusionKind::TwoWay, 5, &mut rng);
        let (rgb, depth) = (batch(1, 3, 5, &mut rng), batch(1, 3, 5, &mut rng));
        let out = m.embed(&rgb, &depth, FeatureNorm::Pooled).unwrap();

        let pooled = |fused: &Batch3| -> Vec<f64> {
            let (_, d, l) = fused.shape();
            (0..l).map(|i| (0..d).map(|r| fused.get(0, r, i)).sum::<f64>() / d as f64).collect()
        };
        let a = pooled(&dgadain::forward(&m.params()[0], &rgb, &depth).unwrap().0);
        let b = pooled(&dgadain::forward(&m.params()[1], &depth, &rgb).unwrap().0);
        let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let n = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, v) in out.outputs()[0].iter().zip(&avg) {
            assert!((o - v / n).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_set_count_is_checked() {
        let mut rng = indexed_stream(3, Purpose::Init, 0);
        let p = init_params(3, InitScheme::Identity, 1e-5, &mut rng).unwrap();
        assert!(FusionModel::new(FusionKind::TwoWay, vec![p.clone()]).is_err());
        assert!(FusionModel::new(FusionKind::DepthGuided, vec![p.clone(), p]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_for_every_kind() {
        for kind in [FusionKind::DepthGuided, FusionKind::RgbGuided, FusionKind::TwoWay] {
            for norm in [FeatureNorm::Pooled, FeatureNorm::PerFrame] {
                let mut rng = indexed_stream(4, Purpose::Init, kind as u64);
                let m = model(kind, 4, &mut rng);
                let (rgb, depth) = (batch(2, 3, 4, &mut rng), batch(2, 3, 4, &mut rng));
                let weights: Vec<Vec<f64>> = (0..2)
                    .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let loss = |m: &FusionModel| -> f64 {
                    let c = m.embed(&rgb, &depth, norm).unwrap();
                    c.outputs()
                        .iter()
                        .zip(&weights)
                        .map(|(o, w)| o.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                        .sum()
                };
                let cache = m.embed(&rgb, &depth, norm).unwrap();
                let grads = m.backward(&cache, &weights).unwrap();
                for (set, g) in grads.iter().enumerate() {
                    let flat = m.params()[set].flatten();
                    let numeric = finite_diff_grad(
                        |x| {
                            let mut probe = m.clone();
                            probe.params_mut()[set].set_flat(x).unwrap();
                            loss(&probe)
                        },
                        &flat,
                        1e-5,
                    )
                    .unwrap();
                    let err = max_relative_error(&g.flatten(), &numeric);
                    assert!(err < 1e-6, "{kind} {norm:?} set {set}: {err}");
                }
            }
        }
    }
}
