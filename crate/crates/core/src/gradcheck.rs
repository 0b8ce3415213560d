//! Finite-difference checks of the hand-derived gradients on random
//! instances: the full episode loss through pooling and DGAdaIN, and the
//! classifier loss alone.

use rand::Rng;

use crate::classifier::{self, EpisodeFeatures};
use crate::dgadain::{self, FeatureNorm, InitScheme};
use crate::error::Result;
use crate::numerics::{self, Batch3};
use crate::rng::{indexed_stream, Purpose, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Number of random instances per suite.
    pub instances: usize,
    pub h: f64,
    /// Support videos (one per class); the query is an extra video.
    pub b: usize,
    pub d: usize,
    pub l: usize,
    pub norm: FeatureNorm,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            h: 1e-5,
            b: 2,
            d: 3,
            l: 5,
            norm: FeatureNorm::Pooled,
        }
    }
}

/// Worst relative error of one gradient over all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub worst: f64,
    /// Instance index that produced `worst`.
    pub instance: usize,
}

fn uniform(n: usize, lo: f64, hi: f64, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

struct FusionInstance {
    params: dgadain::DgadainParams,
    rgb: Batch3,
    depth: Batch3,
    true_slot: usize,
}

impl FusionInstance {
    fn random(cfg: &GradcheckConfig, rng: &mut Stream) -> Result<Self> {
        let n = cfg.b + 1;
        let mut params = dgadain::init_params(cfg.l, InitScheme::Default, numerics::DEFAULT_EPS, rng)?;
        params.b_s = uniform(cfg.l, 0.5, 1.5, rng);
        params.b_b = uniform(cfg.l, -0.5, 0.5, rng);
        Ok(Self {
            params,
            rgb: Batch3::from_vec(n, cfg.d, cfg.l, uniform(n * cfg.d * cfg.l, -2.0, 2.0, rng))?,
            depth: Batch3::from_vec(n, cfg.d, cfg.l, uniform(n * cfg.d * cfg.l, -2.0, 2.0, rng))?,
            true_slot: rng.random_range(0..cfg.b),
        })
    }

    fn features(&self, outputs: &[Vec<f64>]) -> EpisodeFeatures {
        let b = outputs.len() - 1;
        EpisodeFeatures {
            n_way: b,
            support: outputs[..b].iter().cloned().zip(0..b).collect(),
            query: outputs[b].clone(),
            true_slot: self.true_slot,
        }
    }

    fn loss(&self, params: &dgadain::DgadainParams, rgb: &Batch3, depth: &Batch3, norm: FeatureNorm) -> Result<f64> {
        let (fused, _) = dgadain::forward(params, rgb, depth)?;
        let pooled = dgadain::pool_normalize(&fused, norm)?;
        Ok(classifier::episode_loss(&self.features(pooled.outputs()))?.loss)
    }
}

const FUSION_NAMES: [&str; 6] = ["w_s", "b_s", "w_b", "b_b", "i_rgb", "i_d"];

fn fusion_errors(cfg: &GradcheckConfig, inst: &FusionInstance) -> Result<[f64; 6]> {
    let (fused, cache) = dgadain::forward(&inst.params, &inst.rgb, &inst.depth)?;
    let pooled = dgadain::pool_normalize(&fused, cfg.norm)?;
    let out = classifier::episode_loss(&inst.features(pooled.outputs()))?;
    let mut g_out = out.grad_support;
    g_out.push(out.grad_query);
    let g_fused = dgadain::pool_normalize_backward(&pooled, &g_out)?;
    let grads = dgadain::backward(&inst.params, &cache, &g_fused)?;

    let mut errors = [0.0; 6];
    let analytic = grads.params.tensors();
    for (t, err) in errors.iter_mut().take(4).enumerate() {
        let base = inst.params.tensors()[t].to_vec();
        let numeric = numerics::finite_diff_grad(
            |x| {
                let mut p = inst.params.clone();
                p.tensors_mut()[t].copy_from_slice(x);
                inst.loss(&p, &inst.rgb, &inst.depth, cfg.norm).unwrap_or(f64::NAN)
            },
            &base,
            cfg.h,
        )?;
        *err = numerics::max_relative_error(analytic[t], &numeric);
    }
    let shape = inst.rgb.shape();
    let numeric_rgb = numerics::finite_diff_grad(
        |x| {
            let rgb = Batch3::from_vec(shape.0, shape.1, shape.2, x.to_vec()).expect("same shape");
            inst.loss(&inst.params, &rgb, &inst.depth, cfg.norm).unwrap_or(f64::NAN)
        },
        inst.rgb.data(),
        cfg.h,
    )?;
    errors[4] = numerics::max_relative_error(grads.i_rgb.data(), &numeric_rgb);
    let numeric_depth = numerics::finite_diff_grad(
        |x| {
            let depth = Batch3::from_vec(shape.0, shape.1, shape.2, x.to_vec()).expect("same shape");
            inst.loss(&inst.params, &inst.rgb, &depth, cfg.norm).unwrap_or(f64::NAN)
        },
        inst.depth.data(),
        cfg.h,
    )?;
    errors[5] = numerics::max_relative_error(grads.i_d.data(), &numeric_depth);
    Ok(errors)
}

fn classifier_errors(cfg: &GradcheckConfig, rng: &mut Stream) -> Result<[f64; 2]> {
    let (n_way, k_shot) = (3, 2);
    let support: Vec<(Vec<f64>, usize)> = (0..n_way * k_shot)
        .map(|i| (uniform(cfg.l, -1.0, 1.0, rng), i / k_shot))
        .collect();
    let ep = EpisodeFeatures {
        n_way,
        support,
        query: uniform(cfg.l, -1.0, 1.0, rng),
        true_slot: rng.random_range(0..n_way),
    };
    let out = classifier::episode_loss(&ep)?;
    let loss_of = |e: &EpisodeFeatures| classifier::episode_loss(e).map_or(f64::NAN, |o| o.loss);

    let numeric_q = numerics::finite_diff_grad(
        |x| {
            let mut e = ep.clone();
            e.query = x.to_vec();
            loss_of(&e)
        },
        &ep.query,
        cfg.h,
    )?;
    let flat_support: Vec<f64> = ep.support.iter().flat_map(|(v, _)| v.clone()).collect();
    let numeric_s = numerics::finite_diff_grad(
        |x| {
            let mut e = ep.clone();
            for (i, (v, _)) in e.support.iter_mut().enumerate() {
                v.copy_from_slice(&x[i * cfg.l..(i + 1) * cfg.l]);
            }
            loss_of(&e)
        },
        &flat_support,
        cfg.h,
    )?;
    let analytic_s: Vec<f64> = out.grad_support.concat();
    Ok([
        numerics::max_relative_error(&out.grad_query, &numeric_q),
        numerics::max_relative_error(&analytic_s, &numeric_s),
    ])
}

fn record(results: &mut [GradResult], errors: &[f64], instance: usize) {
    for (r, &e) in results.iter_mut().zip(errors) {
        // A NaN error is the worst possible outcome and stays recorded.
        if !r.worst.is_nan() && (e.is_nan() || e > r.worst) {
            r.worst = e;
            r.instance = instance;
        }
    }
}

/// Runs both suites. Instance `i` of each suite draws from the stream for
/// `(seed, i)`, so results depend only on the configuration.
pub fn run(cfg: &GradcheckConfig) -> Result<Vec<GradResult>> {
    let new = |suite, name| GradResult {
        suite,
        name,
        worst: 0.0,
        instance: 0,
    };
    let mut fusion: Vec<GradResult> = FUSION_NAMES.iter().map(|n| new("dgadain", *n)).collect();
    let mut clf = vec![new("classifier", "query"), new("classifier", "support")];
    for i in 0..cfg.instances {
        let mut rng = indexed_stream(cfg.seed, Purpose::Init, i as u64);
        let inst = FusionInstance::random(cfg, &mut rng)?;
        record(&mut fusion, &fusion_errors(cfg, &inst)?, i);
        record(&mut clf, &classifier_errors(cfg, &mut rng)?, i);
    }
    fusion.extend(clf);
    Ok(fusion)
}
