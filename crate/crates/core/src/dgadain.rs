//! Depth-guided adaptive instance normalization.
//!
//! For every (video, frame) row the RGB feature is instance-normalized along
//! the feature axis and then scaled and shifted by affine parameters that two
//! fully connected maps produce from the depth feature of the same frame:
//!
//! ```text
//! gamma = W_s * depth + b_s
//! beta  = W_b * depth + b_b
//! fused = gamma * (rgb - mean(rgb)) / sqrt(var(rgb) + eps) + beta
//! ```
//!
//! [`backward`] is the exact gradient of that map, including the dependence
//! of the mean and standard deviation on the RGB input.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{self, Batch3, Matrix};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Zero weights, unit scale bias, zero shift bias: plain instance norm.
    Identity,
    /// Weights uniform in ±1/sqrt(L), biases as in `Identity`.
    #[default]
    Default,
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(InitScheme::Identity),
            "default" => Ok(InitScheme::Default),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Weights of the scale map (`w_s`, `b_s`) and the shift map (`w_b`, `b_b`).
/// Weight matrices are stored output-major: `w_s[i][j]` maps depth feature
/// `j` to scale `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgadainParams {
    pub w_s: Matrix,
    pub b_s: Vec<f64>,
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
    pub eps: f64,
}

/// Same layout as [`DgadainParams`], without `eps`. Holds gradients and
/// optimizer velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct DgadainGrads {
    pub w_s: Matrix,
    pub b_s: Vec<f64>,
    pub w_b: Matrix,
    pub b_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 4] = ["w_s", "b_s", "w_b", "b_b"];

impl DgadainParams {
    pub fn width(&self) -> usize {
        self.b_s.len()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w_s.data(), &self.b_s, self.w_b.data(), &self.b_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w_s.data_mut(), &mut self.b_s, self.w_b.data_mut(), &mut self.b_b]
    }

    /// All parameters in `w_s, b_s, w_b, b_b` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = 2 * self.width() * (self.width() + 1);
        if flat.len() != n {
            return Err(Error::shape(format!("expected {n} parameters, got {}", flat.len())));
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) && self.eps.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.width();
        if self.w_s.rows() != l || self.w_s.cols() != l || self.w_b.rows() != l || self.w_b.cols() != l || self.b_b.len() != l {
            return Err(Error::shape(format!("affine maps must all have width {l}")));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Numeric(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.is_finite() {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

impl DgadainGrads {
    pub fn zeros(l: usize) -> Self {
        Self {
            w_s: Matrix::zeros(l, l),
            b_s: vec![0.0; l],
            w_b: Matrix::zeros(l, l),
            b_b: vec![0.0; l],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w_s.data(), &self.b_s, self.w_b.data(), &self.b_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w_s.data_mut(), &mut self.b_s, self.w_b.data_mut(), &mut self.b_b]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &DgadainGrads, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub fn init_params(l: usize, scheme: InitScheme, eps: f64, rng: &mut Stream) -> Result<DgadainParams> {
    if l == 0 {
        return Err(Error::Config("feature width must be >= 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut weights = || match scheme {
        InitScheme::Identity => Matrix::zeros(l, l),
        InitScheme::Default => {
            let bound = 1.0 / (l as f64).sqrt();
            let data = (0..l * l).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(l, l, data).expect("square weight matrix")
        }
    };
    let w_s = weights();
    let w_b = weights();
    Ok(DgadainParams {
        w_s,
        b_s: vec![1.0; l],
        w_b,
        b_b: vec![0.0; l],
        eps,
    })
}

/// Intermediates of [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    pub depth: Batch3,
    pub normalized: Batch3,
    pub gamma: Batch3,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FusionCache {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.normalized.shape()
    }
}

fn affine_row(w: &Matrix, b: &[f64], x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = b[i] + numerics::dot(w.row(i), x);
    }
}

pub fn forward(params: &DgadainParams, i_rgb: &Batch3, i_d: &Batch3) -> Result<(Batch3, FusionCache)> {
    let shape = i_rgb.shape();
    if i_d.shape() != shape {
        return Err(Error::shape(format!(
            "rgb batch {:?} and depth batch {:?} differ",
            shape,
            i_d.shape()
        )));
    }
    let (b, d, l) = shape;
    if l != params.width() {
        return Err(Error::shape(format!(
            "batch feature width {l} does not match parameter width {}",
            params.width()
        )));
    }
    let rows = b * d;
    let mut fused = Batch3::zeros(b, d, l);
    let mut normalized = Batch3::zeros(b, d, l);
    let mut gamma = Batch3::zeros(b, d, l);
    let mut means = Vec::with_capacity(rows);
    let mut stds = Vec::with_capacity(rows);
    let mut beta = vec![0.0; l];
    for r in 0..rows {
        let x = i_rgb.flat_row(r);
        let (mu, sigma) = numerics::mean_std(x, params.eps);
        means.push(mu);
        stds.push(sigma);
        for (n, v) in normalized.flat_row_mut(r).iter_mut().zip(x) {
            *n = (v - mu) / sigma;
        }
        let depth = i_d.flat_row(r);
        affine_row(&params.w_s, &params.b_s, depth, gamma.flat_row_mut(r));
        affine_row(&params.w_b, &params.b_b, depth, &mut beta);
        let (n, g) = (normalized.flat_row(r), gamma.flat_row(r));
        for (i, out) in fused.flat_row_mut(r).iter_mut().enumerate() {
            *out = g[i] * n[i] + beta[i];
        }
    }
    Ok((
        fused,
        FusionCache {
            depth: i_d.clone(),
            normalized,
            gamma,
            means,
            stds,
        },
    ))
}

/// Gradients of a scalar loss with respect to everything [`forward`] reads.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub params: DgadainGrads,
    pub i_rgb: Batch3,
    pub i_d: Batch3,
}

pub fn backward(params: &DgadainParams, cache: &FusionCache, grad_fused: &Batch3) -> Result<FusionGrads> {
    let shape = cache.shape();
    if grad_fused.shape() != shape {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match the cached forward batch {:?}",
            grad_fused.shape(),
            shape
        )));
    }
    let (b, d, l) = shape;
    if l != params.width() {
        return Err(Error::shape("cache width does not match parameters"));
    }
    let mut grads = DgadainGrads::zeros(l);
    let mut g_rgb = Batch3::zeros(b, d, l);
    let mut g_depth = Batch3::zeros(b, d, l);
    let mut g_gamma = vec![0.0; l];
    let mut g_norm = vec![0.0; l];
    let inv_l = 1.0 / l as f64;

    for r in 0..b * d {
        let g = grad_fused.flat_row(r);
        let n = cache.normalized.flat_row(r);
        let gam = cache.gamma.flat_row(r);
        let depth = cache.depth.flat_row(r);

        for i in 0..l {
            g_gamma[i] = g[i] * n[i];
            g_norm[i] = g[i] * gam[i];
        }

        // Affine maps: outer products into the weights, rows into the biases.
        for i in 0..l {
            let (gs, gb) = (g_gamma[i], g[i]);
            grads.b_s[i] += gs;
            grads.b_b[i] += gb;
            for (w, &dj) in grads.w_s.row_mut(i).iter_mut().zip(depth) {
                *w += gs * dj;
            }
            for (w, &dj) in grads.w_b.row_mut(i).iter_mut().zip(depth) {
                *w += gb * dj;
            }
        }
        let gd = g_depth.flat_row_mut(r);
        for i in 0..l {
            let (gs, gb) = (g_gamma[i], g[i]);
            for ((o, &ws), &wb) in gd.iter_mut().zip(params.w_s.row(i)).zip(params.w_b.row(i)) {
                *o += gs * ws + gb * wb;
            }
        }

        // Instance normalization, through both the mean and the std.
        let mean_g = g_norm.iter().sum::<f64>() * inv_l;
        let mean_gn = numerics::dot(&g_norm, n) * inv_l;
        let inv_std = 1.0 / cache.stds[r];
        for ((o, &gn), &nv) in g_rgb.flat_row_mut(r).iter_mut().zip(&g_norm).zip(n) {
            *o = inv_std * (gn - mean_g - nv * mean_gn);
        }
    }
    Ok(FusionGrads {
        params: grads,
        i_rgb: g_rgb,
        i_d: g_depth,
    })
}

/// Where the fused features are L2-normalized before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureNorm {
    /// Mean-pool frames, then normalize the video vector.
    #[default]
    Pooled,
    /// Normalize every frame, mean-pool, then normalize the video vector.
    PerFrame,
}

/// Per-video vectors produced by pooling a (B, D, L) batch.
#[derive(Debug, Clone)]
pub struct PoolCache {
    norm: FeatureNorm,
    d: usize,
    /// Unit-norm frames (PerFrame only) and their pre-normalization norms.
    frames: Option<(Batch3, Vec<f64>)>,
    /// Unit-norm video vectors and the norm of each pooled vector.
    outputs: Vec<Vec<f64>>,
    pooled_norms: Vec<f64>,
}

impl PoolCache {
    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }
}

fn normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = numerics::dot(unit, g);
    unit.iter().zip(g).map(|(u, gv)| (gv - u * proj) / norm).collect()
}

/// Frame pooling and L2 normalization for every video in the batch.
pub fn pool_normalize(fused: &Batch3, norm: FeatureNorm) -> Result<PoolCache> {
    let (b, d, l) = fused.shape();
    let frames = match norm {
        FeatureNorm::Pooled => None,
        FeatureNorm::PerFrame => {
            let mut unit = Batch3::zeros(b, d, l);
            let mut norms = Vec::with_capacity(b * d);
            for r in 0..b * d {
                let row = fused.flat_row(r);
                norms.push(numerics::norm(row));
                unit.flat_row_mut(r).copy_from_slice(&numerics::l2_normalize(row)?);
            }
            Some((unit, norms))
        }
    };
    let source = frames.as_ref().map_or(fused, |(u, _)| u);
    let mut outputs = Vec::with_capacity(b);
    let mut pooled_norms = Vec::with_capacity(b);
    for bi in 0..b {
        let mut pooled = vec![0.0; l];
        for di in 0..d {
            for (p, v) in pooled.iter_mut().zip(source.flat_row(bi * d + di)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= d as f64);
        let n = numerics::norm(&pooled);
        outputs.push(numerics::l2_normalize(&pooled)?);
        pooled_norms.push(n);
    }
    Ok(PoolCache {
        norm,
        d,
        frames,
        outputs,
        pooled_norms,
    })
}

/// Gradient of the pooled, normalized outputs back onto the fused batch.
pub fn pool_normalize_backward(cache: &PoolCache, grads: &[Vec<f64>]) -> Result<Batch3> {
    let b = cache.outputs.len();
    if grads.len() != b {
        return Err(Error::shape(format!("expected {b} output gradients, got {}", grads.len())));
    }
    let l = cache.outputs.first().map_or(0, Vec::len);
    let d = cache.d;
    let mut out = Batch3::zeros(b, d, l);
    for bi in 0..b {
        let g_pooled = normalize_backward(&cache.outputs[bi], cache.pooled_norms[bi], &grads[bi]);
        for di in 0..d {
            let r = bi * d + di;
            let g_frame: Vec<f64> = g_pooled.iter().map(|g| g / d as f64).collect();
            let g_frame = match (&cache.norm, &cache.frames) {
                (FeatureNorm::PerFrame, Some((unit, norms))) => normalize_backward(unit.flat_row(r), norms[r], &g_frame),
                _ => g_frame,
            };
            out.flat_row_mut(r).copy_from_slice(&g_frame);
        }
    }
    Ok(out)
}

/// Fuses one video's RGB and depth clips (D×L each) into a unit-norm vector.
pub fn fuse_video(params: &DgadainParams, rgb_clip: &Matrix, depth_clip: &Matrix) -> Result<Vec<f64>> {
    fuse_video_with(params, rgb_clip, depth_clip, FeatureNorm::Pooled)
}

pub fn fuse_video_with(params: &DgadainParams, rgb_clip: &Matrix, depth_clip: &Matrix, norm: FeatureNorm) -> Result<Vec<f64>> {
    let rgb = Batch3::stack(std::slice::from_ref(rgb_clip))?;
    let depth = Batch3::stack(std::slice::from_ref(depth_clip))?;
    let (fused, _) = forward(params, &rgb, &depth)?;
    let mut pooled = pool_normalize(&fused, norm)?;
    Ok(pooled.outputs.swap_remove(0))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMFP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus, optionally, the optimizer's momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DgadainParams,
    pub velocity: Option<DgadainGrads>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.params.width();
        let mut out = Vec::with_capacity(21 + 2 * 8 * 2 * l * (l + 1));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        out.extend_from_slice(&self.params.eps.to_le_bytes());
        for t in self.params.tensors() {
            t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        match &self.velocity {
            Some(v) => {
                out.push(1);
                for t in v.tensors() {
                    t.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("bad magic: not a parameter checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("bad version: expected {CHECKPOINT_VERSION}, found {version}")));
        }
        let l = u32::from_le_bytes(r.take(4, "L")?.try_into().unwrap()) as usize;
        let eps = r.f64s(1, "eps")?[0];
        let maps = r.maps(l, "")?;
        let velocity = match r.take(1, "trainer-state flag")?[0] {
            0 => None,
            1 => Some(r.maps(l, "momentum ")?),
            v => return Err(Error::format(format!("trainer-state flag must be 0 or 1, found {v}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let params = DgadainParams {
            w_s: maps.w_s,
            b_s: maps.b_s,
            w_b: maps.w_b,
            b_b: maps.b_b,
            eps,
        };
        params.validate()?;
        Ok(Self { params, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(format!("checkpoint truncated in {what}")))?;
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn maps(&mut self, l: usize, prefix: &str) -> Result<DgadainGrads> {
        Ok(DgadainGrads {
            w_s: Matrix::from_vec(l, l, self.f64s(l * l, &format!("{prefix}w_s"))?)?,
            b_s: self.f64s(l, &format!("{prefix}b_s"))?,
            w_b: Matrix::from_vec(l, l, self.f64s(l * l, &format!("{prefix}w_b"))?)?,
            b_b: self.f64s(l, &format!("{prefix}b_b"))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::rng::{self, Purpose};

    fn random_batch(rng: &mut Stream, b: usize, d: usize, l: usize, scale: f64) -> Batch3 {
        let data = (0..b * d * l).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        Batch3::from_vec(b, d, l, data).unwrap()
    }

    fn random_params(rng: &mut Stream, l: usize) -> DgadainParams {
        let mut p = init_params(l, InitScheme::Default, 1e-5, rng).unwrap();
        for v in p.b_s.iter_mut().chain(p.b_b.iter_mut()) {
            *v += rng.random_range(-0.5..0.5);
        }
        p
    }

    /// Straight transcription of the fusion formula, one scalar at a time.
    fn scalar_forward(p: &DgadainParams, rgb: &Batch3, depth: &Batch3) -> Batch3 {
        let (b, d, l) = rgb.shape();
        let mut out = Batch3::zeros(b, d, l);
        for bi in 0..b {
            for di in 0..d {
                let mut mu = 0.0;
                for li in 0..l {
                    mu += rgb.get(bi, di, li);
                }
                mu /= l as f64;
                let mut var = 0.0;
                for li in 0..l {
                    var += (rgb.get(bi, di, li) - mu).powi(2);
                }
                let sigma = (var / l as f64 + p.eps).sqrt();
                for i in 0..l {
                    let mut gamma = p.b_s[i];
                    let mut beta = p.b_b[i];
                    for j in 0..l {
                        gamma += p.w_s.get(i, j) * depth.get(bi, di, j);
                        beta += p.w_b.get(i, j) * depth.get(bi, di, j);
                    }
                    out.set(bi, di, i, gamma * (rgb.get(bi, di, i) - mu) / sigma + beta);
                }
            }
        }
        out
    }

    #[test]
    fn identity_init_is_plain_instance_norm() {
        let mut r = rng::stream(1, Purpose::Init);
        let p = init_params(6, InitScheme::Identity, 1e-5, &mut r).unwrap();
        let rgb = random_batch(&mut r, 2, 3, 6, 2.0);
        let depth = random_batch(&mut r, 2, 3, 6, 5.0);
        let (fused, cache) = forward(&p, &rgb, &depth).unwrap();
        assert!(cache.gamma.data().iter().all(|&g| g == 1.0));
        assert_eq!(fused, cache.normalized);
        for row in 0..6 {
            let x = rgb.flat_row(row);
            let (mu, sigma) = numerics::mean_std(x, 1e-5);
            for (f, v) in fused.flat_row(row).iter().zip(x) {
                assert_eq!(*f, (v - mu) / sigma);
            }
        }
        let other_depth = random_batch(&mut r, 2, 3, 6, 5.0);
        let (fused2, _) = forward(&p, &rgb, &other_depth).unwrap();
        let diff = fused.data().iter().zip(fused2.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn default_init_is_reproducible_and_bounded() {
        let a = init_params(16, InitScheme::Default, 1e-5, &mut rng::stream(4, Purpose::Init)).unwrap();
        let b = init_params(16, InitScheme::Default, 1e-5, &mut rng::stream(4, Purpose::Init)).unwrap();
        assert_eq!(a, b);
        let bound = 0.25;
        assert!(a.w_s.data().iter().chain(a.w_b.data()).all(|v| v.abs() <= bound));
        assert!(a.b_s.iter().all(|&v| v == 1.0) && a.b_b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_rgb_rows_give_the_shift() {
        let mut r = rng::stream(2, Purpose::Init);
        let p = random_params(&mut r, 5);
        let rgb = Batch3::from_vec(1, 2, 5, vec![3.0; 10]).unwrap();
        let depth = random_batch(&mut r, 1, 2, 5, 1.0);
        let (fused, cache) = forward(&p, &rgb, &depth).unwrap();
        assert!(cache.normalized.data().iter().all(|&v| v == 0.0));
        for row in 0..2 {
            let mut beta = vec![0.0; 5];
            affine_row(&p.w_b, &p.b_b, depth.flat_row(row), &mut beta);
            assert_eq!(fused.flat_row(row), beta.as_slice());
        }
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut r = rng::stream(3, Purpose::Init);
        let p = random_params(&mut r, 4);
        let rgb = random_batch(&mut r, 2, 3, 4, 1.5);
        let depth = random_batch(&mut r, 2, 3, 4, 1.5);
        let (fused, _) = forward(&p, &rgb, &depth).unwrap();
        let oracle = scalar_forward(&p, &rgb, &depth);
        for (a, b) in fused.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let mut r = rng::stream(3, Purpose::Init);
        let p = random_params(&mut r, 4);
        let a = Batch3::zeros(2, 3, 4);
        assert!(forward(&p, &a, &Batch3::zeros(2, 2, 4)).is_err());
        assert!(forward(&p, &Batch3::zeros(1, 1, 5), &Batch3::zeros(1, 1, 5)).is_err());
        let (_, cache) = forward(&p, &a, &a).unwrap();
        assert!(backward(&p, &cache, &Batch3::zeros(1, 3, 4)).is_err());
    }

    #[test]
    fn normalized_rows_are_standardized() {
        let mut r = rng::stream(5, Purpose::Init);
        let p = random_params(&mut r, 16);
        let rgb = random_batch(&mut r, 4, 4, 16, 3.0);
        let depth = random_batch(&mut r, 4, 4, 16, 1.0);
        let (_, cache) = forward(&p, &rgb, &depth).unwrap();
        for row in 0..16 {
            let n = cache.normalized.flat_row(row);
            let (_, raw_std) = numerics::mean_std(rgb.flat_row(row), 0.0);
            let v = raw_std * raw_std;
            let mean = n.iter().sum::<f64>() / 16.0;
            let ms = n.iter().map(|x| x * x).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((ms - v / (v + p.eps)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::stream(6, Purpose::Init);
        let p = random_params(&mut r, 5);
        let rgb = random_batch(&mut r, 2, 3, 5, 1.0);
        let depth = random_batch(&mut r, 2, 3, 5, 1.0);
        let (_, cache) = forward(&p, &rgb, &depth).unwrap();
        let g = backward(&p, &cache, &Batch3::zeros(2, 3, 5)).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert!(g.i_rgb.data().iter().chain(g.i_d.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn sum_loss_bias_gradients() {
        let mut r = rng::stream(7, Purpose::Init);
        let p = init_params(5, InitScheme::Identity, 1e-5, &mut r).unwrap();
        let rgb = random_batch(&mut r, 2, 3, 5, 1.0);
        let depth = random_batch(&mut r, 2, 3, 5, 1.0);
        let (_, cache) = forward(&p, &rgb, &depth).unwrap();
        let ones = Batch3::from_vec(2, 3, 5, vec![1.0; 30]).unwrap();
        let g = backward(&p, &cache, &ones).unwrap();
        assert!(g.params.b_b.iter().all(|&v| v == 6.0));
        for i in 0..5 {
            let expected: f64 = (0..6).map(|row| cache.normalized.flat_row(row)[i]).sum();
            assert!((g.params.b_s[i] - expected).abs() < 1e-12);
        }
    }

    /// Half squared norm of the fused batch as a function of a flat view of
    /// one input group.
    fn check_all_gradients(seed: u64) -> [f64; 6] {
        let mut r = rng::stream(seed, Purpose::Init);
        let (b, d, l) = (2, 3, 5);
        let p = random_params(&mut r, l);
        let rgb = random_batch(&mut r, b, d, l, 2.0);
        let depth = random_batch(&mut r, b, d, l, 2.0);
        let loss = |p: &DgadainParams, rgb: &Batch3, depth: &Batch3| {
            let (f, _) = forward(p, rgb, depth).unwrap();
            0.5 * f.data().iter().map(|v| v * v).sum::<f64>()
        };
        let (fused, cache) = forward(&p, &rgb, &depth).unwrap();
        let g = backward(&p, &cache, &fused).unwrap();

        let h = 1e-5;
        let flat = p.flatten();
        let num_params = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.set_flat(x).unwrap();
                loss(&q, &rgb, &depth)
            },
            &flat,
            h,
        )
        .unwrap();
        let num_rgb = finite_diff_grad(
            |x| loss(&p, &Batch3::from_vec(b, d, l, x.to_vec()).unwrap(), &depth),
            rgb.data(),
            h,
        )
        .unwrap();
        let num_depth = finite_diff_grad(
            |x| loss(&p, &rgb, &Batch3::from_vec(b, d, l, x.to_vec()).unwrap()),
            depth.data(),
            h,
        )
        .unwrap();

        let analytic = g.params.flatten();
        let mut errs = [0.0; 6];
        let mut at = 0;
        for (k, t) in g.params.tensors().iter().enumerate() {
            let n = t.len();
            errs[k] = max_relative_error(&analytic[at..at + n], &num_params[at..at + n]);
            at += n;
        }
        errs[4] = max_relative_error(g.i_rgb.data(), &num_rgb);
        errs[5] = max_relative_error(g.i_d.data(), &num_depth);
        errs
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let errs = check_all_gradients(seed);
            for (name, e) in ["w_s", "b_s", "w_b", "b_b", "i_rgb", "i_d"].iter().zip(errs) {
                assert!(e < 1e-6, "seed {seed}: {name} relative error {e}");
            }
        }
    }

    #[test]
    fn depth_changes_default_output() {
        let mut r = rng::stream(8, Purpose::Init);
        let p = random_params(&mut r, 8);
        let rgb = random_batch(&mut r, 1, 4, 8, 1.0);
        let depth = random_batch(&mut r, 1, 4, 8, 1.0);
        let mut shifted = depth.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
        let (a, _) = forward(&p, &rgb, &depth).unwrap();
        let (b, _) = forward(&p, &rgb, &shifted).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn fuse_video_cases() {
        let mut r = rng::stream(9, Purpose::Init);
        let id = init_params(6, InitScheme::Identity, 1e-5, &mut r).unwrap();
        let row = Matrix::from_rows(&[vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.5]]).unwrap();
        let depth = Matrix::from_rows(&[vec![9.0; 6]]).unwrap();
        let (mu, sigma) = numerics::mean_std(row.row(0), 1e-5);
        let expected: Vec<f64> = row.row(0).iter().map(|v| (v - mu) / sigma).collect();
        let expected = numerics::l2_normalize(&expected).unwrap();
        let got = fuse_video(&id, &row, &depth).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let p = random_params(&mut r, 6);
        let rgb = Matrix::from_vec(5, 6, (0..30).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let depth = Matrix::from_vec(5, 6, (0..30).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let v = fuse_video(&p, &rgb, &depth).unwrap();
        assert!((numerics::norm(&v) - 1.0).abs() < 1e-12);

        let order = [3, 0, 4, 1, 2];
        let permute = |m: &Matrix| Matrix::from_rows(&order.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let w = fuse_video(&p, &permute(&rgb), &permute(&depth)).unwrap();
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }

        let per_frame = fuse_video_with(&p, &rgb, &depth, FeatureNorm::PerFrame).unwrap();
        assert!((numerics::norm(&per_frame) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_backward_matches_finite_differences() {
        let mut r = rng::stream(10, Purpose::Init);
        let fused = random_batch(&mut r, 2, 3, 4, 1.0);
        let weights: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        for norm in [FeatureNorm::Pooled, FeatureNorm::PerFrame] {
            let objective = |x: &[f64]| {
                let batch = Batch3::from_vec(2, 3, 4, x.to_vec()).unwrap();
                let pooled = pool_normalize(&batch, norm).unwrap();
                pooled.outputs().iter().zip(&weights).map(|(o, w)| numerics::dot(o, w)).sum::<f64>()
            };
            let cache = pool_normalize(&fused, norm).unwrap();
            let analytic = pool_normalize_backward(&cache, &weights).unwrap();
            let numeric = finite_diff_grad(objective, fused.data(), 1e-5).unwrap();
            assert!(max_relative_error(analytic.data(), &numeric) < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::stream(11, Purpose::Init);
        let p = random_params(&mut r, 3);
        let plain = Checkpoint { params: p.clone(), velocity: None };
        let bytes = plain.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 8 * 24 + 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), plain);

        let mut v = DgadainGrads::zeros(3);
        v.b_b[1] = -0.5;
        let full = Checkpoint { params: p, velocity: Some(v) };
        let bytes = full.to_bytes();
        assert_eq!(bytes.len(), 20 + 2 * 8 * 24 + 1);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), full);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));
    }
}
