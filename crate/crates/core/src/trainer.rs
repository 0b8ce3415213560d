//! Episodic meta-training with SGD and momentum.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::classifier::{self, Similarity};
use crate::dgadain::{self, Checkpoint, DgadainGrads, DgadainParams, FeatureNorm, InitScheme, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::evaluator::{self, DepthProbe, EvalConfig, EvalReport};
use crate::featurestore::{Dataset, Split};
use crate::model::{self, FusionKind, FusionModel};
use crate::numerics;
use crate::rng::{indexed_stream, stream, Purpose};
use crate::sampler::{self, ClipConfig, Episode, EpisodeSpec, Phase};

/// When the optimizer steps within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// One update after every clip pair.
    #[default]
    PerPair,
    /// Average the gradients of all pairs, then update once.
    Accumulate,
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pair" => Ok(UpdateMode::PerPair),
            "accumulate" => Ok(UpdateMode::Accumulate),
            other => Err(Error::Config(format!("unknown update mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    /// Multiply the rate by `lr_decay_factor` every this many epochs.
    pub lr_decay_after_epochs: Option<usize>,
    pub clips: ClipConfig,
    pub seed: u64,
    pub eps: f64,
    pub init: InitScheme,
    pub fusion: FusionKind,
    pub update: UpdateMode,
    /// Rescale each gradient to at most this global norm. Off by default.
    pub clip_grad_norm: Option<f64>,
    pub feature_norm: FeatureNorm,
    pub similarity: Similarity,
    pub split: Split,
    /// Validation episodes after every epoch; 0 disables the hook.
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            epochs: 6,
            episodes_per_epoch: 2000,
            lr: 2e-5,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_after_epochs: None,
            clips: ClipConfig::default(),
            seed: 0,
            eps: numerics::DEFAULT_EPS,
            init: InitScheme::Default,
            fusion: FusionKind::DepthGuided,
            update: UpdateMode::PerPair,
            clip_grad_norm: None,
            feature_norm: FeatureNorm::Pooled,
            similarity: Similarity::Cosine,
            split: Split::Base,
            val_episodes: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return fail("epochs and episodes_per_epoch must be >= 1");
        }
        if self.n_way == 0 || self.k_shot == 0 {
            return fail("n_way and k_shot must be >= 1");
        }
        if self.clips.num_seg == 0 || self.clips.num_f == 0 {
            return fail("num_seg and num_f must be >= 1");
        }
        if self.lr_decay_after_epochs == Some(0) {
            return fail("lr_decay_after_epochs must be >= 1");
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive");
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("gradient clipping norm must be positive");
        }
        Ok(())
    }

    /// Step size for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_after_epochs {
            Some(after) => self.lr * self.lr_decay_factor.powi(((epoch.max(1) - 1) / after) as i32),
            None => self.lr,
        }
    }

    fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            split: self.split,
            n_way: self.n_way,
            k_shot: self.k_shot,
            phase: Phase::Train,
            clips: self.clips,
        }
    }
}

/// Parameters, optimizer velocity and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: FusionModel,
    /// One buffer per parameter set, same shapes.
    pub velocity: Vec<DgadainGrads>,
    /// Last completed epoch, 1-based.
    pub epoch: usize,
    /// Episodes processed so far, over all epochs.
    pub episodes: usize,
    pub updates: usize,
    pub loss_sum: f64,
    pub correct: usize,
    pub pairs: usize,
}

impl TrainState {
    /// Fresh parameters drawn from the init stream of `cfg.seed`.
    pub fn init(cfg: &TrainConfig, l: usize) -> Result<Self> {
        let mut rng = stream(cfg.seed, Purpose::Init);
        let params = (0..cfg.fusion.param_sets())
            .map(|_| dgadain::init_params(l, cfg.init, cfg.eps, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_model(FusionModel::new(cfg.fusion, params)?))
    }

    pub fn from_model(model: FusionModel) -> Self {
        let l = model.width();
        let velocity = model.params().iter().map(|_| DgadainGrads::zeros(l)).collect();
        Self {
            model,
            velocity,
            epoch: 0,
            episodes: 0,
            updates: 0,
            loss_sum: 0.0,
            correct: 0,
            pairs: 0,
        }
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.pairs.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.pairs.max(1) as f64
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`. Refuses non-finite gradients
/// and reports the offending tensor.
pub fn sgd_step(
    params: &mut DgadainParams,
    velocity: &mut DgadainGrads,
    grads: &DgadainGrads,
    lr: f64,
    momentum: f64,
) -> std::result::Result<(), &'static str> {
    for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(name);
        }
    }
    for ((p, v), g) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads.tensors()) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    /// Episode index within the epoch, from 0.
    pub episode: usize,
    pub pair: usize,
    pub loss: f64,
    pub correct: bool,
    pub lr: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} episode={} pair={} loss={:.6} correct={} lr={:e}",
            self.epoch,
            self.episode,
            self.pair,
            self.loss,
            u8::from(self.correct),
            self.lr
        )
    }
}

fn clip_norm(grads: &mut [DgadainGrads], max: Option<f64>) {
    let Some(max) = max else { return };
    let total = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
    if total > max {
        grads.iter_mut().for_each(|g| g.scale(max / total));
    }
}

fn apply(state: &mut TrainState, cfg: &TrainConfig, grads: &[DgadainGrads], lr: f64, at: (usize, usize, usize)) -> Result<()> {
    let TrainState { model, velocity, .. } = state;
    for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        sgd_step(p, v, g, lr, cfg.momentum).map_err(|param| Error::NonFiniteGradient {
            param,
            epoch: at.0,
            episode: at.1,
            pair: at.2,
        })?;
    }
    state.updates += 1;
    Ok(())
}

/// Trains on every clip pair of `episode` in order. `epoch` and `index`
/// only label the log and error diagnostics.
pub fn train_episode(
    state: &mut TrainState,
    cfg: &TrainConfig,
    dataset: &Dataset,
    episode: &Episode,
    lr: f64,
    epoch: usize,
    index: usize,
) -> Result<Vec<LogEntry>> {
    let pairs = episode.pairs_per_video();
    let mut log = Vec::with_capacity(pairs);
    let mut accumulated: Option<Vec<DgadainGrads>> = None;
    for pair in 0..pairs {
        let (rgb, depth) = model::pair_batches(dataset, episode, pair)?;
        let cache = state.model.embed(&rgb, &depth, cfg.feature_norm)?;
        let features = model::episode_features(episode, cache.outputs())?;
        let out = classifier::episode_loss_with(&features, cfg.similarity)?;
        if !out.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch} episode {index} pair {pair}"
            )));
        }
        let correct = out.correct(features.true_slot);
        let mut grad_out = out.grad_support;
        grad_out.push(out.grad_query);
        let mut grads = state.model.backward(&cache, &grad_out)?;

        match cfg.update {
            UpdateMode::PerPair => {
                clip_norm(&mut grads, cfg.clip_grad_norm);
                apply(state, cfg, &grads, lr, (epoch, index, pair))?;
            }
            UpdateMode::Accumulate => match accumulated.as_mut() {
                None => accumulated = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_scaled(g, 1.0)),
            },
        }
        state.loss_sum += out.loss;
        state.correct += usize::from(correct);
        state.pairs += 1;
        log.push(LogEntry {
            epoch,
            episode: index,
            pair,
            loss: out.loss,
            correct,
            lr,
        });
    }
    if let Some(mut grads) = accumulated {
        grads.iter_mut().for_each(|g| g.scale(1.0 / pairs as f64));
        clip_norm(&mut grads, cfg.clip_grad_norm);
        apply(state, cfg, &grads, lr, (epoch, index, pairs - 1))?;
    }
    state.episodes += 1;
    Ok(log)
}

pub const CHECKPOINT_EXT: &str = "amfp";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.{CHECKPOINT_EXT}")
}

/// Files holding a model's parameter sets. Two-way models keep the
/// RGB-guided set next to the main file with a `.rev` infix.
pub fn checkpoint_paths(path: &Path, kind: FusionKind) -> Vec<PathBuf> {
    let mut paths = vec![path.to_path_buf()];
    if kind == FusionKind::TwoWay {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        paths.push(path.with_file_name(format!("{stem}.rev.{CHECKPOINT_EXT}")));
    }
    paths
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let paths = checkpoint_paths(path, state.model.kind());
    for ((p, v), file) in state.model.params().iter().zip(&state.velocity).zip(&paths) {
        Checkpoint {
            params: p.clone(),
            velocity: Some(v.clone()),
        }
        .save(file)?;
    }
    Ok(())
}

pub fn load_model(path: &Path, kind: FusionKind) -> Result<FusionModel> {
    let params = checkpoint_paths(path, kind)
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.params))
        .collect::<Result<Vec<_>>>()?;
    FusionModel::new(kind, params)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogEntry>,
    /// Validation report after each epoch, when the hook is enabled.
    pub validation: Vec<(usize, EvalReport)>,
    /// Checkpoints written, one per epoch.
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `epochs × episodes_per_epoch` episodes from `cfg.split`. Episode `i`
/// (counted over all epochs) samples from the stream for `(seed, i)`.
/// Writes `ckpt_epoch<e>.amfp` into `checkpoint_dir` after every epoch.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::init(cfg, dataset.width())?;
    train_from(state, cfg, dataset, checkpoint_dir)
}

pub fn train_from(mut state: TrainState, cfg: &TrainConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.model.width() != dataset.width() {
        return Err(Error::shape(format!(
            "model width {} does not match dataset width {}",
            state.model.width(),
            dataset.width()
        )));
    }
    let spec = cfg.episode_spec();
    let validate_each_epoch =
        cfg.val_episodes > 0 && dataset.manifest().splits().classes(Split::Val).len() >= cfg.n_way;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut log = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch * (1 + cfg.clips.num_aug));
    let mut validation = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in state.epoch + 1..=state.epoch + cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for index in 0..cfg.episodes_per_epoch {
            let mut rng = indexed_stream(cfg.seed, Purpose::Episode, state.episodes as u64);
            let episode = sampler::sample_episode(dataset.manifest(), &spec, &mut rng)?;
            log.extend(train_episode(&mut state, cfg, dataset, &episode, lr, epoch, index)?);
        }
        state.epoch = epoch;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(checkpoint_name(epoch));
            save_state(&state, &path)?;
            checkpoints.push(path);
        }
        if validate_each_epoch {
            let eval = EvalConfig {
                n_way: cfg.n_way,
                k_shot: cfg.k_shot,
                episodes: cfg.val_episodes,
                split: Split::Val,
                mode: cfg.fusion.into(),
                seed: cfg.seed,
                probe: DepthProbe::Matched,
                num_seg: cfg.clips.num_seg,
                num_f: cfg.clips.num_f,
                feature_norm: cfg.feature_norm,
                similarity: cfg.similarity,
                parallel: true,
            };
            validation.push((epoch, evaluator::evaluate(Some(&state.model), dataset, &eval)?));
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        validation,
        checkpoints,
    })
}
