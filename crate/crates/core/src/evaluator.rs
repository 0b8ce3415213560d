//! Episodic meta-test evaluation and the ablation harness.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::classifier::{self, BaselineMode, Similarity};
use crate::dgadain::FeatureNorm;
use crate::error::{Error, Result};
use crate::featurestore::{Dataset, Split};
use crate::model::{self, FusionKind, FusionModel};
use crate::rng::{indexed_stream, Purpose};
use crate::sampler::{self, ClipConfig, EpisodeSpec, Phase};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EvalMode {
    #[default]
    Dgadain,
    RgbOnly,
    Concat,
    RgbGuideDepth,
    TwoWay,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Dgadain,
        EvalMode::RgbOnly,
        EvalMode::Concat,
        EvalMode::RgbGuideDepth,
        EvalMode::TwoWay,
    ];

    /// The fusion variant to train, or `None` for parameter-free baselines.
    pub fn fusion(self) -> Option<FusionKind> {
        match self {
            EvalMode::Dgadain => Some(FusionKind::DepthGuided),
            EvalMode::RgbGuideDepth => Some(FusionKind::RgbGuided),
            EvalMode::TwoWay => Some(FusionKind::TwoWay),
            EvalMode::RgbOnly | EvalMode::Concat => None,
        }
    }

    pub fn baseline(self) -> Option<BaselineMode> {
        match self {
            EvalMode::RgbOnly => Some(BaselineMode::RgbOnly),
            EvalMode::Concat => Some(BaselineMode::Concat),
            _ => None,
        }
    }
}

impl From<FusionKind> for EvalMode {
    fn from(kind: FusionKind) -> Self {
        match kind {
            FusionKind::DepthGuided => EvalMode::Dgadain,
            FusionKind::RgbGuided => EvalMode::RgbGuideDepth,
            FusionKind::TwoWay => EvalMode::TwoWay,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.fusion(), self.baseline()) {
            (Some(kind), _) => kind.fmt(f),
            (_, Some(b)) => b.fmt(f),
            _ => unreachable!("every mode is a fusion or a baseline"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// How depth clips are placed at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthProbe {
    /// Strictly matched pairs from the middle of every segment.
    #[default]
    Matched,
    /// Centered RGB with a randomly placed depth clip.
    Shifted,
}

impl FromStr for DepthProbe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(DepthProbe::Matched),
            "shifted" => Ok(DepthProbe::Shifted),
            other => Err(Error::Config(format!("unknown probe `{other}`"))),
        }
    }
}

impl fmt::Display for DepthProbe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthProbe::Matched => "matched",
            DepthProbe::Shifted => "shifted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub split: Split,
    pub mode: EvalMode,
    pub seed: u64,
    pub probe: DepthProbe,
    pub num_seg: usize,
    pub num_f: usize,
    pub feature_norm: FeatureNorm,
    pub similarity: Similarity,
    /// Evaluate episodes on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            episodes: 10_000,
            split: Split::Novel,
            mode: EvalMode::Dgadain,
            seed: 0,
            probe: DepthProbe::Matched,
            num_seg: 4,
            num_f: 4,
            feature_norm: FeatureNorm::Pooled,
            similarity: Similarity::Cosine,
            parallel: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.num_seg == 0 || self.num_f == 0 {
            return Err(Error::Config("n_way, k_shot, num_seg and num_f must be >= 1".into()));
        }
        Ok(())
    }

    fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            split: self.split,
            n_way: self.n_way,
            k_shot: self.k_shot,
            phase: match self.probe {
                DepthProbe::Matched => Phase::Test,
                DepthProbe::Shifted => Phase::ShiftedTest,
            },
            clips: ClipConfig {
                num_seg: self.num_seg,
                num_f: self.num_f,
                num_aug: 0,
                ..ClipConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub probe: DepthProbe,
    pub episodes: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    /// `confusion[true_slot][predicted_slot]`.
    pub confusion: Vec<Vec<u64>>,
    /// `(correct, total)` by the query's global class id.
    pub per_class: BTreeMap<u32, (u64, u64)>,
}

pub fn ci95(accuracy: f64, episodes: usize) -> f64 {
    1.96 * (accuracy * (1.0 - accuracy) / episodes as f64).sqrt()
}

impl EvalReport {
    /// The machine-readable summary line.
    pub fn result_line(&self) -> String {
        format!(
            "result mode={} n_way={} k_shot={} episodes={} acc={:.6} ci95={:.6}",
            self.mode, self.n_way, self.k_shot, self.episodes, self.accuracy, self.ci95
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}-way {}-shot, mode {}, {} probe, seed {}",
            self.n_way, self.k_shot, self.mode, self.probe, self.seed
        )?;
        writeln!(
            f,
            "accuracy {:.2}% +/- {:.2}% ({} / {} episodes)",
            100.0 * self.accuracy,
            100.0 * self.ci95,
            self.correct,
            self.episodes
        )?;
        writeln!(f, "slot confusion (rows: true slot, columns: predicted slot)")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
            writeln!(f, "  {}", cells.join(""))?;
        }
        writeln!(f, "per-class accuracy")?;
        for (class, (c, n)) in &self.per_class {
            writeln!(f, "  class {class:>4}: {:.3} ({c}/{n})", *c as f64 / *n as f64)?;
        }
        Ok(())
    }
}

struct Outcome {
    true_slot: usize,
    predicted: usize,
    class: u32,
}

fn run_episode(model: Option<&FusionModel>, dataset: &Dataset, cfg: &EvalConfig, index: usize) -> Result<Outcome> {
    let mut rng = indexed_stream(cfg.seed, Purpose::Episode, index as u64);
    let episode = sampler::sample_episode(dataset.manifest(), &cfg.episode_spec(), &mut rng)?;
    let embeddings = match (cfg.mode.baseline(), model) {
        (Some(b), _) => episode
            .videos()
            .map(|v| {
                let p = &v.pairs[0];
                let (rgb, depth) = model::gather_pair(dataset.record(v.video), &p.rgb, &p.depth)?;
                classifier::baseline_embed(b, &rgb, &depth)
            })
            .collect::<Result<Vec<_>>>()?,
        (None, Some(m)) => {
            let (rgb, depth) = model::pair_batches(dataset, &episode, 0)?;
            m.embed(&rgb, &depth, cfg.feature_norm)?.outputs().to_vec()
        }
        (None, None) => unreachable!("checked by evaluate"),
    };
    let features = model::episode_features(&episode, &embeddings)?;
    let protos = classifier::compute_prototypes(&features)?;
    let probs = classifier::score_query_with(&protos, &features.query, cfg.similarity)?;
    Ok(Outcome {
        true_slot: features.true_slot,
        predicted: classifier::predict(&probs),
        class: episode.slot_classes[features.true_slot],
    })
}

/// Runs `cfg.episodes` test episodes. Episode `i` draws from its own stream
/// derived from `(cfg.seed, i)`, so the report is the same serial or parallel.
pub fn evaluate(model: Option<&FusionModel>, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(kind) = cfg.mode.fusion() {
        match model {
            None => return Err(Error::Config(format!("mode {} needs trained parameters", cfg.mode))),
            Some(m) if m.kind() != kind => {
                return Err(Error::Config(format!(
                    "mode {} cannot use {} parameters",
                    cfg.mode,
                    m.kind()
                )))
            }
            Some(m) if m.width() != dataset.width() => {
                return Err(Error::shape(format!(
                    "parameters have width {}, dataset has {}",
                    m.width(),
                    dataset.width()
                )))
            }
            Some(_) => {}
        }
    }
    let run = |i| run_episode(model, dataset, cfg, i);
    let outcomes: Vec<Outcome> = if cfg.parallel {
        (0..cfg.episodes).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..cfg.episodes).map(run).collect::<Result<_>>()?
    };

    let mut confusion = vec![vec![0u64; cfg.n_way]; cfg.n_way];
    let mut per_class = BTreeMap::new();
    let mut correct = 0;
    for o in &outcomes {
        confusion[o.true_slot][o.predicted] += 1;
        let hit = o.true_slot == o.predicted;
        correct += usize::from(hit);
        let entry = per_class.entry(o.class).or_insert((0, 0));
        entry.0 += u64::from(hit);
        entry.1 += 1;
    }
    let accuracy = correct as f64 / cfg.episodes as f64;
    Ok(EvalReport {
        mode: cfg.mode,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        seed: cfg.seed,
        probe: cfg.probe,
        episodes: cfg.episodes,
        correct,
        accuracy,
        ci95: ci95(accuracy, cfg.episodes),
        confusion,
        per_class,
    })
}

/// Sweep axes. An empty list keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationAxes {
    pub modes: Vec<EvalMode>,
    pub num_aug: Vec<usize>,
    pub k_shot: Vec<usize>,
    /// Test probe. Defaults to the shifted probe when `num_aug` is swept and
    /// to the base evaluation probe otherwise.
    pub probe: Option<DepthProbe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub num_aug: usize,
    pub report: EvalReport,
}

pub const ABLATION_CSV_HEADER: &str = "mode,num_aug,k_shot,episodes,acc,ci95";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{:.6},{:.6}",
            r.mode, self.num_aug, r.k_shot, r.episodes, r.accuracy, r.ci95
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Trains (where the mode has parameters) and evaluates every cell of the
/// mode × num_aug × k_shot grid. All cells share the training seed of
/// `train` and the evaluation seed of `eval`; a trained model is reused by
/// every cell with the same mode and num_aug.
pub fn ablate(dataset: &Dataset, train: &TrainConfig, eval: &EvalConfig, axes: &AblationAxes) -> Result<Vec<AblationRow>> {
    let or_base = |v: &[usize], base: usize| if v.is_empty() { vec![base] } else { v.to_vec() };
    let modes = if axes.modes.is_empty() { vec![eval.mode] } else { axes.modes.clone() };
    let augs = or_base(&axes.num_aug, train.clips.num_aug);
    let shots = or_base(&axes.k_shot, eval.k_shot);
    let probe = axes.probe.unwrap_or(if axes.num_aug.is_empty() {
        eval.probe
    } else {
        DepthProbe::Shifted
    });

    let mut trained: HashMap<(FusionKind, usize), FusionModel> = HashMap::new();
    let mut rows = Vec::with_capacity(modes.len() * augs.len() * shots.len());
    for &mode in &modes {
        for &num_aug in &augs {
            let model = match mode.fusion() {
                Some(kind) => {
                    let model = match trained.entry((kind, num_aug)) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => {
                            let mut cfg = *train;
                            cfg.fusion = kind;
                            cfg.clips.num_aug = num_aug;
                            e.insert(trainer::train(&cfg, dataset, None)?.state.model)
                        }
                    };
                    Some(&*model)
                }
                None => None,
            };
            for &k_shot in &shots {
                let cfg = EvalConfig {
                    mode,
                    k_shot,
                    probe,
                    ..*eval
                };
                rows.push(AblationRow {
                    num_aug,
                    report: evaluate(model, dataset, &cfg)?,
                });
            }
        }
    }
    Ok(rows)
}
