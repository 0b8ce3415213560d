//! Segment-based clip sampling, temporal asynchronization of the depth stream,
//! and N-way K-shot episode sampling.
//!
//! A video of `t` frames is cut into `num_seg` contiguous segments and
//! `num_f` consecutive frames are taken from each, giving clips of
//! `num_seg * num_f` frames. Segments shorter than `num_f` repeat their last
//! frame, so clip length never varies.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::featurestore::{DatasetManifest, Split};
use crate::rng::Stream;

/// Balanced partition of `0..t` into `num_seg` contiguous segments, longer
/// segments first. Returns `(start, length)` pairs; lengths may be zero when
/// `t < num_seg`.
pub fn segment_bounds(t: usize, num_seg: usize) -> Vec<(usize, usize)> {
    let num_seg = num_seg.max(1);
    let (base, extra) = (t / num_seg, t % num_seg);
    let mut start = 0;
    (0..num_seg)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    Random,
    Center,
}

/// Per-segment start offsets and the frame indices they resolve to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClipPlan {
    pub num_seg: usize,
    pub num_f: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl ClipPlan {
    /// Resolves offsets into frame indices for a video of `t` frames.
    pub fn from_offsets(t: usize, num_f: usize, offsets: Vec<usize>) -> Result<Self> {
        if t == 0 || num_f == 0 || offsets.is_empty() {
            return Err(Error::Sampling(format!(
                "clip plan needs t >= 1, num_f >= 1 and at least one segment (t={t}, num_f={num_f}, segments={})",
                offsets.len()
            )));
        }
        let bounds = segment_bounds(t, offsets.len());
        let mut indices = Vec::with_capacity(offsets.len() * num_f);
        for (&(start, len), &off) in bounds.iter().zip(&offsets) {
            if off > len.saturating_sub(num_f) {
                return Err(Error::Sampling(format!(
                    "offset {off} exceeds the segment slack {} (segment length {len}, num_f {num_f})",
                    len.saturating_sub(num_f)
                )));
            }
            // Empty segments only occur at the tail, so they fall back to the
            // frame just before them.
            let last = if len > 0 { start + len - 1 } else { start.saturating_sub(1) }.min(t - 1);
            indices.extend((0..num_f).map(|k| (start + off + k).min(last)));
        }
        Ok(Self {
            num_seg: offsets.len(),
            num_f,
            offsets,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn sample_clip(t: usize, num_seg: usize, num_f: usize, mode: ClipMode, rng: &mut Stream) -> Result<ClipPlan> {
    if num_seg == 0 {
        return Err(Error::Sampling("num_seg must be >= 1".into()));
    }
    let offsets = segment_bounds(t, num_seg)
        .into_iter()
        .map(|(_, len)| {
            let slack = len.saturating_sub(num_f);
            match mode {
                ClipMode::Random => rng.random_range(0..=slack),
                ClipMode::Center => slack / 2,
            }
        })
        .collect();
    ClipPlan::from_offsets(t, num_f, offsets)
}

/// An RGB clip and the depth clip fed alongside it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairedClips {
    pub rgb: ClipPlan,
    pub depth: ClipPlan,
    /// True for the strictly aligned pair.
    pub matched: bool,
}

impl PairedClips {
    pub fn matched(plan: ClipPlan) -> Self {
        Self {
            depth: plan.clone(),
            rgb: plan,
            matched: true,
        }
    }
}

/// Which stream the augmented pairs re-draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentMode {
    /// Keep the RGB clip, shift only the depth clip.
    #[default]
    DepthOnly,
    /// Redraw both clips independently.
    Both,
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" | "depth_only" => Ok(AugmentMode::DepthOnly),
            "both" => Ok(AugmentMode::Both),
            other => Err(Error::Config(format!("unknown augmentation mode `{other}`"))),
        }
    }
}

/// Clip sampling parameters shared by every video of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipConfig {
    pub num_seg: usize,
    pub num_f: usize,
    pub num_aug: usize,
    pub augment: AugmentMode,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            num_seg: 4,
            num_f: 4,
            num_aug: 2,
            augment: AugmentMode::DepthOnly,
        }
    }
}

impl ClipConfig {
    pub fn clip_len(&self) -> usize {
        self.num_seg * self.num_f
    }
}

/// One matched pair followed by `num_aug` temporally asynchronized pairs.
pub fn sample_pairs(t: usize, clips: &ClipConfig, rng: &mut Stream) -> Result<Vec<PairedClips>> {
    let rgb = sample_clip(t, clips.num_seg, clips.num_f, ClipMode::Random, rng)?;
    let mut pairs = Vec::with_capacity(1 + clips.num_aug);
    pairs.push(PairedClips::matched(rgb.clone()));
    for _ in 0..clips.num_aug {
        let rgb_plan = match clips.augment {
            AugmentMode::DepthOnly => rgb.clone(),
            AugmentMode::Both => sample_clip(t, clips.num_seg, clips.num_f, ClipMode::Random, rng)?,
        };
        let depth = sample_clip(t, clips.num_seg, clips.num_f, ClipMode::Random, rng)?;
        pairs.push(PairedClips {
            rgb: rgb_plan,
            depth,
            matched: false,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Random clips with `num_aug` asynchronized extra pairs.
    Train,
    /// One aligned pair taken from the middle of every segment.
    Test,
    /// Centered RGB clip with a randomly placed depth clip. Used to probe
    /// robustness to misaligned depth; not part of the standard protocol.
    ShiftedTest,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            "shifted" | "shifted_test" => Ok(Phase::ShiftedTest),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
            Phase::ShiftedTest => "shifted_test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeVideo {
    /// Position of the video in the dataset manifest.
    pub video: usize,
    /// Episode-local class slot in `0..n_way`.
    pub slot: usize,
    pub pairs: Vec<PairedClips>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Global class id behind every slot.
    pub slot_classes: Vec<u32>,
    /// `n_way * k_shot` videos, grouped by slot.
    pub support: Vec<EpisodeVideo>,
    pub query: EpisodeVideo,
}

impl Episode {
    pub fn pairs_per_video(&self) -> usize {
        self.query.pairs.len()
    }

    /// Support videos followed by the query.
    pub fn videos(&self) -> impl Iterator<Item = &EpisodeVideo> {
        self.support.iter().chain(std::iter::once(&self.query))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub split: Split,
    pub n_way: usize,
    pub k_shot: usize,
    pub phase: Phase,
    pub clips: ClipConfig,
}

pub fn sample_episode(manifest: &DatasetManifest, spec: &EpisodeSpec, rng: &mut Stream) -> Result<Episode> {
    let EpisodeSpec {
        split,
        n_way,
        k_shot,
        phase,
        clips,
    } = *spec;
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Sampling(format!(
            "n_way and k_shot must be >= 1 (got {n_way}-way {k_shot}-shot)"
        )));
    }
    let classes = manifest.splits().classes(split);
    if classes.len() < n_way {
        return Err(Error::Sampling(format!(
            "split `{split}` has {} classes, {n_way}-way episodes need {n_way}",
            classes.len()
        )));
    }

    // The order of the sampled classes is the slot permutation.
    let slot_classes: Vec<u32> = classes.choose_multiple(rng, n_way).copied().collect();
    for &c in &slot_classes {
        let have = manifest.videos_of_class(c).len();
        if have < k_shot + 1 {
            return Err(Error::Sampling(format!(
                "class {c} has {have} videos, {k_shot}-shot episodes need {}",
                k_shot + 1
            )));
        }
    }
    let query_slot = rng.random_range(0..n_way);

    let attach = |video: usize, slot: usize, rng: &mut Stream| -> Result<EpisodeVideo> {
        let t = manifest.videos()[video].t;
        let pairs = match phase {
            Phase::Train => sample_pairs(t, &clips, rng)?,
            Phase::Test => vec![PairedClips::matched(sample_clip(
                t,
                clips.num_seg,
                clips.num_f,
                ClipMode::Center,
                rng,
            )?)],
            Phase::ShiftedTest => vec![PairedClips {
                rgb: sample_clip(t, clips.num_seg, clips.num_f, ClipMode::Center, rng)?,
                depth: sample_clip(t, clips.num_seg, clips.num_f, ClipMode::Random, rng)?,
                matched: false,
            }],
        };
        Ok(EpisodeVideo { video, slot, pairs })
    };

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = None;
    for (slot, &c) in slot_classes.iter().enumerate() {
        let take = k_shot + usize::from(slot == query_slot);
        let chosen: Vec<usize> = manifest
            .videos_of_class(c)
            .choose_multiple(rng, take)
            .copied()
            .collect();
        for &v in &chosen[..k_shot] {
            support.push(attach(v, slot, rng)?);
        }
        if slot == query_slot {
            query = Some(attach(chosen[k_shot], slot, rng)?);
        }
    }
    let query = query.expect("query slot is always visited");
    Ok(Episode {
        n_way,
        k_shot,
        slot_classes,
        support,
        query,
    })
}
