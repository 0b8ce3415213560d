//! Two-stream per-frame feature datasets: the binary container, the class
//! split file, and the synthetic generator.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "AMFU" | version u32 = 1 | L u32 | n_videos u64
//! per video: id_len u16 | id utf-8 | class_id u32 | t u32 | rgb t*L f32 | depth t*L f32
//! ```
//!
//! The class splits live next to the binary in a text file with the same
//! stem and a `.splits` extension:
//!
//! ```text
//! base: 0,1,2
//! val: 3
//! novel: 4,5
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{self, Purpose};

pub const MAGIC: &[u8; 4] = b"AMFU";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 4 + 4 + 4 + 8;

/// One video: identity, label and its RGB and depth feature streams (t×L each).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub class_id: u32,
    pub rgb: Matrix,
    pub depth: Matrix,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, class_id: u32, rgb: Matrix, depth: Matrix) -> Result<Self> {
        let id = id.into();
        if rgb.rows() != depth.rows() || rgb.cols() != depth.cols() {
            return Err(Error::shape(format!(
                "video {id}: rgb is {}x{} but depth is {}x{}",
                rgb.rows(),
                rgb.cols(),
                depth.rows(),
                depth.cols()
            )));
        }
        if rgb.rows() == 0 {
            return Err(Error::shape(format!("video {id} has no frames")));
        }
        Ok(Self {
            id,
            class_id,
            rgb,
            depth,
        })
    }

    pub fn frames(&self) -> usize {
        self.rgb.rows()
    }

    pub fn width(&self) -> usize {
        self.rgb.cols()
    }

    fn encoded_len(&self) -> u64 {
        2 + self.id.len() as u64 + 4 + 4 + payload_bytes(self.frames(), self.width())
    }
}

fn payload_bytes(t: usize, l: usize) -> u64 {
    2 * (t as u64) * (l as u64) * 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "train" => Ok(Split::Base),
            "val" | "validation" => Ok(Split::Val),
            "novel" | "test" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Three pairwise-disjoint sets of class ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub base: Vec<u32>,
    pub val: Vec<u32>,
    pub novel: Vec<u32>,
}

impl Splits {
    pub fn new(base: Vec<u32>, val: Vec<u32>, novel: Vec<u32>) -> Result<Self> {
        let s = Self { base, val, novel };
        s.validate()?;
        Ok(s)
    }

    pub fn classes(&self, split: Split) -> &[u32] {
        match split {
            Split::Base => &self.base,
            Split::Val => &self.val,
            Split::Novel => &self.novel,
        }
    }

    pub fn split_of(&self, class_id: u32) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.classes(s).contains(&class_id))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<u32, Split> = HashMap::new();
        for split in Split::ALL {
            for &c in self.classes(split) {
                if let Some(prev) = seen.insert(c, split) {
                    let msg = if prev == split {
                        format!("splits: class {c} listed twice in `{split}`")
                    } else {
                        format!("splits: class {c} appears in both `{prev}` and `{split}`")
                    };
                    return Err(Error::Format(msg));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let line = |name: &str, ids: &[u32]| {
            let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
            format!("{name}: {}\n", ids.join(","))
        };
        [
            line("base", &self.base),
            line("val", &self.val),
            line("novel", &self.novel),
        ]
        .concat()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != 3 {
            return Err(Error::format(format!(
                "split file: expected 3 lines (base, val, novel), found {}",
                lines.len()
            )));
        }
        let mut sets = Vec::with_capacity(3);
        for (line, expected) in lines.iter().zip(["base", "val", "novel"]) {
            let (name, ids) = line
                .split_once(':')
                .ok_or_else(|| Error::format(format!("split file: missing `:` in line `{line}`")))?;
            if name.trim() != expected {
                return Err(Error::format(format!(
                    "split file: expected `{expected}` line, found `{}`",
                    name.trim()
                )));
            }
            let ids = ids
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<u32>().map_err(|_| {
                        Error::format(format!("split file: bad class id `{s}` in `{expected}`"))
                    })
                })
                .collect::<Result<Vec<u32>>>()?;
            sets.push(ids);
        }
        let novel = sets.pop().unwrap_or_default();
        let val = sets.pop().unwrap_or_default();
        let base = sets.pop().unwrap_or_default();
        Splits::new(base, val, novel)
    }
}

/// Location of one video inside the dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub id: String,
    /// Byte offset of the video's `id_len` field.
    pub offset: u64,
    pub class_id: u32,
    pub t: usize,
}

/// Feature width, class splits and the per-video index.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    l: usize,
    splits: Splits,
    videos: Vec<VideoEntry>,
    by_class: BTreeMap<u32, Vec<usize>>,
    by_id: HashMap<String, usize>,
}

impl DatasetManifest {
    fn build(l: usize, splits: Splits, videos: Vec<VideoEntry>) -> Result<Self> {
        splits.validate()?;
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut by_id = HashMap::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            if splits.split_of(v.class_id).is_none() {
                return Err(Error::format(format!(
                    "splits: class {} of video {} is not in any split",
                    v.class_id, v.id
                )));
            }
            if by_id.insert(v.id.clone(), i).is_some() {
                return Err(Error::format(format!("index: duplicate video id {}", v.id)));
            }
            by_class.entry(v.class_id).or_default().push(i);
        }
        Ok(Self {
            l,
            splits,
            videos,
            by_class,
            by_id,
        })
    }

    pub fn width(&self) -> usize {
        self.l
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Indices of the videos labelled `class_id`, in file order.
    pub fn videos_of_class(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn summary(&self) -> ManifestSummary {
        let count = |split: Split| {
            self.splits
                .classes(split)
                .iter()
                .map(|&c| self.videos_of_class(c).len())
                .sum()
        };
        let bytes = self.videos.last().map_or(HEADER_BYTES, |v| {
            v.offset + 2 + v.id.len() as u64 + 8 + payload_bytes(v.t, self.l)
        });
        ManifestSummary {
            l: self.l,
            n_videos: self.videos.len(),
            classes: [
                self.splits.base.len(),
                self.splits.val.len(),
                self.splits.novel.len(),
            ],
            videos: [count(Split::Base), count(Split::Val), count(Split::Novel)],
            bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestSummary {
    pub l: usize,
    pub n_videos: usize,
    /// Class counts for base, val, novel.
    pub classes: [usize; 3],
    /// Video counts for base, val, novel.
    pub videos: [usize; 3],
    pub bytes: u64,
}

impl fmt::Display for ManifestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "videos={} l={} bytes={} base={}c/{}v val={}c/{}v novel={}c/{}v",
            self.n_videos,
            self.l,
            self.bytes,
            self.classes[0],
            self.videos[0],
            self.classes[1],
            self.videos[1],
            self.classes[2],
            self.videos[2]
        )
    }
}

/// A fully decoded dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn new(records: Vec<VideoRecord>, splits: Splits) -> Result<Self> {
        let l = check_width(&records)?;
        let mut offset = HEADER_BYTES;
        let mut entries = Vec::with_capacity(records.len());
        for r in &records {
            if r.id.len() > u16::MAX as usize {
                return Err(Error::format(format!("index: video id longer than 65535 bytes: {}", r.id)));
            }
            entries.push(VideoEntry {
                id: r.id.clone(),
                offset,
                class_id: r.class_id,
                t: r.frames(),
            });
            offset += r.encoded_len();
        }
        let manifest = DatasetManifest::build(l, splits, entries)?;
        Ok(Self { manifest, records })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &VideoRecord {
        &self.records[index]
    }

    pub fn width(&self) -> usize {
        self.manifest.l
    }

    pub fn write(&self, path: &Path) -> Result<ManifestSummary> {
        write_dataset(&self.records, &self.manifest.splits, path)
    }
}

fn check_width(records: &[VideoRecord]) -> Result<usize> {
    let l = records.first().map_or(0, VideoRecord::width);
    for r in records {
        if r.width() != l {
            return Err(Error::shape(format!(
                "video {} has feature width {}, dataset width is {l}",
                r.id,
                r.width()
            )));
        }
        if r.depth.rows() != r.rgb.rows() || r.depth.cols() != r.rgb.cols() {
            return Err(Error::shape(format!("video {}: rgb and depth shapes differ", r.id)));
        }
    }
    Ok(l)
}

/// The split file that accompanies a dataset file.
pub fn splits_path(path: &Path) -> PathBuf {
    path.with_extension("splits")
}

pub fn write_dataset(records: &[VideoRecord], splits: &Splits, path: &Path) -> Result<ManifestSummary> {
    // Validates widths, split coverage and ids before anything touches disk.
    let dataset = Dataset::new(records.to_vec(), splits.clone())?;
    let l = dataset.width();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(l as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&(r.id.len() as u16).to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&r.class_id.to_le_bytes())?;
        w.write_all(&(r.frames() as u32).to_le_bytes())?;
        for stream in [&r.rgb, &r.depth] {
            for &v in stream.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    fs::write(splits_path(path), splits.to_text())?;
    Ok(dataset.manifest.summary())
}

/// A dataset file loaded into memory whose records are decoded on demand.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    manifest: DatasetManifest,
    bytes: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!(
                "truncated file: {} (need {n} bytes at offset {}, file has {})",
                what(),
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let bytes = fs::read(path)?;
    let splits_text = fs::read_to_string(splits_path(path))?;
    let splits = Splits::parse(&splits_text)?;
    DatasetFile::from_parts(bytes, splits)
}

impl DatasetFile {
    pub fn from_parts(bytes: Vec<u8>, splits: Splits) -> Result<Self> {
        let mut c = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic = c.take(4, || "header magic".into())?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "bad magic: expected \"AMFU\", found {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = c.u32(|| "header version".into())?;
        if version != VERSION {
            return Err(Error::format(format!("bad version: expected {VERSION}, found {version}")));
        }
        let l = c.u32(|| "header L".into())? as usize;
        let n = c.u64(|| "header n_videos".into())?;
        let mut entries = Vec::new();
        for i in 0..n {
            let offset = c.pos as u64;
            let id_len = c.u16(|| format!("id_len of video #{i}"))? as usize;
            let id_bytes = c.take(id_len, || format!("id of video #{i}"))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|_| Error::format(format!("id of video #{i} is not valid UTF-8")))?
                .to_owned();
            let class_id = c.u32(|| format!("class_id of video {id}"))?;
            let t = c.u32(|| format!("t of video {id}"))? as usize;
            if t == 0 {
                return Err(Error::format(format!("t of video {id} is zero")));
            }
            let payload = payload_bytes(t, l);
            let payload = usize::try_from(payload)
                .map_err(|_| Error::format(format!("payload of video {id} too large")))?;
            c.take(payload, || format!("feature payload of video {id}"))?;
            entries.push(VideoEntry {
                id,
                offset,
                class_id,
                t,
            });
        }
        if c.pos != bytes.len() {
            return Err(Error::format(format!(
                "trailing bytes: {} unread bytes after {n} videos",
                bytes.len() - c.pos
            )));
        }
        let manifest = DatasetManifest::build(l, splits, entries)?;
        Ok(Self { manifest, bytes })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Decodes the video at manifest position `index`.
    pub fn record_at(&self, index: usize) -> Result<VideoRecord> {
        let entry = self.manifest.videos.get(index).ok_or(Error::Index {
            index,
            len: self.manifest.videos.len(),
        })?;
        let l = self.manifest.l;
        let start = entry.offset as usize + 2 + entry.id.len() + 8;
        let n = entry.t * l;
        let decode = |from: usize| -> Vec<f64> {
            self.bytes[from..from + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        };
        let rgb = Matrix::from_vec(entry.t, l, decode(start))?;
        let depth = Matrix::from_vec(entry.t, l, decode(start + 4 * n))?;
        VideoRecord::new(entry.id.clone(), entry.class_id, rgb, depth)
    }

    pub fn record(&self, id: &str) -> Result<VideoRecord> {
        let index = self
            .manifest
            .index_of(id)
            .ok_or_else(|| Error::format(format!("no video with id {id}")))?;
        self.record_at(index)
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let records = (0..self.manifest.len())
            .map(|i| self.record_at(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: self.manifest.clone(),
            records,
        })
    }
}

/// Parameters of the synthetic two-stream generator.
///
/// Every class gets an RGB mean and a depth mean drawn as `sep * N(0, I)`.
/// The first `confusable_pairs` pairs of classes (0,1), (2,3), ... share
/// their RGB mean, so only depth tells them apart. The last `n_novel`
/// classes form the novel split, the `n_val` before them the validation
/// split, and the rest the base split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub t: usize,
    pub l: usize,
    pub rgb_sep: f64,
    pub depth_sep: f64,
    pub confusable_pairs: usize,
    pub noise_std: f64,
    pub drift_std: f64,
    pub n_val: usize,
    pub n_novel: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            videos_per_class: 30,
            t: 32,
            l: 64,
            rgb_sep: 1.0,
            depth_sep: 1.0,
            confusable_pairs: 5,
            noise_std: 0.5,
            drift_std: 0.05,
            n_val: 0,
            n_novel: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.videos_per_class == 0 || self.t == 0 || self.l == 0 {
            return bad("classes, videos per class, frames and width must all be >= 1".into());
        }
        if 2 * self.confusable_pairs > self.n_classes {
            return bad(format!(
                "2 * confusable_pairs ({}) exceeds the number of classes ({})",
                2 * self.confusable_pairs,
                self.n_classes
            ));
        }
        for (name, v) in [
            ("rgb_sep", self.rgb_sep),
            ("depth_sep", self.depth_sep),
            ("noise_std", self.noise_std),
            ("drift_std", self.drift_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.n_val + self.n_novel > self.n_classes {
            return bad(format!(
                "val ({}) + novel ({}) classes exceed the number of classes ({})",
                self.n_val, self.n_novel, self.n_classes
            ));
        }
        Ok(())
    }

    pub fn splits(&self) -> Splits {
        let n = self.n_classes as u32;
        let novel_start = n - self.n_novel as u32;
        let val_start = novel_start - self.n_val as u32;
        Splits {
            base: (0..val_start).collect(),
            val: (val_start..novel_start).collect(),
            novel: (novel_start..n).collect(),
        }
    }

    /// Whether `class` shares its RGB mean with its pair partner.
    pub fn is_confusable(&self, class: usize) -> bool {
        class / 2 < self.confusable_pairs
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<VideoRecord>, Splits)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::DataGen);
    let l = spec.l;
    let gauss = |rng: &mut rng::Stream, scale: f64| -> Vec<f64> {
        (0..l)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut rgb_means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut depth_means = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let fresh = gauss(&mut rng, spec.rgb_sep);
        if c % 2 == 1 && spec.is_confusable(c) {
            rgb_means.push(rgb_means[c - 1].clone());
        } else {
            rgb_means.push(fresh);
        }
        depth_means.push(gauss(&mut rng, spec.depth_sep));
    }

    let mut records = Vec::with_capacity(spec.n_classes * spec.videos_per_class);
    for c in 0..spec.n_classes {
        for v in 0..spec.videos_per_class {
            let mut streams = [&rgb_means[c], &depth_means[c]].map(|mean| {
                let mut data = Vec::with_capacity(spec.t * l);
                let mut drift = vec![0.0; l];
                for frame in 0..spec.t {
                    if frame > 0 {
                        for (d, step) in drift.iter_mut().zip(gauss(&mut rng, spec.drift_std)) {
                            *d += step;
                        }
                    }
                    let noise = gauss(&mut rng, spec.noise_std);
                    data.extend((0..l).map(|i| mean[i] + drift[i] + noise[i]));
                }
                data
            });
            let depth = Matrix::from_vec(spec.t, l, std::mem::take(&mut streams[1]))?;
            let rgb = Matrix::from_vec(spec.t, l, std::mem::take(&mut streams[0]))?;
            records.push(VideoRecord::new(format!("c{c:03}_v{v:03}"), c as u32, rgb, depth)?);
        }
    }
    Ok((records, spec.splits()))
}

/// Generates a synthetic dataset directly into memory.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let (records, splits) = generate_synthetic(spec)?;
    Dataset::new(records, splits)
}

/// Class ids present in a record list.
pub fn class_ids(records: &[VideoRecord]) -> BTreeSet<u32> {
    records.iter().map(|r| r.class_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_record(id: &str, class_id: u32, t: usize, l: usize, base: f64) -> VideoRecord {
        let rgb = Matrix::from_vec(t, l, (0..t * l).map(|i| base + i as f64 * 0.5).collect()).unwrap();
        let depth = Matrix::from_vec(t, l, (0..t * l).map(|i| base - i as f64 * 0.25).collect()).unwrap();
        VideoRecord::new(id, class_id, rgb, depth).unwrap()
    }

    #[test]
    fn file_size_follows_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("two.amfu");
        let records = vec![tiny_record("v0", 0, 2, 4, 1.0), tiny_record("v1", 1, 2, 4, -1.0)];
        let splits = Splits::new(vec![0], vec![], vec![1]).unwrap();
        let summary = write_dataset(&records, &splits, &path).unwrap();
        // header 20 + per video (2 + 2 + 4 + 4) index bytes + 2*(2*4*4*2) payload
        let expected = 20 + 2 * (2 + 2 + 4 + 4) + 2 * (2 * 4 * 4 * 2);
        assert_eq!(fs::metadata(&path).unwrap().len(), expected);
        assert_eq!(summary.bytes, expected);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.amfu");
        write_dataset(&[], &Splits::default(), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), HEADER_BYTES);
        let file = read_dataset(&path).unwrap();
        assert!(file.manifest().is_empty());
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.amfu");
        let records = vec![
            tiny_record("alpha", 3, 3, 5, 0.1),
            tiny_record("beta", 3, 1, 5, 2.0),
            tiny_record("gamma", 7, 4, 5, -3.3),
        ];
        let splits = Splits::new(vec![3], vec![], vec![7]).unwrap();
        write_dataset(&records, &splits, &path).unwrap();
        let file = read_dataset(&path).unwrap();
        assert_eq!(file.manifest().splits(), &splits);
        assert_eq!(file.manifest().videos_of_class(3), &[0, 1]);
        let loaded = file.load_all().unwrap();
        for (a, b) in records.iter().zip(loaded.records()) {
            assert_eq!((&a.id, a.class_id, a.frames()), (&b.id, b.class_id, b.frames()));
            for (x, y) in a.rgb.data().iter().zip(b.rgb.data()).chain(a.depth.data().iter().zip(b.depth.data())) {
                assert!((x - y).abs() <= x.abs() * 2f64.powi(-23));
            }
        }
        assert_eq!(file.record("beta").unwrap(), loaded.records()[1]);
    }

    #[test]
    fn rejects_inconsistent_inputs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.amfu");
        let mixed = vec![tiny_record("a", 0, 2, 4, 0.0), tiny_record("b", 0, 2, 3, 0.0)];
        let splits = Splits { base: vec![0], val: vec![], novel: vec![] };
        assert!(matches!(write_dataset(&mixed, &splits, &path), Err(Error::Shape(_))));

        let overlapping = Splits { base: vec![0, 1], val: vec![], novel: vec![1] };
        let ok = vec![tiny_record("a", 0, 2, 4, 0.0)];
        let err = write_dataset(&ok, &overlapping, &path).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");

        let uncovered = Splits { base: vec![5], val: vec![], novel: vec![] };
        assert!(write_dataset(&ok, &uncovered, &path).is_err());
    }

    #[test]
    fn detects_bad_magic_version_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ok.amfu");
        let records = vec![tiny_record("first", 0, 2, 4, 0.0), tiny_record("second", 1, 3, 4, 1.0)];
        let splits = Splits::new(vec![0], vec![], vec![1]).unwrap();
        write_dataset(&records, &splits, &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = DatasetFile::from_parts(bad, splits.clone()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = DatasetFile::from_parts(bad, splits.clone()).unwrap_err();
        assert!(err.to_string().contains("bad version"), "{err}");

        // Cut inside the second video's rgb payload.
        let second = 20 + (2 + 5 + 8 + 2 * 2 * 4 * 4);
        let cut = second + 2 + 6 + 8 + 10;
        let err = DatasetFile::from_parts(bytes[..cut].to_vec(), splits.clone()).unwrap_err();
        assert!(err.to_string().contains("video second"), "{err}");

        let overlapping = Splits { base: vec![0, 1], val: vec![], novel: vec![1] };
        assert!(DatasetFile::from_parts(bytes, overlapping).is_err());
    }

    #[test]
    fn split_file_format() {
        let s = Splits::new(vec![0, 1, 2], vec![3], vec![4, 5]).unwrap();
        assert_eq!(s.to_text(), "base: 0,1,2\nval: 3\nnovel: 4,5\n");
        assert_eq!(Splits::parse("base:0,1,2\nval:3\nnovel:4,5").unwrap(), s);
        assert_eq!(Splits::parse("base: 0\nval:\nnovel: 1\n").unwrap().val, Vec::<u32>::new());
        assert!(Splits::parse("val: 3\nbase: 0\nnovel: 1\n").is_err());
        assert!(Splits::parse("base: 0,1\nval: 1\nnovel: 2\n").is_err());
    }

    #[test]
    fn noiseless_frames_equal_class_means() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            drift_std: 0.0,
            videos_per_class: 3,
            t: 5,
            l: 6,
            ..SyntheticSpec::default()
        };
        let (records, _) = generate_synthetic(&spec).unwrap();
        for group in records.chunks(3) {
            let first = group[0].rgb.row(0).to_vec();
            let first_depth = group[0].depth.row(0).to_vec();
            for r in group {
                for f in 0..r.frames() {
                    assert_eq!(r.rgb.row(f), first.as_slice());
                    assert_eq!(r.depth.row(f), first_depth.as_slice());
                }
            }
        }
        // Confusable partners share RGB but not depth.
        assert_eq!(records[0].rgb, records[3].rgb);
        assert_ne!(records[0].depth, records[3].depth);
    }

    #[test]
    fn generation_is_deterministic_and_split_disjoint() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSpec {
            videos_per_class: 4,
            seed: 7,
            n_val: 2,
            n_novel: 3,
            ..SyntheticSpec::default()
        };
        let (a, sa) = generate_synthetic(&spec).unwrap();
        let (b, sb) = generate_synthetic(&spec).unwrap();
        write_dataset(&a, &sa, &dir.path().join("a.amfu")).unwrap();
        write_dataset(&b, &sb, &dir.path().join("b.amfu")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("a.amfu")).unwrap(),
            fs::read(dir.path().join("b.amfu")).unwrap()
        );
        assert!(sa.validate().is_ok());
        assert_eq!((sa.base.len(), sa.val.len(), sa.novel.len()), (5, 2, 3));
    }

    #[test]
    fn rejects_invalid_spec() {
        let spec = SyntheticSpec {
            confusable_pairs: 6,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            noise_std: -1.0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    fn clip_mean(m: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v / m.rows() as f64;
            }
        }
        out
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    }

    /// Nearest-class-mean accuracy with means estimated on even-indexed videos
    /// and tested on odd-indexed ones.
    fn nearest_mean_accuracy(records: &[VideoRecord], per_class: usize, embed: impl Fn(&VideoRecord) -> Vec<f64>) -> f64 {
        let classes: Vec<&[VideoRecord]> = records.chunks(per_class).collect();
        let means: Vec<Vec<f64>> = classes
            .iter()
            .map(|vids| {
                let train: Vec<Vec<f64>> = vids.iter().step_by(2).map(&embed).collect();
                let mut m = vec![0.0; train[0].len()];
                for e in &train {
                    for (o, v) in m.iter_mut().zip(e) {
                        *o += v / train.len() as f64;
                    }
                }
                m
            })
            .collect();
        let (mut correct, mut total) = (0, 0);
        for (c, vids) in classes.iter().enumerate() {
            for v in vids.iter().skip(1).step_by(2) {
                let e = embed(v);
                let best = (0..means.len())
                    .min_by(|&a, &b| sq_dist(&e, &means[a]).total_cmp(&sq_dist(&e, &means[b])))
                    .unwrap();
                correct += usize::from(best == c);
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn depth_carries_the_discriminative_signal() {
        let spec = SyntheticSpec {
            n_classes: 10,
            confusable_pairs: 5,
            rgb_sep: 1.0,
            depth_sep: 1.0,
            noise_std: 0.5,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let (records, _) = generate_synthetic(&spec).unwrap();
        let rgb_acc = nearest_mean_accuracy(&records, spec.videos_per_class, |r| clip_mean(&r.rgb));
        let both_acc = nearest_mean_accuracy(&records, spec.videos_per_class, |r| {
            let mut e = clip_mean(&r.rgb);
            e.extend(clip_mean(&r.depth));
            e
        });
        assert!((0.35..=0.65).contains(&rgb_acc), "rgb-only accuracy {rgb_acc}");
        assert!(both_acc > 0.95, "rgb+depth accuracy {both_acc}");
    }
}
