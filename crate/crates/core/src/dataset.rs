//! Synthetic label-shift datasets and their on-disk container.
//!
//! Each class owns a fixed prototype (a few colored square patches at
//! seeded positions, optionally mirrored across the frame). A sample's image is the clipped sum of its classes'
//! prototypes plus Gaussian background noise. Regions differ only in how
//! often each class appears, so the shift between source and target is
//! purely a shift of the label distribution.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::rng::Rng;
use crate::tensor::{images_to_matrix, ImageTensor, Matrix};

pub const SOURCE_REGION: u16 = 0;
pub const TARGET_REGION: u16 = 1;
pub const HIDDEN_REGION: u16 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(num_classes: usize) -> Self {
        ClassVocabulary {
            names: (0..num_classes).map(|i| format!("class_{i:03}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Per-region label distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProfile {
    pub region_id: u16,
    /// Independent inclusion probability of each class.
    pub label_prior: Vec<f64>,
    /// `(a, b, k)`: when class `a` is drawn, the prior of class `b > a`
    /// is multiplied by `k` (clamped to 1) for that sample.
    pub co_occurrence_boost: Vec<(usize, usize, f64)>,
}

impl RegionProfile {
    pub fn new(region_id: u16, label_prior: Vec<f64>) -> Self {
        RegionProfile {
            region_id,
            label_prior,
            co_occurrence_boost: Vec::new(),
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.label_prior.len() != num_classes {
            return Err(Error::Config(format!(
                "region {} has {} priors for {num_classes} classes",
                self.region_id,
                self.label_prior.len()
            )));
        }
        if self.label_prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("region {} has a prior outside [0, 1]", self.region_id)));
        }
        if !self.label_prior.iter().any(|&p| p > 0.0) {
            return Err(Error::Config(format!("region {} has no class with positive prior", self.region_id)));
        }
        for &(a, b, k) in &self.co_occurrence_boost {
            if a >= b || b >= num_classes || !(k >= 0.0) {
                return Err(Error::Config(format!("invalid co-occurrence boost ({a}, {b}, {k})")));
            }
        }
        Ok(())
    }

    fn draw_labels(&self, rng: &mut Rng) -> LabelSet {
        let mut prior = self.label_prior.clone();
        let mut labels = Vec::new();
        for c in 0..prior.len() {
            if rng.bernoulli(prior[c]) {
                labels.push(c);
                for &(a, b, k) in &self.co_occurrence_boost {
                    if a == c {
                        prior[b] = (prior[b] * k).min(1.0);
                    }
                }
            }
        }
        LabelSet::new(labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: ImageTensor,
    pub labels: LabelSet,
    pub region_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitKind {
    SourceTrain,
    SourceVal,
    TargetTuning,
    TargetEval,
    TargetHidden,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::SourceTrain,
        SplitKind::SourceVal,
        SplitKind::TargetTuning,
        SplitKind::TargetEval,
        SplitKind::TargetHidden,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "source_train",
            SplitKind::SourceVal => "source_val",
            SplitKind::TargetTuning => "target_tuning",
            SplitKind::TargetEval => "target_eval",
            SplitKind::TargetHidden => "target_hidden",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "strain",
            SplitKind::SourceVal => "sval",
            SplitKind::TargetTuning => "ttune",
            SplitKind::TargetEval => "teval",
            SplitKind::TargetHidden => "thidden",
        }
    }

    pub fn from_name(name: &str) -> Option<SplitKind> {
        SplitKind::ALL.into_iter().find(|k| k.name() == name)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocabulary: ClassVocabulary,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    splits: [Vec<Sample>; 5],
}

impl DatasetBundle {
    /// Assembles a bundle, checking shapes, label ranges and id uniqueness.
    pub fn new(
        vocabulary: ClassVocabulary,
        (height, width, channels): (usize, usize, usize),
        splits: [Vec<Sample>; 5],
    ) -> Result<Self> {
        let bundle = DatasetBundle {
            vocabulary,
            height,
            width,
            channels,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn split(&self, kind: SplitKind) -> &[Sample] {
        &self.splits[kind.slot()]
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for kind in SplitKind::ALL {
            for s in self.split(kind) {
                if s.image.shape() != (self.height, self.width, self.channels) {
                    return Err(Error::Format(format!("sample {} has image shape {:?}", s.sample_id, s.image.shape())));
                }
                if s.labels.max_class().is_some_and(|c| c >= self.num_classes()) {
                    return Err(Error::Format(format!("sample {} has a label outside the vocabulary", s.sample_id)));
                }
                if !ids.insert(s.sample_id.as_str()) {
                    return Err(Error::Format(format!("duplicate sample id {}", s.sample_id)));
                }
            }
        }
        Ok(())
    }
}

/// Flattened images of `samples`, one per row.
pub fn samples_to_matrix(samples: &[Sample]) -> Result<Matrix> {
    images_to_matrix(samples.iter().map(|s| &s.image))
}

pub fn truths(samples: &[Sample]) -> Vec<LabelSet> {
    samples.iter().map(|s| s.labels.clone()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Sizes in [`SplitKind::ALL`] order.
    pub split_sizes: [usize; 5],
    pub source_prior: Vec<f64>,
    pub target_prior: Vec<f64>,
    /// Weight of the source prior in the hidden region's prior; the rest is target.
    pub hidden_mix: f64,
    pub patches_per_class: usize,
    pub patch_size: usize,
    pub prototype_amplitude: f64,
    /// Mirror every patch through the flips (and, on square images, the
    /// transposes) of the frame so class evidence survives those augmentations.
    pub symmetric_prototypes: bool,
    /// Per-sample multiplicative jitter on each prototype's amplitude.
    pub prototype_sigma: f64,
    pub background_sigma: f64,
    /// Minimum total-variation distance between normalized source and target priors.
    pub min_shift: f64,
    pub allow_empty_labels: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let num_classes = 20;
        let (source_prior, target_prior) = default_priors(num_classes);
        GeneratorConfig {
            height: 16,
            width: 16,
            channels: 3,
            num_classes,
            split_sizes: [5000, 1000, 1000, 1000, 1000],
            source_prior,
            target_prior,
            hidden_mix: 0.2,
            patches_per_class: 2,
            patch_size: 3,
            prototype_amplitude: 0.35,
            symmetric_prototypes: true,
            prototype_sigma: 0.15,
            background_sigma: 0.35,
            min_shift: 0.3,
            allow_empty_labels: false,
            seed: 0,
        }
    }
}

/// Class `c` is shared when `c % 3 == 0`, source-heavy when `c % 3 == 1`
/// and target-heavy when `c % 3 == 2`.
pub fn default_priors(num_classes: usize) -> (Vec<f64>, Vec<f64>) {
    (0..num_classes)
        .map(|c| match c % 3 {
            0 => (0.15, 0.15),
            1 => (0.35, 0.03),
            _ => (0.03, 0.35),
        })
        .unzip()
}

/// Total-variation distance between two nonnegative vectors after each is
/// normalized to sum to one.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if sa == 0.0 || sb == 0.0 {
        return if sa == sb { 0.0 } else { 1.0 };
    }
    0.5 * a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum::<f64>()
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "image shape {}x{}x{} (channels must be 1 or 3)",
                self.height, self.width, self.channels
            )));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Config("image dimensions exceed 65535".into()));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("num_classes = {}", self.num_classes)));
        }
        if self.split_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        if !(0.0..=1.0).contains(&self.min_shift) || !(0.0..=1.0).contains(&self.hidden_mix) {
            return Err(Error::Config("min_shift and hidden_mix must lie in [0, 1]".into()));
        }
        if self.patch_size == 0 || self.patch_size > self.height.min(self.width) {
            return Err(Error::Config(format!("patch size {} does not fit the image", self.patch_size)));
        }
        if !(self.prototype_sigma >= 0.0 && self.background_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be nonnegative".into()));
        }
        for profile in self.profiles() {
            profile.validate(self.num_classes)?;
        }
        let tv = total_variation(&self.source_prior, &self.target_prior);
        if tv < self.min_shift {
            return Err(Error::Config(format!(
                "source/target priors are {tv:.4} apart in total variation, below the required {}",
                self.min_shift
            )));
        }
        Ok(())
    }

    /// Source, target and hidden region profiles.
    pub fn profiles(&self) -> [RegionProfile; 3] {
        let hidden = self
            .target_prior
            .iter()
            .zip(&self.source_prior)
            .map(|(t, s)| (1.0 - self.hidden_mix) * t + self.hidden_mix * s)
            .collect();
        [
            RegionProfile::new(SOURCE_REGION, self.source_prior.clone()),
            RegionProfile::new(TARGET_REGION, self.target_prior.clone()),
            RegionProfile::new(HIDDEN_REGION, hidden),
        ]
    }
}

/// A class's appearance: a set of pixels sharing one color.
#[derive(Debug, Clone)]
struct Prototype {
    /// Sorted `y * width + x` offsets.
    pixels: Vec<usize>,
    color: Vec<f64>,
}

fn mirror_images(y: usize, x: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (fy, fx) = (h - 1 - y, w - 1 - x);
    let mut out = vec![(y, x), (fy, x), (y, fx), (fy, fx)];
    if h == w {
        out.extend([(x, y), (fx, y), (x, fy), (fx, fy)]);
    }
    out
}

fn make_prototypes(cfg: &GeneratorConfig, rng: &mut Rng) -> Vec<Prototype> {
    let (h, w, size) = (cfg.height, cfg.width, cfg.patch_size);
    (0..cfg.num_classes)
        .map(|_| {
            let mut pixels = Vec::new();
            for _ in 0..cfg.patches_per_class {
                let py = rng.index_below(h - size + 1);
                let px = rng.index_below(w - size + 1);
                for y in py..py + size {
                    for x in px..px + size {
                        if cfg.symmetric_prototypes {
                            pixels.extend(mirror_images(y, x, h, w).into_iter().map(|(y, x)| y * w + x));
                        } else {
                            pixels.push(y * w + x);
                        }
                    }
                }
            }
            pixels.sort_unstable();
            pixels.dedup();
            let color = (0..cfg.channels)
                .map(|_| cfg.prototype_amplitude * rng.uniform(0.4, 1.0))
                .collect();
            Prototype { pixels, color }
        })
        .collect()
}

fn render(cfg: &GeneratorConfig, protos: &[Prototype], labels: &LabelSet, rng: &mut Rng) -> ImageTensor {
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let mut acc = vec![0.0f64; h * w * ch];
    for &c in labels.as_slice() {
        let p = &protos[c];
        let gain = if cfg.prototype_sigma > 0.0 {
            (1.0 + rng.normal(0.0, cfg.prototype_sigma)).max(0.0)
        } else {
            1.0
        };
        for &i in &p.pixels {
            for (k, col) in p.color.iter().enumerate() {
                acc[i * ch + k] += gain * col;
            }
        }
    }
    if cfg.background_sigma > 0.0 {
        for v in &mut acc {
            *v += rng.normal(0.0, cfg.background_sigma);
        }
    }
    let data = acc.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    ImageTensor::from_vec(h, w, ch, data).expect("rendered image has the configured shape")
}

pub fn generate(cfg: &GeneratorConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut root = Rng::new(cfg.seed);
    let protos = make_prototypes(cfg, &mut root.split(0));
    let [source, target, hidden] = cfg.profiles();
    let mut splits: [Vec<Sample>; 5] = Default::default();
    for (slot, kind) in SplitKind::ALL.into_iter().enumerate() {
        let profile = match kind {
            SplitKind::SourceTrain | SplitKind::SourceVal => &source,
            SplitKind::TargetTuning | SplitKind::TargetEval => &target,
            SplitKind::TargetHidden => &hidden,
        };
        let mut rng = root.split(slot as u64 + 1);
        splits[slot] = (0..cfg.split_sizes[slot])
            .map(|i| {
                let labels = loop {
                    let labels = profile.draw_labels(&mut rng);
                    if cfg.allow_empty_labels || !labels.is_empty() {
                        break labels;
                    }
                };
                let image = render(cfg, &protos, &labels, &mut rng);
                Sample {
                    sample_id: format!("{}-{i:06}", kind.id_prefix()),
                    image,
                    labels,
                    region_id: profile.region_id,
                }
            })
            .collect();
    }
    DatasetBundle::new(
        ClassVocabulary::new(cfg.num_classes),
        (cfg.height, cfg.width, cfg.channels),
        splits,
    )
}

/// Fraction of samples carrying each class.
pub fn label_histogram(samples: &[Sample], num_classes: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("label histogram of an empty split".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        for &c in s.labels.as_slice() {
            if c >= num_classes {
                return Err(Error::Format(format!("label {c} outside {num_classes} classes")));
            }
            counts[c] += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

// Container layout (little-endian):
//   "GSD1" | version u16 | num_classes u32 | H u16 | W u16 | C u8 | split count u8
//   per split:  name len u8 | name | sample count u32
//     per sample: id len u8 | id | region u16 | label count u16 | labels u16... | pixels f32...
//   CRC32 of everything above.
pub const BUNDLE_MAGIC: [u8; 4] = *b"GSD1";
pub const BUNDLE_VERSION: u16 = 1;

pub fn encode_bundle(bundle: &DatasetBundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.height as u16).to_le_bytes());
    out.extend_from_slice(&(bundle.width as u16).to_le_bytes());
    out.push(bundle.channels as u8);
    out.push(SplitKind::ALL.len() as u8);
    for kind in SplitKind::ALL {
        let samples = bundle.split(kind);
        put_short_str(&mut out, kind.name())?;
        out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
        for s in samples {
            put_short_str(&mut out, &s.sample_id)?;
            out.extend_from_slice(&s.region_id.to_le_bytes());
            if s.labels.len() > u16::MAX as usize {
                return Err(Error::Format(format!("sample {} has too many labels", s.sample_id)));
            }
            out.extend_from_slice(&(s.labels.len() as u16).to_le_bytes());
            for &c in s.labels.as_slice() {
                out.extend_from_slice(&(c as u16).to_le_bytes());
            }
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn put_short_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u8::try_from(s.len()).map_err(|_| Error::Format(format!("string too long for container: {s}")))?;
    out.push(len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Bounds-checked little-endian reader.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn short_str(&mut self) -> Result<String> {
        let len = self.u8()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    /// Checks the magic, then that the bytes after the payload are exactly
    /// the CRC32 of the bytes before them.
    pub(crate) fn expect_magic(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.buf[..self.buf.len().min(4)].to_vec();
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn finish_with_crc(mut self) -> Result<()> {
        let payload_end = self.pos;
        let stored = self.u32()?;
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checksum", self.remaining())));
        }
        let computed = crc32fast::hash(&self.buf[..payload_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<DatasetBundle> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(BUNDLE_MAGIC)?;
    let version = r.u16()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            expected: BUNDLE_VERSION,
            found: version,
        });
    }
    let num_classes = r.u32()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u8()? as usize;
    let split_count = r.u8()? as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    let pixels = height * width * channels;
    let mut splits: [Option<Vec<Sample>>; 5] = Default::default();
    for _ in 0..split_count {
        let name = r.short_str()?;
        let kind = SplitKind::from_name(&name).ok_or_else(|| Error::Format(format!("unknown split {name:?}")))?;
        if splits[kind.slot()].is_some() {
            return Err(Error::Format(format!("split {name} appears twice")));
        }
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count.min(r.remaining()));
        for _ in 0..count {
            let sample_id = r.short_str()?;
            let region_id = r.u16()?;
            let label_count = r.u16()? as usize;
            let mut labels = Vec::with_capacity(label_count);
            for _ in 0..label_count {
                labels.push(r.u16()? as usize);
            }
            let raw = r.take(pixels * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            samples.push(Sample {
                sample_id,
                image: ImageTensor::from_vec(height, width, channels, data)?,
                labels: LabelSet::new(labels),
                region_id,
            });
        }
        splits[kind.slot()] = Some(samples);
    }
    r.finish_with_crc()?;
    let mut full: [Vec<Sample>; 5] = Default::default();
    for (slot, split) in splits.into_iter().enumerate() {
        full[slot] = split.ok_or_else(|| Error::Format(format!("missing split {}", SplitKind::ALL[slot].name())))?;
    }
    DatasetBundle::new(ClassVocabulary::new(num_classes), (height, width, channels), full)
}

pub fn write_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<DatasetBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

/// `sample_id,region_id,labels` for every sample, splits in canonical order.
pub fn labels_csv(bundle: &DatasetBundle) -> String {
    let mut out = String::from("sample_id,region_id,labels\n");
    for kind in SplitKind::ALL {
        for s in bundle.split(kind) {
            let _ = writeln!(out, "{},{},{}", s.sample_id, s.region_id, s.labels);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            height: 6,
            width: 6,
            split_sizes: [40, 10, 10, 10, 10],
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn degenerate_generator_reproduces_prototype() {
        let mut prior = vec![0.0; 3];
        prior[0] = 1.0;
        let cfg = GeneratorConfig {
            height: 8,
            width: 8,
            num_classes: 3,
            split_sizes: [5, 5, 5, 5, 5],
            source_prior: prior.clone(),
            target_prior: prior,
            background_sigma: 0.0,
            prototype_sigma: 0.0,
            min_shift: 0.0,
            ..GeneratorConfig::default()
        };
        let bundle = generate(&cfg).unwrap();
        let first = bundle.split(SplitKind::SourceTrain)[0].image.clone();
        assert!(first.data().iter().any(|&v| v > 0.0));
        for kind in SplitKind::ALL {
            for s in bundle.split(kind) {
                assert_eq!(s.labels, LabelSet::new(vec![0]));
                assert_eq!(s.image, first);
            }
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = tiny_config();
        let a = encode_bundle(&generate(&cfg).unwrap()).unwrap();
        let b = encode_bundle(&generate(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = encode_bundle(&generate(&GeneratorConfig { seed: 1, ..cfg }).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn infeasible_shift_is_a_config_error() {
        let cfg = GeneratorConfig {
            min_shift: 0.99,
            ..tiny_config()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let same = GeneratorConfig {
            target_prior: tiny_config().source_prior,
            min_shift: 0.01,
            ..tiny_config()
        };
        assert!(matches!(generate(&same), Err(Error::Config(_))));
    }

    #[test]
    fn regions_and_nonempty_labels() {
        let bundle = generate(&tiny_config()).unwrap();
        for kind in SplitKind::ALL {
            let expected = match kind {
                SplitKind::SourceTrain | SplitKind::SourceVal => SOURCE_REGION,
                SplitKind::TargetTuning | SplitKind::TargetEval => TARGET_REGION,
                SplitKind::TargetHidden => HIDDEN_REGION,
            };
            for s in bundle.split(kind) {
                assert_eq!(s.region_id, expected);
                assert!(!s.labels.is_empty());
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn histogram_basics() {
        let img = ImageTensor::zeros(1, 1, 1);
        let s = Sample {
            sample_id: "a".into(),
            image: img,
            labels: LabelSet::new(vec![0]),
            region_id: 0,
        };
        assert_eq!(label_histogram(std::slice::from_ref(&s), 2).unwrap(), vec![1.0, 0.0]);
        let twice = vec![s.clone(), s.clone()];
        assert_eq!(label_histogram(&twice, 2).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(label_histogram(&[], 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn histogram_matches_naive_count() {
        let mut rng = Rng::new(8);
        let samples: Vec<Sample> = (0..100)
            .map(|i| Sample {
                sample_id: i.to_string(),
                image: ImageTensor::zeros(1, 1, 1),
                labels: (0..5).filter(|_| rng.bernoulli(0.4)).collect(),
                region_id: 0,
            })
            .collect();
        let hist = label_histogram(&samples, 5).unwrap();
        for (c, &h) in hist.iter().enumerate() {
            let mut count = 0;
            for s in &samples {
                if s.labels.as_slice().contains(&c) {
                    count += 1;
                }
            }
            assert_eq!(h, count as f64 / 100.0);
        }
    }

    #[test]
    fn container_errors_are_distinct() {
        let bundle = generate(&tiny_config()).unwrap();
        let bytes = encode_bundle(&bundle).unwrap();
        assert_eq!(decode_bundle(&bytes).unwrap(), bundle);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_bundle(&bad_magic), Err(Error::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_bundle(&bad_version), Err(Error::Version { found: 9, .. })));

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(decode_bundle(truncated), Err(Error::Truncated { .. })));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_bundle(&flipped), Err(Error::Checksum { .. })));
    }

    #[test]
    fn labels_export() {
        let bundle = generate(&tiny_config()).unwrap();
        let csv = labels_csv(&bundle);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("sample_id,region_id,labels"));
        assert_eq!(csv.lines().count(), 1 + 80);
        let first = &bundle.split(SplitKind::SourceTrain)[0];
        assert_eq!(lines.next().unwrap(), format!("{},0,{}", first.sample_id, first.labels));
    }
}
