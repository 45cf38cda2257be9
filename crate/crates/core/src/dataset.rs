//! Gesture sequences, class attribute tables, the on-disk format, input
//! normalization, and a deterministic synthetic generator.
//!
//! A dataset directory holds `manifest.json` plus `train.csv` and `test.csv`.
//! Each CSV row is one frame: `split,class,sample_id,frame,f0,…,f{d-1}`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Smallest variance used when standardizing a feature.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        }
    }
}

/// One recorded gesture: `steps × width` frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureSequence {
    pub sample_id: usize,
    /// Index into [`AttributeTable::classes`].
    pub class: usize,
    pub split: Split,
    pub steps: usize,
    pub width: usize,
    pub frames: Vec<f64>,
}

impl GestureSequence {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.width..(t + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub seen: bool,
    pub attributes: Vec<u8>,
}

/// Binary attribute rows for every class. Seen classes come first, so a seen
/// class id doubles as its prototype-bank index.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTable {
    pub attribute_names: Vec<String>,
    pub classes: Vec<ClassInfo>,
}

impl AttributeTable {
    pub fn new(attribute_names: Vec<String>, classes: Vec<ClassInfo>) -> Result<Self> {
        let table = AttributeTable {
            attribute_names,
            classes,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.attribute_names.len();
        let mut names = HashSet::new();
        let mut rows = HashSet::new();
        let mut seen_block = true;
        for class in &self.classes {
            if class.attributes.len() != width {
                return Err(Error::Dataset(format!(
                    "class {} has {} attributes, {width} declared",
                    class.name,
                    class.attributes.len()
                )));
            }
            if class.attributes.iter().any(|&a| a > 1) {
                return Err(Error::Dataset(format!(
                    "class {} has a non-binary attribute",
                    class.name
                )));
            }
            if class.name.is_empty()
                || !class
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Dataset(format!(
                    "invalid class name {:?}",
                    class.name
                )));
            }
            if !names.insert(class.name.as_str()) {
                return Err(Error::Dataset(format!("class {} listed twice", class.name)));
            }
            if !rows.insert(class.attributes.clone()) {
                return Err(Error::Dataset(format!(
                    "class {} repeats another class's attribute row",
                    class.name
                )));
            }
            if class.seen && !seen_block {
                return Err(Error::Dataset(
                    "seen classes must precede unseen classes".into(),
                ));
            }
            seen_block &= class.seen;
        }
        if self.seen_count() == 0 {
            return Err(Error::Dataset("no seen classes".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn seen_count(&self) -> usize {
        self.classes.iter().filter(|c| c.seen).count()
    }

    pub fn unseen_count(&self) -> usize {
        self.classes.len() - self.seen_count()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.classes.get(class).is_some_and(|c| c.seen)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn row(&self, class: usize) -> Vec<f64> {
        self.classes[class]
            .attributes
            .iter()
            .map(|&a| f64::from(a))
            .collect()
    }

    pub fn unseen_ids(&self) -> std::ops::Range<usize> {
        self.seen_count()..self.classes.len()
    }

    pub fn unseen_rows(&self) -> Vec<Vec<f64>> {
        self.unseen_ids().map(|c| self.row(c)).collect()
    }

    pub fn all_rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes.len()).map(|c| self.row(c)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sequence_length: usize,
    pub frame_width: usize,
    /// Columns re-expressed relative to the first frame before standardizing
    /// (the palm centre).
    #[serde(default)]
    pub palm_columns: Vec<usize>,
    pub attribute_names: Vec<String>,
    pub classes: Vec<ClassInfo>,
    /// Number of sequences per split.
    pub counts: SplitCounts,
    #[serde(default)]
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub generator: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub table: AttributeTable,
    pub train: Vec<GestureSequence>,
    pub test: Vec<GestureSequence>,
}

/// Training view: seen classes only.
#[derive(Clone, Debug)]
pub struct TrainView<'a> {
    samples: Vec<&'a GestureSequence>,
}

impl<'a> TrainView<'a> {
    /// Fails with a protocol error if any sample belongs to an unseen class.
    pub fn new(samples: Vec<&'a GestureSequence>, table: &AttributeTable) -> Result<Self> {
        check_seen(&samples, table)?;
        Ok(TrainView { samples })
    }

    pub fn samples(&self) -> &[&'a GestureSequence] {
        &self.samples
    }
}

impl<'a> std::ops::Deref for TrainView<'a> {
    type Target = [&'a GestureSequence];

    fn deref(&self) -> &Self::Target {
        &self.samples
    }
}

pub(crate) fn check_seen(samples: &[&GestureSequence], table: &AttributeTable) -> Result<()> {
    for s in samples {
        if !table.is_seen(s.class) {
            let name = table.classes.get(s.class).map_or("?", |c| c.name.as_str());
            return Err(Error::Protocol(format!(
                "sample {} of class {name} is not from a seen class",
                s.sample_id
            )));
        }
    }
    Ok(())
}

impl Dataset {
    /// Training view (seen classes of the train split) and test view (both partitions).
    pub fn split_views(&self) -> (TrainView<'_>, Vec<&GestureSequence>) {
        let train = self
            .train
            .iter()
            .filter(|s| self.table.is_seen(s.class))
            .collect();
        (TrainView { samples: train }, self.test.iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        let m = &self.manifest;
        if m.counts.train != self.train.len() || m.counts.test != self.test.len() {
            return Err(Error::Dataset(format!(
                "manifest declares {}/{} train/test sequences, found {}/{}",
                m.counts.train,
                m.counts.test,
                self.train.len(),
                self.test.len()
            )));
        }
        if let Some(bad) = m.palm_columns.iter().find(|&&c| c >= m.frame_width) {
            return Err(Error::Dataset(format!(
                "palm column {bad} is outside the frame"
            )));
        }
        for s in self.train.iter().chain(&self.test) {
            if s.class >= self.table.classes.len() {
                return Err(Error::Dataset(format!(
                    "sample {} has unknown class",
                    s.sample_id
                )));
            }
            if s.steps != m.sequence_length
                || s.width != m.frame_width
                || s.frames.len() != s.steps * s.width
            {
                return Err(Error::Dataset(format!(
                    "sample {} has the wrong shape",
                    s.sample_id
                )));
            }
            if s.frames.iter().any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!(
                    "sample {} has a non-finite value",
                    s.sample_id
                )));
            }
        }
        check_seen(&self.train.iter().collect::<Vec<_>>(), &self.table)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        for (split, seqs) in [(Split::Train, &self.train), (Split::Test, &self.test)] {
            std::fs::write(dir.join(split.file_name()), self.split_csv(split, seqs))?;
        }
        Ok(())
    }

    fn split_csv(&self, split: Split, seqs: &[GestureSequence]) -> String {
        let width = self.manifest.frame_width;
        let mut out = String::from("split,class,sample_id,frame");
        for f in 0..width {
            write!(out, ",f{f}").unwrap();
        }
        out.push('\n');
        for s in seqs {
            let class = &self.table.classes[s.class].name;
            for t in 0..s.steps {
                write!(out, "{},{class},{},{t}", split.as_str(), s.sample_id).unwrap();
                for v in s.frame(t) {
                    write!(out, ",{v}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::load(
                &manifest_path,
                format!("unsupported version {}", manifest.version),
            ));
        }
        let table = AttributeTable::new(manifest.attribute_names.clone(), manifest.classes.clone())
            .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
        let train = read_split(dir, Split::Train, &manifest, &table)?;
        let test = read_split(dir, Split::Test, &manifest, &table)?;
        let ds = Dataset {
            manifest,
            table,
            train,
            test,
        };
        ds.validate().map_err(|e| Error::load(dir, e.to_string()))?;
        Ok(ds)
    }
}

fn read_split(
    dir: &Path,
    split: Split,
    manifest: &DatasetManifest,
    table: &AttributeTable,
) -> Result<Vec<GestureSequence>> {
    let path = dir.join(split.file_name());
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let (steps, width) = (manifest.sequence_length, manifest.frame_width);
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::load(&path, "empty file"));
    };
    if header.split(',').count() != 4 + width {
        return Err(Error::load(
            &path,
            format!("header does not declare {width} features"),
        ));
    }
    let mut out: Vec<GestureSequence> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let err = |detail: String| Error::load(&path, format!("line {lineno}: {detail}"));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + width {
            return Err(err(format!(
                "expected {} fields, found {}",
                4 + width,
                fields.len()
            )));
        }
        if fields[0] != split.as_str() {
            return Err(err(format!(
                "split {:?} in the {} file",
                fields[0],
                split.as_str()
            )));
        }
        let class = table
            .find(fields[1])
            .ok_or_else(|| err(format!("unknown label {:?}", fields[1])))?;
        let sample_id: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad sample id {:?}", fields[2])))?;
        let frame: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad frame index {:?}", fields[3])))?;
        let start_new = frame == 0;
        if start_new {
            out.push(GestureSequence {
                sample_id,
                class,
                split,
                steps,
                width,
                frames: Vec::with_capacity(steps * width),
            });
        }
        let Some(seq) = out.last_mut() else {
            return Err(err("sequence does not start at frame 0".into()));
        };
        if seq.sample_id != sample_id
            || seq.class != class
            || seq.frames.len() != frame * width
            || frame >= steps
        {
            return Err(err(format!(
                "sample {sample_id} frame {frame} is out of order"
            )));
        }
        for f in &fields[4..] {
            let v: f64 = f
                .parse()
                .map_err(|_| err(format!("sample {sample_id}: bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("sample {sample_id}: non-finite value")));
            }
            seq.frames.push(v);
        }
    }
    if let Some(s) = out.iter().find(|s| s.frames.len() != steps * width) {
        return Err(Error::load(
            &path,
            format!("sample {} has fewer than {steps} frames", s.sample_id),
        ));
    }
    Ok(out)
}

/// Per-feature standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub relative_columns: Vec<usize>,
}

fn relative_frames(seq: &GestureSequence, columns: &[usize]) -> Vec<f64> {
    let mut frames = seq.frames.clone();
    let w = seq.width;
    for &c in columns {
        let origin = frames[c];
        for t in 0..seq.steps {
            frames[t * w + c] -= origin;
        }
    }
    frames
}

impl NormStats {
    /// Mean and (floored) standard deviation of every feature over all frames
    /// of `train`, after re-expressing `relative_columns` against frame 0.
    pub fn fit(train: &[&GestureSequence], relative_columns: &[usize]) -> Result<Self> {
        let Some(first) = train.first() else {
            return Err(Error::Dataset(
                "cannot fit normalization on an empty split".into(),
            ));
        };
        let w = first.width;
        let mut sum = vec![0.0; w];
        let mut count = 0usize;
        let rel: Vec<Vec<f64>> = train
            .iter()
            .map(|s| relative_frames(s, relative_columns))
            .collect();
        for frames in &rel {
            for row in frames.chunks(w) {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; w];
        for frames in &rel {
            for row in frames.chunks(w) {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).max(VARIANCE_FLOOR).sqrt())
            .collect();
        Ok(NormStats {
            mean,
            std,
            relative_columns: relative_columns.to_vec(),
        })
    }

    pub fn apply(&self, seq: &GestureSequence) -> Result<Vec<f64>> {
        if seq.width != self.mean.len() {
            return Err(Error::dim("normalize", &[seq.width], &[self.mean.len()]));
        }
        let mut frames = relative_frames(seq, &self.relative_columns);
        for row in frames.chunks_mut(seq.width) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(frames)
    }

    pub fn normalize(&self, seqs: &[GestureSequence]) -> Result<Vec<GestureSequence>> {
        seqs.iter()
            .map(|s| {
                Ok(GestureSequence {
                    frames: self.apply(s)?,
                    ..s.clone()
                })
            })
            .collect()
    }
}

pub const FRAME_WIDTH: usize = 36;
pub const PALM_COLUMNS: [usize; 3] = [3, 4, 5];
const MOVEMENT_ATTRIBUTES: usize = 6;
const FINGERS: usize = 5;

pub fn attribute_names() -> Vec<String> {
    [
        "move_horizontal",
        "move_vertical",
        "move_depth",
        "circular",
        "wrist_rotation",
        "repetitive",
        "thumb_bent",
        "index_bent",
        "middle_bent",
        "ring_bent",
        "pinky_bent",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Parameters of the synthetic stand-in for a recorded gesture corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sequence_length: usize,
    /// Scales every per-sample perturbation; zero makes samples of a class identical.
    pub noise: f64,
    /// Amplitude of the class-specific motion not explained by attributes.
    pub class_variation: f64,
    /// Minimum Hamming distance between any two attribute rows.
    pub min_hamming: usize,
    /// Explicit attribute rows (seen first); drawn at random when absent.
    pub attribute_rows: Option<Vec<Vec<u8>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            seen_classes: 16,
            unseen_classes: 9,
            train_per_class: 50,
            test_per_class: 20,
            sequence_length: 100,
            noise: 0.2,
            class_variation: 0.3,
            min_hamming: 2,
            attribute_rows: None,
        }
    }
}

/// One sinusoidal component `amp · sin(2π·freq·t + phase)` on one frame column.
#[derive(Clone, Copy, Debug)]
struct Wave {
    column: usize,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

/// Motion and pose primitives shared by all classes, one set per attribute.
struct Primitives {
    base_pose: Vec<f64>,
    attribute_waves: Vec<Vec<Wave>>,
    attribute_offsets: Vec<Vec<(usize, f64)>>,
}

fn unit3<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn finger_columns(finger: usize) -> std::ops::Range<usize> {
    let start = 6 + finger * 6;
    start..start + 6
}

impl Primitives {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let base_pose = (0..FRAME_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut attribute_waves = Vec::new();
        let mut attribute_offsets = Vec::new();
        for a in 0..MOVEMENT_ATTRIBUTES {
            // palm path along a random axis, echoed by hand direction and,
            // more weakly, by every joint
            let mut waves = Vec::new();
            let axis = unit3(rng);
            let freq = rng.gen_range(0.5..2.0) + if a == 5 { 2.0 } else { 0.0 };
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (k, &ax) in axis.iter().enumerate() {
                waves.push(Wave {
                    column: 3 + k,
                    amp: ax,
                    freq,
                    phase,
                });
                waves.push(Wave {
                    column: k,
                    amp: 0.4 * ax,
                    freq,
                    phase: phase + 0.5 * PI,
                });
            }
            if a == 3 {
                // circular: a second axis in quadrature
                let other = unit3(rng);
                for (k, &ax) in other.iter().enumerate() {
                    waves.push(Wave {
                        column: 3 + k,
                        amp: ax,
                        freq,
                        phase: phase + 0.5 * PI,
                    });
                }
            }
            for c in 6..FRAME_WIDTH {
                waves.push(Wave {
                    column: c,
                    amp: 0.15 * rng.gen_range(-1.0..1.0),
                    freq,
                    phase: phase + rng.gen_range(-0.3..0.3),
                });
            }
            attribute_waves.push(waves);
            attribute_offsets.push(Vec::new());
        }
        for finger in 0..FINGERS {
            // bent finger: joints pulled towards the palm, plus a slight flex motion
            let mut offsets = Vec::new();
            let mut waves = Vec::new();
            let freq = rng.gen_range(0.5..1.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for c in finger_columns(finger) {
                offsets.push((
                    c,
                    rng.gen_range(0.6..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                ));
                waves.push(Wave {
                    column: c,
                    amp: 0.2 * rng.gen_range(-1.0..1.0),
                    freq,
                    phase,
                });
            }
            attribute_waves.push(waves);
            attribute_offsets.push(offsets);
        }
        Primitives {
            base_pose,
            attribute_waves,
            attribute_offsets,
        }
    }
}

/// Noise-free trajectory of one class.
struct ClassTrajectory {
    offsets: Vec<f64>,
    waves: Vec<Wave>,
}

impl ClassTrajectory {
    fn new<R: Rng>(
        rng: &mut R,
        prim: &Primitives,
        attributes: &[u8],
        class_variation: f64,
    ) -> Self {
        let mut offsets = prim.base_pose.clone();
        let mut waves = Vec::new();
        for (a, &on) in attributes.iter().enumerate() {
            if on == 1 {
                waves.extend_from_slice(&prim.attribute_waves[a]);
                for &(c, v) in &prim.attribute_offsets[a] {
                    offsets[c] += v;
                }
            }
        }
        for column in 0..FRAME_WIDTH {
            waves.push(Wave {
                column,
                amp: class_variation * rng.gen_range(-1.0..1.0),
                freq: rng.gen_range(0.25..1.5),
                phase: rng.gen_range(0.0..2.0 * PI),
            });
        }
        ClassTrajectory { offsets, waves }
    }

    fn frame(&self, t: f64, scale: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.offsets);
        for w in &self.waves {
            out[w.column] += scale * w.at(t);
        }
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn draw_attribute_rows<R: Rng>(
    rng: &mut R,
    spec: &SyntheticSpec,
    width: usize,
) -> Result<Vec<Vec<u8>>> {
    let total = spec.seen_classes + spec.unseen_classes;
    if total > 1 << width {
        return Err(Error::Dataset(format!(
            "{total} classes need duplicate attribute rows (only {} distinct rows exist)",
            1u32 << width
        )));
    }
    'attempt: for _ in 0..200 {
        let mut rows: Vec<Vec<u8>> = Vec::with_capacity(total);
        let mut tries = 0;
        while rows.len() < total {
            tries += 1;
            if tries > 20_000 {
                continue 'attempt;
            }
            let row: Vec<u8> = (0..width).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            if rows
                .iter()
                .all(|r| hamming(r, &row) >= spec.min_hamming.max(1))
            {
                rows.push(row);
            }
        }
        // every attribute must vary across the seen classes
        let seen = &rows[..spec.seen_classes];
        let varies = (0..width).all(|a| {
            let on = seen.iter().filter(|r| r[a] == 1).count();
            spec.seen_classes < 2 || (on > 0 && on < seen.len())
        });
        if varies {
            return Ok(rows);
        }
    }
    Err(Error::Dataset(format!(
        "could not draw {total} attribute rows with pairwise distance ≥ {}",
        spec.min_hamming
    )))
}

/// Builds a dataset whose class trajectories are sums of attribute-keyed
/// motion primitives, a class-specific residual motion, and per-sample
/// perturbations scaled by `spec.noise`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.seen_classes == 0 {
        return Err(Error::Config("at least one seen class is required".into()));
    }
    if spec.sequence_length == 0 {
        return Err(Error::EmptySequence);
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be non-negative, got {}",
            spec.noise
        )));
    }
    let names = attribute_names();
    let width = names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows = match &spec.attribute_rows {
        Some(rows) => {
            if rows.len() != spec.seen_classes + spec.unseen_classes {
                return Err(Error::Config("attribute_rows must list every class".into()));
            }
            rows.clone()
        }
        None => draw_attribute_rows(&mut rng, spec, width)?,
    };
    let classes = rows
        .into_iter()
        .enumerate()
        .map(|(i, attributes)| {
            let seen = i < spec.seen_classes;
            let name = if seen {
                format!("s{i:02}")
            } else {
                format!("u{:02}", i - spec.seen_classes)
            };
            ClassInfo {
                name,
                seen,
                attributes,
            }
        })
        .collect();
    let table = AttributeTable::new(names.clone(), classes)?;

    let prim = Primitives::draw(&mut rng);
    let trajectories: Vec<ClassTrajectory> = table
        .classes
        .iter()
        .map(|c| ClassTrajectory::new(&mut rng, &prim, &c.attributes, spec.class_variation))
        .collect();

    let steps = spec.sequence_length;
    let mut sample_id = 0;
    let mut sample = |rng: &mut ChaCha8Rng, class: usize, split: Split| {
        let sigma = spec.noise;
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let scale = 1.0 + 0.5 * sigma * gauss(rng);
        let shift = 0.1 * sigma * gauss(rng);
        let rate = 1.0 + 0.25 * sigma * gauss(rng);
        let origin: Vec<f64> = (0..3).map(|_| 5.0 * sigma * gauss(rng)).collect();
        let mut frames = vec![0.0; steps * FRAME_WIDTH];
        for (t, row) in frames.chunks_mut(FRAME_WIDTH).enumerate() {
            let tau = if steps > 1 {
                t as f64 / (steps - 1) as f64
            } else {
                0.0
            };
            trajectories[class].frame(tau * rate + shift, scale, row);
            for (k, &o) in origin.iter().enumerate() {
                row[PALM_COLUMNS[k]] += o;
            }
            for v in row.iter_mut() {
                *v += sigma * gauss(rng);
            }
        }
        let seq = GestureSequence {
            sample_id,
            class,
            split,
            steps,
            width: FRAME_WIDTH,
            frames,
        };
        sample_id += 1;
        seq
    };
    let mut train = Vec::new();
    for class in 0..spec.seen_classes {
        for _ in 0..spec.train_per_class {
            train.push(sample(&mut rng, class, Split::Train));
        }
    }
    let mut test = Vec::new();
    for class in 0..table.classes.len() {
        for _ in 0..spec.test_per_class {
            test.push(sample(&mut rng, class, Split::Test));
        }
    }
    let normalization = if train.is_empty() {
        None
    } else {
        Some(NormStats::fit(
            &train.iter().collect::<Vec<_>>(),
            &PALM_COLUMNS,
        )?)
    };
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sequence_length: steps,
        frame_width: FRAME_WIDTH,
        palm_columns: PALM_COLUMNS.to_vec(),
        attribute_names: names,
        classes: table.classes.clone(),
        counts: SplitCounts {
            train: train.len(),
            test: test.len(),
        },
        normalization,
        generator: Some(spec.clone()),
    };
    Ok(Dataset {
        manifest,
        table,
        train,
        test,
    })
}
