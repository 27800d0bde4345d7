//! Embedding exchange files and synthetic domain-shifted streams.
//!
//! # File layout
//!
//! All integers are unsigned 32-bit and all floats 32-bit IEEE 754, little
//! endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "OTEB"
//!      4     4  version (1)
//!      8     4  d        embedding dimension
//!     12     4  n_items
//!     16     4  K        classes
//!     20     4  M        templates
//!     24     4  flags    bit 0: labels present, bit 1: prototypes present
//!     28        prototypes (if flagged): M blocks of K vectors of d floats
//!               items: n_items vectors of d floats
//!               labels (if flagged): n_items signed 32-bit class indices
//! ```
//!
//! The file must end exactly after the last present block.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{random_orthonormal_columns, unit_vector};
use crate::prototypes::{build_bank, PrototypeBank, PrototypeError};

pub const MAGIC: [u8; 4] = *b"OTEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const FLAG_LABELS: u32 = 1;
pub const FLAG_PROTOTYPES: u32 = 1 << 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error in {block} at byte {offset}: {message}")]
    Parse {
        offset: usize,
        block: &'static str,
        message: String,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

fn parse_error(offset: usize, block: &'static str, message: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        block,
        message: message.into(),
    }
}

/// In-memory image of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    classes: usize,
    /// `d x K x M`
    prototypes: Option<Array3<f32>>,
    /// `d x n_items`
    items: Array2<f32>,
    labels: Option<Vec<i32>>,
}

impl EmbeddingFile {
    pub fn new(
        items: Array2<f32>,
        classes: usize,
        prototypes: Option<Array3<f32>>,
        labels: Option<Vec<i32>>,
    ) -> Result<Self, DataError> {
        let (d, n) = items.dim();
        if let Some(p) = &prototypes {
            let (pd, pk, _) = p.dim();
            if pd != d || pk != classes {
                return Err(DataError::ShapeMismatch(format!(
                    "prototypes are {pd}x{pk}, expected {d}x{classes}"
                )));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(DataError::ShapeMismatch("non-finite prototype entry".into()));
            }
        }
        if items.iter().any(|x| !x.is_finite()) {
            return Err(DataError::ShapeMismatch("non-finite item entry".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(DataError::ShapeMismatch(format!("{} labels for {n} items", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y < 0 || y as usize >= classes) {
                return Err(DataError::ShapeMismatch(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self {
            classes,
            prototypes,
            items,
            labels,
        })
    }

    /// Converts from `f64` tensors (rounding to `f32`).
    pub fn from_f64(
        items: &Array2<f64>,
        classes: usize,
        prototypes: Option<&Array3<f64>>,
        labels: Option<&[usize]>,
    ) -> Result<Self, DataError> {
        Self::new(
            items.mapv(|x| x as f32),
            classes,
            prototypes.map(|p| p.mapv(|x| x as f32)),
            labels.map(|l| l.iter().map(|&y| y as i32).collect()),
        )
    }

    pub fn dim(&self) -> usize {
        self.items.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.ncols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn templates(&self) -> usize {
        self.prototypes.as_ref().map_or(0, |p| p.dim().2)
    }

    pub fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.prototypes.is_some() {
            flags |= FLAG_PROTOTYPES;
        }
        flags
    }

    pub fn items(&self) -> &Array2<f32> {
        &self.items
    }

    pub fn prototypes(&self) -> Option<&Array3<f32>> {
        self.prototypes.as_ref()
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn encoded_len(&self) -> usize {
        let d = self.dim();
        HEADER_LEN
            + 4 * d * self.classes * self.templates()
            + 4 * d * self.n_items()
            + self.labels.as_ref().map_or(0, |l| 4 * l.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        for field in [
            VERSION,
            self.dim() as u32,
            self.n_items() as u32,
            self.classes as u32,
            self.templates() as u32,
            self.flags(),
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        if let Some(p) = &self.prototypes {
            let (d, k, m) = p.dim();
            for t in 0..m {
                for c in 0..k {
                    for i in 0..d {
                        out.extend_from_slice(&p[[i, c, t]].to_le_bytes());
                    }
                }
            }
        }
        for item in self.items.columns() {
            for x in item {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(labels) = &self.labels {
            for y in labels {
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut reader = Reader { bytes, offset: 0 };
        let magic = reader.take(4, "header")?;
        if magic != MAGIC {
            return Err(parse_error(0, "header", format!("bad magic {magic:?}")));
        }
        let version = reader.u32("header")?;
        if version != VERSION {
            return Err(parse_error(4, "header", format!("unsupported version {version}")));
        }
        let d = reader.u32("header")? as usize;
        let n = reader.u32("header")? as usize;
        let classes = reader.u32("header")? as usize;
        let templates = reader.u32("header")? as usize;
        let flags = reader.u32("header")?;
        if flags & !(FLAG_LABELS | FLAG_PROTOTYPES) != 0 {
            return Err(parse_error(24, "header", format!("unknown flag bits {flags:#x}")));
        }
        let has_labels = flags & FLAG_LABELS != 0;
        let has_prototypes = flags & FLAG_PROTOTYPES != 0;
        if !has_prototypes && templates != 0 {
            return Err(parse_error(20, "header", "M must be 0 without a prototype block"));
        }
        let expected = (|| {
            let mut total = HEADER_LEN;
            if has_prototypes {
                total = total.checked_add(d.checked_mul(classes)?.checked_mul(templates)?.checked_mul(4)?)?;
            }
            total = total.checked_add(d.checked_mul(n)?.checked_mul(4)?)?;
            if has_labels {
                total = total.checked_add(n.checked_mul(4)?)?;
            }
            Some(total)
        })()
        .ok_or_else(|| parse_error(8, "header", "declared sizes overflow"))?;

        let prototypes = if has_prototypes {
            let mut p = Array3::<f32>::zeros((d, classes, templates));
            for t in 0..templates {
                for c in 0..classes {
                    for i in 0..d {
                        p[[i, c, t]] = reader.f32("prototypes")?;
                    }
                }
            }
            Some(p)
        } else {
            None
        };

        let mut items = Array2::<f32>::zeros((d, n));
        for j in 0..n {
            for i in 0..d {
                items[[i, j]] = reader.f32("items")?;
            }
        }

        let labels = if has_labels {
            let start = reader.offset;
            let mut labels = Vec::with_capacity(n);
            for j in 0..n {
                let y = reader.i32("labels")?;
                if y < 0 || y as usize >= classes {
                    return Err(parse_error(
                        start + 4 * j,
                        "labels",
                        format!("label {y} outside [0, {classes})"),
                    ));
                }
                labels.push(y);
            }
            Some(labels)
        } else {
            None
        };

        if reader.offset != bytes.len() {
            return Err(parse_error(
                reader.offset,
                "trailer",
                format!("{} unexpected trailing bytes (declared size {expected})", bytes.len() - reader.offset),
            ));
        }
        if prototypes.iter().flatten().chain(items.iter()).any(|x| !x.is_finite()) {
            return Err(parse_error(HEADER_LEN, "payload", "non-finite float"));
        }
        Ok(Self {
            classes,
            prototypes,
            items,
            labels,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, block: &'static str) -> Result<&'a [u8], DataError> {
        let end = self.offset + n;
        if end > self.bytes.len() {
            return Err(parse_error(
                self.offset,
                block,
                format!("truncated: {block} block needs {n} more bytes, {} left", self.bytes.len() - self.offset),
            ));
        }
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn word(&mut self, block: &'static str) -> Result<[u8; 4], DataError> {
        Ok(self.take(4, block)?.try_into().expect("4 bytes"))
    }

    fn u32(&mut self, block: &'static str) -> Result<u32, DataError> {
        self.word(block).map(u32::from_le_bytes)
    }

    fn i32(&mut self, block: &'static str) -> Result<i32, DataError> {
        self.word(block).map(i32::from_le_bytes)
    }

    fn f32(&mut self, block: &'static str) -> Result<f32, DataError> {
        self.word(block).map(f32::from_le_bytes)
    }
}

pub fn write_embedding_file(path: impl AsRef<Path>, file: &EmbeddingFile) -> Result<(), DataError> {
    file.write(path)
}

/// Parsed file contents in engine types.
#[derive(Debug, Clone)]
pub struct LoadedEmbeddings {
    pub bank: Option<PrototypeBank>,
    /// `d x n_items`
    pub items: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

/// Reads and validates a file; the prototype block goes through
/// [`build_bank`].
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<LoadedEmbeddings, DataError> {
    let file = EmbeddingFile::read(path)?;
    let bank = file
        .prototypes
        .as_ref()
        .map(|p| build_bank(p.mapv(f64::from)))
        .transpose()?;
    Ok(LoadedEmbeddings {
        bank,
        items: file.items.mapv(f64::from),
        labels: file.labels.map(|l| l.into_iter().map(|y| y as usize).collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftKind {
    None,
    #[default]
    MeanShift,
    Rotation,
    FeatureMask,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::None => "none",
            ShiftKind::MeanShift => "mean_shift",
            ShiftKind::Rotation => "rotation",
            ShiftKind::FeatureMask => "feature_mask",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ShiftKind::None),
            "mean_shift" => Ok(ShiftKind::MeanShift),
            "rotation" => Ok(ShiftKind::Rotation),
            "feature_mask" => Ok(ShiftKind::FeatureMask),
            other => Err(format!(
                "unknown shift `{other}` (expected none, mean_shift, rotation or feature_mask)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Batching {
    /// Every batch holds `B/K` items per class, within one.
    #[default]
    Stratified,
    /// Global shuffle, class counts per batch are left to chance.
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticShiftSpec {
    pub d: usize,
    pub classes: usize,
    pub templates: usize,
    pub n_per_class: usize,
    /// Per-coordinate std of the template perturbations.
    pub template_jitter: f64,
    /// Per-coordinate std of the sample noise.
    pub sample_noise: f64,
    pub shift_kind: ShiftKind,
    /// Norm of the mean-shift vector at severity 1.
    pub shift_norm: f64,
    /// In `[0, 1]`.
    pub severity: f64,
    pub seed: u64,
    pub batching: Batching,
    /// Aim the mean shift at this class direction instead of a random one.
    pub dominant_class: Option<usize>,
}

impl Default for SyntheticShiftSpec {
    /// Ten classes in 32 dimensions, eight templates, 2560 items under a
    /// severity-0.6 mean shift.
    fn default() -> Self {
        Self {
            d: 32,
            classes: 10,
            templates: 8,
            n_per_class: 256,
            template_jitter: 0.2,
            sample_noise: 0.4,
            shift_kind: ShiftKind::MeanShift,
            shift_norm: 1.5,
            severity: 0.6,
            seed: 0,
            batching: Batching::Stratified,
            dominant_class: None,
        }
    }
}

impl SyntheticShiftSpec {
    /// No shift and little noise.
    pub fn clean() -> Self {
        Self {
            shift_kind: ShiftKind::None,
            severity: 0.0,
            sample_noise: 0.1,
            ..Self::default()
        }
    }

    /// Strong mean shift towards class 0, pulling most samples into one cluster.
    pub fn dominant_cluster() -> Self {
        Self {
            severity: 1.0,
            dominant_class: Some(0),
            ..Self::default()
        }
    }

    pub const PRESETS: [&'static str; 3] = ["default", "clean", "dominant_cluster"];

    pub fn preset(name: &str) -> Result<Self, DataError> {
        match name {
            "default" => Ok(Self::default()),
            "clean" => Ok(Self::clean()),
            "dominant_cluster" => Ok(Self::dominant_cluster()),
            other => Err(DataError::InvalidSpec(format!(
                "unknown preset `{other}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_severity(mut self, severity: f64) -> Self {
        self.severity = severity;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if self.d == 0 || self.classes < 2 || self.templates == 0 || self.n_per_class == 0 {
            return fail(format!(
                "need d >= 1, K >= 2, M >= 1, n_per_class >= 1 (got d={} K={} M={} n={})",
                self.d, self.classes, self.templates, self.n_per_class
            ));
        }
        if !(self.template_jitter >= 0.0 && self.sample_noise >= 0.0 && self.shift_norm >= 0.0) {
            return fail("noise scales and shift norm must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return fail(format!("severity {} outside [0, 1]", self.severity));
        }
        if let Some(c) = self.dominant_class {
            if c >= self.classes {
                return fail(format!("dominant class {c} >= K = {}", self.classes));
            }
        }
        Ok(())
    }
}

/// Raw encoder inputs (`d x B`) with their classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScenario {
    pub bank: PrototypeBank,
    /// `d x K` unit class directions.
    pub class_directions: Array2<f64>,
    pub batches: Vec<LabeledBatch>,
}

impl SyntheticScenario {
    /// All batches concatenated into one file, with prototypes and labels.
    pub fn to_embedding_file(&self) -> Result<EmbeddingFile, DataError> {
        let d = self.bank.dim();
        let n: usize = self.batches.iter().map(LabeledBatch::len).sum();
        let mut items = Array2::<f64>::zeros((d, n));
        let mut labels = Vec::with_capacity(n);
        let mut j = 0;
        for batch in &self.batches {
            for (col, &y) in batch.inputs.columns().into_iter().zip(&batch.labels) {
                items.column_mut(j).assign(&col);
                labels.push(y);
                j += 1;
            }
        }
        EmbeddingFile::from_f64(&items, self.bank.classes(), Some(self.bank.per_template()), Some(&labels))
    }
}

// independent random streams so that e.g. the severity never changes the draws
const STREAM_CLASSES: u64 = 1;
const STREAM_TEMPLATES: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_SAMPLES: u64 = 4;
const STREAM_ORDER: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

enum ShiftOperator {
    Identity,
    Translate(Array1<f64>),
    Rotate(Array2<f64>),
    Mask(Vec<usize>),
}

impl ShiftOperator {
    fn build(spec: &SyntheticShiftSpec, directions: &Array2<f64>) -> Self {
        let mut rng = stream(spec.seed, STREAM_SHIFT);
        let d = spec.d;
        let sev = spec.severity;
        match spec.shift_kind {
            ShiftKind::None => ShiftOperator::Identity,
            ShiftKind::MeanShift => {
                let dir = match spec.dominant_class {
                    Some(c) => directions.column(c).to_owned(),
                    None => unit_vector(d, &mut rng),
                };
                ShiftOperator::Translate(dir * (sev * spec.shift_norm))
            }
            ShiftKind::Rotation => {
                // fixed random orthogonal map V diag(R(theta_j)) V^T, angles scaled by severity
                let basis = random_orthonormal_columns(d, d, &mut rng);
                let mut rot = Array2::<f64>::eye(d);
                for pair in 0..d / 2 {
                    let theta = sev * rng.random_range(0.0..std::f64::consts::PI);
                    let (s, c) = theta.sin_cos();
                    let (a, b) = (2 * pair, 2 * pair + 1);
                    rot[[a, a]] = c;
                    rot[[a, b]] = -s;
                    rot[[b, a]] = s;
                    rot[[b, b]] = c;
                }
                ShiftOperator::Rotate(basis.dot(&rot).dot(&basis.t()))
            }
            ShiftKind::FeatureMask => {
                let mut coords: Vec<usize> = (0..d).collect();
                coords.shuffle(&mut rng);
                coords.truncate((sev * d as f64).round() as usize);
                ShiftOperator::Mask(coords)
            }
        }
    }

    fn apply(&self, x: &mut Array1<f64>) {
        match self {
            ShiftOperator::Identity => {}
            ShiftOperator::Translate(s) => *x += s,
            ShiftOperator::Rotate(r) => *x = r.dot(&*x),
            ShiftOperator::Mask(coords) => {
                for &i in coords {
                    x[i] = 0.0;
                }
            }
        }
    }
}

/// Draws class directions, jittered per-template prototypes and a shifted,
/// labelled input stream cut into batches of `batch_size`.
pub fn generate_synthetic(spec: &SyntheticShiftSpec, batch_size: usize) -> Result<SyntheticScenario, DataError> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(DataError::InvalidSpec("batch size must be >= 1".into()));
    }
    let (d, k, m) = (spec.d, spec.classes, spec.templates);

    let mut rng = stream(spec.seed, STREAM_CLASSES);
    let mut directions = Array2::<f64>::zeros((d, k));
    for mut col in directions.columns_mut() {
        col.assign(&unit_vector(d, &mut rng));
    }

    let mut rng = stream(spec.seed, STREAM_TEMPLATES);
    let per_template = Array3::from_shape_fn((d, k, m), |(i, c, _)| {
        directions[[i, c]] + spec.template_jitter * rng.sample::<f64, _>(StandardNormal)
    });
    let bank = build_bank(per_template)?;

    let shift = ShiftOperator::build(spec, &directions);
    let order = batch_labels(spec, batch_size);
    let mut rng = stream(spec.seed, STREAM_SAMPLES);
    let batches = order
        .into_iter()
        .map(|labels| {
            let mut inputs = Array2::<f64>::zeros((d, labels.len()));
            for (j, &y) in labels.iter().enumerate() {
                let mut x = directions.column(y).to_owned();
                x.mapv_inplace(|v| v + spec.sample_noise * rng.sample::<f64, _>(StandardNormal));
                shift.apply(&mut x);
                inputs.column_mut(j).assign(&x);
            }
            LabeledBatch { inputs, labels }
        })
        .collect();

    Ok(SyntheticScenario {
        bank,
        class_directions: directions,
        batches,
    })
}

fn batch_labels(spec: &SyntheticShiftSpec, batch_size: usize) -> Vec<Vec<usize>> {
    let k = spec.classes;
    let mut rng = stream(spec.seed, STREAM_ORDER);
    match spec.batching {
        Batching::Unbalanced => {
            let mut all: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, spec.n_per_class)).collect();
            all.shuffle(&mut rng);
            all.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        Batching::Stratified => {
            let mut remaining = vec![spec.n_per_class; k];
            let mut total = k * spec.n_per_class;
            let mut batches = Vec::new();
            while total > 0 {
                let size = batch_size.min(total);
                // remaining counts differ by at most one between classes, so an
                // even split plus one extra for the fullest classes always fits
                let mut counts: Vec<usize> = remaining.iter().map(|&r| r.min(size / k)).collect();
                let leftover = size - counts.iter().sum::<usize>();
                let mut priority: Vec<usize> = (0..k).collect();
                priority.shuffle(&mut rng);
                // stable sort keeps the random order among equal headroom
                priority.sort_by_key(|&c| std::cmp::Reverse(remaining[c] - counts[c]));
                let chosen: Vec<usize> = priority
                    .into_iter()
                    .filter(|&c| remaining[c] > counts[c])
                    .take(leftover)
                    .collect();
                for c in chosen {
                    counts[c] += 1;
                }
                let mut labels: Vec<usize> = counts
                    .iter()
                    .enumerate()
                    .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
                    .collect();
                labels.shuffle(&mut rng);
                for (c, n) in counts.iter().enumerate() {
                    remaining[c] -= n;
                }
                total -= size;
                batches.push(labels);
            }
            batches
        }
    }
}
