//! Datasets: synthetic task sequences and small-file ingestion.
//!
//! The synthetic generator draws one Gaussian cluster per class. Every class
//! gets its own counter-mode RNG stream derived from the spec seed, so the
//! whole sequence is reproducible bit for bit and classes can be generated in
//! parallel without changing the result.
//!
//! Classes that belong to the same continual-learning task share a common
//! direction component, so tasks form well-separated super-clusters the way
//! split benchmarks group related classes; classes inside a task keep their
//! own independent offsets (and the same spacing they would have without the
//! shared component). Pretraining base classes carry no shared component.

use crate::error::{Error, Result};
use crate::par;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Flat feature/label storage for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(feature_dim: usize) -> Dataset {
        Dataset { feature_dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        assert_eq!(features.len(), self.feature_dim, "feature length mismatch");
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature row of example `i`.
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Layout of one synthetic continual-learning sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSequenceSpec {
    /// Master seed for every random draw in the sequence.
    pub seed: u64,
    /// Number of continual-learning tasks.
    pub num_tasks: usize,
    /// Classes introduced by each task.
    pub classes_per_task: usize,
    /// Training examples drawn per class.
    pub train_per_class: usize,
    /// Held-out examples drawn per class.
    pub test_per_class: usize,
    /// Raw feature dimensionality; must divide evenly into backbone tokens.
    pub feature_dim: usize,
    /// Stddev of the class-centroid distribution.
    pub sigma_between: f64,
    /// Stddev of samples around their centroid.
    pub sigma_within: f64,
    /// Classes reserved for backbone pretraining, disjoint from all tasks.
    pub base_classes: usize,
}

impl Default for TaskSequenceSpec {
    fn default() -> Self {
        TaskSequenceSpec {
            seed: 7,
            num_tasks: 5,
            classes_per_task: 2,
            train_per_class: 200,
            test_per_class: 40,
            feature_dim: 64,
            sigma_between: 5.0,
            sigma_within: 0.5,
            base_classes: 16,
        }
    }
}

impl TaskSequenceSpec {
    /// Union label space size across all tasks (base classes excluded).
    pub fn union_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    /// Label range `[lo, hi)` of task `t` in the union space.
    pub fn class_range(&self, t: usize) -> (usize, usize) {
        (t * self.classes_per_task, (t + 1) * self.classes_per_task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::contract("task sequence needs at least one task and one class per task"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::contract("task sequence needs nonzero train and test samples per class"));
        }
        if self.feature_dim == 0 {
            return Err(Error::contract("feature_dim must be positive"));
        }
        if self.sigma_within <= 0.0 || self.sigma_between <= 0.0 {
            return Err(Error::contract("sigma_between and sigma_within must be positive"));
        }
        Ok(())
    }
}

/// Train/test splits of one task, with its union-space label range.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub class_lo: usize,
    pub class_hi: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Everything `gen_split_tasks` produces.
#[derive(Debug, Clone)]
pub struct SplitTasks {
    pub base_train: Dataset,
    pub base_test: Dataset,
    pub tasks: Vec<TaskData>,
}

/// One class worth of draws: centroid plus train and test samples.
struct ClassDraw {
    train: Vec<f64>,
    test: Vec<f64>,
}

/// Strength of the direction component shared by all classes of one task,
/// relative to each class's own centroid offset. At 1.0, same-task centroids
/// have expected cosine ~0.5 while different-task centroids stay near
/// orthogonal, without changing the spacing between classes inside a task.
const TASK_COHERENCE: f64 = 1.5;

/// RNG stream offset for the task-direction draws; far above any class
/// stream (`generator_class + 1`) so the two families never collide.
const TASK_DIRECTION_STREAM: u64 = 1 << 32;

/// Period of the repeating task-direction pattern. Task directions are a
/// short pattern tiled across the whole feature vector, so a task's shift is
/// a *global* property of the example — every window of the feature vector
/// carries it — rather than a detail of one coordinate range. Consumers that
/// slice features into fixed-width chunks (e.g. a transformer tokenizer)
/// therefore see the same between-task geometry in every chunk, and in any
/// chunk-mean, as long as the chunk width is a multiple of the period.
const TASK_PATTERN_PERIOD: usize = 8;

/// The shared direction component of task `t`, scaled by `sigma_between`.
///
/// All task patterns are drawn together in the period-`TASK_PATTERN_PERIOD`
/// space and orthonormalized (Gram-Schmidt over Gaussian draws), then tiled
/// across the feature vector and rescaled to the norm a raw Gaussian
/// direction would have, so distinct tasks point in exactly orthogonal
/// directions instead of inheriting the chance overlaps of independent
/// draws. Orthogonality is exact for up to `TASK_PATTERN_PERIOD` tasks.
fn task_direction(spec: &TaskSequenceSpec, t: usize) -> Vec<f64> {
    let d = spec.feature_dim;
    let p = TASK_PATTERN_PERIOD.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(TASK_DIRECTION_STREAM);
    let mut pats: Vec<Vec<f64>> = (0..spec.num_tasks)
        .map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..pats.len().min(p) {
        for j in 0..i {
            let dot: f64 = pats[i].iter().zip(&pats[j]).map(|(a, b)| a * b).sum();
            let nj: f64 = pats[j].iter().map(|v| v * v).sum();
            if nj > 0.0 {
                for k in 0..p {
                    pats[i][k] -= dot / nj * pats[j][k];
                }
            }
        }
    }
    let tiled: Vec<f64> = (0..d).map(|j| pats[t][j % p]).collect();
    let norm: f64 = tiled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { (d as f64).sqrt() / norm } else { 0.0 };
    tiled
        .iter()
        .map(|v| v * scale * TASK_COHERENCE * spec.sigma_between)
        .collect()
}

fn draw_class(spec: &TaskSequenceSpec, generator_class: usize) -> ClassDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(generator_class as u64 + 1);
    let d = spec.feature_dim;
    let shared = if generator_class >= spec.base_classes {
        let t = (generator_class - spec.base_classes) / spec.classes_per_task;
        Some(task_direction(spec, t))
    } else {
        None
    };
    let centroid: Vec<f64> = (0..d)
        .map(|j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.sigma_between + shared.as_ref().map_or(0.0, |s| s[j])
        })
        .collect();
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        centroid
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + z * spec.sigma_within
            })
            .collect()
    };
    let mut train = Vec::with_capacity(spec.train_per_class * d);
    for _ in 0..spec.train_per_class {
        train.extend(sample(&mut rng));
    }
    let mut test = Vec::with_capacity(spec.test_per_class * d);
    for _ in 0..spec.test_per_class {
        test.extend(sample(&mut rng));
    }
    ClassDraw { train, test }
}

/// Generates the pretraining split and all task splits.
///
/// Generator classes are laid out as `[base | task 0 | task 1 | ...]`, so task
/// class ranges are disjoint and ordered, and base classes never overlap with
/// any task. Task labels live in the union space `0..num_tasks*classes_per_task`;
/// base labels in their own space `0..base_classes`.
pub fn gen_split_tasks(spec: &TaskSequenceSpec) -> Result<SplitTasks> {
    spec.validate()?;
    let total = spec.base_classes + spec.union_classes();
    let draws = par::map_range(total, |c| draw_class(spec, c));

    let mut base_train = Dataset::new(spec.feature_dim);
    let mut base_test = Dataset::new(spec.feature_dim);
    for c in 0..spec.base_classes {
        append_class(&mut base_train, &mut base_test, &draws[c], c, spec);
    }

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let (lo, hi) = spec.class_range(t);
        let mut train = Dataset::new(spec.feature_dim);
        let mut test = Dataset::new(spec.feature_dim);
        for j in 0..spec.classes_per_task {
            let generator_class = spec.base_classes + lo + j;
            append_class(&mut train, &mut test, &draws[generator_class], lo + j, spec);
        }
        tasks.push(TaskData { task_id: t, class_lo: lo, class_hi: hi, train, test });
    }
    Ok(SplitTasks { base_train, base_test, tasks })
}

fn append_class(train: &mut Dataset, test: &mut Dataset, draw: &ClassDraw, label: usize, spec: &TaskSequenceSpec) {
    let d = spec.feature_dim;
    for i in 0..spec.train_per_class {
        train.push(&draw.train[i * d..(i + 1) * d], label);
    }
    for i in 0..spec.test_per_class {
        test.push(&draw.test[i * d..(i + 1) * d], label);
    }
}

// ── File ingestion ──────────────────────────────────────────────────────────

/// Loads an IDX image/label file pair (the classic big-endian format with a
/// `[0, 0, dtype, ndims]` magic). Pixel bytes are scaled into `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_file(images_path)?;
    let labels = read_idx_file(labels_path)?;
    if labels.dims.len() != 1 {
        return Err(parse_err(labels_path, 3, format!("label file must be 1-D, got {} dims", labels.dims.len())));
    }
    if images.dims.is_empty() {
        return Err(parse_err(images_path, 3, "image file needs at least one dimension".into()));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(parse_err(
            labels_path,
            4,
            format!("label count {} does not match image count {}", labels.dims[0], n),
        ));
    }
    let feature_dim: usize = images.dims[1..].iter().product::<usize>().max(1);
    let mut out = Dataset::new(feature_dim);
    let mut row = vec![0.0; feature_dim];
    for i in 0..n {
        for j in 0..feature_dim {
            row[j] = images.payload[i * feature_dim + j] as f64 / 255.0;
        }
        out.push(&row, labels.payload[i] as usize);
    }
    Ok(out)
}

#[derive(Debug)]
struct IdxFile {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx_file(path: &Path) -> Result<IdxFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(parse_err(path, bytes.len() as u64, "file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(path, 0, format!("bad magic prefix {:#04x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(path, 2, format!("unsupported dtype {:#04x} (only unsigned byte 0x08)", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 || ndims > 4 {
        return Err(parse_err(path, 3, format!("implausible dimension count {ndims}")));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(parse_err(path, bytes.len() as u64, "file ends inside the dimension header".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        dims.push(v as usize);
    }
    let expected: usize = dims.iter().product();
    let payload = bytes[header_len..].to_vec();
    if payload.len() != expected {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("payload has {} bytes, dims {:?} require {}", payload.len(), dims, expected),
        ));
    }
    Ok(IdxFile { dims, payload })
}

/// Loads a `label,f0,f1,...` CSV. Features are scaled into `[0, 1]` by the
/// file-wide min and max; labels are remapped onto `0..k` in sorted order.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = line_offsets(&text);
    let (header_off, header) = match lines.next() {
        Some(x) => x,
        None => return Err(parse_err(path, 0, "empty file".into())),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first().map(|c| c.trim()) != Some("label") {
        return Err(parse_err(path, header_off, "header must start with a 'label' column".into()));
    }
    let feature_dim = cols.len() - 1;
    if feature_dim == 0 {
        return Err(parse_err(path, header_off, "no feature columns".into()));
    }

    let mut raw_labels: Vec<i64> = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    for (line_off, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut field_off = line_off;
        let mut fields = Vec::with_capacity(feature_dim + 1);
        for field in line.split(',') {
            fields.push((field_off, field));
            field_off += field.len() as u64 + 1;
        }
        if fields.len() != feature_dim + 1 {
            return Err(parse_err(
                path,
                line_off,
                format!("expected {} fields, got {}", feature_dim + 1, fields.len()),
            ));
        }
        let (label_off, label_txt) = fields[0];
        let label: i64 = label_txt.trim().parse().map_err(|_| {
            parse_err(path, label_off, format!("bad label '{}'", label_txt.trim()))
        })?;
        raw_labels.push(label);
        for &(off, txt) in &fields[1..] {
            let v: f64 = txt.trim().parse().map_err(|_| {
                parse_err(path, off, format!("bad feature value '{}'", txt.trim()))
            })?;
            features.push(v);
        }
    }

    // Remap labels onto 0..k preserving the sorted order of distinct values.
    let mut distinct = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let remap = |l: i64| distinct.binary_search(&l).unwrap();

    // Scale features into [0, 1] by the file-wide range.
    let lo = features.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = features.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = Dataset::new(feature_dim);
    let mut row = vec![0.0; feature_dim];
    for (i, &label) in raw_labels.iter().enumerate() {
        for j in 0..feature_dim {
            let v = features[i * feature_dim + j];
            row[j] = if span > 0.0 { (v - lo) / span } else { 0.0 };
        }
        out.push(&row, remap(label));
    }
    Ok(out)
}

/// Iterates `(byte_offset, line)` pairs over a text buffer.
fn line_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split('\n').map(move |line| {
        let here = offset;
        offset += line.len() as u64 + 1;
        (here, line.trim_end_matches('\r'))
    })
}

fn parse_err(path: &Path, offset: u64, message: String) -> Error {
    Error::Parse { path: path.display().to_string(), offset, message }
}
