//! Synthetic task streams with controllable similarity, confusability,
//! difficulty, and drift, plus the rehearsal buffer.
//!
//! Every generator is a pure function of its spec: the same `(kind, params,
//! seed)` regenerates byte-identical datasets, and the train/val/test splits
//! use disjoint derived seeds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// One labeled sample at the stream's feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled dataset as a dense batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix<f64>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], classes: usize) -> Self {
        let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        Self {
            x: Matrix::from_rows(&rows),
            y: samples.iter().map(|s| s.label).collect(),
            classes,
        }
    }

    pub fn to_samples(&self) -> Vec<Sample> {
        (0..self.len())
            .map(|i| Sample {
                features: self.x.row(i).to_vec(),
                label: self.y[i],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Gaussian blobs on a circle of radius `separation` in the leading
    /// two dimensions. Linearly separable at reasonable noise.
    Blobs,
    /// Concentric rings: class `c` lives at radius `(c+1)·separation`.
    /// Not linearly separable; the graded-difficulty workhorse.
    Ring,
    /// 16×16 rasterized strokes and simple shapes (width must be 256).
    Shapes,
}

fn default_sizes() -> (usize, usize, usize) {
    (600, 200, 200)
}
fn default_train() -> usize {
    default_sizes().0
}
fn default_val() -> usize {
    default_sizes().1
}
fn default_test() -> usize {
    default_sizes().2
}

/// Everything needed to regenerate one task bit-exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub kind: GeneratorKind,
    /// Stream feature width; generator output is zero-padded to it.
    pub width: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    /// First of the two feature dimensions the generator writes into;
    /// lets streams place tasks in orthogonal subspaces.
    #[serde(default)]
    pub plane: usize,
    /// Rotation of the generator plane, radians. Drift adds to it.
    #[serde(default)]
    pub rotation: f64,
    /// Translation applied to the leading dimensions.
    #[serde(default)]
    pub shift: Vec<f64>,
    /// Cyclic relabeling `c → (c + label_shift) mod classes`; magnitude-1
    /// drift sets it.
    #[serde(default)]
    pub label_shift: usize,
    #[serde(default)]
    pub difficulty: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_train")]
    pub train_n: usize,
    #[serde(default = "default_val")]
    pub val_n: usize,
    #[serde(default = "default_test")]
    pub test_n: usize,
}

impl TaskSpec {
    pub fn blobs(id: u32, width: usize, classes: usize, separation: f64, noise: f64, seed: u64) -> Self {
        Self {
            id,
            kind: GeneratorKind::Blobs,
            width,
            classes,
            separation,
            noise,
            plane: 0,
            rotation: 0.0,
            shift: Vec::new(),
            label_shift: 0,
            difficulty: None,
            seed,
            train_n: default_train(),
            val_n: default_val(),
            test_n: default_test(),
        }
    }

    pub fn ring(id: u32, width: usize, classes: usize, separation: f64, noise: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Ring,
            ..Self::blobs(id, width, classes, separation, noise, seed)
        }
    }

    pub fn shapes(id: u32, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Shapes,
            width: 256,
            separation: 1.0,
            ..Self::blobs(id, 256, classes, 1.0, noise, seed)
        }
    }

    pub fn with_sizes(mut self, train: usize, val: usize, test: usize) -> Self {
        self.train_n = train;
        self.val_n = val;
        self.test_n = test;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.separation <= 0.0 {
            return Err(Error::Config(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        match self.kind {
            GeneratorKind::Blobs | GeneratorKind::Ring => {
                if self.width < self.plane + 2 {
                    return Err(Error::Config(format!(
                        "blob/ring tasks need width ≥ {} for plane {}",
                        self.plane + 2,
                        self.plane
                    )));
                }
            }
            GeneratorKind::Shapes => {
                if self.width != 256 {
                    return Err(Error::Config("shape tasks use a 16×16 raster (width 256)".into()));
                }
                if self.classes > 5 {
                    return Err(Error::Config("shape tasks support at most 5 classes".into()));
                }
            }
        }
        if self.train_n == 0 || self.val_n == 0 || self.test_n == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gen_split(spec: &TaskSpec, n: usize, split_tag: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, split_tag));
    // Uniform class priors: round-robin then shuffle.
    let mut classes: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    classes.shuffle(&mut rng);

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for &c in &classes {
        let mut f = vec![0.0; spec.width];
        match spec.kind {
            GeneratorKind::Blobs => {
                let angle = spec.rotation
                    + std::f64::consts::TAU * c as f64 / spec.classes as f64;
                f[spec.plane] = spec.separation * angle.cos() + spec.noise * gaussian(&mut rng);
                f[spec.plane + 1] = spec.separation * angle.sin() + spec.noise * gaussian(&mut rng);
            }
            GeneratorKind::Ring => {
                let radius = spec.separation * (c + 1) as f64 + spec.noise * gaussian(&mut rng);
                let angle = std::f64::consts::TAU * rng.random::<f64>();
                f[spec.plane] = radius * angle.cos();
                f[spec.plane + 1] = radius * angle.sin();
            }
            GeneratorKind::Shapes => {
                draw_shape(&mut f, c, spec.rotation, &mut rng);
                for v in f.iter_mut() {
                    *v += spec.noise * gaussian(&mut rng);
                }
            }
        }
        for (d, s) in spec.shift.iter().enumerate() {
            if d < spec.width {
                f[d] += *s;
            }
        }
        rows.push(f);
        labels.push((c + spec.label_shift) % spec.classes);
    }
    Dataset {
        x: Matrix::from_rows(&rows),
        y: labels,
        classes: spec.classes,
    }
}

/// Rasterize a 16×16 stroke/shape for class `c` with positional jitter.
fn draw_shape(f: &mut [f64], c: usize, rotation: f64, rng: &mut ChaCha8Rng) {
    let side = 16usize;
    let jitter = rng.random_range(0..6) as i32 - 2;
    // Drift rotates strokes by shifting their anchor rows/cols.
    let extra = ((rotation * 4.0) as i32) % 8;
    let at = |r: i32, cx: i32| -> Option<usize> {
        if (0..side as i32).contains(&r) && (0..side as i32).contains(&cx) {
            Some(r as usize * side + cx as usize)
        } else {
            None
        }
    };
    let base = 5 + jitter + extra;
    match c {
        0 => {
            for x in 2..14 {
                if let Some(i) = at(base, x) {
                    f[i] = 1.0;
                }
            }
        }
        1 => {
            for y in 2..14 {
                if let Some(i) = at(y, base) {
                    f[i] = 1.0;
                }
            }
        }
        2 => {
            for d in 1..15 {
                if let Some(i) = at(d, (d + jitter + extra).clamp(0, 15)) {
                    f[i] = 1.0;
                }
            }
        }
        3 => {
            let (lo, hi) = ((3 + jitter).clamp(0, 6), (12 + jitter).clamp(9, 15));
            for x in lo..=hi {
                for &y in &[lo, hi] {
                    if let Some(i) = at(y, x) {
                        f[i] = 1.0;
                    }
                    if let Some(i) = at(x, y) {
                        f[i] = 1.0;
                    }
                }
            }
        }
        _ => {
            let (lo, hi) = ((5 + jitter).clamp(0, 7), (10 + jitter).clamp(8, 15));
            for y in lo..=hi {
                for x in lo..=hi {
                    if let Some(i) = at(y, x) {
                        f[i] = 1.0;
                    }
                }
            }
        }
    }
}

/// Deterministically generate the task's train/val/test splits.
pub fn gen_task(spec: &TaskSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        gen_split(spec, spec.train_n, 1),
        gen_split(spec, spec.val_n, 2),
        gen_split(spec, spec.test_n, 3),
    ))
}

/// Derive a task whose class manifolds overlap the base's by an amount
/// increasing in `perturbation`.
///
/// The variant displaces every class mean along a dimension the base never
/// uses, by `(1 − perturbation) · 2.5 · separation`. Near 1 the manifolds
/// coincide (maximal confusion); near 0 the variant sits far away and a
/// base-trained model scores it at chance.
pub fn gen_confusable_variant(base: &TaskSpec, new_id: u32, perturbation: f64) -> Result<TaskSpec> {
    if !(perturbation > 0.0 && perturbation < 1.0) {
        return Err(Error::Config(format!(
            "perturbation must be in (0, 1), got {perturbation}"
        )));
    }
    if base.width < 3 {
        return Err(Error::Config("confusable variants need width ≥ 3".into()));
    }
    let offset = (1.0 - perturbation) * 2.5 * base.separation;
    let mut shift = base.shift.clone();
    shift.resize(3.max(shift.len()), 0.0);
    shift[2] += offset;
    Ok(TaskSpec {
        id: new_id,
        shift,
        seed: seed::derive(base.seed, 0xC0F0 + (perturbation * 1000.0) as u64),
        difficulty: None,
        ..base.clone()
    })
}

/// Concept drift: rotate and translate the class manifolds proportionally to
/// `magnitude`; magnitude 1 additionally remaps labels (worst case).
/// Magnitude 0 is the identity.
pub fn apply_drift(spec: &TaskSpec, magnitude: f64) -> TaskSpec {
    assert!((0.0..=1.0).contains(&magnitude), "drift magnitude must be in [0, 1]");
    if magnitude == 0.0 {
        return spec.clone();
    }
    let mut out = spec.clone();
    out.rotation += magnitude * std::f64::consts::FRAC_PI_2;
    let dx = magnitude * 1.5 * spec.separation * std::f64::consts::FRAC_1_SQRT_2;
    out.shift.resize(2.max(out.shift.len()), 0.0);
    out.shift[0] += dx;
    out.shift[1] += dx;
    if magnitude >= 1.0 {
        out.label_shift += 1;
    }
    out.seed = seed::derive(spec.seed, 0xD21F + (magnitude * 1000.0) as u64);
    out
}

/// Bounded per-task sample store: a classical uniform reservoir.
/// After `n ≥ K` arrivals each seen item is retained with probability `K/n`.
#[derive(Debug, Clone)]
pub struct RehearsalBuffer<T> {
    capacity: usize,
    seen: u64,
    items: Vec<T>,
    rng: ChaCha8Rng,
}

impl<T: Clone> RehearsalBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Algorithm R.
    pub fn update(&mut self, incoming: impl IntoIterator<Item = T>) {
        for item in incoming {
            self.seen += 1;
            if self.items.len() < self.capacity {
                self.items.push(item);
            } else if self.capacity > 0 {
                let j = self.rng.random_range(0..self.seen);
                if (j as usize) < self.capacity {
                    self.items[j as usize] = item;
                }
            }
        }
    }

    /// Uniform down-sample to a smaller capacity (graceful-forgetting
    /// method 3). Keeps stream order among survivors.
    pub fn shrink(&mut self, new_capacity: usize) {
        if new_capacity < self.items.len() {
            let mut idx: Vec<usize> = (0..self.items.len()).collect();
            idx.shuffle(&mut self.rng);
            let mut keep: Vec<usize> = idx[..new_capacity].to_vec();
            keep.sort_unstable();
            self.items = keep.iter().map(|&i| self.items[i].clone()).collect();
        }
        self.capacity = new_capacity;
    }

    pub(crate) fn persist_parts(&self) -> (usize, u64, &[T], [u8; 32], u128) {
        (
            self.capacity,
            self.seen,
            &self.items,
            self.rng.get_seed(),
            self.rng.get_word_pos(),
        )
    }

    pub(crate) fn from_persist_parts(
        capacity: usize,
        seen: u64,
        items: Vec<T>,
        rng_seed: [u8; 32],
        word_pos: u128,
    ) -> Self {
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_word_pos(word_pos);
        Self {
            capacity,
            seen,
            items,
            rng,
        }
    }
}

/// Serialize a dataset as CSV with header `f0..fd,label`.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    let d = ds.width();
    for i in 0..d {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label\n");
    for r in 0..ds.len() {
        for v in ds.x.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.y[r]));
    }
    out
}

/// Parse the CSV format written by [`dataset_to_csv`].
pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty csv".into()))?;
    let cols = header.split(',').count();
    if cols < 2 || !header.ends_with("label") {
        return Err(Error::Data("csv header must be f0..fd,label".into()));
    }
    let width = cols - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Data(format!("row {} has {} fields, expected {cols}", ln + 2, fields.len())));
        }
        let mut f = Vec::with_capacity(width);
        for v in &fields[..width] {
            f.push(
                v.parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {}: {e}", ln + 2)))?,
            );
        }
        labels.push(
            fields[width]
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("row {}: {e}", ln + 2)))?,
        );
        rows.push(f);
    }
    if rows.is_empty() {
        return Err(Error::Data("csv has no data rows".into()));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(Dataset {
        x: Matrix::from_rows(&rows),
        y: labels,
        classes,
    })
}
