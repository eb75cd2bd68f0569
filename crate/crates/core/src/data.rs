//! Class-incremental datasets, task splits, the single-pass training stream and
//! two-view augmentation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CvtError, Result};
use crate::tensor::Tensor;

/// Which dataset to build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetName {
    /// Ten procedurally generated 3x16x16 shape/texture classes.
    Synthetic10,
    /// `root/<class_name>/<file>.png`, downsampled to 16x16 RGB.
    ImageFolder(PathBuf),
}

impl FromStr for DatasetName {
    type Err = CvtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-10" => Ok(Self::Synthetic10),
            _ => match s.strip_prefix("folder:") {
                Some(path) if !path.is_empty() => Ok(Self::ImageFolder(PathBuf::from(path))),
                _ => Err(CvtError::Config(format!(
                    "unknown dataset {s:?} (expected \"synthetic-10\" or \"folder:<path>\")"
                ))),
            },
        }
    }
}

impl TryFrom<String> for DatasetName {
    type Error = CvtError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetName> for String {
    fn from(d: DatasetName) -> String {
        d.to_string()
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic10 => f.write_str("synthetic-10"),
            Self::ImageFolder(p) => write!(f, "folder:{}", p.display()),
        }
    }
}

/// A batch of 8-bit images stored channel-major (`C x H x W` per image).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: Vec::new(),
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len().checked_div(self.image_len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[u8]) {
        assert_eq!(image.len(), self.image_len(), "image size mismatch");
        self.pixels.extend_from_slice(image);
    }

    /// Overwrites image `i`.
    pub fn set(&mut self, i: usize, image: &[u8]) {
        let n = self.image_len();
        assert_eq!(image.len(), n, "image size mismatch");
        self.pixels[i * n..(i + 1) * n].copy_from_slice(image);
    }

    pub fn extend(&mut self, other: &ImageBatch) {
        assert_eq!(other.image_len(), self.image_len(), "image size mismatch");
        self.pixels.extend_from_slice(&other.pixels);
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `[n, C, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::from_vec(&[self.len(), self.channels, self.height, self.width], data)
            .expect("pixel count matches shape")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: DatasetName,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Size knobs for the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_per_class: 500,
            test_per_class: 100,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_CLASSES: [&str; 10] = [
    "disk", "frame", "cross", "hstripes", "vstripes", "diagonal", "checker", "ring", "triangle",
    "dots",
];

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load(name: &DatasetName, synthetic: SyntheticSpec) -> Result<Self> {
        match name {
            DatasetName::Synthetic10 => Ok(Self::synthetic10(synthetic)),
            DatasetName::ImageFolder(root) => Self::from_image_folder(root, 16, 0.2, synthetic.seed),
        }
    }

    pub fn synthetic10(spec: SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut train = Vec::with_capacity(10 * spec.train_per_class);
        let mut test = Vec::with_capacity(10 * spec.test_per_class);
        for class in 0..10 {
            for _ in 0..spec.train_per_class {
                train.push(Sample {
                    image: render_synthetic(class, &mut rng),
                    label: class,
                });
            }
            for _ in 0..spec.test_per_class {
                test.push(Sample {
                    image: render_synthetic(class, &mut rng),
                    label: class,
                });
            }
        }
        Self {
            name: DatasetName::Synthetic10,
            class_names: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
            channels: 3,
            height: SYNTH_SIZE,
            width: SYNTH_SIZE,
            train,
            test,
        }
    }

    /// Loads `root/<class>/*.png`, resizing to `size x size` RGB. Classes and
    /// files are taken in lexicographic order; a seeded `test_fraction` of each
    /// class is held out.
    pub fn from_image_folder(root: &Path, size: usize, test_fraction: f64, seed: u64) -> Result<Self> {
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(CvtError::Config(format!("no class folders under {}", root.display())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test, mut class_names) = (Vec::new(), Vec::new(), Vec::new());
        for (label, dir) in class_dirs.iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CvtError::Config(format!("class folder {} has no png files", dir.display())));
            }
            let mut samples = Vec::with_capacity(files.len());
            for f in &files {
                let img = image::open(f)?
                    .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
                    .to_rgb8();
                let mut chw = vec![0u8; 3 * size * size];
                for (x, y, px) in img.enumerate_pixels() {
                    for c in 0..3 {
                        chw[(c * size + y as usize) * size + x as usize] = px.0[c];
                    }
                }
                samples.push(Sample { image: chw, label });
            }
            samples.shuffle(&mut rng);
            let n_test = ((samples.len() as f64) * test_fraction).round() as usize;
            test.extend(samples.drain(..n_test.min(samples.len())));
            train.extend(samples);
            class_names.push(
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Ok(Self {
            name: DatasetName::ImageFolder(root.to_path_buf()),
            class_names,
            channels: 3,
            height: size,
            width: size,
            train,
            test,
        })
    }

    /// Test samples belonging to `task`.
    pub fn test_set(&self, task: &TaskSpec) -> (ImageBatch, Vec<usize>) {
        let mut images = ImageBatch::new(self.channels, self.height, self.width);
        let mut labels = Vec::new();
        for s in self.test.iter().filter(|s| task.class_ids.contains(&s.label)) {
            images.push(&s.image);
            labels.push(s.label);
        }
        (images, labels)
    }
}

const SYNTH_SIZE: usize = 16;

/// Draws one image of `class`: the class fixes the shape/texture signature;
/// position, scale, colours, texture phase and pixel noise vary per sample.
fn render_synthetic(class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = SYNTH_SIZE as f64;
    let cx = s / 2.0 - 0.5 + rng.random_range(-2.5..2.5);
    let cy = s / 2.0 - 0.5 + rng.random_range(-2.5..2.5);
    let radius = rng.random_range(4.0..6.0);
    let phase = rng.random_range(0.0..4.0);
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let noise = Normal::new(0.0, 0.06).expect("valid std");

    let mut out = vec![0u8; 3 * SYNTH_SIZE * SYNTH_SIZE];
    for y in 0..SYNTH_SIZE {
        for x in 0..SYNTH_SIZE {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let inside_disk = r <= radius;
            let coverage = match class {
                0 => f64::from(inside_disk),
                1 => {
                    let m = dx.abs().max(dy.abs());
                    f64::from(m <= radius && m >= radius - 1.5)
                }
                2 => f64::from((dx.abs() <= 1.0 || dy.abs() <= 1.0) && dx.abs().max(dy.abs()) <= radius),
                3 => f64::from(inside_disk && ((y as f64 + phase) % 4.0) < 2.0),
                4 => f64::from(inside_disk && ((x as f64 + phase) % 4.0) < 2.0),
                5 => f64::from(inside_disk && ((x as f64 + y as f64 + phase) % 4.0) < 2.0),
                6 => {
                    let a = ((x as f64 + phase) / 2.0).floor() as i64;
                    let b = ((y as f64 + phase) / 2.0).floor() as i64;
                    f64::from(inside_disk && (a + b).rem_euclid(2) == 0)
                }
                7 => f64::from(r <= radius && r >= radius - 1.6),
                8 => {
                    // upward triangle: apex at top, base at bottom
                    let t = (dy + radius) / (2.0 * radius);
                    f64::from((0.0..=1.0).contains(&t) && dx.abs() <= t * radius)
                }
                _ => {
                    let off = radius * 0.55;
                    let d1 = ((dx - off).powi(2) + (dy - off).powi(2)).sqrt();
                    let d2 = ((dx + off).powi(2) + (dy + off).powi(2)).sqrt();
                    f64::from(d1 <= 1.8 || d2 <= 1.8)
                }
            };
            for c in 0..3 {
                let v = bg[c] + coverage * (fg[c] - bg[c]) + noise.sample(rng);
                out[(c * SYNTH_SIZE + y) * SYNTH_SIZE + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// One task of a class-incremental split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// 1-based task index.
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

/// Partitions the dataset's classes into `num_tasks` equal tasks using a
/// seeded permutation of the class ids.
pub fn make_task_splits(dataset: &Dataset, num_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let c = dataset.num_classes();
    if num_tasks == 0 || !c.is_multiple_of(num_tasks) {
        return Err(CvtError::Config(format!(
            "{num_tasks} tasks do not evenly divide {c} classes"
        )));
    }
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per_task = c / num_tasks;
    let count = |set: &[Sample], class: usize| set.iter().filter(|s| s.label == class).count();
    Ok(classes
        .chunks(per_task)
        .enumerate()
        .map(|(t, ids)| TaskSpec {
            task_id: t + 1,
            class_ids: ids.to_vec(),
            train_counts: ids.iter().map(|&k| count(&dataset.train, k)).collect(),
            test_counts: ids.iter().map(|&k| count(&dataset.test, k)).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task_id: usize,
    pub classes: Vec<usize>,
}

/// JSON form of a split: `{"tasks":[{"task_id":1,"classes":[...]},...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub tasks: Vec<ManifestTask>,
}

impl SplitManifest {
    pub fn from_split(split: &[TaskSpec]) -> Self {
        Self {
            tasks: split
                .iter()
                .map(|t| ManifestTask {
                    task_id: t.task_id,
                    classes: t.class_ids.clone(),
                })
                .collect(),
        }
    }
}

/// A labeled mini-batch from the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub task_id: usize,
    /// Indices into the dataset's training set.
    pub sample_ids: Vec<usize>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Single-pass iterator over the training stream: tasks in order, each task's
/// samples shuffled once and emitted in batches (the last one possibly short).
#[derive(Debug, Clone)]
pub struct Stream<'a> {
    dataset: &'a Dataset,
    plan: Vec<(usize, Vec<usize>)>,
    cursor: usize,
}

pub fn stream_batches<'a>(
    dataset: &'a Dataset,
    split: &[TaskSpec],
    batch_size: usize,
    seed: u64,
) -> Result<Stream<'a>> {
    if split.is_empty() {
        return Err(CvtError::Config("empty task split".into()));
    }
    if batch_size == 0 {
        return Err(CvtError::Config("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::new();
    for task in split {
        let mut ids: Vec<usize> = dataset
            .train
            .iter()
            .enumerate()
            .filter(|(_, s)| task.class_ids.contains(&s.label))
            .map(|(i, _)| i)
            .collect();
        ids.shuffle(&mut rng);
        plan.extend(ids.chunks(batch_size).map(|c| (task.task_id, c.to_vec())));
    }
    Ok(Stream {
        dataset,
        plan,
        cursor: 0,
    })
}

impl Stream<'_> {
    /// Total number of batches over the whole stream.
    pub fn num_batches(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for Stream<'_> {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        let (task_id, ids) = self.plan.get(self.cursor)?;
        self.cursor += 1;
        let d = self.dataset;
        let mut images = ImageBatch::new(d.channels, d.height, d.width);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            images.push(&d.train[i].image);
            labels.push(d.train[i].label);
        }
        Some(StreamBatch {
            images,
            labels,
            task_id: *task_id,
            sample_ids: ids.clone(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.plan.len() - self.cursor;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for Stream<'_> {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Reflect padding before the random crop back to the original size.
    pub crop_pad: usize,
    pub flip_prob: f64,
    /// Standard deviation of additive Gaussian pixel jitter.
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_pad: 2,
            flip_prob: 0.5,
            jitter_std: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Zero-strength augmentation: both views equal the source.
    pub fn identity() -> Self {
        Self {
            crop_pad: 0,
            flip_prob: 0.0,
            jitter_std: 0.0,
        }
    }
}

/// Two augmented views per source image, interleaved: rows `2k` and `2k+1`
/// are views of source `k` and carry its label.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    /// `[2b, C, H, W]`, values in `[0, 1]`.
    pub views: Tensor,
    pub labels: Vec<usize>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

pub fn augment_two_views(
    images: &ImageBatch,
    labels: &[usize],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    if images.is_empty() {
        return Err(CvtError::Empty("nothing to augment".into()));
    }
    if images.len() != labels.len() {
        return Err(CvtError::Shape(format!(
            "{} images for {} labels",
            images.len(),
            labels.len()
        )));
    }
    let (c, h, w) = (images.channels, images.height, images.width);
    let per = c * h * w;
    let mut views = Vec::with_capacity(2 * images.len() * per);
    let mut out_labels = Vec::with_capacity(2 * labels.len());
    let jitter = (cfg.jitter_std > 0.0)
        .then(|| Normal::new(0.0, cfg.jitter_std))
        .transpose()
        .map_err(|e| CvtError::Config(format!("jitter: {e}")))?;
    let pad = cfg.crop_pad as isize;
    for (k, &label) in labels.iter().enumerate() {
        let src = images.image(k);
        for _ in 0..2 {
            let oy = rng.random_range(0..=2 * pad as i64) as isize - pad;
            let ox = rng.random_range(0..=2 * pad as i64) as isize - pad;
            let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
            for ch in 0..c {
                for y in 0..h {
                    let sy = reflect(y as isize + oy, h);
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = reflect(xx as isize + ox, w);
                        let mut v = f64::from(src[(ch * h + sy) * w + sx]) / 255.0;
                        if let Some(j) = &jitter {
                            v = (v + j.sample(rng)).clamp(0.0, 1.0);
                        }
                        views.push(v);
                    }
                }
            }
            out_labels.push(label);
        }
    }
    Ok(AugmentedPair {
        views: Tensor::from_vec(&[2 * labels.len(), c, h, w], views)?,
        labels: out_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::synthetic10(SyntheticSpec {
            train_per_class: 50,
            test_per_class: 5,
            seed: 3,
        })
    }

    #[test]
    fn dataset_names_parse() {
        assert_eq!("synthetic-10".parse::<DatasetName>().unwrap(), DatasetName::Synthetic10);
        assert!(matches!("folder:/tmp/x".parse::<DatasetName>().unwrap(), DatasetName::ImageFolder(_)));
        assert!(matches!("cifar100".parse::<DatasetName>(), Err(CvtError::Config(_))));
    }

    #[test]
    fn splits_partition_classes() {
        let d = small();
        let split = make_task_splits(&d, 5, 0).unwrap();
        assert_eq!(split.len(), 5);
        let mut all: Vec<usize> = split.iter().flat_map(|t| t.class_ids.clone()).collect();
        assert!(split.iter().all(|t| t.class_ids.len() == 2));
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split, make_task_splits(&d, 5, 0).unwrap());
        assert!(split.iter().all(|t| t.train_counts == vec![50, 50]));

        let joint = make_task_splits(&d, 1, 0).unwrap();
        assert_eq!(joint.len(), 1);
        assert_eq!(joint[0].class_ids.len(), 10);

        assert!(matches!(make_task_splits(&d, 3, 0), Err(CvtError::Config(_))));
    }

    #[test]
    fn manifest_json_layout() {
        let d = small();
        let split = make_task_splits(&d, 5, 0).unwrap();
        let json = serde_json::to_value(SplitManifest::from_split(&split)).unwrap();
        assert_eq!(json["tasks"][0]["task_id"], 1);
        assert_eq!(json["tasks"].as_array().unwrap().len(), 5);
        assert_eq!(json["tasks"][4]["classes"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn stream_counts_and_order() {
        let d = small();
        let split = make_task_splits(&d, 5, 0).unwrap();
        let batches: Vec<_> = stream_batches(&d, &split, 10, 1).unwrap().collect();
        assert_eq!(batches.len(), 50);
        for (t, chunk) in batches.chunks(10).enumerate() {
            assert!(chunk.iter().all(|b| b.task_id == t + 1 && b.len() == 10));
            for b in chunk {
                assert!(b.labels.iter().all(|l| split[t].class_ids.contains(l)));
            }
        }
    }

    #[test]
    fn final_partial_batch_is_kept() {
        let d = small();
        let split = make_task_splits(&d, 5, 0).unwrap();
        let batches: Vec<_> = stream_batches(&d, &split, 30, 1).unwrap().collect();
        // 100 samples per task -> 30, 30, 30, 10
        assert_eq!(batches.len(), 20);
        assert_eq!(batches[3].len(), 10);
        assert_eq!(batches[4].task_id, 2);
    }

    #[test]
    fn stream_rejects_bad_config() {
        let d = small();
        assert!(stream_batches(&d, &[], 10, 0).is_err());
        let split = make_task_splits(&d, 5, 0).unwrap();
        assert!(stream_batches(&d, &split, 0, 0).is_err());
    }

    #[test]
    fn two_views_shape_and_labels() {
        let d = small();
        let split = make_task_splits(&d, 5, 0).unwrap();
        let b = stream_batches(&d, &split, 10, 1).unwrap().next().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pair = augment_two_views(&b.images, &b.labels, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(pair.views.shape(), &[20, 3, 16, 16]);
        for k in 0..10 {
            assert_eq!(pair.labels[2 * k], b.labels[k]);
            assert_eq!(pair.labels[2 * k + 1], b.labels[k]);
        }
        assert!(pair.views.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_strength_views_equal_source() {
        let d = small();
        let mut images = ImageBatch::new(3, 16, 16);
        images.push(&d.train[0].image);
        images.push(&d.train[1].image);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = augment_two_views(&images, &[0, 0], &AugmentConfig::identity(), &mut rng).unwrap();
        let src = images.to_tensor();
        for k in 0..2 {
            assert_eq!(pair.views.row(2 * k), src.row(k));
            assert_eq!(pair.views.row(2 * k + 1), src.row(k));
        }
    }

    #[test]
    fn empty_augmentation_input_errors() {
        let images = ImageBatch::new(3, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_two_views(&images, &[], &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }
}
