//! Synthetic few-shot classification tasks.
//!
//! Every class has a Gaussian prototype drawn from one master seed. An
//! episode picks `m` classes from one split, optionally rotates the whole
//! input space by a task-specific random orthogonal matrix, and draws `k`
//! support and `q` target samples per class around the prototypes.
//!
//! Episode randomness is keyed by `(master_seed, split, epoch, index)`
//! rather than drawn from a shared stream, so episodes can be generated in
//! any order (or in parallel) with identical results.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Shape, Tensor};
use crate::model::LabeledBatch;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("{requested}-way task requested but the {split:?} split has {available} classes")]
    TooFewClasses { split: Split, requested: usize, available: usize },
    #[error("shots and targets per class must be >= 1 (k={k}, q={q})")]
    EmptyShots { k: usize, q: usize },
    #[error("invalid task distribution: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Test => 0x7465_7374,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistributionConfig {
    pub input_dim: usize,
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub rotate_per_task: bool,
    pub master_seed: u64,
}

impl Default for TaskDistributionConfig {
    fn default() -> Self {
        Self {
            input_dim: 20,
            n_train_classes: 64,
            n_test_classes: 24,
            prototype_scale: 1.0,
            noise_scale: 0.5,
            rotate_per_task: true,
            master_seed: 0,
        }
    }
}

/// Where an episode sits in the sampling stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath {
    pub epoch: u64,
    pub index: u64,
}

impl SeedPath {
    pub fn new(epoch: u64, index: u64) -> Self {
        Self { epoch, index }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a path of counters into a stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6d65_7461_6c61_6e64, |h, &p| mix(h ^ mix(p)))
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPool {
    config: TaskDistributionConfig,
    prototypes: Vec<Vec<f64>>,
}

/// Draws all class prototypes from `config.master_seed`.
pub fn build_pool(config: &TaskDistributionConfig) -> Result<ClassPool, TaskError> {
    if config.input_dim == 0 {
        return Err(TaskError::InvalidConfig("input_dim must be positive".into()));
    }
    if !(config.prototype_scale >= 0.0 && config.noise_scale >= 0.0) {
        return Err(TaskError::InvalidConfig("scales must be non-negative".into()));
    }
    let mut rng = rng_for(&[config.master_seed, 0x706f_6f6c]);
    let dist = Normal::new(0.0, config.prototype_scale)
        .map_err(|e| TaskError::InvalidConfig(e.to_string()))?;
    let total = config.n_train_classes + config.n_test_classes;
    let prototypes = (0..total)
        .map(|_| (0..config.input_dim).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    Ok(ClassPool { config: config.clone(), prototypes })
}

impl ClassPool {
    pub fn config(&self) -> &TaskDistributionConfig {
        &self.config
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    /// Global class indices belonging to `split`; the two ranges are disjoint.
    pub fn classes(&self, split: Split) -> std::ops::Range<usize> {
        let n = self.config.n_train_classes;
        match split {
            Split::Train => 0..n,
            Split::Test => n..n + self.config.n_test_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub split: Split,
    pub path: SeedPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: TaskId,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_target: usize,
    /// Global class index behind each episode label.
    pub classes: Vec<usize>,
    pub support: LabeledBatch,
    pub target: LabeledBatch,
}

/// Haar-random orthogonal matrix (row-major) by Gram-Schmidt on a Gaussian
/// matrix.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(q) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    let mut m = vec![0.0; dim * dim];
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m[r * dim + c] = x;
        }
    }
    m
}

fn rotate(matrix: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|r| matrix[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// The task transform used for episodes at `(split, path)`, if rotation is on.
pub fn task_rotation(pool: &ClassPool, split: Split, path: SeedPath) -> Option<Vec<f64>> {
    pool.config.rotate_per_task.then(|| {
        let mut rng = rng_for(&[pool.config.master_seed, split.tag(), path.epoch, path.index, 0x726f74]);
        random_orthogonal(pool.config.input_dim, &mut rng)
    })
}

pub fn sample_task(
    pool: &ClassPool,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q_target: usize,
    path: SeedPath,
) -> Result<Episode, TaskError> {
    if k_shot == 0 || q_target == 0 {
        return Err(TaskError::EmptyShots { k: k_shot, q: q_target });
    }
    let range = pool.classes(split);
    if n_way > range.len() || n_way == 0 {
        return Err(TaskError::TooFewClasses { split, requested: n_way, available: range.len() });
    }
    let cfg = &pool.config;
    let mut rng = rng_for(&[cfg.master_seed, split.tag(), path.epoch, path.index]);
    let picked: Vec<usize> = index::sample(&mut rng, range.len(), n_way)
        .into_iter()
        .map(|i| range.start + i)
        .collect();
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(&mut rng);
    // classes[label] = global class
    let mut classes = vec![0; n_way];
    for (&c, &l) in picked.iter().zip(&labels) {
        classes[l] = c;
    }
    let rotation = task_rotation(pool, split, path);

    let d = cfg.input_dim;
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(n_way * per_class * d);
        let mut ys = Vec::with_capacity(n_way * per_class);
        for (label, &class) in classes.iter().enumerate() {
            let mu = &pool.prototypes[class];
            for _ in 0..per_class {
                let x: Vec<f64> = mu
                    .iter()
                    .map(|&m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + cfg.noise_scale * e
                    })
                    .collect();
                match &rotation {
                    Some(r) => data.extend(rotate(r, &x)),
                    None => data.extend(x),
                }
                ys.push(label);
            }
        }
        LabeledBatch::new(Tensor::new(Shape::new(ys.len(), d), data), ys)
    };
    let support = draw(k_shot, &mut rng);
    let target = draw(q_target, &mut rng);
    Ok(Episode {
        id: TaskId { split, path },
        n_way,
        k_shot,
        q_target,
        classes,
        support,
        target,
    })
}

/// `count` test-split episodes keyed by `tag`; identical on every call.
pub fn fixed_eval_set(
    pool: &ClassPool,
    n_way: usize,
    k_shot: usize,
    q_target: usize,
    count: usize,
    tag: u64,
) -> Result<Vec<Episode>, TaskError> {
    let paths: Vec<SeedPath> = (0..count as u64).map(|i| SeedPath::new(tag, i)).collect();
    par::map_collect(&paths, |&p| sample_task(pool, Split::Test, n_way, k_shot, q_target, p))
        .into_iter()
        .collect()
}

/// Plain supervised batch over the train classes with labels equal to the
/// train-class index, classes drawn uniformly. No task rotation.
pub fn sample_supervised_batch(pool: &ClassPool, batch_size: usize, path: SeedPath) -> LabeledBatch {
    let cfg = &pool.config;
    let n = cfg.n_train_classes;
    let mut rng = rng_for(&[cfg.master_seed, 0x7375_7065_72, path.epoch, path.index]);
    let pick = Uniform::new(0, n).expect("non-empty train split");
    let d = cfg.input_dim;
    let mut data = Vec::with_capacity(batch_size * d);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let c = pick.sample(&mut rng);
        for &m in &pool.prototypes[c] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(m + cfg.noise_scale * e);
        }
        labels.push(c);
    }
    LabeledBatch::new(Tensor::new(Shape::new(batch_size, d), data), labels)
}
