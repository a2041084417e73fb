//! Dataset ingestion and client partitioning: the IDX image/label format,
//! IID and Dirichlet splits, and synthetic generators for fast deterministic
//! runs (Gaussian class blobs for classification, a diagonal quadratic for
//! the convergence testbed).

use crate::tensor::SeededRng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: wrong magic {got:#010x} at offset 0, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated at offset {offset}, needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot split {n} samples across {clients} clients")]
    TooManyClients { n: usize, clients: usize },
    #[error("invalid dirichlet concentration {0}; expected alpha > 0")]
    InvalidAlpha(f64),
    #[error("invalid condition number {0}; expected cond >= 1")]
    InvalidCond(f64),
}

/// An in-memory dataset: row-major float32 inputs in `[0, 1]` plus class
/// labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<f32>,
    pub dim: usize,
    pub rows: u32,
    pub cols: u32,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// Split off the first `n` samples (e.g. train vs held-out test drawn
    /// from one generator so both halves share the same distribution).
    pub fn split_at(self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.len(), "split point past the dataset");
        let head = Dataset {
            name: self.name.clone(),
            inputs: self.inputs[..n * self.dim].to_vec(),
            dim: self.dim,
            rows: self.rows,
            cols: self.cols,
            labels: self.labels[..n].to_vec(),
        };
        let tail = Dataset {
            name: self.name,
            inputs: self.inputs[n * self.dim..].to_vec(),
            dim: self.dim,
            rows: self.rows,
            cols: self.cols,
            labels: self.labels[n..].to_vec(),
        };
        (head, tail)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn take_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    if bytes.len() < offset + 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse a pair of IDX files (big-endian headers, raw u8 payloads) into a
/// dataset with pixels scaled by 1/255. Image and label counts are
/// cross-checked.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let magic = take_u32_be(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = take_u32_be(&img, 4, images_path)? as usize;
    let rows = take_u32_be(&img, 8, images_path)?;
    let cols = take_u32_be(&img, 12, images_path)?;
    let dim = rows as usize * cols as usize;
    let need = 16 + n * dim;
    if img.len() < need {
        return Err(DataError::Truncated {
            path: images_path.to_path_buf(),
            offset: img.len(),
            needed: need - img.len(),
        });
    }

    let lab = read_file(labels_path)?;
    let magic = take_u32_be(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = take_u32_be(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + n_labels {
        return Err(DataError::Truncated {
            path: labels_path.to_path_buf(),
            offset: lab.len(),
            needed: 8 + n_labels - lab.len(),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let inputs: Vec<f32> = img[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = lab[8..8 + n].iter().map(|&b| b as u32).collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Ok(Dataset {
        name,
        inputs,
        dim,
        rows,
        cols,
        labels,
    })
}

/// Serialize a dataset back to IDX bytes `(images, labels)`. Pixel floats
/// are mapped back to u8 by rounding `x * 255`.
pub fn write_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + ds.inputs.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&ds.rows.to_be_bytes());
    img.extend_from_slice(&ds.cols.to_be_bytes());
    img.extend(ds.inputs.iter().map(|&x| (x * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// Disjoint per-client sample index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<u32>>,
}

impl Partition {
    /// Disjointness, bounds, coverage size and non-emptiness.
    pub fn validate(&self, n: usize) -> Result<(), String> {
        let mut seen = vec![false; n];
        let mut total = 0usize;
        for (k, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(format!("shard {k} is empty"));
            }
            for &i in shard {
                let i = i as usize;
                if i >= n {
                    return Err(format!("shard {k} references index {i} >= {n}"));
                }
                if seen[i] {
                    return Err(format!("index {i} appears in two shards"));
                }
                seen[i] = true;
                total += 1;
            }
        }
        if total > n {
            return Err(format!("{total} assigned indices exceed {n} samples"));
        }
        Ok(())
    }
}

/// Random permutation split into near-equal shards (sizes differ by at most
/// one, remainders going to the lowest client ids).
pub fn partition_iid(n: usize, clients: usize, rng: &mut SeededRng) -> Result<Partition, DataError> {
    if clients == 0 || clients > n {
        return Err(DataError::TooManyClients { n, clients });
    }
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(rng);
    let base = n / clients;
    let rem = n % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0usize;
    for k in 0..clients {
        let size = base + usize::from(k < rem);
        shards.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(Partition { shards })
}

/// Allocate each class across clients by a Dirichlet(alpha, ..., alpha)
/// draw; class samples are split at the cumulative proportion cut points.
/// Empty shards are repaired by stealing one sample from the largest shard,
/// keeping the draw deterministic under a fixed seed.
pub fn partition_dirichlet(
    labels: &[u32],
    clients: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<Partition, DataError> {
    if alpha <= 0.0 {
        return Err(DataError::InvalidAlpha(alpha));
    }
    let n = labels.len();
    if clients == 0 || clients > n {
        return Err(DataError::TooManyClients { n, clients });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated above");
    let mut shards: Vec<Vec<u32>> = vec![Vec::new(); clients];
    for class in 0..num_classes as u32 {
        let mut idx: Vec<u32> = (0..n as u32).filter(|&i| labels[i as usize] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // degenerate gamma draws (all ~0) fall back to a uniform split
        let props: Vec<f64> = if total > 0.0 {
            draws.iter().map(|d| d / total).collect()
        } else {
            vec![1.0 / clients as f64; clients]
        };
        let mut cut_prev = 0usize;
        let mut cum = 0.0f64;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let cut = if k + 1 == clients {
                idx.len()
            } else {
                ((cum * idx.len() as f64).round() as usize).clamp(cut_prev, idx.len())
            };
            shards[k].extend_from_slice(&idx[cut_prev..cut]);
            cut_prev = cut;
        }
    }
    // repair: move one sample at a time from the currently largest shard
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let largest = shards
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .expect("at least one shard");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    Ok(Partition { shards })
}

/// Deterministic Gaussian class blobs with pixels clamped to `[0, 1]`;
/// linearly separable enough for fast smoke experiments.
pub fn make_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    rng: &mut SeededRng,
) -> Dataset {
    let means: Vec<f32> = (0..classes * dim)
        .map(|_| rng.random_range(0.2f32..0.8))
        .collect();
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % classes) as u32;
        labels.push(class);
        let mean = &means[class as usize * dim..(class as usize + 1) * dim];
        for &m in mean {
            let noise: f32 = StandardNormal.sample(rng);
            inputs.push((m + 0.08 * noise).clamp(0.0, 1.0));
        }
    }
    Dataset {
        name: format!("blobs-{classes}x{dim}"),
        inputs,
        dim,
        rows: dim as u32,
        cols: 1,
        labels,
    }
}

/// Diagonal strongly-convex quadratic `f(x) = 1/2 x'Ax - b'x` with
/// eigenvalues log-spaced in `[1, cond]`; the minimizer and optimum are
/// known in closed form.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub diag: Vec<f64>,
    pub b: Vec<f64>,
}

impl Quadratic {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn l_const(&self) -> f64 {
        self.diag.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn mu_pl(&self) -> f64 {
        self.diag.iter().cloned().fold(f64::MAX, f64::min)
    }

    pub fn minimizer(&self) -> Vec<f64> {
        self.diag
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| b / a)
            .collect()
    }

    pub fn min_value(&self) -> f64 {
        -0.5 * self
            .diag
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| b * b / a)
            .sum::<f64>()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.diag
            .iter()
            .zip(&self.b)
            .zip(x)
            .map(|((&a, &b), &xi)| 0.5 * a * xi * xi - b * xi)
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.diag
            .iter()
            .zip(&self.b)
            .zip(x)
            .map(|((&a, &b), &xi)| a * xi - b)
            .collect()
    }
}

pub fn make_synthetic_quadratic(
    dim: usize,
    cond: f64,
    rng: &mut SeededRng,
) -> Result<Quadratic, DataError> {
    if cond < 1.0 {
        return Err(DataError::InvalidCond(cond));
    }
    let diag: Vec<f64> = (0..dim)
        .map(|i| {
            let t = if dim > 1 {
                i as f64 / (dim - 1) as f64
            } else {
                0.0
            };
            cond.powf(t)
        })
        .collect();
    let b: Vec<f64> = (0..dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Ok(Quadratic { diag, b })
}
