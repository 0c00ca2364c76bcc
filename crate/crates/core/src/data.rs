//! Labeled datasets, generators, binary loaders, non-i.i.d. partitioning and
//! per-class batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A non-empty labeled dataset. `inputs` has shape `(n, example_shape...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let name = name.into();
        if inputs.shape().len() < 2 {
            return Err(Error::shape(
                "dataset",
                format!("inputs need a leading example axis, got {:?}", inputs.shape()),
            ));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} examples but {} labels", inputs.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} out of range for {num_classes} classes in {name}"),
            ));
        }
        Ok(Dataset {
            name,
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Floats per example.
    pub fn example_len(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset(format!("empty subset of {}", self.name)));
        }
        let inputs = self.inputs.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.name.clone(), inputs, labels, self.num_classes)
    }

    /// Resizes the label space, e.g. so train and test splits agree. Every
    /// label must stay below `num_classes`.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Dataset> {
        if let Some(&y) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(
                "num_classes",
                format!("{num_classes} classes cannot hold label {y} in {}", self.name),
            ));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Classes with at least one example, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Keeps the first `max_classes` classes and at most `max_per_class`
    /// examples of each, in file order. Labels are preserved.
    pub fn restrict(&self, max_classes: usize, max_per_class: usize) -> Result<Dataset> {
        let mut taken = vec![0; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                if y < max_classes && taken[y] < max_per_class {
                    taken[y] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        self.subset(&keep)
    }
}

/// Labeling rule for the 1-D binary problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OneDimLabels {
    /// `y = 1` iff `(x ≥ 0 and p < 0.9)` or `(x < 0 and p < 0.1)`: the sign of
    /// `x` with 10% of labels flipped.
    #[default]
    NoisySign,
    /// `y = 1` iff `(x ≥ 0 and p ≥ 0.9)` or `(x < 0 and p < 0.1)`. Under this
    /// rule the label is independent of `x`.
    Literal,
}

/// `x ~ N(0, 1)`, binary labels from `p ~ U(0, 1)` under the noisy-sign rule.
pub fn gen_1d_binary(n: usize, seed: u64) -> Result<Dataset> {
    gen_1d_binary_with(n, OneDimLabels::NoisySign, seed)
}

pub fn gen_1d_binary_with(n: usize, rule: OneDimLabels, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let p: f64 = rng.random();
        let positive = match rule {
            OneDimLabels::NoisySign => (x >= 0.0 && p < 0.9) || (x < 0.0 && p < 0.1),
            OneDimLabels::Literal => (x >= 0.0 && p >= 0.9) || (x < 0.0 && p < 0.1),
        };
        xs.push(x);
        ys.push(positive as usize);
    }
    Dataset::new("binary1d", Tensor::new(vec![n, 1], xs)?, ys, 2)
}

/// Centers for [`gen_blobs`]: evenly spaced on a circle of radius 2 in the first
/// two coordinates (on a segment of half-length 2 when `dim == 1`), symmetric
/// about the origin for two classes.
pub fn blob_centers(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    const RADIUS: f64 = 2.0;
    (0..num_classes)
        .map(|c| {
            let mut center = vec![0.0; dim];
            if dim == 1 {
                center[0] = if num_classes == 1 {
                    0.0
                } else {
                    RADIUS * (2.0 * c as f64 / (num_classes - 1) as f64 - 1.0)
                };
            } else {
                let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
                center[0] = RADIUS * angle.cos();
                center[1] = RADIUS * angle.sin();
            }
            center
        })
        .collect()
}

/// Balanced isotropic Gaussian clusters, `n_per_class` per class, class-major order.
pub fn gen_blobs(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || num_classes == 0 || dim == 0 {
        return Err(Error::invalid("blobs", "sizes must be positive"));
    }
    if !(spread >= 0.0) {
        return Err(Error::invalid("spread", format!("must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(num_classes, dim);
    let n = n_per_class * num_classes;
    let mut xs = Vec::with_capacity(n * dim);
    let mut ys = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                xs.push(m + spread * z);
            }
            ys.push(c);
        }
    }
    Dataset::new("blobs", Tensor::new(vec![n, dim], xs)?, ys, num_classes)
}

const IDX_UBYTE: u8 = 0x08;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(slice)
            }
            None => Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                reason: format!(
                    "truncated: {what} needs {n} bytes at offset {}, file has {}",
                    self.offset,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_idx(path: &Path, bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let mut r = ByteReader {
        path,
        bytes,
        offset: 0,
    };
    let magic = r.u32_be("magic number")?;
    if magic != expected_magic {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("bad magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    debug_assert_eq!((magic >> 8) as u8, IDX_UBYTE);
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(r.u32_be(&format!("dimension {d}"))? as usize);
    }
    let count: usize = dims.iter().product();
    let data = r.take(count, "payload")?.to_vec();
    if r.offset != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: r.offset as u64,
            reason: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    Ok(IdxArray { dims, data })
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let bytes = read_file(path)?;
    parse_idx(path, &bytes, expected_magic)
}

pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let magic = (u32::from(IDX_UBYTE) << 8) | array.dims.len() as u32;
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    write_file(path, &encode_idx(array))
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to `[0, 1]`
/// and each example gets shape `(1, rows, cols)`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_idx(images, IDX_IMAGES_MAGIC)?;
    let lab = read_idx(labels, IDX_LABELS_MAGIC)?;
    let (n, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            offset: 4,
            reason: format!("{} labels for {n} images in {}", lab.dims[0], images.display()),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset(images.display().to_string()));
    }
    let num_classes = lab.data.iter().copied().max().unwrap_or(0) as usize + 1;
    let pixels = img.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    let labels = lab.data.iter().map(|&b| b as usize).collect();
    Dataset::new("idx", inputs, labels, num_classes)
}

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Loads a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar_bin(path: &Path) -> Result<Dataset> {
    load_cifar_records(path, 1, 10)
}

/// Loads a CIFAR-100 binary batch (coarse byte, fine byte, pixels) using the
/// 100 fine labels.
pub fn load_cifar100_bin(path: &Path) -> Result<Dataset> {
    load_cifar_records(path, 2, 100)
}

fn load_cifar_records(path: &Path, label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let record = label_bytes + CIFAR_IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % record) as u64,
            reason: format!("file size {} is not a positive multiple of {record}", bytes.len()),
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let y = rec[label_bytes - 1] as usize;
        if y >= num_classes {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (i * record + label_bytes - 1) as u64,
                reason: format!("label {y} out of range for {num_classes} classes"),
            });
        }
        labels.push(y);
        pixels.extend(rec[label_bytes..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let inputs = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new("cifar", inputs, labels, num_classes)
}

/// Writes CIFAR-10 records. Inputs are scaled back from `[0, 1]` to bytes.
pub fn write_cifar_bin(path: &Path, data: &Dataset) -> Result<()> {
    if data.example_len() != CIFAR_IMAGE_BYTES {
        return Err(Error::shape("write_cifar_bin", format!("{:?}", data.example_shape())));
    }
    let mut out = Vec::with_capacity(data.len() * (CIFAR_IMAGE_BYTES + 1));
    for i in 0..data.len() {
        out.push(data.labels()[i] as u8);
        out.extend(data.inputs().row(i).iter().map(|&v| to_byte(v)));
    }
    write_file(path, &out)
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Disjoint per-client index sets covering `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub index_sets: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.index_sets.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.index_sets.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.index_sets.iter().map(Vec::len).sum()
    }

    /// Per-client class histograms.
    pub fn class_histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.index_sets
            .iter()
            .map(|set| {
                let mut h = vec![0; num_classes];
                for &i in set {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Distinct classes held by each client.
    pub fn classes_per_client(&self, labels: &[usize], num_classes: usize) -> Vec<usize> {
        self.class_histograms(labels, num_classes)
            .iter()
            .map(|h| h.iter().filter(|&&c| c > 0).count())
            .collect()
    }

    /// Checks disjointness and exact coverage of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, set) in self.index_sets.iter().enumerate() {
            for &i in set {
                if i >= n {
                    return Err(Error::invalid("partition", format!("client {k} holds index {i} >= {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid("partition", format!("index {i} assigned twice")));
                }
            }
        }
        match seen.iter().position(|&s| !s) {
            Some(i) => Err(Error::invalid("partition", format!("index {i} unassigned"))),
            None => Ok(()),
        }
    }
}

const PARTITION_RETRIES: usize = 10;

/// Class-wise Dirichlet split of `labels` across `clients`.
///
/// For each class, proportions `p ~ Dir(alpha·1_K)` are drawn and the class's
/// shuffled indices are handed out in contiguous runs sized by largest-remainder
/// rounding. Draws that leave a client empty are retried a bounded number of
/// times; any client still empty then takes one example from the largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
    }
    if labels.len() < clients {
        return Err(Error::invalid(
            "clients",
            format!("{} examples cannot cover {clients} clients", labels.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::invalid("labels", format!("label {y} >= {num_classes}")));
        }
        by_class[y].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }

    let mut sets = Vec::new();
    for _ in 0..PARTITION_RETRIES {
        sets = vec![Vec::new(); clients];
        for idx in by_class.iter().filter(|idx| !idx.is_empty()) {
            let p = sample_dirichlet(alpha, clients, &mut rng)?;
            let counts = largest_remainder(&p, idx.len());
            let mut start = 0;
            for (set, &count) in sets.iter_mut().zip(&counts) {
                set.extend_from_slice(&idx[start..start + count]);
                start += count;
            }
        }
        if sets.iter().all(|s: &Vec<usize>| !s.is_empty()) {
            break;
        }
    }
    for k in 0..clients {
        if sets[k].is_empty() {
            let donor = (0..clients)
                .max_by(|&a, &b| sets[a].len().cmp(&sets[b].len()).then(b.cmp(&a)))
                .expect("at least one client");
            let moved = sets[donor].pop().expect("donor holds at least two examples");
            sets[k].push(moved);
        }
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    Ok(Partition {
        index_sets: sets,
        alpha,
        seed,
    })
}

/// Symmetric Dirichlet draw, computed in log space so tiny `alpha` does not
/// underflow every component to zero.
fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    // G(α) = G(α+1) · U^(1/α)
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = rng.sample(gamma);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Integer counts summing to `n`, as close as possible to `p · n`.
pub fn largest_remainder(p: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Shannon entropy (nats) of a class histogram.
pub fn label_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Number of classes holding at least `threshold` of the client's data.
pub fn effective_classes(hist: &[usize], threshold: f64) -> usize {
    let total: usize = hist.iter().sum();
    hist.iter()
        .filter(|&&c| total > 0 && c as f64 / total as f64 >= threshold)
        .count()
}

/// Total-variation distance between a class histogram and the uniform distribution.
pub fn tv_from_uniform(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    let u = 1.0 / hist.len() as f64;
    0.5 * hist
        .iter()
        .map(|&c| (c as f64 / total as f64 - u).abs())
        .sum::<f64>()
}

/// Per-class index lists over a dataset, for repeated batch sampling.
#[derive(Clone, Debug)]
pub struct ClassView<'a> {
    data: &'a Dataset,
    by_class: Vec<Vec<usize>>,
}

impl<'a> ClassView<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        ClassView {
            data,
            by_class: data.class_indices(),
        }
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn population(&self, class: usize) -> usize {
        self.by_class.get(class).map_or(0, Vec::len)
    }
}

/// Indices of a class batch: a uniform sample without replacement when the
/// class has more than `size` examples; otherwise every example of the class
/// followed by uniform draws with replacement up to `size`.
pub fn sample_class_indices<R: Rng + ?Sized>(
    view: &ClassView<'_>,
    class: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool = view
        .by_class
        .get(class)
        .filter(|p| !p.is_empty())
        .ok_or(Error::ClassAbsent(class))?;
    if size == 0 {
        return Err(Error::invalid("batch size", "must be at least 1"));
    }
    if pool.len() > size {
        let mut picked: Vec<usize> = pool.clone();
        let (head, _) = picked.partial_shuffle(rng, size);
        return Ok(head.to_vec());
    }
    let mut out = pool.clone();
    out.shuffle(rng);
    for _ in pool.len()..size {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok(out)
}

/// Inputs of a class batch drawn by [`sample_class_indices`].
pub fn sample_class_batch<R: Rng + ?Sized>(
    view: &ClassView<'_>,
    class: usize,
    size: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let idx = sample_class_indices(view, class, size, rng)?;
    view.data.inputs().gather_rows(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dim_binary_is_deterministic_and_binary() {
        let a = gen_1d_binary(100, 5).unwrap();
        assert_eq!(a, gen_1d_binary(100, 5).unwrap());
        assert_ne!(a, gen_1d_binary(100, 6).unwrap());
        assert!(a.inputs().all_finite());
        assert!(a.labels().iter().all(|&y| y <= 1));
        assert_eq!(a.example_shape(), &[1]);
        assert!(gen_1d_binary(0, 5).is_err());
    }

    #[test]
    fn blobs_are_balanced() {
        let d = gen_blobs(7, 3, 4, 0.5, 1).unwrap();
        assert_eq!(d.class_counts(), vec![7, 7, 7]);
        assert_eq!(d.example_shape(), &[4]);
        let centers = blob_centers(2, 1);
        assert_eq!(centers, vec![vec![-2.0], vec![2.0]]);
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let images = IdxArray {
            dims: vec![3, 2, 2],
            data: (0..12).map(|v| v * 20).collect(),
        };
        let labels = IdxArray {
            dims: vec![3],
            data: vec![0, 7, 9],
        };
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx(&ip, &images).unwrap();
        write_idx(&lp, &labels).unwrap();
        assert_eq!(read_idx(&ip, IDX_IMAGES_MAGIC).unwrap(), images);
        assert_eq!(encode_idx(&read_idx(&ip, IDX_IMAGES_MAGIC).unwrap()), std::fs::read(&ip).unwrap());

        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.example_shape(), &[1, 2, 2]);
        assert_eq!(d.labels(), &[0, 7, 9]);
        assert_eq!(d.inputs().row(0)[1], 20.0 / 255.0);

        // wrong magic
        assert!(matches!(read_idx(&ip, IDX_LABELS_MAGIC), Err(Error::Parse { offset: 0, .. })));

        // truncated payload reports the offset where the file ends
        let bytes = std::fs::read(&ip).unwrap();
        let tp = dir.path().join("trunc.idx");
        std::fs::write(&tp, &bytes[..bytes.len() - 3]).unwrap();
        match read_idx(&tp, IDX_IMAGES_MAGIC) {
            Err(Error::Parse { offset, reason, .. }) => {
                assert_eq!(offset, (bytes.len() - 3) as u64);
                assert!(reason.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&tp, &bytes[..6]).unwrap();
        assert!(matches!(read_idx(&tp, IDX_IMAGES_MAGIC), Err(Error::Parse { offset: 6, .. })));

        // label count mismatch
        write_idx(&lp, &IdxArray { dims: vec![2], data: vec![1, 2] }).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn cifar_roundtrip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let n = 4;
        let pixels: Vec<f64> = (0..n * CIFAR_IMAGE_BYTES).map(|i| (i % 256) as f64 / 255.0).collect();
        let d = Dataset::new(
            "cifar",
            Tensor::new(vec![n, 3, 32, 32], pixels).unwrap(),
            vec![3, 0, 9, 3],
            10,
        )
        .unwrap();
        let p = dir.path().join("batch.bin");
        write_cifar_bin(&p, &d).unwrap();
        let back = load_cifar_bin(&p).unwrap();
        assert_eq!(back, d);
        assert!(back.inputs().data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_cifar_bin(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let p = dirichlet_partition(&labels, 5, 1, 0.5, 3).unwrap();
        assert_eq!(p.index_sets, vec![(0..50).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_rejects_bad_arguments() {
        let labels = vec![0, 1, 0];
        assert!(dirichlet_partition(&labels, 2, 4, 0.5, 0).is_err());
        assert!(dirichlet_partition(&labels, 2, 0, 0.5, 0).is_err());
        assert!(dirichlet_partition(&labels, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn every_client_gets_an_example_under_extreme_skew() {
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        for seed in 0..20 {
            let p = dirichlet_partition(&labels, 2, 12, 0.01, seed).unwrap();
            p.validate(12).unwrap();
            assert!(p.sizes().iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
    }

    #[test]
    fn class_batches() {
        let d = gen_blobs(5, 3, 2, 0.1, 0).unwrap();
        let view = ClassView::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = sample_class_indices(&view, 1, 3, &mut rng).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| d.labels()[i] == 1));
        let mut uniq = idx.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3);

        let all = sample_class_indices(&view, 2, 8, &mut rng).unwrap();
        assert_eq!(all.len(), 8);
        for i in 10..15 {
            assert!(all[..5].contains(&i));
        }
        assert!(all.iter().all(|&i| d.labels()[i] == 2));

        let a = sample_class_indices(&view, 0, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_class_indices(&view, 0, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let sub = d.subset(&[0, 1, 5]).unwrap();
        let v = ClassView::new(&sub);
        assert!(matches!(sample_class_indices(&v, 2, 2, &mut rng), Err(Error::ClassAbsent(2))));
        assert_eq!(sample_class_batch(&view, 0, 2, &mut rng).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn histogram_statistics() {
        assert_eq!(effective_classes(&[95, 5, 0], 0.05), 2);
        assert_eq!(effective_classes(&[96, 4, 0], 0.05), 1);
        assert!((label_entropy(&[1, 1]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(label_entropy(&[3, 0]), 0.0);
        assert_eq!(tv_from_uniform(&[5, 5]), 0.0);
        assert!((tv_from_uniform(&[10, 0]) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(
            n in 20usize..200,
            classes in 1usize..6,
            k in 1usize..12,
            alpha in prop::sample::select(vec![0.01, 0.1, 0.5, 5.0, 50.0]),
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
            let p = dirichlet_partition(&labels, classes, k, alpha, seed).unwrap();
            prop_assert_eq!(p.num_clients(), k);
            prop_assert_eq!(p.total(), n);
            prop_assert!(p.validate(n).is_ok());
            prop_assert!(p.sizes().iter().all(|&s| s >= 1));
        }
    }
}
