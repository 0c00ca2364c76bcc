//! Client-side synthetic-set learning by distribution matching.
//!
//! Each client keeps `ipc` learnable examples per class it holds. Around the
//! current global weights `w_r`, it repeatedly samples `w` from the ρ-ball,
//! draws a real batch per class, and moves the synthetic inputs so that their
//! class-wise mean embedding `h_w` and mean logits `z_w` match the real batch:
//!
//! `L = Σ_c ‖mean h_w(B_c) − mean h_w(S_c)‖² + ‖mean z_w(B_c) − mean z_w(S_c)‖²`.
//!
//! The gradient of `L_c` with respect to the synthetic inputs is the average
//! over real examples `x_i` of `g̃(x_i)`, the gradient of the same loss with the
//! real means replaced by `h_w(x_i)` and `z_w(x_i)`. That decomposition gives
//! per-example sensitivity, so the private branch clips each `g̃(x_i)` and adds
//! Gaussian noise exactly as DP-SGD does for model weights.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{sample_class_batch, sample_class_indices, to_byte, ClassView, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{clip_in_place, sample_ball_weight, sgd_step, Graph, ParamVector, Tensor, Var};

/// Learnable examples of one client, `ipc` per present class, grouped by class
/// in ascending class order. Labels never change.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    client: usize,
    ipc: usize,
    classes: Vec<usize>,
    inputs: Tensor,
    num_classes: usize,
}

impl SyntheticSet {
    pub fn new(client: usize, ipc: usize, classes: Vec<usize>, inputs: Tensor, num_classes: usize) -> Result<Self> {
        if ipc == 0 || classes.is_empty() {
            return Err(Error::invalid("synthetic set", "needs at least one class and ipc >= 1"));
        }
        if inputs.rows() != classes.len() * ipc || inputs.shape().len() < 2 {
            return Err(Error::shape(
                "synthetic set",
                format!("{:?} for {} classes × {ipc}", inputs.shape(), classes.len()),
            ));
        }
        if classes.windows(2).any(|w| w[0] >= w[1]) || classes.iter().any(|&c| c >= num_classes) {
            return Err(Error::invalid("synthetic set", format!("classes {classes:?} not ascending in 0..{num_classes}")));
        }
        Ok(SyntheticSet {
            client,
            ipc,
            classes,
            inputs,
            num_classes,
        })
    }

    pub fn client(&self) -> usize {
        self.client
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `n_k^S`: classes present × ipc.
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.classes
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, self.ipc))
            .collect()
    }

    /// Rows holding class `class`.
    pub fn class_rows(&self, class: usize) -> Option<Range<usize>> {
        let pos = self.classes.iter().position(|&c| c == class)?;
        Some(pos * self.ipc..(pos + 1) * self.ipc)
    }

    pub fn class_block(&self, class: usize) -> Result<Tensor> {
        let rows = self.class_rows(class).ok_or(Error::ClassAbsent(class))?;
        self.inputs.gather_rows(&rows.collect::<Vec<_>>())
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(
            format!("synthetic-{}", self.client),
            self.inputs.clone(),
            self.labels(),
            self.num_classes,
        )
    }
}

/// Client-side hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientConfig {
    /// Matching iterations `T`.
    pub iterations: usize,
    /// Synthetic-data learning rate `η_c`.
    pub lr: f64,
    /// Real examples drawn per class per iteration.
    pub real_batch: usize,
    pub ipc: usize,
    /// Radius of the weight-sampling ball.
    pub rho: f64,
    /// Gaussian noise multiplier; zero disables the private branch.
    pub sigma: f64,
    /// Per-example gradient norm bound.
    pub clip: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            iterations: 1000,
            lr: 1.0,
            real_batch: 256,
            ipc: 10,
            rho: 5.0,
            sigma: 0.0,
            clip: 5.0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("client lr", format!("must be positive, got {}", self.lr)));
        }
        if self.ipc == 0 {
            return Err(Error::invalid("ipc", "must be at least 1"));
        }
        if self.real_batch == 0 {
            return Err(Error::invalid("real batch", "must be at least 1"));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::invalid("rho", format!("must be non-negative, got {}", self.rho)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("sigma", format!("must be non-negative, got {}", self.sigma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::invalid("clip", format!("must be positive, got {}", self.clip)));
        }
        if self.sigma > 0.0 && !self.clip.is_finite() {
            return Err(Error::invalid("clip", "must be finite when sigma > 0"));
        }
        Ok(())
    }
}

/// Initial synthetic set: `ipc` real examples per present class, drawn like a
/// real batch (without replacement when the class is large enough, otherwise
/// every example plus resampled copies).
pub fn init_synthetic<R: Rng + ?Sized>(
    client: usize,
    data: &Dataset,
    ipc: usize,
    rng: &mut R,
) -> Result<SyntheticSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("client {client} has no data")));
    }
    let view = ClassView::new(data);
    let classes = data.classes_present();
    let mut rows = Vec::with_capacity(classes.len() * ipc);
    for &c in &classes {
        rows.extend(sample_class_indices(&view, c, ipc, rng)?);
    }
    let inputs = data.inputs().gather_rows(&rows)?;
    SyntheticSet::new(client, ipc, classes, inputs, data.num_classes())
}

/// A real batch for one class.
#[derive(Clone, Debug)]
pub struct ClassBatch {
    pub class: usize,
    pub inputs: Tensor,
}

/// Per-row embedding and logits of a constant batch.
fn features(model: &Model, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false)?;
    let x = g.constant(batch.clone());
    let f = model.forward(&mut g, &p, x)?;
    Ok((g.value(f.embed).clone(), g.value(f.logits).clone()))
}

fn column_means(t: &Tensor) -> Tensor {
    let m = t.row_len();
    let mut out = vec![0.0; m];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / t.rows() as f64;
    Tensor::from_vec(out.into_iter().map(|v| v * inv).collect())
}

/// Mean embedding and mean logits of a synthetic class block, recorded on `g`.
struct SyntheticMeans {
    block: Var,
    embed: Var,
    logits: Var,
}

fn synthetic_means(g: &mut Graph, model: &Model, params: &[Var], block: Tensor) -> Result<SyntheticMeans> {
    let block = g.variable(block);
    let f = model.forward(g, params, block)?;
    let embed = g.mean_rows(f.embed)?;
    let logits = g.mean_rows(f.logits)?;
    Ok(SyntheticMeans { block, embed, logits })
}

fn check_classes(real: &[ClassBatch], syn: &SyntheticSet) -> Result<()> {
    for b in real {
        if syn.class_rows(b.class).is_none() {
            return Err(Error::invalid(
                "real batches",
                format!("class {} has no synthetic examples", b.class),
            ));
        }
    }
    Ok(())
}

/// Records `Σ_c L_c` on a fresh tape; returns the loss and each class's block leaf.
fn record_loss(model: &Model, real: &[ClassBatch], syn: &SyntheticSet) -> Result<(Graph, Var, Vec<(usize, Var)>)> {
    check_classes(real, syn)?;
    if real.is_empty() {
        return Err(Error::invalid("real batches", "need at least one class"));
    }
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let mut total = None;
    let mut blocks = Vec::with_capacity(real.len());
    for batch in real {
        let (h, z) = features(model, &batch.inputs)?;
        let real_h = g.constant(column_means(&h));
        let real_z = g.constant(column_means(&z));
        let s = synthetic_means(&mut g, model, &params, syn.class_block(batch.class)?)?;
        let dh = g.sub(real_h, s.embed)?;
        let dz = g.sub(real_z, s.logits)?;
        let lh = g.sum_squares(dh);
        let lz = g.sum_squares(dz);
        let lc = g.add(lh, lz)?;
        total = Some(match total {
            None => lc,
            Some(acc) => g.add(acc, lc)?,
        });
        blocks.push((batch.class, s.block));
    }
    Ok((g, total.expect("at least one class"), blocks))
}

/// Matching loss `Σ_c L_c` over the classes in `real`.
pub fn dm_loss(model: &Model, real: &[ClassBatch], syn: &SyntheticSet) -> Result<f64> {
    let (g, loss, _) = record_loss(model, real, syn)?;
    Ok(g.value(loss).data()[0])
}

/// Matching loss and its gradient with respect to all synthetic inputs (rows
/// of classes absent from `real` get zero).
pub fn dm_loss_grad(model: &Model, real: &[ClassBatch], syn: &SyntheticSet) -> Result<(f64, Tensor)> {
    let (g, loss, blocks) = record_loss(model, real, syn)?;
    let mut grads = g.backward(loss)?;
    let mut out = Tensor::zeros(syn.inputs().shape());
    for (class, leaf) in blocks {
        if let Some(block) = grads.take(leaf) {
            write_block(&mut out, syn, class, block.data());
        }
    }
    Ok((g.value(loss).data()[0], out))
}

fn write_block(out: &mut Tensor, syn: &SyntheticSet, class: usize, values: &[f64]) {
    let rows = syn.class_rows(class).expect("class checked");
    let m = syn.example_len();
    out.data_mut()[rows.start * m..rows.end * m].copy_from_slice(values);
}

/// `g̃(x_i)` for every real example of one class: the gradient, with respect to
/// that class's synthetic block, of `‖h_w(x_i) − mean h_w(S_c)‖² +
/// ‖z_w(x_i) − mean z_w(S_c)‖²`. Each tensor has the block's shape
/// `(ipc, example...)`; their mean is the gradient of `L_c`.
pub fn per_example_grads(model: &Model, real: &ClassBatch, syn: &SyntheticSet) -> Result<Vec<Tensor>> {
    if real.inputs.rows() == 0 {
        return Err(Error::EmptyDataset("real batch".into()));
    }
    check_classes(std::slice::from_ref(real), syn)?;
    let (h, z) = features(model, &real.inputs)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false)?;
    let s = synthetic_means(&mut g, model, &params, syn.class_block(real.class)?)?;
    let (sh, sz) = (g.value(s.embed).clone(), g.value(s.logits).clone());
    (0..real.inputs.rows())
        .map(|i| {
            let cot_h = residual(&sh, h.row(i));
            let cot_z = residual(&sz, z.row(i));
            let mut grads = g.backward_from(vec![(s.embed, cot_h), (s.logits, cot_z)])?;
            Ok(grads
                .take(s.block)
                .unwrap_or_else(|| Tensor::zeros(g.value(s.block).shape())))
        })
        .collect()
}

/// `2 · (synthetic mean − real feature)`, the cotangent of `‖real − mean‖²`.
fn residual(mean: &Tensor, real_row: &[f64]) -> Tensor {
    Tensor::from_vec(
        mean.data()
            .iter()
            .zip(real_row)
            .map(|(s, r)| 2.0 * (s - r))
            .collect(),
    )
}

/// Clips each per-example gradient to `clip`, averages, and adds
/// `N(0, (sigma·clip/|B|)²)` to every coordinate.
pub fn privatize<R: Rng + ?Sized>(per_example: &[Tensor], clip: f64, sigma: f64, rng: &mut R) -> Result<Tensor> {
    let first = per_example
        .first()
        .ok_or_else(|| Error::EmptyDataset("no per-example gradients".into()))?;
    let batch = per_example.len() as f64;
    let mut sum = Tensor::zeros(first.shape());
    for g in per_example {
        let mut clipped = g.clone();
        clip_in_place(clipped.data_mut(), clip)?;
        sum.add_assign(&clipped);
    }
    let std = sigma * clip / batch;
    let mut out = sum.map(|v| v / batch);
    if sigma > 0.0 {
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    Ok(out)
}

/// One record per matching iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// `‖w − w_r‖₂` of the sampled weights.
    pub weight_distance: f64,
    /// Matching loss before the update (exact branch only).
    pub loss: Option<f64>,
}

/// Runs the client's matching loop around `global` and returns its synthetic set.
pub fn client_update<R: Rng + ?Sized>(
    client: usize,
    data: &Dataset,
    global: &Model,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<SyntheticSet> {
    client_update_traced(client, data, global, cfg, rng).map(|(s, _)| s)
}

/// [`client_update`] that also reports every iteration.
pub fn client_update_traced<R: Rng + ?Sized>(
    client: usize,
    data: &Dataset,
    global: &Model,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<(SyntheticSet, Vec<IterationRecord>)> {
    cfg.validate()?;
    let mut syn = init_synthetic(client, data, cfg.ipc, rng)?;
    let view = ClassView::new(data);
    let center = global.params();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let w = sample_ball_weight(center, cfg.rho, rng)?;
        let weight_distance = w.distance(center);
        let model = global.with_params(w)?;
        let (loss, grad) = if cfg.sigma > 0.0 {
            let mut grad = Tensor::zeros(syn.inputs().shape());
            for &c in syn.classes() {
                let batch = ClassBatch {
                    class: c,
                    inputs: sample_class_batch(&view, c, cfg.real_batch, rng)?,
                };
                let per_example = per_example_grads(&model, &batch, &syn)?;
                let noisy = privatize(&per_example, cfg.clip, cfg.sigma, rng)?;
                write_block(&mut grad, &syn, c, noisy.data());
            }
            (None, grad)
        } else {
            let batches = syn
                .classes()
                .iter()
                .map(|&c| {
                    Ok(ClassBatch {
                        class: c,
                        inputs: sample_class_batch(&view, c, cfg.real_batch, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = dm_loss_grad(&model, &batches, &syn)?;
            (Some(loss), grad)
        };
        let updated = sgd_step(
            &ParamVector::new(syn.inputs.data().to_vec()),
            &ParamVector::new(grad.into_data()),
            cfg.lr,
        )?;
        syn.inputs = Tensor::new(syn.inputs.shape().to_vec(), updated.into_vec())?;
        syn.inputs.check_finite("synthetic inputs")?;
        trace.push(IterationRecord {
            weight_distance,
            loss,
        });
    }
    Ok((syn, trace))
}

/// Writes each synthetic image as `{client}_{class}_{idx}.pgm` (one channel)
/// or `.ppm` (three channels). Non-image shapes are skipped. Returns the
/// number of files written.
pub fn dump_images(dir: &Path, syn: &SyntheticSet) -> Result<usize> {
    let shape = &syn.inputs.shape()[1..];
    let (channels, h, w) = match *shape {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Ok(0),
    };
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = 0;
    for &class in syn.classes() {
        let rows = syn.class_rows(class).expect("own class");
        for (idx, row) in rows.enumerate() {
            let pixels = syn.inputs.row(row);
            let (ext, magic) = if channels == 1 { ("pgm", "P5") } else { ("ppm", "P6") };
            let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            let plane = h * w;
            for p in 0..plane {
                for c in 0..channels {
                    bytes.push(to_byte(pixels[c * plane + p]));
                }
            }
            let path = dir.join(format!("{}_{}_{}.{}", syn.client(), class, idx, ext));
            std::fs::write(&path, bytes).map_err(|source| Error::Io { path, source })?;
            written += 1;
        }
    }
    Ok(written)
}
