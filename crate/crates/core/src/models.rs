//! Small classifiers with an explicit split between the embedding map `h_w`
//! (the input to the final linear layer) and the logit map `z_w`.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamVector, Tensor, Var};

/// Rows evaluated per forward pass when scoring a dataset.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// `sigmoid(w·x)` on scalar inputs: one weight, no bias, a single logit
    /// standing for two classes.
    Logistic1d,
    /// Fully connected ReLU network. `widths = [input, hidden..., classes]`;
    /// every layer has a bias.
    Mlp { widths: Vec<usize> },
    /// Three `3×3` conv + ReLU + `2×2` average-pool blocks followed by a linear head.
    ConvNetLite {
        input: [usize; 3],
        channels: [usize; 3],
        num_classes: usize,
    },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Logistic1d => Ok(()),
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
                    return Err(Error::invalid(
                        "mlp widths",
                        format!("need at least input and output widths, all positive: {widths:?}"),
                    ));
                }
                if widths[widths.len() - 1] < 2 {
                    return Err(Error::invalid("mlp widths", "need at least two classes"));
                }
                Ok(())
            }
            Architecture::ConvNetLite {
                input,
                channels,
                num_classes,
            } => {
                if input.iter().chain(channels).any(|&v| v == 0) || *num_classes < 2 {
                    return Err(Error::invalid("convnet", "channel counts and sizes must be positive"));
                }
                if input[1] < 8 || input[2] < 8 {
                    return Err(Error::invalid(
                        "convnet",
                        format!("inputs must be at least 8×8 for three pooling stages, got {input:?}"),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Logistic1d => 2,
            Architecture::Mlp { widths } => widths[widths.len() - 1],
            Architecture::ConvNetLite { num_classes, .. } => *num_classes,
        }
    }

    /// Width of the logit layer: 1 for the logistic model, the class count otherwise.
    pub fn logit_dim(&self) -> usize {
        match self {
            Architecture::Logistic1d => 1,
            _ => self.num_classes(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Logistic1d => 1,
            Architecture::Mlp { widths } => widths[0],
            Architecture::ConvNetLite { input, .. } => input.iter().product(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Architecture::Logistic1d => 1,
            Architecture::Mlp { widths } => widths[widths.len() - 2],
            Architecture::ConvNetLite {
                input, channels, ..
            } => channels[2] * (input[1] / 8) * (input[2] / 8),
        }
    }

    /// Shapes of the parameter tensors in flattening order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Architecture::Logistic1d => vec![vec![1, 1]],
            Architecture::Mlp { widths } => widths
                .windows(2)
                .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
                .collect(),
            Architecture::ConvNetLite {
                input,
                channels,
                num_classes,
            } => {
                let mut shapes = Vec::new();
                let mut cin = input[0];
                for &c in channels {
                    shapes.push(vec![c, cin, 3, 3]);
                    shapes.push(vec![c]);
                    cin = c;
                }
                shapes.push(vec![self.embed_dim(), *num_classes]);
                shapes.push(vec![*num_classes]);
                shapes
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Output of a forward pass recorded on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub embed: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: ParamVector,
}

impl Model {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.dim() != arch.param_count() {
            return Err(Error::shape(
                "model",
                format!("{} parameters for an architecture with {}", params.dim(), arch.param_count()),
            ));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Model { arch, params })
    }

    /// Seeded initialization: uniform in `±1/√fan_in` for every tensor; the
    /// logistic weight starts at zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut values = Vec::with_capacity(arch.param_count());
        if arch != Architecture::Logistic1d {
            let shapes = arch.param_shapes();
            for pair in shapes.chunks(2) {
                let (w, b) = (&pair[0], &pair[1]);
                let fan_in = match w.len() {
                    2 => w[0],
                    _ => w[1] * w[2] * w[3],
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = w.iter().product::<usize>() + b[0];
                values.extend((0..n).map(|_| rng.random_range(-bound..bound)));
            }
        } else {
            values.push(0.0);
        }
        Model::new(arch, ParamVector::new(values))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Model> {
        Model::new(self.arch.clone(), params)
    }

    /// Places `params` on the tape as one leaf per parameter tensor.
    pub fn bind_params(&self, graph: &mut Graph, params: &ParamVector, requires_grad: bool) -> Result<Vec<Var>> {
        Ok(params
            .unflatten(&self.arch.param_shapes())?
            .into_iter()
            .map(|t| graph.leaf(t, requires_grad))
            .collect())
    }

    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Result<Vec<Var>> {
        self.bind_params(graph, &self.params, requires_grad)
    }

    /// Records `h_w` and `z_w` for a batch `(n, input...)`.
    pub fn forward(&self, graph: &mut Graph, params: &[Var], input: Var) -> Result<Forward> {
        let x = graph.value(input);
        let n = x.rows();
        if x.shape().len() < 2 || x.row_len() != self.arch.input_len() {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} for inputs of {} values", x.shape(), self.arch.input_len()),
            ));
        }
        match &self.arch {
            Architecture::Logistic1d => {
                let embed = graph.reshape(input, &[n, 1])?;
                let logits = graph.matmul(embed, params[0])?;
                Ok(Forward { embed, logits })
            }
            Architecture::Mlp { widths } => {
                let mut h = graph.reshape(input, &[n, widths[0]])?;
                let layers = widths.len() - 1;
                for l in 0..layers - 1 {
                    let z = graph.matmul(h, params[2 * l])?;
                    let z = graph.add_bias(z, params[2 * l + 1])?;
                    h = graph.relu(z);
                }
                let logits = graph.matmul(h, params[2 * (layers - 1)])?;
                let logits = graph.add_bias(logits, params[2 * layers - 1])?;
                Ok(Forward { embed: h, logits })
            }
            Architecture::ConvNetLite { input: dims, .. } => {
                let mut h = graph.reshape(input, &[n, dims[0], dims[1], dims[2]])?;
                for block in 0..3 {
                    let c = graph.conv2d(h, params[2 * block], params[2 * block + 1])?;
                    let a = graph.relu(c);
                    h = graph.avg_pool2(a)?;
                }
                let embed = graph.reshape(h, &[n, self.arch.embed_dim()])?;
                let logits = graph.matmul(embed, params[6])?;
                let logits = graph.add_bias(logits, params[7])?;
                Ok(Forward { embed, logits })
            }
        }
    }

    /// Weighted training loss `Σ_i weights[i]·ℓ_i`: binary cross-entropy for the
    /// logistic model, softmax cross-entropy otherwise.
    pub fn loss(&self, graph: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        match self.arch {
            Architecture::Logistic1d => graph.bce_with_logits(logits, labels, weights),
            _ => graph.softmax_cross_entropy(logits, labels, weights),
        }
    }

    /// Mean training loss over a dataset (no gradient).
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let x = g.constant(data.inputs().clone());
        let f = self.forward(&mut g, &p, x)?;
        let w = vec![1.0 / data.len() as f64; data.len()];
        let loss = self.loss(&mut g, f.logits, data.labels(), &w)?;
        Ok(g.value(loss).data()[0])
    }

    pub fn forward_embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, &p, x)?;
        Ok(g.value(f.embed).clone())
    }

    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false)?;
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, &p, x)?;
        Ok(g.value(f.logits).clone())
    }

    /// The final linear layer `(weight (embed_dim × logit_dim), bias)`; the
    /// logistic model has no bias and gets a zero one here.
    pub fn logit_layer(&self) -> Result<(Tensor, Tensor)> {
        let parts = self.params.unflatten(&self.arch.param_shapes())?;
        let zero_bias = || Tensor::zeros(&[self.arch.logit_dim()]);
        Ok(match self.arch {
            Architecture::Logistic1d => (parts[0].clone(), zero_bias()),
            _ => {
                let n = parts.len();
                (parts[n - 2].clone(), parts[n - 1].clone())
            }
        })
    }

    /// Applies [`Model::logit_layer`] to precomputed embeddings.
    pub fn logits_from_embedding(&self, embed: &Tensor) -> Result<Tensor> {
        let (w, b) = self.logit_layer()?;
        let mut g = Graph::new();
        let e = g.constant(embed.clone());
        let w = g.constant(w);
        let b = g.constant(b);
        let z = g.matmul(e, w)?;
        let z = g.add_bias(z, b)?;
        Ok(g.value(z).clone())
    }

    /// Predicted class per row; ties go to the lowest class index, and a
    /// single logit predicts class 1 only when strictly positive.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Fraction of correctly classified examples.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset(data.name().to_string()));
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let batch = data.inputs().gather_rows(chunk)?;
            let pred = self.predict(&batch)?;
            correct += chunk
                .iter()
                .zip(pred)
                .filter(|(&i, p)| data.labels()[i] == *p)
                .count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] > 0.0);
    }
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(widths: &[usize], seed: u64) -> Model {
        Model::init(
            Architecture::Mlp {
                widths: widths.to_vec(),
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Architecture::Logistic1d.param_count(), 1);
        assert_eq!(
            Architecture::Mlp {
                widths: vec![784, 128, 10]
            }
            .param_count(),
            101_770
        );
        let conv = Architecture::ConvNetLite {
            input: [1, 28, 28],
            channels: [8, 16, 32],
            num_classes: 10,
        };
        // 3x3 convs with bias, then a 288 -> 10 head
        let expected = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (32 * 3 * 3 * 10 + 10);
        assert_eq!(conv.param_count(), expected);
        assert_eq!(conv.embed_dim(), 288);
    }

    #[test]
    fn output_shapes() {
        let m = mlp(&[3, 5, 4], 0);
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.forward_embed(&x).unwrap().shape(), &[1, 5]);
        let xb = Tensor::new(vec![6, 3], vec![0.5; 18]).unwrap();
        assert_eq!(m.forward_logits(&xb).unwrap().shape(), &[6, 4]);
        let bad = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(m.forward_logits(&bad).is_err());
    }

    #[test]
    fn identical_inputs_identical_embeddings() {
        let m = mlp(&[2, 6, 3], 4);
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.0, 0.3, -1.0]).unwrap();
        let e = m.forward_embed(&x).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn logistic_at_zero_weight() {
        let m = Model::init(Architecture::Logistic1d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.params().as_slice(), &[0.0]);
        let x = Tensor::new(vec![3, 1], vec![-2.0, 0.0, 7.0]).unwrap();
        let z = m.forward_logits(&x).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        assert!(z.data().iter().all(|&v| crate::numerics::sigmoid(v) == 0.5));
        assert_eq!(m.predict(&x).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn logits_are_linear_in_embedding() {
        let m = mlp(&[4, 7, 3], 11);
        let x = Tensor::new(vec![5, 4], (0..20).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let e = m.forward_embed(&x).unwrap();
        let direct = m.forward_logits(&x).unwrap();
        let via = m.logits_from_embedding(&e).unwrap();
        assert_eq!(direct, via);
    }

    #[test]
    fn zero_logits_tie_to_class_zero() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
        assert_eq!(argmax(&[1e-9]), 1);
    }

    #[test]
    fn accuracy_is_scale_invariant() {
        let data = crate::data::gen_blobs(20, 3, 2, 0.8, 2).unwrap();
        let m = mlp(&[2, 8, 3], 5);
        let acc = m.accuracy(&data).unwrap();
        let (w, b) = m.logit_layer().unwrap();
        // scale the head: logits scale by 3
        let mut scaled = m.params().as_slice().to_vec();
        let n = scaled.len();
        let head = w.len() + b.len();
        for v in &mut scaled[n - head..] {
            *v *= 3.0;
        }
        let m3 = m.with_params(ParamVector::new(scaled)).unwrap();
        assert_eq!(m3.accuracy(&data).unwrap(), acc);
    }

    #[test]
    fn memorizer_scores_one() {
        // blobs at distance 4 with no spread are separated by a zero-bias linear head
        let data = crate::data::gen_blobs(10, 2, 1, 0.0, 0).unwrap();
        let m = Model::new(Architecture::Logistic1d, ParamVector::new(vec![1.0])).unwrap();
        assert_eq!(m.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn rejects_mismatched_params() {
        let arch = Architecture::Mlp { widths: vec![2, 3] };
        assert!(Model::new(arch.clone(), ParamVector::zeros(5)).is_err());
        assert!(Model::new(arch.clone(), ParamVector::new(vec![f64::NAN; 9])).is_err());
        assert!(Model::new(arch, ParamVector::zeros(9)).is_ok());
        assert!(Architecture::Mlp { widths: vec![3] }.validate().is_err());
    }
}
