use feddm_core::data::gen_blobs;
use feddm_core::distillation::{dm_loss, dm_loss_grad, init_synthetic, ClassBatch, SyntheticSet};
use feddm_core::federation::{proximal_grad, proximal_term};
use feddm_core::models::{Architecture, Model};
use feddm_core::numerics::{finite_diff_grad, grad, Graph, ParamVector, Tensor};
use feddm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ce_loss(model: &Model, w: &ParamVector, x: &Tensor, labels: &[usize]) -> Result<f64, Error> {
    let mut g = Graph::new();
    let p = model.bind_params(&mut g, w, false)?;
    let xv = g.constant(x.clone());
    let f = model.forward(&mut g, &p, xv)?;
    let weights = vec![1.0 / labels.len() as f64; labels.len()];
    let l = model.loss(&mut g, f.logits, labels, &weights)?;
    Ok(g.value(l).data()[0])
}

fn check_model_gradient(arch: Architecture, input: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(arch, &mut rng).unwrap();
    let x = random_batch(&mut rng, input);
    let labels: Vec<usize> = (0..input[0]).map(|_| rng.random_range(0..model.num_classes())).collect();

    let mut g = Graph::new();
    let p = model.bind(&mut g, true).unwrap();
    let xv = g.constant(x.clone());
    let f = model.forward(&mut g, &p, xv).unwrap();
    let weights = vec![1.0 / labels.len() as f64; labels.len()];
    let loss = model.loss(&mut g, f.logits, &labels, &weights).unwrap();
    let analytic = grad(&g, loss, &p).unwrap();

    let numeric = finite_diff_grad(|w| ce_loss(&model, w, &x, &labels), model.params(), 1e-5).unwrap();
    rel_err(analytic.as_slice(), numeric.as_slice())
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_model_gradient(Architecture::Mlp { widths: vec![6, 10, 8, 4] }, &[7, 6], seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn convnet_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let arch = Architecture::ConvNetLite {
            input: [2, 8, 8],
            channels: [3, 4, 4],
            num_classes: 3,
        };
        let err = check_model_gradient(arch, &[2, 2, 8, 8], seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let err = check_model_gradient(Architecture::Logistic1d, &[9, 1], seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn matching_loss_gradient_matches_finite_differences() {
    let data = gen_blobs(12, 3, 4, 0.6, 5).unwrap();
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(Architecture::Mlp { widths: vec![4, 7, 3] }, &mut rng).unwrap();
        let syn = init_synthetic(0, &data, 3, &mut rng).unwrap();
        let batches: Vec<ClassBatch> = (0..3)
            .map(|c| ClassBatch { class: c, inputs: random_batch(&mut rng, &[5, 4]) })
            .collect();
        let (_, analytic) = dm_loss_grad(&model, &batches, &syn).unwrap();
        let numeric = finite_diff_grad(
            |v| {
                let inputs = Tensor::new(syn.inputs().shape().to_vec(), v.as_slice().to_vec())?;
                let s = SyntheticSet::new(0, 3, syn.classes().to_vec(), inputs, 3)?;
                dm_loss(&model, &batches, &s)
            },
            &ParamVector::new(syn.inputs().data().to_vec()),
            1e-5,
        )
        .unwrap();
        let err = rel_err(analytic.data(), numeric.as_slice());
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn proximal_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mu in [0.01, 0.1, 1.0, 10.0] {
        let w = ParamVector::new((0..20).map(|_| rng.random_range(-2.0..2.0)).collect());
        let anchor = ParamVector::new((0..20).map(|_| rng.random_range(-2.0..2.0)).collect());
        let numeric = finite_diff_grad(|v| Ok::<_, Error>(proximal_term(v, &anchor, mu)), &w, 1e-5).unwrap();
        let err = rel_err(proximal_grad(&w, &anchor, mu).as_slice(), numeric.as_slice());
        assert!(err <= 1e-4, "mu {mu}: relative error {err}");
    }
}
