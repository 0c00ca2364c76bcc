use feddm_core::data::gen_blobs;
use feddm_core::distillation::{
    client_update, dm_loss, dm_loss_grad, init_synthetic, per_example_grads, privatize, ClassBatch, ClientConfig,
    SyntheticSet,
};
use feddm_core::models::{Architecture, Model};
use feddm_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_instance(seed: u64) -> (Model, Vec<ClassBatch>, SyntheticSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (arch, example): (Architecture, Vec<usize>) = if seed % 4 == 3 {
        (
            Architecture::ConvNetLite { input: [1, 8, 8], channels: [2, 3, 3], num_classes: 3 },
            vec![1, 8, 8],
        )
    } else {
        let d = rng.random_range(2..6);
        let hidden = rng.random_range(3..9);
        (Architecture::Mlp { widths: vec![d, hidden, 3] }, vec![d])
    };
    let model = Model::init(arch, &mut rng).unwrap();
    let ipc = rng.random_range(1..4);
    let classes = vec![0, 2];
    let mut shape = vec![classes.len() * ipc];
    shape.extend(&example);
    let syn = SyntheticSet::new(0, ipc, classes.clone(), random_tensor(&mut rng, &shape), 3).unwrap();
    let batches = classes
        .iter()
        .map(|&c| {
            let mut s = vec![rng.random_range(1..9)];
            s.extend(&example);
            ClassBatch { class: c, inputs: random_tensor(&mut rng, &s) }
        })
        .collect();
    (model, batches, syn)
}

#[test]
fn mean_of_per_example_gradients_is_the_loss_gradient() {
    for seed in 0..20 {
        let (model, batches, syn) = random_instance(seed);
        let (_, full) = dm_loss_grad(&model, &batches, &syn).unwrap();
        for batch in &batches {
            let pe = per_example_grads(&model, batch, &syn).unwrap();
            assert_eq!(pe.len(), batch.inputs.rows());
            let rows: Vec<usize> = syn.class_rows(batch.class).unwrap().collect();
            let expected = full.gather_rows(&rows).unwrap();
            for (j, want) in expected.data().iter().enumerate() {
                let mean = pe.iter().map(|g| g.data()[j]).sum::<f64>() / pe.len() as f64;
                assert!((mean - want).abs() <= 1e-8, "seed {seed}: {mean} vs {want}");
            }
        }
    }
}

/// Hand-written forward pass of a one-hidden-layer MLP, independent of the tape.
fn mlp_features(widths: &[usize], params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, h, c) = (widths[0], widths[1], widths[2]);
    let (w1, rest) = params.split_at(d * h);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h * c);
    let hidden: Vec<f64> = (0..h)
        .map(|j| (b1[j] + (0..d).map(|i| x[i] * w1[i * h + j]).sum::<f64>()).max(0.0))
        .collect();
    let logits = (0..c)
        .map(|k| b2[k] + (0..h).map(|j| hidden[j] * w2[j * c + k]).sum::<f64>())
        .collect();
    (hidden, logits)
}

fn mean_features(widths: &[usize], params: &[f64], rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = rows.rows() as f64;
    let mut h = vec![0.0; widths[1]];
    let mut z = vec![0.0; widths[2]];
    for i in 0..rows.rows() {
        let (hi, zi) = mlp_features(widths, params, rows.row(i));
        h.iter_mut().zip(&hi).for_each(|(a, b)| *a += b / n);
        z.iter_mut().zip(&zi).for_each(|(a, b)| *a += b / n);
    }
    (h, z)
}

#[test]
fn matching_loss_agrees_with_hand_computation() {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    for seed in 0..20 {
        let (model, batches, syn) = random_instance(seed);
        let Architecture::Mlp { widths } = model.architecture().clone() else {
            continue;
        };
        let mut expected = 0.0;
        for b in &batches {
            let (rh, rz) = mean_features(&widths, model.params().as_slice(), &b.inputs);
            let (sh, sz) = mean_features(&widths, model.params().as_slice(), &syn.class_block(b.class).unwrap());
            expected += sq(&rh, &sh) + sq(&rz, &sz);
        }
        let got = dm_loss(&model, &batches, &syn).unwrap();
        assert!((got - expected).abs() <= 1e-10, "seed {seed}: {got} vs {expected}");
    }
}

#[test]
fn noiseless_private_gradient_tracks_exact_gradient() {
    let (model, batches, syn) = random_instance(1);
    let (_, full) = dm_loss_grad(&model, &batches, &syn).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for b in &batches {
        let pe = per_example_grads(&model, b, &syn).unwrap();
        let private = privatize(&pe, 1e12, 0.0, &mut rng).unwrap();
        let rows: Vec<usize> = syn.class_rows(b.class).unwrap().collect();
        let exact = full.gather_rows(&rows).unwrap();
        for (p, e) in private.data().iter().zip(exact.data()) {
            assert!((p - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_noise_ignores_clip_bound() {
    let data = gen_blobs(20, 3, 2, 0.6, 3).unwrap();
    let model = Model::init(Architecture::Mlp { widths: vec![2, 6, 3] }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let base = ClientConfig { iterations: 15, ipc: 3, real_batch: 10, ..ClientConfig::default() };
    let a = client_update(0, &data, &model, &base, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let wide = ClientConfig { clip: 1e12, ..base };
    let b = client_update(0, &data, &model, &wide, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn private_updates_are_noisy_but_keep_labels() {
    let data = gen_blobs(20, 3, 2, 0.6, 3).unwrap();
    let model = Model::init(Architecture::Mlp { widths: vec![2, 6, 3] }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = ClientConfig { iterations: 10, ipc: 2, real_batch: 8, sigma: 1.0, clip: 1.0, ..ClientConfig::default() };
    let init = init_synthetic(0, &data, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let a = client_update(0, &data, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = client_update(0, &data, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.labels(), init.labels());
    assert_ne!(a.inputs(), init.inputs());
    assert_ne!(a.inputs(), b.inputs());
}
