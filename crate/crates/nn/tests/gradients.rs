use qsine_nn::layer::activate;
use qsine_nn::{finite_diff_check, Activation, LayerSpec, Mode, Network, NetworkBuilder, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` apart in magnitude from zero.
fn off_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = r.random_range(gap..1.5);
            if r.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum of squares, so every output entry gets a distinct gradient.
fn loss(out: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (k, o) in out.iter().enumerate() {
        let w: Vec<f64> = (0..o.len()).map(|i| 0.5 + ((i + 3 * k) % 7) as f64 * 0.1).collect();
        total += o.data().iter().zip(&w).map(|(y, w)| w * y * y).sum::<f64>();
        let g = o.data().iter().zip(&w).map(|(y, w)| 2.0 * w * y).collect();
        grads.push(Tensor::new(o.shape().to_vec(), g).unwrap());
    }
    (total, grads)
}

fn single(input: &[usize], specs: &[LayerSpec], seed: u64) -> Network<f64> {
    let mut b = NetworkBuilder::<f64>::new(seed);
    let x = b.input("x", input).unwrap();
    let y = b.chain("l", x, specs).unwrap();
    b.output(y).unwrap();
    b.build().unwrap()
}

fn check(net: &Network<f64>, x: Tensor<f64>, tol: f64) {
    let r = finite_diff_check(net, &[x], loss, 40, H, 7).unwrap();
    assert!(r.max_rel_error <= tol, "{r:?}");
    assert!(r.checked > 0);
}

#[test]
fn dense_gradient() {
    let net = single(&[6], &[LayerSpec::dense(6, 4), LayerSpec::dense(4, 3)], 1);
    check(&net, random(&[5, 6], 2, -1.0, 1.0), 1e-7);
}

#[test]
fn conv_gradient_linear() {
    let net = single(&[9, 3], &[LayerSpec::conv(3, 4, 3), LayerSpec::conv(4, 2, 2)], 3);
    check(&net, random(&[2, 9, 3], 4, -1.0, 1.0), 1e-7);
}

#[test]
fn conv_relu_gradient_off_kink() {
    // pick a seed whose conv pre-activations all stay clear of zero
    let x = random(&[3, 8, 2], 5, -1.0, 1.0);
    let seed = (0..200)
        .find(|&s| {
            let conv = single(&[8, 2], &[LayerSpec::conv(2, 4, 3)], s);
            let z = conv.infer(std::slice::from_ref(&x)).unwrap();
            z[0].data().iter().all(|v| v.abs() >= 1e-3)
        })
        .expect("some seed keeps pre-activations off the kink");
    let net = single(&[8, 2], &[LayerSpec::conv(2, 4, 3), LayerSpec::Activation(Activation::Relu)], seed);
    check(&net, x, 1e-5);
}

#[test]
fn relu_gradient() {
    let net = single(&[7], &[LayerSpec::Activation(Activation::Relu), LayerSpec::dense(7, 2)], 1);
    check(&net, off_zero(&[4, 7], 6, 1e-3), 1e-5);
}

#[test]
fn maxpool_gradient_distinct_window_values() {
    // a shuffled grid with spacing 0.01 keeps every window maximum unique
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut vals: Vec<f64> = (0..2 * 9 * 3).map(|i| i as f64 * 0.01 - 0.3).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![2, 9, 3], vals).unwrap();
    let net = single(&[9, 3], &[LayerSpec::MaxPool1d { size: 2 }, LayerSpec::MaxPool1d { size: 5 }], 0);
    check(&net, x, 1e-5);
}

#[test]
fn batch_norm_train_gradient() {
    let net = single(&[6, 3], &[LayerSpec::conv(3, 4, 3), LayerSpec::batch_norm(4)], 9);
    check(&net, random(&[4, 6, 3], 10, -2.0, 2.0), 1e-5);
}

#[test]
fn batch_norm_infer_gradient() {
    let mut net = single(&[5], &[LayerSpec::batch_norm(5), LayerSpec::dense(5, 2)], 11);
    let x = random(&[6, 5], 12, -2.0, 3.0);
    net.forward(std::slice::from_ref(&x)).unwrap(); // non-trivial running stats
    net.set_mode(Mode::Infer);
    check(&net, x, 1e-7);
}

#[test]
fn selu_gradient() {
    let net = single(&[5], &[LayerSpec::dense(5, 6), LayerSpec::Activation(Activation::Selu)], 13);
    check(&net, off_zero(&[4, 5], 14, 1e-3), 1e-5);
}

#[test]
fn softmax_gradient() {
    let net = single(&[4], &[LayerSpec::dense(4, 5), LayerSpec::Activation(Activation::Softmax)], 15);
    check(&net, random(&[3, 4], 16, -2.0, 2.0), 1e-5);
}

#[test]
fn dropout_flatten_gradient() {
    let net = single(
        &[4, 3],
        &[
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.7, seed: 17 },
            LayerSpec::dense(12, 3),
        ],
        17,
    );
    check(&net, random(&[5, 4, 3], 18, -1.0, 1.0), 1e-7);
}

#[test]
fn detection_shaped_network_gradient() {
    let specs = [
        LayerSpec::conv(2, 4, 3),
        LayerSpec::MaxPool1d { size: 2 },
        LayerSpec::batch_norm(4),
        LayerSpec::Flatten,
        LayerSpec::Dropout { rate: 0.5, seed: 3 },
        LayerSpec::dense(16, 6),
        LayerSpec::Activation(Activation::Selu),
        LayerSpec::dense(6, 3),
        LayerSpec::Activation(Activation::Softmax),
    ];
    let net = single(&[8, 2], &specs, 19);
    let r = finite_diff_check(&net, &[random(&[4, 8, 2], 20, -1.0, 1.0)], loss, 40, H, 3).unwrap();
    // maxpool may sit near a tie for some probes; the bound stays loose only
    // for this composite check
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn concurrent_inference_matches_serial() {
    let specs = [LayerSpec::conv(2, 4, 3), LayerSpec::batch_norm(4), LayerSpec::Flatten, LayerSpec::dense(32, 2)];
    let net = single(&[8, 2], &specs, 21).cast::<f32>();
    let frames: Vec<Tensor<f32>> = (0..8).map(|s| random(&[1, 8, 2], 100 + s, -1.0, 1.0).cast()).collect();
    let serial: Vec<_> = frames.iter().map(|f| net.infer(std::slice::from_ref(f)).unwrap()).collect();
    let parallel: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> =
            frames.iter().map(|f| s.spawn(|| net.infer(std::slice::from_ref(f)).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = v.len();
        let p = activate(Activation::Softmax, &Tensor::new(vec![1, n], v).unwrap());
        prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant(v in proptest::collection::vec(-20.0f64..20.0, 2..8), c in -30.0f64..30.0) {
        let n = v.len();
        let a = activate(Activation::Softmax, &Tensor::new(vec![1, n], v.clone()).unwrap());
        let b = activate(Activation::Softmax, &Tensor::new(vec![1, n], v.iter().map(|x| x + c).collect()).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
