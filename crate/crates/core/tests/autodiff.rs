use fdnas_core::autodiff::{finite_diff_grad, max_relative_error, Primitive, Tape, Tensor, BN_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Same-padded convolution straight from the definition. `groups == cin`
/// gives the depthwise variant.
fn conv_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    depthwise: bool,
) -> Vec<f64> {
    let [b, cin, h, wd] = xs;
    let pad = (k / 2) as isize;
    let ho = (h + 2 * (k / 2) - k) / stride + 1;
    let wo = (wd + 2 * (k / 2) - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    let inputs: Vec<usize> = if depthwise { vec![co] } else { (0..cin).collect() };
                    for (wi, &ci) in inputs.iter().enumerate() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * inputs.len() + wi) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_definition(
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 1usize..7, wd in 1usize..7,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(&mut rng, b * cin * h * wd);
        let w = random_vec(&mut rng, cout * cin * k * k);
        let expect = conv_oracle(&x, [b, cin, h, wd], &w, cout, k, stride, false);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![b, cin, h, wd], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![cout, cin, k, k], w).unwrap());
        let y = tape.conv2d(xv, wv, stride).unwrap();
        let got = tape.value(y).data();
        prop_assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            prop_assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn depthwise_matches_direct_definition(
        b in 1usize..3, c in 1usize..4, h in 1usize..7, wd in 1usize..7,
        k in prop::sample::select(vec![3usize, 5]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(&mut rng, b * c * h * wd);
        let w = random_vec(&mut rng, c * k * k);
        let expect = conv_oracle(&x, [b, c, h, wd], &w, c, k, stride, true);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![b, c, h, wd], x).unwrap());
        let wv = tape.constant(Tensor::new(vec![c, 1, k, k], w).unwrap());
        let y = tape.depthwise_conv2d(xv, wv, stride).unwrap();
        for (g, e) in tape.value(y).data().iter().zip(&expect) {
            prop_assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }
}

/// Builds `CE(linear(flatten(op(inputs))))` with a fixed random readout and
/// returns the loss value plus the gradient of every input.
fn probe_loss(op: &Primitive, inputs: &[Tensor], readout_seed: u64, with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = tape.apply(op.clone(), &vars).unwrap();
    let shape = tape.value(y).shape().to_vec();
    let flat = if shape.len() > 2 { tape.flatten(y).unwrap() } else { y };
    let feat = tape.value(flat).shape()[1];
    let batch = tape.value(flat).shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(readout_seed);
    let classes = 3;
    let w = tape.constant(Tensor::new(vec![classes, feat], random_vec(&mut rng, classes * feat)).unwrap());
    let bias = tape.constant(Tensor::new(vec![classes], random_vec(&mut rng, classes)).unwrap());
    let logits = tape.linear(flat, w, bias).unwrap();
    let targets: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let loss = tape.cross_entropy(logits, &targets).unwrap();
    let value = tape.value(loss).item();
    if !with_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|v| grads.leaf(*v).unwrap().to_vec()).collect();
    (value, g)
}

/// Checks the gradients of the first `differentiable` inputs.
fn check_inputs(op: Primitive, inputs: Vec<Tensor>, seed: u64, differentiable: usize) {
    let (_, analytic) = probe_loss(&op, &inputs, seed, true);
    for (n, input) in inputs.iter().enumerate().take(differentiable) {
        let numeric = finite_diff_grad(
            |theta| {
                let mut perturbed = inputs.clone();
                perturbed[n] = Tensor::new(input.shape().to_vec(), theta.to_vec()).unwrap();
                probe_loss(&op, &perturbed, seed, false).0
            },
            input.data(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic[n], &numeric, 1e-4);
        assert!(err < 1e-5, "{} input {n}: relative error {err}", op.name());
    }
    for g in &analytic[differentiable..] {
        assert!(g.iter().all(|v| *v == 0.0), "{}: constant inputs get no gradient", op.name());
    }
}

fn check_primitive(op: Primitive, inputs: Vec<Tensor>, seed: u64) {
    let n = inputs.len();
    check_inputs(op, inputs, seed, n);
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), random_vec(rng, shape.iter().product())).unwrap()
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&mut rng, &[2, 3, 5, 5]);
        for stride in [1, 2] {
            for k in [1, 3, 5] {
                check_primitive(Primitive::Conv2d { stride }, vec![x.clone(), tensor(&mut rng, &[2, 3, k, k])], seed);
            }
            for k in [3, 5] {
                check_primitive(
                    Primitive::DepthwiseConv2d { stride },
                    vec![x.clone(), tensor(&mut rng, &[3, 1, k, k])],
                    seed,
                );
            }
        }
        let gamma = tensor(&mut rng, &[3]);
        let beta = tensor(&mut rng, &[3]);
        check_primitive(
            Primitive::BatchNorm { training: true, eps: BN_EPS },
            vec![x.clone(), gamma.clone(), beta.clone()],
            seed,
        );
        let mean = tensor(&mut rng, &[3]);
        let var = Tensor::from_vec(vec![0.5, 1.0, 2.0]);
        check_inputs(
            Primitive::BatchNorm { training: false, eps: BN_EPS },
            vec![x.clone(), gamma, beta, mean, var],
            seed,
            3,
        );
        // Keep relu6 inputs away from its kinks at 0 and 6.
        let r =
            Tensor::new(vec![2, 3, 2, 2], (0..24).map(|i| [-1.3, 0.4, 2.2, 7.5][i % 4] + 0.01 * i as f64).collect())
                .unwrap();
        check_primitive(Primitive::Relu6, vec![r], seed);
        check_primitive(Primitive::GlobalAvgPool, vec![x.clone()], seed);
        check_primitive(Primitive::Add, vec![x.clone(), tensor(&mut rng, &[2, 3, 5, 5])], seed);
        check_primitive(Primitive::Scale, vec![x.clone(), Tensor::scalar(0.7)], seed);
        check_primitive(
            Primitive::Linear,
            vec![tensor(&mut rng, &[4, 5]), tensor(&mut rng, &[3, 5]), tensor(&mut rng, &[3])],
            seed,
        );
    }
}

#[test]
fn gradients_accumulate_over_reuse() {
    // y = x + x: every use contributes.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &[2.0, 2.0, 2.0]);
}
