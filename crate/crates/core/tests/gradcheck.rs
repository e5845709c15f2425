//! Finite-difference and nested-loop oracles for the autodiff engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqsynth_core::nn::{
    spatial_dropout, upsample_nn_conv, DropoutStreams, Network, UNet, UNetConfig,
};
use uqsynth_core::tape::{Tape, Var};
use uqsynth_core::tensor::Tensor;
use uqsynth_core::train::{hetero_loss, mse_loss};
use uqsynth_core::Result;

const STEP: f64 = 1e-6;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2, 2] kept at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Reduces `f`'s output to a scalar with fixed random weights, then compares
/// the tape gradient of every input element with central differences.
/// Returns the largest relative error.
fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let shape = tape.value(out).shape().to_vec();
        random_tensor(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(99))
    };
    let objective = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = f(tape, vars).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = objective(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = objective(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

fn assert_op<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = max_grad_error(inputs, f);
    assert!(err <= 1e-5, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 3];
    let a = random_tensor(&shape, -2.0, 2.0, &mut rng);
    let b = random_tensor(&shape, -2.0, 2.0, &mut rng);
    let pos = random_tensor(&shape, 0.1, 2.0, &mut rng);
    let kinked = away_from(&shape, &[0.0], 1e-3, &mut rng);
    let clamped = away_from(&shape, &[-0.5, 0.5], 1e-3, &mut rng);

    assert_op("neg", std::slice::from_ref(&a), |t, v| t.neg(v[0]));
    assert_op("exp", std::slice::from_ref(&a), |t, v| t.exp(v[0]));
    assert_op("log", &[pos], |t, v| t.log(v[0]));
    assert_op("square", std::slice::from_ref(&a), |t, v| t.square(v[0]));
    assert_op("relu", &[kinked], |t, v| t.relu(v[0]));
    assert_op("scale", std::slice::from_ref(&a), |t, v| {
        t.scale(v[0], -1.75)
    });
    assert_op("clamp", &[clamped], |t, v| t.clamp(v[0], -0.5, 0.5));
    assert_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_op("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
    assert_op("mean", &[a], |t, v| t.mean(v[0]));
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&[2, 2, 3, 3], -2.0, 2.0, &mut rng);
    let y = random_tensor(&[2, 1, 3, 3], -2.0, 2.0, &mut rng);
    assert_op("upsample2x", std::slice::from_ref(&x), |t, v| {
        t.upsample2x(v[0])
    });
    assert_op("concat_channels", &[x.clone(), y], |t, v| {
        t.concat_channels(&[v[0], v[1], v[0]])
    });
    assert_op("channel_scale", std::slice::from_ref(&x), |t, v| {
        t.channel_scale(v[0], vec![0.0, 1.25, 1.25, 0.0])
    });
    assert_op("spatial_dropout", &[x], |t, v| {
        let mut streams = DropoutStreams::single(5);
        spatial_dropout(t, v[0], 0.5, Some(&mut streams))
    });
}

#[test]
fn convolution_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random_tensor(&[2, 2, 5, 5], -2.0, 2.0, &mut rng);
        let k = random_tensor(&[3, 2, 3, 3], -2.0, 2.0, &mut rng);
        let b = random_tensor(&[3], -2.0, 2.0, &mut rng);
        assert_op(
            &format!("conv2d s{stride} p{padding}"),
            &[x, k, b],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding),
        );
    }
}

#[test]
fn mean_square_conv_on_4x4_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&[1, 1, 4, 4], -2.0, 2.0, &mut rng);
    let k = random_tensor(&[1, 1, 3, 3], -2.0, 2.0, &mut rng);
    assert_op("mean(square(conv))", &[x, k], |t, v| {
        let c = t.conv2d(v[0], v[1], None, 1, 0)?;
        let s = t.square(c)?;
        t.mean(s)
    });
}

#[test]
fn upsample_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&[1, 2, 4, 4], -2.0, 2.0, &mut rng);
    let k = random_tensor(&[3, 2, 5, 5], -1.0, 1.0, &mut rng);
    let b = random_tensor(&[3], -1.0, 1.0, &mut rng);
    assert_op("upsample_nn_conv", &[x, k, b], |t, v| {
        upsample_nn_conv(t, v[0], v[1], Some(v[2]))
    });
}

#[test]
fn fused_upsample_conv_matches_explicit_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k_size in [1, 3, 5, 7] {
        let x = random_tensor(&[2, 3, 4, 3], -2.0, 2.0, &mut rng);
        let k = random_tensor(&[2, 3, k_size, k_size], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[2], -1.0, 1.0, &mut rng);
        let g = random_tensor(&[2, 2, 8, 6], -1.0, 1.0, &mut rng);
        let run = |fused: bool| {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (
                tape.leaf(x.clone(), true),
                tape.leaf(k.clone(), true),
                tape.leaf(b.clone(), true),
            );
            let y = if fused {
                upsample_nn_conv(&mut tape, xv, kv, Some(bv)).unwrap()
            } else {
                let up = tape.upsample2x(xv).unwrap();
                tape.conv2d(up, kv, Some(bv), 1, k_size / 2).unwrap()
            };
            let gv = tape.constant(g.clone());
            let prod = tape.mul(y, gv).unwrap();
            let loss = tape.sum(prod).unwrap();
            tape.backward(loss).unwrap();
            let mut all = tape.value(y).data().to_vec();
            for v in [xv, kv, bv] {
                all.extend_from_slice(tape.grad(v).unwrap().data());
            }
            all
        };
        let (fused, plain) = (run(true), run(false));
        assert_eq!(fused.len(), plain.len());
        for (a, b) in fused.iter().zip(&plain) {
            assert!((a - b).abs() <= 1e-11, "k={k_size}: {a} vs {b}");
        }
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = random_tensor(&[1, 1, 3, 3], -2.0, 2.0, &mut rng);
    let y_hat = random_tensor(&[1, 1, 3, 3], -2.0, 2.0, &mut rng);
    let s = random_tensor(&[1, 1, 3, 3], -2.0, 2.0, &mut rng);
    assert_op("hetero_loss", &[y.clone(), y_hat.clone(), s], |t, v| {
        hetero_loss(t, v[0], v[1], v[2])
    });
    assert_op("mse_loss", &[y, y_hat], |t, v| mse_loss(t, v[0], v[1]));
}

/// Direct nested-loop convolution with its three gradients for upstream `g`.
struct LoopConv {
    out: Vec<f64>,
    d_input: Vec<f64>,
    d_kernel: Vec<f64>,
    d_bias: Vec<f64>,
}

fn loop_conv(
    x: &Tensor,
    k: &Tensor,
    b: &Tensor,
    g: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<usize>, LoopConv) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xi = |ni: usize, ci: usize, r: usize, col: usize| ((ni * c + ci) * h + r) * w + col;
    let ki = |oi: usize, ci: usize, r: usize, col: usize| ((oi * c + ci) * kh + r) * kw + col;
    let yi = |ni: usize, oi: usize, r: usize, col: usize| ((ni * o + oi) * oh + r) * ow + col;
    let mut res = LoopConv {
        out: vec![0.0; n * o * oh * ow],
        d_input: vec![0.0; x.len()],
        d_kernel: vec![0.0; k.len()],
        d_bias: vec![0.0; o],
    };
    for ni in 0..n {
        for oi in 0..o {
            for r in 0..oh {
                for col in 0..ow {
                    let mut acc = b.data()[oi];
                    let up = g[yi(ni, oi, r, col)];
                    res.d_bias[oi] += up;
                    for ci in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ir = (r * stride + a) as isize - pad as isize;
                                let ic = (col * stride + bb) as isize - pad as isize;
                                if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                                    continue;
                                }
                                let (ir, ic) = (ir as usize, ic as usize);
                                acc += x.data()[xi(ni, ci, ir, ic)] * k.data()[ki(oi, ci, a, bb)];
                                res.d_input[xi(ni, ci, ir, ic)] += up * k.data()[ki(oi, ci, a, bb)];
                                res.d_kernel[ki(oi, ci, a, bb)] +=
                                    up * x.data()[xi(ni, ci, ir, ic)];
                            }
                        }
                    }
                    res.out[yi(ni, oi, r, col)] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], res)
}

fn compare_with_loops(
    x: Tensor,
    k: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut tape = Tape::new();
    let (xv, kv, bv) = (
        tape.leaf(x.clone(), true),
        tape.leaf(k.clone(), true),
        tape.leaf(b.clone(), true),
    );
    let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
    let shape = tape.value(y).shape().to_vec();
    let g = random_tensor(&shape, -1.0, 1.0, rng);
    let gv = tape.constant(g.clone());
    let prod = tape.mul(y, gv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();

    let (oracle_shape, oracle) = loop_conv(&x, &k, &b, g.data(), stride, pad);
    assert_eq!(shape, oracle_shape);
    let close = |what: &str, a: &[f64], b: &[f64]| {
        assert_eq!(a.len(), b.len());
        for (i, (p, q)) in a.iter().zip(b).enumerate() {
            assert!(
                (p - q).abs() <= 1e-10,
                "{what}[{i}]: {p} vs {q} ({:?} {:?} s{stride} p{pad})",
                x.shape(),
                k.shape()
            );
        }
    };
    close("output", tape.value(y).data(), &oracle.out);
    close("d_input", tape.grad(xv).unwrap().data(), &oracle.d_input);
    close("d_kernel", tape.grad(kv).unwrap().data(), &oracle.d_kernel);
    close("d_bias", tape.grad(bv).unwrap().data(), &oracle.d_bias);
}

#[test]
fn strided_padded_conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[1, 2, 5, 5], -2.0, 2.0, &mut rng);
    let k = random_tensor(&[3, 2, 3, 3], -2.0, 2.0, &mut rng);
    let b = random_tensor(&[3], -2.0, 2.0, &mut rng);
    compare_with_loops(x, k, b, 2, 1, &mut rng);
}

#[test]
fn fifty_random_convolutions_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut done = 0;
    while done < 50 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let o = rng.random_range(1..=4);
        let h = rng.random_range(1..=9);
        let w = rng.random_range(1..=9);
        let kh = rng.random_range(1..=5);
        let kw = rng.random_range(1..=5);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        if h + 2 * pad < kh || w + 2 * pad < kw || pad >= kh.max(kw) {
            continue;
        }
        let x = random_tensor(&[n, c, h, w], -2.0, 2.0, &mut rng);
        let k = random_tensor(&[o, c, kh, kw], -2.0, 2.0, &mut rng);
        let b = random_tensor(&[o], -2.0, 2.0, &mut rng);
        compare_with_loops(x, k, b, stride, pad, &mut rng);
        done += 1;
    }
}

#[test]
fn shared_subexpressions_match_expanded_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = random_tensor(&[4], -2.0, 2.0, &mut rng);

    // f = sum(e*e + e*x) with e = exp(x) built once and reused
    let mut shared = Tape::new();
    let xs = shared.leaf(x0.clone(), true);
    let e = shared.exp(xs).unwrap();
    let ee = shared.mul(e, e).unwrap();
    let ex = shared.mul(e, xs).unwrap();
    let s = shared.add(ee, ex).unwrap();
    let f = shared.sum(s).unwrap();
    shared.backward(f).unwrap();

    // the same function with every occurrence recomputed
    let mut tree = Tape::new();
    let x = tree.leaf(x0.clone(), true);
    let x_a = tree.scale(x, 1.0).unwrap();
    let x_b = tree.scale(x, 1.0).unwrap();
    let x_c = tree.scale(x, 1.0).unwrap();
    let x_d = tree.scale(x, 1.0).unwrap();
    let e1 = tree.exp(x_a).unwrap();
    let e2 = tree.exp(x_b).unwrap();
    let e3 = tree.exp(x_c).unwrap();
    let ee = tree.mul(e1, e2).unwrap();
    let ex = tree.mul(e3, x_d).unwrap();
    let s = tree.add(ee, ex).unwrap();
    let f2 = tree.sum(s).unwrap();
    tree.backward(f2).unwrap();

    assert_eq!(shared.value(f).item(), tree.value(f2).item());
    let g_shared = shared.grad(xs).unwrap();
    let g_tree = tree.grad(x).unwrap();
    for ((a, b), &v) in g_shared.data().iter().zip(g_tree.data()).zip(x0.data()) {
        let exact = 2.0 * (2.0 * v).exp() + v.exp() * (1.0 + v);
        assert!((a - b).abs() <= 1e-12 * exact.abs().max(1.0));
        assert!((a - exact).abs() <= 1e-12 * exact.abs().max(1.0));
    }
}

fn small_unet() -> UNet {
    let cfg = UNetConfig {
        base_channels: 2,
        image_size: 8,
        ..UNetConfig::default()
    };
    let mut net = UNet::new(cfg, 11).unwrap();
    // Zero biases put exactly-zero pre-activations on ReLU kinks wherever a
    // receptive field sees only zeros; check at a generic point instead.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for p in net
        .params_mut()
        .iter_mut()
        .filter(|p| p.name.ends_with(".bias"))
    {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    net
}

fn network_loss(net: &UNet, x: &Tensor, y: &Tensor, dropout_seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let mut streams = DropoutStreams::single(dropout_seed);
    let (params, heads) = net
        .run(&mut tape, x.clone(), Some(&mut streams), true)
        .unwrap();
    let yv = tape.constant(y.clone());
    let loss = hetero_loss(&mut tape, yv, heads.mean, heads.log_var.unwrap()).unwrap();
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap();
    let grads = params
        .iter()
        .zip(net.params().iter())
        .map(|(&v, p)| {
            tape.take_grad(v)
                .unwrap_or_else(|| vec![0.0; p.value.len()])
        })
        .collect();
    (value, grads)
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = small_unet();
    let x = random_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let y = random_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let (_, grads) = network_loss(&net, &x, &y, 13);

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, p) in net.params().iter().enumerate() {
        let picks: Vec<usize> = if p.value.len() <= 6 {
            (0..p.value.len()).collect()
        } else {
            (0..6).map(|_| rng.random_range(0..p.value.len())).collect()
        };
        for k in picks {
            let mut plus = net.clone();
            plus.params_mut()
                .iter_mut()
                .nth(pi)
                .unwrap()
                .value
                .data_mut()[k] += STEP;
            let mut minus = net.clone();
            minus
                .params_mut()
                .iter_mut()
                .nth(pi)
                .unwrap()
                .value
                .data_mut()[k] -= STEP;
            let numeric = (network_loss(&plus, &x, &y, 13).0 - network_loss(&minus, &x, &y, 13).0)
                / (2.0 * STEP);
            worst = worst.max(rel_err(grads[pi][k], numeric));
            checked += 1;
        }
    }
    assert!(checked > 50);
    assert!(
        worst <= 1e-4,
        "max relative error {worst:e} over {checked} coordinates"
    );
}
