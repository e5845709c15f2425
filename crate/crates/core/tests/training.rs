use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uqsynth_core::nn::{DropoutStreams, Heads, Network, ParamStore, UNet, UNetConfig};
use uqsynth_core::synth::{generate_pair, PhantomConfig};
use uqsynth_core::tape::{Tape, Var};
use uqsynth_core::tensor::Tensor;
use uqsynth_core::train::{
    self, batch_gradients, evaluate_loss, hetero_loss, mse_loss, AdamWState, LossKind, OptimHyper,
    TrainConfig, TrainPair,
};
use uqsynth_core::Result;

/// Per-point dense network on `[N, 1, 1, 1]` inputs built from 1×1 convolutions.
#[derive(Clone)]
struct Dense {
    params: ParamStore,
    two_heads: bool,
}

impl Dense {
    fn new(hidden: usize, two_heads: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
            )
            .unwrap()
        };
        let mut params = ParamStore::new();
        params.push("w1", init(&[hidden, 1, 1, 1], 2.0)).unwrap();
        params.push("b1", init(&[hidden], 1.0)).unwrap();
        params
            .push("w_mean", init(&[1, hidden, 1, 1], 0.3))
            .unwrap();
        params.push("b_mean", Tensor::zeros(&[1])).unwrap();
        if two_heads {
            params.push("w_s", init(&[1, hidden, 1, 1], 0.01)).unwrap();
            params.push("b_s", Tensor::zeros(&[1])).unwrap();
        }
        Self { params, two_heads }
    }
}

impl Network for Dense {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn two_heads(&self) -> bool {
        self.two_heads
    }

    fn dropout_rate(&self) -> f64 {
        0.0
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        _dropout: Option<&mut DropoutStreams>,
    ) -> Result<Heads> {
        let h = tape.conv2d(x, p[0], Some(p[1]), 1, 0)?;
        let h = tape.relu(h)?;
        let mean = tape.conv2d(h, p[2], Some(p[3]), 1, 0)?;
        let log_var = if self.two_heads {
            Some(tape.conv2d(h, p[4], Some(p[5]), 1, 0)?)
        } else {
            None
        };
        Ok(Heads { mean, log_var })
    }
}

fn point(x: f64, y: f64) -> TrainPair {
    TrainPair {
        x: Tensor::new(&[1, 1, 1, 1], vec![x]).unwrap(),
        y: Tensor::new(&[1, 1, 1, 1], vec![y]).unwrap(),
    }
}

/// 64 points of `sin(πx)` with noise whose std grows with `|x|`.
fn toy_regression(seed: u64) -> Vec<TrainPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    (0..64)
        .map(|i| {
            let x = -1.0 + 2.0 * i as f64 / 63.0;
            let sigma = 0.05 + 0.2 * x.abs();
            point(
                x,
                (std::f64::consts::PI * x).sin() + sigma * z.sample(&mut rng),
            )
        })
        .collect()
}

fn scalar_loss(y: f64, y_hat: f64, s: f64) -> f64 {
    let mut tape = Tape::new();
    let t = |v| Tensor::new(&[1], vec![v]).unwrap();
    let (a, b, c) = (
        tape.constant(t(y)),
        tape.constant(t(y_hat)),
        tape.constant(t(s)),
    );
    let l = hetero_loss(&mut tape, a, b, c).unwrap();
    tape.value(l).item()
}

#[test]
fn hetero_loss_known_values() {
    assert_eq!(scalar_loss(0.7, 0.7, 0.0), 0.0);
    assert_eq!(scalar_loss(2.0, 0.0, 0.0), 2.0);
    let expected = 0.5 * (-1.0f64).exp() + 0.5;
    assert!((scalar_loss(1.0, 0.0, 1.0) - expected).abs() < 1e-15);
    assert!((expected - 0.6839397).abs() < 1e-7);
}

#[test]
fn hetero_loss_minimiser_matches_squared_residual() {
    let r = 0.5;
    let step = 1e-3;
    let grid: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * step).collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|a, b| scalar_loss(r, 0.0, *a).total_cmp(&scalar_loss(r, 0.0, *b)))
        .unwrap();
    let exact = (r * r).ln();
    assert!(
        (best - exact).abs() <= step,
        "argmin {best} vs ln r² {exact}"
    );
    assert!((best.exp() - 0.25).abs() < 1e-3);
}

#[test]
fn hetero_loss_with_zero_log_variance_is_half_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let shape = [2, 1, 4, 3];
        let n = 24;
        let y = Tensor::new(
            &shape,
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let y_hat = Tensor::new(
            &shape,
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let (a, b, s) = (
            tape.constant(y),
            tape.constant(y_hat),
            tape.constant(Tensor::zeros(&shape)),
        );
        let h = hetero_loss(&mut tape, a, b, s).unwrap();
        let m = mse_loss(&mut tape, a, b).unwrap();
        let (h, m) = (tape.value(h).item(), tape.value(m).item());
        assert!(
            (h - 0.5 * m).abs() <= 1e-12,
            "trial {trial}: {h} vs {}",
            0.5 * m
        );
    }
}

#[test]
fn mse_loss_known_values() {
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::from_vec(vec![0.0, 2.0]));
    let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let l = mse_loss(&mut tape, y, z).unwrap();
    assert_eq!(tape.value(l).item(), 2.0);
    let l0 = mse_loss(&mut tape, y, y).unwrap();
    assert_eq!(tape.value(l0).item(), 0.0);
}

/// Mean head only; the log-variance is the constant 0.
#[derive(Clone)]
struct FrozenVariance(Dense);

impl Network for FrozenVariance {
    fn params(&self) -> &ParamStore {
        self.0.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self.0.params_mut()
    }
    fn two_heads(&self) -> bool {
        true
    }
    fn dropout_rate(&self) -> f64 {
        0.0
    }
    fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        d: Option<&mut DropoutStreams>,
    ) -> Result<Heads> {
        let heads = self.0.forward(tape, p, x, d)?;
        let shape = tape.value(heads.mean).shape().to_vec();
        let s = tape.constant(Tensor::zeros(&shape));
        Ok(Heads {
            mean: heads.mean,
            log_var: Some(s),
        })
    }
}

#[test]
fn frozen_variance_trajectory_equals_half_mse() {
    let data = toy_regression(4);
    let batch: Vec<&TrainPair> = data.iter().take(16).collect();
    let hyper = OptimHyper::default();
    let mut hetero = FrozenVariance(Dense::new(8, false, 5));
    let mut half_mse = hetero.clone();
    let mut st_h = AdamWState::new(hetero.params());
    let mut st_m = AdamWState::new(half_mse.params());
    for _ in 0..25 {
        let (_, gh) = batch_gradients(&hetero, &batch, LossKind::Hetero, None).unwrap();
        let (_, gm) = batch_gradients(&half_mse, &batch, LossKind::Mse, None).unwrap();
        let gm: Vec<Vec<f64>> = gm
            .iter()
            .map(|g| g.iter().map(|v| 0.5 * v).collect())
            .collect();
        st_h.step(hetero.params_mut(), &gh, &hyper).unwrap();
        st_m.step(half_mse.params_mut(), &gm, &hyper).unwrap();
        for (a, b) in hetero.params().iter().zip(half_mse.params().iter()) {
            assert_eq!(a.value, b.value, "{} diverged", a.name);
        }
    }
}

fn one_scalar(theta: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.push("theta", Tensor::from_vec(vec![theta])).unwrap();
    p
}

#[test]
fn adam_first_steps_match_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hyper = OptimHyper {
        weight_decay: 0.0,
        ..OptimHyper::default()
    };
    for _ in 0..10 {
        let theta0: f64 = rng.random_range(-2.0..2.0);
        let g1: f64 = rng.random_range(-2.0..2.0);
        let g2: f64 = rng.random_range(-2.0..2.0);
        let mut p = one_scalar(theta0);
        let mut st = AdamWState::new(&p);

        st.step(&mut p, &[vec![g1]], &hyper).unwrap();
        let (b1, b2, lr, eps) = (hyper.beta1, hyper.beta2, hyper.learning_rate, hyper.epsilon);
        let theta1 = theta0 - lr * g1 / (g1.abs() + eps);
        assert!((p.get(0).value.data()[0] - theta1).abs() < 1e-15);

        st.step(&mut p, &[vec![g2]], &hyper).unwrap();
        let m = b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2;
        let v = b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2;
        let m_hat = m / (1.0 - b1 * b1);
        let v_hat = v / (1.0 - b2 * b2);
        let theta2 = theta1 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p.get(0).value.data()[0] - theta2).abs() < 1e-14);
    }
}

#[test]
fn adam_zero_gradient_without_decay_is_a_no_op() {
    let hyper = OptimHyper {
        weight_decay: 0.0,
        ..OptimHyper::default()
    };
    let mut p = one_scalar(0.37);
    let mut st = AdamWState::new(&p);
    for _ in 0..5 {
        st.step(&mut p, &[vec![0.0]], &hyper).unwrap();
    }
    assert_eq!(p.get(0).value.data()[0], 0.37);
    let first = OptimHyper {
        weight_decay: 0.0,
        ..OptimHyper::default()
    };
    let mut q = one_scalar(0.0);
    let mut st = AdamWState::new(&q);
    st.step(&mut q, &[vec![1.0]], &first).unwrap();
    assert!((q.get(0).value.data()[0] + 0.003).abs() < 1e-10);
}

fn exact_linear_model() -> (Dense, Vec<TrainPair>) {
    // y = 2·relu(x) for x > 0: one hidden unit reproduces it exactly
    let mut net = Dense::new(1, false, 0);
    for (name, v) in [("w1", 1.0), ("b1", 0.0), ("w_mean", 2.0), ("b_mean", 0.0)] {
        let i = net.params.index_of(name).unwrap();
        net.params.iter_mut().nth(i).unwrap().value.data_mut()[0] = v;
    }
    let pairs = (1..=20)
        .map(|i| point(i as f64 / 20.0, 2.0 * i as f64 / 20.0))
        .collect();
    (net, pairs)
}

#[test]
fn plateau_stops_quickly_at_a_loss_floor() {
    let (mut net, pairs) = exact_linear_model();
    let cfg = TrainConfig {
        plateau_patience: 1,
        ..TrainConfig::default()
    };
    let hyper = OptimHyper {
        weight_decay: 0.0,
        batch_size: 4,
        ..OptimHyper::default()
    };
    let report = train::train(&mut net, &pairs, Some(&pairs), &cfg, &hyper, LossKind::Mse).unwrap();
    assert!(
        report.history.len() <= 2,
        "ran {} epochs",
        report.history.len()
    );
    assert_eq!(report.best_val_loss, 0.0);
}

#[test]
fn loss_history_is_deterministic() {
    let data = toy_regression(7);
    let cfg = TrainConfig {
        max_epochs: 15,
        seed: 8,
        ..TrainConfig::default()
    };
    let hyper = OptimHyper {
        batch_size: 16,
        ..OptimHyper::default()
    };
    let run = || {
        let mut net = Dense::new(8, true, 9);
        let r = train::train(&mut net, &data, None, &cfg, &hyper, LossKind::Hetero).unwrap();
        let losses: Vec<(u64, u64)> = r
            .history
            .iter()
            .map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits()))
            .collect();
        (losses, net.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for (x, y) in pa.iter().zip(pb.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn epoch_budget_repeats_whole_passes() {
    let data = toy_regression(21);
    let (train_set, val_set) = data.split_at(40);
    let hyper = OptimHyper {
        batch_size: 16,
        ..OptimHyper::default()
    };
    let run = |max_epochs, min_epoch_samples| {
        let mut net = Dense::new(8, true, 22);
        let cfg = TrainConfig {
            max_epochs,
            plateau_patience: 100,
            min_epoch_samples,
            seed: 23,
            ..TrainConfig::default()
        };
        let report = train::train(
            &mut net,
            train_set,
            Some(val_set),
            &cfg,
            &hyper,
            LossKind::Hetero,
        )
        .unwrap();
        report
            .history
            .iter()
            .map(|e| (e.train_loss, e.val_loss))
            .collect::<Vec<_>>()
    };
    let single = run(3, 0);
    assert_eq!(run(3, 40), single);
    assert_eq!(run(3, 1), single);

    // 81 samples need three passes over 40 pairs
    let budget = run(1, 81);
    assert_eq!(budget.len(), 1);
    assert_eq!(budget[0].1, single[2].1);
    let mean_train = single.iter().map(|e| e.0).sum::<f64>() / 3.0;
    assert!((budget[0].0 - mean_train).abs() <= 1e-12 * mean_train.abs().max(1.0));
}

#[test]
fn toy_heteroscedastic_regression_halves_the_loss() {
    let data = toy_regression(10);
    let mut net = Dense::new(16, true, 11);
    let hyper = OptimHyper {
        batch_size: 16,
        learning_rate: 0.01,
        ..OptimHyper::default()
    };
    let initial = evaluate_loss(&net, &data, LossKind::Hetero, 64).unwrap();
    let cfg = TrainConfig {
        max_epochs: 400,
        plateau_patience: 400,
        seed: 12,
        ..TrainConfig::default()
    };
    let report =
        train::train(&mut net, &data, Some(&data), &cfg, &hyper, LossKind::Hetero).unwrap();
    let final_loss = evaluate_loss(&net, &data, LossKind::Hetero, 64).unwrap();
    let first = report.history.first().unwrap().train_loss;
    let last = report.history.last().unwrap().train_loss;
    assert!(last < first);
    assert!(
        initial - final_loss >= 0.5 * initial.abs(),
        "initial {initial}, final {final_loss}"
    );
}

#[test]
fn best_weights_are_restored() {
    let data = toy_regression(13);
    let (train_set, val_set) = data.split_at(48);
    let mut net = Dense::new(8, true, 14);
    let cfg = TrainConfig {
        max_epochs: 40,
        plateau_patience: 40,
        seed: 15,
        ..TrainConfig::default()
    };
    let hyper = OptimHyper {
        batch_size: 8,
        learning_rate: 0.05,
        ..OptimHyper::default()
    };
    let report = train::train(
        &mut net,
        train_set,
        Some(val_set),
        &cfg,
        &hyper,
        LossKind::Hetero,
    )
    .unwrap();
    let min = report
        .history
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min);
    let now = evaluate_loss(&net, val_set, LossKind::Hetero, 64).unwrap();
    assert!(
        (now - min).abs() <= 1e-12 * min.abs().max(1.0),
        "{now} vs {min}"
    );
    assert_eq!(
        report.history[report.best_epoch - 1].val_loss,
        min,
        "best epoch bookkeeping"
    );
}

#[test]
fn history_csv_has_expected_header() {
    let data = toy_regression(16);
    let mut net = Dense::new(4, true, 17);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let r = train::train(
        &mut net,
        &data,
        None,
        &cfg,
        &OptimHyper::default(),
        LossKind::Hetero,
    )
    .unwrap();
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,train_loss,val_loss,learning_rate,wall_seconds")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn hetero_loss_rejects_single_head_models() {
    let mut net = Dense::new(4, false, 0);
    let data = toy_regression(0);
    let err = train::train(
        &mut net,
        &data,
        None,
        &TrainConfig::default(),
        &OptimHyper::default(),
        LossKind::Hetero,
    );
    assert!(matches!(err, Err(uqsynth_core::Error::Contract(_))));
}

fn layer_params(out: usize, inp: usize, k: usize) -> usize {
    out * inp * k * k + out
}

/// Parameter count from the layer list, independent of the model code.
fn unet_param_oracle(cfg: &UNetConfig) -> (usize, usize) {
    let w = |l: usize| cfg.base_channels << l;
    let mut trunk = layer_params(w(0), cfg.in_channels, 3);
    for l in 1..=cfg.depth {
        trunk += layer_params(w(l), w(l - 1), 3);
        trunk += layer_params(w(l - 1), w(l), cfg.upsample_kernel);
        trunk += layer_params(w(l - 1), 2 * w(l - 1), 3);
    }
    let head_in = w(0) + cfg.in_channels;
    let head = layer_params(cfg.base_channels, head_in, cfg.head_kernels[0])
        + layer_params(cfg.out_channels, cfg.base_channels, cfg.head_kernels[1]);
    (trunk + head, head)
}

#[test]
fn parameter_counts_match_layer_arithmetic() {
    let cfg = UNetConfig::default();
    let (single, head) = unet_param_oracle(&cfg);
    let proposed = UNet::new(cfg.clone(), 0).unwrap();
    let baseline = UNet::new(cfg.baseline(), 0).unwrap();
    assert_eq!(baseline.parameter_count(), single);
    assert_eq!(proposed.parameter_count(), single + head);
    assert_eq!(
        proposed.trunk_and_mean_head_count(),
        baseline.parameter_count()
    );
    assert_eq!(proposed.parameter_count(), 467_906);
    for (p, b) in proposed.params().iter().zip(baseline.params().iter()) {
        assert_eq!(p.name, b.name);
        assert_eq!(p.value.shape(), b.value.shape());
    }
}

#[test]
fn forward_shapes() {
    let cfg = UNetConfig::default();
    let x = Tensor::full(&[1, 1, 32, 32], 0.5);
    for two in [true, false] {
        let c = if two { cfg.clone() } else { cfg.baseline() };
        let net = UNet::new(c, 1).unwrap();
        let mut tape = Tape::new();
        let (_, heads) = net.run(&mut tape, x.clone(), None, false).unwrap();
        assert_eq!(tape.value(heads.mean).shape(), &[1, 1, 32, 32]);
        assert_eq!(heads.log_var.is_some(), two);
        if let Some(s) = heads.log_var {
            assert_eq!(tape.value(s).shape(), &[1, 1, 32, 32]);
        }
    }
}

#[test]
fn forward_determinism_with_and_without_dropout() {
    let net = UNet::new(UNetConfig::default(), 2).unwrap();
    let x = generate_pair(3, &PhantomConfig::default()).x.to_tensor();
    let run = |dropout: Option<u64>| {
        let mut tape = Tape::new();
        let mut streams = dropout.map(DropoutStreams::single);
        let (_, h) = net
            .run(&mut tape, x.clone(), streams.as_mut(), false)
            .unwrap();
        (
            tape.value(h.mean).clone(),
            tape.value(h.log_var.unwrap()).clone(),
        )
    };
    assert_eq!(run(None), run(None));
    assert_eq!(run(Some(4)), run(Some(4)));
    assert_ne!(run(Some(4)), run(Some(5)));
}

#[test]
fn fresh_variance_head_starts_near_one() {
    let x = generate_pair(6, &PhantomConfig::default()).x.to_tensor();
    for seed in 0..10 {
        let net = UNet::new(UNetConfig::default(), seed).unwrap();
        let mut tape = Tape::new();
        let (_, h) = net.run(&mut tape, x.clone(), None, false).unwrap();
        let s = tape.value(h.log_var.unwrap());
        let mean_var = s.data().iter().map(|v| v.exp()).sum::<f64>() / s.len() as f64;
        assert!(
            (0.5..=2.0).contains(&mean_var),
            "seed {seed}: mean exp(s) = {mean_var}"
        );
    }
}
