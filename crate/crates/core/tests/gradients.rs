//! Finite-difference checks of reverse-mode gradients for every op and for
//! each forecaster family on tiny instances.

use gridcast::autodiff::{gradient_check, Graph, ParamStore, Tensor, Var};
use gridcast::covariates::COVARIATE_WIDTH;
use gridcast::models::data::{Batch, Network, Prepared};
use gridcast::models::{LstmEdConfig, LstmEdNet, NBeatsConfig, NBeatsNet, TcnConfig, TcnNet};
use gridcast::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(params: &mut ParamStore, build: impl Fn(&mut Graph) -> Result<Var>) {
    let report = gradient_check(params, STEP, build).unwrap();
    assert!(report.entries_checked > 0);
    assert!(
        report.passes(TOLERANCE),
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn elementwise_ops() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let a = p.add("a", random(&mut rng, &[3, 4])).unwrap();
        let b = p.add("b", random(&mut rng, &[3, 4])).unwrap();
        let target = random(&mut rng, &[3, 4]);
        check(&mut p, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let s = g.add(a, b)?;
            let d = g.sub(a, b)?;
            let m = g.mul(s, d)?;
            let sig = g.sigmoid(m)?;
            let th = g.tanh(b)?;
            let y = g.mul(sig, th)?;
            let y = g.scale(y, 1.7)?;
            let t = g.input(target.clone())?;
            g.mse(y, t)
        });
    }
}

#[test]
fn shape_ops() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let a = p.add("a", random(&mut rng, &[2, 3])).unwrap();
        let b = p.add("b", random(&mut rng, &[2, 5])).unwrap();
        let w = p.add("w", random(&mut rng, &[4, 3])).unwrap();
        let target = random(&mut rng, &[2, 3]);
        check(&mut p, |g| {
            let (a, b, w) = (g.param(a), g.param(b), g.param(w));
            let c = g.concat(&[a, b])?;
            let n = g.narrow(c, 1, 2, 4)?;
            let r = g.reshape(n, &[2, 4])?;
            let y = g.matmul(r, w)?;
            let y = g.tanh(y)?;
            let t = g.input(target.clone())?;
            g.mse(y, t)
        });
    }
}

#[test]
fn dense_relu_stack() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let w1 = p.add("w1", random(&mut rng, &[5, 6])).unwrap();
        let b1 = p.add("b1", random(&mut rng, &[6])).unwrap();
        let w2 = p.add("w2", random(&mut rng, &[6, 6])).unwrap();
        let b2 = p.add("b2", random(&mut rng, &[6])).unwrap();
        let w3 = p.add("w3", random(&mut rng, &[6, 2])).unwrap();
        let b3 = p.add("b3", random(&mut rng, &[2])).unwrap();
        let x = random(&mut rng, &[4, 5]);
        let target = random(&mut rng, &[4, 2]);
        check(&mut p, |g| {
            let x = g.input(x.clone())?;
            let (w1, b1, w2, b2, w3, b3) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2), g.param(w3), g.param(b3));
            let h = g.affine(x, w1, b1)?;
            let h = g.relu(h)?;
            let h = g.affine(h, w2, b2)?;
            let h = g.relu(h)?;
            let y = g.affine(h, w3, b3)?;
            let t = g.input(target.clone())?;
            g.mse(y, t)
        });
    }
}

#[test]
fn lstm_cell_unrolled_five_steps() {
    let (bsz, input, hidden) = (2, 3, 4);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let wx = p.add("wx", random(&mut rng, &[input, 4 * hidden])).unwrap();
        let wh = p.add("wh", random(&mut rng, &[hidden, 4 * hidden])).unwrap();
        let b = p.add("b", random(&mut rng, &[4 * hidden])).unwrap();
        let xs: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[bsz, input])).collect();
        let target = random(&mut rng, &[bsz, hidden]);
        check(&mut p, |g| {
            let (wx, wh, b) = (g.param(wx), g.param(wh), g.param(b));
            let mut h = g.input(Tensor::zeros(&[bsz, hidden]))?;
            let mut c = h;
            for x in &xs {
                let x = g.input(x.clone())?;
                (h, c) = g.lstm_step(x, h, c, wx, wh, b)?;
            }
            let t = g.input(target.clone())?;
            g.mse(h, t)
        });
    }
}

#[test]
fn dilated_causal_conv_stack() {
    let (bsz, t_len) = (2, 12);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let channels = [2, 3, 3, 1];
        let layers: Vec<_> = (0..3)
            .map(|i| {
                let w = p.add(format!("w{i}"), random(&mut rng, &[channels[i + 1], channels[i], 3])).unwrap();
                let b = p.add(format!("b{i}"), random(&mut rng, &[channels[i + 1]])).unwrap();
                (w, b)
            })
            .collect();
        let x = random(&mut rng, &[bsz, 2, t_len]);
        let target = random(&mut rng, &[bsz, 1, t_len]);
        check(&mut p, |g| {
            let mut h = g.input(x.clone())?;
            for (i, &(w, b)) in layers.iter().enumerate() {
                let (w, b) = (g.param(w), g.param(b));
                h = g.causal_conv1d(h, w, b, 2usize.pow(i as u32))?;
                if i < 2 {
                    h = g.relu(h)?;
                }
            }
            let t = g.input(target.clone())?;
            g.mse(h, t)
        });
    }
}

fn tiny_batch(lookback: usize, horizon: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = lookback + horizon + 3;
    let data = Prepared {
        load: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        covariates: Some((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()),
    };
    Batch::gather(&data, &[lookback, lookback + 3], lookback, horizon, true).unwrap()
}

fn check_network(net: &dyn Network, params: &mut ParamStore, batch: &Batch) {
    let target = batch.target_tensor().unwrap();
    check(params, |g| {
        let y = net.forward_train(g, batch)?;
        let t = g.input(target.clone())?;
        g.mse(y, t)
    });
}

#[test]
fn nbeats_family_gradients() {
    for seed in 0..3 {
        let cfg = NBeatsConfig {
            stacks: 2,
            blocks_per_stack: 1,
            layers_per_block: 2,
            layer_width: 4,
            expansion_coefficient_dim: 3,
            lookback: 6,
            horizon: 4,
        };
        let mut p = ParamStore::new();
        let net = NBeatsNet::init(cfg, &mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        check_network(&net, &mut p, &tiny_batch(6, 4, seed));
    }
}

#[test]
fn lstm_family_gradients() {
    for (seed, teacher_forcing) in [(0, true), (1, false)] {
        let cfg = LstmEdConfig {
            recurrent_layers: 2,
            hidden_dim: 3,
            dropout: 0.0,
            learning_rate: 1e-3,
            lookback: 4,
            covariate_width: COVARIATE_WIDTH,
            horizon: 3,
            teacher_forcing,
        };
        let mut p = ParamStore::new();
        let net = LstmEdNet::init(cfg, &mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        check_network(&net, &mut p, &tiny_batch(4, 3, seed));
    }
}

#[test]
fn tcn_family_gradients() {
    for seed in 0..3 {
        let cfg = TcnConfig {
            kernel_size: 2,
            num_filters: 3,
            dilation_base: 2,
            num_layers: None,
            lookback: 8,
            covariate_width: COVARIATE_WIDTH,
            horizon: 4,
        };
        let mut p = ParamStore::new();
        let net = TcnNet::init(cfg, &mut p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        check_network(&net, &mut p, &tiny_batch(8, 4, seed));
    }
}
