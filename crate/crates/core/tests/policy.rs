use rand::Rng;

use rackopt::instgen::{batch_seed, generate_instance, GeneratorConfig};
use rackopt::ordering::policy::{decode_rollout, embeddings, DecodeMode, PolicyConfig, PolicyParams, Starts};
use rackopt::ordering::train::{rollout_instance, surrogate_gradient, InstanceRollout};
use rackopt::ordering::{featurize, train, TrainConfig};
use rackopt::rng::stream_rng;
use rackopt::{HeuristicConfig, Matrix};

fn config(d_model: usize, num_heads: usize) -> PolicyConfig {
    PolicyConfig {
        d_model,
        num_heads,
        num_layers: 2,
        ff_hidden: 2 * d_model,
        logit_clip: 10.0,
    }
}

fn random_features(n: usize, seed: u64) -> Matrix<f64> {
    let mut rng = stream_rng(seed, 0);
    Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn encoder_is_permutation_equivariant() {
    let params = PolicyParams::init(config(16, 4), 1).unwrap().cast::<f64>();
    let features = random_features(7, 2);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permuted = Matrix::from_rows(perm.iter().map(|&i| features.row(i).to_vec()).collect()).unwrap();
    let (h, g) = embeddings(&params, &features).unwrap();
    let (hp, gp) = embeddings(&params, &permuted).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((hp[(r, c)] - h[(i, c)]).abs() < 1e-12);
        }
    }
    for (a, b) in g.iter().zip(&gp) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_features_give_identical_embeddings() {
    let params = PolicyParams::init(config(8, 2), 4).unwrap().cast::<f64>();
    let features = Matrix::from_rows(vec![vec![0.3, -0.2], vec![0.1, 0.5], vec![0.3, -0.2]]).unwrap();
    let (h, _) = embeddings(&params, &features).unwrap();
    assert_eq!(h.row(0), h.row(2));
}

// Independent loop-based forward pass: encoder plus the first decoding step
// of a single trajectory.
mod scalar {
    use rackopt::ordering::policy::PolicyParams;

    type M = Vec<Vec<f64>>;

    fn get(p: &PolicyParams<f64>, name: &str) -> M {
        let i = p.names.iter().position(|n| n == name).unwrap();
        let t = &p.tensors[i];
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add_bias(a: &mut M, b: &M) {
        for row in a {
            for (x, y) in row.iter_mut().zip(&b[0]) {
                *x += y;
            }
        }
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
        let d = q[0].len();
        let dk = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for c in cols.clone() {
                    out[i][c] = w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum();
                }
            }
        }
        out
    }

    fn norm(x: &M, gain: &M, bias: &M) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * gain[0][c] + bias[0][c])
                    .collect()
            })
            .collect()
    }

    fn plus(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
            .collect()
    }

    pub fn first_step(p: &PolicyParams<f64>, features: &M) -> Vec<f64> {
        let cfg = p.config;
        let mut h = mm(features, &get(p, "embed.w"));
        add_bias(&mut h, &get(p, "embed.b"));
        for l in 0..cfg.num_layers {
            let t = |n: &str| get(p, &format!("enc{l}.{n}"));
            let a = attention(&mm(&h, &t("wq")), &mm(&h, &t("wk")), &mm(&h, &t("wv")), cfg.num_heads);
            let h1 = norm(&plus(&h, &mm(&a, &t("wo"))), &t("ln1.gain"), &t("ln1.bias"));
            let mut f = mm(&h1, &t("ff.w1"));
            add_bias(&mut f, &t("ff.b1"));
            for row in &mut f {
                for v in row.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            let mut f = mm(&f, &t("ff.w2"));
            add_bias(&mut f, &t("ff.b2"));
            h = norm(&plus(&h1, &f), &t("ln2.gain"), &t("ln2.bias"));
        }
        let d = cfg.d_model;
        let n = h.len() as f64;
        let graph: Vec<f64> = (0..d).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let mut ctx = graph;
        ctx.extend(vec![0.0; d]);
        let query = mm(&vec![ctx], &get(p, "dec.w_context"));
        let glimpse = attention(
            &query,
            &mm(&h, &get(p, "dec.wk_glimpse")),
            &mm(&h, &get(p, "dec.wv_glimpse")),
            cfg.num_heads,
        );
        let glimpse = mm(&glimpse, &get(p, "dec.wo_glimpse"));
        let keys = mm(&h, &get(p, "dec.wk_pointer"));
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| {
                let s: f64 = k.iter().zip(&glimpse[0]).map(|(a, b)| a * b).sum();
                cfg.logit_clip * (s / (d as f64).sqrt()).tanh()
            })
            .collect();
        softmax(&logits)
    }
}

#[test]
fn forward_matches_scalar_implementation() {
    let params = PolicyParams::init(config(4, 2), 9).unwrap().cast::<f64>();
    let features = random_features(5, 3);
    let rows: Vec<Vec<f64>> = (0..5).map(|r| features.row(r).to_vec()).collect();
    let expected = scalar::first_step(&params, &rows);
    let rollout = decode_rollout(&params, &features, Starts::Single, DecodeMode::Greedy, 0).unwrap();
    for (a, b) in rollout.steps[0][0].iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_projections_stay_finite() {
    let mut params = PolicyParams::init(config(4, 2), 9).unwrap().cast::<f64>();
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if name.contains(".w") && !name.starts_with("embed") {
            for v in t.as_mut_slice() {
                *v = 0.0;
            }
        }
    }
    let features = random_features(4, 1);
    let rows: Vec<Vec<f64>> = (0..4).map(|r| features.row(r).to_vec()).collect();
    let expected = scalar::first_step(&params, &rows);
    let rollout = decode_rollout(&params, &features, Starts::Single, DecodeMode::Sample, 3).unwrap();
    for (a, b) in rollout.steps[0][0].iter().zip(&expected) {
        assert!(a.is_finite());
        assert!((a - 0.25).abs() < 1e-12 && (b - 0.25).abs() < 1e-12);
    }
}

fn small_batch(params: &PolicyParams<f64>) -> Vec<InstanceRollout> {
    let gen = GeneratorConfig::default().with_rack_types(4);
    (0..2u64)
        .map(|i| {
            let inst = generate_instance(&gen, batch_seed(50, i)).unwrap();
            rollout_instance(&inst, params, HeuristicConfig::default(), i).unwrap()
        })
        .collect()
}

#[test]
fn double_precision_gradient_matches_finite_differences() {
    let params = PolicyParams::init(config(8, 2), 11).unwrap().cast::<f64>();
    let batch = small_batch(&params);
    let (_, grads) = surrogate_gradient(&params, &batch, 2.0).unwrap();
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
    let mut rng = stream_rng(12, 0);
    let mut checked = 0;
    while checked < 20 {
        let i = rng.random_range(0..params.num_weights());
        let h = 1e-4;
        let w = params.weight(i);
        let mut plus = params.clone();
        plus.set_weight(i, w + h);
        let mut minus = params.clone();
        minus.set_weight(i, w - h);
        let fd = (surrogate_gradient(&plus, &batch, 2.0).unwrap().0
            - surrogate_gradient(&minus, &batch, 2.0).unwrap().0)
            / (2.0 * h);
        let a = flat[i];
        if fd.abs().max(a.abs()) < 1e-8 {
            continue;
        }
        assert!(
            (a - fd).abs() <= 1e-6 * fd.abs().max(a.abs()),
            "weight {i}: {a} vs {fd}"
        );
        checked += 1;
    }
}

#[test]
fn features_follow_instance() {
    let inst = generate_instance(&GeneratorConfig::default(), 0).unwrap();
    let f = featurize(&inst);
    assert_eq!((f.rows(), f.cols()), (10, 2));
    assert!(f.as_slice().iter().all(|v| v.is_finite()));
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 4,
        learning_rate: 1e-3,
        pool_size: Some(4),
        generator: GeneratorConfig::default().with_rack_types(4),
        policy: config(16, 2),
        seed,
        ..TrainConfig::default()
    }
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[test]
fn smoke_training_trends_upward() {
    let mut rising = 0;
    for seed in 0..10 {
        let outcome = train(&smoke_config(seed), None, |_| {}).unwrap();
        let rewards: Vec<f64> = outcome.curve.iter().map(|r| r.mean_reward).collect();
        let ma = moving_average(&rewards, 5);
        println!("seed {seed}: first {:.3} last {:.3}", ma[0], ma[ma.len() - 1]);
        if ma[ma.len() - 1] >= ma[0] {
            rising += 1;
        }
    }
    assert!(rising >= 7, "{rising}/10 seeds trend upward");
}

#[test]
fn training_is_deterministic() {
    let config = TrainConfig {
        epochs: 3,
        ..smoke_config(5)
    };
    let a = train(&config, None, |_| {}).unwrap();
    let b = train(&config, None, |_| {}).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
}
