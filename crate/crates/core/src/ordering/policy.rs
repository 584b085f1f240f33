//! Attention encoder-decoder that emits rack-type permutations.
//!
//! Encoder: a linear embedding of the two per-type features followed by
//! post-norm transformer layers (multi-head self-attention and a ReLU
//! feed-forward block, each with a residual path and layer normalization).
//! Decoder: at each step a context query built from the graph embedding and
//! the last selected type attends over the types (glimpse), and a
//! single-head pointer scores every type; logits are clipped with `C·tanh`
//! and already selected types are masked out.

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const NUM_FEATURES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_hidden: usize,
    pub logit_clip: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            num_layers: 3,
            ff_hidden: 256,
            logit_clip: 10.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.ff_hidden == 0 {
            return Err(Error::Config("ff_hidden must be positive".into()));
        }
        if !(self.logit_clip > 0.0 && self.logit_clip.is_finite()) {
            return Err(Error::Config("logit_clip must be positive and finite".into()));
        }
        Ok(())
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.d_model, self.ff_hidden);
        let mut out = vec![("embed.w".to_string(), NUM_FEATURES, d), ("embed.b".to_string(), 1, d)];
        for l in 0..self.num_layers {
            for (name, r, c) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("ln1.gain", 1, d),
                ("ln1.bias", 1, d),
                ("ff.w1", d, f),
                ("ff.b1", 1, f),
                ("ff.w2", f, d),
                ("ff.b2", 1, d),
                ("ln2.gain", 1, d),
                ("ln2.bias", 1, d),
            ] {
                out.push((format!("enc{l}.{name}"), r, c));
            }
        }
        for (name, r, c) in [
            ("w_context", 2 * d, d),
            ("wk_glimpse", d, d),
            ("wv_glimpse", d, d),
            ("wo_glimpse", d, d),
            ("wk_pointer", d, d),
        ] {
            out.push((format!("dec.{name}"), r, c));
        }
        out
    }
}

const LAYER_TENSORS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub config: PolicyConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Matrix<T>>,
}

impl PolicyParams<f32> {
    /// Glorot-uniform weights, zero biases, unit normalization gains.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream_rng(rng::derive_seed(seed, rng::tags::POLICY_INIT), 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in config.tensor_shapes() {
            let t = if name.ends_with(".gain") {
                Matrix::filled(r, c, 1.0)
            } else if r == 1 {
                Matrix::filled(r, c, 0.0)
            } else {
                let bound = (6.0 / (r + c) as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..r * c).map(|_| dist.sample(&mut rng)).collect();
                Matrix::from_vec(r, c, data).expect("shape")
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { config, names, tensors })
    }
}

impl<T: Real> PolicyParams<T> {
    pub fn cast<U: Real>(&self) -> PolicyParams<U> {
        PolicyParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let data = t.as_slice().iter().map(|v| U::of(v.f64())).collect();
                    Matrix::from_vec(t.rows(), t.cols(), data).expect("shape")
                })
                .collect(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum()
    }

    /// Scalar weight by flat index over all tensors in storage order.
    pub fn weight(&self, mut i: usize) -> T {
        for t in &self.tensors {
            let n = t.as_slice().len();
            if i < n {
                return t.as_slice()[i];
            }
            i -= n;
        }
        panic!("weight index out of range")
    }

    pub fn set_weight(&mut self, mut i: usize, value: T) {
        for t in &mut self.tensors {
            let n = t.as_slice().len();
            if i < n {
                t.as_mut_slice()[i] = value;
                return;
            }
            i -= n;
        }
        panic!("weight index out of range")
    }

    /// Shapes must match the configuration and every weight must be finite.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.tensor_shapes();
        if shapes.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, r, c), (n, t)) in shapes.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || (t.rows(), t.cols()) != (*r, *c) {
                return Err(Error::Checkpoint(format!(
                    "tensor {n} is {}x{}, expected {name} {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
            if t.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePolicy(format!("weights of {name}")));
            }
        }
        Ok(())
    }

    /// Places every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
            config: self.config,
        }
    }
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    config: PolicyConfig,
}

impl Bound {
    fn layer(&self, l: usize, i: usize) -> Var {
        self.vars[2 + l * LAYER_TENSORS + i]
    }

    fn decoder(&self, i: usize) -> Var {
        self.vars[2 + self.config.num_layers * LAYER_TENSORS + i]
    }
}

/// Encoder output on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `|K| x d_model` type embeddings.
    pub embeddings: Var,
    /// `1 x d_model` mean embedding.
    pub graph: Var,
    glimpse_keys: Var,
    glimpse_values: Var,
    pointer_keys: Var,
}

fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    mask: &Matrix<bool>,
) -> Var {
    let d = tape.value(queries).cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let parts: Vec<Var> = (0..heads)
        .map(|h| {
            let q = tape.slice_cols(queries, h * dk, (h + 1) * dk);
            let k = tape.slice_cols(keys, h * dk, (h + 1) * dk);
            let v = tape.slice_cols(values, h * dk, (h + 1) * dk);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, mask.clone());
            tape.matmul(attn, v)
        })
        .collect();
    tape.concat(&parts)
}

fn affine_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Var {
    let n = tape.layer_norm(x);
    let n = tape.mul_row(n, gain);
    tape.add_row(n, bias)
}

/// Runs the encoder on a `|K| x 2` feature matrix.
pub fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound, features: &Matrix<f64>) -> Encoded {
    let cfg = p.config;
    let n = features.rows();
    let feats = Matrix::from_vec(n, NUM_FEATURES, features.as_slice().iter().map(|&v| T::of(v)).collect())
        .expect("feature shape");
    let x = tape.leaf(feats);
    let h = tape.matmul(x, p.vars[0]);
    let mut h = tape.add_row(h, p.vars[1]);
    let open = Matrix::filled(1, n, false);
    for l in 0..cfg.num_layers {
        let q = tape.matmul(h, p.layer(l, 0));
        let k = tape.matmul(h, p.layer(l, 1));
        let v = tape.matmul(h, p.layer(l, 2));
        let attn = multi_head(tape, q, k, v, cfg.num_heads, &open);
        let attn = tape.matmul(attn, p.layer(l, 3));
        let r = tape.add(h, attn);
        let h1 = affine_norm(tape, r, p.layer(l, 4), p.layer(l, 5));
        let ff = tape.matmul(h1, p.layer(l, 6));
        let ff = tape.add_row(ff, p.layer(l, 7));
        let ff = tape.relu(ff);
        let ff = tape.matmul(ff, p.layer(l, 8));
        let ff = tape.add_row(ff, p.layer(l, 9));
        let r = tape.add(h1, ff);
        h = affine_norm(tape, r, p.layer(l, 10), p.layer(l, 11));
    }
    let graph = tape.mean_rows(h);
    let glimpse_keys = tape.matmul(h, p.decoder(1));
    let glimpse_values = tape.matmul(h, p.decoder(2));
    let pointer_keys = tape.matmul(h, p.decoder(4));
    Encoded {
        embeddings: h,
        graph,
        glimpse_keys,
        glimpse_values,
        pointer_keys,
    }
}

/// Log-probabilities of the next type for each trajectory row.
/// `last[r]` is the previously selected type of row `r` (`None` before the
/// first step); `selected` marks types already taken per row.
fn decode_step<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    enc: &Encoded,
    last: &[Option<usize>],
    selected: &Matrix<bool>,
) -> Var {
    let cfg = p.config;
    let d = cfg.d_model;
    let rows = last.len();
    let graph_rows = tape.gather_rows(enc.graph, vec![0; rows]);
    let last_emb = if last.iter().all(Option::is_some) {
        tape.gather_rows(enc.embeddings, last.iter().map(|l| l.unwrap()).collect())
    } else {
        // Rows without a previous selection use a zero vector.
        let mut m = Matrix::filled(rows, d, T::zero());
        for (r, l) in last.iter().enumerate() {
            if let Some(k) = l {
                m.row_mut(r).copy_from_slice(tape.value(enc.embeddings).row(*k));
            }
        }
        tape.leaf(m)
    };
    let ctx = tape.concat(&[graph_rows, last_emb]);
    let query = tape.matmul(ctx, p.decoder(0));
    let glimpse = multi_head(
        tape,
        query,
        enc.glimpse_keys,
        enc.glimpse_values,
        cfg.num_heads,
        selected,
    );
    let glimpse = tape.matmul(glimpse, p.decoder(3));
    let logits = tape.matmul_t(glimpse, enc.pointer_keys);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = tape.tanh(logits);
    let logits = tape.scale(logits, cfg.logit_clip);
    tape.log_softmax(logits, selected.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// How trajectories begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Starts {
    /// One trajectory per type; trajectory `j` is forced to start at `j` and
    /// the forced step contributes no log-probability.
    MultiStart,
    /// A single trajectory whose first step is decoded too.
    Single,
}

/// Decoded permutations with their summed log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub orders: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    /// Probability rows of every decoding step: `steps[t][r]` has one entry
    /// per type for trajectory `r`.
    pub steps: Vec<Vec<Vec<f64>>>,
}

/// Decodes on `tape`. `choose` receives the step's log-probability matrix
/// and returns the selected type per row. Returns the orders and the
/// `rows x 1` summed log-probability variable.
fn run_decoder<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    enc: &Encoded,
    n: usize,
    starts: Starts,
    mut choose: impl FnMut(usize, &Matrix<T>) -> Result<Vec<usize>>,
    mut on_step: impl FnMut(&Matrix<T>),
) -> Result<(Vec<Vec<usize>>, Var)> {
    let rows = match starts {
        Starts::MultiStart => n,
        Starts::Single => 1,
    };
    let mut orders: Vec<Vec<usize>> = vec![Vec::with_capacity(n); rows];
    let mut selected = Matrix::filled(rows, n, false);
    let mut last: Vec<Option<usize>> = vec![None; rows];
    if starts == Starts::MultiStart {
        for j in 0..n {
            orders[j].push(j);
            selected[(j, j)] = true;
            last[j] = Some(j);
        }
    }
    let mut total: Option<Var> = None;
    let first_step = orders[0].len();
    for t in first_step..n {
        let logp = decode_step(tape, p, enc, &last, &selected);
        let values = tape.value(logp);
        if values.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinitePolicy(format!("decoder output at step {t}")));
        }
        on_step(values);
        let picks = choose(t, values)?;
        for (r, &k) in picks.iter().enumerate() {
            debug_assert!(!selected[(r, k)]);
            orders[r].push(k);
            selected[(r, k)] = true;
            last[r] = Some(k);
        }
        let picked = tape.pick(logp, picks);
        total = Some(match total {
            Some(acc) => tape.add(acc, picked),
            None => picked,
        });
    }
    let total = total.unwrap_or_else(|| tape.leaf(Matrix::filled(rows, 1, T::zero())));
    Ok((orders, total))
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut fallback = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            fallback = i;
            if u < acc {
                return i;
            }
        }
    }
    fallback
}

/// Decodes permutations for one instance. Sampling draws from a ChaCha
/// stream seeded with `seed`; greedy decoding ignores it and breaks ties by
/// lowest type index.
pub fn decode_rollout<T: Real>(
    params: &PolicyParams<T>,
    features: &Matrix<f64>,
    starts: Starts,
    mode: DecodeMode,
    seed: u64,
) -> Result<Rollout> {
    params.check()?;
    let n = features.rows();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = encode(&mut tape, &bound, features);
    let mut rng = rng::stream_rng(seed, 0);
    let mut steps = Vec::new();
    let (orders, total) = run_decoder(
        &mut tape,
        &bound,
        &enc,
        n,
        starts,
        |_, logp| {
            let mut picks = Vec::with_capacity(logp.rows());
            for r in 0..logp.rows() {
                let probs: Vec<f64> = logp.row(r).iter().map(|v| v.f64().exp()).collect();
                picks.push(match mode {
                    DecodeMode::Greedy => argmax_row(&probs),
                    DecodeMode::Sample => sample_row(&probs, &mut rng),
                });
            }
            Ok(picks)
        },
        |logp| {
            steps.push(
                (0..logp.rows())
                    .map(|r| logp.row(r).iter().map(|v| v.f64().exp()).collect())
                    .collect(),
            )
        },
    )?;
    let log_probs = tape.value(total).as_slice().iter().map(|v| v.f64()).collect();
    Ok(Rollout {
        orders,
        log_probs,
        steps,
    })
}

/// Re-evaluates the summed log-probabilities of given multi-start or single
/// orders on `tape`, returning the `rows x 1` variable.
pub fn log_probs_of<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    features: &Matrix<f64>,
    orders: &[Vec<usize>],
    starts: Starts,
) -> Result<Var> {
    let n = features.rows();
    let enc = encode(tape, bound, features);
    let (_, total) = run_decoder(
        tape,
        bound,
        &enc,
        n,
        starts,
        |t, _| Ok(orders.iter().map(|o| o[t]).collect()),
        |_| {},
    )?;
    Ok(total)
}

/// Type embeddings and their mean, without the decoder.
pub fn embeddings<T: Real>(params: &PolicyParams<T>, features: &Matrix<f64>) -> Result<(Matrix<f64>, Vec<f64>)> {
    params.check()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = encode(&mut tape, &bound, features);
    let to64 = |m: &Matrix<T>| {
        Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|v| v.f64()).collect()).expect("shape")
    };
    let h = to64(tape.value(enc.embeddings));
    let g = to64(tape.value(enc.graph)).row(0).to_vec();
    Ok((h, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolicyConfig {
        PolicyConfig {
            d_model: 8,
            num_heads: 2,
            num_layers: 2,
            ff_hidden: 16,
            logit_clip: 10.0,
        }
    }

    fn feats(rows: &[[f64; 2]]) -> Matrix<f64> {
        Matrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let p = PolicyParams::init(PolicyConfig::default(), 0).unwrap();
        p.check().unwrap();
        assert_eq!(p.tensors.len(), 2 + 3 * 12 + 5);
    }

    #[test]
    fn single_type_has_forced_order() {
        let p = PolicyParams::init(small(), 1).unwrap();
        for starts in [Starts::MultiStart, Starts::Single] {
            let r = decode_rollout(&p, &feats(&[[0.1, 0.2]]), starts, DecodeMode::Sample, 3).unwrap();
            assert_eq!(r.orders, vec![vec![0]]);
            assert_eq!(r.log_probs, vec![0.0]);
        }
    }

    #[test]
    fn multi_start_first_elements() {
        let p = PolicyParams::init(small(), 1).unwrap();
        let f = feats(&[[0.1, 0.2], [-0.3, 0.5], [0.0, 0.1]]);
        let r = decode_rollout(&p, &f, Starts::MultiStart, DecodeMode::Sample, 3).unwrap();
        assert_eq!(r.orders.iter().map(|o| o[0]).collect::<Vec<_>>(), vec![0, 1, 2]);
        for o in &r.orders {
            let mut s = o.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2]);
        }
    }

    #[test]
    fn masked_types_have_zero_probability() {
        let p = PolicyParams::init(small(), 2).unwrap().cast::<f64>();
        let f = feats(&[[0.1, 0.2], [-0.3, 0.5], [0.0, 0.1], [0.4, 0.4]]);
        let r = decode_rollout(&p, &f, Starts::Single, DecodeMode::Greedy, 0).unwrap();
        for (t, step) in r.steps.iter().enumerate() {
            let row = &step[0];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for &k in &r.orders[0][..t] {
                assert_eq!(row[k], 0.0);
            }
        }
    }

    #[test]
    fn nan_weights_rejected() {
        let mut p = PolicyParams::init(small(), 0).unwrap();
        p.set_weight(5, f32::NAN);
        assert!(matches!(p.check(), Err(Error::NonFinitePolicy(_))));
    }

    #[test]
    fn teacher_forced_log_probs_match() {
        let p = PolicyParams::init(small(), 4).unwrap().cast::<f64>();
        let f = feats(&[[0.1, 0.2], [-0.3, 0.5], [0.0, 0.1]]);
        let r = decode_rollout(&p, &f, Starts::MultiStart, DecodeMode::Sample, 9).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let v = log_probs_of(&mut tape, &b, &f, &r.orders, Starts::MultiStart).unwrap();
        assert_eq!(tape.value(v).as_slice(), r.log_probs.as_slice());
    }
}
