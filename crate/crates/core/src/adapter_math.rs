//! Small-scale numerical checks of low-rank adaptation: the scaled
//! low-rank update, parameter counts, affine weight quantization, the
//! sequence negative log-likelihood and its gradient with respect to the
//! adapter factors.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },
    #[error("context {context} is outside the {contexts} known contexts")]
    UnknownContext { context: usize, contexts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdapterConfig {
    pub r: usize,
    pub alpha: f64,
    pub d: usize,
    pub k: usize,
    /// Kept for completeness; the deterministic checks never apply it.
    pub dropout: f64,
}

impl AdapterConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.r < 1 || self.r > self.d.min(self.k) {
            return Err(AdapterError::InvalidConfig(format!(
                "rank {} must be within 1..={}",
                self.r,
                self.d.min(self.k)
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(AdapterError::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// `(alpha / r) * B * A` for `B: d x r` and `A: r x k`.
pub fn lora_delta(b: &Matrix, a: &Matrix, alpha: f64, r: usize) -> Result<Matrix, AdapterError> {
    if b.ncols() != r || a.nrows() != r {
        return Err(AdapterError::ShapeMismatch(format!(
            "B is {}x{}, A is {}x{}, rank {r}",
            b.nrows(),
            b.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(b * a * (alpha / r as f64))
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut values: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    values.sort_by(|x, y| y.total_cmp(x));
    values
}

pub fn numerical_rank(m: &Matrix, tol: f64) -> usize {
    singular_values(m).into_iter().filter(|&s| s > tol).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub full: u64,
    pub adapter: u64,
}

impl ParamCounts {
    pub fn adapter_is_smaller(&self) -> bool {
        self.adapter < self.full
    }
}

/// Trainable parameters of a full `d x k` update versus a rank-`r` adapter.
pub fn param_counts(d: u64, k: u64, r: u64) -> ParamCounts {
    ParamCounts { full: d * k, adapter: r * (d + k) }
}

/// Grid spacing of `bits`-bit affine quantization over the range of `theta`.
pub fn quantization_step(theta: &Matrix, bits: u32) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    (theta.max() - theta.min()) / ((1u64 << bits) - 1) as f64
}

/// Rounds every entry to the nearest of `2^bits` evenly spaced levels
/// between the matrix minimum and maximum.
pub fn quantize_dequantize(theta: &Matrix, bits: u32) -> Matrix {
    assert!((2..=32).contains(&bits), "bits must be within 2..=32");
    let step = quantization_step(theta, bits);
    if step == 0.0 {
        return theta.clone();
    }
    let lo = theta.min();
    let top = ((1u64 << bits) - 1) as f64;
    theta.map(|x| lo + ((x - lo) / step).round().clamp(0.0, top) * step)
}

/// A next-token distribution given a context id and the tokens so far.
pub trait ConditionalModel {
    fn vocab_size(&self) -> usize;

    fn next_token_probs(&self, context: usize, prefix: &[usize]) -> Result<Vec<f64>, AdapterError>;
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<(), AdapterError> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(AdapterError::UnknownToken { token, vocab }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SequenceNll {
    /// `-sum_j log p(s_j | x, s_<j)`.
    pub nll: f64,
    /// `-log prod_j p(s_j | x, s_<j)`, computed from the product.
    pub product_nll: f64,
}

pub fn sequence_nll(model: &dyn ConditionalModel, context: usize, s: &[usize]) -> Result<SequenceNll, AdapterError> {
    check_tokens(s, model.vocab_size())?;
    let mut nll = 0.0;
    let mut product = 1.0;
    for j in 0..s.len() {
        let p = model.next_token_probs(context, &s[..j])?[s[j]];
        nll -= p.ln();
        product *= p;
    }
    Ok(SequenceNll { nll: nll + 0.0, product_nll: -product.ln() + 0.0 })
}

/// Mean sequence NLL over a finite sample of (context, sequence) pairs.
pub fn expected_nll(model: &dyn ConditionalModel, samples: &[(usize, Vec<usize>)]) -> Result<f64, AdapterError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = samples
        .iter()
        .map(|(x, s)| sequence_nll(model, *x, s).map(|r| r.nll))
        .sum::<Result<f64, _>>()?;
    Ok(total / samples.len() as f64)
}

/// Explicit conditional probability table with a fallback distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab: usize,
    fallback: Vec<f64>,
    table: HashMap<(usize, Vec<usize>), Vec<f64>>,
}

fn check_distribution(p: &[f64], vocab: usize) -> Result<(), AdapterError> {
    let sum: f64 = p.iter().sum();
    if p.len() != vocab || p.iter().any(|x| !(0.0..=1.0).contains(x)) || (sum - 1.0).abs() > 1e-12 {
        return Err(AdapterError::InvalidConfig(format!("not a distribution over {vocab} tokens: {p:?}")));
    }
    Ok(())
}

impl TableModel {
    pub fn uniform(vocab: usize) -> Self {
        TableModel { vocab, fallback: vec![1.0 / vocab as f64; vocab], table: HashMap::new() }
    }

    /// Sets `p(. | context, prefix)`.
    pub fn insert(&mut self, context: usize, prefix: &[usize], p: Vec<f64>) -> Result<(), AdapterError> {
        check_tokens(prefix, self.vocab)?;
        check_distribution(&p, self.vocab)?;
        self.table.insert((context, prefix.to_vec()), p);
        Ok(())
    }

    /// A model that emits `s` with probability one after `context`.
    pub fn deterministic(vocab: usize, context: usize, s: &[usize]) -> Result<Self, AdapterError> {
        let mut model = TableModel::uniform(vocab);
        for j in 0..s.len() {
            check_tokens(&s[j..=j], vocab)?;
            let mut p = vec![0.0; vocab];
            p[s[j]] = 1.0;
            model.insert(context, &s[..j], p)?;
        }
        Ok(model)
    }
}

impl ConditionalModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_token_probs(&self, context: usize, prefix: &[usize]) -> Result<Vec<f64>, AdapterError> {
        Ok(self.table.get(&(context, prefix.to_vec())).unwrap_or(&self.fallback).clone())
    }
}

/// Logits `U (theta + (alpha/r) B A) h_j`, where the hidden state `h_j` is
/// the context embedding plus the embedding of the previous token (or a
/// start token at `j = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAutoregressiveModel {
    pub config: AdapterConfig,
    /// Frozen base weights, `d x k`.
    pub theta: Matrix,
    /// Adapter factors, `d x r` and `r x k`.
    pub b: Matrix,
    pub a: Matrix,
    /// Output projection, `V x d`.
    pub unembed: Matrix,
    /// Context embeddings, one `k`-column per context.
    pub context_emb: Matrix,
    /// Token embeddings, `k x (V + 1)`; the last column is the start token.
    pub token_emb: Matrix,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Gradients of a loss with respect to the adapter factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub b: Matrix,
    pub a: Matrix,
}

impl ToyAutoregressiveModel {
    /// Random weights in `[-1, 1]`; `b` and `a` are random too, so both
    /// factors receive gradient.
    pub fn random(config: AdapterConfig, vocab: usize, contexts: usize, seed: u64) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let AdapterConfig { d, k, r, .. } = config;
        Ok(ToyAutoregressiveModel {
            config,
            theta: random_matrix(&mut rng, d, k, 1.0),
            b: random_matrix(&mut rng, d, r, 0.5),
            a: random_matrix(&mut rng, r, k, 0.5),
            unembed: random_matrix(&mut rng, vocab, d, 1.0),
            context_emb: random_matrix(&mut rng, k, contexts, 1.0),
            token_emb: random_matrix(&mut rng, k, vocab + 1, 1.0),
        })
    }

    /// Replaces the base weights by their quantized version.
    pub fn quantize_base(&mut self, bits: u32) {
        self.theta = quantize_dequantize(&self.theta, bits);
    }

    pub fn weight(&self) -> Matrix {
        &self.theta + &self.b * &self.a * self.config.scale()
    }

    fn hidden(&self, context: usize, prefix: &[usize]) -> Result<DVector<f64>, AdapterError> {
        let contexts = self.context_emb.ncols();
        if context >= contexts {
            return Err(AdapterError::UnknownContext { context, contexts });
        }
        check_tokens(prefix, self.vocab_size())?;
        let prev = prefix.last().copied().unwrap_or(self.vocab_size());
        Ok(self.context_emb.column(context) + self.token_emb.column(prev))
    }

    fn probs_with(&self, weight: &Matrix, h: &DVector<f64>) -> DVector<f64> {
        softmax(&(&self.unembed * (weight * h)))
    }

    /// Analytic gradient of the sequence NLL. With `G = sum_j U^T (p_j - e_{s_j}) h_j^T`,
    /// `dB = c G A^T` and `dA = c B^T G`, where `c = alpha / r`.
    pub fn adapter_grad(&self, context: usize, s: &[usize]) -> Result<AdapterGrad, AdapterError> {
        check_tokens(s, self.vocab_size())?;
        let weight = self.weight();
        let mut g = Matrix::zeros(self.config.d, self.config.k);
        for j in 0..s.len() {
            let h = self.hidden(context, &s[..j])?;
            let mut delta = self.probs_with(&weight, &h);
            delta[s[j]] -= 1.0;
            g += self.unembed.transpose() * delta * h.transpose();
        }
        let c = self.config.scale();
        Ok(AdapterGrad { b: &g * self.a.transpose() * c, a: self.b.transpose() * &g * c })
    }

    /// One gradient step on the mean NLL of `samples`.
    pub fn descent_step(&mut self, samples: &[(usize, Vec<usize>)], lr: f64) -> Result<(), AdapterError> {
        let mut gb = Matrix::zeros(self.b.nrows(), self.b.ncols());
        let mut ga = Matrix::zeros(self.a.nrows(), self.a.ncols());
        for (x, s) in samples {
            let g = self.adapter_grad(*x, s)?;
            gb += g.b;
            ga += g.a;
        }
        let n = samples.len().max(1) as f64;
        self.b -= gb * (lr / n);
        self.a -= ga * (lr / n);
        Ok(())
    }
}

impl ConditionalModel for ToyAutoregressiveModel {
    fn vocab_size(&self) -> usize {
        self.unembed.nrows()
    }

    fn next_token_probs(&self, context: usize, prefix: &[usize]) -> Result<Vec<f64>, AdapterError> {
        let h = self.hidden(context, prefix)?;
        Ok(self.probs_with(&self.weight(), &h).iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / (|analytic| + 1e-8)` over all
    /// entries of B and A.
    pub max_rel_error: f64,
    pub max_abs_grad_a: f64,
    pub max_abs_numeric_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Factor {
    B,
    A,
}

impl Factor {
    fn of(self, m: &ToyAutoregressiveModel) -> &Matrix {
        match self {
            Factor::B => &m.b,
            Factor::A => &m.a,
        }
    }

    fn of_mut(self, m: &mut ToyAutoregressiveModel) -> &mut Matrix {
        match self {
            Factor::B => &mut m.b,
            Factor::A => &mut m.a,
        }
    }
}

/// Compares the analytic adapter gradient with central finite differences.
pub fn adapter_grad_check(
    model: &ToyAutoregressiveModel,
    context: usize,
    s: &[usize],
    eps: f64,
) -> Result<GradCheck, AdapterError> {
    let analytic = model.adapter_grad(context, s)?;
    let loss = |m: &ToyAutoregressiveModel| sequence_nll(m, context, s).map(|r| r.nll);
    let mut worst: f64 = 0.0;
    let mut max_numeric_a: f64 = 0.0;
    let mut probe = model.clone();
    for factor in [Factor::B, Factor::A] {
        let (rows, cols) = factor.of(model).shape();
        for i in 0..rows {
            for j in 0..cols {
                let original = factor.of(&probe)[(i, j)];
                factor.of_mut(&mut probe)[(i, j)] = original + eps;
                let up = loss(&probe)?;
                factor.of_mut(&mut probe)[(i, j)] = original - eps;
                let down = loss(&probe)?;
                factor.of_mut(&mut probe)[(i, j)] = original;
                let numeric = (up - down) / (2.0 * eps);
                let an = match factor {
                    Factor::B => analytic.b[(i, j)],
                    Factor::A => analytic.a[(i, j)],
                };
                if factor == Factor::A {
                    max_numeric_a = max_numeric_a.max(numeric.abs());
                }
                worst = worst.max((an - numeric).abs() / (an.abs() + 1e-8));
            }
        }
    }
    Ok(GradCheck { max_rel_error: worst, max_abs_grad_a: analytic.a.amax(), max_abs_numeric_a: max_numeric_a })
}

/// Runs `steps` gradient steps and returns the mean NLL before the first
/// step and after each one.
pub fn descend(
    model: &mut ToyAutoregressiveModel,
    samples: &[(usize, Vec<usize>)],
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>, AdapterError> {
    let mut history = vec![expected_nll(model, samples)?];
    for _ in 0..steps {
        model.descent_step(samples, lr)?;
        history.push(expected_nll(model, samples)?);
    }
    Ok(history)
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Check {
        Check { name: name.to_string(), measured, threshold, passed: measured <= threshold }
    }

    fn below(name: &str, measured: f64, threshold: f64) -> Check {
        Check { name: name.to_string(), measured, threshold, passed: measured < threshold }
    }
}

/// Standard small instance: d = 4, k = 5, r = 2, V = 5, two contexts.
pub fn toy_instance(seed: u64) -> ToyAutoregressiveModel {
    let config = AdapterConfig { r: 2, alpha: 4.0, d: 4, k: 5, dropout: 0.0 };
    ToyAutoregressiveModel::random(config, 5, 2, seed).expect("toy config is valid")
}

/// Runs every numerical check on fixed seeds. `measured` is the error (or
/// violation count) and `threshold` the bound it must respect.
pub fn verification_table() -> Vec<Check> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let b = Matrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let a = Matrix::from_row_slice(1, 2, &[2.0, 3.0]);
    let expected = Matrix::from_row_slice(2, 2, &[4.0, 6.0, 0.0, 0.0]);
    let delta = lora_delta(&b, &a, 2.0, 1).expect("shapes agree");
    rows.push(Check::at_most("lora_delta worked example, max abs error", (delta - expected).amax(), 0.0));

    let b = random_matrix(&mut rng, 8, 2, 1.0);
    let a = random_matrix(&mut rng, 2, 8, 1.0);
    let delta = lora_delta(&b, &a, 16.0, 2).expect("shapes agree");
    let tail = singular_values(&delta)[2..].iter().copied().fold(0.0, f64::max);
    rows.push(Check::below("rank-2 delta (8x8), largest singular value past r", tail, 1e-10));

    let counts = param_counts(4096, 4096, 64);
    let miss = (counts.full != 16_777_216) as u64 + (counts.adapter != 524_288) as u64;
    rows.push(Check::at_most("param counts (4096, 4096, 64) mismatches", miss as f64, 0.0));

    let theta = random_matrix(&mut rng, 16, 16, 0.5).add_scalar(0.5);
    let q = quantize_dequantize(&theta, 4);
    let bound = quantization_step(&theta, 4) / 2.0 + 1e-12;
    rows.push(Check::at_most("4-bit quantization max abs error", (q - &theta).amax(), bound));

    let uniform = sequence_nll(&TableModel::uniform(4), 0, &[0, 1, 2]).expect("tokens in range");
    rows.push(Check::at_most("uniform V=4, t=3 NLL vs 3 ln 4", (uniform.nll - 3.0 * 4f64.ln()).abs(), 1e-12));

    let model = toy_instance(1);
    let s = [1, 4, 2];
    let nll = sequence_nll(&model, 0, &s).expect("tokens in range");
    rows.push(Check::at_most("sum-of-logs vs product form", (nll.nll - nll.product_nll).abs(), 1e-12));

    let grad = adapter_grad_check(&model, 0, &s, 1e-5).expect("tokens in range");
    rows.push(Check::below("adapter gradient max relative error", grad.max_rel_error, 1e-4));

    let mut zero = model.clone();
    zero.b.fill(0.0);
    zero.a.fill(0.0);
    let grad = adapter_grad_check(&zero, 0, &s, 1e-5).expect("tokens in range");
    rows.push(Check::at_most("zero adapter: |dA| analytic and numeric", grad.max_abs_grad_a.max(grad.max_abs_numeric_a), 0.0));

    let mut trained = model.clone();
    let samples = vec![(0, vec![1, 4, 2]), (1, vec![3, 3, 0])];
    let history = descend(&mut trained, &samples, 0.05, 20).expect("tokens in range");
    let violations = history.windows(2).filter(|w| w[1] >= w[0]).count();
    rows.push(Check::at_most("20 descent steps, non-decreasing steps", violations as f64, 0.0));
    rows
}
