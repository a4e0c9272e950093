//! Fixed-window neural language model over tokens.
//!
//! `logits = W_out · tanh(W_h · [e(t_{n-K+1}); …; e(t_n)] + b_h) + b_out`,
//! followed by a softmax. Short contexts are left-padded with a reserved pad
//! token whose embedding row sits after the vocabulary. Gradients are derived
//! by hand and checked against central differences in the tests.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::ContextFormat;
use crate::error::{Error, Result};
use crate::seed::{self, Purpose};
use crate::tokenizer::{MergeTable, TokenId};

pub const INIT_RANGE: f64 = 0.08;

/// Anything that yields a next-token distribution. Word probabilities,
/// sampling and evaluation only need this, so other backends can plug in.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    /// Probability vector of length [`vocab_size`](Self::vocab_size).
    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>>;
}

impl<M: NextTokenModel + ?Sized> NextTokenModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_token_dist(context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub window: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { embed_dim: 32, hidden: 128, window: 8 }
    }
}

/// All trainable tensors, row-major. Also used as the gradient container and
/// for Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    /// (V + 1) × d; the last row is the pad embedding.
    pub embedding: Vec<f64>,
    /// (K·d) × h
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    /// h × V
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Tensors {
    pub fn zeros(config: &LmConfig, vocab: usize) -> Self {
        let LmConfig { embed_dim: d, hidden: h, window: k } = *config;
        Tensors {
            embedding: vec![0.0; (vocab + 1) * d],
            w_hidden: vec![0.0; k * d * h],
            b_hidden: vec![0.0; h],
            w_out: vec![0.0; h * vocab],
            b_out: vec![0.0; vocab],
        }
    }

    pub fn slices(&self) -> [&[f64]; 5] {
        [&self.embedding, &self.w_hidden, &self.b_hidden, &self.w_out, &self.b_out]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.embedding,
            &mut self.w_hidden,
            &mut self.b_hidden,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices().into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn same_shape(&self, other: &Tensors) -> bool {
        self.slices().iter().zip(other.slices()).all(|(a, b)| a.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensors, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flat view by index across all tensors, in `slices()` order.
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
        panic!("flat index out of range")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub params: Tensors,
}

/// Activations kept for the backward pass.
struct Forward {
    window: Vec<usize>,
    x: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
}

impl TinyLm {
    /// Weights uniform in ±[`INIT_RANGE`], biases zero.
    pub fn init(vocab_size: usize, config: LmConfig, seed: u64) -> Result<Self> {
        if vocab_size == 0 || config.embed_dim == 0 || config.hidden == 0 || config.window == 0 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        let mut params = Tensors::zeros(&config, vocab_size);
        let mut rng = seed::stream(seed, Purpose::Init, 0);
        let dist = Uniform::new(-INIT_RANGE, INIT_RANGE).expect("valid range");
        for t in [&mut params.embedding, &mut params.w_hidden, &mut params.w_out] {
            t.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        }
        Ok(TinyLm { config, vocab_size, params })
    }

    pub fn zeros(vocab_size: usize, config: LmConfig) -> Self {
        TinyLm { config, vocab_size, params: Tensors::zeros(&config, vocab_size) }
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size
    }

    fn window_ids(&self, context: &[TokenId]) -> Result<Vec<usize>> {
        let k = self.config.window;
        let tail = &context[context.len().saturating_sub(k)..];
        let mut ids = vec![self.pad_id(); k - tail.len()];
        for &t in tail {
            if t as usize >= self.vocab_size {
                return Err(Error::InvalidToken { id: t, vocab: self.vocab_size });
            }
            ids.push(t as usize);
        }
        Ok(ids)
    }

    fn forward(&self, context: &[TokenId]) -> Result<Forward> {
        let LmConfig { embed_dim: d, hidden: h, .. } = self.config;
        let v = self.vocab_size;
        let p = &self.params;
        let window = self.window_ids(context)?;

        let mut x = Vec::with_capacity(window.len() * d);
        for &id in &window {
            x.extend_from_slice(&p.embedding[id * d..(id + 1) * d]);
        }

        let mut a = p.b_hidden.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &p.w_hidden[i * h..(i + 1) * h];
            for (aj, w) in a.iter_mut().zip(row) {
                *aj += xi * w;
            }
        }
        let z: Vec<f64> = a.iter().map(|v| v.tanh()).collect();

        let mut logits = p.b_out.clone();
        for (i, &zi) in z.iter().enumerate() {
            let row = &p.w_out[i * v..(i + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += zi * w;
            }
        }
        let q = softmax(&logits);
        Ok(Forward { window, x, z, q })
    }

    /// Accumulates `scale ·` the gradient of `-Σ_t w_t log q(t | context)` into
    /// `out`, for sparse non-negative target weights. Returns the unscaled loss.
    #[allow(clippy::needless_range_loop)]
    pub fn accumulate_grad(
        &self,
        context: &[TokenId],
        target: &[(TokenId, f64)],
        scale: f64,
        out: &mut Tensors,
    ) -> Result<f64> {
        let LmConfig { embed_dim: d, hidden: h, .. } = self.config;
        let v = self.vocab_size;
        let p = &self.params;
        let f = self.forward(context)?;

        let mut mass = 0.0;
        let mut loss = 0.0;
        let mut dlogits: Vec<f64> = f.q.clone();
        for &(t, w) in target {
            if t as usize >= v {
                return Err(Error::InvalidToken { id: t, vocab: v });
            }
            mass += w;
            loss -= w * f.q[t as usize].ln();
        }
        dlogits.iter_mut().for_each(|g| *g *= mass * scale);
        for &(t, w) in target {
            dlogits[t as usize] -= w * scale;
        }

        for (g, dl) in out.b_out.iter_mut().zip(&dlogits) {
            *g += dl;
        }
        let mut dz = vec![0.0; h];
        for i in 0..h {
            let row = &p.w_out[i * v..(i + 1) * v];
            let grow = &mut out.w_out[i * v..(i + 1) * v];
            let zi = f.z[i];
            let mut acc = 0.0;
            for ((gw, w), dl) in grow.iter_mut().zip(row).zip(&dlogits) {
                *gw += zi * dl;
                acc += w * dl;
            }
            dz[i] = acc;
        }
        let da: Vec<f64> = dz.iter().zip(&f.z).map(|(g, z)| g * (1.0 - z * z)).collect();
        for (g, d) in out.b_hidden.iter_mut().zip(&da) {
            *g += d;
        }
        let mut dx = vec![0.0; f.x.len()];
        for (i, &xi) in f.x.iter().enumerate() {
            let row = &p.w_hidden[i * h..(i + 1) * h];
            let grow = &mut out.w_hidden[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for ((gw, w), dai) in grow.iter_mut().zip(row).zip(&da) {
                *gw += xi * dai;
                acc += w * dai;
            }
            dx[i] = acc;
        }
        for (slot, &id) in f.window.iter().enumerate() {
            let g = &mut out.embedding[id * d..(id + 1) * d];
            for (ge, dxi) in g.iter_mut().zip(&dx[slot * d..(slot + 1) * d]) {
                *ge += dxi;
            }
        }
        Ok(loss)
    }

    /// Gradient of the cross-entropy `-Σ_t target(t) log q(t | context)` for a
    /// dense target distribution.
    pub fn grad(&self, context: &[TokenId], target_dist: &[f64]) -> Result<Tensors> {
        if target_dist.len() != self.vocab_size {
            return Err(Error::ShapeMismatch(format!(
                "target has {} entries, vocabulary {}",
                target_dist.len(),
                self.vocab_size
            )));
        }
        let sparse: Vec<(TokenId, f64)> = target_dist
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(t, &w)| (t as TokenId, w))
            .collect();
        let mut out = Tensors::zeros(&self.config, self.vocab_size);
        self.accumulate_grad(context, &sparse, 1.0, &mut out)?;
        Ok(out)
    }

    /// Cross-entropy for a dense target; the scalar `grad` differentiates.
    pub fn cross_entropy(&self, context: &[TokenId], target_dist: &[f64]) -> Result<f64> {
        let q = self.next_token_dist(context)?;
        Ok(-target_dist
            .iter()
            .zip(&q)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, q)| t * q.ln())
            .sum::<f64>())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

impl NextTokenModel for TinyLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward(context)?.q)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Rescales a distribution to temperature `t` (equivalent to dividing logits).
pub fn apply_temperature(probs: &[f64], t: f64) -> Vec<f64> {
    if t == 1.0 {
        return probs.to_vec();
    }
    let logits: Vec<f64> = probs
        .iter()
        .map(|p| if *p > 0.0 { p.ln() / t } else { f64::NEG_INFINITY })
        .collect();
    softmax(&logits)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Ancestral sampling of one token at the given temperature.
pub fn sample_next_token<M, R>(
    model: &M,
    context: &[TokenId],
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId>
where
    M: NextTokenModel + ?Sized,
    R: Rng + ?Sized,
{
    let q = model.next_token_dist(context)?;
    let q = apply_temperature(&q, temperature);
    Ok(sample_index(&q, rng) as TokenId)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensors,
    pub v: Tensors,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &Tensors, lr: f64) -> Self {
        let mut zero = like.clone();
        zero.scale(0.0);
        AdamState {
            m: zero.clone(),
            v: zero,
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut Tensors, state: &mut AdamState, grad: &Tensors) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&state.m) {
        return Err(Error::ShapeMismatch("adam parameter/gradient shapes differ".into()));
    }
    if !grad.is_finite() {
        return Err(Error::Diverged);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    let ps = params.slices_mut();
    let ms = state.m.slices_mut();
    let vs = state.v.slices_mut();
    for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grad.slices()) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Serialized model: configuration, tokenizer fingerprint and tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab_hash: String,
    pub context_format: ContextFormat,
    pub mode: String,
    pub seed: u64,
    pub model: TinyLm,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(
        model: TinyLm,
        table: &MergeTable,
        context_format: ContextFormat,
        mode: &str,
        seed: u64,
    ) -> Self {
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            vocab_hash: table.vocab_hash(),
            context_format,
            mode: mode.to_string(),
            seed,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses a checkpoint and checks it was trained with `table`.
    pub fn from_json(json: &str, table: &MergeTable) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        let expected = table.vocab_hash();
        if ck.vocab_hash != expected {
            return Err(Error::VocabMismatch { checkpoint: ck.vocab_hash, tokenizer: expected });
        }
        if ck.model.vocab_size != table.vocab_size() {
            return Err(Error::ShapeMismatch("checkpoint vocabulary size".into()));
        }
        let reference = Tensors::zeros(&ck.model.config, ck.model.vocab_size);
        if !reference.same_shape(&ck.model.params) || !ck.model.params.is_finite() {
            return Err(Error::ShapeMismatch("checkpoint tensors".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TinyLm {
        TinyLm::init(7, LmConfig { embed_dim: 4, hidden: 5, window: 2 }, 3).unwrap()
    }

    #[test]
    fn init_deterministic_with_zero_biases() {
        let a = TinyLm::init(10, LmConfig::default(), 1).unwrap();
        let b = TinyLm::init(10, LmConfig::default(), 1).unwrap();
        assert_eq!(a, b);
        assert!(a.params.b_hidden.iter().chain(&a.params.b_out).all(|x| *x == 0.0));
        assert!(a.params.embedding.iter().all(|x| x.abs() <= INIT_RANGE));
        let c = TinyLm::init(10, LmConfig::default(), 2).unwrap();
        assert_ne!(a.params.embedding, c.params.embedding);
    }

    #[test]
    fn output_is_distribution() {
        let m = small();
        for ctx in [vec![], vec![1], vec![0, 6, 3, 2]] {
            let q = m.next_token_dist(&ctx).unwrap();
            assert_eq!(q.len(), 7);
            assert!(q.iter().all(|p| *p > 0.0));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(m.next_token_dist(&[7]), Err(Error::InvalidToken { id: 7, .. })));
    }

    #[test]
    fn zero_params_uniform() {
        let m = TinyLm::zeros(5, LmConfig::default());
        let q = m.next_token_dist(&[1, 2]).unwrap();
        assert!(q.iter().all(|p| *p == 0.2));
    }

    #[test]
    fn unused_embedding_rows_do_not_matter() {
        let m = small();
        let ctx = [1, 2];
        let before = m.next_token_dist(&ctx).unwrap();
        let mut p = m.clone();
        let d = m.config.embed_dim;
        // swap rows of tokens 4 and 5, neither in the window (and not the pad row)
        for j in 0..d {
            p.params.embedding.swap(4 * d + j, 5 * d + j);
        }
        assert_eq!(p.next_token_dist(&ctx).unwrap(), before);
    }

    #[test]
    fn self_target_gives_zero_logit_gradient() {
        let m = small();
        let ctx = [3, 1];
        let q = m.next_token_dist(&ctx).unwrap();
        let g = m.grad(&ctx, &q).unwrap();
        assert!(g.b_out.iter().all(|x| x.abs() < 1e-15));
        assert!(g.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn swapping_equal_targets_swaps_output_gradients() {
        // Make tokens 2 and 5 indistinguishable in the output layer.
        let mut m = small();
        let (h, v) = (m.config.hidden, m.vocab_size);
        for i in 0..h {
            m.params.w_out[i * v + 5] = m.params.w_out[i * v + 2];
        }
        let ctx = [0, 1];
        let mut t1 = vec![0.0; 7];
        t1[2] = 0.7;
        t1[0] = 0.3;
        let mut t2 = vec![0.0; 7];
        t2[5] = 0.7;
        t2[0] = 0.3;
        let g1 = m.grad(&ctx, &t1).unwrap();
        let g2 = m.grad(&ctx, &t2).unwrap();
        assert!((g1.b_out[2] - g2.b_out[5]).abs() < 1e-15);
        assert!((g1.b_out[5] - g2.b_out[2]).abs() < 1e-15);
        for i in 0..h {
            assert!((g1.w_out[i * v + 2] - g2.w_out[i * v + 5]).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_matches_central_differences() {
        let m = small();
        let ctx = [4, 2, 6];
        let target = [0.1, 0.0, 0.3, 0.0, 0.2, 0.4, 0.0];
        let analytic = m.grad(&ctx, &target).unwrap();
        let step = 1e-4;
        let mut num = analytic.clone();
        for i in 0..m.num_params() {
            let mut plus = m.clone();
            let x = plus.params.get_flat(i);
            plus.params.set_flat(i, x + step);
            let mut minus = m.clone();
            minus.params.set_flat(i, x - step);
            let d = (plus.cross_entropy(&ctx, &target).unwrap()
                - minus.cross_entropy(&ctx, &target).unwrap())
                / (2.0 * step);
            num.set_flat(i, d);
        }
        let diff: f64 = analytic.iter().zip(num.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let m = small();
        let mut p = m.params.clone();
        let mut st = AdamState::new(&p, 0.01);
        let zero = Tensors::zeros(&m.config, m.vocab_size);
        adam_step(&mut p, &mut st, &zero).unwrap();
        assert_eq!(p, m.params);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_deterministic_and_rejects_nan() {
        let m = small();
        let g = m.grad(&[1], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let run = || {
            let mut p = m.params.clone();
            let mut st = AdamState::new(&p, 0.01);
            adam_step(&mut p, &mut st, &g).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());

        let mut bad = g.clone();
        bad.b_out[0] = f64::NAN;
        let mut p = m.params.clone();
        let mut st = AdamState::new(&p, 0.01);
        assert!(matches!(adam_step(&mut p, &mut st, &bad), Err(Error::Diverged)));
    }

    #[test]
    fn adam_scalar_quadratic_first_step() {
        // f(x) = x^2 at x0 = 1: g = 2, m̂ = 2, v̂ = 4, x1 = 1 - 0.1 * 2 / (2 + 1e-8)
        let cfg = LmConfig { embed_dim: 1, hidden: 1, window: 1 };
        let mut p = Tensors::zeros(&cfg, 1);
        p.b_out[0] = 1.0;
        let mut g = Tensors::zeros(&cfg, 1);
        g.b_out[0] = 2.0 * p.b_out[0];
        let mut st = AdamState::new(&p, 0.1);
        adam_step(&mut p, &mut st, &g).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.b_out[0] - expected).abs() < 1e-15);
        assert!((p.b_out[0] - 0.9).abs() < 1e-8);
    }

    struct Fixed(Vec<f64>);

    impl NextTokenModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }

        fn next_token_dist(&self, _: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn near_deterministic_sampling() {
        let m = Fixed(vec![1e-13, 1.0 - 2e-13, 1e-13]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(sample_next_token(&m, &[], 1.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn uniform_sampling_frequencies_within_binomial_bounds() {
        let v = 5;
        let m = Fixed(vec![1.0 / v as f64; v]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = vec![0usize; v];
        for _ in 0..n {
            counts[sample_next_token(&m, &[], 1.0, &mut rng).unwrap() as usize] += 1;
        }
        let p = 1.0 / v as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * sigma + 1e-12);
        }
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let m = small();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..50).map(|_| sample_next_token(&m, &[1, 2], 1.0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn temperature_sharpens() {
        let q = apply_temperature(&[0.2, 0.8], 0.5);
        assert!((q[1] - 0.64 / 0.68).abs() < 1e-12);
        assert_eq!(apply_temperature(&[0.2, 0.8], 1.0), vec![0.2, 0.8]);
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_check() {
        let table = crate::tokenizer::train_merges("the cat sat", 3).unwrap();
        let m = TinyLm::init(table.vocab_size(), LmConfig { embed_dim: 3, hidden: 4, window: 2 }, 9)
            .unwrap();
        let ck = Checkpoint::new(m, &table, ContextFormat::Plain, "multi_label", 9);
        let back = Checkpoint::from_json(&ck.to_json(), &table).unwrap();
        assert_eq!(back, ck);
        let other = crate::tokenizer::train_merges("the cat sat", 2).unwrap();
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json(), &other),
            Err(Error::VocabMismatch { .. })
        ));
    }
}
