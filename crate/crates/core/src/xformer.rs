//! Mini transformer backbone with an exact backward pass.
//!
//! Pre-norm blocks (RMS norm → multi-head attention → residual, RMS norm →
//! GELU feed-forward → residual), learned absolute positions, a final RMS norm
//! and mean pooling over kept (non-padding) positions. Attention can be causal
//! or bidirectional; padding keys are masked and padding query rows produce a
//! zero attention output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::Matrix;
use crate::tokenizer::TokenSeq;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("vocab_size, d_model, d_ff and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be >= 1".into());
        }
        if self.max_seq_len < 4 {
            return fail(format!("max_seq_len must be >= 4, got {}", self.max_seq_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Every learnable tensor of the backbone. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
}

/// Name, shape and data of one tensor.
pub type TensorView<'a, T> = (String, Vec<usize>, &'a [T]);

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, ff) = (config.d_model, config.d_ff);
        let layer = LayerParams {
            attn_norm: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![T::zero(); d],
            w1: Matrix::zeros(d, ff),
            b1: vec![T::zero(); ff],
            w2: Matrix::zeros(ff, d),
            b2: vec![T::zero(); d],
        };
        Self {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_seq_len, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![T::zero(); d],
        }
    }

    /// Tensors in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<TensorView<'_, T>> {
        fn mat<T: Scalar>(name: String, m: &Matrix<T>) -> TensorView<'_, T> {
            (name, vec![m.rows(), m.cols()], m.as_slice())
        }
        let mut out = vec![
            mat("token_embedding".into(), &self.token_embedding),
            mat("position_embedding".into(), &self.position_embedding),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), vec![p.attn_norm.len()], &p.attn_norm));
            out.push(mat(format!("layers.{l}.wq"), &p.wq));
            out.push(mat(format!("layers.{l}.wk"), &p.wk));
            out.push(mat(format!("layers.{l}.wv"), &p.wv));
            out.push(mat(format!("layers.{l}.wo"), &p.wo));
            out.push((format!("layers.{l}.ffn_norm"), vec![p.ffn_norm.len()], &p.ffn_norm));
            out.push(mat(format!("layers.{l}.w1"), &p.w1));
            out.push((format!("layers.{l}.b1"), vec![p.b1.len()], &p.b1));
            out.push(mat(format!("layers.{l}.w2"), &p.w2));
            out.push((format!("layers.{l}.b2"), vec![p.b2.len()], &p.b2));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> =
            vec![self.token_embedding.as_mut_slice(), self.position_embedding.as_mut_slice()];
        for p in &mut self.layers {
            out.push(&mut p.attn_norm);
            out.push(p.wq.as_mut_slice());
            out.push(p.wk.as_mut_slice());
            out.push(p.wv.as_mut_slice());
            out.push(p.wo.as_mut_slice());
            out.push(&mut p.ffn_norm);
            out.push(p.w1.as_mut_slice());
            out.push(&mut p.b1);
            out.push(p.w2.as_mut_slice());
            out.push(&mut p.b2);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        let src: Vec<Vec<T>> = other.named_tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.named_tensors()
            .iter()
            .flat_map(|t| t.2.iter())
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let v = |x: &Vec<T>| x.iter().map(|a| U::of(a.to_f64_lossy())).collect::<Vec<U>>();
        ParameterSet {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    attn_norm: v(&p.attn_norm),
                    wq: p.wq.cast(),
                    wk: p.wk.cast(),
                    wv: p.wv.cast(),
                    wo: p.wo.cast(),
                    ffn_norm: v(&p.ffn_norm),
                    w1: p.w1.cast(),
                    b1: v(&p.b1),
                    w2: p.w2.cast(),
                    b2: v(&p.b2),
                })
                .collect(),
            final_norm: v(&self.final_norm),
        }
    }

    /// Checks tensor shapes against a config.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ParameterSet::<T>::zeros(config);
        let a = self.named_tensors();
        let b = expected.named_tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", b.len(), a.len())));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.0 != y.0 || x.1 != y.1 {
                return Err(Error::Shape(format!("tensor {} has shape {:?}, expected {:?}", x.0, x.1, y.1)));
            }
        }
        Ok(())
    }
}

/// Draws initial parameters: N(0, 1/d_model) weights, unit norm gains, zero biases.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 1.0 / (config.d_model as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut params = ParameterSet::<T>::zeros(config);
    params.final_norm.iter_mut().for_each(|g| *g = T::one());
    for layer in &mut params.layers {
        layer.attn_norm.iter_mut().for_each(|g| *g = T::one());
        layer.ffn_norm.iter_mut().for_each(|g| *g = T::one());
    }
    let mut fill = |m: &mut Matrix<T>| {
        for x in m.as_mut_slice() {
            *x = T::of(normal.sample(&mut rng));
        }
    };
    fill(&mut params.token_embedding);
    fill(&mut params.position_embedding);
    for layer in &mut params.layers {
        for m in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1, &mut layer.w2] {
            fill(m);
        }
    }
    Ok(params)
}

/// Cached activations of one block, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub input: Matrix<T>,
    attn_inv_rms: Vec<T>,
    h1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Attention probabilities per head, `[seq × seq]`.
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
    mid: Matrix<T>,
    ffn_inv_rms: Vec<T>,
    h2: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    ids: Vec<u32>,
    keep: Vec<bool>,
    pub layers: Vec<LayerCache<T>>,
    /// Residual stream after the last block, before the final norm.
    pub pre_norm: Matrix<T>,
    final_inv_rms: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Residual stream entering block `k`; `k == n_layers` gives the pre-final-norm states.
    pub fn residual_stream(&self, k: usize) -> &Matrix<T> {
        if k < self.layers.len() {
            &self.layers[k].input
        } else {
            &self.pre_norm
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// Final normalized hidden states, `[seq × d_model]`.
    pub hidden: Matrix<T>,
    pub pooled: Vec<T>,
    pub trace: Option<ForwardTrace<T>>,
}

/// Backbone parameters together with the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: ModelConfig,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, tokens: &TokenSeq, training: bool) -> Result<ForwardOutput<T>> {
        forward(&self.params, &self.config, tokens, training)
    }

    pub fn backward_into(&self, trace: &ForwardTrace<T>, upstream: &[T], grads: &mut ParameterSet<T>) -> Result<()> {
        backward_into(trace, &self.params, &self.config, upstream, grads)
    }

    pub fn prune(&self, k: usize) -> Result<Self> {
        let (params, config) = prune_bottom_layers(&self.params, &self.config, k)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone { config: self.config.clone(), params: self.params.cast() }
    }
}

fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T]) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    let eps = T::of(RMS_EPS);
    for i in 0..x.rows() {
        let row = x.row(i);
        let r = T::one() / (dot(row, row) / T::of_usize(d) + eps).sqrt();
        for ((o, &xi), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = xi * r * g;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Adds the gradient w.r.t. the norm input into `dx` and w.r.t. the gain into `dgain`.
fn rms_norm_backward<T: Scalar>(
    x: &Matrix<T>,
    inv: &[T],
    gain: &[T],
    dy: &Matrix<T>,
    dx: &mut Matrix<T>,
    dgain: &mut [T],
) {
    let d = x.cols();
    let mut dn = vec![T::zero(); d];
    for i in 0..x.rows() {
        let r = inv[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut proj = T::zero();
        for j in 0..d {
            let n = xr[j] * r;
            dgain[j] += dyr[j] * n;
            dn[j] = dyr[j] * gain[j];
            proj += dn[j] * n;
        }
        proj /= T::of_usize(d);
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o += r * (dn[j] - xr[j] * r * proj);
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn add_bias<T: Scalar>(m: &mut Matrix<T>, b: &[T]) {
    for i in 0..m.rows() {
        for (o, &bi) in m.row_mut(i).iter_mut().zip(b) {
            *o += bi;
        }
    }
}

fn col_sum_into<T: Scalar>(m: &Matrix<T>, acc: &mut [T]) {
    for i in 0..m.rows() {
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
}

fn attends(mode: AttentionMode, keep: &[bool], i: usize, j: usize) -> bool {
    keep[i] && keep[j] && (mode == AttentionMode::Bidirectional || j <= i)
}

fn attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    keep: &[bool],
    config: &ModelConfig,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let n = q.rows();
    let dh = config.head_dim();
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut ctx = Matrix::zeros(n, config.d_model);
    let mut probs = Vec::with_capacity(config.n_heads);
    let mut scores = vec![T::zero(); n];
    for h in 0..config.n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            if !keep[i] {
                continue;
            }
            let qi = &q.row(i)[cols.clone()];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if attends(config.attention_mode, keep, i, j) {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            let mut z = T::zero();
            for j in 0..n {
                if attends(config.attention_mode, keep, i, j) {
                    let e = (scores[j] - max).exp();
                    p.set(i, j, e);
                    z += e;
                }
            }
            let prow = p.row_mut(i);
            for j in 0..n {
                prow[j] /= z;
            }
            let mut out = vec![T::zero(); dh];
            for j in 0..n {
                let pij = p.get(i, j);
                if pij != T::zero() {
                    axpy(pij, &v.row(j)[cols.clone()], &mut out);
                }
            }
            ctx.row_mut(i)[cols.clone()].copy_from_slice(&out);
        }
        probs.push(p);
    }
    (ctx, probs)
}

/// Runs the backbone on one token sequence.
pub fn forward<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    tokens: &TokenSeq,
    training: bool,
) -> Result<ForwardOutput<T>> {
    let n = tokens.len();
    if n > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: n, max: config.max_seq_len });
    }
    if tokens.keep.len() != n {
        return Err(Error::Shape("token ids and keep-mask differ in length".into()));
    }
    let d = config.d_model;
    let mut x = Matrix::zeros(n, d);
    for (i, &id) in tokens.ids.iter().enumerate() {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab_size: config.vocab_size });
        }
        let row = x.row_mut(i);
        for ((o, &e), &p) in row
            .iter_mut()
            .zip(params.token_embedding.row(id as usize))
            .zip(params.position_embedding.row(i))
        {
            *o = e + p;
        }
    }

    let mut caches = Vec::with_capacity(if training { params.layers.len() } else { 0 });
    for layer in &params.layers {
        let (h1, attn_inv_rms) = rms_norm(&x, &layer.attn_norm);
        let q = h1.matmul(&layer.wq);
        let k = h1.matmul(&layer.wk);
        let v = h1.matmul(&layer.wv);
        let (ctx, probs) = attention(&q, &k, &v, &tokens.keep, config);
        let mut mid = ctx.matmul(&layer.wo);
        mid.add_assign(&x);
        let (h2, ffn_inv_rms) = rms_norm(&mid, &layer.ffn_norm);
        let mut pre_act = h2.matmul(&layer.w1);
        add_bias(&mut pre_act, &layer.b1);
        let mut act = pre_act.clone();
        act.as_mut_slice().iter_mut().for_each(|a| *a = gelu(*a));
        let mut out = act.matmul(&layer.w2);
        add_bias(&mut out, &layer.b2);
        out.add_assign(&mid);
        let input = std::mem::replace(&mut x, out);
        if training {
            caches.push(LayerCache {
                input,
                attn_inv_rms,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                mid,
                ffn_inv_rms,
                h2,
                pre_act,
                act,
            });
        }
    }

    let (hidden, final_inv_rms) = rms_norm(&x, &params.final_norm);
    let pooled = mean_pool(&hidden, &tokens.keep);
    let trace = training.then(|| ForwardTrace {
        ids: tokens.ids.clone(),
        keep: tokens.keep.clone(),
        layers: caches,
        pre_norm: x,
        final_inv_rms,
    });
    Ok(ForwardOutput { hidden, pooled, trace })
}

/// Mean of the rows whose keep flag is set; zero vector when none are kept.
pub fn mean_pool<T: Scalar>(hidden: &Matrix<T>, keep: &[bool]) -> Vec<T> {
    let mut pooled = vec![T::zero(); hidden.cols()];
    let mut n_kept = 0;
    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        for (p, &h) in pooled.iter_mut().zip(hidden.row(i)) {
            *p += h;
        }
        n_kept += 1;
    }
    if n_kept > 0 {
        let n = T::of_usize(n_kept);
        pooled.iter_mut().for_each(|p| *p /= n);
    }
    pooled
}

/// Gradient of `upstream · pooled` w.r.t. every parameter, returned as a fresh set.
pub fn backward<T: Scalar>(
    trace: Option<&ForwardTrace<T>>,
    params: &ParameterSet<T>,
    config: &ModelConfig,
    upstream: &[T],
) -> Result<ParameterSet<T>> {
    let trace = trace.ok_or(Error::MissingTrace)?;
    let mut grads = ParameterSet::zeros(config);
    backward_into(trace, params, config, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing gradient set.
pub fn backward_into<T: Scalar>(
    trace: &ForwardTrace<T>,
    params: &ParameterSet<T>,
    config: &ModelConfig,
    upstream: &[T],
    grads: &mut ParameterSet<T>,
) -> Result<()> {
    let d = config.d_model;
    if upstream.len() != d {
        return Err(Error::Shape(format!("upstream gradient has length {}, expected {d}", upstream.len())));
    }
    if trace.layers.len() != params.layers.len() {
        return Err(Error::MissingTrace);
    }
    let n = trace.ids.len();
    let n_kept = trace.keep.iter().filter(|&&k| k).count();
    if n_kept == 0 || upstream.iter().all(|g| *g == T::zero()) {
        return Ok(());
    }

    let mut dy = Matrix::zeros(n, d);
    let w = T::one() / T::of_usize(n_kept);
    for i in (0..n).filter(|&i| trace.keep[i]) {
        for (o, &g) in dy.row_mut(i).iter_mut().zip(upstream) {
            *o = g * w;
        }
    }
    let mut dx = Matrix::zeros(n, d);
    rms_norm_backward(&trace.pre_norm, &trace.final_inv_rms, &params.final_norm, &dy, &mut dx, &mut grads.final_norm);

    let dh = config.head_dim();
    let scale = T::one() / T::of_usize(dh).sqrt();
    for (l, cache) in trace.layers.iter().enumerate().rev() {
        let p = &params.layers[l];
        let g = &mut grads.layers[l];

        // Feed-forward branch: out = mid + gelu(h2 W1 + b1) W2 + b2
        col_sum_into(&dx, &mut g.b2);
        cache.act.matmul_tn_into(&dx, &mut g.w2);
        let mut dpre = dx.matmul_nt(&p.w2);
        for (dp, &z) in dpre.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
            *dp *= gelu_grad(z);
        }
        col_sum_into(&dpre, &mut g.b1);
        cache.h2.matmul_tn_into(&dpre, &mut g.w1);
        let dh2 = dpre.matmul_nt(&p.w1);
        let mut dmid = dx;
        rms_norm_backward(&cache.mid, &cache.ffn_inv_rms, &p.ffn_norm, &dh2, &mut dmid, &mut g.ffn_norm);

        // Attention branch: mid = input + ctx Wo
        cache.ctx.matmul_tn_into(&dmid, &mut g.wo);
        let dctx = dmid.matmul_nt(&p.wo);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp_row = vec![T::zero(); n];
        for (h, probs) in cache.probs.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            for i in (0..n).filter(|&i| trace.keep[i]) {
                let dci = &dctx.row(i)[cols.clone()];
                let prow = probs.row(i);
                let mut weighted = T::zero();
                for j in 0..n {
                    if prow[j] != T::zero() {
                        dp_row[j] = dot(dci, &cache.v.row(j)[cols.clone()]);
                        weighted += dp_row[j] * prow[j];
                        axpy(prow[j], dci, &mut dv.row_mut(j)[cols.clone()]);
                    }
                }
                for j in 0..n {
                    if prow[j] != T::zero() {
                        let ds = prow[j] * (dp_row[j] - weighted) * scale;
                        axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                        axpy(ds, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                    }
                }
            }
        }
        cache.h1.matmul_tn_into(&dq, &mut g.wq);
        cache.h1.matmul_tn_into(&dk, &mut g.wk);
        cache.h1.matmul_tn_into(&dv, &mut g.wv);
        let mut dh1 = dq.matmul_nt(&p.wq);
        dh1.add_assign(&dk.matmul_nt(&p.wk));
        dh1.add_assign(&dv.matmul_nt(&p.wv));
        let mut dinput = dmid;
        rms_norm_backward(&cache.input, &cache.attn_inv_rms, &p.attn_norm, &dh1, &mut dinput, &mut g.attn_norm);
        dx = dinput;
    }

    for (i, &id) in trace.ids.iter().enumerate() {
        let row = dx.row(i);
        axpy(T::one(), row, grads.token_embedding.row_mut(id as usize));
        axpy(T::one(), row, grads.position_embedding.row_mut(i));
    }
    Ok(())
}

/// Keeps the `k` input-side blocks, the embeddings and the final norm gain.
pub fn prune_bottom_layers<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    k: usize,
) -> Result<(ParameterSet<T>, ModelConfig)> {
    if k == 0 || k > config.n_layers {
        return Err(Error::Config(format!("prune: k must be in 1..={}, got {k}", config.n_layers)));
    }
    let pruned = ParameterSet {
        token_embedding: params.token_embedding.clone(),
        position_embedding: params.position_embedding.clone(),
        layers: params.layers[..k].to_vec(),
        final_norm: params.final_norm.clone(),
    };
    Ok((pruned, ModelConfig { n_layers: k, ..config.clone() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, PAD};

    pub(crate) fn tiny(mode: AttentionMode, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 10,
            attention_mode: mode,
            pooling: Pooling::Mean,
            seed,
        }
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq { ids: ids.to_vec(), keep: ids.iter().map(|&i| i != PAD).collect() }
    }

    #[test]
    fn config_divisibility() {
        let mut c = tiny(AttentionMode::Bidirectional, 0);
        c.n_heads = 3;
        assert!(init_params::<f64>(&c).is_err());
        c.n_heads = 2;
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let c = tiny(AttentionMode::Bidirectional, 9);
        let a = init_params::<f64>(&c).unwrap();
        assert_eq!(a, init_params::<f64>(&c).unwrap());
        assert!(a.final_norm.iter().all(|&g| g == 1.0));
        assert!(a.layers.iter().all(|l| l.attn_norm.iter().chain(&l.ffn_norm).all(|&g| g == 1.0)));
        assert!(a.layers.iter().all(|l| l.b1.iter().chain(&l.b2).all(|&b| b == 0.0)));
        let other = init_params::<f64>(&ModelConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn single_kept_position_pools_to_its_state() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 1)).unwrap();
        let out = bb.forward(&seq(&[BOS, PAD, PAD, PAD]), false).unwrap();
        assert_eq!(out.pooled, out.hidden.row(0).to_vec());
    }

    #[test]
    fn causal_prefix_is_untouched_by_later_tokens() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Causal, 2)).unwrap();
        let a = bb.forward(&seq(&[BOS, 5, 6, 7]), false).unwrap();
        let b = bb.forward(&seq(&[BOS, 5, 6, 9]), false).unwrap();
        for i in 0..3 {
            assert_eq!(a.hidden.row(i), b.hidden.row(i));
        }
        assert_ne!(a.hidden.row(3), b.hidden.row(3));
    }

    #[test]
    fn bidirectional_sees_the_future() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 2)).unwrap();
        let a = bb.forward(&seq(&[BOS, 5, PAD]), false).unwrap();
        let b = bb.forward(&seq(&[BOS, 6, PAD]), false).unwrap();
        assert_ne!(a.hidden.row(0), b.hidden.row(0));
    }

    #[test]
    fn rejects_bad_tokens() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 2)).unwrap();
        assert!(matches!(bb.forward(&seq(&[BOS, 99]), false), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(bb.forward(&seq(&[BOS; 11]), false), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 3)).unwrap();
        let out = bb.forward(&seq(&[BOS, 4, 5, PAD]), true).unwrap();
        let g = backward(out.trace.as_ref(), &bb.params, &bb.config, &[0.0; 8]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(matches!(backward(None, &bb.params, &bb.config, &[0.0; 8]), Err(Error::MissingTrace)));
    }

    #[test]
    fn gradients_finite_with_padding_rows() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Causal, 3)).unwrap();
        let out = bb.forward(&seq(&[BOS, 4, PAD, PAD, PAD]), true).unwrap();
        let g = backward(out.trace.as_ref(), &bb.params, &bb.config, &[1.0; 8]).unwrap();
        assert!(g.is_finite());
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn prune_range() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 3)).unwrap();
        assert!(bb.prune(0).is_err());
        assert!(bb.prune(3).is_err());
        let same = bb.prune(2).unwrap();
        assert_eq!(same, bb);
    }

    #[test]
    fn cast_round_trip_shapes() {
        let bb = Backbone::<f64>::new(tiny(AttentionMode::Bidirectional, 3)).unwrap();
        let small: Backbone<f32> = bb.cast();
        small.params.check_shapes(&small.config).unwrap();
        let out = small.forward(&seq(&[BOS, 4]), false).unwrap();
        assert_eq!(out.pooled.len(), 8);
    }
}
