//! Differentiable building blocks with explicit forward caches and
//! hand-written backward passes.
//!
//! Every layer keeps its weights in plain `ndarray` arrays. Gradients live in
//! a value of the same type (see [`Params::zeros_like`]), so parameters,
//! gradients and optimizer moments can be walked in lock-step.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Named tensor traversal. Both visitors must walk tensors in the same
/// order.
/// Callback receiving a tensor's name, shape and values.
pub type Visitor<'a, T> = dyn FnMut(&str, &[usize], &[T]) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, &[usize], &mut [T]) + 'a;

pub trait Params<T: Scalar>: Clone {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>);

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, _, xs| {
            xs.iter_mut().for_each(|x| *x = T::zero())
        });
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, xs| n += xs.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, xs| out.extend_from_slice(xs));
        out
    }

    /// Overwrites all values from `flat`, which must hold `num_params()`.
    fn assign(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, xs| {
            xs.copy_from_slice(&flat[offset..offset + xs.len()]);
            offset += xs.len();
        });
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: T) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut("", &mut |_, _, xs| {
            for (x, g) in xs.iter_mut().zip(&flat[offset..]) {
                *x += *g * scale;
            }
            offset += xs.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, xs| ok &= xs.iter().all(|x| x.is_finite()));
        ok
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slice_of<T>(
    a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, impl ndarray::Dimension>,
) -> &[T] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.gen_range(-bound..bound)))
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: xavier(inputs, outputs, rng),
            b: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl<T: Scalar> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weight"), self.w.shape(), slice_of(&self.w));
        f(&join(prefix, "bias"), self.b.shape(), slice_of(&self.b));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let shape = self.w.shape().to_vec();
        f(
            &join(prefix, "weight"),
            &shape,
            self.w.as_slice_mut().unwrap(),
        );
        let shape = self.b.shape().to_vec();
        f(
            &join(prefix, "bias"),
            &shape,
            self.b.as_slice_mut().unwrap(),
        );
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::of(x.ncols() as f64);
        let mean = x.sum_axis(Axis(1)) / n;
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| T::one() / (v + T::of(LN_EPS)).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache<T>,
        dy: &Array2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let n = T::of(dy.ncols() as f64);
        let dxhat = dy * &self.gamma;
        let mean_d = dxhat.sum_axis(Axis(1)) / n;
        let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let inner =
            dxhat - &mean_d.insert_axis(Axis(1)) - &(&cache.xhat * &mean_dx.insert_axis(Axis(1)));
        inner * cache.inv_std.view().insert_axis(Axis(1))
    }
}

impl<T: Scalar> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(
            &join(prefix, "gamma"),
            self.gamma.shape(),
            slice_of(&self.gamma),
        );
        f(
            &join(prefix, "beta"),
            self.beta.shape(),
            slice_of(&self.beta),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let shape = self.gamma.shape().to_vec();
        f(
            &join(prefix, "gamma"),
            &shape,
            self.gamma.as_slice_mut().unwrap(),
        );
        let shape = self.beta.shape().to_vec();
        f(
            &join(prefix, "beta"),
            &shape,
            self.beta.as_slice_mut().unwrap(),
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Multi-head scaled dot-product attention. Keys at positions `>= key_len`
/// are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    q_in: Array2<T>,
    kv_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

pub(crate) fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, valid: usize) {
    for mut row in scores.rows_mut() {
        let max = row
            .slice(s![..valid])
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < valid {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> Attention<T> {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        q_in: &Array2<T>,
        kv_in: &Array2<T>,
        key_len: usize,
    ) -> (Array2<T>, AttentionCache<T>) {
        let q = self.query.forward(q_in);
        let k = self.key.forward(kv_in);
        let v = self.value.forward(kv_in);
        let dim = q.ncols();
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut context = Array2::zeros((q.nrows(), dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax_rows(&mut scores, key_len);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.output.forward(&context);
        let cache = AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            context,
        };
        (out, cache)
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dout: &Array2<T>,
        grad: &mut Self,
    ) -> (Array2<T>, Array2<T>) {
        let dcontext = self.output.backward(&cache.context, dout, &mut grad.output);
        let dim = cache.q.ncols();
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dctx = dcontext.slice(cols);
            let dp = dctx.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dq_in = self.query.backward(&cache.q_in, &dq, &mut grad.query);
        let dkv_in = self.key.backward(&cache.kv_in, &dk, &mut grad.key)
            + self.value.backward(&cache.kv_in, &dv, &mut grad.value);
        (dq_in, dkv_in)
    }
}

impl<T: Scalar> Params<T> for Attention<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Inverted dropout mask; `None` when dropout is off.
pub(crate) fn dropout_mask<T: Scalar>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Option<Array2<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    }))
}

fn apply_mask<T: Scalar>(x: Array2<T>, mask: &Option<Array2<T>>) -> Array2<T> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

/// Post-norm transformer encoder layer: self-attention and a GELU
/// feed-forward block, each followed by dropout, a residual and LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: Attention<T>,
    pub norm1: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub norm2: LayerNorm<T>,
}

pub struct EncoderCache<T> {
    attention: AttentionCache<T>,
    drop1: Option<Array2<T>>,
    norm1: LayerNormCache<T>,
    h1: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
    drop2: Option<Array2<T>>,
    norm2: LayerNormCache<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn init(dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: Attention::init(dim, heads, rng),
            norm1: LayerNorm::new(dim),
            ff1: Linear::init(dim, ffn, rng),
            ff2: Linear::init(ffn, dim, rng),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn forward(
        &self,
        x: &Array2<T>,
        len: usize,
        dropout: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<T>, EncoderCache<T>) {
        let (a, attention) = self.attention.forward(x, x, len);
        let drop1 = dropout_mask(a.dim(), dropout, rng.as_deref_mut());
        let r1 = x + &apply_mask(a, &drop1);
        let (h1, norm1) = self.norm1.forward(&r1);
        let pre_act = self.ff1.forward(&h1);
        let act = pre_act.mapv(gelu);
        let f = self.ff2.forward(&act);
        let drop2 = dropout_mask(f.dim(), dropout, rng);
        let r2 = &h1 + &apply_mask(f, &drop2);
        let (out, norm2) = self.norm2.forward(&r2);
        let cache = EncoderCache {
            attention,
            drop1,
            norm1,
            h1,
            pre_act,
            act,
            drop2,
            norm2,
        };
        (out, cache)
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        dout: &Array2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let dr2 = self.norm2.backward(&cache.norm2, dout, &mut grad.norm2);
        let df = apply_mask(dr2.clone(), &cache.drop2);
        let dact = self.ff2.backward(&cache.act, &df, &mut grad.ff2);
        let dpre = dact * &cache.pre_act.mapv(gelu_grad);
        let dh1 = dr2 + self.ff1.backward(&cache.h1, &dpre, &mut grad.ff1);
        let dr1 = self.norm1.backward(&cache.norm1, &dh1, &mut grad.norm1);
        let da = apply_mask(dr1.clone(), &cache.drop1);
        let (dq, dkv) = self
            .attention
            .backward(&cache.attention, &da, &mut grad.attention);
        dr1 + dq + dkv
    }
}

impl<T: Scalar> Params<T> for EncoderLayer<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.attention.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        self.attention.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Column-wise max over the first `len` rows; returns values and argmax rows.
pub fn masked_max_pool<T: Scalar>(h: &Array2<T>, len: usize) -> (Array1<T>, Vec<usize>) {
    let mut values = Array1::from_elem(h.ncols(), T::neg_infinity());
    let mut argmax = vec![0; h.ncols()];
    for (i, row) in h.rows().into_iter().take(len).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > values[j] {
                values[j] = v;
                argmax[j] = i;
            }
        }
    }
    (values, argmax)
}

pub fn max_pool_backward<T: Scalar>(dv: &Array1<T>, argmax: &[usize], rows: usize) -> Array2<T> {
    let mut dh = Array2::zeros((rows, dv.len()));
    for (j, (&i, &g)) in argmax.iter().zip(dv).enumerate() {
        dh[[i, j]] += g;
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `loss` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            g[[r, c]] = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale.max(1e-12)
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut r = rng();
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Array1::from_shape_simple_fn(5, || r.gen_range(0.5..1.5));
        let x = rand_matrix(3, 5, &mut r);
        let weights = rand_matrix(3, 5, &mut r);
        let loss = |x: &Array2<f64>| (ln.forward(x).0 * &weights).sum();
        let (_, cache) = ln.forward(&x);
        let mut grad = ln.zeros_like();
        let dx = ln.backward(&cache, &weights, &mut grad);
        assert!(rel_err(&dx, &numeric_grad(&x, loss)) < 1e-7);
    }

    #[test]
    fn attention_input_gradients() {
        let mut r = rng();
        let attn = Attention::<f64>::init(6, 2, &mut r);
        let q_in = rand_matrix(3, 6, &mut r);
        let kv_in = rand_matrix(4, 6, &mut r);
        let weights = rand_matrix(3, 6, &mut r);
        let (_, cache) = attn.forward(&q_in, &kv_in, 3);
        let mut grad = attn.zeros_like();
        let (dq, dkv) = attn.backward(&cache, &weights, &mut grad);
        let nq = numeric_grad(&q_in, |q| (attn.forward(q, &kv_in, 3).0 * &weights).sum());
        let nkv = numeric_grad(&kv_in, |kv| (attn.forward(&q_in, kv, 3).0 * &weights).sum());
        assert!(rel_err(&dq, &nq) < 1e-7);
        assert!(rel_err(&dkv, &nkv) < 1e-7);
        // the masked key row receives no gradient
        assert!(dkv.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_input_gradient() {
        let mut r = rng();
        let layer = EncoderLayer::<f64>::init(4, 2, 8, &mut r);
        let x = rand_matrix(5, 4, &mut r);
        let weights = rand_matrix(5, 4, &mut r);
        let (_, cache) = layer.forward(&x, 5, 0.0, None);
        let mut grad = layer.zeros_like();
        let dx = layer.backward(&cache, &weights, &mut grad);
        let nx = numeric_grad(&x, |x| (layer.forward(x, 5, 0.0, None).0 * &weights).sum());
        assert!(rel_err(&dx, &nx) < 1e-6);
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut s = Array2::from_shape_vec((1, 4), vec![1.0f64, 2.0, 100.0, 100.0]).unwrap();
        masked_softmax_rows(&mut s, 2);
        assert_eq!(s[[0, 2]], 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_ignores_padding_rows() {
        let h = Array2::from_shape_vec((3, 2), vec![1.0, 5.0, 2.0, 0.0, 9.0, 9.0]).unwrap();
        let (v, arg) = masked_max_pool(&h, 2);
        assert_eq!(v.to_vec(), [2.0, 5.0]);
        assert_eq!(arg, [1, 0]);
    }

    #[test]
    fn param_names_are_hierarchical() {
        let layer = EncoderLayer::<f32>::init(4, 2, 8, &mut rng());
        let mut names = Vec::new();
        layer.visit("enc.0", &mut |n, _, _| names.push(n.to_string()));
        assert_eq!(names[0], "enc.0.self_attn.query.weight");
        assert_eq!(names.last().unwrap(), "enc.0.norm2.beta");
        assert_eq!(layer.num_params(), layer.flatten().len());
    }
}
