//! Building blocks with hand-written backward passes.
//!
//! Every forward function returns whatever its backward needs; backward
//! functions accumulate parameter gradients into a structure of the same
//! shape as the parameters and return the gradient of the input.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};

use super::real::Real;
use crate::rng::Stream;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Draws from N(0, std²) truncated at two standard deviations.
pub fn truncated_normal<T: Real>(stream: &mut Stream, std: f64) -> T {
    loop {
        let z: f64 = StandardNormal.sample(stream);
        if z.abs() <= 2.0 {
            return T::lit(z * std);
        }
    }
}

/// Affine map `y = x·W + b` with `W` stored as inputs × outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn init(inputs: usize, outputs: usize, stream: &mut Stream) -> Self {
        Linear {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || truncated_normal(stream, INIT_STD)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub shift: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let width = T::lit(x.ncols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / width;
            *r = T::one() / (var + eps).sqrt();
            let scale = *r;
            row.mapv_inplace(|v| v * scale);
        }
        let mut y = &xhat * &self.gain;
        y += &self.shift;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let width = T::lit(dy.ncols() as f64);
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / width;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / width;
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|d, &xh| *d = r * (*d - mean_d - xh * mean_dx));
        }
        dx
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Shape of a batch of equal-length token sequences stored row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

/// Multi-head softmax attention over fused `[q | k | v]` rows. Tokens only
/// attend within their own sequence. Returns the head outputs (n × E) and
/// the attention probabilities.
pub fn attention_forward<T: Real>(qkv: &Array2<T>, shape: SeqShape) -> (Array2<T>, Vec<T>) {
    let SeqShape { batch, seq, heads } = shape;
    let width = qkv.ncols() / 3;
    let d = width / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let qkv = qkv.as_standard_layout();
    let src = qkv.as_slice().expect("standard layout");
    let stride = 3 * width;

    let mut out = Array2::<T>::zeros((batch * seq, width));
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let dst = out.as_slice_mut().expect("standard layout");
    let mut scores = vec![T::zero(); seq];

    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let row_i = b * seq + i;
                let q = &src[row_i * stride + h * d..][..d];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &src[(b * seq + j) * stride + width + h * d..][..d];
                    *s = q.iter().zip(k).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                let o = &mut dst[row_i * width + h * d..][..d];
                for (j, (pj, s)) in p.iter_mut().zip(&scores).enumerate() {
                    *pj = *s / total;
                    let v = &src[(b * seq + j) * stride + 2 * width + h * d..][..d];
                    for (oc, &vc) in o.iter_mut().zip(v) {
                        *oc += *pj * vc;
                    }
                }
            }
        }
    }
    (out, probs)
}

pub fn attention_backward<T: Real>(qkv: &Array2<T>, probs: &[T], d_out: &Array2<T>, shape: SeqShape) -> Array2<T> {
    let SeqShape { batch, seq, heads } = shape;
    let width = qkv.ncols() / 3;
    let d = width / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let qkv = qkv.as_standard_layout();
    let src = qkv.as_slice().expect("standard layout");
    let d_out = d_out.as_standard_layout();
    let dy = d_out.as_slice().expect("standard layout");
    let stride = 3 * width;

    let mut grad = Array2::<T>::zeros(qkv.raw_dim());
    let g = grad.as_slice_mut().expect("standard layout");
    let mut dp = vec![T::zero(); seq];

    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let row_i = b * seq + i;
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let dyi = &dy[row_i * width + h * d..][..d];
                let mut weighted = T::zero();
                for (j, (dpj, &pj)) in dp.iter_mut().zip(p).enumerate() {
                    let vrow = (b * seq + j) * stride + 2 * width + h * d;
                    *dpj = dyi.iter().zip(&src[vrow..vrow + d]).map(|(&a, &c)| a * c).sum();
                    weighted += *dpj * pj;
                    for (gv, &dyc) in g[vrow..vrow + d].iter_mut().zip(dyi) {
                        *gv += pj * dyc;
                    }
                }
                let qrow = row_i * stride + h * d;
                for (j, (&dpj, &pj)) in dp.iter().zip(p).enumerate() {
                    let ds = pj * (dpj - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = (b * seq + j) * stride + width + h * d;
                    for c in 0..d {
                        let kc = src[krow + c];
                        let qc = src[qrow + c];
                        g[qrow + c] += ds * kc;
                        g[krow + c] += ds * qc;
                    }
                }
            }
        }
    }
    grad
}

/// Pre-norm transformer block: `y = x + Attn(LN(x))`, `z = y + FF(LN(y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm_attn: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm_ff: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct BlockCache<T> {
    norm_attn: LayerNormCache<T>,
    normed_attn: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<T>,
    heads_out: Array2<T>,
    norm_ff: LayerNormCache<T>,
    normed_ff: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

impl<T: Real> Block<T> {
    pub fn init(width: usize, hidden: usize, stream: &mut Stream) -> Self {
        Block {
            norm_attn: LayerNorm::new(width),
            qkv: Linear::init(width, 3 * width, stream),
            proj: Linear::init(width, width, stream),
            norm_ff: LayerNorm::new(width),
            fc1: Linear::init(width, hidden, stream),
            fc2: Linear::init(hidden, width, stream),
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        Block {
            norm_attn: LayerNorm::zeros(width),
            qkv: Linear::zeros(width, 3 * width),
            proj: Linear::zeros(width, width),
            norm_ff: LayerNorm::zeros(width),
            fc1: Linear::zeros(width, hidden),
            fc2: Linear::zeros(hidden, width),
        }
    }

    pub fn forward(&self, x: &Array2<T>, shape: SeqShape) -> (Array2<T>, BlockCache<T>) {
        let (normed_attn, norm_attn) = self.norm_attn.forward(x);
        let qkv = self.qkv.forward(&normed_attn);
        let (heads_out, probs) = attention_forward(&qkv, shape);
        let mut y = self.proj.forward(&heads_out);
        y += x;
        let (normed_ff, norm_ff) = self.norm_ff.forward(&y);
        let pre_act = self.fc1.forward(&normed_ff);
        let act = pre_act.mapv(gelu);
        let mut z = self.fc2.forward(&act);
        z += &y;
        let cache = BlockCache {
            norm_attn,
            normed_attn,
            qkv,
            probs,
            heads_out,
            norm_ff,
            normed_ff,
            pre_act,
            act,
        };
        (z, cache)
    }

    pub fn backward(&self, cache: &BlockCache<T>, dz: &Array2<T>, grad: &mut Block<T>, shape: SeqShape) -> Array2<T> {
        let mut d_act = self.fc2.backward(&cache.act, dz, &mut grad.fc2);
        Zip::from(&mut d_act)
            .and(&cache.pre_act)
            .for_each(|d, &x| *d *= gelu_grad(x));
        let d_normed_ff = self.fc1.backward(&cache.normed_ff, &d_act, &mut grad.fc1);
        let mut dy = self.norm_ff.backward(&cache.norm_ff, &d_normed_ff, &mut grad.norm_ff);
        dy += dz;

        let d_heads = self.proj.backward(&cache.heads_out, &dy, &mut grad.proj);
        let d_qkv = attention_backward(&cache.qkv, &cache.probs, &d_heads, shape);
        let d_normed_attn = self.qkv.backward(&cache.normed_attn, &d_qkv, &mut grad.qkv);
        let mut dx = self.norm_attn.backward(&cache.norm_attn, &d_normed_attn, &mut grad.norm_attn);
        dx += &dy;
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // 1·Φ(1)
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        let h = 1e-6;
        for x in [-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let ln = LayerNorm::<f64>::new(4);
        let (y, _) = ln.forward(&array![[1.0, 2.0, 3.0, 4.0]]);
        let mean = y.sum() / 4.0;
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let qkv = Array2::from_shape_fn((6, 12), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5);
        let shape = SeqShape { batch: 2, seq: 3, heads: 2 };
        let (_, probs) = attention_forward(&qkv, shape);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
