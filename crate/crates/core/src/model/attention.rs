//! Bidirectional cross-attention between the two modality branches.
//!
//! Each spatial site is a token whose embedding is its channel vector. Each
//! modality owns query/key/value projections; the X-ray branch queries the
//! DRR tokens and vice versa.

use ndarray::{s, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Params;

/// Query/key/value projections of one modality, each `(d, d)` acting as
/// `tokens · W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkvProjection {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl QkvProjection {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (2 * d) as f64).sqrt();
        let mut m = || Array2::from_shape_fn((d, d), |_| rng.random_range(-limit..=limit));
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
        }
    }
}

impl Params for QkvProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.wq"), self.wq.as_slice().unwrap());
        f(&format!("{prefix}.wk"), self.wk.as_slice().unwrap());
        f(&format!("{prefix}.wv"), self.wv.as_slice().unwrap());
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.wq"), self.wq.as_slice_mut().unwrap());
        f(&format!("{prefix}.wk"), self.wk.as_slice_mut().unwrap());
        f(&format!("{prefix}.wv"), self.wv.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttention {
    pub heads: usize,
    /// Projections owned by the first (X-ray) branch.
    pub a: QkvProjection,
    /// Projections owned by the second (DRR) branch.
    pub b: QkvProjection,
}

/// One attention direction for one sample.
#[derive(Debug, Clone)]
pub struct DirectionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic attention weights per head, `(tokens, tokens)`.
    pub probs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct SampleCache {
    pub tokens_a: Array2<f64>,
    pub tokens_b: Array2<f64>,
    pub a_to_b: DirectionCache,
    pub b_to_a: DirectionCache,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub samples: Vec<SampleCache>,
    pub dims: (usize, usize, usize, usize),
}

/// `(d, H, W)` map → `(H*W, d)` token matrix.
pub fn to_tokens(feat: ndarray::ArrayView3<f64>) -> Array2<f64> {
    let (d, h, w) = feat.dim();
    feat.to_owned()
        .into_shape_with_order((d, h * w))
        .unwrap()
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Array2<f64>, dims: (usize, usize, usize)) -> ndarray::Array3<f64> {
    tokens
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(dims)
        .expect("token count matches the map")
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Multi-head scaled dot-product attention of `q` over `(k, v)`.
pub fn attend(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::<f64>::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut sc);
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    (out, probs)
}

/// Gradients of [`attend`] with respect to `q`, `k`, `v`.
pub fn attend_backward(
    cache: &DirectionCache,
    dout: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = cache.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
    for (hd, p) in cache.probs.iter().enumerate() {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&cache.v.slice(cols).t());
        // softmax Jacobian row by row: ds = p ⊙ (dp − Σ dp⊙p)
        let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (dp - &inner) * p * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    (dq, dk, dv)
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "attention dim must split across heads"
        );
        Self {
            heads,
            a: QkvProjection::new(dim, rng),
            b: QkvProjection::new(dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.wq.nrows()
    }

    /// Returns `(att_a, att_b)`: `att_a` has queries from `feat_a` and
    /// keys/values from `feat_b`; `att_b` the reverse.
    pub fn forward(
        &self,
        feat_a: &Array4<f64>,
        feat_b: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, AttentionCache) {
        assert_eq!(feat_a.dim(), feat_b.dim(), "attention branches must match");
        let (n, d, h, w) = feat_a.dim();
        let mut att_a = Array4::<f64>::zeros((n, d, h, w));
        let mut att_b = Array4::<f64>::zeros((n, d, h, w));
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let xa = to_tokens(feat_a.index_axis(Axis(0), i));
            let xb = to_tokens(feat_b.index_axis(Axis(0), i));
            let (qa, ka, va) = (xa.dot(&self.a.wq), xa.dot(&self.a.wk), xa.dot(&self.a.wv));
            let (qb, kb, vb) = (xb.dot(&self.b.wq), xb.dot(&self.b.wk), xb.dot(&self.b.wv));
            let (oa, pa) = attend(&qa, &kb, &vb, self.heads);
            let (ob, pb) = attend(&qb, &ka, &va, self.heads);
            att_a
                .index_axis_mut(Axis(0), i)
                .assign(&from_tokens(&oa, (d, h, w)));
            att_b
                .index_axis_mut(Axis(0), i)
                .assign(&from_tokens(&ob, (d, h, w)));
            samples.push(SampleCache {
                tokens_a: xa,
                tokens_b: xb,
                a_to_b: DirectionCache {
                    q: qa,
                    k: kb,
                    v: vb,
                    probs: pa,
                },
                b_to_a: DirectionCache {
                    q: qb,
                    k: ka,
                    v: va,
                    probs: pb,
                },
            });
        }
        (
            att_a,
            att_b,
            AttentionCache {
                samples,
                dims: (n, d, h, w),
            },
        )
    }

    /// Returns `(d feat_a, d feat_b)` and accumulates projection gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        d_att_a: &Array4<f64>,
        d_att_b: &Array4<f64>,
        grad: &mut CrossAttention,
    ) -> (Array4<f64>, Array4<f64>) {
        let (n, d, h, w) = cache.dims;
        let mut dfa = Array4::<f64>::zeros((n, d, h, w));
        let mut dfb = Array4::<f64>::zeros((n, d, h, w));
        for (i, sc) in cache.samples.iter().enumerate() {
            let doa = to_tokens(d_att_a.index_axis(Axis(0), i));
            let dob = to_tokens(d_att_b.index_axis(Axis(0), i));
            let (dqa, dkb, dvb) = attend_backward(&sc.a_to_b, doa.view(), self.heads);
            let (dqb, dka, dva) = attend_backward(&sc.b_to_a, dob.view(), self.heads);
            let (xa, xb) = (&sc.tokens_a, &sc.tokens_b);
            grad.a.wq += &xa.t().dot(&dqa);
            grad.a.wk += &xa.t().dot(&dka);
            grad.a.wv += &xa.t().dot(&dva);
            grad.b.wq += &xb.t().dot(&dqb);
            grad.b.wk += &xb.t().dot(&dkb);
            grad.b.wv += &xb.t().dot(&dvb);
            let dxa = dqa.dot(&self.a.wq.t()) + dka.dot(&self.a.wk.t()) + dva.dot(&self.a.wv.t());
            let dxb = dqb.dot(&self.b.wq.t()) + dkb.dot(&self.b.wk.t()) + dvb.dot(&self.b.wv.t());
            dfa.index_axis_mut(Axis(0), i)
                .assign(&from_tokens(&dxa, (d, h, w)));
            dfb.index_axis_mut(Axis(0), i)
                .assign(&from_tokens(&dxb, (d, h, w)));
        }
        (dfa, dfb)
    }
}

impl Params for CrossAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.a.visit(&format!("{prefix}.a"), f);
        self.b.visit(&format!("{prefix}.b"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.a.visit_mut(&format!("{prefix}.a"), f);
        self.b.visit_mut(&format!("{prefix}.b"), f);
    }
}
