//! Hyperparameters, learned parameters and the input/output projections
//! shared by both attention paths.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{norm, FrameSet};
use crate::rng::Rng;
use crate::tensor::{linear, Tensor};
use crate::Scalar;

/// Per-head channel cap of common fused attention kernels.
pub const MAX_HEAD_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpaConfig {
    /// Width of the single representation `s`.
    pub d_in: usize,
    /// Pair channels.
    pub d_z: usize,
    pub heads: usize,
    /// Scalar channels per head.
    pub c: usize,
    pub n_query: usize,
    pub n_value: usize,
    /// Rank of the pair factorization.
    pub rank: usize,
    pub enforce_head_cap: bool,
}

impl Default for IpaConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_z: 16,
            heads: 4,
            c: 16,
            n_query: 4,
            n_value: 8,
            rank: 2,
            enforce_head_cap: true,
        }
    }
}

impl IpaConfig {
    /// Lifted query/key width `c + 5·N_query + r·d_z`.
    pub fn qk_dim(&self) -> usize {
        self.c + 5 * self.n_query + self.rank * self.d_z
    }

    /// Lifted value width `c + 3·N_value + r·d_z`.
    pub fn v_dim(&self) -> usize {
        self.c + 3 * self.n_value + self.rank * self.d_z
    }

    pub fn head_dim(&self) -> usize {
        self.qk_dim().max(self.v_dim())
    }

    /// Per-head block of the concatenated output: pair, scalar, points, norms.
    pub fn output_block(&self) -> usize {
        self.d_z + self.c + 4 * self.n_value
    }

    pub fn output_concat_dim(&self) -> usize {
        self.heads * self.output_block()
    }

    /// Checks positivity and, when `enforce_head_cap` is set, the lifted
    /// head-dimension cap. An uncapped config over the limit only logs.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_in", self.d_in),
            ("d_z", self.d_z),
            ("heads", self.heads),
            ("c", self.c),
            ("n_query", self.n_query),
            ("n_value", self.n_value),
            ("rank", self.rank),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.head_dim() > MAX_HEAD_DIM {
            let msg = format!(
                "lifted head dimension max({}, {}) exceeds {MAX_HEAD_DIM}",
                self.qk_dim(),
                self.v_dim()
            );
            if self.enforce_head_cap {
                return Err(Error::Config(msg));
            }
            log::warn!("{msg}; continuing because the head cap is not enforced");
        }
        Ok(())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Learned maps of one attention layer. Projection matrices are `[in, out]`
/// with head-major output channels (`h·c + ch`, `(h·N + p)·3 + xyz`).
#[derive(Debug, Clone, PartialEq)]
pub struct IpaWeights<T: Scalar> {
    pub config: IpaConfig,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_q_pts: Tensor<T>,
    pub b_q_pts: Tensor<T>,
    pub w_k_pts: Tensor<T>,
    pub b_k_pts: Tensor<T>,
    pub w_v_pts: Tensor<T>,
    pub b_v_pts: Tensor<T>,
    /// `[H, d_z]`, maps a pair cell to the per-head logit bias.
    pub pair_bias: Tensor<T>,
    /// `[H]`, softplus gives the point-term weight γ.
    pub gamma_raw: Tensor<T>,
    /// `[H·(d_z + c + 4·N_value), d_in]`
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub w_l: T,
    pub w_c: T,
}

impl<T: Scalar> IpaWeights<T> {
    /// Gaussian weights with std `1/√fan_in`, biases drawn the same way at
    /// one tenth the scale, and γ = 1 for every head.
    pub fn init(config: IpaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let IpaConfig {
            d_in,
            d_z,
            heads,
            c,
            n_query,
            n_value,
            ..
        } = config;
        let s_in = 1.0 / (d_in as f64).sqrt();
        let mut proj = |out: usize| {
            (
                Tensor::gaussian_scaled(rng, &[d_in, out], s_in),
                Tensor::gaussian_scaled(rng, &[out], 0.1 * s_in),
            )
        };
        let (w_q, b_q) = proj(heads * c);
        let (w_k, b_k) = proj(heads * c);
        let (w_v, b_v) = proj(heads * c);
        let (w_q_pts, b_q_pts) = proj(heads * n_query * 3);
        let (w_k_pts, b_k_pts) = proj(heads * n_query * 3);
        let (w_v_pts, b_v_pts) = proj(heads * n_value * 3);
        let pair_bias = Tensor::gaussian_scaled(rng, &[heads, d_z], 1.0 / (d_z as f64).sqrt());
        let gamma_raw = Tensor::full(&[heads], T::of((1f64.exp() - 1.0).ln()));
        let concat = config.output_concat_dim();
        let s_out = 1.0 / (concat as f64).sqrt();
        let w_out = Tensor::gaussian_scaled(rng, &[concat, d_in], s_out);
        let b_out = Tensor::gaussian_scaled(rng, &[d_in], 0.1 * s_out);
        Ok(Self {
            config,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_q_pts,
            b_q_pts,
            w_k_pts,
            b_k_pts,
            w_v_pts,
            b_v_pts,
            pair_bias,
            gamma_raw,
            w_out,
            b_out,
            w_l: T::of((1.0f64 / 3.0).sqrt()),
            w_c: T::of((2.0 / (9.0 * n_query as f64)).sqrt()),
        })
    }

    /// Effective per-head γ (softplus of the raw parameter).
    pub fn gamma(&self) -> Vec<T> {
        self.gamma_raw
            .data()
            .iter()
            .map(|g| T::of(softplus(g.as_f64())))
            .collect()
    }

    /// Named tensors in serialization order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_q_pts", &self.w_q_pts),
            ("b_q_pts", &self.b_q_pts),
            ("w_k_pts", &self.w_k_pts),
            ("b_k_pts", &self.b_k_pts),
            ("w_v_pts", &self.w_v_pts),
            ("b_v_pts", &self.b_v_pts),
            ("pair_bias", &self.pair_bias),
            ("gamma_raw", &self.gamma_raw),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    /// Shapes each named tensor must have under `config`.
    pub fn expected_shapes(config: &IpaConfig) -> Vec<(&'static str, Vec<usize>)> {
        let IpaConfig {
            d_in,
            d_z,
            heads: h,
            c,
            n_query: nq,
            n_value: nv,
            ..
        } = *config;
        vec![
            ("w_q", vec![d_in, h * c]),
            ("b_q", vec![h * c]),
            ("w_k", vec![d_in, h * c]),
            ("b_k", vec![h * c]),
            ("w_v", vec![d_in, h * c]),
            ("b_v", vec![h * c]),
            ("w_q_pts", vec![d_in, h * nq * 3]),
            ("b_q_pts", vec![h * nq * 3]),
            ("w_k_pts", vec![d_in, h * nq * 3]),
            ("b_k_pts", vec![h * nq * 3]),
            ("w_v_pts", vec![d_in, h * nv * 3]),
            ("b_v_pts", vec![h * nv * 3]),
            ("pair_bias", vec![h, d_z]),
            ("gamma_raw", vec![h]),
            ("w_out", vec![config.output_concat_dim(), d_in]),
            ("b_out", vec![d_in]),
        ]
    }

    /// Shapes agree with `config` and the weighting constants are positive.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for ((name, t), (_, want)) in self
            .named_tensors()
            .into_iter()
            .zip(Self::expected_shapes(&self.config))
        {
            if t.shape() != want.as_slice() {
                return Err(shape_err!("{name} is {:?}, expected {want:?}", t.shape()));
            }
        }
        if !(self.w_l > T::zero() && self.w_c > T::zero()) {
            return Err(Error::Config("w_L and w_C must be positive".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> IpaWeights<U> {
        IpaWeights {
            config: self.config,
            w_q: self.w_q.cast(),
            b_q: self.b_q.cast(),
            w_k: self.w_k.cast(),
            b_k: self.b_k.cast(),
            w_v: self.w_v.cast(),
            b_v: self.b_v.cast(),
            w_q_pts: self.w_q_pts.cast(),
            b_q_pts: self.b_q_pts.cast(),
            w_k_pts: self.w_k_pts.cast(),
            b_k_pts: self.b_k_pts.cast(),
            w_v_pts: self.w_v_pts.cast(),
            b_v_pts: self.b_v_pts.cast(),
            pair_bias: self.pair_bias.cast(),
            gamma_raw: self.gamma_raw.cast(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
            w_l: U::of(self.w_l.as_f64()),
            w_c: U::of(self.w_c.as_f64()),
        }
    }
}

/// Head-major projections of the single representation. Point tensors hold
/// local-frame coordinates.
#[derive(Debug, Clone)]
pub struct Projections<T: Scalar> {
    /// `[H, L, c]`
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `[H, L, N_query, 3]`
    pub q_pts: Tensor<T>,
    pub k_pts: Tensor<T>,
    /// `[H, L, N_value, 3]`
    pub v_pts: Tensor<T>,
}

/// Scalar and point queries, keys and values from `s: [L, d_in]`.
pub fn project_inputs<T: Scalar>(s: &Tensor<T>, w: &IpaWeights<T>) -> Result<Projections<T>> {
    let cfg = &w.config;
    if s.rank() != 2 || s.dim(1) != cfg.d_in {
        return Err(shape_err!(
            "single representation must be [L, {}], got {:?}",
            cfg.d_in,
            s.shape()
        ));
    }
    let len = s.dim(0);
    let h = cfg.heads;
    let scalar = |wt: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        linear(s, wt, b)?.reshape(&[len, h, cfg.c])?.swap_leading()
    };
    let points = |wt: &Tensor<T>, b: &Tensor<T>, n: usize| -> Result<Tensor<T>> {
        linear(s, wt, b)?.reshape(&[len, h, n, 3])?.swap_leading()
    };
    Ok(Projections {
        q: scalar(&w.w_q, &w.b_q)?,
        k: scalar(&w.w_k, &w.b_k)?,
        v: scalar(&w.w_v, &w.b_v)?,
        q_pts: points(&w.w_q_pts, &w.b_q_pts, cfg.n_query)?,
        k_pts: points(&w.w_k_pts, &w.b_k_pts, cfg.n_query)?,
        v_pts: points(&w.w_v_pts, &w.b_v_pts, cfg.n_value)?,
    })
}

/// Maps point lanes `[H, L, N, 3]` through the frame of their residue.
pub(crate) fn globalize<T: Scalar>(pts: &Tensor<T>, frames: &FrameSet<T>) -> Tensor<T> {
    let (h, len, n) = (pts.dim(0), pts.dim(1), pts.dim(2));
    let src = pts.data();
    let mut out = Vec::with_capacity(src.len());
    for hh in 0..h {
        for i in 0..len {
            let f = &frames.frames[i];
            for p in 0..n {
                let o = ((hh * len + i) * n + p) * 3;
                out.extend_from_slice(&f.apply([src[o], src[o + 1], src[o + 2]]));
            }
        }
    }
    Tensor::new(&[h, len, n, 3], out).expect("shape preserved")
}

/// Concatenates per-head `(pair, scalar, points, point norms)` blocks for
/// each residue and applies the output projection.
///
/// `pair: [H, L, d_z]`, `scalar: [H, L, c]`, `points: [H, L, N_value, 3]`
/// (local frame of the query residue).
pub(crate) fn project_output<T: Scalar>(
    pair: &Tensor<T>,
    scalar: &Tensor<T>,
    points: &Tensor<T>,
    w: &IpaWeights<T>,
) -> Result<Tensor<T>> {
    let cfg = &w.config;
    let (h, len) = (cfg.heads, scalar.dim(1));
    let nv = cfg.n_value;
    let mut feats = Vec::with_capacity(len * cfg.output_concat_dim());
    for i in 0..len {
        for hh in 0..h {
            feats.extend_from_slice(pair.lane(&[hh, i]));
            feats.extend_from_slice(scalar.lane(&[hh, i]));
            let pts = &points.data()[(hh * len + i) * nv * 3..(hh * len + i + 1) * nv * 3];
            feats.extend_from_slice(pts);
            feats.extend(pts.chunks(3).map(|p| norm([p[0], p[1], p[2]])));
        }
    }
    let feats = Tensor::new(&[len, cfg.output_concat_dim()], feats)?;
    linear(&feats, &w.w_out, &w.b_out)
}
