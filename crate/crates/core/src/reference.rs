//! Invariant point attention with the full `H x L x L` logit tensor.
//!
//! This is the quadratic-memory baseline and the correctness oracle for
//! [`crate::flash`].

use crate::error::{shape_err, Error, Result};
use crate::geometry::FrameSet;
use crate::ipa::{globalize, project_inputs, project_output, IpaWeights, Projections};
use crate::pair::{dense_pair_from_factors, FactorizedPair};
use crate::tensor::Tensor;
use crate::Scalar;

/// Pair representation handed to the reference layer.
#[derive(Debug, Clone, Copy)]
pub enum PairRep<'a, T: Scalar> {
    /// `[L, L, d_z]`
    Dense(&'a Tensor<T>),
    /// Materialized internally before use.
    Factorized(&'a FactorizedPair<T>),
}

impl<'a, T: Scalar> PairRep<'a, T> {
    /// Exactly one of the two forms must be given.
    pub fn from_options(
        dense: Option<&'a Tensor<T>>,
        factors: Option<&'a FactorizedPair<T>>,
    ) -> Result<Self> {
        match (dense, factors) {
            (Some(z), None) => Ok(PairRep::Dense(z)),
            (None, Some(fp)) => Ok(PairRep::Factorized(fp)),
            (Some(_), Some(_)) => Err(Error::Usage(
                "pass either a dense or a factorized pair representation, not both".into(),
            )),
            (None, None) => Err(Error::Usage("a pair representation is required".into())),
        }
    }
}

/// Per-head linear bias `b[h, i, j] = Σ_d w[h, d] · z[i, j, d]`.
pub fn pair_bias_dense<T: Scalar>(z: &Tensor<T>, per_head: &Tensor<T>) -> Result<Tensor<T>> {
    if z.rank() != 3 || z.dim(0) != z.dim(1) || per_head.rank() != 2 || per_head.dim(1) != z.dim(2)
    {
        return Err(shape_err!(
            "pair bias: z {:?} with weights {:?}",
            z.shape(),
            per_head.shape()
        ));
    }
    let (len, dz, heads) = (z.dim(0), z.dim(2), per_head.dim(0));
    let mut out = Tensor::zeros(&[heads, len, len]);
    let o = out.data_mut();
    for h in 0..heads {
        let w = per_head.row(h);
        for (cell, slot) in z
            .data()
            .chunks(dz)
            .zip(&mut o[h * len * len..(h + 1) * len * len])
        {
            *slot = cell.iter().zip(w).fold(T::zero(), |s, (&a, &b)| s + a * b);
        }
    }
    Ok(out)
}

/// Softmax arguments
/// `w_L·(qᵀk/√c + b_ij − γ_h·w_C/2 · Σ_p ‖T_i∘q_p − T_j∘k_p‖²)`, shape
/// `[H, L, L]`. Keys with `frames.mask[j] == false` get the most negative
/// finite value.
pub fn attention_logits<T: Scalar>(
    proj: &Projections<T>,
    frames: &FrameSet<T>,
    bias: &Tensor<T>,
    w: &IpaWeights<T>,
) -> Result<Tensor<T>> {
    let cfg = &w.config;
    let (heads, len, c, nq) = (cfg.heads, proj.q.dim(1), cfg.c, cfg.n_query);
    if frames.len() != len || bias.shape() != [heads, len, len] {
        return Err(shape_err!(
            "logits: {} frames and bias {:?} for L = {len}, H = {heads}",
            frames.len(),
            bias.shape()
        ));
    }
    let gq = globalize(&proj.q_pts, frames);
    let gk = globalize(&proj.k_pts, frames);
    let gamma = w.gamma();
    let inv_sqrt_c = T::of(c as f64).sqrt().recip();
    let half = T::of(0.5);
    let mut logits = Tensor::zeros(&[heads, len, len]);
    let out = logits.data_mut();
    for h in 0..heads {
        let point_weight = gamma[h] * w.w_c * half;
        for i in 0..len {
            let qi = proj.q.lane(&[h, i]);
            let pqi = &gq.data()[(h * len + i) * nq * 3..(h * len + i + 1) * nq * 3];
            for j in 0..len {
                let slot = &mut out[(h * len + i) * len + j];
                if !frames.mask[j] {
                    *slot = T::min_value();
                    continue;
                }
                let kj = proj.k.lane(&[h, j]);
                let qk = qi.iter().zip(kj).fold(T::zero(), |s, (&a, &b)| s + a * b);
                let pkj = &gk.data()[(h * len + j) * nq * 3..(h * len + j + 1) * nq * 3];
                let dist2 = pqi.iter().zip(pkj).fold(T::zero(), |s, (&a, &b)| {
                    let d = a - b;
                    s + d * d
                });
                *slot = w.w_l
                    * (qk * inv_sqrt_c + bias.data()[(h * len + i) * len + j]
                        - point_weight * dist2);
            }
        }
    }
    Ok(logits)
}

/// Layer output together with the attention weights `[H, L, L]`.
#[derive(Debug, Clone)]
pub struct ReferenceOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub attention: Tensor<T>,
}

/// Quadratic IPA forward pass, `s: [L, d_in] -> [L, d_in]`.
pub fn reference_forward<T: Scalar>(
    s: &Tensor<T>,
    pair: PairRep<'_, T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
) -> Result<Tensor<T>> {
    Ok(reference_forward_detailed(s, pair, frames, w)?.output)
}

pub fn reference_forward_detailed<T: Scalar>(
    s: &Tensor<T>,
    pair: PairRep<'_, T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
) -> Result<ReferenceOutput<T>> {
    w.validate()?;
    let cfg = &w.config;
    let proj = project_inputs(s, w)?;
    let len = s.dim(0);
    if frames.len() != len {
        return Err(shape_err!("{} frames for {len} residues", frames.len()));
    }
    let materialized;
    let z = match pair {
        PairRep::Dense(z) => z,
        PairRep::Factorized(fp) => {
            materialized = dense_pair_from_factors(fp);
            &materialized
        }
    };
    if z.shape() != [len, len, cfg.d_z] {
        return Err(shape_err!(
            "pair representation is {:?}, expected [{len}, {len}, {}]",
            z.shape(),
            cfg.d_z
        ));
    }
    let bias = pair_bias_dense(z, &w.pair_bias)?;
    let mut attention = attention_logits(&proj, frames, &bias, w)?;
    drop(bias);
    let any_key = frames.mask.iter().any(|&m| m);
    if len > 0 {
        for row in attention.data_mut().chunks_mut(len) {
            if !any_key {
                row.fill(T::zero());
                continue;
            }
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for (x, &keep) in row.iter_mut().zip(&frames.mask) {
                *x = if keep { (*x - m).exp() } else { T::zero() };
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }

    let (heads, c, nv, dz) = (cfg.heads, cfg.c, cfg.n_value, cfg.d_z);
    let gv = globalize(&proj.v_pts, frames);
    let mut o_scalar = Tensor::zeros(&[heads, len, c]);
    let mut o_points = Tensor::zeros(&[heads, len, nv, 3]);
    let mut o_pair = Tensor::zeros(&[heads, len, dz]);
    {
        let (os, op, oz) = (o_scalar.data_mut(), o_points.data_mut(), o_pair.data_mut());
        let a = attention.data();
        for h in 0..heads {
            for i in 0..len {
                let arow = &a[(h * len + i) * len..(h * len + i + 1) * len];
                let os_i = &mut os[(h * len + i) * c..(h * len + i + 1) * c];
                let op_i = &mut op[(h * len + i) * nv * 3..(h * len + i + 1) * nv * 3];
                let oz_i = &mut oz[(h * len + i) * dz..(h * len + i + 1) * dz];
                for (j, &aij) in arow.iter().enumerate() {
                    for (o, &v) in os_i.iter_mut().zip(proj.v.lane(&[h, j])) {
                        *o += aij * v;
                    }
                    let gvj = &gv.data()[(h * len + j) * nv * 3..(h * len + j + 1) * nv * 3];
                    for (o, &g) in op_i.iter_mut().zip(gvj) {
                        *o += aij * g;
                    }
                    for (o, &zij) in oz_i.iter_mut().zip(z.lane(&[i, j])) {
                        *o += aij * zij;
                    }
                }
                let fi = &frames.frames[i];
                for p in op_i.chunks_mut(3) {
                    let local = fi.apply_inverse([p[0], p[1], p[2]]);
                    p.copy_from_slice(&local);
                }
            }
        }
    }
    let output = project_output(&o_pair, &o_scalar, &o_points, w)?;
    Ok(ReferenceOutput { output, attention })
}
