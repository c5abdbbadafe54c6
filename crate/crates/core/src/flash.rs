//! Linear-memory IPA: the whole logit is rewritten as one inner product of
//! lifted queries and keys, and attention runs through the tiled kernel.
//!
//! Expanding the point term with `‖a − b‖² = ‖a‖² − 2a·b + ‖b‖²`, with
//! `g = γ_h·w_L·w_C`:
//!
//! ```text
//! q̂_i = [ q_i | T_i∘q_ip | ‖T_i∘q_ip‖² | 1        | b1_i ]
//! k̂_j = [ w_L/√c·k_j | g·T_j∘k_jp | −g/2 | −g/2·‖T_j∘k_jp‖² | b2_j ]
//! ```
//!
//! so `⟨q̂_i, k̂_j⟩` equals the reference logit: the norms of the query meet
//! the constant slot of the key and the constant slot of the query meets the
//! norms of the key. `b1, b2` are the bias factors with `w_L` folded into the
//! per-head weights. Values carry `[ v_j | T_j∘v_jp | z2_j ]`; after
//! attention the point block is mapped back with `T_i⁻¹` and the pair block
//! is contracted with `z1_i` over the rank axis.

use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::geometry::FrameSet;
use crate::ipa::{globalize, project_inputs, project_output, IpaConfig, IpaWeights, Projections};
use crate::kernel::{flash_attention_heads, TileSpec};
use crate::pair::{bias_factors, FactorizedPair};
use crate::tensor::Tensor;
use crate::Scalar;

/// Channel ranges of one lifted query/key row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QkSegments {
    pub scalar: Range<usize>,
    pub points: Range<usize>,
    /// Squared point norms in `q̂`; the `−g/2` constants in `k̂`.
    pub first_aux: Range<usize>,
    /// Ones in `q̂`; scaled squared norms in `k̂`.
    pub second_aux: Range<usize>,
    pub bias: Range<usize>,
}

impl QkSegments {
    pub fn new(cfg: &IpaConfig) -> Self {
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            scalar: next(cfg.c),
            points: next(3 * cfg.n_query),
            first_aux: next(cfg.n_query),
            second_aux: next(cfg.n_query),
            bias: next(cfg.rank * cfg.d_z),
        }
    }

    pub fn width(&self) -> usize {
        self.bias.end
    }

    pub fn sizes(&self) -> [usize; 5] {
        [
            self.scalar.len(),
            self.points.len(),
            self.first_aux.len(),
            self.second_aux.len(),
            self.bias.len(),
        ]
    }
}

/// Channel ranges of one lifted value row (and of the attention output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueSegments {
    pub scalar: Range<usize>,
    pub points: Range<usize>,
    pub pair: Range<usize>,
}

impl ValueSegments {
    pub fn new(cfg: &IpaConfig) -> Self {
        let points = cfg.c..cfg.c + 3 * cfg.n_value;
        let pair = points.end..points.end + cfg.rank * cfg.d_z;
        Self {
            scalar: 0..cfg.c,
            points,
            pair,
        }
    }

    pub fn width(&self) -> usize {
        self.pair.end
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.scalar.len(), self.points.len(), self.pair.len()]
    }
}

/// Lifted per-head operands: `q, k: [H, L, c + 5·N_query + r·d_z]`,
/// `v: [H, L, c + 3·N_value + r·d_z]`.
#[derive(Debug, Clone)]
pub struct LiftedQKV<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub qk_segments: QkSegments,
    pub v_segments: ValueSegments,
}

/// Deliberate lifting errors, used as negative controls for the
/// equivalence harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftMutation {
    /// Writes the key's norm slots where its constant slots belong and vice versa.
    SwapKeyAuxSegments,
}

fn check_lift_inputs<T: Scalar>(
    scalar: &Tensor<T>,
    points: &Tensor<T>,
    frames: &FrameSet<T>,
) -> Result<(usize, usize, usize, usize)> {
    if scalar.rank() != 3 || points.rank() != 4 || points.dim(3) != 3 {
        return Err(shape_err!(
            "lift: scalar {:?} must be [H, L, c] and points {:?} [H, L, N, 3]",
            scalar.shape(),
            points.shape()
        ));
    }
    let (h, len, c) = (scalar.dim(0), scalar.dim(1), scalar.dim(2));
    if points.dim(0) != h || points.dim(1) != len || frames.len() != len {
        return Err(shape_err!(
            "lift: scalar {:?}, points {:?}, {} frames",
            scalar.shape(),
            points.shape(),
            frames.len()
        ));
    }
    Ok((h, len, c, points.dim(2)))
}

fn check_bias<T: Scalar>(b: &Tensor<T>, heads: usize, len: usize) -> Result<usize> {
    if b.rank() != 3 || b.dim(0) != len || b.dim(1) != heads {
        return Err(shape_err!(
            "bias factors {:?} must be [{len}, {heads}, r·d_z]",
            b.shape()
        ));
    }
    Ok(b.dim(2))
}

/// `q̂ = [q | T∘q_p | ‖T∘q_p‖² | 1 | b1]` per head and residue.
pub fn lift_queries<T: Scalar>(
    q: &Tensor<T>,
    q_pts: &Tensor<T>,
    frames: &FrameSet<T>,
    b1: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (heads, len, c, nq) = check_lift_inputs(q, q_pts, frames)?;
    let bw = check_bias(b1, heads, len)?;
    let width = c + 5 * nq + bw;
    let gq = globalize(q_pts, frames);
    let mut out = Vec::with_capacity(heads * len * width);
    for h in 0..heads {
        for i in 0..len {
            out.extend_from_slice(q.lane(&[h, i]));
            let pts = &gq.data()[(h * len + i) * nq * 3..(h * len + i + 1) * nq * 3];
            out.extend_from_slice(pts);
            out.extend(
                pts.chunks(3)
                    .map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]),
            );
            out.extend(std::iter::repeat_n(T::one(), nq));
            out.extend_from_slice(b1.lane(&[i, h]));
        }
    }
    Tensor::new(&[heads, len, width], out)
}

/// `k̂ = [w_L/√c·k | g·T∘k_p | −g/2·1 | −g/2·‖T∘k_p‖² | b2]` with
/// `g = γ_h·w_L·w_C`.
pub fn lift_keys<T: Scalar>(
    k: &Tensor<T>,
    k_pts: &Tensor<T>,
    frames: &FrameSet<T>,
    b2: &Tensor<T>,
    w: &IpaWeights<T>,
) -> Result<Tensor<T>> {
    lift_keys_inner(k, k_pts, frames, b2, w, None)
}

fn lift_keys_inner<T: Scalar>(
    k: &Tensor<T>,
    k_pts: &Tensor<T>,
    frames: &FrameSet<T>,
    b2: &Tensor<T>,
    w: &IpaWeights<T>,
    mutation: Option<LiftMutation>,
) -> Result<Tensor<T>> {
    let (heads, len, c, nq) = check_lift_inputs(k, k_pts, frames)?;
    let bw = check_bias(b2, heads, len)?;
    if w.gamma_raw.len() != heads {
        return Err(shape_err!(
            "{} γ parameters for {heads} heads",
            w.gamma_raw.len()
        ));
    }
    let width = c + 5 * nq + bw;
    let gk = globalize(k_pts, frames);
    let gamma = w.gamma();
    let scalar_scale = w.w_l / T::of(c as f64).sqrt();
    let half = T::of(0.5);
    let swap = mutation == Some(LiftMutation::SwapKeyAuxSegments);
    let mut out = Vec::with_capacity(heads * len * width);
    let mut norms = Vec::with_capacity(nq);
    for (h, &gam) in gamma.iter().enumerate() {
        let g = gam * w.w_l * w.w_c;
        let neg_half_g = -g * half;
        for j in 0..len {
            out.extend(k.lane(&[h, j]).iter().map(|&x| x * scalar_scale));
            let pts = &gk.data()[(h * len + j) * nq * 3..(h * len + j + 1) * nq * 3];
            out.extend(pts.iter().map(|&x| x * g));
            norms.clear();
            norms.extend(
                pts.chunks(3)
                    .map(|p| neg_half_g * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])),
            );
            if swap {
                out.extend_from_slice(&norms);
                out.extend(std::iter::repeat_n(neg_half_g, nq));
            } else {
                out.extend(std::iter::repeat_n(neg_half_g, nq));
                out.extend_from_slice(&norms);
            }
            out.extend_from_slice(b2.lane(&[j, h]));
        }
    }
    Tensor::new(&[heads, len, width], out)
}

/// `v̂ = [v | T∘v_p | z2]` per head and residue.
pub fn lift_values<T: Scalar>(
    v: &Tensor<T>,
    v_pts: &Tensor<T>,
    frames: &FrameSet<T>,
    z2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (heads, len, c, nv) = check_lift_inputs(v, v_pts, frames)?;
    if z2.rank() != 3 || z2.dim(0) != len {
        return Err(shape_err!("z2 {:?} must be [{len}, r, d_z]", z2.shape()));
    }
    let pw = z2.dim(1) * z2.dim(2);
    let width = c + 3 * nv + pw;
    let gv = globalize(v_pts, frames);
    let mut out = Vec::with_capacity(heads * len * width);
    for h in 0..heads {
        for j in 0..len {
            out.extend_from_slice(v.lane(&[h, j]));
            out.extend_from_slice(&gv.data()[(h * len + j) * nv * 3..(h * len + j + 1) * nv * 3]);
            out.extend_from_slice(z2.row(j));
        }
    }
    Tensor::new(&[heads, len, width], out)
}

/// Builds all three lifted operands from the projections.
pub fn lift<T: Scalar>(
    proj: &Projections<T>,
    fp: &FactorizedPair<T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
) -> Result<LiftedQKV<T>> {
    lift_with(proj, fp, frames, w, None)
}

fn lift_with<T: Scalar>(
    proj: &Projections<T>,
    fp: &FactorizedPair<T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
    mutation: Option<LiftMutation>,
) -> Result<LiftedQKV<T>> {
    let cfg = &w.config;
    if fp.rank() != cfg.rank || fp.d_z() != cfg.d_z || fp.len() != proj.q.dim(1) {
        return Err(shape_err!(
            "factors [{}, {}, {}] do not match L = {}, rank = {}, d_z = {}",
            fp.len(),
            fp.rank(),
            fp.d_z(),
            proj.q.dim(1),
            cfg.rank,
            cfg.d_z
        ));
    }
    let (b1, b2) = bias_factors(fp, &w.pair_bias.scale(w.w_l))?;
    let q = lift_queries(&proj.q, &proj.q_pts, frames, &b1)?;
    drop(b1);
    let k = lift_keys_inner(&proj.k, &proj.k_pts, frames, &b2, w, mutation)?;
    drop(b2);
    let v = lift_values(&proj.v, &proj.v_pts, frames, &fp.z2)?;
    let lifted = LiftedQKV {
        q,
        k,
        v,
        qk_segments: QkSegments::new(cfg),
        v_segments: ValueSegments::new(cfg),
    };
    debug_assert_eq!(lifted.q.last_dim(), cfg.qk_dim());
    debug_assert_eq!(lifted.v.last_dim(), cfg.v_dim());
    Ok(lifted)
}

/// Options for [`flash_ipa_forward_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FlashOptions {
    pub tiles: TileSpec,
    #[doc(hidden)]
    pub mutation: Option<LiftMutation>,
}

/// Output of [`flash_ipa_forward_with`].
#[derive(Debug, Clone)]
pub struct FlashOutput<T: Scalar> {
    pub output: Tensor<T>,
    /// Query rows that had no unmasked key; their attention output is zero.
    pub empty_rows: Vec<usize>,
}

/// Linear-memory IPA forward pass, `s: [L, d_in] -> [L, d_in]`.
pub fn flash_ipa_forward<T: Scalar>(
    s: &Tensor<T>,
    fp: &FactorizedPair<T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
    tiles: TileSpec,
) -> Result<Tensor<T>> {
    let opts = FlashOptions {
        tiles,
        mutation: None,
    };
    Ok(flash_ipa_forward_with(s, fp, frames, w, &opts)?.output)
}

pub fn flash_ipa_forward_with<T: Scalar>(
    s: &Tensor<T>,
    fp: &FactorizedPair<T>,
    frames: &FrameSet<T>,
    w: &IpaWeights<T>,
    opts: &FlashOptions,
) -> Result<FlashOutput<T>> {
    w.validate()?;
    let cfg = w.config;
    let len = s.dim(0);
    if frames.len() != len {
        return Err(shape_err!("{} frames for {len} residues", frames.len()));
    }
    let proj = project_inputs(s, w)?;
    let lifted = lift_with(&proj, fp, frames, w, opts.mutation)?;
    drop(proj);
    let mask = (!frames.all_unmasked()).then_some(frames.mask.as_slice());
    let attended = flash_attention_heads(&lifted.q, &lifted.k, &lifted.v, mask, opts.tiles)?;
    let segs = lifted.v_segments.clone();
    drop(lifted);

    let (heads, c, nv, rank, dz) = (cfg.heads, cfg.c, cfg.n_value, cfg.rank, cfg.d_z);
    let width = segs.width();
    let o = attended.output.data();
    let mut o_scalar = Vec::with_capacity(heads * len * c);
    let mut o_points = Vec::with_capacity(heads * len * nv * 3);
    let mut o_pair = Vec::with_capacity(heads * len * dz);
    for h in 0..heads {
        for i in 0..len {
            let row = &o[(h * len + i) * width..(h * len + i + 1) * width];
            o_scalar.extend_from_slice(&row[segs.scalar.clone()]);
            let fi = &frames.frames[i];
            for p in row[segs.points.clone()].chunks(3) {
                o_points.extend_from_slice(&fi.apply_inverse([p[0], p[1], p[2]]));
            }
            // õ_i[d] = Σ_ρ z1[i, ρ, d] · (Σ_j a_ij z2[j, ρ, d])
            let agg = &row[segs.pair.clone()];
            let z1 = fp.z1.row(i);
            for d in 0..dz {
                let mut acc = T::zero();
                for rho in 0..rank {
                    acc += z1[rho * dz + d] * agg[rho * dz + d];
                }
                o_pair.push(acc);
            }
        }
    }
    drop(attended.output);
    let o_scalar = Tensor::new(&[heads, len, c], o_scalar)?;
    let o_points = Tensor::new(&[heads, len, nv, 3], o_points)?;
    let o_pair = Tensor::new(&[heads, len, dz], o_pair)?;
    let output = project_output(&o_pair, &o_scalar, &o_points, w)?;
    Ok(FlashOutput {
        output,
        empty_rows: attended.empty_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rototranslation, RigidTransform};
    use crate::rng::Rng;
    use crate::tensor::split_last;

    fn cfg() -> IpaConfig {
        IpaConfig {
            d_in: 10,
            d_z: 3,
            heads: 2,
            c: 4,
            n_query: 2,
            n_value: 3,
            rank: 2,
            enforce_head_cap: true,
        }
    }

    fn setup(
        len: usize,
        seed: u64,
    ) -> (
        IpaWeights<f64>,
        Tensor<f64>,
        FactorizedPair<f64>,
        FrameSet<f64>,
    ) {
        let c = cfg();
        let mut rng = Rng::new(seed);
        let w = IpaWeights::init(c, &mut rng).unwrap();
        let s = Tensor::gaussian(&mut rng, &[len, c.d_in]);
        let fp = FactorizedPair::new(
            Tensor::gaussian(&mut rng, &[len, c.rank, c.d_z]),
            Tensor::gaussian(&mut rng, &[len, c.rank, c.d_z]),
        )
        .unwrap();
        let frames = FrameSet::new(
            (0..len)
                .map(|_| random_rototranslation(&mut rng, 3.0).unwrap())
                .collect(),
        );
        (w, s, fp, frames)
    }

    #[test]
    fn segment_widths_match_config() {
        let c = cfg();
        let q = QkSegments::new(&c);
        assert_eq!(q.width(), c.c + 5 * c.n_query + c.rank * c.d_z);
        assert_eq!(
            ValueSegments::new(&c).width(),
            c.c + 3 * c.n_value + c.rank * c.d_z
        );
    }

    #[test]
    fn zero_points_give_unit_ones_segment() {
        let c = cfg();
        let (w, s, fp, frames) = setup(4, 1);
        let mut proj = project_inputs(&s, &w).unwrap();
        proj.q_pts = Tensor::zeros(proj.q_pts.shape());
        let (b1, _) = bias_factors(&fp, &w.pair_bias).unwrap();
        let q = lift_queries(&proj.q, &proj.q_pts, &frames, &b1).unwrap();
        let segs = QkSegments::new(&c);
        assert_eq!(q.last_dim(), segs.width());
        // with identity frames the point and norm segments vanish
        let ident = FrameSet::identity(4);
        let q = lift_queries(&proj.q, &proj.q_pts, &ident, &b1).unwrap();
        let parts = split_last(&q, &segs.sizes()).unwrap();
        assert!(parts[1].data().iter().all(|&x| x == 0.0));
        assert!(parts[2].data().iter().all(|&x| x == 0.0));
        assert!(parts[3].data().iter().all(|&x| x == 1.0));
        assert_eq!(parts[0], proj.q);
    }

    #[test]
    fn identity_frames_keep_local_points() {
        let (w, s, fp, _) = setup(3, 2);
        let proj = project_inputs(&s, &w).unwrap();
        let (b1, _) = bias_factors(&fp, &w.pair_bias).unwrap();
        let q = lift_queries(&proj.q, &proj.q_pts, &FrameSet::identity(3), &b1).unwrap();
        let segs = QkSegments::new(&cfg());
        let parts = split_last(&q, &segs.sizes()).unwrap();
        assert_eq!(parts[1].data(), proj.q_pts.data());
        let v = lift_values(&proj.v, &proj.v_pts, &FrameSet::identity(3), &fp.z2).unwrap();
        let vparts = split_last(&v, &ValueSegments::new(&cfg()).sizes()).unwrap();
        assert_eq!(vparts[1].data(), proj.v_pts.data());
        assert_eq!(vparts[0], proj.v);
    }

    #[test]
    fn zero_gamma_leaves_scalar_and_bias() {
        let c = cfg();
        let (mut w, s, fp, frames) = setup(4, 3);
        w.gamma_raw = Tensor::full(&[c.heads], -1e3);
        let proj = project_inputs(&s, &w).unwrap();
        let (_, b2) = bias_factors(&fp, &w.pair_bias).unwrap();
        let k = lift_keys(&proj.k, &proj.k_pts, &frames, &b2, &w).unwrap();
        let parts = split_last(&k, &QkSegments::new(&c).sizes()).unwrap();
        for p in &parts[1..4] {
            assert!(p.data().iter().all(|&x| x == 0.0 || x.abs() < 1e-300));
        }
        assert!(parts[0].max_abs() > 0.0 && parts[4].max_abs() > 0.0);
    }

    #[test]
    fn shape_errors() {
        let (w, s, fp, frames) = setup(3, 4);
        let proj = project_inputs(&s, &w).unwrap();
        let (b1, _) = bias_factors(&fp, &w.pair_bias).unwrap();
        assert!(lift_queries(&proj.q, &proj.q_pts, &FrameSet::identity(2), &b1).is_err());
        assert!(lift_queries(&proj.q, &proj.q, &frames, &b1).is_err());
        let wrong =
            FactorizedPair::new(Tensor::zeros(&[3, 1, 3]), Tensor::zeros(&[3, 1, 3])).unwrap();
        assert!(flash_ipa_forward(&s, &wrong, &frames, &w, TileSpec::default()).is_err());
    }

    #[test]
    fn fully_masked_flags_rows() {
        let (w, s, fp, frames) = setup(3, 5);
        let masked = FrameSet::with_mask(frames.frames.clone(), vec![false; 3]).unwrap();
        let out = flash_ipa_forward_with(&s, &fp, &masked, &w, &FlashOptions::default()).unwrap();
        assert_eq!(out.empty_rows, vec![0, 1, 2]);
        assert!(out.output.all_finite());
    }

    #[test]
    fn identity_motion_is_exact() {
        let (w, s, fp, frames) = setup(5, 6);
        let a = flash_ipa_forward(&s, &fp, &frames, &w, TileSpec::default()).unwrap();
        let b = flash_ipa_forward(
            &s,
            &fp,
            &frames.transformed(&RigidTransform::identity()),
            &w,
            TileSpec::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
