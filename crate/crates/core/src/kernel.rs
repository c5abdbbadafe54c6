//! Exact softmax attention, materialized and tiled.
//!
//! [`flash_attention`] never forms the `L x L` score matrix: each row block
//! walks the column blocks keeping a running row maximum `m`, a running
//! denominator `l` and an unnormalized accumulator `O`. When a column block
//! raises the maximum from `m'` to `m`, both `l` and `O` are multiplied by
//! `exp(m' − m)` before the block's contribution is added; the block result
//! is `O / l`. Scratch per row block is `B_r·B_c + B_r·d_v + 2·B_r` values.
//!
//! Neither kernel scales the scores; callers fold any temperature into `Q`
//! or `K`.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ipa::MAX_HEAD_DIM;
use crate::ledger;
use crate::tensor::{matmul, Tensor};
use crate::Scalar;

/// Row/column block sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSpec {
    pub block_rows: usize,
    pub block_cols: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            block_rows: 64,
            block_cols: 64,
        }
    }
}

impl TileSpec {
    pub fn new(block_rows: usize, block_cols: usize) -> Result<Self> {
        let t = Self {
            block_rows,
            block_cols,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::Config(format!(
                "tile sizes must be >= 1, got {}x{}",
                self.block_rows, self.block_cols
            )));
        }
        Ok(())
    }
}

/// Attention output plus the query rows that had no unmasked key.
/// Those rows are zero.
#[derive(Debug, Clone)]
pub struct Attended<T: Scalar> {
    pub output: Tensor<T>,
    pub empty_rows: Vec<usize>,
}

fn check_shapes<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
    rank: usize,
) -> Result<()> {
    if q.rank() != rank || k.rank() != rank || v.rank() != rank {
        return Err(shape_err!(
            "attention inputs must be rank {rank}: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let lead = &q.shape()[..rank - 1];
    if k.shape() != q.shape() || &v.shape()[..rank - 1] != lead {
        return Err(shape_err!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if let Some(m) = mask {
        if m.len() != q.dim(rank - 2) {
            return Err(shape_err!(
                "mask has {} entries for {} keys",
                m.len(),
                q.dim(rank - 2)
            ));
        }
    }
    Ok(())
}

static HEAD_DIM_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_head_dim(d: usize, dv: usize) {
    if d.max(dv) > MAX_HEAD_DIM && !HEAD_DIM_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!(
            "attention head dimension {} exceeds {MAX_HEAD_DIM}; fine on CPU but not portable to capped fused kernels",
            d.max(dv)
        );
    }
}

/// `softmax(Q Kᵀ + mask) V` with the full score matrix materialized.
/// `q, k: [L, d]`, `v: [L, d_v]`; `mask[j] == false` removes key `j`.
pub fn naive_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Attended<T>> {
    check_shapes(q, k, v, mask, 2)?;
    let (len, d) = (q.dim(0), q.dim(1));
    let kt = Tensor::from_fn(&[d, len], |idx| k.data()[(idx % len) * d + idx / len]);
    let mut probs = matmul(q, &kt)?;
    drop(kt);
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut empty_rows = Vec::new();
    if len > 0 {
        for (i, row) in probs.data_mut().chunks_mut(len).enumerate() {
            let m = (0..len)
                .filter(|&j| keep(j))
                .fold(T::neg_infinity(), |m, j| m.max(row[j]));
            if m == T::neg_infinity() {
                row.fill(T::zero());
                empty_rows.push(i);
                continue;
            }
            let mut sum = T::zero();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if keep(j) { (*x - m).exp() } else { T::zero() };
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }
    Ok(Attended {
        output: matmul(&probs, v)?,
        empty_rows,
    })
}

/// Tiled online-softmax attention over `q, k: [L, d]`, `v: [L, d_v]`.
/// Equal to [`naive_attention`] up to rounding, for any tiling.
pub fn flash_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
    tiles: TileSpec,
) -> Result<Attended<T>> {
    check_shapes(q, k, v, mask, 2)?;
    let (len, d, dv) = (q.dim(0), q.dim(1), v.dim(1));
    let q3 = Tensor::new(&[1, len, d], q.data().to_vec())?;
    let k3 = Tensor::new(&[1, len, d], k.data().to_vec())?;
    let v3 = Tensor::new(&[1, len, dv], v.data().to_vec())?;
    let out = flash_attention_heads(&q3, &k3, &v3, mask, tiles)?;
    Ok(Attended {
        output: out.output.reshape(&[len, dv])?,
        empty_rows: out.empty_rows,
    })
}

/// [`flash_attention`] over a leading head axis: `q, k: [H, L, d]`,
/// `v: [H, L, d_v]`. Row blocks of all heads are scheduled on the current
/// rayon pool. `empty_rows` lists row indices (shared by every head).
pub fn flash_attention_heads<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&[bool]>,
    tiles: TileSpec,
) -> Result<Attended<T>> {
    tiles.validate()?;
    check_shapes(q, k, v, mask, 3)?;
    let (heads, len, d, dv) = (q.dim(0), q.dim(1), q.dim(2), v.dim(2));
    warn_head_dim(d, dv);
    let mut output = Tensor::zeros(&[heads, len, dv]);
    if len == 0 {
        return Ok(Attended {
            output,
            empty_rows: Vec::new(),
        });
    }
    let empty: Vec<Vec<usize>> = if dv == 0 {
        // Nothing to accumulate; still report rows with no visible key.
        vec![all_rows_if_fully_masked(len, mask)]
    } else {
        let br = tiles.block_rows.min(len);
        let ledger = ledger::active();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let jobs: Vec<(usize, usize, &mut [T])> = output
            .data_mut()
            .chunks_mut(len * dv)
            .enumerate()
            .flat_map(|(h, head_out)| {
                head_out
                    .chunks_mut(br * dv)
                    .enumerate()
                    .map(move |(blk, out)| (h, blk, out))
            })
            .collect();
        jobs.into_par_iter()
            .map(|(h, blk, out)| {
                ledger::enter(ledger.clone(), || {
                    let rows = blk * br..(blk * br + br).min(len);
                    let block = HeadBlock {
                        q: &qd[h * len * d..(h + 1) * len * d],
                        k: &kd[h * len * d..(h + 1) * len * d],
                        v: &vd[h * len * dv..(h + 1) * len * dv],
                        len,
                        d,
                        dv,
                    };
                    let empty = block.attend_rows(rows.clone(), mask, tiles.block_cols, out);
                    if h == 0 {
                        empty.into_iter().map(|r| r + rows.start).collect()
                    } else {
                        Vec::new()
                    }
                })
            })
            .collect()
    };
    let mut empty_rows: Vec<usize> = empty.into_iter().flatten().collect();
    empty_rows.sort_unstable();
    if !empty_rows.is_empty() {
        log::warn!(
            "{} query rows have no unmasked key; returning zeros for them",
            empty_rows.len()
        );
    }
    Ok(Attended { output, empty_rows })
}

fn all_rows_if_fully_masked(len: usize, mask: Option<&[bool]>) -> Vec<usize> {
    match mask {
        Some(m) if !m.iter().any(|&x| x) => (0..len).collect(),
        _ => Vec::new(),
    }
}

/// One head's `q, k: [L, d]` and `v: [L, dv]`.
struct HeadBlock<'a, T> {
    q: &'a [T],
    k: &'a [T],
    v: &'a [T],
    len: usize,
    d: usize,
    dv: usize,
}

impl<T: Scalar> HeadBlock<'_, T> {
    /// Processes query rows `rows` against every column block, writing the
    /// normalized result into `out` (`rows.len() x dv`). Returns block-local
    /// indices of rows that saw no unmasked key.
    fn attend_rows(
        &self,
        rows: std::ops::Range<usize>,
        mask: Option<&[bool]>,
        block_cols: usize,
        out: &mut [T],
    ) -> Vec<usize> {
        let HeadBlock {
            q,
            k,
            v,
            len,
            d,
            dv,
        } = *self;
        let nr = rows.len();
        let bc = block_cols.min(len);
        // Tracked scratch; nothing here grows with L.
        let mut s_tile = Tensor::<T>::zeros(&[nr, bc]);
        let mut acc = Tensor::<T>::zeros(&[nr, dv]);
        let mut m_run = Tensor::<T>::full(&[nr], T::neg_infinity());
        let mut l_run = Tensor::<T>::zeros(&[nr]);
        let s = s_tile.data_mut();
        let acc = acc.data_mut();
        let m_run = m_run.data_mut();
        let l_run = l_run.data_mut();

        let mut c0 = 0;
        while c0 < len {
            let c1 = (c0 + bc).min(len);
            let w = c1 - c0;
            for (a, qi) in rows.clone().enumerate() {
                let qrow = &q[qi * d..(qi + 1) * d];
                let srow = &mut s[a * bc..a * bc + w];
                for (b, sv) in srow.iter_mut().enumerate() {
                    let j = c0 + b;
                    *sv = if mask.is_none_or(|m| m[j]) {
                        dot(qrow, &k[j * d..(j + 1) * d])
                    } else {
                        T::neg_infinity()
                    };
                }
                let block_max = srow.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let m_new = m_run[a].max(block_max);
                if m_new == T::neg_infinity() {
                    continue;
                }
                // exp(-inf) = 0 clears the empty initial state.
                let correction = (m_run[a] - m_new).exp();
                let arow = &mut acc[a * dv..(a + 1) * dv];
                if correction != T::one() {
                    for x in arow.iter_mut() {
                        *x *= correction;
                    }
                }
                let mut row_sum = T::zero();
                for (b, sv) in srow.iter_mut().enumerate() {
                    let p = (*sv - m_new).exp();
                    *sv = p;
                    row_sum += p;
                    if p != T::zero() {
                        let j = c0 + b;
                        for (x, &vj) in arow.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                            *x += p * vj;
                        }
                    }
                }
                l_run[a] = correction * l_run[a] + row_sum;
                m_run[a] = m_new;
            }
            c0 = c1;
        }

        let mut empty = Vec::new();
        for a in 0..nr {
            let o = &mut out[a * dv..(a + 1) * dv];
            if l_run[a] == T::zero() {
                o.fill(T::zero());
                empty.push(a);
            } else {
                let inv = l_run[a].recip();
                for (x, &y) in o.iter_mut().zip(&acc[a * dv..(a + 1) * dv]) {
                    *x = y * inv;
                }
            }
        }
        empty
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
