//! Factorized pair representation and the k-NN distogram features it is
//! built from.
//!
//! The dense pair tensor is never stored by the linear-memory path: it is
//! represented by two factors `z1, z2: [L, r, d_z]` with
//! `z[i, j, d] = Σ_ρ z1[i, ρ, d] · z2[j, ρ, d]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{linear, Tensor};
use crate::Scalar;

/// Neighbor-distogram settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistogramSpec {
    pub k: usize,
    pub n_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub pe_dim: usize,
}

impl Default for DistogramSpec {
    fn default() -> Self {
        Self {
            k: 20,
            n_bins: 22,
            d_min: 2.0,
            d_max: 22.0,
            pe_dim: 16,
        }
    }
}

impl DistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("distogram k must be >= 1".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("distogram needs at least 2 bins".into()));
        }
        if !(self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "distogram range [{}, {}] is empty",
                self.d_min, self.d_max
            )));
        }
        if !self.pe_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional encoding width must be even, got {}",
                self.pe_dim
            )));
        }
        Ok(())
    }

    /// Width of one neighbor's encoding.
    pub fn channels(&self) -> usize {
        self.n_bins + self.pe_dim
    }

    /// Width of the flattened per-residue feature row.
    pub fn feature_width(&self) -> usize {
        self.k * self.channels()
    }

    fn bin(&self, d: f64) -> usize {
        let width = (self.d_max - self.d_min) / self.n_bins as f64;
        let b = ((d - self.d_min) / width).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.n_bins - 1)
        }
    }
}

/// Sinusoidal encoding of integer offsets: channel `2m` is `sin(x·ω_m)`,
/// channel `2m+1` is `cos(x·ω_m)`, with `ω_m = 10000^(−2m/dim)`.
pub fn positional_encoding<T: Scalar>(offsets: &[i64], dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|m| 10000f64.powf(-((2 * m) as f64) / dim as f64))
        .collect();
    let mut out = Vec::with_capacity(offsets.len() * dim);
    for &x in offsets {
        for &w in &freqs {
            let (s, c) = (x as f64 * w).sin_cos();
            out.push(T::of(s));
            out.push(T::of(c));
        }
    }
    Tensor::new(&[offsets.len(), dim], out)
}

/// Indices of the `k` nearest other points to each point, nearest first,
/// ties broken by lower index.
pub fn nearest_neighbors<T: Scalar>(translations: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    if translations.rank() != 2 || translations.dim(1) != 3 {
        return Err(shape_err!(
            "translations must be [L, 3], got {:?}",
            translations.shape()
        ));
    }
    let len = translations.dim(0);
    if k + 1 > len {
        return Err(Error::Config(format!(
            "k = {k} neighbors requested but only {} other points exist",
            len.saturating_sub(1)
        )));
    }
    let pts = translations.data();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(len);
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let pi = &pts[3 * i..3 * i + 3];
        cand.clear();
        cand.extend((0..len).filter(|&j| j != i).map(|j| {
            let pj = &pts[3 * j..3 * j + 3];
            let d2: f64 = (0..3).map(|c| (pi[c] - pj[c]).as_f64().powi(2)).sum();
            (d2, j)
        }));
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k, order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(order);
        out.push(cand.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// One-hot distance bins of each residue's `k` nearest neighbors, each
/// followed by the positional encoding of the signed offset `j − i`.
/// Output shape `[L, k, n_bins + pe_dim]`.
pub fn knn_distogram<T: Scalar>(
    translations: &Tensor<T>,
    spec: &DistogramSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let neighbors = nearest_neighbors(translations, spec.k)?;
    let len = translations.dim(0);
    let ch = spec.channels();
    let pts = translations.data();
    let mut out = vec![T::zero(); len * spec.k * ch];
    for (i, nbrs) in neighbors.iter().enumerate() {
        let offsets: Vec<i64> = nbrs.iter().map(|&j| j as i64 - i as i64).collect();
        let pe = positional_encoding::<T>(&offsets, spec.pe_dim)?;
        for (slot, &j) in nbrs.iter().enumerate() {
            let d: f64 = (0..3)
                .map(|c| (pts[3 * i + c] - pts[3 * j + c]).as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            let row = &mut out[(i * spec.k + slot) * ch..(i * spec.k + slot + 1) * ch];
            row[spec.bin(d)] = T::one();
            row[spec.n_bins..].copy_from_slice(pe.row(slot));
        }
    }
    Tensor::new(&[len, spec.k, ch], out)
}

/// Flattened neighbor features `[L, k·(n_bins + pe_dim)]`. When fewer than
/// `k` other residues exist the missing neighbor slots stay zero.
pub fn neighbor_features<T: Scalar>(
    translations: &Tensor<T>,
    spec: &DistogramSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let len = translations.dim(0);
    let width = spec.feature_width();
    let k_eff = spec.k.min(len.saturating_sub(1));
    if k_eff == 0 {
        return Ok(Tensor::zeros(&[len, width]));
    }
    let dist = knn_distogram(translations, &DistogramSpec { k: k_eff, ..*spec })?;
    let used = k_eff * spec.channels();
    if used == width {
        return dist.reshape(&[len, width]);
    }
    let mut out = vec![T::zero(); len * width];
    for i in 0..len {
        out[i * width..i * width + used].copy_from_slice(&dist.data()[i * used..(i + 1) * used]);
    }
    Tensor::new(&[len, width], out)
}

/// Two independent affine maps from residue features to the pair factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorWeights<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FactorWeights<T> {
    /// Gaussian weights scaled by `1/√features`, zero biases.
    pub fn init(rng: &mut Rng, features: usize, rank: usize, d_z: usize) -> Self {
        let std = 1.0 / (features.max(1) as f64).sqrt();
        let out = rank * d_z;
        Self {
            w1: Tensor::gaussian_scaled(rng, &[features, out], std),
            b1: Tensor::zeros(&[out]),
            w2: Tensor::gaussian_scaled(rng, &[features, out], std),
            b2: Tensor::zeros(&[out]),
        }
    }
}

/// Pair representation as rank-`r` pseudo-factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPair<T: Scalar> {
    pub z1: Tensor<T>,
    pub z2: Tensor<T>,
}

impl<T: Scalar> FactorizedPair<T> {
    pub fn new(z1: Tensor<T>, z2: Tensor<T>) -> Result<Self> {
        if z1.rank() != 3 || z1.shape() != z2.shape() {
            return Err(shape_err!(
                "factors must both be [L, r, d_z], got {:?} and {:?}",
                z1.shape(),
                z2.shape()
            ));
        }
        Ok(Self { z1, z2 })
    }

    pub fn len(&self) -> usize {
        self.z1.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.z1.dim(1)
    }

    pub fn d_z(&self) -> usize {
        self.z1.dim(2)
    }

    pub fn cast<U: Scalar>(&self) -> FactorizedPair<U> {
        FactorizedPair {
            z1: self.z1.cast(),
            z2: self.z2.cast(),
        }
    }
}

/// Projects residue features `[L, f]` to the two factors `[L, r, d_z]`.
pub fn build_factors<T: Scalar>(
    features: &Tensor<T>,
    rank: usize,
    d_z: usize,
    weights: &FactorWeights<T>,
) -> Result<FactorizedPair<T>> {
    if features.rank() != 2 {
        return Err(shape_err!(
            "features must be [L, f], got {:?}",
            features.shape()
        ));
    }
    if weights.w1.last_dim() != rank * d_z || weights.w2.last_dim() != rank * d_z {
        return Err(shape_err!(
            "factor weights produce {} / {} channels, expected r·d_z = {}",
            weights.w1.last_dim(),
            weights.w2.last_dim(),
            rank * d_z
        ));
    }
    let len = features.dim(0);
    let z1 = linear(features, &weights.w1, &weights.b1)?.reshape(&[len, rank, d_z])?;
    let z2 = linear(features, &weights.w2, &weights.b2)?.reshape(&[len, rank, d_z])?;
    FactorizedPair::new(z1, z2)
}

/// Materializes `z[i, j, d]`. Quadratic in `L`.
pub fn dense_pair_from_factors<T: Scalar>(fp: &FactorizedPair<T>) -> Tensor<T> {
    let (len, rank, dz) = (fp.len(), fp.rank(), fp.d_z());
    let (z1, z2) = (fp.z1.data(), fp.z2.data());
    let mut out = vec![T::zero(); len * len * dz];
    for i in 0..len {
        for j in 0..len {
            let cell = &mut out[(i * len + j) * dz..(i * len + j + 1) * dz];
            for rho in 0..rank {
                let a = &z1[(i * rank + rho) * dz..(i * rank + rho + 1) * dz];
                let b = &z2[(j * rank + rho) * dz..(j * rank + rho + 1) * dz];
                for ((c, &x), &y) in cell.iter_mut().zip(a).zip(b) {
                    *c += x * y;
                }
            }
        }
    }
    Tensor::new(&[len, len, dz], out).expect("shape matches")
}

/// Per-head bias factors `b1, b2: [L, H, r·d_z]` with
/// `⟨b1[i,h], b2[j,h]⟩ = Σ_d w[h,d] · z[i,j,d]`.
///
/// `b1[i,h]` is the flattened `z1[i]` for every head; `b2[j,h]` is `z2[j]`
/// with `w[h]` broadcast over the rank axis.
pub fn bias_factors<T: Scalar>(
    fp: &FactorizedPair<T>,
    per_head_weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (len, rank, dz) = (fp.len(), fp.rank(), fp.d_z());
    if per_head_weights.rank() != 2 || per_head_weights.dim(1) != dz {
        return Err(shape_err!(
            "per-head bias weights must be [H, {dz}], got {:?}",
            per_head_weights.shape()
        ));
    }
    let heads = per_head_weights.dim(0);
    let width = rank * dz;
    let mut b1 = Vec::with_capacity(len * heads * width);
    let mut b2 = Vec::with_capacity(len * heads * width);
    for i in 0..len {
        let z1 = fp.z1.row(i);
        let z2 = fp.z2.row(i);
        for h in 0..heads {
            b1.extend_from_slice(z1);
            let w = per_head_weights.row(h);
            for rho in 0..rank {
                b2.extend(
                    z2[rho * dz..(rho + 1) * dz]
                        .iter()
                        .zip(w)
                        .map(|(&z, &wd)| z * wd),
                );
            }
        }
    }
    Ok((
        Tensor::new(&[len, heads, width], b1)?,
        Tensor::new(&[len, heads, width], b2)?,
    ))
}
