#![allow(dead_code)]

use fipa_core::geometry::{random_rototranslation, RigidTransform};
use fipa_core::{FactorizedPair, FrameSet, IpaConfig, IpaWeights, Rng, Tensor};

pub struct Case {
    pub w: IpaWeights<f64>,
    pub s: Tensor<f64>,
    pub fp: FactorizedPair<f64>,
    pub frames: FrameSet<f64>,
}

pub fn random_case(cfg: IpaConfig, len: usize, seed: u64) -> Case {
    let mut rng = Rng::new(seed);
    let w = IpaWeights::init(cfg, &mut rng).unwrap();
    let s = Tensor::gaussian(&mut rng, &[len, cfg.d_in]);
    let fp = FactorizedPair::new(
        Tensor::gaussian(&mut rng, &[len, cfg.rank, cfg.d_z]),
        Tensor::gaussian(&mut rng, &[len, cfg.rank, cfg.d_z]),
    )
    .unwrap();
    let frames = FrameSet::new(
        (0..len)
            .map(|_| random_rototranslation(&mut rng, 3.0).unwrap())
            .collect(),
    );
    Case { w, s, fp, frames }
}

/// Closed-form instance shared with an offline NumPy/SciPy implementation
/// of the layer; `GOLDEN_OUTPUT` below was produced by that script.
pub fn golden_case() -> Case {
    let cfg = IpaConfig {
        d_in: 4,
        d_z: 2,
        heads: 2,
        c: 3,
        n_query: 2,
        n_value: 2,
        rank: 2,
        enforce_head_cap: true,
    };
    let mut w = IpaWeights::<f64>::init(cfg, &mut Rng::new(0)).unwrap();
    let fill = |t: &Tensor<f64>, n: usize| {
        Tensor::from_fn(t.shape(), |k| {
            0.5 * (0.7 * k as f64 + 1.1 * n as f64 + 0.3).sin()
        })
    };
    let filled: Vec<Tensor<f64>> = w
        .named_tensors()
        .iter()
        .enumerate()
        .map(|(n, (_, t))| fill(t, n))
        .collect();
    let mut it = filled.into_iter();
    let mut next = || it.next().unwrap();
    w.w_q = next();
    w.b_q = next();
    w.w_k = next();
    w.b_k = next();
    w.w_v = next();
    w.b_v = next();
    w.w_q_pts = next();
    w.b_q_pts = next();
    w.w_k_pts = next();
    w.b_k_pts = next();
    w.w_v_pts = next();
    w.b_v_pts = next();
    w.pair_bias = next();
    let _ = next();
    w.gamma_raw = Tensor::new(&[2], vec![0.2, -0.4]).unwrap();
    w.w_out = next();
    w.b_out = next();

    let len = 4;
    let s = Tensor::from_fn(&[len, 4], |k| {
        (0.9 * (k / 4) as f64 + 0.4 * (k % 4) as f64).cos()
    });
    let (r, dz) = (2, 2);
    let z1 = Tensor::from_fn(&[len, r, dz], |k| {
        let (i, p, d) = (k / (r * dz), (k / dz) % r, k % dz);
        (0.5 * i as f64 + 0.8 * p as f64 + 0.3 * d as f64 + 0.1).sin()
    });
    let z2 = Tensor::from_fn(&[len, r, dz], |k| {
        let (i, p, d) = (k / (r * dz), (k / dz) % r, k % dz);
        (0.6 * i as f64 - 0.2 * p as f64 + 0.7 * d as f64).cos()
    });
    let frames = FrameSet::new(
        (0..len)
            .map(|i| {
                let x = i as f64;
                RigidTransform::from_quaternion(
                    [1.0 + 0.3 * x, 0.2 - 0.1 * x, 0.5 * x.sin(), 0.4],
                    [1.5 * x, -0.7 + 0.2 * x * x, 2.0 * x.cos()],
                )
            })
            .collect(),
    );
    Case {
        w,
        s,
        fp: FactorizedPair::new(z1, z2).unwrap(),
        frames,
    }
}

pub const GOLDEN_OUTPUT: [f64; 16] = [
    -1.063188390292256,
    -0.7554141248836109,
    -0.09235679287090287,
    0.6141373819436818,
    0.3720945061330249,
    -0.28472315967232464,
    -0.8076310745616875,
    -0.950697475501045,
    0.854522051534127,
    -0.39071164094836175,
    -1.4521875436550447,
    -1.8306769535244707,
    0.7628176590602604,
    -0.4461109391479117,
    -1.4452265919991243,
    -1.7646295963447294,
];

pub const GOLDEN_ATTENTION: [f64; 32] = [
    0.5756791569674538,
    0.3755536920826585,
    0.047109371481322784,
    0.001657779468564938,
    0.389520499479953,
    0.4488921386591092,
    0.14970328096046367,
    0.011884080900474091,
    0.0803315266504292,
    0.253710793823084,
    0.4988115250402227,
    0.167146154486264,
    0.003839214575265571,
    0.035538495735268585,
    0.38034703977313067,
    0.5802752499163351,
    0.5724526745225552,
    0.3543189797366913,
    0.06691446902357183,
    0.006313876717181768,
    0.3709592603286259,
    0.4103409453885241,
    0.18100600889757598,
    0.03769378538527418,
    0.11803358731638187,
    0.27679985983988387,
    0.38948215155391985,
    0.21568440128981445,
    0.025376626203895535,
    0.10591983956464532,
    0.36950572983180613,
    0.49919780439965306,
];

fn apply(f: &RigidTransform<f64>, p: [f64; 3]) -> [f64; 3] {
    let r = &f.rotation;
    let t = f.translation;
    [0, 1, 2].map(|a| r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + t[a])
}

fn apply_inverse(f: &RigidTransform<f64>, p: [f64; 3]) -> [f64; 3] {
    let r = &f.rotation;
    let d = [0, 1, 2].map(|a| p[a] - f.translation[a]);
    [0, 1, 2].map(|a| r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2])
}

/// Straight loops over the raw weight arrays, one residue pair at a time.
/// Shares no code with the library beyond the data types.
pub fn oracle_forward(c: &Case) -> (Vec<f64>, Vec<f64>) {
    let cfg = c.w.config;
    let w = &c.w;
    let (len, din, h, cc, nq, nv, r, dz) = (
        c.s.dim(0),
        cfg.d_in,
        cfg.heads,
        cfg.c,
        cfg.n_query,
        cfg.n_value,
        cfg.rank,
        cfg.d_z,
    );
    let s = c.s.data();
    let lin = |wt: &Tensor<f64>, b: &Tensor<f64>, i: usize, o: usize| {
        let out = wt.dim(1);
        let mut acc = b.data()[o];
        for a in 0..din {
            acc += s[i * din + a] * wt.data()[a * out + o];
        }
        acc
    };
    let pt = |wt: &Tensor<f64>, b: &Tensor<f64>, n: usize, i: usize, hh: usize, p: usize| {
        let base = (hh * n + p) * 3;
        [0, 1, 2].map(|x| lin(wt, b, i, base + x))
    };
    let z = |i: usize, j: usize, d: usize| {
        (0..r)
            .map(|p| c.fp.z1.data()[(i * r + p) * dz + d] * c.fp.z2.data()[(j * r + p) * dz + d])
            .sum::<f64>()
    };
    let wl = (1.0f64 / 3.0).sqrt();
    let wc = (2.0 / (9.0 * nq as f64)).sqrt();
    let concat = h * (dz + cc + 4 * nv);
    let mut feats = vec![0.0; len * concat];
    let mut attention = vec![0.0; h * len * len];
    for hh in 0..h {
        let gamma = (1.0 + w.gamma_raw.data()[hh].exp()).ln();
        for i in 0..len {
            let mut logits = vec![0.0; len];
            for (j, lg) in logits.iter_mut().enumerate() {
                let mut qk = 0.0;
                for ch in 0..cc {
                    qk +=
                        lin(&w.w_q, &w.b_q, i, hh * cc + ch) * lin(&w.w_k, &w.b_k, j, hh * cc + ch);
                }
                let mut bias = 0.0;
                for d in 0..dz {
                    bias += w.pair_bias.data()[hh * dz + d] * z(i, j, d);
                }
                let mut dist = 0.0;
                for p in 0..nq {
                    let a = apply(
                        &c.frames.frames[i],
                        pt(&w.w_q_pts, &w.b_q_pts, nq, i, hh, p),
                    );
                    let b = apply(
                        &c.frames.frames[j],
                        pt(&w.w_k_pts, &w.b_k_pts, nq, j, hh, p),
                    );
                    dist += (0..3).map(|x| (a[x] - b[x]).powi(2)).sum::<f64>();
                }
                *lg = wl * (qk / (cc as f64).sqrt() + bias - gamma * wc / 2.0 * dist);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let a: Vec<f64> = e.iter().map(|x| x / total).collect();
            attention[(hh * len + i) * len..(hh * len + i + 1) * len].copy_from_slice(&a);

            let block = &mut feats[i * concat + hh * (dz + cc + 4 * nv)..][..dz + cc + 4 * nv];
            for d in 0..dz {
                block[d] = (0..len).map(|j| a[j] * z(i, j, d)).sum();
            }
            for ch in 0..cc {
                block[dz + ch] = (0..len)
                    .map(|j| a[j] * lin(&w.w_v, &w.b_v, j, hh * cc + ch))
                    .sum();
            }
            for p in 0..nv {
                let mut g = [0.0; 3];
                for (j, &aj) in a.iter().enumerate() {
                    let gj = apply(
                        &c.frames.frames[j],
                        pt(&w.w_v_pts, &w.b_v_pts, nv, j, hh, p),
                    );
                    for x in 0..3 {
                        g[x] += aj * gj[x];
                    }
                }
                let local = apply_inverse(&c.frames.frames[i], g);
                block[dz + cc + 3 * p..dz + cc + 3 * p + 3].copy_from_slice(&local);
                block[dz + cc + 3 * nv + p] = local.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
        }
    }
    let mut out = vec![0.0; len * din];
    for i in 0..len {
        for o in 0..din {
            let mut acc = w.b_out.data()[o];
            for f in 0..concat {
                acc += feats[i * concat + f] * w.w_out.data()[f * din + o];
            }
            out[i * din + o] = acc;
        }
    }
    (out, attention)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
