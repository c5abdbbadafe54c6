mod common;

use common::{
    golden_case, max_abs_diff, oracle_forward, random_case, GOLDEN_ATTENTION, GOLDEN_OUTPUT,
};
use fipa_core::flash::lift;
use fipa_core::ipa::project_inputs;
use fipa_core::pair::{bias_factors, build_factors, dense_pair_from_factors, FactorWeights};
use fipa_core::reference::{attention_logits, pair_bias_dense, reference_forward_detailed};
use fipa_core::{flash_ipa_forward, FactorizedPair, IpaConfig, PairRep, Rng, Tensor, TileSpec};

#[test]
fn golden_instance_reference() {
    let c = golden_case();
    let out =
        reference_forward_detailed(&c.s, PairRep::Factorized(&c.fp), &c.frames, &c.w).unwrap();
    assert!(max_abs_diff(out.output.data(), &GOLDEN_OUTPUT) < 1e-12);
    assert!(max_abs_diff(out.attention.data(), &GOLDEN_ATTENTION) < 1e-12);
}

#[test]
fn golden_instance_flash() {
    let c = golden_case();
    for tile in [1, 2, 3, 64] {
        let out = flash_ipa_forward(
            &c.s,
            &c.fp,
            &c.frames,
            &c.w,
            TileSpec::square(tile).unwrap(),
        )
        .unwrap();
        assert!(
            max_abs_diff(out.data(), &GOLDEN_OUTPUT) < 1e-12,
            "tile {tile}"
        );
    }
}

#[test]
fn golden_instance_loop_oracle() {
    let (out, att) = oracle_forward(&golden_case());
    assert!(max_abs_diff(&out, &GOLDEN_OUTPUT) < 1e-12);
    assert!(max_abs_diff(&att, &GOLDEN_ATTENTION) < 1e-12);
}

#[test]
fn reference_matches_loop_oracle_on_random_instances() {
    let configs = [
        IpaConfig {
            d_in: 6,
            d_z: 3,
            heads: 1,
            c: 2,
            n_query: 1,
            n_value: 1,
            rank: 1,
            enforce_head_cap: true,
        },
        IpaConfig {
            d_in: 5,
            d_z: 2,
            heads: 3,
            c: 4,
            n_query: 4,
            n_value: 2,
            rank: 2,
            enforce_head_cap: true,
        },
    ];
    for (n, cfg) in configs.into_iter().enumerate() {
        for len in [1, 2, 7, 13] {
            let c = random_case(cfg, len, 100 + n as u64 * 10 + len as u64);
            let got = reference_forward_detailed(&c.s, PairRep::Factorized(&c.fp), &c.frames, &c.w)
                .unwrap();
            let (out, att) = oracle_forward(&c);
            assert!(
                max_abs_diff(got.output.data(), &out) < 1e-11,
                "cfg {n} L {len}"
            );
            assert!(
                max_abs_diff(got.attention.data(), &att) < 1e-12,
                "cfg {n} L {len}"
            );
        }
    }
}

#[test]
fn dense_and_factorized_pair_inputs_agree() {
    let cfg = IpaConfig {
        d_in: 6,
        d_z: 3,
        heads: 2,
        c: 2,
        n_query: 2,
        n_value: 2,
        rank: 2,
        enforce_head_cap: true,
    };
    let c = random_case(cfg, 9, 7);
    let dense = dense_pair_from_factors(&c.fp);
    let a = reference_forward_detailed(&c.s, PairRep::Dense(&dense), &c.frames, &c.w).unwrap();
    let b = reference_forward_detailed(&c.s, PairRep::Factorized(&c.fp), &c.frames, &c.w).unwrap();
    assert_eq!(a.output, b.output);
}

#[test]
fn lifted_inner_product_reproduces_logits() {
    let cfg = IpaConfig {
        d_in: 7,
        d_z: 3,
        heads: 2,
        c: 4,
        n_query: 3,
        n_value: 2,
        rank: 2,
        enforce_head_cap: true,
    };
    let c = random_case(cfg, 11, 21);
    let proj = project_inputs(&c.s, &c.w).unwrap();
    let bias = pair_bias_dense(&dense_pair_from_factors(&c.fp), &c.w.pair_bias).unwrap();
    let logits = attention_logits(&proj, &c.frames, &bias, &c.w).unwrap();
    let lifted = lift(&proj, &c.fp, &c.frames, &c.w).unwrap();
    assert_eq!(
        lifted.q.last_dim(),
        cfg.c + 5 * cfg.n_query + cfg.rank * cfg.d_z
    );
    let len = 11;
    for h in 0..cfg.heads {
        for i in 0..len {
            for j in 0..len {
                let dot: f64 = lifted
                    .q
                    .lane(&[h, i])
                    .iter()
                    .zip(lifted.k.lane(&[h, j]))
                    .map(|(a, b)| a * b)
                    .sum();
                let want = logits.at(&[h, i, j]);
                assert!(
                    (dot - want).abs() < 1e-11 * (1.0 + want.abs()),
                    "h {h} i {i} j {j}: {dot} vs {want}"
                );
            }
        }
    }
}

#[test]
fn bias_factor_identity_exhaustive() {
    for rank in [1, 2] {
        let mut rng = Rng::new(rank as u64);
        let (len, heads, dz) = (32, 3, 5);
        let fp = FactorizedPair::new(
            Tensor::<f64>::gaussian(&mut rng, &[len, rank, dz]),
            Tensor::gaussian(&mut rng, &[len, rank, dz]),
        )
        .unwrap();
        let per_head = Tensor::gaussian(&mut rng, &[heads, dz]);
        let (b1, b2) = bias_factors(&fp, &per_head).unwrap();
        let dense = pair_bias_dense(&dense_pair_from_factors(&fp), &per_head).unwrap();
        for h in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    let ip: f64 = b1
                        .lane(&[i, h])
                        .iter()
                        .zip(b2.lane(&[j, h]))
                        .map(|(a, b)| a * b)
                        .sum();
                    assert!((ip - dense.at(&[h, i, j])).abs() < 1e-12);
                }
            }
        }
    }
}

/// With one-hot residue features and `r = L`, indicator weights reproduce any
/// separable pair map `z[i, j, d] = g_d(i) · h_d(j)`.
#[test]
fn full_rank_factors_represent_separable_pairs() {
    let (len, dz) = (4, 3);
    let g = |i: usize, d: usize| (1.0 + i as f64) * (0.5 - d as f64);
    let hf = |j: usize, d: usize| (0.3 * j as f64 + 0.2 * d as f64).cos();
    let features = Tensor::<f64>::identity(len);
    let rank = len;
    let w1 = Tensor::from_fn(&[len, rank * dz], |k| {
        let (row, rho, d) = (k / (rank * dz), (k / dz) % rank, k % dz);
        if rho == row {
            g(row, d)
        } else {
            0.0
        }
    });
    let w2 = Tensor::from_fn(&[len, rank * dz], |k| {
        let (row, d) = (k / (rank * dz), k % dz);
        hf(row, d)
    });
    let weights = FactorWeights {
        w1,
        b1: Tensor::zeros(&[rank * dz]),
        w2,
        b2: Tensor::zeros(&[rank * dz]),
    };
    let fp = build_factors(&features, rank, dz, &weights).unwrap();
    let z = dense_pair_from_factors(&fp);
    for i in 0..len {
        for j in 0..len {
            for d in 0..dz {
                assert!((z.at(&[i, j, d]) - g(i, d) * hf(j, d)).abs() < 1e-15);
            }
        }
    }
}
