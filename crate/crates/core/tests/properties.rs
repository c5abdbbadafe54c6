mod common;

use common::random_case;
use fipa_core::bench::fit_polynomial;
use fipa_core::geometry::random_rototranslation;
use fipa_core::io::{decode_weights, encode_weights, records_from_csv, records_to_csv, Record};
use fipa_core::tensor::softmax_rows;
use fipa_core::{
    flash_attention, flash_ipa_forward, reference_forward, IpaConfig, IpaWeights, PairRep,
    Precision, Rng, Tensor, TileSpec,
};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = IpaConfig> {
    (
        1usize..=3,
        1usize..=2,
        1usize..=4,
        1usize..=3,
        1usize..=4,
        1usize..=3,
        1usize..=6,
    )
        .prop_map(|(heads, rank, n_query, n_value, c, d_z, d_in)| IpaConfig {
            d_in,
            d_z,
            heads,
            c,
            n_query,
            n_value,
            rank,
            enforce_head_cap: true,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flash_equals_reference(cfg in config(), len in 1usize..24, tile in 1usize..32, seed in any::<u64>()) {
        let c = random_case(cfg, len, seed);
        let tiles = TileSpec::square(tile).unwrap();
        let a = flash_ipa_forward(&c.s, &c.fp, &c.frames, &c.w, tiles).unwrap();
        let b = reference_forward(&c.s, PairRep::Factorized(&c.fp), &c.frames, &c.w).unwrap();
        let rel = a.max_abs_diff(&b).unwrap() / b.max_abs().max(1e-300);
        prop_assert!(rel <= 1e-10, "relative deviation {rel:e}");
    }

    #[test]
    fn both_arms_are_invariant(cfg in config(), len in 1usize..16, seed in any::<u64>()) {
        let c = random_case(cfg, len, seed);
        let g = random_rototranslation::<f64>(&mut Rng::new(seed ^ 0x5eed), 3.0).unwrap();
        let moved = c.frames.transformed(&g);
        let tiles = TileSpec::square(5).unwrap();
        let f0 = flash_ipa_forward(&c.s, &c.fp, &c.frames, &c.w, tiles).unwrap();
        let f1 = flash_ipa_forward(&c.s, &c.fp, &moved, &c.w, tiles).unwrap();
        prop_assert!(f0.max_abs_diff(&f1).unwrap() <= 1e-9);
        let r0 = reference_forward(&c.s, PairRep::Factorized(&c.fp), &c.frames, &c.w).unwrap();
        let r1 = reference_forward(&c.s, PairRep::Factorized(&c.fp), &moved, &c.w).unwrap();
        prop_assert!(r0.max_abs_diff(&r1).unwrap() <= 1e-9);
    }

    #[test]
    fn kernel_is_tile_independent(len in 1usize..80, d in 1usize..10, br in 1usize..90, bc in 1usize..90, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = Tensor::<f64>::gaussian(&mut rng, &[len, d]);
        let k = Tensor::<f64>::gaussian(&mut rng, &[len, d]);
        let v = Tensor::<f64>::gaussian(&mut rng, &[len, 3]);
        let a = flash_attention(&q, &k, &v, None, TileSpec::new(br, bc).unwrap()).unwrap();
        let b = flash_attention(&q, &k, &v, None, TileSpec::default()).unwrap();
        prop_assert!(a.output.max_abs_diff(&b.output).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..40, seed in any::<u64>(), scale in 0.01f64..500.0) {
        let x = Tensor::<f64>::gaussian_scaled(&mut Rng::new(seed), &[rows, cols], scale);
        let p = softmax_rows(&x);
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_bit_exactly(cfg in config(), seed in any::<u64>()) {
        let w = IpaWeights::<f64>::init(cfg, &mut Rng::new(seed)).unwrap();
        let back = decode_weights::<f64>(&encode_weights(&w).unwrap()).unwrap();
        let bit_exact = w.named_tensors().iter().zip(back.named_tensors()).all(|((_, a), (_, b))| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        prop_assert!(bit_exact);
        prop_assert_eq!(back, w.clone());
        let w32: IpaWeights<f32> = w.cast();
        prop_assert_eq!(decode_weights::<f32>(&encode_weights(&w32).unwrap()).unwrap(), w32);
    }

    #[test]
    fn fit_recovers_exact_polynomials(a in -1e3f64..1e3, b in -1e5f64..1e5, n in 2usize..9) {
        let pts: Vec<(f64, f64)> = (1..=n).map(|i| {
            let l = 128.0 * (1u64 << (i - 1)) as f64;
            (l, a * l * l + b * l)
        }).collect();
        let fit = fit_polynomial(&pts).unwrap();
        let l_max = pts.last().unwrap().0;
        let scale = (a.abs() * l_max * l_max + b.abs() * l_max).max(1.0);
        prop_assert!((fit.a - a).abs() * l_max * l_max <= 1e-9 * scale);
        prop_assert!((fit.b - b).abs() * l_max <= 1e-9 * scale);
    }

    #[test]
    fn records_round_trip_through_csv(
        rows in proptest::collection::vec((any::<bool>(), 1usize..100_000, any::<u64>(), any::<bool>(), any::<u64>(), 0.0f64..1e4), 0..12)
    ) {
        let records: Vec<Record> = rows.into_iter().map(|(flash, length, seed, f32p, peak_bytes, seconds)| Record {
            arm: if flash { "flash" } else { "reference" }.into(),
            length,
            seed,
            precision: if f32p { Precision::F32 } else { Precision::F64 },
            peak_bytes,
            seconds,
        }).collect();
        let text = records_to_csv(&records).unwrap();
        prop_assert!(text.starts_with("arm,L,seed,precision,peak_bytes,seconds\n"));
        prop_assert_eq!(records_from_csv(&text).unwrap(), records);
    }
}
