use fipa_core::geometry::random_rototranslation;
use fipa_core::pair::{knn_distogram, nearest_neighbors, neighbor_features, positional_encoding};
use fipa_core::{DistogramSpec, Error, Rng, Tensor};

fn cloud(rng: &mut Rng, len: usize, scale: f64) -> Tensor<f64> {
    Tensor::gaussian_scaled(rng, &[len, 3], scale)
}

#[test]
fn positional_encoding_separates_offsets() {
    let offsets: Vec<i64> = (-512..=512).collect();
    let dim = 16;
    let pe = positional_encoding::<f64>(&offsets, dim).unwrap();
    let mut closest = f64::INFINITY;
    for a in 0..offsets.len() {
        for b in a + 1..offsets.len() {
            let d2: f64 = pe
                .row(a)
                .iter()
                .zip(pe.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            closest = closest.min(d2.sqrt());
        }
    }
    assert!(closest > 1e-3, "two offsets encode within {closest}");
}

#[test]
fn positional_encoding_channels() {
    let pe = positional_encoding::<f64>(&[0, 3, -3], 4).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe.at(&[1, 0]) - 3f64.sin()).abs() < 1e-15);
    assert!((pe.at(&[1, 3]) - (3.0 * 0.01f64).cos()).abs() < 1e-15);
    assert!((pe.at(&[2, 2]) + (3.0 * 0.01f64).sin()).abs() < 1e-15);
    assert!(matches!(
        positional_encoding::<f64>(&[1], 5),
        Err(Error::Config(_))
    ));
}

#[test]
fn distogram_is_invariant_under_rigid_motion() {
    let mut rng = Rng::new(1);
    let spec = DistogramSpec {
        k: 6,
        d_min: 0.5,
        d_max: 6.0,
        n_bins: 12,
        ..Default::default()
    };
    for _ in 0..50 {
        let x = cloud(&mut rng, 24, 3.0);
        let g = random_rototranslation::<f64>(&mut rng, 10.0).unwrap();
        let moved = Tensor::new(
            &[24, 3],
            (0..24)
                .flat_map(|i| g.apply([x.row(i)[0], x.row(i)[1], x.row(i)[2]]))
                .collect(),
        )
        .unwrap();
        let a = knn_distogram(&x, &spec).unwrap();
        let b = knn_distogram(&moved, &spec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }
}

#[test]
fn neighbors_break_ties_by_index() {
    // Points on a line at unit spacing: the middle point has two neighbors at
    // each distance.
    let x = Tensor::from_fn(&[5, 3], |k| if k % 3 == 0 { (k / 3) as f64 } else { 0.0 });
    let n = nearest_neighbors(&x, 4).unwrap();
    assert_eq!(n[2], vec![1, 3, 0, 4]);
    assert_eq!(n[0], vec![1, 2, 3, 4]);
}

#[test]
fn neighbors_match_brute_force_sort() {
    let mut rng = Rng::new(2);
    let x = cloud(&mut rng, 40, 2.0);
    let n = nearest_neighbors(&x, 7).unwrap();
    for i in 0..40 {
        let mut all: Vec<(f64, usize)> = (0..40)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = (0..3).map(|c| (x.row(i)[c] - x.row(j)[c]).powi(2)).sum();
                (d, j)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all[..7].iter().map(|p| p.1).collect();
        assert_eq!(n[i], want);
    }
}

#[test]
fn distances_outside_the_range_clip_to_end_bins() {
    let spec = DistogramSpec {
        k: 1,
        n_bins: 4,
        d_min: 2.0,
        d_max: 6.0,
        pe_dim: 2,
    };
    let x = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
    let d = knn_distogram(&x, &spec).unwrap();
    assert_eq!(&d.lane(&[0, 0])[..4], &[1.0, 0.0, 0.0, 0.0]);
    let far = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 100.0, 0.0, 0.0]).unwrap();
    let d = knn_distogram(&far, &spec).unwrap();
    assert_eq!(&d.lane(&[1, 0])[..4], &[0.0, 0.0, 0.0, 1.0]);
    let mid = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 3.5, 0.0, 0.0]).unwrap();
    let d = knn_distogram(&mid, &spec).unwrap();
    assert_eq!(&d.lane(&[0, 0])[..4], &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn each_neighbor_slot_is_one_hot_plus_offset_encoding() {
    let mut rng = Rng::new(3);
    let spec = DistogramSpec {
        k: 5,
        ..Default::default()
    };
    let x = cloud(&mut rng, 12, 8.0);
    let d = knn_distogram(&x, &spec).unwrap();
    let n = nearest_neighbors(&x, 5).unwrap();
    assert_eq!(d.shape(), &[12, 5, spec.n_bins + spec.pe_dim]);
    for i in 0..12 {
        for slot in 0..5 {
            let row = d.lane(&[i, slot]);
            assert_eq!(row[..spec.n_bins].iter().sum::<f64>(), 1.0);
            let off = n[i][slot] as i64 - i as i64;
            let pe = positional_encoding::<f64>(&[off], spec.pe_dim).unwrap();
            assert_eq!(&row[spec.n_bins..], pe.data());
        }
    }
}

#[test]
fn too_many_neighbors_is_a_config_error() {
    let x = Tensor::<f64>::zeros(&[4, 3]);
    let spec = DistogramSpec {
        k: 4,
        ..Default::default()
    };
    assert!(matches!(knn_distogram(&x, &spec), Err(Error::Config(_))));
}

#[test]
fn short_chains_zero_pad_missing_neighbors() {
    let mut rng = Rng::new(4);
    let spec = DistogramSpec {
        k: 20,
        ..Default::default()
    };
    let x = cloud(&mut rng, 6, 5.0);
    let f = neighbor_features(&x, &spec).unwrap();
    assert_eq!(f.shape(), &[6, spec.feature_width()]);
    let used = 5 * spec.channels();
    let d = knn_distogram(&x, &DistogramSpec { k: 5, ..spec }).unwrap();
    for i in 0..6 {
        assert_eq!(&f.row(i)[..used], &d.data()[i * used..(i + 1) * used]);
        assert!(f.row(i)[used..].iter().all(|&v| v == 0.0));
    }
    let single = neighbor_features(&cloud(&mut rng, 1, 1.0), &spec).unwrap();
    assert!(single.data().iter().all(|&v| v == 0.0));
}
