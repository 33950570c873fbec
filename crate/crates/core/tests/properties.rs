use aahr::autodiff::Mat;
use aahr::encoder::{ggla_weights, GglaParams};
use aahr::metrics::{evaluate, map_at_r, recall_at_k, SimilarityMatrix};
use aahr::momentum::MemoryBank;
use aahr::neighborhood::filter_graph;
use aahr::tensorio::Tensor;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

fn unit(m: Mat) -> Mat {
    let mut m = m;
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| f64::from((x / n) as f32));
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ggla_weights_sum_to_one(
        query in mat(1, 6, -2.0, 2.0),
        codebook in mat(5, 6, -2.0, 2.0),
        transforms in prop::collection::vec(mat(6, 6, -1.0, 1.0), 2..=8),
    ) {
        prop_assume!(query.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(codebook.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let half = transforms.len() / 2;
        let g = GglaParams { queries: transforms[..half].to_vec(), codebooks: transforms[half..2 * half].to_vec() };
        let q: Array1<f64> = query.row(0).to_owned();
        let w = ggla_weights(&q, &codebook, &g).unwrap();
        prop_assert!((w.sum() - 1.0).abs() < 1e-6);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn bank_keeps_the_latest_rows(
        (capacity, batch) in prop::sample::select(vec![4usize, 8, 64])
            .prop_flat_map(|n| (Just(n), prop::sample::select((1..=n).filter(|b| n % b == 0).collect::<Vec<_>>()))),
        pushes in 1usize..20,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let mut bank = MemoryBank::new(capacity, d).unwrap();
        let mut history: Vec<Vec<f64>> = Vec::new();
        for _ in 0..pushes {
            let rows = unit(Mat::from_shape_fn((batch, d), |_| rng.random_range(0.1..1.0)));
            bank.push(&rows).unwrap();
            history.extend(rows.rows().into_iter().map(|r| r.to_vec()));
        }
        let expected = &history[history.len().saturating_sub(capacity)..];
        let got = bank.in_insertion_order();
        prop_assert_eq!(got.nrows(), expected.len());
        for (i, row) in expected.iter().enumerate() {
            prop_assert_eq!(got.row(i).to_vec(), row.clone());
        }
        prop_assert_eq!(bank.write_index(), (pushes * batch) % capacity);
    }

    #[test]
    fn recall_is_monotone_in_k(
        sims in prop::collection::vec(-1.0f32..1.0, 60),
        pos in prop::collection::vec(0usize..12, 5),
    ) {
        let sims = Array2::from_shape_vec((5, 12), sims).unwrap();
        let sm = SimilarityMatrix::new(sims, pos.iter().map(|&p| vec![p]).collect()).unwrap();
        let mut last = 0.0;
        for k in 1..=12 {
            let r = recall_at_k(&sm, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 100.0);
        let map = map_at_r(&sm);
        prop_assert!((0.0..=100.0).contains(&map));
    }

    #[test]
    fn evaluation_ignores_query_order(
        imgs in mat(6, 4, -1.0, 1.0),
        txts in mat(6, 4, -1.0, 1.0),
        shift in 1usize..6,
    ) {
        let positives: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let a = evaluate(&imgs, &txts, &positives).unwrap();
        let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
        let imgs_p = Mat::from_shape_fn((6, 4), |(i, j)| imgs[(perm[i], j)]);
        let txts_p = Mat::from_shape_fn((6, 4), |(i, j)| txts[(perm[i], j)]);
        let b = evaluate(&imgs_p, &txts_p, &positives).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tensor_bytes_round_trip(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
        let n = values.len();
        let t = Tensor::new(vec![1, n], values).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn filter_keeps_at_least_half_of_each_block(s in (1usize..6).prop_flat_map(|m| mat(2 * m, 2 * m, 0.0, 1.0))) {
        let m = s.nrows() / 2;
        let kept = filter_graph(&s, 1.5).unwrap().kept();
        for (bi, bj) in [(0, 0), (0, m), (m, 0), (m, m)] {
            let n = kept.slice(ndarray::s![bi..bi + m, bj..bj + m]).iter().filter(|&&k| k).count();
            prop_assert!(n >= (m * m).div_ceil(2));
        }
    }
}
