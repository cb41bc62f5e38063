use kmc_core::costs::{batch_self_inner, scalar_cost, svd_cost, vector_matrix_cost, RegularizationPolicy};
use kmc_core::gaussian::{build_gram_bundle, gauss_gram, ConstantMode, SampleBatch};
use kmc_core::mdn::MdnModel;
use kmc_core::patchnet::{stack_patches, BnMode, ImageSet, PatchNet, PatchNetConfig};
use kmc_core::spectral::{nuclear_bound_check, DiscreteDensityPair};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(max_rows: usize, dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_rows).prop_flat_map(move |n| {
        prop::collection::vec(-2.0f64..2.0, n * dim).prop_map(move |v| DMatrix::from_row_slice(n, dim, &v))
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auto_gram_is_symmetric_with_unit_diagonal(x in points(12, 2), v in 0.005f64..1.0) {
        let g = gauss_gram(&x, &x, v, ConstantMode::ExpOnly).unwrap();
        prop_assert_eq!(&g, &g.transpose());
        for i in 0..g.nrows() {
            prop_assert_eq!(g[(i, i)], 1.0);
        }
        prop_assert!(g.iter().all(|e| (0.0..=1.0).contains(e)));
    }

    #[test]
    fn auto_grams_are_positive_semidefinite(x in points(10, 3), y in points(10, 3), v in 0.01f64..0.5) {
        let b = build_gram_bundle(
            &SampleBatch::new(x, v).unwrap(),
            &SampleBatch::new(y, v).unwrap(),
            ConstantMode::FullPdf,
        ).unwrap();
        for g in [&b.auto_rows, &b.auto_cols] {
            let e = nalgebra::SymmetricEigen::new(g.clone());
            prop_assert!(e.eigenvalues.min() > -1e-10 * g.amax());
        }
    }

    #[test]
    fn scalar_and_vector_costs_stay_below_data_self_inner(
        x in points(10, 2), y in points(10, 2), v in 0.01f64..0.5,
    ) {
        let data = SampleBatch::new(x, v).unwrap();
        let model = SampleBatch::new(y, v).unwrap();
        let pp = batch_self_inner(&data);
        prop_assert!(scalar_cost(&data, &model).unwrap().value <= pp + 1e-9);
        let vc = vector_matrix_cost(&data, &model, &RegularizationPolicy::default()).unwrap().value;
        prop_assert!(vc <= pp + 1e-9);
    }

    #[test]
    fn nuclear_norm_bounded_by_batch_size(
        (x, y) in (1usize..12).prop_flat_map(|n| (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-2.0f64..2.0, n),
        )),
        v in 0.005f64..1.0,
    ) {
        let n = x.len() as f64;
        let data = SampleBatch::from_points(&x, v).unwrap();
        let model = SampleBatch::from_points(&y, v).unwrap();
        let c = svd_cost(&data, &model, &RegularizationPolicy::default()).unwrap();
        prop_assert!(c.value <= n + 1e-9);
        prop_assert!(c.value >= 0.0);
    }

    #[test]
    fn costs_ignore_model_sample_order(
        (y, perm) in (2usize..8).prop_flat_map(|k| (
            prop::collection::vec(-1.0f64..1.0, k), permutation(k),
        )),
        x in prop::collection::vec(-1.0f64..1.0, 2..8),
    ) {
        let data = SampleBatch::from_points(&x, 0.05).unwrap();
        let model = SampleBatch::from_points(&y, 0.05).unwrap();
        let shuffled: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let model_p = SampleBatch::from_points(&shuffled, 0.05).unwrap();
        let reg = RegularizationPolicy::default();
        let a = svd_cost(&data, &model, &reg).unwrap();
        let b = svd_cost(&data, &model_p, &reg).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.max(1.0));
        // The gradient row of each sample moves with the sample.
        for (r, &i) in perm.iter().enumerate() {
            let d = (b.grad_centers[(r, 0)] - a.grad_centers[(i, 0)]).abs();
            prop_assert!(d <= 1e-7 * a.grad_centers.amax().max(1.0), "{}", d);
        }
    }

    #[test]
    fn weighted_nuclear_norm_never_exceeds_kernel_diagonal(
        (support, p, q) in (1usize..8).prop_flat_map(|m| (
            prop::collection::vec(-1.0f64..1.0, m),
            prop::collection::vec(0.01f64..1.0, m),
            prop::collection::vec(0.01f64..1.0, m),
        )),
        var in 0.01f64..0.5,
    ) {
        let m = support.len();
        let pair = DiscreteDensityPair::normalized(DMatrix::from_column_slice(m, 1, &support), p, q, var).unwrap();
        let b = nuclear_bound_check(&pair, ConstantMode::ExpOnly).unwrap();
        prop_assert!(b.within_bound);
    }

    #[test]
    fn mdn_forward_is_row_equivariant(
        (noise, perm) in (2usize..10).prop_flat_map(|k| (
            prop::collection::vec(0.0f64..1.0, k * 4), permutation(k),
        )),
        seed in 0u64..1000,
    ) {
        let k = perm.len();
        let model = MdnModel::new(4, &[6, 5], 2, seed).unwrap();
        let x = DMatrix::from_row_slice(k, 4, &noise);
        let xp = DMatrix::from_fn(k, 4, |r, c| x[(perm[r], c)]);
        let y = model.forward(&x).unwrap();
        let yp = model.forward(&xp).unwrap();
        for r in 0..k {
            for c in 0..2 {
                prop_assert_eq!(yp[(r, c)], y[(perm[r], c)]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn eval_mode_scores_do_not_depend_on_batch_company(
        pixels in prop::collection::vec(0.0f64..1.0, 5 * 16),
        seed in 0u64..100,
        split in 1usize..4,
    ) {
        let set = ImageSet::new(4, 4, 1, pixels, vec![0, 1, 2, 0, 1]).unwrap();
        let cfg = PatchNetConfig {
            patch_size: 3,
            layer_widths: vec![3, 2],
            n_classes: 3,
            seed,
            ..PatchNetConfig::default()
        };
        let net = PatchNet::new(&cfg, 4, 4, 1).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let full = net.forward(&stack_patches(&set, &all, 3).unwrap(), BnMode::Eval).unwrap();
        let head = net.forward(&stack_patches(&set, &all[..split], 3).unwrap(), BnMode::Eval).unwrap();
        let tail = net.forward(&stack_patches(&set, &all[split..], 3).unwrap(), BnMode::Eval).unwrap();
        for i in 0..5 {
            let part = if i < split { head.row(i) } else { tail.row(i - split) };
            prop_assert!((full.row(i) - part).amax() < 1e-12);
        }
    }
}
