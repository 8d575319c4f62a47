use proptest::prelude::*;
use sftn_tensor::{Graph, Tensor, TensorError};

proptest! {
    #[test]
    fn construction_checks_length(shape in prop::collection::vec(0usize..5, 0..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f64>::new(shape.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            let bad = Tensor::<f64>::new(shape.clone(), vec![0.0; n + extra]);
            let is_length_error = matches!(bad, Err(TensorError::DataLength { .. }));
            prop_assert!(is_length_error);
        }
    }

    #[test]
    fn gradient_shape_matches_value(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![rows, cols], data).unwrap().with_requires_grad(true));
        let lp = g.log_softmax(x).unwrap();
        let e = g.exp(lp).unwrap();
        let sq = g.mul(e, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        prop_assert_eq!(grad.len(), rows * cols);
        prop_assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_rows_normalize(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let k = vals.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, k], vals).unwrap());
        let lp = g.log_softmax(x).unwrap();
        let total: f64 = g.data(lp).iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
