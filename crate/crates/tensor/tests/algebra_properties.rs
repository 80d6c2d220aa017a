//! Property checks on the kernel and tape algebra.

use approx::assert_relative_eq;
use proptest::prelude::*;
use voxbc_tensor::kernels::{mm_nn, mm_nt, mm_tn};
use voxbc_tensor::{DenseArray, Tape};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0..3.0f64, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_distributes_over_addition(
        a in mat(3, 4),
        b1 in mat(4, 2),
        b2 in mat(4, 2),
    ) {
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let mut left = vec![0.0; 6];
        mm_nn(&a, &sum, 3, 4, 2, &mut left);
        let mut r1 = vec![0.0; 6];
        let mut r2 = vec![0.0; 6];
        mm_nn(&a, &b1, 3, 4, 2, &mut r1);
        mm_nn(&a, &b2, 3, 4, 2, &mut r2);
        for i in 0..6 {
            assert_relative_eq!(left[i], r1[i] + r2[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn transposed_kernels_match_explicit_transposes(
        a in mat(3, 5),
        b in mat(4, 5),
    ) {
        // a·bᵀ through mm_nt equals the naive product against b transposed.
        let mut via_nt = vec![0.0; 12];
        mm_nt(&a, &b, 3, 5, 4, &mut via_nt);
        let mut bt = vec![0.0; 20];
        for r in 0..4 {
            for c in 0..5 {
                bt[c * 4 + r] = b[r * 5 + c];
            }
        }
        let mut naive = vec![0.0; 12];
        mm_nn(&a, &bt, 3, 5, 4, &mut naive);
        for i in 0..12 {
            assert_relative_eq!(via_nt[i], naive[i], epsilon = 1e-9);
        }

        // aᵀ·b through mm_tn equals the naive product of a transposed.
        let b2 = &a;
        let mut via_tn = vec![0.0; 25];
        mm_tn(&a, b2, 3, 5, 5, &mut via_tn);
        let mut at = vec![0.0; 15];
        for r in 0..3 {
            for c in 0..5 {
                at[c * 3 + r] = a[r * 5 + c];
            }
        }
        let mut naive_tn = vec![0.0; 25];
        mm_nn(&at, b2, 5, 3, 5, &mut naive_tn);
        for i in 0..25 {
            assert_relative_eq!(via_tn[i], naive_tn[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in mat(4, 6)) {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(DenseArray::from_vec(x, &[4, 6]).unwrap());
        let y = t.row_softmax(v, false).unwrap();
        for row in t.data(y).chunks_exact(6) {
            let sum: f64 = row.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
