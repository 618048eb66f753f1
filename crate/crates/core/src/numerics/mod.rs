//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Storage is `f32` for models; reductions (softmax normalizers, layer-norm
//! statistics, losses, sums) accumulate in `f64`.

pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::AttnShape;
pub use params::{ParamId, ParamStore};
pub use tape::{argmax, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::detached();
        let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_gradient_of_sum_wrt_lhs() {
        let mut tape = Tape::detached();
        let a = tape.input(t2(&[&[1.0, 2.0]]));
        let b = tape.constant(t2(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);

        let fd = gradcheck::check(&[t2(&[&[1.0, 2.0]])], 1e-4, |t, v| {
            let b = t.constant(t2(&[&[3.0], &[4.0]]));
            let c = t.matmul(v[0], b)?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(fd.max_rel_error < 1e-3, "{fd:?}");
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::detached();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_batch_axes() {
        let mut tape = Tape::detached();
        let a = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 2.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 4.0, 3.0, 8.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::vector(vec![0.0f64, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0f64, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::vector(vec![1.0f64, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &p) in tape.value(y).data().iter().enumerate() {
            assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!((tape.value(y).data()[2] - 0.665_240_955_774_821_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::vector(vec![1.0f64, f64::NAN]));
        assert!(tape.softmax(x, 0).is_err());
        let x = tape.constant(Tensor::vector(vec![1.0f64]));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::detached();
        let g = tape.constant(Tensor::vector(vec![1.0f64, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0f64, 0.0]));
        let x = tape.constant(Tensor::vector(vec![4.0f64, 4.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(Tensor::vector(vec![1.0f64, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::vector(vec![-1.0, 1.0])) < 1e-9);

        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
        assert!(tape.layer_norm(x, g, b, -1.0).is_err());
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..5 * 16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::new(vec![5, 16], data).unwrap());
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::detached();
        let logits = tape.constant(t2(&[&[100.0, 0.0, 0.0], &[0.0, 0.0, 100.0]]));
        let loss = tape.cross_entropy(logits, &[0, 2], 0.0, 99).unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        let v = 7;
        let logits = tape.constant(Tensor::zeros(&[3, v]));
        let loss = tape.cross_entropy(logits, &[1, 4, 0], 0.0, 99).unwrap();
        assert!((tape.value(loss).item() - (v as f64).ln()).abs() < 1e-12);

        let logits = tape.constant(t2(&[&[0.5, -1.0, 2.0, 0.0], &[1.5, 0.25, -0.75, 3.0]]));
        let loss = tape.cross_entropy(logits, &[2, 0], 0.1, 99).unwrap();
        // 30-digit reference evaluation of the smoothed KL, frozen.
        assert!((tape.value(loss).item() - 0.763_130_534_407_742_9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_pad_and_rejects_empty() {
        let mut tape = Tape::detached();
        let logits = tape.input(t2(&[&[0.3, 0.1], &[5.0, -5.0]]));
        let loss = tape.cross_entropy(logits, &[1, 0], 0.0, 0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(&g.get(logits).unwrap()[2..], &[0.0, 0.0]);
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], 0.0, 0),
            Err(crate::Error::EmptyBatch)
        ));
        assert!(tape.cross_entropy(logits, &[1, 0], 1.0, 0).is_err());
    }

    #[test]
    fn straight_through_is_hard_forward_soft_backward() {
        let mut tape = Tape::detached();
        let soft = tape.input(Tensor::vector(vec![0.2f64, 0.5, 0.3]));
        let hard = tape.straight_through(soft);
        assert_eq!(tape.value(hard).data(), &[0.0, 1.0, 0.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.mul(hard, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(soft).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        let mut tape = Tape::inference(&store);
        let w = tape.param(id);
        assert_eq!(tape.param(id), w);
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert!(g.param(id).is_none());
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::full(&[1000], 1.0f64));
        let y1 = tape.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y2 = tape.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
        let vals = tape.value(y1).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let mean = vals.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
        assert_eq!(tape.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), x);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let a: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::detached();
            let x = tape.input(Tensor::new(vec![3, 4], a).unwrap());
            let y = tape.softmax(x, 1).unwrap();
            let z = tape.dropout(y, 0.5, &mut rng).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(run(), run());
    }
}
