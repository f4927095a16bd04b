use std::rc::Rc;

use proptest::prelude::*;

use stmha::tensor::{check_gradients, concat, ModelWeights, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(a in tensor(vec![3, 4]), b in tensor(vec![4, 5])) {
        let tape = Tape::new();
        let got = tape.constant(&a).matmul(tape.constant(&b)).unwrap().data();
        let mut want = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    want[i * 5 + j] += a.data()[i * 4 + k] * b.data()[k * 5 + j];
                }
            }
        }
        prop_assert!(close(&got, &want, 1e-12));
    }

    #[test]
    fn matmul_is_associative(a in tensor(vec![2, 3]), b in tensor(vec![3, 4]), c in tensor(vec![4, 2])) {
        let tape = Tape::new();
        let (a, b, c) = (tape.constant(&a), tape.constant(&b), tape.constant(&c));
        let left = a.matmul(b).unwrap().matmul(c).unwrap().data();
        let right = a.matmul(b.matmul(c).unwrap()).unwrap().data();
        prop_assert!(close(&left, &right, 1e-10));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![3, 5])) {
        let tape = Tape::new();
        let s = tape.constant(&x).softmax(1).unwrap().data();
        for row in s.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_ignores_row_shift(x in tensor(vec![2, 4]), shift in -50.0f64..50.0) {
        let tape = Tape::new();
        let shifted = Tensor::new(vec![2, 4], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = tape.constant(&x).softmax(1).unwrap().data();
        let b = tape.constant(&shifted).softmax(1).unwrap().data();
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn layer_norm_rows_are_standardised(x in tensor(vec![4, 6])) {
        let tape = Tape::new();
        let g = tape.constant(&Tensor::full(vec![6], 1.0));
        let b = tape.constant(&Tensor::zeros(vec![6]));
        let y = tape.constant(&x).layer_norm(g, b).unwrap().data();
        for (row, src) in y.chunks(6).zip(x.data().chunks(6)) {
            let mean = src.iter().sum::<f64>() / 6.0;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            if var > 1e-3 {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
                let m2 = row.iter().map(|v| v * v).sum::<f64>() / 6.0;
                prop_assert!((m2 - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn permute_round_trips(x in tensor(vec![2, 3, 4])) {
        let tape = Tape::new();
        let y = tape.constant(&x).permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(y.shape(), vec![2, 3, 4]);
        prop_assert_eq!(y.data(), x.data().to_vec());
    }

    #[test]
    fn concat_then_slice_recovers_parts(a in tensor(vec![2, 3]), b in tensor(vec![2, 2])) {
        let tape = Tape::new();
        let c = concat(&[tape.constant(&a), tape.constant(&b)], 1).unwrap();
        prop_assert_eq!(c.slice(1, 0, 3).unwrap().data(), a.data().to_vec());
        prop_assert_eq!(c.slice(1, 3, 2).unwrap().data(), b.data().to_vec());
    }

    #[test]
    fn masked_rows_give_zero_attention_weight(x in tensor(vec![2, 4])) {
        let keep: Rc<[bool]> = vec![true, false, true, false, false, false, false, true].into();
        let tape = Tape::new();
        let s = tape.constant(&x).masked_fill(keep.clone()).unwrap().softmax(1).unwrap().data();
        for (p, k) in s.iter().zip(keep.iter()) {
            if !k {
                prop_assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn composite_gradient_matches_differences(x in tensor(vec![2, 3]), w in tensor(vec![3, 3])) {
        let report = check_gradients(&[x, w], 1e-6, |_, v| {
            Ok(v[0].matmul(v[1])?.tanh().softmax(1)?.mul(v[0])?.sum())
        })
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }
}

#[test]
fn gradient_of_shared_input_accumulates() {
    let tape = Tape::new();
    let x = tape.param(&Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let y = x.mul(x).unwrap().add(x).unwrap().sum();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, -3.0]);
}

#[test]
fn weights_json_round_trip() {
    let mut w = ModelWeights::new();
    w.insert("a.w", Tensor::new(vec![2, 2], vec![0.1, -0.2, 1e-300, 3.0]).unwrap());
    w.insert("a.b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -7.25]).unwrap());
    let back = ModelWeights::from_json(&w.to_json()).unwrap();
    for (name, t) in w.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        assert_eq!(b.data(), t.data());
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(vec![2, 3]));
    let b = tape.constant(&Tensor::zeros(vec![2, 3]));
    assert!(a.matmul(b).is_err());
}
