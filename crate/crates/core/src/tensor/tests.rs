use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::nn::{Ctx, ParamStore};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn store_of(tensors: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in tensors {
        s.insert(*name, t.clone());
    }
    s
}

/// Fixed random projection so losses exercise every output element.
fn probe<'a>(ctx: Ctx<'a, f64>, y: Var<'a, f64>) -> Result<Var<'a, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = ctx.constant(rand_tensor(&mut rng, &y.shape()));
    Ok(y.mul(&w)?.sum())
}

fn assert_grads(store: &ParamStore<f64>, f: impl for<'a> Fn(Ctx<'a, f64>) -> Result<Var<'a, f64>>) {
    let report = check_gradients(store, f, &GradCheckOptions::default()).unwrap();
    assert!(
        report.max_rel_err < 1e-5,
        "max rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_identity_and_small_product() {
    let tape = Tape::<f32>::new();
    let eye = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    assert_eq!(*eye.matmul(&x).unwrap().value(), *x.value());

    let a = tape.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
    assert_eq!(a.matmul(&b).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
}

#[test]
fn matmul_grad_of_sum_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a0, b0) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]));
    let tape = Tape::<f64>::new();
    let a = tape.leaf(a0.clone());
    let b = tape.constant(b0.clone());
    tape.backward(a.matmul(&b).unwrap().sum()).unwrap();
    let ga = a.grad().unwrap();
    // ones(3,2) × bᵀ: every row equals the row sums of b
    for i in 0..3 {
        for k in 0..4 {
            let expect = b0.data()[k * 2] + b0.data()[k * 2 + 1];
            assert!((ga.data()[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let store = store_of(&[("a", a0), ("b", b0)]);
    assert_grads(&store, |ctx| Ok(ctx.p("a")?.matmul(&ctx.p("b")?)?.sum()));
}

#[test]
fn matmul_variants_gradcheck_over_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (4, 2, 6)] {
        let store = store_of(&[
            ("a", rand_tensor(&mut rng, &[m, k])),
            ("b", rand_tensor(&mut rng, &[k, n])),
            ("bt", rand_tensor(&mut rng, &[n, k])),
        ]);
        assert_grads(&store, |ctx| {
            let a = ctx.p("a")?;
            let y = a.matmul(&ctx.p("b")?)?.add(&a.matmul_t(&ctx.p("bt")?)?)?;
            probe(ctx, y)
        });
    }
}

#[test]
fn bmm_gradcheck_over_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (b, m, k, n) in [(1, 2, 3, 4), (3, 1, 2, 2), (2, 4, 4, 3)] {
        let store = store_of(&[
            ("a", rand_tensor(&mut rng, &[b, m, k])),
            ("b", rand_tensor(&mut rng, &[b, k, n])),
            ("bt", rand_tensor(&mut rng, &[b, n, k])),
        ]);
        assert_grads(&store, |ctx| {
            let a = ctx.p("a")?;
            let y = a.bmm(&ctx.p("b")?)?.add(&a.bmm_t(&ctx.p("bt")?)?)?;
            probe(ctx, y)
        });
    }
}

#[test]
fn mac_counter_matches_matmul_dims() {
    let tape = Tape::<f32>::new();
    tape.counter().enable();
    let a = tape.constant(Tensor::zeros([3, 4]));
    let b = tape.constant(Tensor::zeros([4, 5]));
    a.matmul(&b).unwrap();
    assert_eq!(tape.counter().total_macs(), 60);
    let x = tape.constant(Tensor::zeros([2, 3, 4]));
    let y = tape.constant(Tensor::zeros([2, 6, 4]));
    x.bmm_t(&y).unwrap();
    assert_eq!(tape.counter().total_macs(), 60 + 2 * 3 * 4 * 6);
}

#[test]
fn layernorm_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let y = x.layer_norm(&g, &b, 1e-5).unwrap().value();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] + expect).abs() < 1e-12);
    assert!((y.data()[1] - expect).abs() < 1e-12);
    assert!((y.data()[1] - 0.99999).abs() < 1e-5);

    let c = tape.constant(Tensor::full([2, 3], 4.2));
    let beta = tape.constant(Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap());
    let y = c
        .layer_norm(&tape.constant(Tensor::full([3], 7.0)), &beta, 1e-5)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
}

#[test]
fn layernorm_channel_mismatch() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([2, 3]));
    let g = tape.constant(Tensor::ones([4]));
    assert!(matches!(x.layer_norm(&g, &g, 1e-5), Err(Error::Shape(_))));
}

#[test]
fn layernorm_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for shape in [[5usize, 8], [1, 3], [7, 2]] {
        let c = shape[1];
        let store = store_of(&[
            ("x", rand_tensor(&mut rng, &shape)),
            ("g", rand_tensor(&mut rng, &[c])),
            ("b", rand_tensor(&mut rng, &[c])),
        ]);
        assert_grads(&store, |ctx| {
            let y = ctx.p("x")?.layer_norm(&ctx.p("g")?, &ctx.p("b")?, 1e-5)?;
            probe(ctx, y)
        });
    }
}

#[test]
fn gelu_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = x.gelu().value();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 10.0).abs() < 1e-6);
    assert!(y.data()[2].abs() < 1e-6);
    // tanh form at x = 1: 0.5·(1 + tanh(√(2/π)·1.044715))
    let one = tape.constant(Tensor::scalar(1.0)).gelu().value().item().unwrap();
    let expect = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715).tanh());
    assert!((one - expect).abs() < 1e-15);
}

#[test]
fn gelu_relu_scale_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for shape in [vec![7], vec![2, 3], vec![2, 2, 2]] {
        let mut x = rand_tensor(&mut rng, &shape);
        // keep relu inputs away from the kink
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let store = store_of(&[("x", x)]);
        assert_grads(&store, |ctx| {
            let x = ctx.p("x")?;
            let y = x.gelu().add(&x.relu().scale(0.5))?;
            probe(ctx, y)
        });
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let p = |v: Vec<f64>| {
        tape.constant(Tensor::new([v.len()], v).unwrap())
            .softmax(0)
            .unwrap()
            .value()
    };
    assert_eq!(p(vec![0.0, 0.0]).data(), &[0.5, 0.5]);
    assert_eq!(p(vec![1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let y = p(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
    for (got, want) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 4]));
    let y = x.softmax(1).unwrap().value();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|j| y.data()[(o * 3 + j) * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (shape, axis) in [(vec![4], 0), (vec![3, 5], 1), (vec![2, 3, 4], 1)] {
        let store = store_of(&[("x", rand_tensor(&mut rng, &shape))]);
        assert_grads(&store, |ctx| {
            let y = ctx.p("x")?.softmax(axis)?;
            probe(ctx, y)
        });
    }
}

/// Triple-loop reference for the grouped spatial mix.
fn naive_grouped_mix(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (win, s, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = w.shape()[0];
    let d = c / n;
    let mut out = vec![0.0; x.numel()];
    for wi in 0..win {
        for j in 0..s {
            for ch in 0..c {
                let h = ch / d;
                let mut acc = b.data()[h * s + j];
                for k in 0..s {
                    acc += w.data()[(h * s + j) * s + k] * x.data()[(wi * s + k) * c + ch];
                }
                out[(wi * s + j) * c + ch] = acc;
            }
        }
    }
    out
}

#[test]
fn grouped_mix_identity_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng, &[3, 4, 6]));
    let eye = Tensor::from_fn([1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let y = x
        .grouped_mix(&tape.constant(eye), &tape.constant(Tensor::zeros([1, 4])))
        .unwrap();
    assert_eq!(*y.value(), *x.value());
}

#[test]
fn grouped_mix_all_ones_sums_window() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = x
        .grouped_mix(
            &tape.constant(Tensor::ones([1, 4, 4])),
            &tape.constant(Tensor::zeros([1, 4])),
        )
        .unwrap();
    assert_eq!(y.value().data(), &[10.0; 4]);
}

#[test]
fn grouped_mix_matches_naive_loop_and_counts_macs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x0, w0, b0) = (
        rand_tensor(&mut rng, &[2, 4, 4]),
        rand_tensor(&mut rng, &[2, 4, 4]),
        rand_tensor(&mut rng, &[2, 4]),
    );
    let tape = Tape::<f64>::new();
    tape.counter().enable();
    let y = tape
        .constant(x0.clone())
        .grouped_mix(&tape.constant(w0.clone()), &tape.constant(b0.clone()))
        .unwrap();
    let naive = naive_grouped_mix(&x0, &w0, &b0);
    for (a, b) in y.value().data().iter().zip(&naive) {
        assert!((a - b).abs() < 1e-12);
    }
    // W·S²·C, independent of the head count
    assert_eq!(tape.counter().total_macs(), 2 * 16 * 4);
}

#[test]
fn grouped_mix_rejects_indivisible_heads() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 5]));
    let r = x.grouped_mix(
        &tape.constant(Tensor::zeros([2, 2, 2])),
        &tape.constant(Tensor::zeros([2, 2])),
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn grouped_mix_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (w, s, c, n) in [(1, 2, 2, 1), (2, 4, 4, 2), (3, 3, 6, 3)] {
        let store = store_of(&[
            ("x", rand_tensor(&mut rng, &[w, s, c])),
            ("w", rand_tensor(&mut rng, &[n, s, s])),
            ("b", rand_tensor(&mut rng, &[n, s])),
        ]);
        assert_grads(&store, |ctx| {
            let y = ctx.p("x")?.grouped_mix(&ctx.p("w")?, &ctx.p("b")?)?;
            probe(ctx, y)
        });
    }
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros([3, 4]));
    let l = uniform.cross_entropy(&[0, 1, 3], 99).unwrap().value().item().unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let peaked = tape.constant(Tensor::new([1, 4], vec![20.0, 0.0, 0.0, 0.0]).unwrap());
    let l = peaked.cross_entropy(&[0], 99).unwrap().value().item().unwrap();
    assert!(l < 1e-6);

    assert!(matches!(
        uniform.cross_entropy(&[0, 0, 0], 0),
        Err(Error::UndefinedLoss)
    ));
    assert!(uniform.cross_entropy(&[0, 9, 0], 99).is_err());
}

#[test]
fn cross_entropy_ignores_masked_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = rand_tensor(&mut rng, &[4, 5]);
    let tape = Tape::<f64>::new();
    let full = tape.constant(logits.clone());
    let masked = full.cross_entropy(&[1, 0, 4, 0], 0).unwrap().value().item().unwrap();
    let trimmed = Tensor::new([2, 5], [&logits.data()[0..5], &logits.data()[10..15]].concat()).unwrap();
    let direct = tape
        .constant(trimmed)
        .cross_entropy(&[1, 4], 0)
        .unwrap()
        .value()
        .item()
        .unwrap();
    assert!((masked - direct).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (rows, vocab) in [(1, 2), (3, 5), (6, 4)] {
        let targets: Vec<usize> = (0..rows).map(|i| i % vocab).collect();
        let store = store_of(&[("x", rand_tensor(&mut rng, &[rows, vocab]))]);
        assert_grads(&store, |ctx| ctx.p("x")?.cross_entropy(&targets, 1));
    }
}

#[test]
fn gather_concat_reshape_bias_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (rows, len) in [(3usize, 2usize), (5, 1), (4, 3)] {
        let idx: Vec<usize> = (0..rows + 2).map(|i| (i * 7) % rows).collect();
        let idx = Arc::new(idx);
        let store = store_of(&[
            ("x", rand_tensor(&mut rng, &[rows, len])),
            ("y", rand_tensor(&mut rng, &[2, len])),
            ("b", rand_tensor(&mut rng, &[len])),
        ]);
        assert_grads(&store, |ctx| {
            let x = ctx.p("x")?;
            let g = x.gather_rows(Arc::clone(&idx), len, [rows + 2, len])?;
            let c = Var::concat(&[g, ctx.p("y")?])?;
            let r = c.add_bias(&ctx.p("b")?)?.reshape([(rows + 4) * len])?;
            probe(ctx, r)
        });
    }
}

#[test]
fn backward_examples_and_errors() {
    let tape = Tape::<f64>::new();
    let x0 = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = tape.leaf(x0.clone());
    tape.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(x0.clone());
    let loss = x.mul(&x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
    assert!(matches!(tape.backward(loss), Err(Error::Backward(_))));
    tape.reset_grads();
    assert!(x.grad().is_none());
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(x0);
    assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::ones([2]));
    let x = tape.leaf(Tensor::ones([2]));
    tape.backward(x.mul(&c).unwrap().sum()).unwrap();
    assert!(c.grad().is_none());
    assert!(x.grad().is_some());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let tape = Tape::<f32>::new();
        let a = tape.constant(rand_tensor(&mut rng, &[17, 33]).cast());
        let b = tape.constant(rand_tensor(&mut rng, &[33, 9]).cast());
        let g = tape.constant(Tensor::ones([9]));
        let z = tape.constant(Tensor::zeros([9]));
        a.matmul(&b)
            .unwrap()
            .layer_norm(&g, &z, 1e-5)
            .unwrap()
            .gelu()
            .softmax(1)
            .unwrap()
            .value()
    };
    let (x, y) = (run(), run());
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x), bits(&y));
}

#[test]
fn tensor_constructor_checks() {
    assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
    let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
    assert_eq!(t.clone().reshape([3, 2]).unwrap().shape(), &[3, 2]);
    assert!(t.reshape([4, 2]).is_err());
}
