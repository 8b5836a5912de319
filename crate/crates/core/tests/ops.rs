use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ri_core::tape::Reduce;
use ri_core::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Direct cross-correlation with explicit zero padding.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kk) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, ho, wo]);
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.get(&[ci, iy as usize, ix as usize]) * k.get(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

#[test]
fn hadamard_and_sigmoid_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let c = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 8.0]);

    let z = tape.leaf(Tensor::scalar(0.0), true);
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(z).unwrap().item(), 0.25);
}

#[test]
fn broadcast_add_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[3]);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.add(va, vb).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(tape.value(c).get(&[i, j]), a.get(&[i, j]) + b.get(&[j]));
        }
    }
}

#[test]
fn broadcast_rejection_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    match tape.add(a, b) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[0.3, -1.2, 4.5, 2.0]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), tape.value(m).data());

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    assert!(tape.matmul(a, c).is_ok());
    assert!(tape.matmul(c, a).is_err());
}

#[test]
fn conv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, one, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).item(), 9.0);

    let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::KernelTooLarge { .. })));
    assert!(tape.conv2d(x, big, 1, 1).is_ok());
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(c_in, c_out, size, k, stride, pad) in &[
        (2, 3, 8, 3, 1, 1),
        (2, 2, 8, 3, 2, 0),
        (4, 2, 16, 3, 2, 1),
        (3, 5, 7, 1, 1, 0),
        (4, 4, 16, 5, 3, 2),
    ] {
        let x = random(&mut rng, &[c_in, size, size]);
        let w = random(&mut rng, &[c_out, c_in, k, k]);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vw = tape.constant(w.clone());
        let y = tape.conv2d(vx, vw, stride, pad).unwrap();
        let oracle = conv_oracle(&x, &w, stride, pad);
        assert_eq!(tape.value(y).shape(), oracle.shape());
        for (a, b) in tape.value(y).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn batched_conv_equals_per_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[3, 2, 6, 6]);
    let w = random(&mut rng, &[4, 2, 3, 3]);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let vw = tape.constant(w.clone());
    let y = tape.conv2d(vx, vw, 2, 1).unwrap();
    for n in 0..3 {
        let oracle = conv_oracle(&x.index_axis0(n), &w, 2, 1);
        assert_eq!(tape.value(y).index_axis0(n).data(), oracle.data());
    }
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let s = tape.sum(a);
    assert_eq!(tape.value(s).item(), 6.0);

    let c = tape.constant(Tensor::full(&[2, 4, 4], 0.7));
    let p = tape.global_avg_pool(c).unwrap();
    assert!(tape.value(p).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    assert_eq!(tape.value(p).shape(), &[2]);

    let m = tape.constant(t(&[2, 3], &[1.0, 5.0, 5.0, -1.0, 0.0, -3.0]));
    let mx = tape.reduce(Reduce::Max, m, &[1], false).unwrap();
    assert_eq!(tape.value(mx).data(), &[5.0, 0.0]);
    assert!(matches!(tape.reduce(Reduce::Sum, m, &[2], false), Err(Error::InvalidAxis { .. })));
}

#[test]
fn max_gradient_goes_to_first_argmax() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[4], &[1.0, 3.0, 3.0, 2.0]), true);
    let m = tape.reduce(Reduce::Max, a, &[0], false).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    for c in [-50.0, 0.0, 3.5, 700.0] {
        let a = tape.constant(Tensor::from_slice(&[c, c, c]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    let a = tape.constant(Tensor::from_slice(&[1000.0, 0.0]));
    let s = tape.softmax(a).unwrap();
    assert!(tape.value(s).is_finite());
    assert_eq!(tape.value(s).data()[0], 1.0);
    assert!(tape.value(s).data()[1] < 1e-300);
    let e = tape.constant(Tensor::from_slice(&[]));
    assert!(tape.softmax(e).is_err());
}

#[test]
fn concat_slice_reshape() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    let a2 = tape.slice(c, 0, 0..1).unwrap();
    let b2 = tape.slice(c, 0, 1..2).unwrap();
    assert_eq!(tape.value(a2), tape.value(a));
    assert_eq!(tape.value(b2), tape.value(b));

    let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let r = tape.reshape(m, &[3, 2]).unwrap();
    assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(tape.value(r).get(&[1, 0]), 3.0);
    assert!(tape.reshape(m, &[4, 2]).is_err());
    let odd = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.concat(&[a, odd], 0).is_err());
    assert!(tape.slice(m, 1, 2..4).is_err());
}

#[test]
fn backward_examples() {
    let w0 = t(&[2, 2], &[0.5, -1.0, 2.0, 3.0]);
    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 4]);

    let mut tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    let sq = tape.square(w);
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let expect: Vec<f64> = w0.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(w).unwrap().data(), &expect[..]);

    // second call without reset accumulates
    tape.backward(s).unwrap();
    let twice: Vec<f64> = expect.iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(w).unwrap().data(), &twice[..]);
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &expect[..]);

    assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn forward_values_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let a = tape.constant(random(&mut rng, &[3, 4]));
    let b = tape.constant(random(&mut rng, &[4]));
    let outs = [
        tape.sigmoid(a),
        tape.tanh(a),
        tape.relu(a),
        tape.softplus(a),
        tape.add(a, b).unwrap(),
        tape.sub(a, b).unwrap(),
        tape.mul(a, b).unwrap(),
    ];
    for o in outs {
        assert!(tape.value(o).is_finite());
    }
}
