use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference oracle. `f` rebuilds the computation from scratch on a
/// fresh tape and returns a scalar; the analytic gradient of every input is
/// compared entry by entry.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item()
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for e in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data[e] += h;
            let mut minus = inputs.clone();
            minus[k].data[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data[e];
            let diff = (a - numeric).abs();
            if diff > 1e-8 {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    worst
}

#[test]
fn identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(vec![3, 4], &mut rng);
    let mut id = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        id.data[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let i = tape.constant(id);
    let xv = tape.constant(x.clone());
    let prod = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(prod), &x);

    let zero = tape.constant(Tensor::zeros(vec![3, 4]));
    let s = tape.add(xv, zero).unwrap();
    assert_eq!(tape.value(s), &x);
}

#[test]
fn concat_blocks() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.concat(&[av, bv]).unwrap();
    assert_eq!(tape.shape(c), &[2, 3]);
    assert_eq!(tape.value(c).data, vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
}

#[test]
fn shape_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
    let c = tape.constant(Tensor::zeros(vec![3, 2]));
    assert!(tape.add(a, c).is_err());
    assert!(tape.reshape(a, vec![4]).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data, vec![2.0, -0.2]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data, vec![1.0, 0.2]);

    // Finite-difference oracle at x = -1.
    let f = |v: f64| if v > 0.0 { v } else { 0.2 * v };
    let h = 1e-5;
    let fd = (f(-1.0 + h) - f(-1.0 - h)) / (2.0 * h);
    assert!((fd - 0.2).abs() < 1e-9);
}

#[test]
fn normalize_contract() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::filled(vec![5, 1], 3.0));
    let y = tape.normalize(c, 1e-5).unwrap();
    assert!(tape.value(y).data.iter().all(|v| *v == 0.0));

    let col = tape.constant(Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
    let y = tape.normalize(col, 0.0).unwrap();
    assert_eq!(tape.value(y).data, vec![-1.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = tape.constant(random(vec![50, 6], &mut rng));
    let y = tape.normalize(x, 1e-5).unwrap();
    let v = tape.value(y);
    for c in 0..6 {
        let col: Vec<f64> = (0..50).map(|r| v.data[r * 6 + c]).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn softmax_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(vec![2, 4], 0.7));
    let y = tape.softmax(x);
    assert!(tape.value(y).data.iter().all(|v| (v - 0.25).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(random(vec![6, 9], &mut rng));
    let y = tape.softmax(x);
    for row in tape.value(y).data.chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn max_axis_routes_to_argmax() {
    let mut tape = Tape::new();
    // [1, 3, 2] with ties on the second channel.
    let x = tape.param(Tensor::new(vec![1, 3, 2], vec![0.1, 5.0, 0.9, 5.0, 0.4, 1.0]).unwrap());
    let (m, arg) = tape.max_axis(x, 1).unwrap();
    assert_eq!(tape.value(m).data, vec![0.9, 5.0]);
    assert_eq!(arg, vec![1, 0]);
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let err = check(vec![random(vec![3, 4, 2], &mut rng)], |t, v| {
        let (m, _) = t.max_axis(v[0], 1).unwrap();
        t.sum(m)
    });
    assert!(err < 1e-6);
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data, vec![1.0; 4]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.param(Tensor::scalar(-4.0));
    let unused = tape.param(Tensor::scalar(1.0));
    let p = tape.mul(x, y).unwrap();
    let g = tape.backward(p).unwrap();
    assert_eq!(g.get(x).item(), -4.0);
    assert_eq!(g.get(y).item(), 3.0);
    assert_eq!(g.get(unused).item(), 0.0);

    let v = tape.param(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = random(vec![4, 3], &mut rng);
    let wv = random(vec![3, 2], &mut rng);
    let build = |tape: &mut Tape, which: u8| {
        let x = tape.param(xv.clone());
        let w = tape.param(wv.clone());
        let y = tape.matmul(x, w).unwrap();
        let a = tape.leaky_relu(y, 0.2);
        let l1 = tape.sum(a);
        let s = tape.softmax(y);
        let sq = tape.mul(s, s).unwrap();
        let l2 = tape.sum(sq);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => tape.add(l1, l2).unwrap(),
        };
        (x, w, loss)
    };
    let grad_of = |which| {
        let mut t = Tape::new();
        let (x, w, l) = build(&mut t, which);
        let g = t.backward(l).unwrap();
        (g.get(x), g.get(w))
    };
    let (x1, w1) = grad_of(1);
    let (x2, w2) = grad_of(2);
    let (xs, ws) = grad_of(0);
    for ((a, b), s) in x1.data.iter().zip(&x2.data).zip(&xs.data) {
        assert!((a + b - s).abs() < 1e-12);
    }
    for ((a, b), s) in w1.data.iter().zip(&w2.data).zip(&ws.data) {
        assert!((a + b - s).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xv = random(vec![7, 5], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let n = t.normalize(x, 1e-5).unwrap();
        let s = t.softmax(n);
        t.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_checks_per_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(vec![4, 3], &mut rng);
    let b = random(vec![3, 5], &mut rng);
    let c = random(vec![6, 3], &mut rng);
    let bias = random(vec![5], &mut rng);
    let weights_out = random(vec![4, 5], &mut rng);

    let cases: Vec<(&str, f64)> = vec![
        (
            "matmul+bias",
            check(vec![a.clone(), b.clone(), bias.clone()], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let y = t.add_bias(y, v[2]).unwrap();
                let w = t.constant(weights_out.clone());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            }),
        ),
        (
            "matmul_set",
            check(vec![a.clone(), b.clone()], |t, v| {
                let y = t.matmul_set(v[0], v[1]).unwrap();
                let w = t.constant(weights_out.clone());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            }),
        ),
        (
            "matmul_nt",
            check(vec![a.clone(), c.clone()], |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
        ),
        (
            "normalize",
            check(vec![c.clone()], |t, v| {
                let y = t.normalize(v[0], 1e-5).unwrap();
                let w = t.constant(c.clone());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            }),
        ),
        (
            "softmax",
            check(vec![a.clone()], |t, v| {
                let y = t.softmax(v[0]);
                let w = t.constant(a.clone());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            }),
        ),
        (
            "sigmoid+channel",
            check(vec![a.clone(), random(vec![3], &mut ChaCha8Rng::seed_from_u64(1))], |t, v| {
                let y = t.mul_channel(v[0], v[1]).unwrap();
                let s = t.sigmoid(y);
                let sq = t.mul(s, s).unwrap();
                t.sum(sq)
            }),
        ),
        (
            "gather+concat+sub",
            check(vec![c.clone()], |t, v| {
                let g = t.gather_rows(v[0], &[2, 0, 2, 5]).unwrap();
                let h = t.gather_rows(v[0], &[1, 1, 3, 4]).unwrap();
                let d = t.sub(g, h).unwrap();
                let cat = t.concat(&[g, d]).unwrap();
                let sq = t.mul(cat, cat).unwrap();
                t.sum(sq)
            }),
        ),
        (
            "pairwise_dist",
            check(vec![a.clone(), c.clone()], |t, v| {
                let d = t.pairwise_dist(v[0], v[1]).unwrap();
                let s = t.scale(d, 0.5);
                let sq = t.mul(s, d).unwrap();
                t.sum(sq)
            }),
        ),
        (
            "weighted_bce",
            check(vec![random(vec![5], &mut ChaCha8Rng::seed_from_u64(2))], |t, v| {
                let p = t.sigmoid(v[0]);
                t.weighted_bce(p, &[1.0, 0.0, 1.0, 1.0, 0.0], &[0.5, 2.0, 1.0, 1.0, 3.0])
                    .unwrap()
            }),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn sinkhorn_and_dustbins_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cost = random(vec![4, 5], &mut rng).data.iter().map(|v| v.abs()).collect();
    let cost = Tensor::new(vec![4, 5], cost).unwrap();
    let target = random(vec![5, 6], &mut rng);
    let err = check(vec![cost, Tensor::scalar(0.7)], |t, v| {
        let s = t.dustbins(v[0], v[1]).unwrap();
        let p = t.sinkhorn(s, 30).unwrap();
        let w = t.constant(target.clone());
        let m = t.mul(p, w).unwrap();
        t.sum(m)
    });
    assert!(err < 1e-4, "sinkhorn relative error {err}");
}

#[test]
fn matching_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scores = random(vec![4, 5], &mut rng);
    let err = check(vec![scores], |t, v| {
        let p = t.sinkhorn(v[0], 20).unwrap();
        t.matching_nll(p, &[0, 6, 4, 17, 18]).unwrap()
    });
    assert!(err < 1e-4, "matching loss relative error {err}");
}

#[test]
fn fault_injection_breaks_leaky_relu() {
    let mut tape = Tape::with_fault(Some(Fault::LeakyReluSlope));
    let x = tape.param(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).data, vec![1.0, 1.0]);
}
