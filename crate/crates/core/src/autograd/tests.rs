use super::*;
use crate::nn::{ParamGroup, ParamStore};
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares analytic input gradients of `f` with central differences.
fn check(shapes: &[&[usize]], positive: bool, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let t = rand_tensor(&mut rng, s);
            if positive {
                t.map(|v| v.abs() + 0.5)
            } else {
                t
            }
        })
        .collect();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("missing gradient");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (1e-6 + a.abs().max(fd.abs()));
            assert!(err < 1e-5, "input {k} elem {i}: analytic {a} vs fd {fd}");
        }
    }
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], false, |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.mul(b, v[1]);
        let d = g.affine(c, 1.7, 0.3);
        let e = g.square(d);
        let t = g.tanh(e);
        let s = g.sigmoid(t);
        let l = g.leaky_relu(c, 0.2, 1.4);
        let sp = g.softplus(l);
        let z = g.add(s, sp);
        weighted(g, z)
    });
    check(&[&[2, 5], &[2, 5]], true, |g, v| {
        let d = g.div(v[0], v[1]);
        let r = g.rsqrt(d);
        let q = g.sqrt(v[1]);
        let l = g.ln(q);
        let e = g.exp(l);
        let z = g.add(r, e);
        weighted(g, z)
    });
}

#[test]
fn matmul_transpose_reshape() {
    check(&[&[3, 4], &[4, 2]], false, |g, v| {
        let m = g.matmul(v[0], v[1]);
        let t = g.transpose(m);
        let r = g.reshape(t, &[1, 6]);
        weighted(g, r)
    });
}

#[test]
fn broadcast_and_sum_to() {
    check(&[&[2, 1, 3], &[2, 4, 3]], false, |g, v| {
        let b = g.broadcast_to(v[0], &[2, 4, 3]);
        let p = g.mul(b, v[1]);
        let s = g.sum_to(p, &[1, 4, 1]);
        let sq = g.square(s);
        weighted(g, sq)
    });
}

#[test]
fn bias_and_channel_scale() {
    check(&[&[2, 3, 2, 2], &[3], &[2, 3]], false, |g, v| {
        let a = g.add_bias(v[0], v[1]);
        let s = g.scale_channels(a, v[2]);
        weighted(g, s)
    });
}

#[test]
fn conv2d_variants() {
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        check(&[&[2, 3, 5, 6], &[4, 3, k, k]], false, move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad);
            weighted(g, y)
        });
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, 1, 1);
    let y = g.value(y);
    for o in 0..3 {
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                            if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                acc += x.data()[(c * 4 + yy as usize) * 5 + xx as usize]
                                    * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                let got = y.data()[(o * 4 + i) * 5 + j];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn resampling_ops() {
    check(&[&[1, 2, 3, 4]], false, |g, v| {
        let u = g.upsample_nearest2x(v[0]);
        let p = g.avg_pool2x(u);
        let b = g.upsample_bilinear(p, 7, 5);
        weighted(g, b)
    });
}

#[test]
fn bilinear_reproduces_linear_ramp_interior() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 1, 4], |i| i as f64);
    let mut g = Graph::new();
    let v = g.constant(x);
    let u = g.upsample_bilinear(v, 1, 8);
    let got = g.value(u).data().to_vec();
    // Half-pixel centers: output j samples input coordinate (j + 0.5) / 2 - 0.5.
    for (j, &val) in got.iter().enumerate().take(7).skip(1) {
        let expected = (j as f64 + 0.5) / 2.0 - 0.5;
        assert!((val - expected).abs() < 1e-12);
    }
}

#[test]
fn concat_slice_gather() {
    check(&[&[2, 2, 3], &[2, 1, 3]], false, |g, v| {
        let c = g.concat1(&[v[0], v[1]]);
        let s = g.slice1(c, 1, 2);
        let q = g.gather0(s, &[1, 0, 1]);
        weighted(g, q)
    });
}

#[test]
fn softmax_family() {
    check(&[&[2, 3, 2, 2]], false, |g, v| {
        let a = g.log_softmax1(v[0]);
        let b = g.softmax1(v[0]);
        let c = g.add(a, b);
        weighted(g, c)
    });
    check(&[&[2, 3]], false, |g, v| {
        let m = g.mean_all(v[0]);
        let s = g.sum_all(v[0]);
        let p = g.mul(m, s);
        g.square(p)
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[2, 3, 4, 4]).map(|v| 30.0 * v));
    let s = g.softmax1(x);
    let t = g.value(s);
    for b in 0..2 {
        for p in 0..16 {
            let sum: f64 = (0..3).map(|c| t.data()[(b * 3 + c) * 16 + p]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", ParamGroup::Encoder, Tensor::full(&[2], 2.0));
    let b = store.add("b", ParamGroup::Synthesis, Tensor::full(&[2], 3.0));
    let mut g = Graph::with_params(&store, GroupSet::of(&[ParamGroup::Encoder]));
    let (va, vb) = (g.param(a), g.param(b));
    assert_eq!(g.param(a), va, "parameter leaves are cached");
    let p = g.mul(va, vb);
    let loss = g.sum_all(p);
    let grads = g.backward(loss);
    assert_eq!(grads.param(a).unwrap().data(), &[3.0, 3.0]);
    assert!(grads.param(b).is_none());
}

#[test]
fn repeated_backward_is_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[3], 1.5));
    let y = g.square(x);
    let l = g.sum_all(y);
    let g1 = g.backward(l);
    let g2 = g.backward(l);
    assert_eq!(g1.wrt(x), g2.wrt(x));
}
