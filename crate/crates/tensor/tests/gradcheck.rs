//! Backward-pass verification: every op's analytic gradient is compared
//! against central finite differences of its own forward pass. Forward
//! passes of the structured ops are additionally checked against naive
//! reference implementations.

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use vlsme_tensor::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn rand_arr(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

/// Check analytic gradients of a scalar-valued graph against central finite
/// differences, elementwise over every input.
fn fd_check<F>(name: &str, inputs: &[ArrayD<f32>], h: f32, tol: f32, build: F)
where
    F: Fn(&mut Graph, &[Tensor]) -> Tensor,
{
    let mut g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&mut g, &ts);
    assert_eq!(g.value(root).len(), 1, "{name}: objective must be scalar");
    let grads = g.backward(root);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(ts[i])
            .unwrap_or_else(|| panic!("{name}: missing grad for input {i}"));
        for idx in 0..input.len() {
            let eval = |delta: f32| -> f64 {
                let mut g2 = Graph::new();
                let ts2: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let mut a = a.clone();
                        if k == i {
                            a.as_slice_mut().unwrap()[idx] += delta;
                        }
                        g2.constant(a)
                    })
                    .collect();
                let r = build(&mut g2, &ts2);
                g2.scalar(r) as f64
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let ana = analytic.as_slice().unwrap()[idx] as f64;
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
            assert!(
                err < tol as f64,
                "{name}: input {i} elem {idx}: analytic {ana:.6} vs numeric {num:.6} (rel err {err:.2e})"
            );
        }
    }
}

/// Reduce any output to a scalar via a fixed random projection, so the check
/// exercises all output elements.
fn project(g: &mut Graph, out: Tensor, seed: u64) -> Tensor {
    let shape: Vec<usize> = g.shape(out).to_vec();
    let r = rand_arr(&mut rng(seed), &shape);
    let rc = g.constant(r);
    let prod = g.mul(out, rc);
    g.sum_all(prod)
}

#[test]
fn pointwise_grads() {
    let mut r = rng(1);
    let x = rand_arr(&mut r, &[3, 4]).map(|v| v + 0.11 * v.signum()); // keep away from relu kink
    fd_check("relu", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.relu(t[0]);
        project(g, y, 10)
    });
    fd_check("sigmoid", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.sigmoid(t[0]);
        project(g, y, 11)
    });
    fd_check("gelu", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.gelu(t[0]);
        project(g, y, 12)
    });
    let y2 = rand_arr(&mut r, &[3, 4]);
    fd_check("mul", &[x.clone(), y2.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.mul(t[0], t[1]);
        project(g, y, 13)
    });
    fd_check("sub_scale", &[x, y2], 1e-2, 1e-2, |g, t| {
        let d = g.sub(t[0], t[1]);
        let s = g.scale(d, 0.7);
        let s = g.add_scalar(s, 0.3);
        project(g, s, 14)
    });
}

#[test]
fn matmul_linear_grads() {
    let mut r = rng(2);
    let a = rand_arr(&mut r, &[3, 4]);
    let b = rand_arr(&mut r, &[4, 5]);
    fd_check("matmul", &[a, b], 1e-2, 1e-2, |g, t| {
        let y = g.matmul(t[0], t[1]);
        project(g, y, 20)
    });
    let x = rand_arr(&mut r, &[2, 3, 4]);
    let w = rand_arr(&mut r, &[4, 6]);
    let bias = rand_arr(&mut r, &[6]);
    fd_check("linear", &[x, w, bias], 1e-2, 1e-2, |g, t| {
        let y = g.linear(t[0], t[1], Some(t[2]));
        project(g, y, 21)
    });
}

#[test]
fn softmax_layernorm_grads() {
    let mut r = rng(3);
    let x = rand_arr(&mut r, &[4, 5]);
    fd_check("softmax", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.softmax_lastdim(t[0]);
        project(g, y, 30)
    });
    let gamma = rand_arr(&mut r, &[5]).map(|v| v + 1.5);
    let beta = rand_arr(&mut r, &[5]);
    fd_check("layernorm", &[x, gamma, beta], 1e-2, 1.5e-2, |g, t| {
        let y = g.layernorm(t[0], t[1], t[2], 1e-5);
        project(g, y, 31)
    });
}

#[test]
fn norm2d_grads() {
    let mut r = rng(4);
    let x = rand_arr(&mut r, &[2, 4, 3, 3]);
    let gamma = rand_arr(&mut r, &[4]).map(|v| v + 1.5);
    let beta = rand_arr(&mut r, &[4]);
    fd_check(
        "batchnorm_train",
        &[x.clone(), gamma.clone(), beta.clone()],
        1e-2,
        2e-2,
        |g, t| {
            let (y, _, _) = g.batchnorm2d_train(t[0], t[1], t[2], 1e-5);
            project(g, y, 40)
        },
    );
    let rm = Array1::from_vec(vec![0.1, -0.2, 0.05, 0.3]);
    let rv = Array1::from_vec(vec![0.9, 1.1, 0.7, 1.3]);
    fd_check(
        "batchnorm_eval",
        &[x.clone(), gamma.clone(), beta.clone()],
        1e-2,
        1e-2,
        |g, t| {
            let y = g.batchnorm2d_eval(t[0], t[1], t[2], &rm, &rv, 1e-5);
            project(g, y, 41)
        },
    );
    fd_check("groupnorm", &[x, gamma, beta], 1e-2, 2e-2, |g, t| {
        let y = g.groupnorm2d(t[0], t[1], t[2], 2, 1e-5);
        project(g, y, 42)
    });
}

fn conv2d_naive(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    pad: usize,
) -> Array4<f32> {
    let (n, ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let mut out = Array4::<f32>::zeros((n, co, oh, ow));
    for ni in 0..n {
        for c_out in 0..co {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b.map(|b| b[c_out]).unwrap_or(0.0);
                    for c_in in 0..ci {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = oi as isize + ki as isize - pad as isize;
                                let jj = oj as isize + kj as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    acc += x[[ni, c_in, ii as usize, jj as usize]]
                                        * w[[c_out, c_in, ki, kj]];
                                }
                            }
                        }
                    }
                    out[[ni, c_out, oi, oj]] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_forward_matches_naive() {
    let mut r = rng(5);
    for (shape, wshape, pad) in [
        ([2usize, 3, 6, 5], [4usize, 3, 3, 3], 1usize),
        ([1, 2, 4, 4], [3, 2, 1, 1], 0),
        ([1, 1, 5, 5], [2, 1, 3, 3], 0),
    ] {
        let x = rand_arr(&mut r, &shape);
        let w = rand_arr(&mut r, &wshape);
        let b = rand_arr(&mut r, &[wshape[0]]);
        let mut g = Graph::new();
        let xt = g.constant(x.clone());
        let wt = g.constant(w.clone());
        let bt = g.constant(b.clone());
        let y = g.conv2d(xt, wt, Some(bt), pad);
        let x4 = x.into_dimensionality::<ndarray::Ix4>().unwrap();
        let w4 = w.into_dimensionality::<ndarray::Ix4>().unwrap();
        let b1 = b.into_dimensionality::<ndarray::Ix1>().unwrap();
        let want = conv2d_naive(&x4, &w4, Some(&b1), pad);
        let got = g.value(y);
        let diff = (&want.clone().into_dyn() - got).map(|v| v.abs());
        assert!(
            diff.fold(0.0f32, |a, &b| a.max(b)) < 1e-4,
            "conv2d forward mismatch at pad {pad}"
        );
    }
}

#[test]
fn conv2d_grads() {
    let mut r = rng(6);
    let x = rand_arr(&mut r, &[2, 2, 5, 4]);
    let w = rand_arr(&mut r, &[3, 2, 3, 3]);
    let b = rand_arr(&mut r, &[3]);
    fd_check("conv2d_3x3", &[x, w, b], 1e-2, 1e-2, |g, t| {
        let y = g.conv2d(t[0], t[1], Some(t[2]), 1);
        project(g, y, 60)
    });
    let x = rand_arr(&mut r, &[2, 3, 4, 4]);
    let w = rand_arr(&mut r, &[2, 3, 1, 1]);
    fd_check("conv2d_1x1", &[x, w], 1e-2, 1e-2, |g, t| {
        let y = g.conv2d(t[0], t[1], None, 0);
        project(g, y, 61)
    });
}

#[test]
fn conv_transpose_forward_and_grads() {
    let mut r = rng(7);
    let x = rand_arr(&mut r, &[1, 2, 3, 3]);
    let w = rand_arr(&mut r, &[2, 3, 2, 2]);
    let b = rand_arr(&mut r, &[3]);
    // naive scatter reference
    let x4 = x.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
    let w4 = w.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut want = Array4::<f32>::zeros((1, 3, 6, 6));
    for c_in in 0..2 {
        for c_out in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    for di in 0..2 {
                        for dj in 0..2 {
                            want[[0, c_out, 2 * i + di, 2 * j + dj]] +=
                                x4[[0, c_in, i, j]] * w4[[c_in, c_out, di, dj]];
                        }
                    }
                }
            }
        }
    }
    for c_out in 0..3 {
        let bv = b[[c_out]];
        want.slice_mut(ndarray::s![0, c_out, .., ..])
            .mapv_inplace(|v| v + bv);
    }
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let wt = g.constant(w.clone());
    let bt = g.constant(b.clone());
    let y = g.conv_transpose2x2(xt, wt, Some(bt));
    let diff = (&want.into_dyn() - g.value(y)).map(|v| v.abs());
    assert!(diff.fold(0.0f32, |a, &b| a.max(b)) < 1e-5);

    fd_check("conv_transpose", &[x, w, b], 1e-2, 1e-2, |g, t| {
        let y = g.conv_transpose2x2(t[0], t[1], Some(t[2]));
        project(g, y, 70)
    });
}

#[test]
fn maxpool_grads() {
    let mut r = rng(8);
    // well-separated values so FD never crosses the argmax boundary
    let mut x = rand_arr(&mut r, &[1, 2, 4, 4]);
    for (i, v) in x.as_slice_mut().unwrap().iter_mut().enumerate() {
        *v += (i % 7) as f32 * 0.5;
    }
    fd_check("maxpool", &[x], 1e-3, 1e-2, |g, t| {
        let y = g.maxpool2x2(t[0]);
        project(g, y, 80)
    });
}

#[test]
fn bilinear_resize_grads() {
    let mut r = rng(9);
    let x = rand_arr(&mut r, &[1, 2, 3, 3]);
    fd_check("bilinear_up", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.bilinear_resize(t[0], 5, 7);
        project(g, y, 90)
    });
    fd_check("bilinear_down", &[x], 1e-2, 1e-2, |g, t| {
        let y = g.bilinear_resize(t[0], 2, 2);
        project(g, y, 91)
    });
}

#[test]
fn attention_grads() {
    let mut r = rng(10);
    let q = rand_arr(&mut r, &[2, 3, 4]);
    let k = rand_arr(&mut r, &[2, 3, 4]);
    let v = rand_arr(&mut r, &[2, 3, 4]);
    fd_check("attention", &[q, k, v], 1e-2, 1.5e-2, |g, t| {
        let y = g.attention(t[0], t[1], t[2], 2);
        project(g, y, 100)
    });
}

#[test]
fn channel_ops_grads() {
    let mut r = rng(11);
    let x = rand_arr(&mut r, &[2, 3, 2, 2]);
    fd_check("global_avg_pool", &[x.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.global_avg_pool(t[0]);
        project(g, y, 110)
    });
    let v = rand_arr(&mut r, &[2, 3]);
    fd_check("broadcast_nc", &[v.clone()], 1e-2, 1e-2, |g, t| {
        let y = g.broadcast_nc(t[0], 2, 2);
        project(g, y, 111)
    });
    fd_check("mul_channel_gate", &[x.clone(), v], 1e-2, 1e-2, |g, t| {
        let y = g.mul_channel_gate(t[0], t[1]);
        project(g, y, 112)
    });
    let pooled = rand_arr(&mut r, &[2, 6]);
    let w = rand_arr(&mut r, &[3]);
    fd_check("conv1d_channels", &[pooled, w], 1e-2, 1e-2, |g, t| {
        let y = g.conv1d_channels(t[0], t[1]);
        project(g, y, 113)
    });
    let parts: Vec<ArrayD<f32>> = (0..3).map(|_| rand_arr(&mut r, &[2, 2, 2, 2])).collect();
    fd_check("concat_channels", &parts, 1e-2, 1e-2, |g, t| {
        let y = g.concat_channels(t);
        project(g, y, 114)
    });
}

#[test]
fn film_tokens_grads() {
    let mut r = rng(12);
    let x = rand_arr(&mut r, &[2, 3, 4]);
    let s = rand_arr(&mut r, &[2, 4]);
    let sh = rand_arr(&mut r, &[2, 4]);
    fd_check("film", &[x, s, sh], 1e-2, 1e-2, |g, t| {
        let y = g.film_tokens(t[0], t[1], t[2]);
        project(g, y, 120)
    });
}

#[test]
fn tokens_to_grid_grads_and_layout() {
    let mut r = rng(13);
    let x = rand_arr(&mut r, &[1, 4, 3]);
    let mut g = Graph::new();
    let xt = g.constant(x.clone());
    let y = g.tokens_to_grid(xt, 2);
    assert_eq!(g.shape(y), &[1, 3, 2, 2]);
    // token (gi, gj) lands at row gi, column gj
    let x3 = x.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
    assert_eq!(g.value(y)[[0, 1, 0, 1]], x3[[0, 1, 1]]);
    assert_eq!(g.value(y)[[0, 2, 1, 0]], x3[[0, 2, 2]]);

    fd_check("tokens_to_grid", &[x], 1e-2, 1e-2, |g, t| {
        let y = g.tokens_to_grid(t[0], 2);
        project(g, y, 130)
    });
}

#[test]
fn reshape_grads() {
    let mut r = rng(14);
    let x = rand_arr(&mut r, &[2, 6]);
    fd_check("reshape", &[x], 1e-2, 1e-2, |g, t| {
        let y = g.reshape(t[0], &[3, 4]);
        project(g, y, 140)
    });
}

#[test]
fn gradients_accumulate_across_reuse() {
    // y = x*x + x used twice: dy/dx = 2x + 1
    let x = ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let xt = g.leaf(x.clone());
    let sq = g.mul(xt, xt);
    let y = g.add(sq, xt);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let got = grads.wrt(xt).unwrap();
    for (i, &xv) in x.iter().enumerate() {
        let want = 2.0 * xv + 1.0;
        assert!((got.as_slice().unwrap()[i] - want).abs() < 1e-5);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut r = rng(15);
    let x = rand_arr(&mut r, &[2, 3, 8, 8]);
    let w = rand_arr(&mut r, &[4, 3, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let xt = g.constant(x.clone());
        let wt = g.constant(w.clone());
        let y = g.conv2d(xt, wt, None, 1);
        let z = g.maxpool2x2(y);
        let z = g.relu(z);
        vlsme_tensor::checksum_array(g.value(z))
    };
    assert_eq!(run(), run());
}
