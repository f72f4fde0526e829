use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4};

use crate::graph::{dyn_shape, Graph, Tensor};

pub(crate) fn sl(a: &ArrayD<f32>) -> &[f32] {
    a.as_slice().expect("tensor must be standard layout")
}

impl Graph {
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let value = av + bv;
        self.push_op(
            value,
            &[a, b],
            Box::new(move |g, _| vec![(a.id, g.clone()), (b.id, g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let value = av - bv;
        self.push_op(
            value,
            &[a, b],
            Box::new(move |g, _| vec![(a.id, g.clone()), (b.id, g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (av, bv) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let value = av * bv;
        self.push_op(
            value,
            &[a, b],
            Box::new(move |g, nodes| {
                vec![
                    (a.id, g * &nodes[b.id].value),
                    (b.id, g * &nodes[a.id].value),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Tensor, c: f32) -> Tensor {
        let value = self.nodes[a.id].value.map(|x| x * c);
        self.push_op(value, &[a], Box::new(move |g, _| vec![(a.id, g.map(|x| x * c))]))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f32) -> Tensor {
        let value = self.nodes[a.id].value.map(|x| x + c);
        self.push_op(value, &[a], Box::new(move |g, _| vec![(a.id, g.clone())]))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let shape: Vec<usize> = self.nodes[a.id].value.shape().to_vec();
        let value = ndarray::arr0(self.nodes[a.id].value.sum()).into_dyn();
        self.push_op(
            value,
            &[a],
            Box::new(move |g, _| {
                let g0 = g.iter().copied().next().unwrap();
                vec![(a.id, ArrayD::from_elem(crate::graph::dyn_shape(&shape), g0))]
            }),
        )
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.map(|x| x.max(0.0));
        self.push_op(
            value,
            &[a],
            Box::new(move |g, nodes| {
                let mut dx = g.clone();
                dx.zip_mut_with(&nodes[a.id].value, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![(a.id, dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let self_id = self.nodes.len();
        let value = self.nodes[a.id].value.map(|x| sigmoid_scalar(*x));
        self.push_op(
            value,
            &[a],
            Box::new(move |g, nodes| {
                let y = &nodes[self_id].value;
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                vec![(a.id, dx)]
            }),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let value = self.nodes[a.id].value.map(|x| gelu_scalar(*x));
        self.push_op(
            value,
            &[a],
            Box::new(move |g, nodes| {
                let mut dx = g.clone();
                dx.zip_mut_with(&nodes[a.id].value, |d, &x| *d *= gelu_grad_scalar(x));
                vec![(a.id, dx)]
            }),
        )
    }

    /// Logical reshape; element count must match.
    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        let av = &self.nodes[a.id].value;
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let old_shape: Vec<usize> = av.shape().to_vec();
        let value = av
            .view()
            .into_shape_with_order(dyn_shape(shape))
            .expect("reshape of standard-layout tensor")
            .to_owned();
        self.push_op(
            value,
            &[a],
            Box::new(move |g, _| {
                let back = g
                    .view()
                    .into_shape_with_order(dyn_shape(&old_shape))
                    .expect("reshape backward")
                    .to_owned();
                vec![(a.id, back)]
            }),
        )
    }

    /// Channel concatenation of NCHW maps with equal batch/spatial dims.
    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let views: Vec<_> = parts
            .iter()
            .map(|t| {
                self.nodes[t.id]
                    .value
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("concat_channels expects NCHW")
            })
            .collect();
        let (n, h, w) = (views[0].dim().0, views[0].dim().2, views[0].dim().3);
        for v in &views {
            assert_eq!((v.dim().0, v.dim().2, v.dim().3), (n, h, w), "concat: dim mismatch");
        }
        let channels: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat").into_dyn();
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        self.push_op(
            value,
            parts,
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut out = Vec::with_capacity(ids.len());
                let mut c0 = 0;
                for (&id, &c) in ids.iter().zip(&channels) {
                    let part = g4
                        .slice(ndarray::s![.., c0..c0 + c, .., ..])
                        .to_owned()
                        .into_dyn();
                    out.push((id, part));
                    c0 += c;
                }
                out
            }),
        )
    }

    /// Global average pool NCHW -> NC.
    pub fn global_avg_pool(&mut self, a: Tensor) -> Tensor {
        let x = self.nodes[a.id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("global_avg_pool expects NCHW");
        let (n, c, h, w) = x.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut value = ndarray::Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                value[[i, j]] = x.index_axis(Axis(0), i).index_axis(Axis(0), j).sum() * scale;
            }
        }
        self.push_op(
            value.into_dyn(),
            &[a],
            Box::new(move |g, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        dx.slice_mut(ndarray::s![i, j, .., ..]).fill(g2[[i, j]] * scale);
                    }
                }
                vec![(a.id, dx.into_dyn())]
            }),
        )
    }

    /// Broadcast a per-sample channel vector NC to an NCHW map.
    pub fn broadcast_nc(&mut self, a: Tensor, h: usize, w: usize) -> Tensor {
        let x = self.nodes[a.id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("broadcast_nc expects NC");
        let (n, c) = x.dim();
        let mut value = ndarray::Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            for j in 0..c {
                value.slice_mut(ndarray::s![i, j, .., ..]).fill(x[[i, j]]);
            }
        }
        self.push_op(
            value.into_dyn(),
            &[a],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array2::<f32>::zeros((n, c));
                for i in 0..n {
                    for j in 0..c {
                        dx[[i, j]] = g4.slice(ndarray::s![i, j, .., ..]).sum();
                    }
                }
                vec![(a.id, dx.into_dyn())]
            }),
        )
    }

    /// Per-channel multiplicative gate: NCHW * NC.
    pub fn mul_channel_gate(&mut self, x: Tensor, gate: Tensor) -> Tensor {
        let xv = self.nodes[x.id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("mul_channel_gate expects NCHW");
        let gv = self.nodes[gate.id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("gate expects NC");
        let (n, c, h, w) = xv.dim();
        assert_eq!((n, c), gv.dim(), "gate: channel mismatch");
        let mut value = xv.to_owned();
        for i in 0..n {
            for j in 0..c {
                let g = gv[[i, j]];
                value.slice_mut(ndarray::s![i, j, .., ..]).mapv_inplace(|v| v * g);
            }
        }
        self.push_op(
            value.into_dyn(),
            &[x, gate],
            Box::new(move |g, nodes| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = nodes[gate.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                let mut dgate = ndarray::Array2::<f32>::zeros((n, c));
                for i in 0..n {
                    for j in 0..c {
                        let gij = gv[[i, j]];
                        let gs = g4.slice(ndarray::s![i, j, .., ..]);
                        let xs = xv.slice(ndarray::s![i, j, .., ..]);
                        let mut ds = dx.slice_mut(ndarray::s![i, j, .., ..]);
                        ds.assign(&gs);
                        ds.mapv_inplace(|v| v * gij);
                        dgate[[i, j]] = (&gs * &xs).sum();
                    }
                }
                vec![(x.id, dx.into_dyn()), (gate.id, dgate.into_dyn())]
            }),
        )
    }

    /// 1-D convolution across the channel axis of pooled descriptors NC,
    /// single in/out channel, no bias, zero padding k/2. The channel-attention
    /// primitive.
    pub fn conv1d_channels(&mut self, x: Tensor, w: Tensor) -> Tensor {
        let xv = self.nodes[x.id]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv1d_channels expects NC");
        let wv = &self.nodes[w.id].value;
        assert_eq!(wv.ndim(), 1, "conv1d kernel must be 1-D");
        let k = wv.len();
        assert!(k % 2 == 1, "conv1d kernel must be odd");
        let (n, c) = xv.dim();
        let half = (k / 2) as isize;
        let ws = sl(wv);
        let mut value = ndarray::Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0f32;
                for (t, &wt) in ws.iter().enumerate() {
                    let src = j as isize + t as isize - half;
                    if src >= 0 && (src as usize) < c {
                        acc += wt * xv[[i, src as usize]];
                    }
                }
                value[[i, j]] = acc;
            }
        }
        self.push_op(
            value.into_dyn(),
            &[x, w],
            Box::new(move |g, nodes| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let ws = sl(&nodes[w.id].value).to_vec();
                let mut dx = ndarray::Array2::<f32>::zeros((n, c));
                let mut dw = ndarray::Array1::<f32>::zeros(k);
                for i in 0..n {
                    for j in 0..c {
                        let gij = g2[[i, j]];
                        for (t, &wt) in ws.iter().enumerate() {
                            let src = j as isize + t as isize - half;
                            if src >= 0 && (src as usize) < c {
                                dx[[i, src as usize]] += gij * wt;
                                dw[t] += gij * xv[[i, src as usize]];
                            }
                        }
                    }
                }
                vec![(x.id, dx.into_dyn()), (w.id, dw.into_dyn())]
            }),
        )
    }

    /// Feature-wise linear modulation of token features:
    /// y[n,t,:] = x[n,t,:] * (1 + scale[n,:]) + shift[n,:].
    pub fn film_tokens(&mut self, x: Tensor, scale: Tensor, shift: Tensor) -> Tensor {
        let xv = self.nodes[x.id]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("film expects NTD tokens");
        let sv = self.nodes[scale.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let hv = self.nodes[shift.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let (n, t, d) = xv.dim();
        assert_eq!(sv.dim(), (n, d), "film scale shape");
        assert_eq!(hv.dim(), (n, d), "film shift shape");
        let mut value = xv.to_owned();
        for i in 0..n {
            for tt in 0..t {
                for j in 0..d {
                    value[[i, tt, j]] = value[[i, tt, j]] * (1.0 + sv[[i, j]]) + hv[[i, j]];
                }
            }
        }
        self.push_op(
            value.into_dyn(),
            &[x, scale, shift],
            Box::new(move |g, nodes| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let sv = nodes[scale.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<f32>::zeros((n, t, d));
                let mut ds = ndarray::Array2::<f32>::zeros((n, d));
                let mut dh = ndarray::Array2::<f32>::zeros((n, d));
                for i in 0..n {
                    for tt in 0..t {
                        for j in 0..d {
                            let gv = g3[[i, tt, j]];
                            dx[[i, tt, j]] = gv * (1.0 + sv[[i, j]]);
                            ds[[i, j]] += gv * xv[[i, tt, j]];
                            dh[[i, j]] += gv;
                        }
                    }
                }
                vec![
                    (x.id, dx.into_dyn()),
                    (scale.id, ds.into_dyn()),
                    (shift.id, dh.into_dyn()),
                ]
            }),
        )
    }

    /// Rearrange a token sequence NTD (T = G*G, row-major grid) into an
    /// N,D,G,G feature map.
    pub fn tokens_to_grid(&mut self, x: Tensor, grid: usize) -> Tensor {
        let xv = self.nodes[x.id]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("tokens_to_grid expects NTD");
        let (n, t, d) = xv.dim();
        assert_eq!(t, grid * grid, "token count must equal grid^2");
        let mut value = ndarray::Array4::<f32>::zeros((n, d, grid, grid));
        for i in 0..n {
            for gi in 0..grid {
                for gj in 0..grid {
                    for j in 0..d {
                        value[[i, j, gi, gj]] = xv[[i, gi * grid + gj, j]];
                    }
                }
            }
        }
        self.push_op(
            value.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array3::<f32>::zeros((n, t, d));
                for i in 0..n {
                    for gi in 0..grid {
                        for gj in 0..grid {
                            for j in 0..d {
                                dx[[i, gi * grid + gj, j]] = g4[[i, j, gi, gj]];
                            }
                        }
                    }
                }
                vec![(x.id, dx.into_dyn())]
            }),
        )
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
