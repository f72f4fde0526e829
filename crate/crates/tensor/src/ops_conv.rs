use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix4};

use crate::graph::{Graph, Tensor};
use crate::ops_pointwise::sl;

/// Fill `colt` (Ci*KH*KW, OH*OW) from one sample plane set, stride 1.
/// Row r = c*KH*KW + ki*KW + kj matches the flattening of a (Co,Ci,KH,KW)
/// weight tensor, so `w2.dot(colt)` is the convolution.
fn im2col(
    x: &[f32],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    colt: &mut Array2<f32>,
) {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let cs = colt.as_slice_mut().unwrap();
    cs.fill(0.0);
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = c * kh * kw + ki * kw + kj;
                let row_base = r * oh * ow;
                // valid output column range for this kernel offset
                let oj0 = pad.saturating_sub(kj);
                let oj1 = (w + pad - kj).min(ow);
                if oj0 >= oj1 {
                    continue;
                }
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let src_base = c * h * w + (ii as usize) * w + (oj0 + kj - pad);
                    let dst_base = row_base + oi * ow + oj0;
                    let len = oj1 - oj0;
                    cs[dst_base..dst_base + len].copy_from_slice(&x[src_base..src_base + len]);
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-add column gradients back to the input.
fn col2im_add(
    dcol: &Array2<f32>,
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    pad: usize,
    dx: &mut [f32],
) {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let ds = dcol.as_slice().unwrap();
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = c * kh * kw + ki * kw + kj;
                let row_base = r * oh * ow;
                let oj0 = pad.saturating_sub(kj);
                let oj1 = (w + pad - kj).min(ow);
                if oj0 >= oj1 {
                    continue;
                }
                for oi in 0..oh {
                    let ii = oi as isize + ki as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let dst_base = c * h * w + (ii as usize) * w + (oj0 + kj - pad);
                    let src_base = row_base + oi * ow + oj0;
                    for t in 0..(oj1 - oj0) {
                        dx[dst_base + t] += ds[src_base + t];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2-D convolution, NCHW, stride 1, symmetric zero padding.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>, pad: usize) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, ci, h, wdt) = xv.dim();
        let (co, wci, kh, kw) = wv.dim();
        assert_eq!(ci, wci, "conv2d: channel mismatch");
        assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = h + 2 * pad - kh + 1;
        let ow = wdt + 2 * pad - kw + 1;
        let w2 = wv.into_shape_with_order((co, ci * kh * kw)).unwrap();
        let xs = sl(&self.nodes[x.id].value);
        let one_by_one = kh == 1 && kw == 1 && pad == 0;
        let mut out = Array4::<f32>::zeros((n, co, oh, ow));
        let mut colt = if one_by_one {
            Array2::<f32>::zeros((0, 0))
        } else {
            Array2::<f32>::zeros((ci * kh * kw, oh * ow))
        };
        for i in 0..n {
            let xoff = i * ci * h * wdt;
            let y = if one_by_one {
                let xn =
                    ndarray::ArrayView2::from_shape((ci, h * wdt), &xs[xoff..xoff + ci * h * wdt])
                        .unwrap();
                w2.dot(&xn)
            } else {
                im2col(&xs[xoff..xoff + ci * h * wdt], (ci, h, wdt), (kh, kw), pad, &mut colt);
                w2.dot(&colt)
            };
            out.index_axis_mut(Axis(0), i)
                .into_shape_with_order((co, oh * ow))
                .unwrap()
                .assign(&y);
        }
        if let Some(bt) = b {
            let bv = self.nodes[bt.id].value.view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(bv.len(), co, "conv2d: bias dim");
            for i in 0..n {
                for j in 0..co {
                    out.slice_mut(ndarray::s![i, j, .., ..]).mapv_inplace(|v| v + bv[j]);
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bt) = b {
            parents.push(bt);
        }
        self.push_op(
            out.into_dyn(),
            &parents,
            Box::new(move |g, nodes| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = sl(&nodes[x.id].value);
                let wv = nodes[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let w2 = wv.into_shape_with_order((co, ci * kh * kw)).unwrap();
                let mut dx = vec![0.0f32; n * ci * h * wdt];
                let mut dw2 = Array2::<f32>::zeros((co, ci * kh * kw));
                let mut db = Array1::<f32>::zeros(co);
                let mut colt = if one_by_one {
                    Array2::<f32>::zeros((0, 0))
                } else {
                    Array2::<f32>::zeros((ci * kh * kw, oh * ow))
                };
                for i in 0..n {
                    let xoff = i * ci * h * wdt;
                    let gy = g4
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((co, oh * ow))
                        .unwrap();
                    if b.is_some() {
                        db += &gy.sum_axis(Axis(1));
                    }
                    if one_by_one {
                        let xn = ndarray::ArrayView2::from_shape(
                            (ci, h * wdt),
                            &xs[xoff..xoff + ci * h * wdt],
                        )
                        .unwrap();
                        dw2 += &gy.dot(&xn.t());
                        let dxn = w2.t().dot(&gy);
                        dx[xoff..xoff + ci * h * wdt]
                            .copy_from_slice(dxn.as_slice().unwrap());
                    } else {
                        im2col(
                            &xs[xoff..xoff + ci * h * wdt],
                            (ci, h, wdt),
                            (kh, kw),
                            pad,
                            &mut colt,
                        );
                        dw2 += &gy.dot(&colt.t());
                        let dcol = w2.t().dot(&gy);
                        col2im_add(
                            &dcol,
                            (ci, h, wdt),
                            (kh, kw),
                            pad,
                            &mut dx[xoff..xoff + ci * h * wdt],
                        );
                    }
                }
                let dx = Array4::from_shape_vec((n, ci, h, wdt), dx).unwrap();
                let dw = dw2.into_shape_with_order((co, ci, kh, kw)).unwrap();
                let mut outg = vec![(x.id, dx.into_dyn()), (w.id, dw.into_dyn())];
                if let Some(bt) = b {
                    outg.push((bt.id, db.into_dyn()));
                }
                outg
            }),
        )
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
    /// upsampling). Weight layout (Cin, Cout, 2, 2).
    pub fn conv_transpose2x2(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, ci, h, wdt) = xv.dim();
        let (wci, co, kh, kw) = wv.dim();
        assert_eq!(ci, wci, "conv_transpose: channel mismatch");
        assert_eq!((kh, kw), (2, 2), "conv_transpose: kernel must be 2x2");
        let (oh, ow) = (2 * h, 2 * wdt);
        // Wr[(co*4 + di*2 + dj), ci] = w[ci, co, di, dj]
        let mut wr = Array2::<f32>::zeros((co * 4, ci));
        for c_in in 0..ci {
            for c_out in 0..co {
                for di in 0..2 {
                    for dj in 0..2 {
                        wr[[c_out * 4 + di * 2 + dj, c_in]] = wv[[c_in, c_out, di, dj]];
                    }
                }
            }
        }
        let xs = sl(&self.nodes[x.id].value);
        let mut out = Array4::<f32>::zeros((n, co, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                let xoff = i * ci * h * wdt;
                let xn =
                    ndarray::ArrayView2::from_shape((ci, h * wdt), &xs[xoff..xoff + ci * h * wdt])
                        .unwrap();
                let y4 = wr.dot(&xn); // (co*4, h*w)
                let ys = y4.as_slice().unwrap();
                let obase = i * co * oh * ow;
                for c_out in 0..co {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let yrow = (c_out * 4 + di * 2 + dj) * h * wdt;
                            for ii in 0..h {
                                let dst = obase + c_out * oh * ow + (2 * ii + di) * ow + dj;
                                let src = yrow + ii * wdt;
                                for jj in 0..wdt {
                                    os[dst + 2 * jj] = ys[src + jj];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bt) = b {
            let bv = self.nodes[bt.id].value.view().into_dimensionality::<Ix1>().unwrap();
            assert_eq!(bv.len(), co, "conv_transpose: bias dim");
            for i in 0..n {
                for j in 0..co {
                    out.slice_mut(ndarray::s![i, j, .., ..]).mapv_inplace(|v| v + bv[j]);
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bt) = b {
            parents.push(bt);
        }
        self.push_op(
            out.into_dyn(),
            &parents,
            Box::new(move |g, nodes| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gs = sl(g);
                let xs = sl(&nodes[x.id].value);
                let wv = nodes[w.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let mut wr = Array2::<f32>::zeros((co * 4, ci));
                for c_in in 0..ci {
                    for c_out in 0..co {
                        for di in 0..2 {
                            for dj in 0..2 {
                                wr[[c_out * 4 + di * 2 + dj, c_in]] = wv[[c_in, c_out, di, dj]];
                            }
                        }
                    }
                }
                let mut dx = Array4::<f32>::zeros((n, ci, h, wdt));
                let mut dwr = Array2::<f32>::zeros((co * 4, ci));
                let mut db = Array1::<f32>::zeros(co);
                let mut dy4 = Array2::<f32>::zeros((co * 4, h * wdt));
                for i in 0..n {
                    let obase = i * co * oh * ow;
                    {
                        let dys = dy4.as_slice_mut().unwrap();
                        for c_out in 0..co {
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let yrow = (c_out * 4 + di * 2 + dj) * h * wdt;
                                    for ii in 0..h {
                                        let src = obase + c_out * oh * ow + (2 * ii + di) * ow + dj;
                                        let dst = yrow + ii * wdt;
                                        for jj in 0..wdt {
                                            dys[dst + jj] = gs[src + 2 * jj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if b.is_some() {
                        for j in 0..co {
                            db[j] += g4.slice(ndarray::s![i, j, .., ..]).sum();
                        }
                    }
                    let xoff = i * ci * h * wdt;
                    let xn = ndarray::ArrayView2::from_shape(
                        (ci, h * wdt),
                        &xs[xoff..xoff + ci * h * wdt],
                    )
                    .unwrap();
                    dwr += &dy4.dot(&xn.t());
                    let dxn = wr.t().dot(&dy4);
                    dx.index_axis_mut(Axis(0), i)
                        .into_shape_with_order((ci, h * wdt))
                        .unwrap()
                        .assign(&dxn);
                }
                let mut dw = Array4::<f32>::zeros((ci, co, 2, 2));
                for c_in in 0..ci {
                    for c_out in 0..co {
                        for di in 0..2 {
                            for dj in 0..2 {
                                dw[[c_in, c_out, di, dj]] = dwr[[c_out * 4 + di * 2 + dj, c_in]];
                            }
                        }
                    }
                }
                let mut outg = vec![(x.id, dx.into_dyn()), (w.id, dw.into_dyn())];
                if let Some(bt) = b {
                    outg.push((bt.id, db.into_dyn()));
                }
                outg
            }),
        )
    }

    /// 2x2 max pooling, stride 2. Spatial dims must be even.
    pub fn maxpool2x2(&mut self, x: Tensor) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x2: odd spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = sl(&self.nodes[x.id].value);
        let mut out = Array4::<f32>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let os = out.as_slice_mut().unwrap();
            let mut oidx = 0usize;
            for i in 0..n {
                for j in 0..c {
                    let plane = (i * c + j) * h * w;
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let base = plane + (2 * oi) * w + 2 * oj;
                            let cand = [base, base + 1, base + w, base + w + 1];
                            let mut best = cand[0];
                            let mut bv = xs[cand[0]];
                            for &ci in &cand[1..] {
                                if xs[ci] > bv {
                                    bv = xs[ci];
                                    best = ci;
                                }
                            }
                            os[oidx] = bv;
                            argmax[oidx] = best as u32;
                            oidx += 1;
                        }
                    }
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let gs = sl(g);
                let mut dx = vec![0.0f32; n * c * h * w];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += gs[o];
                }
                vec![(
                    x.id,
                    Array4::from_shape_vec((n, c, h, w), dx).unwrap().into_dyn(),
                )]
            }),
        )
    }

    /// Bilinear resize of NCHW maps (half-pixel centers, no corner alignment).
    pub fn bilinear_resize(&mut self, x: Tensor, oh: usize, ow: usize) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        if (h, w) == (oh, ow) {
            // still records a pass-through node to keep grads flowing
            let value = xv.to_owned().into_dyn();
            return self.push_op(value, &[x], Box::new(move |g, _| vec![(x.id, g.clone())]));
        }
        let value = bilinear_resize_plain(&xv.to_owned(), oh, ow);
        self.push_op(
            value.into_dyn(),
            &[x],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let rows = interp_table(h, oh);
                let cols = interp_table(w, ow);
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        for (oi, &(i0, i1, wi)) in rows.iter().enumerate() {
                            for (oj, &(j0, j1, wj)) in cols.iter().enumerate() {
                                let gv = g4[[i, j, oi, oj]];
                                dx[[i, j, i0, j0]] += gv * (1.0 - wi) * (1.0 - wj);
                                dx[[i, j, i0, j1]] += gv * (1.0 - wi) * wj;
                                dx[[i, j, i1, j0]] += gv * wi * (1.0 - wj);
                                dx[[i, j, i1, j1]] += gv * wi * wj;
                            }
                        }
                    }
                }
                vec![(x.id, dx.into_dyn())]
            }),
        )
    }
}

/// (low index, high index, fractional weight of the high side) per output cell.
fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|o| {
            let p = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (p.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f32)
        })
        .collect()
}

/// No-grad bilinear resize used by frozen encoder paths.
pub fn bilinear_resize_plain(x: &Array4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let rows = interp_table(h, oh);
    let cols = interp_table(w, ow);
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    for i in 0..n {
        for j in 0..c {
            for (oi, &(i0, i1, wi)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, wj)) in cols.iter().enumerate() {
                    let v = x[[i, j, i0, j0]] * (1.0 - wi) * (1.0 - wj)
                        + x[[i, j, i0, j1]] * (1.0 - wi) * wj
                        + x[[i, j, i1, j0]] * wi * (1.0 - wj)
                        + x[[i, j, i1, j1]] * wi * wj;
                    out[[i, j, oi, oj]] = v;
                }
            }
        }
    }
    out
}
