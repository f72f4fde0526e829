use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix2, Ix3, Ix4};

use crate::graph::{Graph, Tensor};

impl Graph {
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = self.nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.id].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.dim().1, bv.dim().0, "matmul: inner dim mismatch");
        let value = av.dot(&bv);
        self.push_op(
            value.into_dyn(),
            &[a, b],
            Box::new(move |g, nodes| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = nodes[a.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = nodes[b.id].value.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    (a.id, g2.dot(&bv.t()).into_dyn()),
                    (b.id, av.t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    /// Affine map of rows: x(R,Di) @ w(Di,Do) + b. Inputs with more than two
    /// dims are treated as (prod(leading), Di) and the output keeps the
    /// leading dims.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Tensor {
        let xv = &self.nodes[x.id].value;
        let wv = self.nodes[w.id].value.view().into_dimensionality::<Ix2>().unwrap();
        let (din, dout) = wv.dim();
        let lead: Vec<usize> = xv.shape()[..xv.ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        assert_eq!(xv.shape()[xv.ndim() - 1], din, "linear: input dim mismatch");
        let x2 = xv.view().into_shape_with_order((rows, din)).unwrap();
        let mut value = x2.dot(&wv);
        if let Some(bt) = b {
            let bv = self.nodes[bt.id].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            assert_eq!(bv.len(), dout, "linear: bias dim mismatch");
            value += &bv;
        }
        let mut out_shape = lead.clone();
        out_shape.push(dout);
        let value = value.into_shape_with_order(crate::graph::dyn_shape(&out_shape)).unwrap();
        let mut parents = vec![x, w];
        if let Some(bt) = b {
            parents.push(bt);
        }
        self.push_op(
            value,
            &parents,
            Box::new(move |g, nodes| {
                let g2 = g.view().into_shape_with_order((rows, dout)).unwrap();
                let xv = nodes[x.id].value.view().into_shape_with_order((rows, din)).unwrap();
                let wv = nodes[w.id].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx_shape = lead.clone();
                dx_shape.push(din);
                let dx = g2
                    .dot(&wv.t())
                    .into_shape_with_order(crate::graph::dyn_shape(&dx_shape))
                    .unwrap();
                let dw = xv.t().dot(&g2);
                let mut out = vec![(x.id, dx), (w.id, dw.into_dyn())];
                if let Some(bt) = b {
                    out.push((bt.id, g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Tensor) -> Tensor {
        let self_id = self.nodes.len();
        let xv = &self.nodes[x.id].value;
        let d = xv.shape()[xv.ndim() - 1];
        let rows = xv.len() / d;
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut value = x2.to_owned();
        for mut row in value.rows_mut() {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let shape: Vec<usize> = xv.shape().to_vec();
        let value = value.into_shape_with_order(crate::graph::dyn_shape(&shape)).unwrap();
        self.push_op(
            value,
            &[x],
            Box::new(move |g, nodes| {
                let y = nodes[self_id].value.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = (&g2 * &y).to_owned();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f32 = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= dot * yv);
                }
                let dx = dx
                    .into_shape_with_order(crate::graph::dyn_shape(nodes[x.id].value.shape()))
                    .unwrap();
                vec![(x.id, dx)]
            }),
        )
    }

    /// Layer norm over the last axis with learnable per-feature gain/bias.
    pub fn layernorm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f32) -> Tensor {
        let xv = &self.nodes[x.id].value;
        let d = xv.shape()[xv.ndim() - 1];
        let rows = xv.len() / d;
        let gv = self.nodes[gamma.id].value.clone();
        let bv = self.nodes[beta.id].value.clone();
        assert_eq!(gv.len(), d, "layernorm: gamma dim");
        assert_eq!(bv.len(), d, "layernorm: beta dim");
        let x2 = xv.view().into_shape_with_order((rows, d)).unwrap();
        let mut value = Array2::<f32>::zeros((rows, d));
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f32;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                value[[i, j]] = xh * gv[[j]] + bv[[j]];
            }
        }
        let shape: Vec<usize> = xv.shape().to_vec();
        let value = value.into_shape_with_order(crate::graph::dyn_shape(&shape)).unwrap();
        self.push_op(
            value,
            &[x, gamma, beta],
            Box::new(move |g, nodes| {
                let x2 = nodes[x.id].value.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let gv = &nodes[gamma.id].value;
                let mut dx = Array2::<f32>::zeros((rows, d));
                let mut dgamma = Array1::<f32>::zeros(d);
                let mut dbeta = Array1::<f32>::zeros(d);
                for i in 0..rows {
                    let row = x2.row(i);
                    let mean = row.sum() / d as f32;
                    let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_ga = 0.0f32;
                    let mut sum_ga_xh = 0.0f32;
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        let ga = g2[[i, j]] * gv[[j]];
                        sum_ga += ga;
                        sum_ga_xh += ga * xh;
                        dgamma[j] += g2[[i, j]] * xh;
                        dbeta[j] += g2[[i, j]];
                    }
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv;
                        let ga = g2[[i, j]] * gv[[j]];
                        dx[[i, j]] = inv * (ga - sum_ga / d as f32 - xh * sum_ga_xh / d as f32);
                    }
                }
                let dx = dx
                    .into_shape_with_order(crate::graph::dyn_shape(nodes[x.id].value.shape()))
                    .unwrap();
                vec![
                    (x.id, dx),
                    (gamma.id, dgamma.into_dyn()),
                    (beta.id, dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Batch norm over NCHW in training mode: normalizes with batch statistics
    /// and returns (output, batch_mean, batch_var_biased) so the caller can
    /// update running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f32,
    ) -> (Tensor, Array1<f32>, Array1<f32>) {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f32;
        let gv = self.nodes[gamma.id].value.clone();
        let bv = self.nodes[beta.id].value.clone();
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for j in 0..c {
            let ch = xv.slice(ndarray::s![.., j, .., ..]);
            let mu = ch.sum() / m;
            mean[j] = mu;
            var[j] = ch.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / m;
        }
        let mut value = Array4::<f32>::zeros((n, c, h, w));
        for j in 0..c {
            let inv = 1.0 / (var[j] + eps).sqrt();
            let (ga, be) = (gv[[j]], bv[[j]]);
            let mu = mean[j];
            let src = xv.slice(ndarray::s![.., j, .., ..]);
            let mut dst = value.slice_mut(ndarray::s![.., j, .., ..]);
            dst.assign(&src);
            dst.mapv_inplace(|v| (v - mu) * inv * ga + be);
        }
        let mean_c = mean.clone();
        let var_c = var.clone();
        let t = self.push_op(
            value.into_dyn(),
            &[x, gamma, beta],
            Box::new(move |g, nodes| {
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gv = &nodes[gamma.id].value;
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for j in 0..c {
                    let inv = 1.0 / (var_c[j] + eps).sqrt();
                    let mu = mean_c[j];
                    let xs = xv.slice(ndarray::s![.., j, .., ..]);
                    let gs = g4.slice(ndarray::s![.., j, .., ..]);
                    let mut sum_g = 0.0f32;
                    let mut sum_g_xh = 0.0f32;
                    ndarray::Zip::from(&gs).and(&xs).for_each(|&gg, &xx| {
                        sum_g += gg;
                        sum_g_xh += gg * (xx - mu) * inv;
                    });
                    dgamma[j] = sum_g_xh;
                    dbeta[j] = sum_g;
                    let ga = gv[[j]];
                    let mut ds = dx.slice_mut(ndarray::s![.., j, .., ..]);
                    ndarray::Zip::from(&mut ds).and(&gs).and(&xs).for_each(|d, &gg, &xx| {
                        let xh = (xx - mu) * inv;
                        *d = ga * inv * (gg - sum_g / m - xh * sum_g_xh / m);
                    });
                }
                vec![
                    (x.id, dx.into_dyn()),
                    (gamma.id, dgamma.into_dyn()),
                    (beta.id, dbeta.into_dyn()),
                ]
            }),
        );
        (t, mean, var)
    }

    /// Batch norm in eval mode: per-channel affine with fixed running stats.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &Array1<f32>,
        running_var: &Array1<f32>,
        eps: f32,
    ) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let gv = self.nodes[gamma.id].value.clone();
        let bv = self.nodes[beta.id].value.clone();
        let mean = running_mean.clone();
        let inv: Array1<f32> = running_var.map(|v| 1.0 / (v + eps).sqrt());
        let mut value = Array4::<f32>::zeros((n, c, h, w));
        for j in 0..c {
            let (mu, iv, ga, be) = (mean[j], inv[j], gv[[j]], bv[[j]]);
            let src = xv.slice(ndarray::s![.., j, .., ..]);
            let mut dst = value.slice_mut(ndarray::s![.., j, .., ..]);
            dst.assign(&src);
            dst.mapv_inplace(|v| (v - mu) * iv * ga + be);
        }
        self.push_op(
            value.into_dyn(),
            &[x, gamma, beta],
            Box::new(move |g, nodes| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = &nodes[gamma.id].value;
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for j in 0..c {
                    let (mu, iv, ga) = (mean[j], inv[j], gv[[j]]);
                    let gs = g4.slice(ndarray::s![.., j, .., ..]);
                    let xs = xv.slice(ndarray::s![.., j, .., ..]);
                    let mut ds = dx.slice_mut(ndarray::s![.., j, .., ..]);
                    ndarray::Zip::from(&mut ds).and(&gs).and(&xs).for_each(|d, &gg, &xx| {
                        dgamma[j] += gg * (xx - mu) * iv;
                        dbeta[j] += gg;
                        *d = gg * ga * iv;
                    });
                }
                vec![
                    (x.id, dx.into_dyn()),
                    (gamma.id, dgamma.into_dyn()),
                    (beta.id, dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Group norm over NCHW; statistics per (sample, group).
    pub fn groupnorm2d(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        groups: usize,
        eps: f32,
    ) -> Tensor {
        let xv = self.nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "groupnorm: channels not divisible by groups");
        let cg = c / groups;
        let m = (cg * h * w) as f32;
        let gv = self.nodes[gamma.id].value.clone();
        let bv = self.nodes[beta.id].value.clone();
        let mut value = Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            for gidx in 0..groups {
                let c0 = gidx * cg;
                let blk = xv.slice(ndarray::s![i, c0..c0 + cg, .., ..]);
                let mu = blk.sum() / m;
                let var = blk.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / m;
                let inv = 1.0 / (var + eps).sqrt();
                for jc in 0..cg {
                    let j = c0 + jc;
                    let (ga, be) = (gv[[j]], bv[[j]]);
                    let src = xv.slice(ndarray::s![i, j, .., ..]);
                    let mut dst = value.slice_mut(ndarray::s![i, j, .., ..]);
                    dst.assign(&src);
                    dst.mapv_inplace(|v| (v - mu) * inv * ga + be);
                }
            }
        }
        self.push_op(
            value.into_dyn(),
            &[x, gamma, beta],
            Box::new(move |g, nodes| {
                let xv = nodes[x.id].value.view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gv = &nodes[gamma.id].value;
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for i in 0..n {
                    for gidx in 0..groups {
                        let c0 = gidx * cg;
                        let blk = xv.slice(ndarray::s![i, c0..c0 + cg, .., ..]);
                        let mu = blk.sum() / m;
                        let var = blk.fold(0.0, |a, &v| a + (v - mu) * (v - mu)) / m;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_ga = 0.0f32;
                        let mut sum_ga_xh = 0.0f32;
                        for jc in 0..cg {
                            let j = c0 + jc;
                            let gs = g4.slice(ndarray::s![i, j, .., ..]);
                            let xs = xv.slice(ndarray::s![i, j, .., ..]);
                            ndarray::Zip::from(&gs).and(&xs).for_each(|&gg, &xx| {
                                let xh = (xx - mu) * inv;
                                let ga = gg * gv[[j]];
                                sum_ga += ga;
                                sum_ga_xh += ga * xh;
                                dgamma[j] += gg * xh;
                                dbeta[j] += gg;
                            });
                        }
                        for jc in 0..cg {
                            let j = c0 + jc;
                            let gs = g4.slice(ndarray::s![i, j, .., ..]);
                            let xs = xv.slice(ndarray::s![i, j, .., ..]);
                            let mut ds = dx.slice_mut(ndarray::s![i, j, .., ..]);
                            ndarray::Zip::from(&mut ds).and(&gs).and(&xs).for_each(
                                |d, &gg, &xx| {
                                    let xh = (xx - mu) * inv;
                                    let ga = gg * gv[[j]];
                                    *d = inv * (ga - sum_ga / m - xh * sum_ga_xh / m);
                                },
                            );
                        }
                    }
                }
                vec![
                    (x.id, dx.into_dyn()),
                    (gamma.id, dgamma.into_dyn()),
                    (beta.id, dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Multi-head self-attention over NTD tokens. Q, K, V are pre-projected;
    /// the attention matrix is cached for the backward pass.
    pub fn attention(&mut self, q: Tensor, k: Tensor, v: Tensor, heads: usize) -> Tensor {
        let qv = self.nodes[q.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let kv = self.nodes[k.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let vv = self.nodes[v.id].value.view().into_dimensionality::<Ix3>().unwrap();
        let (n, t, d) = qv.dim();
        assert_eq!(kv.dim(), (n, t, d), "attention: k shape");
        assert_eq!(vv.dim(), (n, t, d), "attention: v shape");
        assert!(d % heads == 0, "attention: dim not divisible by heads");
        let dh = d / heads;
        let alpha = 1.0 / (dh as f32).sqrt();
        let mut value = Array3::<f32>::zeros((n, t, d));
        let mut attn = Array4::<f32>::zeros((n, heads, t, t));
        for i in 0..n {
            for hh in 0..heads {
                let c0 = hh * dh;
                let qh = qv.slice(ndarray::s![i, .., c0..c0 + dh]);
                let kh = kv.slice(ndarray::s![i, .., c0..c0 + dh]);
                let vh = vv.slice(ndarray::s![i, .., c0..c0 + dh]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * alpha);
                for mut row in scores.rows_mut() {
                    let mx = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|s| (s - mx).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let out = scores.dot(&vh);
                value.slice_mut(ndarray::s![i, .., c0..c0 + dh]).assign(&out);
                attn.slice_mut(ndarray::s![i, hh, .., ..]).assign(&scores);
            }
        }
        self.push_op(
            value.into_dyn(),
            &[q, k, v],
            Box::new(move |g, nodes| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let qv = nodes[q.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let kv = nodes[k.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let vv = nodes[v.id].value.view().into_dimensionality::<Ix3>().unwrap();
                let mut dq = Array3::<f32>::zeros((n, t, d));
                let mut dk = Array3::<f32>::zeros((n, t, d));
                let mut dv = Array3::<f32>::zeros((n, t, d));
                for i in 0..n {
                    for hh in 0..heads {
                        let c0 = hh * dh;
                        let a = attn.slice(ndarray::s![i, hh, .., ..]);
                        let go = g3.slice(ndarray::s![i, .., c0..c0 + dh]);
                        let qh = qv.slice(ndarray::s![i, .., c0..c0 + dh]);
                        let kh = kv.slice(ndarray::s![i, .., c0..c0 + dh]);
                        let vh = vv.slice(ndarray::s![i, .., c0..c0 + dh]);
                        let dvh = a.t().dot(&go);
                        let da = go.dot(&vh.t());
                        // softmax backward per row
                        let mut dscore = (&da * &a).to_owned();
                        for (mut drow, arow) in dscore.rows_mut().into_iter().zip(a.rows()) {
                            let dot: f32 = drow.sum();
                            drow.zip_mut_with(&arow, |dv, &av| *dv -= dot * av);
                        }
                        dscore.mapv_inplace(|s| s * alpha);
                        let dqh = dscore.dot(&kh);
                        let dkh = dscore.t().dot(&qh);
                        dq.slice_mut(ndarray::s![i, .., c0..c0 + dh]).assign(&dqh);
                        dk.slice_mut(ndarray::s![i, .., c0..c0 + dh]).assign(&dkh);
                        dv.slice_mut(ndarray::s![i, .., c0..c0 + dh]).assign(&dvh);
                    }
                }
                vec![
                    (q.id, dq.into_dyn()),
                    (k.id, dk.into_dyn()),
                    (v.id, dv.into_dyn()),
                ]
            }),
        )
    }
}

/// Plain-array softmax over the last axis, for no-grad encoder paths.
pub fn softmax_rows_inplace(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Plain-array layer norm over the last axis, for no-grad encoder paths.
pub fn layernorm_rows(x: &Array2<f32>, gamma: &Array1<f32>, beta: &Array1<f32>, eps: f32) -> Array2<f32> {
    let (r, d) = x.dim();
    let mut out = Array2::<f32>::zeros((r, d));
    for i in 0..r {
        let row = x.row(i);
        let mean = row.sum() / d as f32;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[[i, j]] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Plain-array multi-head self-attention, for no-grad encoder paths.
pub fn attention_rows(
    q: &Array2<f32>,
    k: &Array2<f32>,
    v: &Array2<f32>,
    heads: usize,
) -> Array2<f32> {
    let (t, d) = q.dim();
    let dh = d / heads;
    let alpha = 1.0 / (dh as f32).sqrt();
    let mut out = Array2::<f32>::zeros((t, d));
    for hh in 0..heads {
        let c0 = hh * dh;
        let qh = q.slice(ndarray::s![.., c0..c0 + dh]);
        let kh = k.slice(ndarray::s![.., c0..c0 + dh]);
        let vh = v.slice(ndarray::s![.., c0..c0 + dh]);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * alpha);
        softmax_rows_inplace(&mut scores);
        out.slice_mut(ndarray::s![.., c0..c0 + dh]).assign(&scores.dot(&vh));
    }
    out
}
