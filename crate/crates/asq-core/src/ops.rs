//! Built-in differentiable operations.
//!
//! Each op computes its value eagerly and registers a backward closure on
//! the graph. Convolution and matmul lower onto the GEMM kernel; everything
//! else is elementwise or a small reduction.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{
    col2im_accum, conv_out_extent, for_each_chunk_pair, gemm_abt_accum, gemm_accum,
    gemm_atb_accum, im2col, map_reduce_chunks, ConvGeom,
};
use crate::tensor::{expect_rank, Tensor};

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(|args| vec![Some(args.upstream.clone()), Some(args.upstream.clone())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(|args| {
                let da = args.upstream.zip_map(args.parents[1], |u, y| u * y).ok();
                let db = args.upstream.zip_map(args.parents[0], |u, x| u * x).ok();
                vec![da, db]
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.custom(
            &[x],
            value,
            Box::new(|args| {
                let dx = args
                    .upstream
                    .zip_map(args.parents[0], |u, v| if v > 0.0 { u } else { 0.0 })
                    .ok();
                vec![dx]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(libm::exp);
        self.custom(
            &[x],
            value,
            Box::new(|args| {
                let dx = args.upstream.zip_map(args.value, |u, y| u * y).ok();
                vec![dx]
            }),
        )
    }

    /// `k * x + c` elementwise.
    pub fn scale_shift(&mut self, x: Var, k: f64, c: f64) -> Var {
        let value = self.value(x).map(|v| k * v + c);
        self.custom(
            &[x],
            value,
            Box::new(move |args| vec![Some(args.upstream.map(|u| u * k))]),
        )
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| if v > floor { v } else { floor });
        self.custom(
            &[x],
            value,
            Box::new(move |args| {
                let dx = args
                    .upstream
                    .zip_map(args.parents[0], |u, v| if v > floor { u } else { 0.0 })
                    .ok();
                vec![dx]
            }),
        )
    }

    /// Standard product of row-major matrices `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        expect_rank(av, 2, "matmul lhs")?;
        expect_rank(bv, 2, "matmul rhs")?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_accum(&mut out, av.data(), bv.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |args| {
                let up = args.upstream.data();
                let mut da = None;
                let mut db = None;
                if args.needs[0] {
                    // dA = dC * B^T
                    let mut g = vec![0.0; m * k];
                    gemm_abt_accum(&mut g, up, args.parents[1].data(), m, k, n);
                    da = Tensor::new(vec![m, k], g).ok();
                }
                if args.needs[1] {
                    // dB = A^T * dC
                    let mut g = vec![0.0; k * n];
                    gemm_atb_accum(&mut g, args.parents[0].data(), up, m, k, n);
                    db = Tensor::new(vec![k, n], g).ok();
                }
                vec![da, db]
            }),
        ))
    }

    /// 2-D cross-correlation (deep-learning convention, no kernel flip).
    /// `x[N x Cin x H x W]`, `w[Cout x Cin x Kh x Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        expect_rank(xv, 4, "conv2d input")?;
        expect_rank(wv, 4, "conv2d weight")?;
        let (n, cin, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        let hout = conv_out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d output height nonpositive (h={h}, kh={kh})")))?;
        let wout = conv_out_extent(win, kw, stride, padding)
            .ok_or_else(|| Error::Shape(format!("conv2d output width nonpositive (w={win}, kw={kw})")))?;
        let geom = ConvGeom { cin, cout, kh, kw, h, w: win, hout, wout, stride, padding };

        let out = conv_forward(xv.data(), wv.data(), n, &geom);
        let value = Tensor::new(vec![n, cout, hout, wout], out)?;
        Ok(self.custom(
            &[x, w],
            value,
            Box::new(move |args| {
                let up = args.upstream.data();
                let dx = args.needs[0].then(|| {
                    let g = conv_backward_input(up, args.parents[1].data(), n, &geom);
                    Tensor::new(vec![n, cin, h, win], g).expect("conv dx shape")
                });
                let dw = args.needs[1].then(|| {
                    let g = conv_backward_weight(args.parents[0].data(), up, n, &geom);
                    Tensor::new(vec![cout, cin, kh, kw], g).expect("conv dw shape")
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Add a per-channel bias to a `[N x C x H x W]` tensor.
    pub fn bias_add_chan(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        expect_rank(xv, 4, "bias_add_chan input")?;
        let (c, spatial) = (xv.shape()[1], xv.shape()[2] * xv.shape()[3]);
        if bv.numel() != c {
            return Err(Error::Shape(format!(
                "bias length {} does not match {c} channels",
                bv.numel()
            )));
        }
        let mut out = xv.data().to_vec();
        broadcast_chan(&mut out, bv.data(), c, spatial, |o, b| *o += b);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.custom(
            &[x, bias],
            value,
            Box::new(move |args| {
                let dx = args.needs[0].then(|| args.upstream.clone());
                let db = args.needs[1].then(|| {
                    let mut db = vec![0.0; c];
                    reduce_chan(args.upstream.data(), &mut db, c, spatial);
                    Tensor::new(vec![c], db).expect("bias grad shape")
                });
                vec![dx, db]
            }),
        ))
    }

    /// Add a per-column bias to a `[N x M]` tensor.
    pub fn bias_add_cols(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        expect_rank(xv, 2, "bias_add_cols input")?;
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        if bv.numel() != m {
            return Err(Error::Shape(format!(
                "bias length {} does not match {m} columns",
                bv.numel()
            )));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.custom(
            &[x, bias],
            value,
            Box::new(move |args| {
                let dx = args.needs[0].then(|| args.upstream.clone());
                let db = args.needs[1].then(|| {
                    let mut db = vec![0.0; m];
                    for row in args.upstream.data().chunks(m) {
                        for (d, &u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    Tensor::new(vec![m], db).expect("bias grad shape")
                });
                vec![dx, db]
            }),
        ))
    }

    /// Batch normalization with frozen statistics: affine per-channel map.
    pub fn batchnorm_inference(
        &mut self,
        x: Var,
        gamma: Var,
        delta: Var,
        mean: &Tensor,
        variance: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 4, "batchnorm input")?;
        let c = xv.shape()[1];
        let spatial = xv.shape()[2] * xv.shape()[3];
        for (t, what) in [
            (self.value(gamma), "gamma"),
            (self.value(delta), "delta"),
            (mean, "mean"),
            (variance, "variance"),
        ] {
            if t.numel() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {what} length {} does not match {c} channels",
                    t.numel()
                )));
            }
        }
        let inv_std: Vec<f64> = variance.data().iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
        let mu = mean.data().to_vec();
        let gv = self.value(gamma).data().to_vec();
        let dv = self.value(delta).data().to_vec();

        let mut out = xv.data().to_vec();
        apply_per_chan(&mut out, c, spatial, |ch, v| (v - mu[ch]) * inv_std[ch] * gv[ch] + dv[ch]);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let mu_b = mu.clone();
        let inv_b = inv_std.clone();
        Ok(self.custom(
            &[x, gamma, delta],
            value,
            Box::new(move |args| {
                let up = args.upstream.data();
                let xd = args.parents[0].data();
                let gd = args.parents[1].data();
                let dx = args.needs[0].then(|| {
                    let mut g = up.to_vec();
                    apply_per_chan(&mut g, c, spatial, |ch, u| u * gd[ch] * inv_b[ch]);
                    Tensor::new(args.parents[0].shape().to_vec(), g).expect("bn dx")
                });
                let dgamma = args.needs[1].then(|| {
                    let mut g = vec![0.0; c];
                    per_chan_sum(up, c, spatial, &mut g, |i, u| {
                        let ch = (i / spatial) % c;
                        u * (xd[i] - mu_b[ch]) * inv_b[ch]
                    });
                    Tensor::new(vec![c], g).expect("bn dgamma")
                });
                let ddelta = args.needs[2].then(|| {
                    let mut g = vec![0.0; c];
                    per_chan_sum(up, c, spatial, &mut g, |_, u| u);
                    Tensor::new(vec![c], g).expect("bn ddelta")
                });
                vec![dx, dgamma, ddelta]
            }),
        ))
    }

    /// Batch normalization over batch statistics. Returns the node plus the
    /// batch mean/variance so the caller can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        delta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let xv = self.value(x);
        expect_rank(xv, 4, "batchnorm input")?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.shape()[2] * xv.shape()[3];
        if self.value(gamma).numel() != c || self.value(delta).numel() != c {
            return Err(Error::Shape(format!("batchnorm affine params must have length {c}")));
        }
        let count = (n * spatial) as f64;
        let xd = xv.data();
        let mut mean = vec![0.0; c];
        per_chan_sum(xd, c, spatial, &mut mean, |_, v| v);
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        per_chan_sum(xd, c, spatial, &mut var, |i, v| {
            let ch = (i / spatial) % c;
            let d = v - mean[ch];
            d * d
        });
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();

        let gv = self.value(gamma).data().to_vec();
        let dv = self.value(delta).data().to_vec();
        let mut out = xd.to_vec();
        apply_per_chan(&mut out, c, spatial, |ch, v| (v - mean[ch]) * inv_std[ch] * gv[ch] + dv[ch]);
        let value = Tensor::new(xv.shape().to_vec(), out)?;

        let mean_t = Tensor::new(vec![c], mean.clone())?;
        let var_t = Tensor::new(vec![c], var.clone())?;
        let mu_b = mean;
        let inv_b = inv_std;
        let node = self.custom(
            &[x, gamma, delta],
            value,
            Box::new(move |args| {
                let up = args.upstream.data();
                let xd = args.parents[0].data();
                let gd = args.parents[1].data();
                // Per-channel reductions shared by all three gradients.
                let mut sum_up = vec![0.0; c];
                per_chan_sum(up, c, spatial, &mut sum_up, |_, u| u);
                let mut sum_up_xhat = vec![0.0; c];
                per_chan_sum(up, c, spatial, &mut sum_up_xhat, |i, u| {
                    let ch = (i / spatial) % c;
                    u * (xd[i] - mu_b[ch]) * inv_b[ch]
                });
                let dx = args.needs[0].then(|| {
                    let mut g = vec![0.0; up.len()];
                    for (i, gslot) in g.iter_mut().enumerate() {
                        let ch = (i / spatial) % c;
                        let xhat = (xd[i] - mu_b[ch]) * inv_b[ch];
                        *gslot = gd[ch] * inv_b[ch] / count
                            * (count * up[i] - sum_up[ch] - xhat * sum_up_xhat[ch]);
                    }
                    Tensor::new(args.parents[0].shape().to_vec(), g).expect("bn dx")
                });
                let dgamma = args.needs[1]
                    .then(|| Tensor::new(vec![c], sum_up_xhat.clone()).expect("bn dgamma"));
                let ddelta =
                    args.needs[2].then(|| Tensor::new(vec![c], sum_up.clone()).expect("bn ddelta"));
                vec![dx, dgamma, ddelta]
            }),
        );
        Ok((node, mean_t, var_t))
    }

    /// Mean over the spatial axes: `[N x C x H x W]` -> `[N x C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 4, "global_avg_pool input")?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.shape()[2] * xv.shape()[3];
        let mut out = vec![0.0; n * c];
        for (plane, o) in xv.data().chunks(spatial).zip(out.iter_mut()) {
            *o = plane.iter().sum::<f64>() / spatial as f64;
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.custom(
            &[x],
            value,
            Box::new(move |args| {
                let mut g = vec![0.0; args.parents[0].numel()];
                for (gslot, &u) in g.chunks_mut(spatial).zip(args.upstream.data()) {
                    gslot.iter_mut().for_each(|v| *v = u / spatial as f64);
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), g).ok()]
            }),
        ))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.custom(
            &[x],
            value,
            Box::new(|args| {
                vec![args.upstream.reshaped(args.parents[0].shape().to_vec()).ok()]
            }),
        ))
    }

    /// `[N x ...]` -> `[N x rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("flatten on rank-0 tensor".into()));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, vec![shape[0], rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.custom(
            &[x],
            value,
            Box::new(|args| {
                let u = args.upstream.data()[0];
                vec![Some(Tensor::full(args.parents[0].shape().to_vec(), u))]
            }),
        )
    }

    /// Mean squared error between same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let n = diff.numel() as f64;
        let value = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / n);
        Ok(self.custom(
            &[a, b],
            value,
            Box::new(move |args| {
                let u = args.upstream.data()[0];
                let da = args
                    .parents[0]
                    .zip_map(args.parents[1], |x, y| u * 2.0 * (x - y) / n)
                    .ok();
                let db = da.as_ref().map(|t| t.map(|v| -v));
                vec![da, db]
            }),
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank(lv, 2, "cross_entropy logits")?;
        let (n, classes) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &label) in lv.data().chunks(classes).zip(labels) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / n as f64);
        let labels: Vec<usize> = labels.to_vec();
        Ok(self.custom(
            &[logits],
            value,
            Box::new(move |args| {
                let u = args.upstream.data()[0];
                let ld = args.parents[0].data();
                let mut g = vec![0.0; ld.len()];
                for (i, (row, grow)) in ld.chunks(classes).zip(g.chunks_mut(classes)).enumerate() {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let denom: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
                    for (j, (gs, &v)) in grow.iter_mut().zip(row).enumerate() {
                        let p = libm::exp(v - m) / denom;
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        *gs = u * (p - onehot) / n as f64;
                    }
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), g).ok()]
            }),
        ))
    }
}

fn conv_forward(x: &[f64], wmat: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.out_pixels();
    let mut out = vec![0.0; n * out_stride];
    for_each_chunk_pair(&x[..n * in_stride], in_stride, &mut out, out_stride, |_, xs, os| {
        let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
        for (xi, oi) in xs.chunks(in_stride).zip(os.chunks_mut(out_stride)) {
            im2col(xi, g, &mut col);
            gemm_accum(oi, wmat, &col, g.cout, g.patch_len(), g.out_pixels());
        }
    });
    out
}

fn conv_backward_input(up: &[f64], wmat: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let up_stride = g.cout * g.out_pixels();
    let dx_stride = g.cin * g.h * g.w;
    let mut dx = vec![0.0; n * dx_stride];
    for_each_chunk_pair(&up[..n * up_stride], up_stride, &mut dx, dx_stride, |_, us, ds| {
        let mut dcol = vec![0.0; g.patch_len() * g.out_pixels()];
        for (ui, di) in us.chunks(up_stride).zip(ds.chunks_mut(dx_stride)) {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            // dcol = W^T * dy
            gemm_atb_accum(&mut dcol, wmat, ui, g.cout, g.patch_len(), g.out_pixels());
            col2im_accum(&dcol, g, di);
        }
    });
    dx
}

fn conv_backward_weight(x: &[f64], up: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let in_stride = g.cin * g.h * g.w;
    let up_stride = g.cout * g.out_pixels();
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    map_reduce_chunks(
        n,
        |range| {
            let mut dw = vec![0.0; g.cout * patch];
            let mut col = vec![0.0; patch * pixels];
            for i in range {
                im2col(&x[i * in_stride..(i + 1) * in_stride], g, &mut col);
                // dW += dy * col^T
                gemm_abt_accum(
                    &mut dw,
                    &up[i * up_stride..(i + 1) * up_stride],
                    &col,
                    g.cout,
                    patch,
                    pixels,
                );
            }
            dw
        },
        |acc, part| {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        },
    )
    .unwrap_or_else(|| vec![0.0; g.cout * patch])
}

fn broadcast_chan(data: &mut [f64], per_chan: &[f64], c: usize, spatial: usize, f: impl Fn(&mut f64, f64)) {
    for (i, v) in data.iter_mut().enumerate() {
        let ch = (i / spatial) % c;
        f(v, per_chan[ch]);
    }
}

fn apply_per_chan(data: &mut [f64], c: usize, spatial: usize, f: impl Fn(usize, f64) -> f64) {
    for (i, v) in data.iter_mut().enumerate() {
        let ch = (i / spatial) % c;
        *v = f(ch, *v);
    }
}

/// Accumulate `f(i, data[i])` into the per-channel slot, in flat order.
fn per_chan_sum(data: &[f64], c: usize, spatial: usize, out: &mut [f64], f: impl Fn(usize, f64) -> f64) {
    for (i, &v) in data.iter().enumerate() {
        let ch = (i / spatial) % c;
        out[ch] += f(i, v);
    }
}

fn reduce_chan(data: &[f64], out: &mut [f64], c: usize, spatial: usize) {
    per_chan_sum(data, c, spatial, out, |_, v| v);
}
