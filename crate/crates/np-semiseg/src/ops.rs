//! Differentiable layer primitives.
//!
//! Feature maps are `[C, H, W]` row-major. Convolutions are restricted to
//! the two cases the architecture uses: 1x1/pad 0 and 3x3/pad 1, both of
//! which preserve spatial extents.

use crate::tape::{accumulate, Tape, Var};
use crate::tensor::{real, LabelMap, Real, Tensor, IGNORE_LABEL};
use crate::{NpError, Result};
use std::rc::Rc;

/// Probabilities are clamped to this floor before any log.
pub const PROB_FLOOR: f64 = 1e-12;

fn expect_rank<T: Real>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(NpError::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation plus bias. `weight` is `[Cout, Cin, k, k]`
    /// with k in {1, 3}; k=1 requires padding 0 and k=3 padding 1 so that
    /// spatial extents are preserved.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_rank(&x, 3, "conv2d input")?;
        expect_rank(&w, 4, "conv2d weight")?;
        expect_rank(&b, 1, "conv2d bias")?;
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, wci, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if k != k2 || !(k == 1 || k == 3) {
            return Err(NpError::Shape(format!("conv2d kernel must be 1x1 or 3x3, got {k}x{k2}")));
        }
        if (k == 1 && padding != 0) || (k == 3 && padding != 1) {
            return Err(NpError::Shape(format!(
                "conv2d kernel {k}x{k} requires padding {}, got {padding}",
                if k == 1 { 0 } else { 1 }
            )));
        }
        if wci != ci {
            return Err(NpError::Shape(format!(
                "conv2d channel mismatch: input has {ci}, weight expects {wci}"
            )));
        }
        if b.shape()[0] != co {
            return Err(NpError::Shape(format!(
                "conv2d bias length {} != out channels {co}",
                b.shape()[0]
            )));
        }

        let mut out = vec![T::zero(); co * h * wd];
        conv_forward(x.data(), w.data(), b.data(), out.as_mut_slice(), ci, co, h, wd, k, padding);
        let out = Tensor::new(&[co, h, wd], out)?;

        let (cx, cw) = (Rc::clone(&x), Rc::clone(&w));
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[ci, h, wd]);
                let mut dw = Tensor::zeros(&[co, ci, k, k]);
                let mut db = Tensor::zeros(&[co]);
                conv_backward(
                    cx.data(),
                    cw.data(),
                    g.data(),
                    dx.data_mut(),
                    dw.data_mut(),
                    db.data_mut(),
                    ci,
                    co,
                    h,
                    wd,
                    k,
                    padding,
                );
                accumulate(&mut slots[input.0], dx);
                accumulate(&mut slots[weight.0], dw);
                accumulate(&mut slots[bias.0], db);
            }),
        )
    }

    /// Per-channel standardization with biased variance, then affine.
    pub fn instance_norm(&self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let gm = self.value(gamma);
        let bt = self.value(beta);
        expect_rank(&x, 3, "instance_norm input")?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        if n < 2 {
            return Err(NpError::Data(
                "instance_norm needs at least 2 spatial positions per channel".into(),
            ));
        }
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(NpError::Shape(format!(
                "instance_norm affine params must have shape [{c}]"
            )));
        }

        let epsv = real::<T>(eps);
        let inv_n = T::one() / real::<T>(n as f64);
        let mut out = vec![T::zero(); c * n];
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let xs = &x.data()[ch * n..(ch + 1) * n];
            let mut mean = T::zero();
            for &v in xs {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let is = T::one() / (var + epsv).sqrt();
            inv_std[ch] = is;
            let (g, b) = (gm.data()[ch], bt.data()[ch]);
            for i in 0..n {
                let xh = (xs[i] - mean) * is;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = g * xh + b;
            }
        }
        let out = Tensor::new(&[c, h, w], out)?;
        let cg = Rc::clone(&gm);
        self.push(
            out,
            Box::new(move |gr, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgm = Tensor::zeros(&[c]);
                let mut dbt = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let gs = &gr.data()[ch * n..(ch + 1) * n];
                    let xh = &xhat[ch * n..(ch + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        sum_g = sum_g + gs[i];
                        sum_gx = sum_gx + gs[i] * xh[i];
                    }
                    dgm.data_mut()[ch] = sum_gx;
                    dbt.data_mut()[ch] = sum_g;
                    let scale = cg.data()[ch] * inv_std[ch];
                    let mg = sum_g * inv_n;
                    let mgx = sum_gx * inv_n;
                    let dxs = &mut dx.data_mut()[ch * n..(ch + 1) * n];
                    for i in 0..n {
                        dxs[i] = scale * (gs[i] - mg - xh[i] * mgx);
                    }
                }
                accumulate(&mut slots[input.0], dx);
                accumulate(&mut slots[gamma.0], dgm);
                accumulate(&mut slots[beta.0], dbt);
            }),
        )
    }

    /// Row-wise affine map: `[N, Din] x [Dout, Din]^T + [Dout]`.
    pub fn linear(&self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_rank(&x, 2, "linear input")?;
        expect_rank(&w, 2, "linear weight")?;
        let (n, din) = (x.shape()[0], x.shape()[1]);
        let (dout, wdin) = (w.shape()[0], w.shape()[1]);
        if wdin != din {
            return Err(NpError::Shape(format!(
                "linear dim mismatch: input Din {din}, weight Din {wdin}"
            )));
        }
        if b.shape() != [dout] {
            return Err(NpError::Shape(format!("linear bias must be [{dout}]")));
        }
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &x.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &w.data()[o * din..(o + 1) * din];
                let mut acc = b.data()[o];
                for i in 0..din {
                    acc = acc + xr[i] * wr[i];
                }
                out[r * dout + o] = acc;
            }
        }
        let out = Tensor::new(&[n, dout], out)?;
        let (cx, cw) = (Rc::clone(&x), Rc::clone(&w));
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[n, din]);
                let mut dw = Tensor::zeros(&[dout, din]);
                let mut db = Tensor::zeros(&[dout]);
                for r in 0..n {
                    let gr = &g.data()[r * dout..(r + 1) * dout];
                    let xr = &cx.data()[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let go = gr[o];
                        db.data_mut()[o] = db.data_mut()[o] + go;
                        let wr = &cw.data()[o * din..(o + 1) * din];
                        let dxr = &mut dx.data_mut()[r * din..(r + 1) * din];
                        for i in 0..din {
                            dxr[i] = dxr[i] + go * wr[i];
                        }
                        let dwr = &mut dw.data_mut()[o * din..(o + 1) * din];
                        for i in 0..din {
                            dwr[i] = dwr[i] + go * xr[i];
                        }
                    }
                }
                accumulate(&mut slots[input.0], dx);
                accumulate(&mut slots[weight.0], dw);
                accumulate(&mut slots[bias.0], db);
            }),
        )
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let c = *x.shape().last().ok_or_else(|| {
            NpError::Shape("softmax needs at least one axis".into())
        })?;
        let slices = x.numel() / c;
        let mut out = vec![T::zero(); x.numel()];
        for s in 0..slices {
            softmax_slice(&x.data()[s * c..(s + 1) * c], &mut out[s * c..(s + 1) * c]);
        }
        let out = Tensor::new(x.shape(), out)?;
        let probs = Rc::new(out.clone());
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(probs.shape());
                for s in 0..slices {
                    softmax_backward_slice(
                        &probs.data()[s * c..(s + 1) * c],
                        &g.data()[s * c..(s + 1) * c],
                        &mut dx.data_mut()[s * c..(s + 1) * c],
                    );
                }
                accumulate(&mut slots[logits.0], dx);
            }),
        )
    }

    /// Per-pixel softmax over the channel axis of a `[C, H, W]` map.
    pub fn softmax_channels(&self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        expect_rank(&x, 3, "softmax_channels input")?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let mut out = vec![T::zero(); c * n];
        let mut col = vec![T::zero(); c];
        let mut res = vec![T::zero(); c];
        for p in 0..n {
            for ch in 0..c {
                col[ch] = x.data()[ch * n + p];
            }
            softmax_slice(&col, &mut res);
            for ch in 0..c {
                out[ch * n + p] = res[ch];
            }
        }
        let out = Tensor::new(&[c, h, w], out)?;
        let probs = Rc::new(out.clone());
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut pcol = vec![T::zero(); c];
                let mut gcol = vec![T::zero(); c];
                let mut dcol = vec![T::zero(); c];
                for p in 0..n {
                    for ch in 0..c {
                        pcol[ch] = probs.data()[ch * n + p];
                        gcol[ch] = g.data()[ch * n + p];
                    }
                    softmax_backward_slice(&pcol, &gcol, &mut dcol);
                    for ch in 0..c {
                        dx.data_mut()[ch * n + p] = dcol[ch];
                    }
                }
                accumulate(&mut slots[logits.0], dx);
            }),
        )
    }

    /// Per-channel mean over all spatial positions: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank(&x, 3, "global_avg_pool input")?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let inv = T::one() / real::<T>(n as f64);
        let mut out = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for &v in &x.data()[ch * n..(ch + 1) * n] {
                acc = acc + v;
            }
            out[ch] = acc * inv;
        }
        let out = Tensor::new(&[c], out)?;
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let gv = g.data()[ch] * inv;
                    for v in &mut dx.data_mut()[ch * n..(ch + 1) * n] {
                        *v = gv;
                    }
                }
                accumulate(&mut slots[input.0], dx);
            }),
        )
    }

    /// Non-overlapping k x k average pooling; extents must divide by k.
    pub fn avg_pool2d(&self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank(&x, 3, "avg_pool2d input")?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NpError::Shape(format!(
                "avg_pool2d: extents {h}x{w} not divisible by window {k}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / real::<T>((k * k) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + x.data()[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(ch * oh + oy) * ow + ox] * inv;
                            for dy in 0..k {
                                for dxx in 0..k {
                                    dx.data_mut()[(ch * h + oy * k + dy) * w + ox * k + dxx] = gv;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut slots[input.0], dx);
            }),
        )
    }

    /// Concatenate `[Ci, H, W]` maps along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NpError::Shape("concat_channels of nothing".into()));
        }
        let first = self.value(parts[0]);
        expect_rank(&first, 3, "concat_channels part")?;
        let (h, w) = (first.shape()[1], first.shape()[2]);
        let mut chans = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            expect_rank(&v, 3, "concat_channels part")?;
            if v.shape()[1] != h || v.shape()[2] != w {
                return Err(NpError::Shape(format!(
                    "concat_channels spatial mismatch: {:?} vs {}x{}",
                    v.shape(),
                    h,
                    w
                )));
            }
            chans.push(v.shape()[0]);
            total += v.shape()[0];
        }
        let n = h * w;
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[total, h, w], out)?;
        let parts = parts.to_vec();
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut off = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let cn = chans[idx] * n;
                    let mut dp = Tensor::zeros(&[chans[idx], h, w]);
                    dp.data_mut().copy_from_slice(&g.data()[off..off + cn]);
                    accumulate(&mut slots[p.0], dp);
                    off += cn;
                }
            }),
        )
    }

    /// Broadcast a `[K]` vector to a `[K, H, W]` map. The gradient is the
    /// spatial sum per channel.
    pub fn tile_map(&self, v: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(v);
        expect_rank(&x, 1, "tile_map input")?;
        let k = x.shape()[0];
        let n = h * w;
        let mut out = vec![T::zero(); k * n];
        for c in 0..k {
            let val = x.data()[c];
            for o in &mut out[c * n..(c + 1) * n] {
                *o = val;
            }
        }
        let out = Tensor::new(&[k, h, w], out)?;
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dv = Tensor::zeros(&[k]);
                for c in 0..k {
                    let mut acc = T::zero();
                    for &gv in &g.data()[c * n..(c + 1) * n] {
                        acc = acc + gv;
                    }
                    dv.data_mut()[c] = acc;
                }
                accumulate(&mut slots[v.0], dv);
            }),
        )
    }

    /// Mean over non-ignored pixels of `-ln p[label]`, probabilities
    /// clamped to [`PROB_FLOOR`]. Returns the scalar loss and the number of
    /// pixels it averages over.
    pub fn cross_entropy(&self, probs: Var, labels: &LabelMap) -> Result<(Var, usize)> {
        let p = self.value(probs);
        expect_rank(&p, 3, "cross_entropy probs")?;
        let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        if labels.h != h || labels.w != w {
            return Err(NpError::Shape(format!(
                "cross_entropy labels {}x{} vs probs {h}x{w}",
                labels.h, labels.w
            )));
        }
        let n = h * w;
        let floor = real::<T>(PROB_FLOOR);
        let mut acc = T::zero();
        let mut valid = 0usize;
        for (pix, &lab) in labels.data.iter().enumerate() {
            if lab == IGNORE_LABEL {
                continue;
            }
            if lab as usize >= c {
                return Err(NpError::Data(format!(
                    "label {lab} out of range for {c} classes"
                )));
            }
            valid += 1;
            let pv = p.data()[lab as usize * n + pix].max(floor);
            acc = acc - pv.ln();
        }
        if valid == 0 {
            return Err(NpError::LossUndefined(
                "cross_entropy: every pixel is ignored".into(),
            ));
        }
        let inv = T::one() / real::<T>(valid as f64);
        let out = Tensor::scalar(acc * inv);
        let labs = labels.data.clone();
        let cp = Rc::clone(&p);
        let var = self.push(
            out,
            Box::new(move |g, slots| {
                let go = g.data()[0] * inv;
                let mut dp = Tensor::zeros(&[c, h, w]);
                for (pix, &lab) in labs.iter().enumerate() {
                    if lab == IGNORE_LABEL {
                        continue;
                    }
                    let idx = lab as usize * n + pix;
                    let pv = cp.data()[idx];
                    // clamped region contributes zero gradient
                    if pv > floor {
                        dp.data_mut()[idx] = -go / pv;
                    }
                }
                accumulate(&mut slots[probs.0], dp);
            }),
        )?;
        Ok((var, valid))
    }

    /// Distance-softmax attention against a fixed set of class centers:
    /// each pixel's output is the weight-softmax(-euclidean distance)
    /// combination of the centers. Centers are constants; the gradient
    /// flows into the query map through the weights.
    pub fn attention_aggregate(&self, featmap: Var, centers: &[Vec<T>]) -> Result<Var> {
        let m = self.value(featmap);
        expect_rank(&m, 3, "attention_aggregate featmap")?;
        let (r, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        if centers.is_empty() {
            return Err(NpError::Aggregation(
                "attention_aggregate with zero populated centers".into(),
            ));
        }
        for c in centers {
            if c.len() != r {
                return Err(NpError::Shape(format!(
                    "center dim {} does not match feature dim {r}",
                    c.len()
                )));
            }
        }
        let n = h * w;
        let l = centers.len();
        let mut out = vec![T::zero(); r * n];
        let mut weights = vec![T::zero(); l * n];
        let mut dists = vec![T::zero(); l * n];
        let mut q = vec![T::zero(); r];
        let mut wrow = vec![T::zero(); l];
        let mut drow = vec![T::zero(); l];
        for p in 0..n {
            for d in 0..r {
                q[d] = m.data()[d * n + p];
            }
            attention_weights_at(&q, centers, &mut drow, &mut wrow);
            for li in 0..l {
                weights[li * n + p] = wrow[li];
                dists[li * n + p] = drow[li];
            }
            for d in 0..r {
                let mut acc = T::zero();
                for li in 0..l {
                    acc = acc + wrow[li] * centers[li][d];
                }
                out[d * n + p] = acc;
            }
        }
        let out = Tensor::new(&[r, h, w], out)?;
        let centers = centers.to_vec();
        let cm = Rc::clone(&m);
        self.push(
            out,
            Box::new(move |g, slots| {
                let mut dm = Tensor::zeros(&[r, h, w]);
                let mut u = vec![T::zero(); l];
                for p in 0..n {
                    // u_l = <dL/dout_pixel, center_l>
                    let mut ubar = T::zero();
                    for li in 0..l {
                        let mut acc = T::zero();
                        for d in 0..r {
                            acc = acc + g.data()[d * n + p] * centers[li][d];
                        }
                        u[li] = acc;
                        ubar = ubar + weights[li * n + p] * acc;
                    }
                    for li in 0..l {
                        let dist = dists[li * n + p];
                        if dist <= T::zero() {
                            continue; // query coincides with center: subgradient 0
                        }
                        // dL/d(score_l) with score = -distance
                        let ds = weights[li * n + p] * (u[li] - ubar);
                        let coef = -ds / dist;
                        for d in 0..r {
                            let qd = cm.data()[d * n + p];
                            dm.data_mut()[d * n + p] =
                                dm.data_mut()[d * n + p] + coef * (qd - centers[li][d]);
                        }
                    }
                }
                accumulate(&mut slots[featmap.0], dm);
            }),
        )
    }
}

/// Euclidean distances and softmax(-distance) weights of one query against
/// the centers. Stabilized by subtracting the minimum distance, which is
/// exact under the softmax's shift invariance.
pub fn attention_weights_at<T: Real>(
    query: &[T],
    centers: &[Vec<T>],
    dists: &mut [T],
    weights: &mut [T],
) {
    let l = centers.len();
    let mut dmin = T::infinity();
    for li in 0..l {
        let mut acc = T::zero();
        for (qi, ci) in query.iter().zip(&centers[li]) {
            let d = *qi - *ci;
            acc = acc + d * d;
        }
        let dist = acc.sqrt();
        dists[li] = dist;
        if dist < dmin {
            dmin = dist;
        }
    }
    let mut z = T::zero();
    for li in 0..l {
        let e = (dmin - dists[li]).exp();
        weights[li] = e;
        z = z + e;
    }
    for wv in weights.iter_mut() {
        *wv = *wv / z;
    }
}

fn softmax_slice<T: Real>(x: &[T], out: &mut [T]) {
    let mut m = T::neg_infinity();
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        z = z + e;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

fn softmax_backward_slice<T: Real>(p: &[T], g: &[T], dx: &mut [T]) {
    let mut dot = T::zero();
    for i in 0..p.len() {
        dot = dot + p[i] * g[i];
    }
    for i in 0..p.len() {
        dx[i] = p[i] * (g[i] - dot);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) {
    for oc in 0..co {
        let bias = b[oc];
        for v in &mut out[oc * h * wd..(oc + 1) * h * wd] {
            *v = bias;
        }
        for ic in 0..ci {
            for ky in 0..k {
                let oy_off = ky as isize - pad as isize;
                for kx in 0..k {
                    let ox_off = kx as isize - pad as isize;
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    let lo = (-ox_off).max(0) as usize;
                    let hi = (wd as isize - ox_off).min(wd as isize) as usize;
                    let (src_lo, src_hi) =
                        ((lo as isize + ox_off) as usize, (hi as isize + ox_off) as usize);
                    for y in 0..h {
                        let iy = y as isize + oy_off;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &x[(ic * h + iy as usize) * wd..][..wd];
                        let out_row = &mut out[(oc * h + y) * wd..][..wd];
                        for (o, &i) in out_row[lo..hi].iter_mut().zip(&in_row[src_lo..src_hi]) {
                            *o = *o + wv * i;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
    pad: usize,
) {
    for oc in 0..co {
        let mut acc = T::zero();
        for &gv in &g[oc * h * wd..(oc + 1) * h * wd] {
            acc = acc + gv;
        }
        db[oc] = acc;
        for ic in 0..ci {
            for ky in 0..k {
                let oy_off = ky as isize - pad as isize;
                for kx in 0..k {
                    let ox_off = kx as isize - pad as isize;
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    let lo = (-ox_off).max(0) as usize;
                    let hi = (wd as isize - ox_off).min(wd as isize) as usize;
                    let (src_lo, src_hi) =
                        ((lo as isize + ox_off) as usize, (hi as isize + ox_off) as usize);
                    let mut wgrad = T::zero();
                    for y in 0..h {
                        let iy = y as isize + oy_off;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ic * h + iy as usize) * wd;
                        let g_row = &g[(oc * h + y) * wd..][..wd];
                        let in_row = &x[base..][..wd];
                        for (&gv, &iv) in g_row[lo..hi].iter().zip(&in_row[src_lo..src_hi]) {
                            wgrad = wgrad + gv * iv;
                        }
                        let dx_row = &mut dx[base..][..wd];
                        for (d, &gv) in dx_row[src_lo..src_hi].iter_mut().zip(&g_row[lo..hi]) {
                            *d = *d + gv * wv;
                        }
                    }
                    dw[((oc * ci + ic) * k + ky) * k + kx] = wgrad;
                }
            }
        }
    }
}

/// Pixel-wise entropy of a `[C, H, W]` probability map in nats, with
/// 0 ln 0 taken as 0.
pub fn entropy_map(avg_probs: &Tensor<f32>) -> Result<Tensor<f32>> {
    expect_rank(avg_probs, 3, "entropy_map input")?;
    let (c, h, w) = (
        avg_probs.shape()[0],
        avg_probs.shape()[1],
        avg_probs.shape()[2],
    );
    let n = h * w;
    let mut out = vec![0.0f32; n];
    for p in 0..n {
        let mut acc = 0.0f32;
        for ch in 0..c {
            let pv = avg_probs.data()[ch * n + p];
            if pv > 0.0 {
                acc -= pv * pv.ln();
            }
        }
        out[p] = acc.max(0.0);
    }
    Tensor::new(&[h, w], out)
}
