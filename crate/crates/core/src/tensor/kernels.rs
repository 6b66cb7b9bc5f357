//! Forward implementations and backward dispatch for every tape op.

use super::conv::{
    bias_grad, conv_gather, conv_out_dim, conv_transpose_out_dim, transpose_gather, weight_grad,
    MapDims,
};
use super::{deposit, ConvSpec, Op, Result, Tape, TensorError, TensorId};

pub(crate) const DICE_EPS: f64 = 1e-5;

fn dims5(shape: &[usize], op: &'static str) -> Result<MapDims> {
    if shape.len() != 5 {
        return Err(TensorError::Rank {
            op,
            expected: 5,
            shape: shape.to_vec(),
        });
    }
    Ok(MapDims {
        n: shape[0],
        c: shape[1],
        d: [shape[2], shape[3], shape[4]],
    })
}

fn cubic_kernel(shape: &[usize], op: &'static str) -> Result<usize> {
    if shape.len() != 5 || shape[2] != shape[3] || shape[3] != shape[4] || shape[2] == 0 {
        return Err(TensorError::Shape {
            op,
            detail: format!("weight must be [c, c, k, k, k] with cubic kernel, got {shape:?}"),
        });
    }
    Ok(shape[2])
}

fn check_stride(stride: [usize; 3], op: &'static str) -> Result<()> {
    for s in stride {
        if s != 1 && s != 2 {
            return Err(TensorError::Stride { op, stride: s });
        }
    }
    Ok(())
}

impl Tape {
    /// 3D convolution: input N×Cin×D×H×W, weight Cout×Cin×k×k×k, bias Cout.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId> {
        const OP: &str = "conv3d";
        let xd = dims5(self.shape(input), OP)?;
        let ws = self.shape(weight).to_vec();
        let k = cubic_kernel(&ws, OP)?;
        check_stride(stride, OP)?;
        if ws[1] != xd.c {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                input_channels: xd.c,
                weight_channels: ws[1],
            });
        }
        let co = ws[0];
        if self.shape(bias) != [co] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("bias shape {:?} != [{co}]", self.shape(bias)),
            });
        }
        for a in 0..3 {
            if xd.d[a] + 2 * padding[a] < k {
                return Err(TensorError::SpatialTooSmall {
                    op: OP,
                    dims: xd.d,
                    padding,
                    kernel: k,
                });
            }
        }
        let od = MapDims {
            n: xd.n,
            c: co,
            d: [
                conv_out_dim(xd.d[0], padding[0], k, stride[0]),
                conv_out_dim(xd.d[1], padding[1], k, stride[1]),
                conv_out_dim(xd.d[2], padding[2], k, stride[2]),
            ],
        };
        let mut out = vec![0.0f32; od.numel()];
        conv_gather(
            self.data(input),
            xd,
            self.data(weight),
            k,
            Some(self.data(bias)),
            stride,
            padding,
            od,
            &mut out,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            vec![od.n, od.c, od.d[0], od.d[1], od.d[2]],
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                spec: ConvSpec { stride, padding },
            },
            None,
        ))
    }

    /// Transposed 3D convolution: input N×Cin×D×H×W, weight Cin×Cout×k×k×k.
    /// Output dim per axis: (D-1)*stride - 2*pad + k + output_padding.
    pub fn conv_transpose3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<TensorId> {
        const OP: &str = "conv_transpose3d";
        let xd = dims5(self.shape(input), OP)?;
        let ws = self.shape(weight).to_vec();
        let k = cubic_kernel(&ws, OP)?;
        check_stride(stride, OP)?;
        if ws[0] != xd.c {
            return Err(TensorError::ChannelMismatch {
                op: OP,
                input_channels: xd.c,
                weight_channels: ws[0],
            });
        }
        let co = ws[1];
        if self.shape(bias) != [co] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("bias shape {:?} != [{co}]", self.shape(bias)),
            });
        }
        let mut d = [0usize; 3];
        for a in 0..3 {
            d[a] = conv_transpose_out_dim(xd.d[a], padding[a], k, stride[a], output_padding[a])
                .ok_or(TensorError::EmptyOutput { op: OP, dims: xd.d })?;
        }
        let od = MapDims { n: xd.n, c: co, d };
        let mut out = vec![0.0f32; od.numel()];
        transpose_gather(
            self.data(input),
            xd,
            self.data(weight),
            co,
            k,
            Some(self.data(bias)),
            stride,
            padding,
            od,
            &mut out,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            vec![od.n, od.c, od.d[0], od.d[1], od.d[2]],
            rg,
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                spec: ConvSpec { stride, padding },
            },
            None,
        ))
    }

    /// Per-(sample, channel) standardization over spatial voxels; no learned affine.
    pub fn instance_norm(&mut self, input: TensorId, eps: f32) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "instance_norm")?;
        let spatial = xd.spatial();
        let x = self.data(input);
        let slices = xd.n * xd.c;
        let mut mean = vec![0.0f32; slices];
        let mut inv_std = vec![0.0f32; slices];
        let mut out = vec![0.0f32; x.len()];
        for s in 0..slices {
            let xs = &x[s * spatial..(s + 1) * spatial];
            let mut sum = 0.0f64;
            for &v in xs {
                sum += v as f64;
            }
            let mu = sum / spatial as f64;
            let mut var = 0.0f64;
            for &v in xs {
                let d = v as f64 - mu;
                var += d * d;
            }
            var /= spatial as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            mean[s] = mu as f32;
            inv_std[s] = r as f32;
            for (o, &v) in out[s * spatial..(s + 1) * spatial].iter_mut().zip(xs) {
                *o = ((v as f64 - mu) * r) as f32;
            }
        }
        let rg = self.rg(&[input]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(out, shape, rg, Op::InstanceNorm { input, mean, inv_std }, None))
    }

    /// PReLU with one learned slope per channel.
    pub fn prelu(&mut self, input: TensorId, slope: TensorId) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "prelu")?;
        if self.shape(slope) != [xd.c] {
            return Err(TensorError::Shape {
                op: "prelu",
                detail: format!(
                    "slope shape {:?} != channel count [{}]",
                    self.shape(slope),
                    xd.c
                ),
            });
        }
        let x = self.data(input);
        let a = self.data(slope);
        let spatial = xd.spatial();
        let mut out = vec![0.0f32; x.len()];
        for s in 0..xd.n * xd.c {
            let ac = a[s % xd.c];
            for (o, &v) in out[s * spatial..(s + 1) * spatial]
                .iter_mut()
                .zip(&x[s * spatial..(s + 1) * spatial])
            {
                *o = if v > 0.0 { v } else { ac * v };
            }
        }
        let rg = self.rg(&[input, slope]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(out, shape, rg, Op::PRelu { input, slope }, None))
    }

    /// Softmax over the channel axis at every voxel, max-subtracted for stability.
    pub fn softmax_channels(&mut self, input: TensorId) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "softmax_channels")?;
        let spatial = xd.spatial();
        let x = self.data(input);
        let mut out = vec![0.0f32; x.len()];
        for n in 0..xd.n {
            let base = n * xd.c * spatial;
            for v in 0..spatial {
                let mut m = f32::NEG_INFINITY;
                for c in 0..xd.c {
                    m = m.max(x[base + c * spatial + v]);
                }
                let mut z = 0.0f64;
                for c in 0..xd.c {
                    z += ((x[base + c * spatial + v] - m) as f64).exp();
                }
                for c in 0..xd.c {
                    out[base + c * spatial + v] =
                        (((x[base + c * spatial + v] - m) as f64).exp() / z) as f32;
                }
            }
        }
        let rg = self.rg(&[input]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(out, shape, rg, Op::SoftmaxChannels { input }, None))
    }

    /// Affine map: input N×F, weight K×F, bias K → N×K.
    pub fn fully_connected(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        const OP: &str = "fully_connected";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                shape: xs,
            });
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("weight {ws:?} incompatible with input {xs:?}"),
            });
        }
        let (n, f, k) = (xs[0], xs[1], ws[0]);
        if self.shape(bias) != [k] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("bias shape {:?} != [{k}]", self.shape(bias)),
            });
        }
        let x = self.data(input);
        let w = self.data(weight);
        let b = self.data(bias);
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut acc = b[j];
                for t in 0..f {
                    acc += x[i * f + t] * w[j * f + t];
                }
                out[i * k + j] = acc;
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(out, vec![n, k], rg, Op::FullyConnected { input, weight, bias }, None))
    }

    /// Mean over all spatial voxels per (sample, channel): N×C×D×H×W → N×C.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "global_avg_pool")?;
        let spatial = xd.spatial();
        let x = self.data(input);
        let mut out = vec![0.0f32; xd.n * xd.c];
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &v in &x[s * spatial..(s + 1) * spatial] {
                acc += v as f64;
            }
            *o = (acc / spatial as f64) as f32;
        }
        let rg = self.rg(&[input]);
        Ok(self.push(out, vec![xd.n, xd.c], rg, Op::GlobalAvgPool { input }, None))
    }

    /// Elementwise sum of two same-shape tensors. Scalar reductions keep
    /// their exact f64 readout through the sum.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        let scalar64 = match (self.scalar_f64(a), self.scalar_f64(b)) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        Ok(self.push(out, shape, rg, Op::Add { a, b }, scalar64))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, rg, Op::Mul { a, b }, None))
    }

    /// Keeps every second voxel along each spatial axis (stride-2 identity
    /// shortcut for shape-matching skips).
    pub fn subsample2(&mut self, input: TensorId) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "subsample2")?;
        let od = [xd.d[0].div_ceil(2), xd.d[1].div_ceil(2), xd.d[2].div_ceil(2)];
        let x = self.data(input);
        let spatial = xd.spatial();
        let mut out = vec![0.0f32; xd.n * xd.c * od[0] * od[1] * od[2]];
        let mut idx = 0;
        for s in 0..xd.n * xd.c {
            let base = s * spatial;
            for z in (0..xd.d[0]).step_by(2) {
                for y in (0..xd.d[1]).step_by(2) {
                    for x_ in (0..xd.d[2]).step_by(2) {
                        out[idx] = x[base + (z * xd.d[1] + y) * xd.d[2] + x_];
                        idx += 1;
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            vec![xd.n, xd.c, od[0], od[1], od[2]],
            rg,
            Op::Subsample2 { input },
            None,
        ))
    }

    /// Contiguous channel range [offset, offset+count) of a 5-d tensor.
    pub fn channel_slice(&mut self, input: TensorId, offset: usize, count: usize) -> Result<TensorId> {
        let xd = dims5(self.shape(input), "channel_slice")?;
        if offset + count > xd.c || count == 0 {
            return Err(TensorError::Shape {
                op: "channel_slice",
                detail: format!("range {offset}..{} out of {} channels", offset + count, xd.c),
            });
        }
        let spatial = xd.spatial();
        let x = self.data(input);
        let mut out = vec![0.0f32; xd.n * count * spatial];
        for n in 0..xd.n {
            let src = &x[(n * xd.c + offset) * spatial..(n * xd.c + offset + count) * spatial];
            out[n * count * spatial..(n + 1) * count * spatial].copy_from_slice(src);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            vec![xd.n, count, xd.d[0], xd.d[1], xd.d[2]],
            rg,
            Op::ChannelSlice { input, offset },
            None,
        ))
    }

    /// Sum of all elements → scalar.
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for &v in self.data(input) {
            acc += v as f64;
        }
        let rg = self.rg(&[input]);
        self.push(vec![acc as f32], vec![1], rg, Op::SumAll { input }, Some(acc))
    }

    /// Mean absolute difference against a constant target; subgradient 0 at ties.
    pub fn l1_loss(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        if self.data(pred).len() != target.len() {
            return Err(TensorError::Shape {
                op: "l1_loss",
                detail: format!(
                    "prediction has {} elements, target {}",
                    self.data(pred).len(),
                    target.len()
                ),
            });
        }
        let mut acc = 0.0f64;
        for (&p, &t) in self.data(pred).iter().zip(target) {
            acc += (p as f64 - t as f64).abs();
        }
        let val = acc / target.len() as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![val as f32],
            vec![1],
            rg,
            Op::L1Loss {
                pred,
                target: target.to_vec(),
            },
            Some(val),
        ))
    }

    /// Soft Dice loss in [-1, 0] against a one-hot target, averaged over all
    /// (sample, class) maps. Per map: -(2·Σ p·t + ε) / (Σ p² + Σ t² + ε),
    /// ε = 1e-5, sums over that sample's voxels.
    pub fn dice_loss(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        let xd = dims5(self.shape(pred), "dice_loss")?;
        if self.data(pred).len() != target.len() {
            return Err(TensorError::Shape {
                op: "dice_loss",
                detail: format!(
                    "prediction has {} elements, target {}",
                    self.data(pred).len(),
                    target.len()
                ),
            });
        }
        let spatial = xd.spatial();
        let p = self.data(pred);
        let maps = xd.n * xd.c;
        let mut num = vec![DICE_EPS; maps];
        let mut den = vec![DICE_EPS; maps];
        for m in 0..maps {
            let base = m * spatial;
            let mut cross = 0.0f64;
            let mut sq = 0.0f64;
            for i in base..base + spatial {
                let pv = p[i] as f64;
                let tv = target[i] as f64;
                cross += pv * tv;
                sq += pv * pv + tv * tv;
            }
            num[m] += 2.0 * cross;
            den[m] += sq;
        }
        let mut val = 0.0f64;
        for m in 0..maps {
            val -= num[m] / den[m];
        }
        val /= maps as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            vec![val as f32],
            vec![1],
            rg,
            Op::DiceLoss {
                pred,
                target: target.to_vec(),
                num,
                den,
            },
            Some(val),
        ))
    }

    /// Mean negative log-softmax of the true class over a batch of logits.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        const OP: &str = "cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                shape,
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("labels {labels:?} incompatible with logits [{n}, {k}]"),
            });
        }
        let z = self.data(logits);
        let mut probs = vec![0.0f32; n * k];
        let mut acc = 0.0f64;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for &v in row {
                sum += (v as f64 - m).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = ((v as f64 - m).exp() / sum) as f32;
            }
            acc += m + sum.ln() - row[labels[i]] as f64;
        }
        let val = acc / n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![val as f32],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Some(val),
        ))
    }

    pub(crate) fn backprop_node(&self, i: usize, g: &[f32], pass: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                spec,
            } => {
                let xd = dims5(self.shape(*input), "conv3d").unwrap();
                let gd = dims5(&self.nodes[i].shape, "conv3d").unwrap();
                let ws = self.shape(*weight);
                let k = ws[2];
                if self.requires_grad(*input) {
                    let mut gx = vec![0.0f32; xd.numel()];
                    transpose_gather(
                        g,
                        gd,
                        self.data(*weight),
                        xd.c,
                        k,
                        None,
                        spec.stride,
                        spec.padding,
                        xd,
                        &mut gx,
                    );
                    deposit(pass, *input, gx);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0f32; self.data(*weight).len()];
                    weight_grad(
                        self.data(*input),
                        xd,
                        g,
                        gd,
                        k,
                        spec.stride,
                        spec.padding,
                        &mut gw,
                    );
                    deposit(pass, *weight, gw);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0f32; gd.c];
                    bias_grad(g, gd, &mut gb);
                    deposit(pass, *bias, gb);
                }
            }
            Op::ConvTranspose3d {
                input,
                weight,
                bias,
                spec,
            } => {
                let xd = dims5(self.shape(*input), "conv_transpose3d").unwrap();
                let gd = dims5(&self.nodes[i].shape, "conv_transpose3d").unwrap();
                let ws = self.shape(*weight);
                let k = ws[2];
                if self.requires_grad(*input) {
                    // gradient w.r.t. input is a stride-s forward convolution of g
                    let mut gx = vec![0.0f32; xd.numel()];
                    conv_gather(
                        g,
                        gd,
                        self.data(*weight),
                        k,
                        None,
                        spec.stride,
                        spec.padding,
                        xd,
                        &mut gx,
                    );
                    deposit(pass, *input, gx);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0f32; self.data(*weight).len()];
                    weight_grad(
                        g,
                        gd,
                        self.data(*input),
                        xd,
                        k,
                        spec.stride,
                        spec.padding,
                        &mut gw,
                    );
                    deposit(pass, *weight, gw);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0f32; gd.c];
                    bias_grad(g, gd, &mut gb);
                    deposit(pass, *bias, gb);
                }
            }
            Op::InstanceNorm { input, mean, inv_std } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let xd = dims5(self.shape(*input), "instance_norm").unwrap();
                let spatial = xd.spatial();
                let x = self.data(*input);
                let mut gx = vec![0.0f32; x.len()];
                for s in 0..xd.n * xd.c {
                    let mu = mean[s] as f64;
                    let r = inv_std[s] as f64;
                    let xs = &x[s * spatial..(s + 1) * spatial];
                    let gs = &g[s * spatial..(s + 1) * spatial];
                    let mut g_mean = 0.0f64;
                    let mut gx_mean = 0.0f64;
                    for (&gv, &xv) in gs.iter().zip(xs) {
                        let xh = (xv as f64 - mu) * r;
                        g_mean += gv as f64;
                        gx_mean += gv as f64 * xh;
                    }
                    g_mean /= spatial as f64;
                    gx_mean /= spatial as f64;
                    for ((o, &gv), &xv) in gx[s * spatial..(s + 1) * spatial]
                        .iter_mut()
                        .zip(gs)
                        .zip(xs)
                    {
                        let xh = (xv as f64 - mu) * r;
                        *o = (r * (gv as f64 - g_mean - xh * gx_mean)) as f32;
                    }
                }
                deposit(pass, *input, gx);
            }
            Op::PRelu { input, slope } => {
                let xd = dims5(self.shape(*input), "prelu").unwrap();
                let spatial = xd.spatial();
                let x = self.data(*input);
                let a = self.data(*slope);
                if self.requires_grad(*input) {
                    let mut gx = vec![0.0f32; x.len()];
                    for s in 0..xd.n * xd.c {
                        let ac = a[s % xd.c];
                        for ((o, &gv), &xv) in gx[s * spatial..(s + 1) * spatial]
                            .iter_mut()
                            .zip(&g[s * spatial..(s + 1) * spatial])
                            .zip(&x[s * spatial..(s + 1) * spatial])
                        {
                            *o = if xv > 0.0 { gv } else { ac * gv };
                        }
                    }
                    deposit(pass, *input, gx);
                }
                if self.requires_grad(*slope) {
                    let mut ga = vec![0.0f32; a.len()];
                    for s in 0..xd.n * xd.c {
                        let mut acc = 0.0f64;
                        for (&gv, &xv) in g[s * spatial..(s + 1) * spatial]
                            .iter()
                            .zip(&x[s * spatial..(s + 1) * spatial])
                        {
                            if xv <= 0.0 {
                                acc += gv as f64 * xv as f64;
                            }
                        }
                        ga[s % xd.c] += acc as f32;
                    }
                    deposit(pass, *slope, ga);
                }
            }
            Op::SoftmaxChannels { input } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let xd = dims5(&self.nodes[i].shape, "softmax_channels").unwrap();
                let spatial = xd.spatial();
                let p = &self.nodes[i].data;
                let mut gx = vec![0.0f32; p.len()];
                for n in 0..xd.n {
                    let base = n * xd.c * spatial;
                    for v in 0..spatial {
                        let mut dot = 0.0f64;
                        for c in 0..xd.c {
                            let idx = base + c * spatial + v;
                            dot += g[idx] as f64 * p[idx] as f64;
                        }
                        for c in 0..xd.c {
                            let idx = base + c * spatial + v;
                            gx[idx] = (p[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                        }
                    }
                }
                deposit(pass, *input, gx);
            }
            Op::FullyConnected { input, weight, bias } => {
                let xs = self.shape(*input);
                let (n, f) = (xs[0], xs[1]);
                let k = self.shape(*weight)[0];
                let x = self.data(*input);
                let w = self.data(*weight);
                if self.requires_grad(*input) {
                    let mut gx = vec![0.0f32; n * f];
                    for i_ in 0..n {
                        for j in 0..k {
                            let gv = g[i_ * k + j];
                            for t in 0..f {
                                gx[i_ * f + t] += gv * w[j * f + t];
                            }
                        }
                    }
                    deposit(pass, *input, gx);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![0.0f32; k * f];
                    for i_ in 0..n {
                        for j in 0..k {
                            let gv = g[i_ * k + j];
                            for t in 0..f {
                                gw[j * f + t] += gv * x[i_ * f + t];
                            }
                        }
                    }
                    deposit(pass, *weight, gw);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0f32; k];
                    for i_ in 0..n {
                        for j in 0..k {
                            gb[j] += g[i_ * k + j];
                        }
                    }
                    deposit(pass, *bias, gb);
                }
            }
            Op::GlobalAvgPool { input } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let xd = dims5(self.shape(*input), "global_avg_pool").unwrap();
                let spatial = xd.spatial();
                let mut gx = vec![0.0f32; xd.numel()];
                for s in 0..xd.n * xd.c {
                    let gv = g[s] / spatial as f32;
                    gx[s * spatial..(s + 1) * spatial].fill(gv);
                }
                deposit(pass, *input, gx);
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.requires_grad(*id) {
                        deposit(pass, *id, g.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let d: Vec<f32> = g.iter().zip(self.data(*b)).map(|(gv, bv)| gv * bv).collect();
                    deposit(pass, *a, d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f32> = g.iter().zip(self.data(*a)).map(|(gv, av)| gv * av).collect();
                    deposit(pass, *b, d);
                }
            }
            Op::Subsample2 { input } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let xd = dims5(self.shape(*input), "subsample2").unwrap();
                let spatial = xd.spatial();
                let mut gx = vec![0.0f32; xd.numel()];
                let mut idx = 0;
                for s in 0..xd.n * xd.c {
                    let base = s * spatial;
                    for z in (0..xd.d[0]).step_by(2) {
                        for y in (0..xd.d[1]).step_by(2) {
                            for x_ in (0..xd.d[2]).step_by(2) {
                                gx[base + (z * xd.d[1] + y) * xd.d[2] + x_] = g[idx];
                                idx += 1;
                            }
                        }
                    }
                }
                deposit(pass, *input, gx);
            }
            Op::ChannelSlice { input, offset } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let xd = dims5(self.shape(*input), "channel_slice").unwrap();
                let od = dims5(&self.nodes[i].shape, "channel_slice").unwrap();
                let spatial = xd.spatial();
                let mut gx = vec![0.0f32; xd.numel()];
                for n in 0..xd.n {
                    let dst = &mut gx
                        [(n * xd.c + offset) * spatial..(n * xd.c + offset + od.c) * spatial];
                    dst.copy_from_slice(&g[n * od.c * spatial..(n + 1) * od.c * spatial]);
                }
                deposit(pass, *input, gx);
            }
            Op::SumAll { input } => {
                if !self.requires_grad(*input) {
                    return;
                }
                deposit(pass, *input, vec![g[0]; self.data(*input).len()]);
            }
            Op::L1Loss { pred, target } => {
                if !self.requires_grad(*pred) {
                    return;
                }
                let scale = g[0] as f64 / target.len() as f64;
                let d: Vec<f32> = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let diff = p as f64 - t as f64;
                        if diff > 0.0 {
                            scale as f32
                        } else if diff < 0.0 {
                            -scale as f32
                        } else {
                            0.0
                        }
                    })
                    .collect();
                deposit(pass, *pred, d);
            }
            Op::DiceLoss {
                pred,
                target,
                num,
                den,
            } => {
                if !self.requires_grad(*pred) {
                    return;
                }
                let xd = dims5(self.shape(*pred), "dice_loss").unwrap();
                let spatial = xd.spatial();
                let p = self.data(*pred);
                let maps = xd.n * xd.c;
                let scale = g[0] as f64 / maps as f64;
                let mut gx = vec![0.0f32; p.len()];
                for m in 0..maps {
                    let base = m * spatial;
                    let (nc, dc) = (num[m], den[m]);
                    let inv_d2 = 1.0 / (dc * dc);
                    for i_ in base..base + spatial {
                        let pv = p[i_] as f64;
                        let tv = target[i_] as f64;
                        // d/dp of -(num/den): 2 (num·p - t·den) / den²
                        gx[i_] = (scale * 2.0 * (nc * pv - tv * dc) * inv_d2) as f32;
                    }
                }
                deposit(pass, *pred, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if !self.requires_grad(*logits) {
                    return;
                }
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f32;
                let mut gx = vec![0.0f32; n * k];
                for i_ in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i_] == j { 1.0 } else { 0.0 };
                        gx[i_ * k + j] = scale * (probs[i_ * k + j] - onehot);
                    }
                }
                deposit(pass, *logits, gx);
            }
        }
    }
}
