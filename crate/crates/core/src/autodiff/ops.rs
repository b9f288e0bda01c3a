//! Forward constructors for every graph operation.

use super::kernels::{self, ConvDims, MemUnitSaved};
use super::{Graph, Op, Var};
use crate::error::{Result, SimsidError};
use crate::par;
use crate::tensor::Tensor;

impl Graph {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(SimsidError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_requires(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_requires(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_requires(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.requires_grad(a), Op::Scale(a, c))
    }

    /// `x: [m,n] + bias [n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.value(x).shape().last().ok_or_else(|| SimsidError::shape("add_bias", "scalar input"))?;
        if self.value(b).shape() != [n] {
            return Err(SimsidError::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, self.any_requires(&[x, b]), Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SimsidError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, self.any_requires(&[a, b]), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(SimsidError::shape("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let data = kernels::transpose(self.value(a).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, self.requires_grad(a), Op::Transpose(a)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.requires_grad(a), op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, super::stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, super::stable_softplus, Op::Softplus(a))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(SimsidError::arg("softmax", format!("axis {axis} out of rank {}", shape.len())));
        }
        let l = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(a).data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for ii in 0..inner {
                let base = o * l * inner + ii;
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    max = max.max(xv[base + j * inner]);
                }
                let mut denom = 0.0;
                for j in 0..l {
                    let e = (xv[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..l {
                    data[base + j * inner] /= denom;
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, self.requires_grad(a), Op::SoftmaxAxis(a, axis)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), self.requires_grad(a), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), self.requires_grad(a), Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, self.requires_grad(a), Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(SimsidError::arg("concat", "no inputs"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(SimsidError::arg("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(SimsidError::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let alen = self.value(v).shape()[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let s = o * alen * inner;
                data[dst..dst + alen * inner].copy_from_slice(&src[s..s + alen * inner]);
            }
            offset += alen;
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, self.any_requires(inputs), Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(SimsidError::arg(
                "slice",
                format!("range {start}..{} out of axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * shape[axis] + start) * inner;
            let d = o * len * inner;
            data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, self.requires_grad(a), Op::Slice { input: a, axis, start }))
    }

    /// Gather rows of a 2-D tensor into a new `[rows.len(), n]` tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[u32]) -> Result<Var> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(SimsidError::shape("gather_rows", format!("{shape:?} is not 2-D")));
        }
        let (r, c) = (shape[0], shape[1]);
        if rows.iter().any(|&x| x as usize >= r) {
            return Err(SimsidError::arg("gather_rows", format!("row index out of 0..{r}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&src[row as usize * c..(row as usize + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, self.requires_grad(a), Op::GatherRows { input: a, rows: rows.to_vec() }))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, false, Op::StopGrad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(SimsidError::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] || stride == 0 {
            return Err(SimsidError::shape(
                "conv2d",
                format!("kernel {:?} does not fit input {xs:?} with pad {pad}", &ws[2..]),
            ));
        }
        let dims = ConvDims {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &dims);
        let t = Tensor::new(vec![dims.n, dims.co, dims.out_h(), dims.out_w()], data)?;
        Ok(self.push(t, self.any_requires(&[x, w, b]), Op::Conv2d { x, w, b, dims }))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 || xs[2] < k || xs[3] < k || stride == 0 {
            return Err(SimsidError::shape("maxpool2d", format!("input {xs:?}, window {k}, stride {stride}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (data, argmax) = kernels::maxpool_forward(self.value(x).data(), planes, h, w, k, stride);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let t = Tensor::new(vec![xs[0], xs[1], ho, wo], data)?;
        Ok(self.push(t, self.requires_grad(x), Op::MaxPool2d { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 || factor == 0 {
            return Err(SimsidError::shape("upsample", format!("input {xs:?}, factor {factor}")));
        }
        let data = kernels::upsample_nearest_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], factor);
        let t = Tensor::new(vec![xs[0], xs[1], xs[2] * factor, xs[3] * factor], data)?;
        Ok(self.push(t, self.requires_grad(x), Op::Upsample { x, factor }))
    }

    /// Batch norm in training mode. Returns the node plus the batch mean and
    /// population variance so the caller can fold them into running stats.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(SimsidError::shape("batch_norm", format!("input {:?}", xs)));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (mean, var) = kernels::bn_batch_stats(self.value(x).data(), n, c, hw);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = kernels::bn_normalize(
            self.value(x).data(),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(xs, data)?;
        let requires = self.any_requires(&[x, gamma, beta]);
        let node = self.push(
            t,
            requires,
            Op::BnTrain { x, gamma, beta, mean: mean.clone(), inv_std },
        );
        Ok((node, mean, var))
    }

    /// Batch norm in eval mode: a pure function of the running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || mean.len() != xs[1] || var.len() != xs[1] {
            return Err(SimsidError::shape("batch_norm_eval", format!("input {:?}", xs)));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = kernels::bn_normalize(
            self.value(x).data(),
            n,
            c,
            hw,
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(xs, data)?;
        let requires = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(t, requires, Op::BnEval { x, gamma, beta, mean: mean.to_vec(), inv_std }))
    }

    /// Softmax over the top-k entries of each last-axis slice of `x / temp`;
    /// all other weights are exactly zero. Backward follows the
    /// straight-through rule (softmax over all entries).
    pub fn topk_softmax_st(&mut self, x: Var, k: usize, temp: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let n = *shape.last().ok_or_else(|| SimsidError::arg("topk_softmax", "scalar input"))?;
        if k == 0 || k > n {
            return Err(SimsidError::arg("topk_softmax", format!("k={k} outside 1..={n}")));
        }
        if temp <= 0.0 {
            return Err(SimsidError::arg("topk_softmax", format!("temperature {temp} must be positive")));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / n;
        let mut data = vec![0.0; xv.len()];
        let mut probs = vec![0.0; xv.len()];
        let mut active = vec![0u32; k];
        for r in 0..rows {
            let logits: Vec<f64> = xv[r * n..(r + 1) * n].iter().map(|v| v / temp).collect();
            let p = &mut probs[r * n..(r + 1) * n];
            let mask_denom = kernels::shrinkage_select(&logits, k, p, &mut active);
            for &i in &active {
                data[r * n + i as usize] = p[i as usize] / mask_denom;
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, self.requires_grad(x), Op::TopkSoftmaxSt { x, temp, n, probs }))
    }

    /// Per-row memory lookup: row `r` of `x: [rows, dim]` queries block
    /// `row_block[r]` of `items: [blocks, n_items, dim]`. Training passes
    /// per-row Gumbel noise `[rows, n_items]`; eval passes `None`.
    pub fn memory_rows(
        &mut self,
        x: Var,
        items: Var,
        row_block: &[u32],
        k: usize,
        temp: f64,
        noise: Option<&Tensor>,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let is = self.value(items).shape().to_vec();
        if xs.len() != 2 || is.len() != 3 || xs[1] != is[2] {
            return Err(SimsidError::shape("memory_rows", format!("x {xs:?}, items {is:?}")));
        }
        let (rows, dim) = (xs[0], xs[1]);
        let (n_blocks, n_items) = (is[0], is[1]);
        if row_block.len() != rows || row_block.iter().any(|&b| b as usize >= n_blocks) {
            return Err(SimsidError::arg("memory_rows", "row-to-block map out of range"));
        }
        if k == 0 || k > n_items {
            return Err(SimsidError::arg("memory_rows", format!("k={k} outside 1..={n_items}")));
        }
        if let Some(nz) = noise {
            if nz.shape() != [rows, n_items] {
                return Err(SimsidError::shape("memory_rows", format!("noise {:?}", nz.shape())));
            }
        }
        let xv = self.value(x).data();
        let iv = self.value(items).data();
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; rows * n_items];
        let mut active = vec![0u32; rows * k];
        for r in 0..rows {
            let b = row_block[r] as usize;
            kernels::mem_unit_forward(
                &xv[r * dim..(r + 1) * dim],
                &iv[b * n_items * dim..(b + 1) * n_items * dim],
                n_items,
                dim,
                k,
                temp,
                noise.map(|nz| &nz.data()[r * n_items..(r + 1) * n_items]),
                &mut probs[r * n_items..(r + 1) * n_items],
                &mut active[r * k..(r + 1) * k],
                &mut out[r * dim..(r + 1) * dim],
            );
        }
        let t = Tensor::new(vec![rows, dim], out)?;
        let requires = self.any_requires(&[x, items]);
        Ok(self.push(
            t,
            requires,
            Op::MemoryRows {
                x,
                items,
                row_block: row_block.to_vec(),
                temp,
                saved: MemUnitSaved { probs, active },
            },
        ))
    }

    /// Space-aware memory filter over a feature map. Every spatial location
    /// `(y, x)` of `x: [nb, c, h, w]` queries the block its location maps to
    /// on the `grid`; the result replaces the channel vector at that location.
    pub fn memory_map(
        &mut self,
        x: Var,
        items: Var,
        grid: (usize, usize),
        k: usize,
        temp: f64,
        noise: Option<&Tensor>,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let is = self.value(items).shape().to_vec();
        if xs.len() != 4 || is.len() != 3 || xs[1] != is[2] {
            return Err(SimsidError::shape("memory_map", format!("x {xs:?}, items {is:?}")));
        }
        let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (gh, gw) = grid;
        if gh == 0 || gw == 0 || gh > h || gw > w || is[0] != gh * gw {
            return Err(SimsidError::shape(
                "memory_map",
                format!("grid {grid:?} against map {h}x{w} with {} blocks", is[0]),
            ));
        }
        let n_items = is[1];
        if k == 0 || k > n_items {
            return Err(SimsidError::arg("memory_map", format!("k={k} outside 1..={n_items}")));
        }
        let hw = h * w;
        let units = nb * hw;
        if let Some(nz) = noise {
            if nz.shape() != [units, n_items] {
                return Err(SimsidError::shape("memory_map", format!("noise {:?}", nz.shape())));
            }
        }
        // location -> block index, shared by forward and backward
        let mut block_of_loc = vec![0u32; hw];
        for y in 0..h {
            for xw in 0..w {
                let by = y * gh / h;
                let bx = xw * gw / w;
                block_of_loc[y * w + xw] = (by * gw + bx) as u32;
            }
        }
        let xv = self.value(x).data();
        let iv = self.value(items).data();
        let zt = super::nchw_to_nlc(xv, nb, c, hw);
        let mut out_t = vec![0.0; units * c];
        let mut probs = vec![0.0; units * n_items];
        let mut active = vec![0u32; units * k];
        {
            let probs_chunks: Vec<&mut [f64]> = probs.chunks_mut(n_items).collect();
            let active_chunks: Vec<&mut [u32]> = active.chunks_mut(k).collect();
            let noise_data = noise.map(|n| n.data());
            par::for_each_chunk_mut(&mut out_t, c, |u, out_u| {
                let b = block_of_loc[u % hw] as usize;
                // disjoint per-unit save regions, rebuilt from raw pointers so
                // the closure does not capture the chunk vectors mutably
                let (p_u, a_u): (&mut [f64], &mut [u32]) = unsafe {
                    (
                        std::slice::from_raw_parts_mut(probs_chunks[u].as_ptr() as *mut f64, n_items),
                        std::slice::from_raw_parts_mut(active_chunks[u].as_ptr() as *mut u32, k),
                    )
                };
                kernels::mem_unit_forward(
                    &zt[u * c..(u + 1) * c],
                    &iv[b * n_items * c..(b + 1) * n_items * c],
                    n_items,
                    c,
                    k,
                    temp,
                    noise_data.map(|nd| &nd[u * n_items..(u + 1) * n_items]),
                    p_u,
                    a_u,
                    out_u,
                );
            });
        }
        let out = super::nlc_to_nchw(&out_t, nb, c, hw);
        let t = Tensor::new(xs, out)?;
        let requires = self.any_requires(&[x, items]);
        Ok(self.push(
            t,
            requires,
            Op::MemoryMap { x, items, block_of_loc, temp, saved: MemUnitSaved { probs, active } },
        ))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// `sum_i coeff_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| SimsidError::arg("weighted_sum", "no terms"))
    }

    /// Fully-connected layer: `x [m,k] * w [k,n] + b [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }
}
