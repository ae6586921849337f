//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Node ids are assigned in creation order, so the
//! tape is already topologically sorted and the backward sweep is a single
//! reverse pass. A tape lives for one forward/backward evaluation and is
//! then dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Axis, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowBias(usize, usize),
    Softmax(usize),
    LayerNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Concat(Vec<usize>),
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    TopkMean {
        input: usize,
        indices: Vec<usize>,
    },
    AxisMax {
        input: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    AvgPool2 {
        input: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        input: usize,
        h: usize,
        w: usize,
    },
    Compose {
        base: usize,
        regions: Vec<usize>,
        weights: Vec<Vec<f64>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Softmax(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { input, .. }
            | Op::SliceCols { input, .. }
            | Op::Gather { input, .. }
            | Op::TopkMean { input, .. }
            | Op::AxisMax { input, .. }
            | Op::AvgPool2 { input, .. }
            | Op::Upsample2 { input, .. } => vec![*input],
            Op::ConcatCols(ids) | Op::Concat(ids) => ids.clone(),
            Op::Compose { base, regions, .. } => {
                let mut v = vec![*base];
                v.extend(regions);
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recording of differentiable operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Lineage(format!(
                "variable {} does not belong to tape {}",
                v.id, self.id
            )));
        }
        Ok(v.id)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable from another tape");
        self.val(i)
    }

    /// Registers an input (or constant) tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = tensor::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(Op::MatMul(ia, ib), v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = tensor::transpose(self.val(ia))?;
        Ok(self.push(Op::Transpose(ia), v))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia).reshape(shape)?;
        Ok(self.push(Op::Reshape(ia), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.val(ia).add(self.val(ib))?;
        Ok(self.push(Op::Add(ia, ib), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.val(ia).sub(self.val(ib))?;
        Ok(self.push(Op::Sub(ia, ib), v))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.val(ia).hadamard(self.val(ib))?;
        Ok(self.push(Op::Mul(ia, ib), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia).scale(c);
        Ok(self.push(Op::Scale(ia, c), v))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.val(ia).map(|x| x + c);
        Ok(self.push(Op::AddScalar(ia), v))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (m, n) = self.val(ia).dims2()?;
        let b = self.val(ib);
        if b.numel() != n {
            return Err(Error::Dimension(format!(
                "row bias of {} entries for {m}x{n} input",
                b.numel()
            )));
        }
        let mut data = self.val(ia).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRowBias(ia, ib), Tensor::from_parts(vec![m, n], data)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Softmax per row over `permitted` entries only (see
    /// [`tensor::masked_softmax_rows`]).
    pub fn masked_softmax_rows(&mut self, a: Var, permitted: Option<&[bool]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = tensor::masked_softmax_rows(self.val(ia), permitted)?;
        Ok(self.push(Op::Softmax(ia), v))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let (m, n) = x.dims2()?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in x.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[i * n + j] = (v - mean) * r;
            }
            inv_std.push(r);
        }
        Ok(self.push(
            Op::LayerNorm { input: ia, inv_std },
            Tensor::from_parts(vec![m, n], out),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let (m, n) = x.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Argument(format!(
                "column slice {start}..{} of {n} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in x.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(
            Op::SliceCols { input: ia, start },
            Tensor::from_parts(vec![m, len], out),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::Argument("concat of zero tensors".into()));
        };
        let (m, _) = self.val(first).dims2()?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (mi, ni) = self.val(i).dims2()?;
            if mi != m {
                return Err(Error::Dimension(format!("concat rows {mi} vs {m}")));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &ni) in ids.iter().zip(&widths) {
                out.extend_from_slice(&self.val(i).data()[r * ni..(r + 1) * ni]);
            }
        }
        Ok(self.push(Op::ConcatCols(ids), Tensor::from_parts(vec![m, total], out)))
    }

    /// Flattens and concatenates into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| self.val(i).data().iter().copied())
            .collect();
        let n = out.len();
        Ok(self.push(Op::Concat(ids), Tensor::from_parts(vec![n], out)))
    }

    /// Picks elements by flat index into a vector.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        if indices.is_empty() {
            return Err(Error::Argument("gather of zero indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Argument(format!(
                "gather index {bad} out of {} elements",
                x.numel()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        let n = out.len();
        Ok(self.push(
            Op::Gather { input: ia, indices },
            Tensor::from_parts(vec![n], out),
        ))
    }

    /// Mean of the `k` largest elements; the subgradient reaches only the
    /// selected entries.
    pub fn topk_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let indices = tensor::topk_indices(x, k)?;
        let mean = indices.iter().map(|&i| x.data()[i]).sum::<f64>() / k as f64;
        Ok(self.push(Op::TopkMean { input: ia, indices }, Tensor::scalar(mean)))
    }

    pub fn axis_max(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.idx(a)?;
        let (v, argmax) = tensor::axis_max_with_argmax(self.val(ia), axis)?;
        Ok(self.push(Op::AxisMax { input: ia, argmax }, v))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s)))
    }

    /// 2x2 average pooling of an `(h*w) x c` pixel-major feature matrix.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let (p, c) = x.dims2()?;
        if p != h * w || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "avg-pool of {p} pixels on a {h}x{w} grid"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                let o = (i * wo + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[o + ch] += x.data()[src + ch];
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= 0.25;
                }
            }
        }
        Ok(self.push(
            Op::AvgPool2 { input: ia, h, w },
            Tensor::from_parts(vec![ho * wo, c], out),
        ))
    }

    /// Nearest-neighbour 2x upsampling of an `(h*w) x c` feature matrix.
    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = self.val(ia);
        let (p, c) = x.dims2()?;
        if p != h * w {
            return Err(Error::Dimension(format!(
                "upsample of {p} pixels on a {h}x{w} grid"
            )));
        }
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(ho * wo * c);
        for i in 0..ho {
            for j in 0..wo {
                let src = ((i / 2) * w + j / 2) * c;
                out.extend_from_slice(&x.data()[src..src + c]);
            }
        }
        Ok(self.push(
            Op::Upsample2 { input: ia, h, w },
            Tensor::from_parts(vec![ho * wo, c], out),
        ))
    }

    /// Per-pixel merge of regional hidden states (see
    /// [`crate::attention::compose_hidden`]).
    pub fn compose(&mut self, base: Var, regional: &[(Var, &[bool])]) -> Result<Var> {
        let ib = self.idx(base)?;
        let (p, c) = self.val(ib).dims2()?;
        let mut regions = Vec::with_capacity(regional.len());
        for (v, mask) in regional {
            let i = self.idx(*v)?;
            if self.val(i).shape() != [p, c] || mask.len() != p {
                return Err(Error::Dimension(format!(
                    "regional hidden {:?} / mask {} vs base {p}x{c}",
                    self.val(i).shape(),
                    mask.len()
                )));
            }
            regions.push(i);
        }
        let cover: Vec<usize> = (0..p)
            .map(|px| regional.iter().filter(|(_, m)| m[px]).count())
            .collect();
        let weights: Vec<Vec<f64>> = regional
            .iter()
            .map(|(_, m)| {
                (0..p)
                    .map(|px| if m[px] { 1.0 / cover[px] as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut out = self.val(ib).data().to_vec();
        for px in 0..p {
            if cover[px] == 0 {
                continue;
            }
            for ch in 0..c {
                let mut s = 0.0;
                for (&r, (_, m)) in regions.iter().zip(regional) {
                    if m[px] {
                        s += self.val(r).data()[px * c + ch];
                    }
                }
                out[px * c + ch] = s / cover[px] as f64;
            }
        }
        Ok(self.push(
            Op::Compose {
                base: ib,
                regions,
                weights,
            },
            Tensor::from_parts(vec![p, c], out),
        ))
    }

    /// Exact gradient of the scalar `root` with respect to `wrt`.
    ///
    /// Only nodes downstream of `wrt` are visited, each once, in reverse
    /// creation order. A root that does not depend on `wrt` yields zeros.
    pub fn grad(&self, root: Var, wrt: Var) -> Result<Tensor> {
        let r = self.idx(root)?;
        let w = self.idx(wrt)?;
        if self.val(r).numel() != 1 {
            return Err(Error::Shape(format!(
                "gradient root must be scalar, got shape {:?}",
                self.val(r).shape()
            )));
        }
        let wrt_shape = self.val(w).shape().to_vec();
        if w > r {
            return Ok(Tensor::zeros(&wrt_shape));
        }
        let mut depends = vec![false; r + 1];
        depends[w] = true;
        for i in w + 1..=r {
            depends[i] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .any(|&j| j >= w && depends[j]);
        }
        if !depends[r] {
            return Ok(Tensor::zeros(&wrt_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; r + 1];
        grads[r] = Some(Tensor::scalar(1.0).reshape(self.val(r).shape())?);
        for i in (w..=r).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if i == w {
                return Ok(g);
            }
            self.backward_node(i, &g, &depends, &mut grads)?;
        }
        Ok(Tensor::zeros(&wrt_shape))
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        depends: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |j: usize, contrib: Tensor| -> Result<()> {
            if !depends[j] {
                return Ok(());
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if depends[*a] {
                    let bt = tensor::transpose(self.val(*b))?;
                    acc(*a, tensor::matmul(g, &bt)?)?;
                }
                if depends[*b] {
                    let at = tensor::transpose(self.val(*a))?;
                    acc(*b, tensor::matmul(&at, g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, tensor::transpose(g)?)?,
            Op::Reshape(a) => acc(*a, g.reshape(self.val(*a).shape())?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if depends[*a] {
                    acc(*a, g.hadamard(self.val(*b))?)?;
                }
                if depends[*b] {
                    acc(*b, g.hadamard(self.val(*a))?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone())?;
                if depends[*b] {
                    let (_, n) = g.dims2()?;
                    let mut col = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (c, v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(self.val(*b).shape().to_vec(), col))?;
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*a, Tensor::from_parts(vec![m, n], dx))?;
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                let (m, n) = y.dims2()?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let g_mean = gs.iter().sum::<f64>() / n as f64;
                    let gy_mean = ys.iter().zip(gs).map(|(y, g)| y * g).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv_std[r] * (gs[j] - g_mean - ys[j] * gy_mean);
                    }
                }
                acc(*input, Tensor::from_parts(vec![m, n], dx))?;
            }
            Op::SliceCols { input, start } => {
                let (m, n) = self.val(*input).dims2()?;
                let (_, len) = g.dims2()?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*input, Tensor::from_parts(vec![m, n], dx))?;
            }
            Op::ConcatCols(ids) => {
                let (m, total) = g.dims2()?;
                let mut offset = 0;
                for &j in ids {
                    let (_, nj) = self.val(j).dims2()?;
                    if depends[j] {
                        let mut part = Vec::with_capacity(m * nj);
                        for r in 0..m {
                            part.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + nj],
                            );
                        }
                        acc(j, Tensor::from_parts(vec![m, nj], part))?;
                    }
                    offset += nj;
                }
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for &j in ids {
                    let nj = self.val(j).numel();
                    if depends[j] {
                        acc(
                            j,
                            Tensor::from_parts(
                                self.val(j).shape().to_vec(),
                                g.data()[offset..offset + nj].to_vec(),
                            ),
                        )?;
                    }
                    offset += nj;
                }
            }
            Op::Gather { input, indices } => {
                let mut dx = Tensor::zeros(self.val(*input).shape());
                for (k, &idx) in indices.iter().enumerate() {
                    dx.data_mut()[idx] += g.data()[k];
                }
                acc(*input, dx)?;
            }
            Op::TopkMean { input, indices } => {
                let mut dx = Tensor::zeros(self.val(*input).shape());
                let share = g.data()[0] / indices.len() as f64;
                for &idx in indices {
                    dx.data_mut()[idx] += share;
                }
                acc(*input, dx)?;
            }
            Op::AxisMax { input, argmax } => {
                let mut dx = Tensor::zeros(self.val(*input).shape());
                for (k, &idx) in argmax.iter().enumerate() {
                    dx.data_mut()[idx] += g.data()[k];
                }
                acc(*input, dx)?;
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.val(*a).shape(), g.data()[0]))?,
            Op::AvgPool2 { input, h, w } => {
                let (_, c) = g.dims2()?;
                let wo = w / 2;
                let mut dx = vec![0.0; h * w * c];
                for i in 0..*h {
                    for j in 0..*w {
                        let src = ((i / 2) * wo + j / 2) * c;
                        for ch in 0..c {
                            dx[(i * w + j) * c + ch] = 0.25 * g.data()[src + ch];
                        }
                    }
                }
                acc(*input, Tensor::from_parts(vec![h * w, c], dx))?;
            }
            Op::Upsample2 { input, h, w } => {
                let (_, c) = g.dims2()?;
                let wo = 2 * w;
                let mut dx = vec![0.0; h * w * c];
                for i in 0..2 * h {
                    for j in 0..wo {
                        let dst = ((i / 2) * w + j / 2) * c;
                        for ch in 0..c {
                            dx[dst + ch] += g.data()[(i * wo + j) * c + ch];
                        }
                    }
                }
                acc(*input, Tensor::from_parts(vec![h * w, c], dx))?;
            }
            Op::Compose {
                base,
                regions,
                weights,
            } => {
                let (p, c) = g.dims2()?;
                if depends[*base] {
                    let mut db = g.clone();
                    for px in 0..p {
                        if weights.iter().any(|wv| wv[px] != 0.0) {
                            db.data_mut()[px * c..(px + 1) * c].fill(0.0);
                        }
                    }
                    acc(*base, db)?;
                }
                for (&r, wv) in regions.iter().zip(weights) {
                    if !depends[r] {
                        continue;
                    }
                    let mut dr = g.clone();
                    for (chunk, &m) in dr.data_mut().chunks_mut(c).zip(wv.iter()) {
                        for v in chunk {
                            *v *= m;
                        }
                    }
                    acc(r, dr)?;
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient estimate `(f(x+εe) − f(x−εe)) / 2ε`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * eps);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Largest elementwise relative discrepancy between two gradients.
///
/// Each element's error is `|a − b| / max(|a|, |b|, floor)` where `floor`
/// is `1e-3` times the largest magnitude in `b`; entries that are tiny
/// relative to the gradient as a whole are judged on that common scale.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    max_relative_error_scaled(analytic, numeric, numeric.max_abs())
}

/// [`max_relative_error`] with the floor taken from an explicit gradient
/// magnitude, for comparisons over a subset of coordinates.
pub fn max_relative_error_scaled(analytic: &Tensor, numeric: &Tensor, scale: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
