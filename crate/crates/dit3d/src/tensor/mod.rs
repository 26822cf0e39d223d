//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation applied to its values. Calling
//! [`Tape::backward`] on a scalar loss walks the recorded graph in reverse
//! and accumulates gradients additively, so a value used twice receives the
//! sum of both contributions. Tapes are rebuilt per step; parameters live
//! outside the tape and are mounted as leaves each time.
//!
//! The same code runs in two precisions: `f64` for finite-difference
//! verification and `f32` for training and sampling.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{mm_nn, mm_nt, mm_tn};

use crate::error::{Error, Result};
use std::rc::Rc;

/// Scalar type the tape is generic over.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sin(self) -> Self {
                self.sin()
            }
            fn cos(self) -> Self {
                self.cos()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Convenience cast used for schedule coefficients and literals.
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x)
}

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Plan for splatting per-point features into a grid and sampling them back.
///
/// Built from point coordinates by the voxel module; the tape only sees the
/// resolved stencil: for each point, up to eight (cell, weight) pairs whose
/// weights sum to one. The per-cell contributor lists are kept in CSR form so
/// splatting can accumulate each cell in an order independent of the input
/// point ordering.
pub struct StencilPlan<F> {
    pub n_points: usize,
    pub n_cells: usize,
    /// Eight (cell index, weight) pairs per point; zero weights allowed.
    pub corners: Vec<[(u32, F); 8]>,
    /// CSR offsets into `cell_points`, one slot per cell plus a tail.
    pub cell_off: Vec<u32>,
    /// (point index, weight) contributors, grouped by cell.
    pub cell_points: Vec<(u32, F)>,
}

enum Op<F> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    ScaleVar {
        x: Var,
        s: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: F,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
    PermuteFlat {
        x: Var,
        perm: Rc<Vec<usize>>,
    },
    Splat {
        feat: Var,
        plan: Rc<StencilPlan<F>>,
        wsum: Vec<F>,
    },
    GatherStencil {
        grid: Var,
        plan: Rc<StencilPlan<F>>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::ScaleVar { .. } => "scale_var",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::MeanAll { .. } => "mean",
            Op::SumAll { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SelectRow { .. } => "select_row",
            Op::PermuteFlat { .. } => "permute_flat",
            Op::Splat { .. } => "splat",
            Op::GatherStencil { .. } => "gather_stencil",
        }
    }
}

struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording tape. All tensor data lives in the tape's nodes; [`Var`] handles
/// index into it.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    recording: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that stores forward values but records no backward graph.
    /// Used for inference where gradients are never requested.
    pub fn forward_only() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> Result<F> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient of the last `backward` target with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        data: Vec<F>,
        shape: Vec<usize>,
        op: Op<F>,
        needs_grad: bool,
    ) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} produced by op '{}'",
                op.name()
            )));
        }
        debug_assert_eq!(data.len(), numel(&shape));
        let keep_op = self.recording && needs_grad;
        self.nodes.push(Node {
            data,
            shape,
            op: if keep_op { op } else { Op::Leaf },
            needs_grad: keep_op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn as2d(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dim(format!("expected 2-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row vector of length `d`: accepts shape `[d]` or `[1, d]`.
    fn as_row(&self, v: Var, d: usize) -> Result<()> {
        let s = self.shape(v);
        let ok = s == [d] || s == [1, d];
        if !ok {
            return Err(Error::Dim(format!(
                "expected row vector of length {d}, got shape {s:?}"
            )));
        }
        Ok(())
    }

    // ---- leaves ----

    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>, needs_grad: bool) -> Result<Var> {
        if data.len() != numel(shape) {
            return Err(Error::Dim(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} in leaf data"
            )));
        }
        let keep = self.recording && needs_grad;
        self.nodes.push(Node {
            data,
            shape: shape.to_vec(),
            op: Op::Leaf,
            needs_grad: keep,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, x: F) -> Result<Var> {
        self.constant(&[1], vec![x])
    }

    // ---- ops ----

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.as2d(a)?;
        let (kb, n) = self.as2d(b)?;
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner dimensions differ: [{m},{ka}] x [{kb},{n}]"
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        kernels::mm_nn(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            m,
            ka,
            n,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, vec![m, n], Op::Matmul { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, shape, Op::Add { a, b }, needs)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, shape, Op::Mul { a, b }, needs)
    }

    /// Adds a length-`c` row vector to every row of `[r,c]`. The only
    /// broadcasting the tape supports, together with [`Tape::mul_row`].
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        self.as_row(row, c)?;
        let mut out = self.nodes[x.0].data.clone();
        let rv = &self.nodes[row.0].data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(out, vec![r, c], Op::AddRow { x, row }, needs)
    }

    /// Multiplies every row of `[r,c]` by a length-`c` row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        self.as_row(row, c)?;
        let xd = &self.nodes[x.0].data;
        let rv = &self.nodes[row.0].data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * rv[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(out, vec![r, c], Op::MulRow { x, row }, needs)
    }

    /// Multiplies by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out: Vec<F> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(out, shape, Op::Scale { x, c }, needs)
    }

    /// Multiplies the whole tensor by a scalar tape value (shape `[1]`).
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Dim(format!(
                "scale_var expects a scalar, got shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let out: Vec<F> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(s);
        self.push(out, shape, Op::ScaleVar { x, s }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<F> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(out, shape, Op::Gelu { x }, needs)
    }

    /// Row-wise softmax over the last axis of a 2-d tensor, with the usual
    /// max subtraction so large logits cannot overflow.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        if c == 0 {
            return Err(Error::Dim("softmax over empty rows".into()));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut m = row[0];
            for &v in row {
                m = m.maxv(v);
            }
            let mut sum = F::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        let needs = self.needs(x);
        self.push(out, vec![r, c], Op::Softmax { x }, needs)
    }

    /// Layer normalization over the last axis of `[r,c]`, with optional
    /// per-channel affine. Variance uses the biased 1/c estimator.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: F,
    ) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        if let Some(g) = gamma {
            self.as_row(g, c)?;
        }
        if let Some(b) = beta {
            self.as_row(b, c)?;
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::ZERO; r * c];
        let inv_c = F::ONE / real::<F>(c as f64);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = F::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = F::ONE / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd;
            }
        }
        if let Some(g) = gamma {
            let gd = &self.nodes[g.0].data;
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = out[i * c + j] * gd[j];
                }
            }
        }
        if let Some(b) = beta {
            let bd = &self.nodes[b.0].data;
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += bd[j];
                }
            }
        }
        let needs = self.needs(x)
            || gamma.map(|g| self.needs(g)).unwrap_or(false)
            || beta.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            out,
            vec![r, c],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::Dim(format!(
                "reshape from {:?} to {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let out = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        self.push(out, shape.to_vec(), Op::Reshape { x }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(out, vec![c, r], Op::Transpose { x }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let d = &self.nodes[x.0].data;
        if d.is_empty() {
            return Err(Error::Dim("mean of empty tensor".into()));
        }
        let mut s = F::ZERO;
        for &v in d {
            s += v;
        }
        let out = s / real::<F>(d.len() as f64);
        let needs = self.needs(x);
        self.push(vec![out], vec![1], Op::MeanAll { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let d = &self.nodes[x.0].data;
        let mut s = F::ZERO;
        for &v in d {
            s += v;
        }
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::SumAll { x }, needs)
    }

    /// Mean squared error over all entries of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mse shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut s = F::ZERO;
        for (&x, &y) in ad.iter().zip(bd) {
            let d = x - y;
            s += d * d;
        }
        let out = s / real::<F>(ad.len() as f64);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![out], vec![1], Op::Mse { a, b }, needs)
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.as2d(x)?;
        if start + len > c {
            return Err(Error::Dim(format!(
                "slice [{start}, {}) out of bounds for {c} columns",
                start + len
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::ZERO; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        self.push(out, vec![r, len], Op::SliceCols { x, start, len }, needs)
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols of zero parts".into()));
        }
        let (r, _) = self.as2d(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.as2d(p)?;
            if rp != r {
                return Err(Error::Dim(format!(
                    "concat_cols row counts differ: {r} vs {rp}"
                )));
            }
            widths.push(cp);
            total += cp;
        }
        let mut out = vec![F::ZERO; r * total];
        let mut col = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for i in 0..r {
                out[i * total + col..i * total + col + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            out,
            vec![r, total],
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Row `row` of a 2-d table as a `[1, c]` tensor.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (r, c) = self.as2d(table)?;
        if row >= r {
            return Err(Error::Dim(format!("row {row} out of bounds for {r} rows")));
        }
        let out = self.nodes[table.0].data[row * c..(row + 1) * c].to_vec();
        let needs = self.needs(table);
        self.push(out, vec![1, c], Op::SelectRow { table, row }, needs)
    }

    /// Bijective reindexing of the flat buffer: `out[i] = x[perm[i]]`.
    pub fn permute_flat(&mut self, x: Var, perm: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xd = &self.nodes[x.0].data;
        if perm.len() != xd.len() || numel(shape) != xd.len() {
            return Err(Error::Dim(format!(
                "permute of {} elements given {} indices and target shape {:?}",
                xd.len(),
                perm.len(),
                shape
            )));
        }
        let mut out = vec![F::ZERO; xd.len()];
        for (i, &src) in perm.iter().enumerate() {
            out[i] = xd[src];
        }
        let needs = self.needs(x);
        self.push(out, shape.to_vec(), Op::PermuteFlat { x, perm }, needs)
    }

    /// Splats per-point features `[n, c]` into grid cells `[cells, c]` using
    /// the plan's stencil weights, then normalizes each cell by its total
    /// received weight. Cells reached by no point are exactly zero.
    ///
    /// Contributions to a cell are summed in an order determined by their
    /// values rather than by point index, so permuting the input points
    /// leaves the output bit-identical.
    pub fn splat(&mut self, feat: Var, plan: &Rc<StencilPlan<F>>) -> Result<Var> {
        let (n, c) = self.as2d(feat)?;
        if n != plan.n_points {
            return Err(Error::Dim(format!(
                "splat plan covers {} points, features have {n} rows",
                plan.n_points
            )));
        }
        let fd = &self.nodes[feat.0].data;
        let mut out = vec![F::ZERO; plan.n_cells * c];
        let mut wsum = vec![F::ZERO; plan.n_cells];
        let mut order: Vec<usize> = Vec::new();
        for cell in 0..plan.n_cells {
            let lo = plan.cell_off[cell] as usize;
            let hi = plan.cell_off[cell + 1] as usize;
            if lo == hi {
                continue;
            }
            order.clear();
            order.extend(lo..hi);
            order.sort_unstable_by(|&ia, &ib| {
                let (pa, wa) = plan.cell_points[ia];
                let (pb, wb) = plan.cell_points[ib];
                let key = |p: u32, w: F| {
                    let base = p as usize * c;
                    (w, fd[base..base + c].to_vec())
                };
                let (ka, fa) = key(pa, wa);
                let (kb, fb) = key(pb, wb);
                ka.partial_cmp(&kb)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| fa.partial_cmp(&fb).unwrap_or(std::cmp::Ordering::Equal))
            });
            let mut ws = F::ZERO;
            for &idx in order.iter() {
                let (p, w) = plan.cell_points[idx];
                ws += w;
                let base = p as usize * c;
                for ch in 0..c {
                    out[cell * c + ch] += w * fd[base + ch];
                }
            }
            if ws > F::ZERO {
                for ch in 0..c {
                    out[cell * c + ch] = out[cell * c + ch] / ws;
                }
            } else {
                for ch in 0..c {
                    out[cell * c + ch] = F::ZERO;
                }
            }
            wsum[cell] = ws;
        }
        let needs = self.needs(feat);
        self.push(
            out,
            vec![plan.n_cells, c],
            Op::Splat {
                feat,
                plan: Rc::clone(plan),
                wsum,
            },
            needs,
        )
    }

    /// Samples grid values `[cells, c]` back at the plan's points via the
    /// same stencil weights: `out[p] = sum_k w_k * grid[cell_k]`.
    pub fn gather_stencil(&mut self, grid: Var, plan: &Rc<StencilPlan<F>>) -> Result<Var> {
        let (cells, c) = self.as2d(grid)?;
        if cells != plan.n_cells {
            return Err(Error::Dim(format!(
                "gather plan covers {} cells, grid has {cells} rows",
                plan.n_cells
            )));
        }
        let gd = &self.nodes[grid.0].data;
        let mut out = vec![F::ZERO; plan.n_points * c];
        for (p, corners) in plan.corners.iter().enumerate() {
            for &(cell, w) in corners {
                if w == F::ZERO {
                    continue;
                }
                let base = cell as usize * c;
                for ch in 0..c {
                    out[p * c + ch] += w * gd[base + ch];
                }
            }
        }
        let needs = self.needs(grid);
        self.push(
            out,
            vec![plan.n_points, c],
            Op::GatherStencil {
                grid,
                plan: Rc::clone(plan),
            },
            needs,
        )
    }

    // ---- backward ----

    /// Accumulates gradients of a scalar `loss` into every recorded node that
    /// requires them. Gradients from multiple uses of a value add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract(
                "backward called on a forward-only tape".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![F::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[F]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[F]) -> Result<()> {
        // Ops are moved out so `self` can be borrowed mutably; put back after.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.as2d(*a)?;
                let (_, n) = self.as2d(*b)?;
                if self.needs(*a) {
                    let mut da = vec![F::ZERO; m * k];
                    kernels::mm_nt(g, &self.nodes[b.0].data, &mut da, m, n, k);
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::ZERO; k * n];
                    kernels::mm_tn(&self.nodes[a.0].data, g, &mut db, m, k, n);
                    self.accum(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gi, &bv)| gi * bv)
                        .collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gi, &av)| gi * av)
                        .collect();
                    self.accum(*b, &db);
                }
            }
            Op::AddRow { x, row } => {
                let (r, c) = self.as2d(*x)?;
                self.accum(*x, g);
                if self.needs(*row) {
                    let mut dr = vec![F::ZERO; c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += g[i * c + j];
                        }
                    }
                    self.accum(*row, &dr);
                }
            }
            Op::MulRow { x, row } => {
                let (r, c) = self.as2d(*x)?;
                if self.needs(*x) {
                    let rv = &self.nodes[row.0].data;
                    let mut dx = vec![F::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] * rv[j];
                        }
                    }
                    self.accum(*x, &dx);
                }
                if self.needs(*row) {
                    let xd = &self.nodes[x.0].data;
                    let mut dr = vec![F::ZERO; c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += g[i * c + j] * xd[i * c + j];
                        }
                    }
                    self.accum(*row, &dr);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = g.iter().map(|&gi| gi * *c).collect();
                self.accum(*x, &dx);
            }
            Op::ScaleVar { x, s } => {
                let sv = self.nodes[s.0].data[0];
                if self.needs(*x) {
                    let dx: Vec<F> = g.iter().map(|&gi| gi * sv).collect();
                    self.accum(*x, &dx);
                }
                if self.needs(*s) {
                    let xd = &self.nodes[x.0].data;
                    let mut ds = F::ZERO;
                    for (&gi, &xv) in g.iter().zip(xd) {
                        ds += gi * xv;
                    }
                    self.accum(*s, &[ds]);
                }
            }
            Op::Gelu { x } => {
                let xd = &self.nodes[x.0].data;
                let dx: Vec<F> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gi, &xv)| gi * gelu_bwd(xv))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Softmax { x } => {
                let (r, c) = self.as2d(*x)?;
                let yd = &self.nodes[id].data;
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    let y = &yd[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let mut dot = F::ZERO;
                    for j in 0..c {
                        dot += gy[j] * y[j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accum(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (r, c) = self.as2d(*x)?;
                let xd = self.nodes[x.0].data.clone();
                let inv_c = F::ONE / real::<F>(c as f64);
                let gd: Option<Vec<F>> = gamma.map(|gv| self.nodes[gv.0].data.clone());
                let mut dx = vec![F::ZERO; r * c];
                let mut dgamma = vec![F::ZERO; c];
                let mut dbeta = vec![F::ZERO; c];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let mut mean = F::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_c;
                    let mut var = F::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_c;
                    let rstd = F::ONE / (var + *eps).sqrt();
                    let gy = &g[i * c..(i + 1) * c];
                    let mut mean_dxh = F::ZERO;
                    let mut mean_dxh_xh = F::ZERO;
                    for j in 0..c {
                        let xh = (row[j] - mean) * rstd;
                        let dxh = match &gd {
                            Some(gamma) => gy[j] * gamma[j],
                            None => gy[j],
                        };
                        dgamma[j] += gy[j] * xh;
                        dbeta[j] += gy[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh = mean_dxh * inv_c;
                    mean_dxh_xh = mean_dxh_xh * inv_c;
                    for j in 0..c {
                        let xh = (row[j] - mean) * rstd;
                        let dxh = match &gd {
                            Some(gamma) => gy[j] * gamma[j],
                            None => gy[j],
                        };
                        dx[i * c + j] = rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                self.accum(*x, &dx);
                if let Some(gv) = gamma {
                    self.accum(*gv, &dgamma);
                }
                if let Some(bv) = beta {
                    self.accum(*bv, &dbeta);
                }
            }
            Op::Reshape { x } => {
                self.accum(*x, g);
            }
            Op::Transpose { x } => {
                let (r, c) = self.as2d(*x)?;
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].data.len();
                let gi = g[0] / real::<F>(n as f64);
                let dx = vec![gi; n];
                self.accum(*x, &dx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![g[0]; n];
                self.accum(*x, &dx);
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].data.len();
                let scale = real::<F>(2.0) * g[0] / real::<F>(n as f64);
                if self.needs(*a) {
                    let da: Vec<F> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&x, &y)| scale * (x - y))
                        .collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&x, &y)| -(scale * (x - y)))
                        .collect();
                    self.accum(*b, &db);
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.as2d(*x)?;
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        dx[i * c + start + j] = g[i * len + j];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|&p| self.nodes[p.0].shape[1]).sum();
                let r = self.nodes[parts[0].0].shape[0];
                let mut col = 0usize;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.needs(p) {
                        let mut dp = vec![F::ZERO; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        self.accum(p, &dp);
                    }
                    col += w;
                }
            }
            Op::SelectRow { table, row } => {
                let (r, c) = self.as2d(*table)?;
                let mut dt = vec![F::ZERO; r * c];
                dt[row * c..(row + 1) * c].copy_from_slice(g);
                self.accum(*table, &dt);
            }
            Op::PermuteFlat { x, perm } => {
                let mut dx = vec![F::ZERO; perm.len()];
                for (i, &src) in perm.iter().enumerate() {
                    dx[src] += g[i];
                }
                self.accum(*x, &dx);
            }
            Op::Splat { feat, plan, wsum } => {
                let c = self.nodes[feat.0].shape[1];
                let mut df = vec![F::ZERO; plan.n_points * c];
                for (p, corners) in plan.corners.iter().enumerate() {
                    for &(cell, w) in corners {
                        let ws = wsum[cell as usize];
                        if w == F::ZERO || !(ws > F::ZERO) {
                            continue;
                        }
                        let frac = w / ws;
                        let base = cell as usize * c;
                        for ch in 0..c {
                            df[p * c + ch] += frac * g[base + ch];
                        }
                    }
                }
                self.accum(*feat, &df);
            }
            Op::GatherStencil { grid, plan } => {
                let c = self.nodes[grid.0].shape[1];
                let mut dg = vec![F::ZERO; plan.n_cells * c];
                for (p, corners) in plan.corners.iter().enumerate() {
                    for &(cell, w) in corners {
                        if w == F::ZERO {
                            continue;
                        }
                        let base = cell as usize * c;
                        for ch in 0..c {
                            dg[base + ch] += w * g[p * c + ch];
                        }
                    }
                }
                self.accum(*grid, &dg);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<F: Real>(x: F) -> F {
    let c = real::<F>(GELU_C);
    let a = real::<F>(GELU_A);
    let half = real::<F>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_bwd<F: Real>(x: F) -> F {
    let c = real::<F>(GELU_C);
    let a = real::<F>(GELU_A);
    let half = real::<F>(0.5);
    let three = real::<F>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::ONE + three * a * x * x);
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * du
}
