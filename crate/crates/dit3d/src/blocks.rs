//! Transformer blocks: multi-head self-attention, windowed key/value
//! reduction, and residual blocks conditioned through adaptive layer norm.
//!
//! A block leaves its input untouched when the modulation head is
//! zero-initialized: both residual gates are zero, so training starts from
//! the identity and opens the gates gradually.

use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tape, Var};

pub const LN_EPS: f64 = 1e-6;

/// Weight and bias handles for one affine layer, `y = x W + b`, with an
/// optional scalar output scale (`y · γ`) used by parameter-efficient
/// fine-tuning; at γ = 1 the scaled output is bit-identical to the unscaled.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Option<Var>,
}

impl AffineVars {
    pub fn plain(w: Var, b: Var) -> Self {
        AffineVars { w, b, gamma: None }
    }
}

pub fn affine<F: Real>(tape: &mut Tape<F>, x: Var, a: &AffineVars) -> Result<Var> {
    let xw = tape.matmul(x, a.w)?;
    let out = tape.add_row(xw, a.b)?;
    match a.gamma {
        Some(g) => tape.scale_var(out, g),
        None => Ok(out),
    }
}

/// Key/value reduction for window attention: groups of `r³` consecutive
/// tokens are flattened and projected back to width D.
#[derive(Debug, Clone, Copy)]
pub struct ReduceVars {
    pub r: usize,
    pub k: AffineVars,
    pub v: AffineVars,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub qkv: AffineVars,
    pub proj: AffineVars,
    pub reduce: Option<ReduceVars>,
}

/// Captures intermediate attention tensors for shape and row-sum checks.
#[derive(Debug, Default)]
pub struct AttnProbe {
    pub scores: Vec<Var>,
    pub softmax: Vec<Var>,
}

pub fn attention<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    attention_probed(tape, x, vars, heads, None)
}

pub fn attention_probed<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    vars: &AttentionVars,
    heads: usize,
    mut probe: Option<&mut AttnProbe>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dim(format!(
            "attention input must be rank 2, got {shape:?}"
        )));
    }
    let (l, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dim(format!(
            "width {d} not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let qkv = affine(tape, x, &vars.qkv)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let mut k = tape.slice_cols(qkv, d, d)?;
    let mut v = tape.slice_cols(qkv, 2 * d, d)?;
    if let Some(red) = &vars.reduce {
        let r3 = red.r * red.r * red.r;
        if r3 == 0 || l % r3 != 0 {
            return Err(Error::Config(format!(
                "sequence length {l} not divisible by window volume {r3}"
            )));
        }
        let kg = tape.reshape(k, &[l / r3, d * r3])?;
        k = affine(tape, kg, &red.k)?;
        let vg = tape.reshape(v, &[l / r3, d * r3])?;
        v = affine(tape, vg, &red.v)?;
    }
    let inv_sqrt_dh = real::<F>(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, inv_sqrt_dh)?;
        if let Some(p) = probe.as_deref_mut() {
            p.scores.push(scores);
        }
        let attn = tape.softmax(scores)?;
        if let Some(p) = probe.as_deref_mut() {
            p.softmax.push(attn);
        }
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    affine(tape, cat, &vars.proj)
}

/// `h·(1+c)+s` with shift/scale rows broadcast over token rows.
pub fn modulate<F: Real>(tape: &mut Tape<F>, h: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = tape.mul_row(h, scale)?;
    let sum = tape.add(h, scaled)?;
    tape.add_row(sum, shift)
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn: AttentionVars,
    pub fc1: AffineVars,
    pub fc2: AffineVars,
    /// Produces the six modulation rows (shift, scale, gate for each of the
    /// two residual branches) from the conditioning vector.
    pub modulation: AffineVars,
}

pub fn dit_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    cond: Var,
    vars: &BlockVars,
    heads: usize,
) -> Result<Var> {
    dit_block_probed(tape, x, cond, vars, heads, None)
}

pub fn dit_block_probed<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    cond: Var,
    vars: &BlockVars,
    heads: usize,
    probe: Option<&mut AttnProbe>,
) -> Result<Var> {
    let d = {
        let s = tape.shape(x);
        if s.len() != 2 {
            return Err(Error::Dim(format!("block input must be rank 2, got {s:?}")));
        }
        s[1]
    };
    let eps = real::<F>(LN_EPS);
    let act = tape.gelu(cond)?;
    let m = affine(tape, act, &vars.modulation)?;
    if tape.shape(m) != [1, 6 * d] {
        return Err(Error::Dim(format!(
            "modulation head produced {:?}, expected [1, {}]",
            tape.shape(m),
            6 * d
        )));
    }
    let shift1 = tape.slice_cols(m, 0, d)?;
    let scale1 = tape.slice_cols(m, d, d)?;
    let gate1 = tape.slice_cols(m, 2 * d, d)?;
    let shift2 = tape.slice_cols(m, 3 * d, d)?;
    let scale2 = tape.slice_cols(m, 4 * d, d)?;
    let gate2 = tape.slice_cols(m, 5 * d, d)?;

    let n1 = tape.layer_norm(x, None, None, eps)?;
    let h1 = modulate(tape, n1, shift1, scale1)?;
    let a = attention_probed(tape, h1, &vars.attn, heads, probe)?;
    let a_gated = tape.mul_row(a, gate1)?;
    let x1 = tape.add(x, a_gated)?;

    let n2 = tape.layer_norm(x1, None, None, eps)?;
    let h2 = modulate(tape, n2, shift2, scale2)?;
    let f1 = affine(tape, h2, &vars.fc1)?;
    let f1a = tape.gelu(f1)?;
    let f2 = affine(tape, f1a, &vars.fc2)?;
    let f_gated = tape.mul_row(f2, gate2)?;
    tape.add(x1, f_gated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    pub score_elements: u64,
    pub flops_estimate: u64,
}

/// Analytic cost of one attention call: `score_elements` is H·L·L_k where
/// L_k is L for global attention and L/R³ for window attention;
/// `flops_estimate` counts multiply-adds (as 2 flops) for the projections,
/// score and value matmuls, and any window reduction affines.
pub fn attention_cost(l: usize, d: usize, heads: usize, r: Option<usize>) -> AttentionCost {
    let (l, d, heads) = (l as u64, d as u64, heads as u64);
    let lk = match r {
        Some(r) => {
            let r3 = (r * r * r) as u64;
            l / r3.max(1)
        }
        None => l,
    };
    let qkv = 2 * l * d * 3 * d;
    let proj = 2 * l * d * d;
    let scores = 2 * heads * l * lk * (d / heads.max(1));
    let av = scores;
    let reduce = if r.is_some() {
        2 * 2 * lk * (d * (l / lk.max(1))) * d
    } else {
        0
    };
    AttentionCost {
        score_elements: heads * l * lk,
        flops_estimate: qkv + proj + scores + av + reduce,
    }
}
