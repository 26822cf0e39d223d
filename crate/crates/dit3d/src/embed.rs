//! Token embeddings: patch extraction from the voxel grid, the fixed
//! sin-cos positional table, sinusoidal timestep features, and label
//! dropout for classifier-free guidance.
//!
//! A `V^3 x C` grid splits into `L = (V/p)^3` non-overlapping cubic patches.
//! Patches are indexed in raster order (x slowest, z fastest), and entries
//! within a patch keep the same axis order with the channel fastest, so both
//! directions are pure index permutations.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};
use rand::Rng;
use std::rc::Rc;

/// Number of patch tokens for a `V^3` grid with patch size `p`.
pub fn token_count(v: usize, p: usize) -> Result<usize> {
    if p == 0 || v % p != 0 {
        return Err(Error::Config(format!(
            "patch size {p} does not divide voxel resolution {v}"
        )));
    }
    let g = v / p;
    Ok(g * g * g)
}

/// Flat source index for every entry of the patchified layout.
///
/// `perm[token*row + j] = grid_flat_index`, with `row = c * p^3`.
pub fn patchify_perm(v: usize, p: usize, c: usize) -> Result<Rc<Vec<usize>>> {
    let l = token_count(v, p)?;
    let g = v / p;
    let row = c * p * p * p;
    let mut perm = Vec::with_capacity(l * row);
    for pi in 0..l {
        let px = pi / (g * g);
        let py = pi / g % g;
        let pz = pi % g;
        for dx in 0..p {
            for dy in 0..p {
                for dz in 0..p {
                    let cell = ((px * p + dx) * v + (py * p + dy)) * v + (pz * p + dz);
                    for ch in 0..c {
                        perm.push(cell * c + ch);
                    }
                }
            }
        }
    }
    Ok(Rc::new(perm))
}

/// Inverse of [`patchify_perm`]: maps each grid-flat entry back to its
/// position in the token layout.
pub fn unpatchify_perm(v: usize, p: usize, c: usize) -> Result<Rc<Vec<usize>>> {
    let fwd = patchify_perm(v, p, c)?;
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    Ok(Rc::new(inv))
}

/// Rearranges a `[V^3, c]` grid into patch rows `[L, c*p^3]`.
pub fn patchify<F: Real>(tape: &mut Tape<F>, grid: Var, v: usize, p: usize) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 2 || shape[0] != v * v * v {
        return Err(Error::Dim(format!(
            "patchify expects [{}, c] grid, got {:?}",
            v * v * v,
            shape
        )));
    }
    let c = shape[1];
    let l = token_count(v, p)?;
    let perm = patchify_perm(v, p, c)?;
    tape.permute_flat(grid, perm, &[l, c * p * p * p])
}

/// Rearranges patch rows `[L, c*p^3]` back into the `[V^3, c]` grid.
pub fn unpatchify<F: Real>(tape: &mut Tape<F>, tokens: Var, v: usize, p: usize) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let l = token_count(v, p)?;
    if shape.len() != 2 || shape[0] != l || shape[1] % (p * p * p) != 0 {
        return Err(Error::Dim(format!(
            "unpatchify expects [{l}, c*{}] tokens, got {:?}",
            p * p * p,
            shape
        )));
    }
    let c = shape[1] / (p * p * p);
    let perm = unpatchify_perm(v, p, c)?;
    tape.permute_flat(tokens, perm, &[v * v * v, c])
}

/// Fixed 3-axis sin-cos positional table `[L, d]`, row-major.
///
/// Each axis gets `d/3` channels: `d/6` geometric frequencies with base
/// 10000, sine block then cosine block, evaluated at the token's patch-grid
/// coordinate along that axis. Channel order is x block, y block, z block.
pub fn pos_embed_3d(v: usize, p: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::Config(format!(
            "positional width {d} is not divisible by 6"
        )));
    }
    let l = token_count(v, p)?;
    let g = v / p;
    let per_axis = d / 3;
    let half = d / 6;
    let freqs: Vec<f64> = (0..half)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / half as f64))
        .collect();
    let mut table = vec![0.0; l * d];
    for pi in 0..l {
        let coords = [pi / (g * g), pi / g % g, pi % g];
        for (ax, &m) in coords.iter().enumerate() {
            let base = pi * d + ax * per_axis;
            for (k, &f) in freqs.iter().enumerate() {
                let arg = m as f64 * f;
                table[base + k] = arg.sin();
                table[base + half + k] = arg.cos();
            }
        }
    }
    Ok(table)
}

/// Positional table for an arbitrary width: the leading largest multiple of
/// six is the sin-cos table, any trailing channels stay zero.
pub fn pos_embed_padded(v: usize, p: usize, d: usize) -> Result<Vec<f64>> {
    let d6 = d / 6 * 6;
    if d6 == 0 {
        return Err(Error::Config(format!("positional width {d} is below 6")));
    }
    if d6 == d {
        return pos_embed_3d(v, p, d);
    }
    let inner = pos_embed_3d(v, p, d6)?;
    let l = token_count(v, p)?;
    let mut table = vec![0.0; l * d];
    for i in 0..l {
        table[i * d..i * d + d6].copy_from_slice(&inner[i * d6..(i + 1) * d6]);
    }
    Ok(table)
}

/// Sinusoidal features of a scalar timestep, width `d` (even): `d/2`
/// geometric frequencies with base 10000, cosine block then sine block.
pub fn timestep_base(t: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!("timestep width {d} is not even")));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let f = 1.0 / 10000f64.powf(k as f64 / half as f64);
        let arg = t as f64 * f;
        out[k] = arg.cos();
        out[half + k] = arg.sin();
    }
    Ok(out)
}

/// Resolves a label to its embedding-table row, applying classifier-free
/// label dropout. `None` and dropped labels map to the null row `m`.
pub fn dropout_label<R: Rng>(
    y: Option<usize>,
    m: usize,
    p_drop: f64,
    rng: &mut R,
) -> Result<usize> {
    match y {
        None => Ok(m),
        Some(label) => {
            if label >= m {
                return Err(Error::Contract(format!(
                    "label {label} out of range for {m} classes"
                )));
            }
            if p_drop > 0.0 && rng.gen::<f64>() < p_drop {
                Ok(m)
            } else {
                Ok(label)
            }
        }
    }
}
