//! Trilinear voxelization of point clouds and the matching devoxelization.
//!
//! Points live in the normalized cube [-1,1]^3. A point maps to continuous
//! grid coordinates `g = (x+1)/2 * (V-1)` and distributes its features over
//! the eight surrounding cells with trilinear weights; cells divide by their
//! accumulated weight, and untouched cells stay exactly zero. Devoxelization
//! samples a grid back at the same stencil, so the two directions share one
//! [`StencilPlan`]. Gradients flow through the splatted feature values only;
//! the stencil geometry is a constant of the plan.

use crate::error::{Error, Result};
use crate::tensor::{real, Real, StencilPlan, Tape, Var};
use std::rc::Rc;

/// How to treat coordinates outside [-1,1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordPolicy {
    /// Reject the cloud. Used when ingesting training data.
    Strict,
    /// Clamp for addressing only, leaving the feature values untouched.
    /// Used while sampling, where intermediate states wander out of range.
    Clamp,
}

/// Builds the shared splat/gather stencil for a point cloud on a `V^3` grid.
///
/// Grid rows are laid out with x slowest and z fastest: cell `(ix,iy,iz)`
/// is row `(ix*V + iy)*V + iz` of the `[V^3, C]` value matrix.
pub fn build_plan<F: Real>(
    points: &[[F; 3]],
    v: usize,
    policy: CoordPolicy,
) -> Result<Rc<StencilPlan<F>>> {
    if v < 2 {
        return Err(Error::Config(format!("voxel resolution {v} is below 2")));
    }
    if points.is_empty() {
        return Err(Error::Contract(
            "cannot build a stencil for an empty cloud".into(),
        ));
    }
    let n = points.len();
    let scale = real::<F>((v - 1) as f64 / 2.0);
    let one = F::ONE;
    let mut corners = Vec::with_capacity(n);
    for (pi, p) in points.iter().enumerate() {
        let mut i0 = [0usize; 3];
        let mut frac = [F::ZERO; 3];
        for ax in 0..3 {
            let mut x = p[ax];
            if !x.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite coordinate in point {pi}"
                )));
            }
            if x < -F::ONE || x > F::ONE {
                match policy {
                    CoordPolicy::Strict => {
                        return Err(Error::Contract(format!(
                            "point {pi} coordinate {} outside [-1,1]",
                            x
                        )))
                    }
                    CoordPolicy::Clamp => {
                        x = if x < -F::ONE { -F::ONE } else { F::ONE };
                    }
                }
            }
            let g = (x + one) * scale;
            // Anchor at the lower corner, shifting top-edge points down one
            // cell so all eight corner indices stay in range.
            let mut base = g.to_f64().floor() as usize;
            if base > v - 2 {
                base = v - 2;
            }
            i0[ax] = base;
            frac[ax] = g - real::<F>(base as f64);
        }
        let mut cs = [(0u32, F::ZERO); 8];
        for (ci, c) in cs.iter_mut().enumerate() {
            let dx = ci >> 2 & 1;
            let dy = ci >> 1 & 1;
            let dz = ci & 1;
            let wx = if dx == 1 { frac[0] } else { one - frac[0] };
            let wy = if dy == 1 { frac[1] } else { one - frac[1] };
            let wz = if dz == 1 { frac[2] } else { one - frac[2] };
            let cell = ((i0[0] + dx) * v + (i0[1] + dy)) * v + (i0[2] + dz);
            *c = (cell as u32, wx * wy * wz);
        }
        corners.push(cs);
    }

    // CSR contributor lists per cell, zero-weight corners dropped.
    let n_cells = v * v * v;
    let mut counts = vec![0u32; n_cells + 1];
    for cs in &corners {
        for &(cell, w) in cs {
            if w != F::ZERO {
                counts[cell as usize + 1] += 1;
            }
        }
    }
    for i in 0..n_cells {
        counts[i + 1] += counts[i];
    }
    let cell_off = counts.clone();
    let mut fill = cell_off.clone();
    let mut cell_points = vec![(0u32, F::ZERO); cell_off[n_cells] as usize];
    for (pi, cs) in corners.iter().enumerate() {
        for &(cell, w) in cs {
            if w != F::ZERO {
                let slot = fill[cell as usize] as usize;
                cell_points[slot] = (pi as u32, w);
                fill[cell as usize] += 1;
            }
        }
    }

    Ok(Rc::new(StencilPlan {
        n_points: n,
        n_cells,
        corners,
        cell_off,
        cell_points,
    }))
}

/// Splats per-point features into the plan's grid: `[n,c] -> [V^3, c]`.
pub fn voxelize<F: Real>(
    tape: &mut Tape<F>,
    features: Var,
    plan: &Rc<StencilPlan<F>>,
) -> Result<Var> {
    tape.splat(features, plan)
}

/// Samples grid values back at the plan's points: `[V^3, c] -> [n, c]`.
pub fn devoxelize<F: Real>(
    tape: &mut Tape<F>,
    grid: Var,
    plan: &Rc<StencilPlan<F>>,
) -> Result<Var> {
    tape.gather_stencil(grid, plan)
}

/// Creates the feature leaf holding each point's own coordinates, the three
/// channels the denoising model voxelizes.
pub fn coord_features<F: Real>(
    tape: &mut Tape<F>,
    points: &[[F; 3]],
    policy: CoordPolicy,
) -> Result<Var> {
    let mut data = Vec::with_capacity(points.len() * 3);
    for p in points {
        for ax in 0..3 {
            let mut x = p[ax];
            if policy == CoordPolicy::Clamp {
                if x < -F::ONE {
                    x = -F::ONE;
                } else if x > F::ONE {
                    x = F::ONE;
                }
            }
            data.push(x);
        }
    }
    tape.leaf(&[points.len(), 3], data, false)
}

/// Coordinate of cell index `i` along one axis, the inverse of the grid map.
pub fn cell_center(i: usize, v: usize) -> f64 {
    2.0 * i as f64 / (v - 1) as f64 - 1.0
}
