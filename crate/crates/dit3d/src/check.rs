//! Finite-difference verification suites runnable outside the test harness.
//!
//! Every primitive tape operation gets one entry with fixed random inputs;
//! a further entry differentiates the full tiny model through voxelize,
//! attention, and devoxelize at once. All checks run at 64 bits.

use crate::error::Result;
use crate::model::{ModelConfig, ModelVars, NoisePredictor, SizeTag};
use crate::tensor::{grad_check, GradCheckReport, Tape, Var};
use crate::voxel::{build_plan, CoordPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Acceptance threshold for every entry in the suite.
pub const GRADCHECK_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.max_rel_err < GRADCHECK_TOL
    }
}

fn randvec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

fn entry(
    name: &str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<SuiteEntry> {
    Ok(SuiteEntry {
        name: name.to_string(),
        report: grad_check(build, &inputs, FD_STEP)?,
    })
}

fn mse_against(tape: &mut Tape<f64>, x: Var, fill: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let target = tape.constant(&shape, vec![fill; n])?;
    tape.mse(x, target)
}

/// Finite-difference check of every primitive differentiable operation.
pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();

    let a = (vec![3, 4], randvec(&mut rng, 12, 1.0));
    let b = (vec![3, 4], randvec(&mut rng, 12, 1.0));
    out.push(entry("add", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        mse_against(t, y, 0.3)
    })?);
    out.push(entry("mul", vec![a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        mse_against(t, y, 0.3)
    })?);

    let m1 = (vec![3, 4], randvec(&mut rng, 12, 1.0));
    let m2 = (vec![4, 2], randvec(&mut rng, 8, 1.0));
    out.push(entry("matmul", vec![m1, m2], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        mse_against(t, y, 0.2)
    })?);

    let row = (vec![4], randvec(&mut rng, 4, 1.0));
    out.push(entry("add-row", vec![a.clone(), row.clone()], &|t, v| {
        let y = t.add_row(v[0], v[1])?;
        mse_against(t, y, 0.1)
    })?);
    out.push(entry("mul-row", vec![a.clone(), row], &|t, v| {
        let y = t.mul_row(v[0], v[1])?;
        mse_against(t, y, 0.1)
    })?);

    out.push(entry("scale", vec![a.clone()], &|t, v| {
        let y = t.scale(v[0], 1.7)?;
        mse_against(t, y, 0.2)
    })?);
    let s = (vec![1], vec![0.9]);
    out.push(entry("scale-var", vec![a.clone(), s], &|t, v| {
        let y = t.scale_var(v[0], v[1])?;
        mse_against(t, y, 0.2)
    })?);

    out.push(entry("gelu", vec![a.clone()], &|t, v| {
        let y = t.gelu(v[0])?;
        mse_against(t, y, 0.1)
    })?);

    let sm = (vec![4, 5], randvec(&mut rng, 20, 2.0));
    out.push(entry("softmax", vec![sm], &|t, v| {
        let y = t.softmax(v[0])?;
        mse_against(t, y, 0.25)
    })?);

    let ln_x = (vec![4, 6], randvec(&mut rng, 24, 1.5));
    let ln_g = (vec![6], randvec(&mut rng, 6, 0.5));
    let ln_b = (vec![6], randvec(&mut rng, 6, 0.5));
    out.push(entry("layer-norm", vec![ln_x, ln_g, ln_b], &|t, v| {
        let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6)?;
        mse_against(t, y, 0.2)
    })?);

    out.push(entry("transpose", vec![a.clone()], &|t, v| {
        let y = t.transpose(v[0])?;
        mse_against(t, y, 0.15)
    })?);
    out.push(entry("reshape", vec![a.clone()], &|t, v| {
        let y = t.reshape(v[0], &[2, 6])?;
        mse_against(t, y, 0.15)
    })?);
    out.push(entry("mean-all", vec![a.clone()], &|t, v| t.mean_all(v[0]))?);
    out.push(entry("sum-all", vec![a.clone()], &|t, v| {
        let y = t.sum_all(v[0])?;
        let c = t.constant(&[1], vec![0.5])?;
        t.mse(y, c)
    })?);
    out.push(entry("mse", vec![a.clone(), b], &|t, v| t.mse(v[0], v[1]))?);

    out.push(entry("slice-cols", vec![a.clone()], &|t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        mse_against(t, y, 0.2)
    })?);
    let c1 = (vec![3, 2], randvec(&mut rng, 6, 1.0));
    let c2 = (vec![3, 3], randvec(&mut rng, 9, 1.0));
    out.push(entry("concat-cols", vec![c1, c2], &|t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        mse_against(t, y, 0.2)
    })?);

    let table = (vec![5, 4], randvec(&mut rng, 20, 1.0));
    out.push(entry("select-row", vec![table], &|t, v| {
        let r2 = t.select_row(v[0], 2)?;
        let r4 = t.select_row(v[0], 4)?;
        let y = t.add(r2, r4)?;
        mse_against(t, y, 0.1)
    })?);

    out.push(entry("permute-flat", vec![a.clone()], &|t, v| {
        let perm: Rc<Vec<usize>> = Rc::new((0..12).rev().collect());
        let y = t.permute_flat(v[0], perm, &[4, 3])?;
        mse_against(t, y, 0.15)
    })?);

    let points: Vec<[f64; 3]> = (0..5)
        .map(|_| {
            [
                rng.gen::<f64>() * 1.6 - 0.8,
                rng.gen::<f64>() * 1.6 - 0.8,
                rng.gen::<f64>() * 1.6 - 0.8,
            ]
        })
        .collect();
    let plan = build_plan(&points, 4, CoordPolicy::Clamp)?;
    let feat = (vec![5, 3], randvec(&mut rng, 15, 1.0));
    let splat_plan = plan.clone();
    out.push(entry("splat", vec![feat], &move |t, v| {
        let y = t.splat(v[0], &splat_plan)?;
        mse_against(t, y, 0.05)
    })?);
    let grid = (vec![64, 3], randvec(&mut rng, 192, 1.0));
    let gather_plan = plan;
    out.push(entry("gather-stencil", vec![grid], &move |t, v| {
        let y = t.gather_stencil(v[0], &gather_plan)?;
        mse_against(t, y, 0.1)
    })?);

    Ok(out)
}

/// Configuration for the end-to-end check: the smallest model that still
/// exercises every architectural piece, including one window block.
pub fn tiny_check_config() -> ModelConfig {
    ModelConfig {
        size: SizeTag::Custom,
        depth: 2,
        d: 12,
        heads: 2,
        p: 4,
        v: 8,
        r: 2,
        window_block_ids: vec![1],
        num_classes: 3,
        t_max: 40,
    }
}

/// Differentiates the full model loss with respect to every parameter and
/// compares against central differences. The positional table is held
/// fixed, matching how training treats it.
pub fn model_suite(seed: u64) -> Result<SuiteEntry> {
    let mut model = NoisePredictor::<f64>::new(tiny_check_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for (_, tensor) in model.store_mut().iter_mut() {
        for x in tensor.data.iter_mut() {
            if *x == 0.0 {
                *x = rng.gen::<f64>() * 0.2 - 0.1;
            }
        }
    }
    let x: Vec<[f64; 3]> = (0..16)
        .map(|_| {
            [
                rng.gen::<f64>() * 1.6 - 0.8,
                rng.gen::<f64>() * 1.6 - 0.8,
                rng.gen::<f64>() * 1.6 - 0.8,
            ]
        })
        .collect();

    let mut inputs = Vec::new();
    let mut grad_names = Vec::new();
    for (name, t) in model.store().iter() {
        if name == "pos_embed.table" {
            continue;
        }
        inputs.push((t.shape.clone(), t.data.clone()));
        grad_names.push(name.clone());
    }
    let pos = model.store().get("pos_embed.table").unwrap().clone();
    let report = grad_check(
        &|tape, vs| {
            let mut pairs: Vec<(String, Var)> = grad_names
                .iter()
                .cloned()
                .zip(vs.iter().copied())
                .collect();
            let pv = tape.leaf(&pos.shape, pos.data.clone(), false)?;
            pairs.push(("pos_embed.table".into(), pv));
            let vars = ModelVars::from_pairs(pairs);
            let trace = model.forward_with_vars(tape, &vars, &x, 7, Some(1))?;
            let target = tape.constant(&[x.len(), 3], vec![0.1; x.len() * 3])?;
            tape.mse(trace.output, target)
        },
        &inputs,
        FD_STEP,
    )?;
    Ok(SuiteEntry {
        name: "full-model".into(),
        report,
    })
}

/// A deliberately broken entry: the forward value uses the input twice,
/// but one use goes through a detached copy, so the tape gradient misses
/// half the true derivative. Exists to prove the harness catches wrong
/// gradients.
pub fn injected_fault() -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBAD);
    let x = (vec![2, 3], randvec(&mut rng, 6, 1.0));
    entry("injected-fault", vec![x], &|t, v| {
        let held = t.value(v[0]).to_vec();
        let detached = t.leaf(&[2, 3], held, false)?;
        let y = t.mul(v[0], detached)?;
        mse_against(t, y, 0.4)
    })
}
