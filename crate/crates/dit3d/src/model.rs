//! The end-to-end noise predictor: voxelize a noisy point cloud, patchify,
//! run conditioned transformer blocks, decode tokens back onto the grid, and
//! read predictions off at the input coordinates.
//!
//! Every affine layer carries a scalar scale factor (`*.gamma`, initialized
//! to exactly 1) so parameter-efficient fine-tuning can adapt a frozen layer
//! by training one number; with the factor at 1 the model is bit-identical
//! to one without it.

use crate::blocks::{
    affine, dit_block, modulate, AffineVars, AttentionVars, BlockVars, ReduceVars,
};
use crate::embed::{patchify, pos_embed_padded, timestep_base, token_count, unpatchify};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{real, Real, Tape, Var};
use crate::voxel::{build_plan, coord_features, devoxelize, voxelize, CoordPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SizeTag {
    S,
    B,
    L,
    XL,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub size: SizeTag,
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub p: usize,
    pub v: usize,
    pub r: usize,
    pub window_block_ids: Vec<usize>,
    pub num_classes: usize,
    pub t_max: usize,
}

pub const DEFAULT_WINDOW_R: usize = 4;
pub const DEFAULT_T_MAX: usize = 1000;

impl ModelConfig {
    /// Depth, width, and head count for the named sizes.
    pub fn size_table(tag: SizeTag) -> Option<(usize, usize, usize)> {
        match tag {
            SizeTag::S => Some((12, 384, 6)),
            SizeTag::B => Some((12, 768, 12)),
            SizeTag::L => Some((24, 1024, 16)),
            SizeTag::XL => Some((28, 1152, 16)),
            SizeTag::Custom => None,
        }
    }

    pub fn default_window_ids(depth: usize) -> Vec<usize> {
        (0..depth).step_by(3).collect()
    }

    pub fn sized(tag: SizeTag, p: usize, v: usize, num_classes: usize) -> Result<Self> {
        let (depth, d, heads) = Self::size_table(tag)
            .ok_or_else(|| Error::Config("named size required, got custom".into()))?;
        let cfg = ModelConfig {
            size: tag,
            depth,
            d,
            heads,
            p,
            v,
            r: DEFAULT_WINDOW_R,
            window_block_ids: Self::default_window_ids(depth),
            num_classes,
            t_max: DEFAULT_T_MAX,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tokens(&self) -> usize {
        let g = self.v / self.p;
        g * g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if self.d < 6 {
            return Err(Error::Config(format!("width {} too small for positional channels", self.d)));
        }
        if self.size != SizeTag::Custom {
            if ![2, 4, 8].contains(&self.p) {
                return Err(Error::Config(format!("patch size {} not in {{2,4,8}}", self.p)));
            }
            if ![16, 32, 64].contains(&self.v) {
                return Err(Error::Config(format!("grid size {} not in {{16,32,64}}", self.v)));
            }
        }
        if self.p == 0 || self.v < 2 || self.v % self.p != 0 {
            return Err(Error::Config(format!(
                "grid size {} not divisible by patch size {}",
                self.v, self.p
            )));
        }
        let l = self.tokens();
        let r3 = self.r * self.r * self.r;
        if !self.window_block_ids.is_empty() {
            if self.r == 0 || l % r3 != 0 {
                return Err(Error::Config(format!(
                    "{l} tokens not divisible by window volume {r3}"
                )));
            }
        }
        for &i in &self.window_block_ids {
            if i >= self.depth {
                return Err(Error::Config(format!(
                    "window block id {i} out of range for depth {}",
                    self.depth
                )));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("diffusion horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    Zero,
    Normal(f64),
    PosTable,
    One,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn affine_specs(out: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize, init: Init) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![rows, cols],
        init,
    });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cols], init: Init::Zero });
    out.push(ParamSpec { name: format!("{prefix}.gamma"), shape: vec![1], init: Init::One });
}

/// Enumerates every parameter tensor of a model with this configuration,
/// in a stable order, without allocating any of them.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d;
    let pc = 3 * cfg.p * cfg.p * cfg.p;
    let l = token_count(cfg.v, cfg.p)?;
    let mut out = Vec::new();
    affine_specs(&mut out, "patch_embed", pc, d, Init::Xavier);
    out.push(ParamSpec {
        name: "pos_embed.table".into(),
        shape: vec![l, d],
        init: Init::PosTable,
    });
    affine_specs(&mut out, "t_mlp.fc1", d, d, Init::Xavier);
    affine_specs(&mut out, "t_mlp.fc2", d, d, Init::Xavier);
    out.push(ParamSpec {
        name: "class_embed.table".into(),
        shape: vec![cfg.num_classes + 1, d],
        init: Init::Normal(0.02),
    });
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        affine_specs(&mut out, &format!("{pre}.qkv"), d, 3 * d, Init::Xavier);
        affine_specs(&mut out, &format!("{pre}.proj"), d, d, Init::Xavier);
        affine_specs(&mut out, &format!("{pre}.mlp.fc1"), d, 4 * d, Init::Xavier);
        affine_specs(&mut out, &format!("{pre}.mlp.fc2"), 4 * d, d, Init::Xavier);
        affine_specs(&mut out, &format!("{pre}.modulation"), d, 6 * d, Init::Zero);
        if cfg.window_block_ids.contains(&i) {
            let r3 = cfg.r * cfg.r * cfg.r;
            affine_specs(&mut out, &format!("{pre}.reduce_k"), d * r3, d, Init::Xavier);
            affine_specs(&mut out, &format!("{pre}.reduce_v"), d * r3, d, Init::Xavier);
        }
    }
    affine_specs(&mut out, "final.modulation", d, 2 * d, Init::Zero);
    affine_specs(&mut out, "decoder", d, pc, Init::Zero);
    Ok(out)
}

/// Total scalar count over `param_specs`, without allocating tensors.
pub fn spec_param_count(cfg: &ModelConfig) -> Result<u64> {
    Ok(param_specs(cfg)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum())
}

/// Tape handles for every model parameter, keyed by name in spec order.
pub struct ModelVars {
    pairs: Vec<(String, Var)>,
}

impl ModelVars {
    pub fn from_pairs(pairs: Vec<(String, Var)>) -> Self {
        ModelVars { pairs }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Contract(format!("no parameter var named '{name}'")))
    }

    fn affine(&self, prefix: &str) -> Result<AffineVars> {
        Ok(AffineVars {
            w: self.get(&format!("{prefix}.weight"))?,
            b: self.get(&format!("{prefix}.bias"))?,
            gamma: Some(self.get(&format!("{prefix}.gamma"))?),
        })
    }

    pub fn pairs(&self) -> &[(String, Var)] {
        &self.pairs
    }
}

/// Diagnostic handles from one forward pass.
pub struct ForwardTrace {
    pub output: Var,
    pub cond: Var,
    /// The conditioning var handed to each block, in block order.
    pub block_cond: Vec<Var>,
}

pub struct NoisePredictor<F> {
    pub config: ModelConfig,
    store: ParamStore<F>,
}

impl<F: Real> NoisePredictor<F> {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|_| Error::Config("bad normal".into()))?;
        let mut store = ParamStore::new();
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<F> = match spec.init {
                Init::Zero => vec![F::ZERO; n],
                Init::One => vec![F::ONE; n],
                Init::Xavier => {
                    let (fan_in, fan_out) = if spec.shape.len() == 2 {
                        (spec.shape[0], spec.shape[1])
                    } else {
                        (n, n)
                    };
                    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n)
                        .map(|_| real::<F>((rng.gen::<f64>() * 2.0 - 1.0) * lim))
                        .collect()
                }
                Init::Normal(std) => (0..n)
                    .map(|_| real::<F>(normal.sample(&mut rng) * std))
                    .collect(),
                Init::PosTable => pos_embed_padded(config.v, config.p, config.d)?
                    .into_iter()
                    .map(real::<F>)
                    .collect(),
            };
            store.insert(&spec.name, spec.shape.clone(), data)?;
        }
        store.get_mut("pos_embed.table").expect("pos table").trainable = false;
        Ok(NoisePredictor { config, store })
    }

    /// Wraps an existing store, checking it matches the configuration's
    /// parameter inventory exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let specs = param_specs(&config)?;
        if store.len() != specs.len() {
            return Err(Error::Contract(format!(
                "store has {} entries, config describes {}",
                store.len(),
                specs.len()
            )));
        }
        for spec in &specs {
            let entry = store
                .get(&spec.name)
                .ok_or_else(|| Error::Contract(format!("store missing '{}'", spec.name)))?;
            if entry.shape != spec.shape {
                return Err(Error::Contract(format!(
                    "'{}' has shape {:?}, config expects {:?}",
                    spec.name, entry.shape, spec.shape
                )));
            }
        }
        let mut model = NoisePredictor { config, store };
        model.store.get_mut("pos_embed.table").expect("pos table").trainable = false;
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Creates tape leaves for all parameters. Gradients flow only into
    /// entries marked trainable.
    pub fn leaf_vars(&self, tape: &mut Tape<F>) -> Result<ModelVars> {
        let mut pairs = Vec::with_capacity(self.store.len());
        for (name, t) in self.store.iter() {
            let var = tape.leaf(&t.shape, t.data.clone(), t.trainable)?;
            pairs.push((name.clone(), var));
        }
        Ok(ModelVars::from_pairs(pairs))
    }

    fn label_index(&self, y: Option<usize>) -> Result<usize> {
        match y {
            Some(c) if c < self.config.num_classes => Ok(c),
            Some(c) => Err(Error::Contract(format!(
                "class id {c} out of range for {} classes",
                self.config.num_classes
            ))),
            None => Ok(self.config.num_classes),
        }
    }

    /// Full pipeline on an existing tape with caller-supplied parameter vars.
    pub fn forward_with_vars(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        x_t: &[[F; 3]],
        t: usize,
        y: Option<usize>,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if x_t.is_empty() {
            return Err(Error::Contract("empty point cloud".into()));
        }
        if t >= cfg.t_max {
            return Err(Error::Contract(format!(
                "timestep {t} outside horizon {}",
                cfg.t_max
            )));
        }
        let plan = build_plan(x_t, cfg.v, CoordPolicy::Clamp)?;
        let feats = coord_features(tape, x_t, CoordPolicy::Clamp)?;
        let grid = voxelize(tape, feats, &plan)?;
        let tokens = patchify(tape, grid, cfg.v, cfg.p)?;

        let patch = vars.affine("patch_embed")?;
        let mut h = affine(tape, tokens, &patch)?;
        let pos = vars.get("pos_embed.table")?;
        h = tape.add(h, pos)?;

        let tb = timestep_base(t, cfg.d)?;
        let tb: Vec<F> = tb.into_iter().map(real::<F>).collect();
        let tb = tape.constant(&[1, cfg.d], tb)?;
        let fc1 = vars.affine("t_mlp.fc1")?;
        let fc2 = vars.affine("t_mlp.fc2")?;
        let t1 = affine(tape, tb, &fc1)?;
        let t1 = tape.gelu(t1)?;
        let t_emb = affine(tape, t1, &fc2)?;

        let table = vars.get("class_embed.table")?;
        let c_emb = tape.select_row(table, self.label_index(y)?)?;
        let cond = tape.add(t_emb, c_emb)?;

        let mut block_cond = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let pre = format!("blocks.{i}");
            let reduce = if cfg.window_block_ids.contains(&i) {
                Some(ReduceVars {
                    r: cfg.r,
                    k: vars.affine(&format!("{pre}.reduce_k"))?,
                    v: vars.affine(&format!("{pre}.reduce_v"))?,
                })
            } else {
                None
            };
            let bvars = BlockVars {
                attn: AttentionVars {
                    qkv: vars.affine(&format!("{pre}.qkv"))?,
                    proj: vars.affine(&format!("{pre}.proj"))?,
                    reduce,
                },
                fc1: vars.affine(&format!("{pre}.mlp.fc1"))?,
                fc2: vars.affine(&format!("{pre}.mlp.fc2"))?,
                modulation: vars.affine(&format!("{pre}.modulation"))?,
            };
            block_cond.push(cond);
            h = dit_block(tape, h, cond, &bvars, cfg.heads)?;
        }

        let fmod = vars.affine("final.modulation")?;
        let act = tape.gelu(cond)?;
        let m = affine(tape, act, &fmod)?;
        let shift = tape.slice_cols(m, 0, cfg.d)?;
        let scale = tape.slice_cols(m, cfg.d, cfg.d)?;
        let hn = tape.layer_norm(h, None, None, real::<F>(crate::blocks::LN_EPS))?;
        let hm = modulate(tape, hn, shift, scale)?;

        let dec = vars.affine("decoder")?;
        let out_tokens = affine(tape, hm, &dec)?;
        let out_grid = unpatchify(tape, out_tokens, cfg.v, cfg.p)?;
        let output = devoxelize(tape, out_grid, &plan)?;
        Ok(ForwardTrace { output, cond, block_cond })
    }

    /// Forward pass that creates parameter leaves on the given tape.
    pub fn forward_on(
        &self,
        tape: &mut Tape<F>,
        x_t: &[[F; 3]],
        t: usize,
        y: Option<usize>,
    ) -> Result<(ForwardTrace, ModelVars)> {
        let vars = self.leaf_vars(tape)?;
        let trace = self.forward_with_vars(tape, &vars, x_t, t, y)?;
        Ok((trace, vars))
    }

    /// Predicted noise for each input point.
    pub fn predict_noise(
        &self,
        x_t: &[[F; 3]],
        t: usize,
        y: Option<usize>,
    ) -> Result<Vec<[F; 3]>> {
        let mut tape = Tape::forward_only();
        let (trace, _) = self.forward_on(&mut tape, x_t, t, y)?;
        let data = tape.value(trace.output);
        Ok(data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Guided prediction `(1+w)·conditional − w·unconditional`. With no label
    /// or zero guidance this is a single conditional call.
    pub fn predict_noise_cfg(
        &self,
        x_t: &[[F; 3]],
        t: usize,
        y: Option<usize>,
        w: f64,
    ) -> Result<Vec<[F; 3]>> {
        if w < 0.0 {
            return Err(Error::Contract(format!("guidance scale {w} must be nonnegative")));
        }
        if y.is_none() || w == 0.0 {
            return self.predict_noise(x_t, t, y);
        }
        let c = self.predict_noise(x_t, t, y)?;
        let u = self.predict_noise(x_t, t, None)?;
        let wp = real::<F>(1.0 + w);
        let wn = real::<F>(w);
        Ok(c.iter()
            .zip(&u)
            .map(|(cr, ur)| {
                [
                    wp * cr[0] - wn * ur[0],
                    wp * cr[1] - wn * ur[1],
                    wp * cr[2] - wn * ur[2],
                ]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            size: SizeTag::Custom,
            depth: 2,
            d: 12,
            heads: 2,
            p: 4,
            v: 8,
            r: 2,
            window_block_ids: vec![0],
            num_classes: 2,
            t_max: 50,
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * 1.6 - 0.8,
                    rng.gen::<f64>() * 1.6 - 0.8,
                    rng.gen::<f64>() * 1.6 - 0.8,
                ]
            })
            .collect()
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = tiny_config();
        cfg.heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.v = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.r = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.window_block_ids = vec![5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig::sized(SizeTag::S, 4, 32, 4).unwrap();
        assert_eq!((cfg.depth, cfg.d, cfg.heads), (12, 384, 6));
        assert!(ModelConfig::sized(SizeTag::S, 3, 32, 4).is_err());
    }

    #[test]
    fn fresh_model_predicts_exactly_zero() {
        let model = NoisePredictor::<f64>::new(tiny_config(), 7).unwrap();
        let x = cloud(16, 1);
        let out = model.predict_noise(&x, 3, Some(1)).unwrap();
        assert_eq!(out.len(), 16);
        for row in out {
            assert_eq!(row, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn output_shape_follows_input_length() {
        let model = NoisePredictor::<f64>::new(tiny_config(), 7).unwrap();
        for n in [1, 5, 33] {
            let out = model.predict_noise(&cloud(n, 2), 0, None).unwrap();
            assert_eq!(out.len(), n);
        }
    }

    #[test]
    fn deterministic_across_constructions() {
        let a = NoisePredictor::<f64>::new(tiny_config(), 9).unwrap();
        let b = NoisePredictor::<f64>::new(tiny_config(), 9).unwrap();
        for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert!(ta.data.iter().zip(&tb.data).all(|(x, y)| x == y));
        }
        let c = NoisePredictor::<f64>::new(tiny_config(), 10).unwrap();
        let same = a
            .store
            .iter()
            .zip(c.store.iter())
            .all(|((_, ta), (_, tc))| ta.data.iter().zip(&tc.data).all(|(x, y)| x == y));
        assert!(!same, "different seeds produced identical parameters");
    }

    fn trained_like_model(seed: u64) -> NoisePredictor<f64> {
        // Random nonzero decoder/modulation stand in for a trained model.
        let mut model = NoisePredictor::<f64>::new(tiny_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xACE);
        for (_, t) in model.store.iter_mut() {
            for v in t.data.iter_mut() {
                if *v == 0.0 {
                    *v = rng.gen::<f64>() * 0.2 - 0.1;
                }
            }
        }
        model
    }

    #[test]
    fn permuting_points_permutes_predictions() {
        let model = trained_like_model(21);
        let x = cloud(24, 3);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..24).collect();
            p.reverse();
            p.swap(0, 5);
            p
        };
        let xp: Vec<[f64; 3]> = perm.iter().map(|&i| x[i]).collect();
        let out = model.predict_noise(&x, 7, Some(0)).unwrap();
        let outp = model.predict_noise(&xp, 7, Some(0)).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for ax in 0..3 {
                assert_eq!(outp[i][ax].to_bits(), out[pi][ax].to_bits());
            }
        }
    }

    #[test]
    fn repeated_prediction_is_bit_identical() {
        let model = trained_like_model(22);
        let x = cloud(12, 4);
        let a = model.predict_noise(&x, 5, Some(1)).unwrap();
        let b = model.predict_noise(&x, 5, Some(1)).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for ax in 0..3 {
                assert_eq!(ra[ax].to_bits(), rb[ax].to_bits());
            }
        }
    }

    #[test]
    fn guidance_identities_and_recombination() {
        let model = trained_like_model(23);
        let x = cloud(10, 5);
        let cond = model.predict_noise(&x, 2, Some(1)).unwrap();
        let w0 = model.predict_noise_cfg(&x, 2, Some(1), 0.0).unwrap();
        for (a, b) in cond.iter().zip(&w0) {
            assert_eq!(a, b);
        }
        let uncond = model.predict_noise(&x, 2, None).unwrap();
        let null_any_w = model.predict_noise_cfg(&x, 2, None, 3.5).unwrap();
        for (a, b) in uncond.iter().zip(&null_any_w) {
            assert_eq!(a, b);
        }
        let w = 1.75;
        let guided = model.predict_noise_cfg(&x, 2, Some(0), w).unwrap();
        let c = model.predict_noise(&x, 2, Some(0)).unwrap();
        let external: Vec<[f64; 3]> = c
            .iter()
            .zip(&uncond)
            .map(|(cr, ur)| {
                [
                    (1.0 + w) * cr[0] - w * ur[0],
                    (1.0 + w) * cr[1] - w * ur[1],
                    (1.0 + w) * cr[2] - w * ur[2],
                ]
            })
            .collect();
        for (a, b) in guided.iter().zip(&external) {
            for ax in 0..3 {
                assert_eq!(a[ax].to_bits(), b[ax].to_bits());
            }
        }
        assert!(model.predict_noise_cfg(&x, 2, Some(0), -1.0).is_err());
    }

    #[test]
    fn conditioning_enters_every_block_identically() {
        let model = trained_like_model(24);
        let x = cloud(8, 6);
        let mut tape = Tape::forward_only();
        let (trace, _) = model.forward_on(&mut tape, &x, 1, Some(0)).unwrap();
        assert_eq!(trace.block_cond.len(), model.config.depth);
        for &c in &trace.block_cond {
            assert_eq!(c, trace.cond);
        }
    }

    #[test]
    fn invalid_label_and_timestep_rejected() {
        let model = NoisePredictor::<f64>::new(tiny_config(), 1).unwrap();
        let x = cloud(4, 7);
        assert!(matches!(
            model.predict_noise(&x, 0, Some(2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            model.predict_noise(&x, 50, None),
            Err(Error::Contract(_))
        ));
        assert!(matches!(model.predict_noise(&[], 0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn store_roundtrip_through_from_store() {
        let model = trained_like_model(25);
        let store = model.store().clone();
        let again = NoisePredictor::from_store(tiny_config(), store).unwrap();
        let x = cloud(6, 8);
        let a = model.predict_noise(&x, 1, None).unwrap();
        let b = again.predict_noise(&x, 1, None).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra, rb);
        }
        let mut bad = model.store().clone();
        bad.get_mut("decoder.bias").unwrap().shape = vec![1, 192];
        assert!(NoisePredictor::from_store(tiny_config(), bad).is_err());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let model = trained_like_model(26);
        let x = cloud(16, 9);
        let specs = param_specs(&model.config).unwrap();
        let mut inputs: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        let mut grad_names: Vec<String> = Vec::new();
        for spec in &specs {
            if spec.name == "pos_embed.table" {
                continue;
            }
            let t = model.store().get(&spec.name).unwrap();
            inputs.push((t.shape.clone(), t.data.clone()));
            grad_names.push(spec.name.clone());
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
                let trace = model.forward_with_vars(tape, &vars, &x, 3, Some(1))?;
                let target = tape.constant(&[x.len(), 3], vec![0.1; x.len() * 3])?;
                tape.mse(trace.output, target)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "model gradient rel err {} at input {} ({}) entry {}",
            report.max_rel_err,
            report.worst_input,
            grad_names[report.worst_input],
            report.worst_entry
        );
    }
}
