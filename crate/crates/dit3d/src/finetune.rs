//! Weight transfer between models and parameter-efficient fine-tuning.
//!
//! Transfer copies every source tensor whose name and shape match the
//! target; window blocks read their attention projections from the same
//! names a plain-attention model uses, so a model trained without windows
//! transfers onto one with them, leaving only the reduction affines fresh.
//! Efficient fine-tuning then trains just the per-layer scale factors, the
//! bias vectors, and the class table. Checkpoints are a small binary
//! format: magic, version, and per tensor the name, shape, and raw floats.

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, NoisePredictor};
use crate::params::ParamStore;
use crate::tensor::Real;
use std::fs;
use std::path::Path;

/// Outcome of a partial weight transfer. The three lists partition the
/// target's parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferReport {
    pub matched: Vec<String>,
    pub missing: Vec<String>,
    pub shape_mismatch: Vec<String>,
}

/// Copies every source tensor whose name and shape match into the target;
/// the rest of the target keeps its current values. Source entries the
/// target does not know are ignored. With `strict` any missing or
/// mismatched name is an error and the target is left untouched.
pub fn transfer_partial<F: Real>(
    source: &ParamStore<F>,
    target: &mut NoisePredictor<F>,
    strict: bool,
) -> Result<TransferReport> {
    let mut report = TransferReport {
        matched: Vec::new(),
        missing: Vec::new(),
        shape_mismatch: Vec::new(),
    };
    let names: Vec<String> = target.store().names().cloned().collect();
    for name in &names {
        match source.get(name) {
            None => report.missing.push(name.clone()),
            Some(src) => {
                if src.shape == target.store().get(name).expect("listed name").shape {
                    report.matched.push(name.clone());
                } else {
                    report.shape_mismatch.push(name.clone());
                }
            }
        }
    }
    if strict && (!report.missing.is_empty() || !report.shape_mismatch.is_empty()) {
        return Err(Error::Transfer(format!(
            "{} missing and {} mismatched entries (first: {:?})",
            report.missing.len(),
            report.shape_mismatch.len(),
            report.missing.first().or(report.shape_mismatch.first())
        )));
    }
    for name in &report.matched {
        let data = source.get(name).expect("matched name").data.clone();
        target.store_mut().get_mut(name).expect("matched name").data = data;
    }
    Ok(report)
}

/// Whether a parameter belongs to the efficient fine-tuning set: the scale
/// factors, every bias vector, and the class embedding table. Layer norms
/// here carry no affine parameters, so nothing is contributed by them.
pub fn is_efficient_trainable(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".bias") || name == "class_embed.table"
}

/// Trainable/frozen split of a model's parameter names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

fn mark_by<F: Real>(
    model: &mut NoisePredictor<F>,
    pred: impl Fn(&str) -> bool,
) -> TrainPartition {
    model.store_mut().set_trainable_by(&pred);
    let mut partition = TrainPartition {
        trainable: Vec::new(),
        frozen: Vec::new(),
    };
    for (name, tensor) in model.store().iter() {
        if tensor.trainable {
            partition.trainable.push(name.clone());
        } else {
            partition.frozen.push(name.clone());
        }
    }
    partition
}

/// Freezes everything except the scale factors, biases, and class table.
pub fn mark_trainable_efficient<F: Real>(model: &mut NoisePredictor<F>) -> TrainPartition {
    mark_by(model, is_efficient_trainable)
}

/// Marks every parameter trainable. The positional table is a fixed
/// function of the grid, not a parameter, and stays frozen.
pub fn mark_trainable_full<F: Real>(model: &mut NoisePredictor<F>) -> TrainPartition {
    mark_by(model, |name| name != "pos_embed.table")
}

/// Exact number of scalar entries in the model, optionally restricted to
/// the currently trainable set.
pub fn count_params<F: Real>(model: &NoisePredictor<F>, trainable_only: bool) -> u64 {
    model.store().count_scalars(trainable_only)
}

/// Number of scalars the efficient fine-tuning set would hold for a
/// configuration, computed from the parameter layout without allocating.
pub fn spec_efficient_count(cfg: &ModelConfig) -> Result<u64> {
    Ok(param_specs(cfg)?
        .iter()
        .filter(|s| is_efficient_trainable(&s.name))
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum())
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"DIT3D";
const CHECKPOINT_VERSION: u8 = 1;

/// Writes the store as magic, version, entry count, then per entry the
/// name, rank, dims, and raw little-endian 32-bit floats.
pub fn save_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Contract("too many tensors for checkpoint format".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("tensor name too long: '{name}'")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(tensor.shape.len())
            .map_err(|_| Error::Contract(format!("tensor rank too high: '{name}'")))?;
        buf.push(rank);
        for &dim in &tensor.shape {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Contract(format!("dimension too large in '{name}'")))?;
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        for &x in &tensor.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated at byte {} while reading {what}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint back into a store. Any structural problem, including
/// truncation, is a format error and no store is returned. Trainable flags
/// are not part of the file; every loaded tensor starts trainable.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = cur.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(numel);
        let raw = cur.take(numel * 4, &format!("data of '{name}'"))?;
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        store.insert(&name, shape, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{spec_param_count, SizeTag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(window: bool) -> ModelConfig {
        ModelConfig {
            size: SizeTag::Custom,
            depth: 2,
            d: 12,
            heads: 2,
            p: 4,
            v: 8,
            r: 2,
            window_block_ids: if window { vec![0] } else { vec![] },
            num_classes: 2,
            t_max: 50,
        }
    }

    fn trained_like(cfg: ModelConfig, seed: u64) -> NoisePredictor<f64> {
        let mut model = NoisePredictor::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xACE);
        for (_, tensor) in model.store_mut().iter_mut() {
            for v in tensor.data.iter_mut() {
                if *v == 0.0 {
                    *v = rng.gen::<f64>() * 0.2 - 0.1;
                }
            }
        }
        model
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

    fn sorted(v: &[String]) -> Vec<String> {
        let mut v = v.to_vec();
        v.sort();
        v
    }

    #[test]
    fn transfer_between_identical_architectures_matches_everything() {
        let source = trained_like(tiny_config(true), 1);
        let mut target = NoisePredictor::<f64>::new(tiny_config(true), 2).unwrap();
        let all: Vec<String> = target.store().names().cloned().collect();

        let report = transfer_partial(source.store(), &mut target, true).unwrap();
        assert_eq!(sorted(&report.matched), sorted(&all));
        assert!(report.missing.is_empty());
        assert!(report.shape_mismatch.is_empty());
        for (name, tensor) in source.store().iter() {
            let got = &target.store().get(name).unwrap().data;
            assert!(got
                .iter()
                .zip(&tensor.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let again = transfer_partial(source.store(), &mut target, true).unwrap();
        assert_eq!(again, report);
        for (name, tensor) in source.store().iter() {
            let got = &target.store().get(name).unwrap().data;
            assert!(got
                .iter()
                .zip(&tensor.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn missing_source_entries_leave_fresh_initialization() {
        let source = trained_like(tiny_config(false), 3);
        let mut target = NoisePredictor::<f64>::new(tiny_config(true), 4).unwrap();
        let fresh_reduce: Vec<(String, Vec<f64>)> = target
            .store()
            .iter()
            .filter(|(n, _)| n.contains(".reduce_"))
            .map(|(n, t)| (n.clone(), t.data.clone()))
            .collect();
        assert_eq!(fresh_reduce.len(), 6);

        let report = transfer_partial(source.store(), &mut target, false).unwrap();
        let missing: Vec<String> = fresh_reduce.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(sorted(&report.missing), sorted(&missing));
        assert!(report.shape_mismatch.is_empty());
        let mut partition = report.matched.clone();
        partition.extend(report.missing.clone());
        let all: Vec<String> = target.store().names().cloned().collect();
        assert_eq!(sorted(&partition), sorted(&all));

        for (name, fresh) in &fresh_reduce {
            let now = &target.store().get(name).unwrap().data;
            assert!(now
                .iter()
                .zip(fresh)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let out = target.predict_noise(&cloud(20, 5), 7, Some(1)).unwrap();
        assert_eq!(out.len(), 20);

        assert!(matches!(
            transfer_partial(source.store(), &mut target, true),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn reshaped_source_tensor_is_skipped_untouched() {
        let source = trained_like(tiny_config(true), 6);
        let mut bent = ParamStore::<f64>::new();
        for (name, tensor) in source.store().iter() {
            let mut shape = tensor.shape.clone();
            if name == "blocks.1.mlp.fc1.weight" {
                shape.reverse();
            }
            bent.insert(name, shape, tensor.data.clone()).unwrap();
        }

        let mut target = NoisePredictor::<f64>::new(tiny_config(true), 7).unwrap();
        let before = target
            .store()
            .get("blocks.1.mlp.fc1.weight")
            .unwrap()
            .data
            .clone();
        let report = transfer_partial(&bent, &mut target, false).unwrap();
        assert_eq!(report.shape_mismatch, vec!["blocks.1.mlp.fc1.weight".to_string()]);
        assert!(report.missing.is_empty());
        let after = &target.store().get("blocks.1.mlp.fc1.weight").unwrap().data;
        assert!(before
            .iter()
            .zip(after.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut strict_target = NoisePredictor::<f64>::new(tiny_config(true), 7).unwrap();
        assert!(matches!(
            transfer_partial(&bent, &mut strict_target, true),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn efficient_partition_marks_scales_biases_and_class_table() {
        let mut model = NoisePredictor::<f64>::new(tiny_config(true), 8).unwrap();
        let partition = mark_trainable_efficient(&mut model);
        assert!(!partition.trainable.is_empty());
        for name in &partition.trainable {
            assert!(
                name.ends_with(".gamma")
                    || name.ends_with(".bias")
                    || name == "class_embed.table",
                "unexpected trainable {name}"
            );
        }
        assert!(partition.trainable.contains(&"class_embed.table".to_string()));
        assert!(partition.frozen.contains(&"pos_embed.table".to_string()));
        assert!(partition.frozen.contains(&"patch_embed.weight".to_string()));
        assert!(partition.frozen.contains(&"blocks.0.qkv.weight".to_string()));

        let mut union = partition.trainable.clone();
        union.extend(partition.frozen.clone());
        let all: Vec<String> = model.store().names().cloned().collect();
        let mut sorted_union = union;
        sorted_union.sort();
        let mut sorted_all = all;
        sorted_all.sort();
        assert_eq!(sorted_union, sorted_all);

        let by_hand: u64 = partition
            .trainable
            .iter()
            .map(|n| {
                model
                    .store()
                    .get(n)
                    .unwrap()
                    .shape
                    .iter()
                    .product::<usize>() as u64
            })
            .sum();
        assert_eq!(count_params(&model, true), by_hand);
    }

    #[test]
    fn full_mode_trains_everything_but_the_positional_table() {
        let mut model = NoisePredictor::<f64>::new(tiny_config(true), 9).unwrap();
        let partition = mark_trainable_full(&mut model);
        assert_eq!(partition.frozen, vec!["pos_embed.table".to_string()]);
        assert_eq!(
            count_params(&model, true) + model.store().get("pos_embed.table").unwrap().data.len() as u64,
            count_params(&model, false)
        );
    }

    #[test]
    fn efficient_fraction_for_small_config_is_under_one_percent() {
        let cfg = ModelConfig::sized(SizeTag::S, 4, 32, 55).unwrap();
        let total = spec_param_count(&cfg).unwrap();
        let efficient = spec_efficient_count(&cfg).unwrap();
        assert!(efficient > 0);
        let ratio = efficient as f64 / total as f64;
        assert!(ratio < 0.01, "efficient fraction {ratio:.4} not under 1%");
    }

    #[test]
    fn scale_factors_at_one_are_a_bitwise_identity() {
        let mut model = trained_like(tiny_config(true), 10);
        let x = cloud(15, 11);
        let base = model.predict_noise(&x, 5, Some(0)).unwrap();

        let gammas: Vec<String> = model
            .store()
            .names()
            .filter(|n| n.ends_with(".gamma"))
            .cloned()
            .collect();
        assert!(!gammas.is_empty());
        for name in &gammas {
            model.store_mut().get_mut(name).unwrap().data[0] = 1.23;
        }
        let scaled = model.predict_noise(&x, 5, Some(0)).unwrap();
        assert!(base
            .iter()
            .zip(&scaled)
            .any(|(a, b)| (0..3).any(|c| a[c] != b[c])));

        for name in &gammas {
            model.store_mut().get_mut(name).unwrap().data[0] = 1.0;
        }
        let restored = model.predict_noise(&x, 5, Some(0)).unwrap();
        for (a, b) in base.iter().zip(&restored) {
            for c in 0..3 {
                assert_eq!(a[c].to_bits(), b[c].to_bits());
            }
        }
    }

    #[test]
    fn spec_count_matches_allocated_store_on_tiny_config() {
        let cfg = tiny_config(true);
        let mut model = NoisePredictor::<f64>::new(cfg.clone(), 12).unwrap();
        assert_eq!(spec_param_count(&cfg).unwrap(), count_params(&model, false));
        mark_trainable_efficient(&mut model);
        assert_eq!(spec_efficient_count(&cfg).unwrap(), count_params(&model, true));
    }

    #[test]
    fn size_ladder_counts_strictly_increase() {
        let counts: Vec<u64> = [SizeTag::S, SizeTag::B, SizeTag::L, SizeTag::XL]
            .into_iter()
            .map(|tag| {
                let cfg = ModelConfig::sized(tag, 4, 32, 55).unwrap();
                spec_param_count(&cfg).unwrap()
            })
            .collect();
        assert!(
            counts.windows(2).all(|w| w[0] < w[1]),
            "counts not increasing: {counts:?}"
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = NoisePredictor::<f32>::new(tiny_config(true), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (_, tensor) in model.store_mut().iter_mut() {
            for v in tensor.data.iter_mut() {
                *v = rng.gen::<f32>() * 2.0 - 1.0;
            }
        }
        save_checkpoint(model.store(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();

        assert_eq!(back.len(), model.store().len());
        for ((na, ta), (nb, tb)) in model.store().iter().zip(back.iter()) {
            assert_eq!(na, nb, "entry order changed");
            assert_eq!(ta.shape, tb.shape);
            assert!(ta
                .data
                .iter()
                .zip(&tb.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        save_checkpoint(&ParamStore::new(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = NoisePredictor::<f32>::new(tiny_config(false), 22).unwrap();
        save_checkpoint(model.store(), &path).unwrap();
        let full = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &full[..full.len() / 2]).unwrap();
        match load_checkpoint(&truncated) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "message: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let bad_magic = dir.path().join("magic.ckpt");
        let mut bytes = full.clone();
        bytes[0] = b'X';
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad_magic), Err(Error::Format(_))));

        let bad_version = dir.path().join("version.ckpt");
        let mut bytes = full.clone();
        bytes[5] = 9;
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(Error::Format(_))
        ));

        let trailing = dir.path().join("trailing.ckpt");
        let mut bytes = full;
        bytes.push(0);
        std::fs::write(&trailing, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&trailing), Err(Error::Format(_))));
    }
}
