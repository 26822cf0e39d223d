//! Wall-clock comparison of global vs window attention at a sequence length
//! where the quadratic score matrix dominates. Runs in its own test binary so
//! concurrent tests cannot distort the timing.

use dit3d::blocks::{attention, AffineVars, AttentionVars, ReduceVars};
use dit3d::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_attention(l: usize, d: usize, heads: usize, r: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tape = Tape::<f32>::forward_only();
    let mut randf = |n: usize, s: f32| -> Vec<f32> {
        (0..n).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * s).collect()
    };
    let wq = randf(d * 3 * d, 0.05);
    let leaf = |tape: &mut Tape<f32>, shape: &[usize], data: Vec<f32>| {
        tape.leaf(shape, data, false).unwrap()
    };
    let qkv = AffineVars::plain(
        leaf(&mut tape, &[d, 3 * d], wq),
        leaf(&mut tape, &[3 * d], vec![0.0; 3 * d]),
    );
    let proj = AffineVars::plain(
        leaf(&mut tape, &[d, d], randf(d * d, 0.05)),
        leaf(&mut tape, &[d], vec![0.0; d]),
    );
    let reduce = match r {
        Some(r) => {
            let r3 = r * r * r;
            Some(ReduceVars {
                r,
                k: AffineVars::plain(
                    leaf(&mut tape, &[d * r3, d], randf(d * r3 * d, 0.02)),
                    leaf(&mut tape, &[d], vec![0.0; d]),
                ),
                v: AffineVars::plain(
                    leaf(&mut tape, &[d * r3, d], randf(d * r3 * d, 0.02)),
                    leaf(&mut tape, &[d], vec![0.0; d]),
                ),
            })
        }
        None => None,
    };
    let vars = AttentionVars { qkv, proj, reduce };
    let x = leaf(&mut tape, &[l, d], randf(l * d, 0.5));
    let start = std::time::Instant::now();
    attention(&mut tape, x, &vars, heads).unwrap();
    start.elapsed().as_secs_f64()
}

#[test]
fn window_attention_is_faster_at_scale() {
    let (l, d, heads) = (4096, 384, 6);
    let tw = bench_attention(l, d, heads, Some(8));
    let tg = bench_attention(l, d, heads, None);
    let ratio = tg / tw;
    eprintln!("global {tg:.2}s, window {tw:.2}s, ratio {ratio:.2}");
    assert!(
        ratio > 4.0,
        "global/window wall ratio {ratio:.2} (global {tg:.2}s, window {tw:.2}s)"
    );
}
