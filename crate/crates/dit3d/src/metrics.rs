//! Point-cloud distances and set-level generative metrics.
//!
//! Chamfer distance is the sum of two means of squared nearest-neighbor
//! distances. Earth mover's distance matches points one to one: small
//! problems are solved exactly with a shortest-augmenting-path assignment,
//! large ones with an epsilon-scaling auction that keeps tightening until
//! the measured duality gap is at most 1% of the returned value. On top of
//! those sit nearest-neighbor two-sample accuracy and coverage.

use crate::error::{Error, Result};

/// Which cloud distance a set-level metric should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistKind {
    Chamfer,
    Emd,
}

/// Largest problem the exact cubic assignment solver is used for; beyond
/// this the auction approximation takes over.
pub const EXACT_EMD_LIMIT: usize = 256;

/// Relative duality gap the auction mode guarantees on its result.
pub const AUCTION_GAP: f64 = 0.01;

fn sq_dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn check_nonempty(name: &str, x: &[[f64; 3]]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Contract(format!("{name}: empty point cloud")));
    }
    Ok(())
}

/// Chamfer distance: mean squared distance from each cloud to its nearest
/// neighbors in the other, summed over both directions.
pub fn chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    check_nonempty("chamfer", x)?;
    check_nonempty("chamfer", y)?;
    let mut sx = 0.0;
    for p in x {
        let mut best = f64::INFINITY;
        for q in y {
            let d = sq_dist(p, q);
            if d < best {
                best = d;
            }
        }
        sx += best;
    }
    let mut sy = 0.0;
    for q in y {
        let mut best = f64::INFINITY;
        for p in x {
            let d = sq_dist(q, p);
            if d < best {
                best = d;
            }
        }
        sy += best;
    }
    Ok(sx / x.len() as f64 + sy / y.len() as f64)
}

fn euclidean_cost_matrix(x: &[[f64; 3]], y: &[[f64; 3]]) -> Vec<f64> {
    let n = x.len();
    let mut cost = vec![0.0; n * n];
    for (i, p) in x.iter().enumerate() {
        for (j, q) in y.iter().enumerate() {
            cost[i * n + j] = sq_dist(p, q).sqrt();
        }
    }
    cost
}

/// Exact minimum-cost assignment by shortest augmenting paths with dual
/// potentials. Returns the column matched to each row.
fn assign_exact(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn matching_mean(cost: &[f64], n: usize, row_to_col: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &j) in row_to_col.iter().enumerate() {
        total += cost[i * n + j];
    }
    total / n as f64
}

fn check_emd_pair(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<()> {
    check_nonempty("emd", x)?;
    check_nonempty("emd", y)?;
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "emd needs equal cardinality, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Exact earth mover's distance: minimum over perfect matchings of the mean
/// Euclidean pair distance. Cubic in the cloud size.
pub fn emd_exact(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    check_emd_pair(x, y)?;
    let n = x.len();
    let cost = euclidean_cost_matrix(x, y);
    let assign = assign_exact(&cost, n);
    Ok(matching_mean(&cost, n, &assign))
}

/// One auction round at a fixed epsilon: every row repeatedly bids for its
/// cheapest column until all rows are assigned. Prices are carried in.
fn auction_round(cost: &[f64], n: usize, eps: f64, price: &mut [f64]) -> Vec<usize> {
    let mut row_of = vec![usize::MAX; n];
    let mut col_of = vec![usize::MAX; n];
    let mut free: Vec<usize> = (0..n).rev().collect();
    while let Some(i) = free.pop() {
        let row = &cost[i * n..(i + 1) * n];
        let mut best_j = 0usize;
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        for (j, &c) in row.iter().enumerate() {
            let val = c + price[j];
            if val < best {
                second = best;
                best = val;
                best_j = j;
            } else if val < second {
                second = val;
            }
        }
        let bump = if second.is_finite() { second - best } else { 0.0 };
        price[best_j] += bump + eps;
        let prev = col_of[best_j];
        if prev != usize::MAX {
            row_of[prev] = usize::MAX;
            free.push(prev);
        }
        col_of[best_j] = i;
        row_of[i] = best_j;
    }
    row_of
}

/// The dual lower bound matching `price`: each row takes its cheapest
/// price-adjusted column, and the prices are refunded.
fn auction_lower_bound(cost: &[f64], n: usize, price: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &cost[i * n..(i + 1) * n];
        let mut best = f64::INFINITY;
        for (j, &c) in row.iter().enumerate() {
            let val = c + price[j];
            if val < best {
                best = val;
            }
        }
        total += best;
    }
    total - price.iter().sum::<f64>()
}

/// Approximate earth mover's distance by epsilon-scaling auction. Epsilon
/// shrinks until the measured duality gap is at most `AUCTION_GAP` of the
/// returned mean, so the result is guaranteed within 1% of optimal.
pub fn emd_auction(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    check_emd_pair(x, y)?;
    let n = x.len();
    let cost = euclidean_cost_matrix(x, y);
    let scale = cost.iter().cloned().fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut price = vec![0.0; n];
    let mut eps = scale / 8.0;
    for _ in 0..200 {
        let assign = auction_round(&cost, n, eps, &mut price);
        let primal: f64 = (0..n).map(|i| cost[i * n + assign[i]]).sum();
        let lower = auction_lower_bound(&cost, n, &price);
        let gap = primal - lower;
        if gap <= (AUCTION_GAP * primal).max(1e-12 * scale) {
            return Ok(primal / n as f64);
        }
        eps /= 5.0;
    }
    Err(Error::Numeric(
        "auction assignment failed to close its duality gap".into(),
    ))
}

/// Earth mover's distance with automatic mode choice: exact up to
/// `EXACT_EMD_LIMIT` points, auction beyond.
pub fn emd(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    check_emd_pair(x, y)?;
    if x.len() <= EXACT_EMD_LIMIT {
        emd_exact(x, y)
    } else {
        emd_auction(x, y)
    }
}

/// Distance between two clouds under the chosen metric.
pub fn cloud_dist(kind: DistKind, x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64> {
    match kind {
        DistKind::Chamfer => chamfer(x, y),
        DistKind::Emd => emd(x, y),
    }
}

/// Row-major `[a.len(), b.len()]` matrix of cloud distances.
pub fn distance_matrix(
    a: &[Vec<[f64; 3]>],
    b: &[Vec<[f64; 3]>],
    kind: DistKind,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; a.len() * b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i * b.len() + j] = cloud_dist(kind, x, y)?;
        }
    }
    Ok(out)
}

/// Leave-one-out accuracy of a 1-nearest-neighbor classifier on the union
/// of the two sets, as a percentage. 50% means the sets are statistically
/// indistinguishable. Ties go to the lowest index, so the result is
/// deterministic.
pub fn one_nna(
    s_g: &[Vec<[f64; 3]>],
    s_r: &[Vec<[f64; 3]>],
    kind: DistKind,
) -> Result<f64> {
    if s_g.len() < 2 || s_r.len() < 2 {
        return Err(Error::Contract(format!(
            "1-NNA needs at least two clouds per set, got {} and {}",
            s_g.len(),
            s_r.len()
        )));
    }
    let union: Vec<&Vec<[f64; 3]>> = s_g.iter().chain(s_r.iter()).collect();
    let k = union.len();
    let mut dmat = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = cloud_dist(kind, union[i], union[j])?;
            dmat[i * k + j] = d;
            dmat[j * k + i] = d;
        }
    }
    let mut correct = 0usize;
    for i in 0..k {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for j in 0..k {
            if j != i && dmat[i * k + j] < best {
                best = dmat[i * k + j];
                best_j = j;
            }
        }
        if (i < s_g.len()) == (best_j < s_g.len()) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / k as f64)
}

/// Fraction of reference clouds that are the nearest reference of at least
/// one generated cloud, as a percentage.
pub fn coverage(
    s_g: &[Vec<[f64; 3]>],
    s_r: &[Vec<[f64; 3]>],
    kind: DistKind,
) -> Result<f64> {
    if s_g.is_empty() || s_r.is_empty() {
        return Err(Error::Contract("coverage needs non-empty sets".into()));
    }
    let dmat = distance_matrix(s_g, s_r, kind)?;
    let mut hit = vec![false; s_r.len()];
    for i in 0..s_g.len() {
        let row = &dmat[i * s_r.len()..(i + 1) * s_r.len()];
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for (j, &d) in row.iter().enumerate() {
            if d < best {
                best = d;
                best_j = j;
            }
        }
        hit[best_j] = true;
    }
    let hits = hit.iter().filter(|&&h| h).count();
    Ok(100.0 * hits as f64 / s_r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                ]
            })
            .collect()
    }

    fn shifted(c: &[[f64; 3]], dx: f64) -> Vec<[f64; 3]> {
        c.iter().map(|p| [p[0] + dx, p[1], p[2]]).collect()
    }

    #[test]
    fn chamfer_matches_hand_computed_pair() {
        let x = vec![[0.0, 0.0, 0.0]];
        let y = vec![[1.0, 0.0, 0.0]];
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cloud(40, &mut rng);
        assert_eq!(chamfer(&c, &c).unwrap(), 0.0);

        let d = cloud(25, &mut rng);
        assert_eq!(chamfer(&c, &d).unwrap(), chamfer(&d, &c).unwrap());

        let mut perm = c.clone();
        perm.reverse();
        let a = chamfer(&c, &d).unwrap();
        let b = chamfer(&perm, &d).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(matches!(chamfer(&[], &y), Err(Error::Contract(_))));
    }

    #[test]
    fn chamfer_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(64, &mut rng);
        let y = cloud(64, &mut rng);
        let got = chamfer(&x, &y).unwrap();

        let mut sx = 0.0;
        for p in &x {
            let mut best = f64::INFINITY;
            for q in &y {
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best {
                    best = d;
                }
            }
            sx += best;
        }
        let mut sy = 0.0;
        for q in &y {
            let mut best = f64::INFINITY;
            for p in &x {
                let dx = q[0] - p[0];
                let dy = q[1] - p[1];
                let dz = q[2] - p[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < best {
                    best = d;
                }
            }
            sy += best;
        }
        let want = sx / 64.0 + sy / 64.0;
        assert_eq!(got.to_bits(), want.to_bits());
    }

    #[test]
    fn emd_matches_hand_computed_pair() {
        let x = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let y = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(emd(&x, &y).unwrap(), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cloud(50, &mut rng);
        let mut shuffled = c.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        assert_eq!(emd(&c, &shuffled).unwrap(), 0.0);

        assert!(matches!(emd(&x, &y[..1]), Err(Error::Contract(_))));
        assert!(matches!(emd(&[], &[]), Err(Error::Contract(_))));
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for rest in permutations(n - 1) {
            for slot in 0..n {
                let mut p = rest.clone();
                p.insert(slot, n - 1);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn exact_assignment_equals_factorial_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..50 {
            let n = 1 + (case % 8);
            let x = cloud(n, &mut rng);
            let y = cloud(n, &mut rng);
            let got = emd_exact(&x, &y).unwrap();

            let cost = euclidean_cost_matrix(&x, &y);
            let mut best = f64::INFINITY;
            for perm in permutations(n) {
                let mut total = 0.0;
                for (i, &j) in perm.iter().enumerate() {
                    total += cost[i * n + j];
                }
                let mean = total / n as f64;
                if mean < best {
                    best = mean;
                }
            }
            assert!(
                (got - best).abs() <= 1e-12,
                "case {case} n={n}: solver {got} vs enumeration {best}"
            );
        }
    }

    #[test]
    fn auction_stays_within_gap_of_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = cloud(200, &mut rng);
        let y = cloud(200, &mut rng);
        let exact = emd_exact(&x, &y).unwrap();
        let approx = emd_auction(&x, &y).unwrap();
        assert!(approx >= exact - 1e-9, "auction below optimum");
        assert!(
            (approx - exact) / exact <= AUCTION_GAP,
            "auction {approx} vs exact {exact}"
        );
        assert_eq!(emd(&x, &y).unwrap().to_bits(), exact.to_bits());

        let bx = cloud(300, &mut rng);
        let by = cloud(300, &mut rng);
        let dispatched = emd(&bx, &by).unwrap();
        assert!(dispatched.is_finite() && dispatched > 0.0);

        let mut shuffled = bx.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        assert!(emd(&bx, &shuffled).unwrap() <= 1e-9);
    }

    #[test]
    fn nearest_neighbor_accuracy_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let near: Vec<Vec<[f64; 3]>> = (0..8).map(|_| cloud(16, &mut rng)).collect();
        let far: Vec<Vec<[f64; 3]>> = near.iter().map(|c| shifted(c, 10.0)).collect();
        assert_eq!(one_nna(&near, &far, DistKind::Chamfer).unwrap(), 100.0);

        assert!(matches!(
            one_nna(&near[..1], &far, DistKind::Chamfer),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nearest_neighbor_accuracy_calibrates_on_matched_sets() {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a: Vec<Vec<[f64; 3]>> = (0..64).map(|_| cloud(32, &mut rng)).collect();
            let b: Vec<Vec<[f64; 3]>> = (0..64).map(|_| cloud(32, &mut rng)).collect();
            total += one_nna(&a, &b, DistKind::Chamfer).unwrap();
        }
        let mean = total / 20.0;
        assert!(
            (40.0..=60.0).contains(&mean),
            "matched-set accuracy {mean} not near 50"
        );
    }

    #[test]
    fn nearest_neighbor_ties_break_to_lowest_index() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[5.0, 0.0, 0.0]];
        let s_g = vec![a.clone(), a.clone()];
        let s_r = vec![a.clone(), b.clone()];
        assert_eq!(one_nna(&s_g, &s_r, DistKind::Chamfer).unwrap(), 50.0);
    }

    #[test]
    fn coverage_identity_and_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set: Vec<Vec<[f64; 3]>> = (0..10).map(|_| cloud(20, &mut rng)).collect();
        assert_eq!(coverage(&set, &set, DistKind::Chamfer).unwrap(), 100.0);

        let collapsed = vec![set[3].clone(); 6];
        assert_eq!(coverage(&collapsed, &set, DistKind::Chamfer).unwrap(), 10.0);

        assert!(matches!(
            coverage(&[], &set, DistKind::Chamfer),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn coverage_matches_definition_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s_g: Vec<Vec<[f64; 3]>> = (0..7).map(|_| cloud(12, &mut rng)).collect();
        let s_r: Vec<Vec<[f64; 3]>> = (0..5).map(|_| cloud(12, &mut rng)).collect();
        let got = coverage(&s_g, &s_r, DistKind::Chamfer).unwrap();

        let mut hit = vec![false; s_r.len()];
        for g in &s_g {
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, r) in s_r.iter().enumerate() {
                let d = chamfer(g, r).unwrap();
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            hit[best_j] = true;
        }
        let want = 100.0 * hit.iter().filter(|&&h| h).count() as f64 / s_r.len() as f64;
        assert_eq!(got, want);
    }

    #[test]
    fn union_metrics_ignore_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s_g: Vec<Vec<[f64; 3]>> = (0..6).map(|_| cloud(15, &mut rng)).collect();
        let s_r: Vec<Vec<[f64; 3]>> = (0..6).map(|_| cloud(15, &mut rng)).collect();
        let mut g2 = s_g.clone();
        g2.reverse();
        let mut r2 = s_r.clone();
        r2.reverse();
        assert_eq!(
            one_nna(&s_g, &s_r, DistKind::Chamfer).unwrap(),
            one_nna(&g2, &r2, DistKind::Chamfer).unwrap()
        );
        assert_eq!(
            coverage(&s_g, &s_r, DistKind::Chamfer).unwrap(),
            coverage(&g2, &r2, DistKind::Chamfer).unwrap()
        );
    }

    #[test]
    fn emd_backed_set_metrics_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s_g: Vec<Vec<[f64; 3]>> = (0..3).map(|_| cloud(8, &mut rng)).collect();
        let s_r: Vec<Vec<[f64; 3]>> = (0..3).map(|_| cloud(8, &mut rng)).collect();
        let acc = one_nna(&s_g, &s_r, DistKind::Emd).unwrap();
        assert!((0.0..=100.0).contains(&acc));
        let cov = coverage(&s_g, &s_r, DistKind::Emd).unwrap();
        assert!(cov > 0.0 && cov <= 100.0);
    }
}
