//! Brute-force matching oracle shared by the evaluation tests and the acceptance suite.

use std::collections::HashSet;

use occedge::evaluation::Matching;
use occedge::occlusion::EdgeMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn map(w: usize, h: usize, on: &[(usize, usize)]) -> EdgeMap {
    let mut e = EdgeMap::new(w, h);
    for &(x, y) in on {
        e.set(x, y, true);
    }
    e
}

/// Lexicographic optimum (most matches, then least cost) by DP over subsets
/// of ground-truth pixels.
pub fn brute_force(pred: &EdgeMap, gt: &EdgeMap, d_max: f64) -> (usize, f64) {
    let p: Vec<(usize, usize)> = pred.pixels().collect();
    let g: Vec<(usize, usize)> = gt.pixels().collect();
    assert!(g.len() <= 16);
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let (dx, dy) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
        (dx * dx + dy * dy).sqrt()
    };
    let better = |a: (usize, f64), b: (usize, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1 - 1e-12);
    let none = (0usize, f64::INFINITY);
    let mut best = vec![none; 1 << g.len()];
    best[0] = (0, 0.0);
    for &pp in &p {
        let mut next = best.clone();
        for mask in 0..best.len() {
            let cur = best[mask];
            if cur.1.is_infinite() {
                continue;
            }
            for (k, &gg) in g.iter().enumerate() {
                let d = dist(pp, gg);
                if mask & (1 << k) == 0 && d <= d_max {
                    let cand = (cur.0 + 1, cur.1 + d);
                    let slot = &mut next[mask | (1 << k)];
                    if slot.1.is_infinite() || better(cand, *slot) {
                        *slot = cand;
                    }
                }
            }
        }
        best = next;
    }
    best.into_iter().filter(|b| b.1.is_finite()).fold((0, 0.0), |a, b| if better(b, a) { b } else { a })
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (EdgeMap, EdgeMap, f64) {
    let w = rng.gen_range(2..=12);
    let h = rng.gen_range(2..=12);
    let mut pick = |n: usize| {
        let mut seen = HashSet::new();
        for _ in 0..n {
            seen.insert((rng.gen_range(0..w), rng.gen_range(0..h)));
        }
        seen.into_iter().collect::<Vec<_>>()
    };
    let np = 1 + (w * h).min(10) * 7 / 10;
    let (p, g) = (pick(np), pick(np));
    let d_max = [1.0, 1.5, 2.0, 2.5, 3.2][rng.gen_range(0..5)];
    (map(w, h, &p), map(w, h, &g), d_max)
}

/// One-to-one, on edge pixels only and within `d_max`.
pub fn check_valid(m: &Matching, pred: &EdgeMap, gt: &EdgeMap, d_max: f64) -> Result<(), String> {
    let w = pred.width();
    let ps: HashSet<usize> = m.pairs.iter().map(|p| p.0).collect();
    let gs: HashSet<usize> = m.pairs.iter().map(|p| p.1).collect();
    if ps.len() != m.len() || gs.len() != m.len() {
        return Err("a pixel is matched twice".into());
    }
    for &(a, b) in &m.pairs {
        if pred.values()[a] == 0 || gt.values()[b] == 0 {
            return Err(format!("pair ({a}, {b}) is not on two edge pixels"));
        }
        let (dx, dy) = ((a % w) as f64 - (b % w) as f64, (a / w) as f64 - (b / w) as f64);
        if (dx * dx + dy * dy).sqrt() > d_max {
            return Err(format!("pair ({a}, {b}) is farther than {d_max}"));
        }
    }
    Ok(())
}
