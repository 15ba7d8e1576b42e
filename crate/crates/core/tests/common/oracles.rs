//! Brute-force reference implementations shared by the test crates.

use bevinstructor::metrics::CorpusItem;
use bevinstructor::simworld::Scene;

pub fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn oracle_bleu(c: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut logp = 0.0;
    for k in 1..=n {
        let cg = grams(c, k);
        if cg.is_empty() {
            return 0.0;
        }
        let mut matched = 0usize;
        let mut seen: Vec<Vec<String>> = Vec::new();
        for g in &cg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g.clone());
            let mut best = 0;
            for r in refs {
                best = best.max(count(&grams(r, k), g));
            }
            matched += count(&cg, g).min(best);
        }
        if matched == 0 {
            return 0.0;
        }
        logp += (matched as f64 / cg.len() as f64).ln();
    }
    let mut r = refs[0].len();
    for x in refs {
        let (d, best) = (x.len().abs_diff(c.len()), r.abs_diff(c.len()));
        if d < best || (d == best && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c.len() < r { (1.0 - r as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * (logp / n as f64).exp()
}

fn is_subsequence(sub: &[&String], s: &[String]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(c: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best: f64 = 0.0;
    for r in refs {
        let l = oracle_lcs(c, r) as f64;
        if l == 0.0 {
            continue;
        }
        let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
        let b2: f64 = 1.2 * 1.2;
        best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
    }
    best
}

/// CIDEr-D over dense vectors indexed by every n-gram in the corpus.
pub fn oracle_cider(items: &[CorpusItem]) -> Vec<f64> {
    let n_docs = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = Vec::new();
        for it in items {
            for s in std::iter::once(&it.candidate).chain(&it.references) {
                for g in grams(s, n) {
                    if !vocab.contains(&g) {
                        vocab.push(g);
                    }
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| items.iter().filter(|it| it.references.iter().any(|r| count(&grams(r, n), g) > 0)).count() as f64)
            .collect();
        let vec_of = |s: &[String]| -> Vec<f64> {
            let gs = grams(s, n);
            vocab
                .iter()
                .zip(&df)
                .map(|(g, &d)| count(&gs, g) as f64 * (n_docs.ln() - d.max(1.0).ln()))
                .collect()
        };
        for (i, it) in items.iter().enumerate() {
            let c = vec_of(&it.candidate);
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in &it.references {
                let rv = vec_of(r);
                let rn = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = c.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                let delta = it.candidate.len() as f64 - r.len() as f64;
                acc += (-(delta * delta) / 72.0).exp() * dot / (cn * rn);
            }
            scores[i] += acc / it.references.len() as f64;
        }
    }
    scores.iter().map(|s| 10.0 * s / 4.0).collect()
}

/// Brute-force first hit along a unit ray, face by face.
pub fn oracle_depth(s: &Scene, o: [f64; 3], d: [f64; 3], max_range: f64) -> f64 {
    let mut best = f64::INFINITY;
    if d[2] < 0.0 {
        best = best.min(o[2] / -d[2]);
    }
    for w in &s.walls {
        // Solve o_xy + t d_xy = a + u (b - a) with Cramer's rule.
        let (ex, ey) = (w.x1 - w.x0, w.y1 - w.y0);
        let det = d[0] * (-ey) - d[1] * (-ex);
        if det.abs() < 1e-15 {
            continue;
        }
        let (rx, ry) = (w.x0 - o[0], w.y0 - o[1]);
        let t = (rx * (-ey) - ry * (-ex)) / det;
        let u = (d[0] * ry - d[1] * rx) / det;
        let z = o[2] + t * d[2];
        if t > 0.0 && (0.0..=1.0).contains(&u) && (0.0..=s.wall_height).contains(&z) {
            best = best.min(t);
        }
    }
    for ob in &s.objects {
        let (lo, hi) = (ob.min(), ob.max());
        for axis in 0..3 {
            for plane in [lo[axis], hi[axis]] {
                if d[axis] == 0.0 {
                    continue;
                }
                let t = (plane - o[axis]) / d[axis];
                if t <= 0.0 {
                    continue;
                }
                let p = [0, 1, 2].map(|i| o[i] + t * d[i]);
                let within = (0..3).all(|i| i == axis || (p[i] >= lo[i] - 1e-12 && p[i] <= hi[i] + 1e-12));
                if within {
                    best = best.min(t);
                }
            }
        }
    }
    if best > max_range {
        max_range
    } else {
        best
    }
}

/// Minimum assignment cost over every injective row-to-column map.
pub fn permutations_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost[0].len()])
}
