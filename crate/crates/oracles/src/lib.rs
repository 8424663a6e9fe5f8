//! Slow, obviously-correct reference computations for tests. Nothing here
//! depends on the main crate, so its results cannot share a bug with it.

/// −ρ log Σ_j exp(−‖a − l_j‖²/ρ), summed term by term without any shift.
pub fn naive_surface(a: &[f64; 3], ligand: &[[f64; 3]], rho: f64) -> f64 {
    let sum: f64 = ligand
        .iter()
        .map(|l| {
            let d2: f64 = (0..3).map(|k| (a[k] - l[k]).powi(2)).sum();
            (-d2 / rho).exp()
        })
        .sum();
    -rho * sum.ln()
}

/// Σ over masked-in residues and their atoms of max(0, γ − S(atom)).
pub fn enumerate_interaction(atoms: &[[[f64; 3]; 4]], mask: &[bool], ligand: &[[f64; 3]], gamma: f64, rho: f64) -> f64 {
    let mut total = 0.0;
    for (res, &on) in atoms.iter().zip(mask) {
        if on {
            for a in res {
                total += (gamma - naive_surface(a, ligand, rho)).max(0.0);
            }
        }
    }
    total
}

/// Mean squared error over the pairs whose true distance is below the gate.
pub fn enumerate_gated_distance(d_true: &[Vec<f64>], d_pred: &[Vec<f64>], gate: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (rt, rp) in d_true.iter().zip(d_pred) {
        for (t, p) in rt.iter().zip(rp) {
            if *t < gate {
                sum += (t - p).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Indices of residues with a CA within `radius` of any ligand atom.
pub fn scan_pocket(cas: &[[f64; 3]], ligand: &[[f64; 3]], radius: f64) -> Vec<usize> {
    (0..cas.len())
        .filter(|&i| {
            ligand
                .iter()
                .any(|l| ((0..3).map(|k| (cas[i][k] - l[k]).powi(2)).sum::<f64>()).sqrt() <= radius)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Move {
    Pair,
    GapB,
    GapA,
}

/// Identity of the best global alignment found by enumerating every path:
/// match +10, mismatch 0, gap run −10 for its first column and −1 after.
/// Ties go to more matches, then to fewer columns. Exponential; keep the
/// inputs to a handful of letters.
pub fn brute_identity(a: &[u8], b: &[u8]) -> f64 {
    fn walk(a: &[u8], b: &[u8], i: usize, j: usize, path: &mut Vec<Move>, best: &mut (i64, i64, i64)) {
        if i == a.len() && j == b.len() {
            let mut score = 0;
            let mut matches = 0;
            let (mut ii, mut jj) = (0, 0);
            for (k, &m) in path.iter().enumerate() {
                match m {
                    Move::Pair => {
                        if a[ii] == b[jj] {
                            score += 10;
                            matches += 1;
                        }
                        ii += 1;
                        jj += 1;
                    }
                    gap => {
                        score += if k > 0 && path[k - 1] == gap { -1 } else { -10 };
                        if gap == Move::GapB {
                            ii += 1;
                        } else {
                            jj += 1;
                        }
                    }
                }
            }
            let cand = (score, matches, -(path.len() as i64));
            if cand > *best {
                *best = cand;
            }
            return;
        }
        if i < a.len() && j < b.len() {
            path.push(Move::Pair);
            walk(a, b, i + 1, j + 1, path, best);
            path.pop();
        }
        if i < a.len() {
            path.push(Move::GapB);
            walk(a, b, i + 1, j, path, best);
            path.pop();
        }
        if j < b.len() {
            path.push(Move::GapA);
            walk(a, b, i, j + 1, path, best);
            path.pop();
        }
    }
    let mut best = (i64::MIN, 0, 0);
    walk(a, b, 0, 0, &mut Vec::new(), &mut best);
    best.1 as f64 / (-best.2) as f64
}

/// Greedy centroid clustering re-executed from a full identity table:
/// longest first, ties by input order, join the earliest centroid at or
/// above the threshold. Returns (cluster per input, centroid per cluster).
pub fn brute_cluster(seqs: &[String], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let n = seqs.len();
    let ident: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| brute_identity(seqs[i].as_bytes(), seqs[j].as_bytes())).collect())
        .collect();
    let mut visit: Vec<usize> = (0..n).collect();
    visit.sort_by_key(|&i| (std::cmp::Reverse(seqs[i].len()), i));
    let mut centroids = Vec::new();
    let mut assign = vec![0; n];
    for i in visit {
        match centroids.iter().position(|&c| ident[i][c] >= threshold) {
            Some(k) => assign[i] = k,
            None => {
                assign[i] = centroids.len();
                centroids.push(i);
            }
        }
    }
    (assign, centroids)
}

/// Records whose sequence equals their cluster centroid's, in input order.
pub fn brute_debias(seqs: &[String], threshold: f64) -> Vec<usize> {
    let (assign, centroids) = brute_cluster(seqs, threshold);
    (0..seqs.len())
        .filter(|&i| seqs[i] == seqs[centroids[assign[i]]])
        .collect()
}

/// CDF of the rotation angle of a uniformly distributed rotation.
pub fn haar_angle_cdf(theta: f64) -> f64 {
    (theta - theta.sin()) / std::f64::consts::PI
}
