//! Bipartite matching between prediction slots and ground-truth objects.
//!
//! [`hungarian`] is a dense O(n^2 m) shortest-augmenting-path solver with
//! dual potentials. Among equal-cost optimal assignments it returns the one
//! whose target -> slot sequence is lexicographically smallest, so that
//! training is reproducible even on exactly tied costs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};

/// Dense row-major cost matrix: rows are prediction slots, columns targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::domain(format!(
                "cost matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|c| !c.is_finite()) {
            return Err(Error::domain(format!("non-finite cost {bad}")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Result of an assignment: `(prediction, target)` pairs sorted by target.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl MatchResult {
    /// The matched prediction indices, ascending.
    pub fn matched_predictions(&self) -> Vec<usize> {
        let mut z: Vec<usize> = self.pairs.iter().map(|&(p, _)| p).collect();
        z.sort_unstable();
        z
    }

    /// Slot matched to `target`, if any.
    pub fn prediction_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, t)| t == target).map(|&(p, _)| p)
    }
}

struct Solution {
    // col assigned to each row
    assign: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

// Requires n <= m. `cost(i, j)` for row i < n, col j < m.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Solution {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Solution {
        assign,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

fn total(assign: &[usize], cost: &impl Fn(usize, usize) -> f64) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost(i, j)).sum()
}

/// Optimal assignment with lexicographically smallest row -> col sequence.
fn solve_lexicographic(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let sol = solve(n, m, &cost);
    let optimum = total(&sol.assign, &cost);
    let scale = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .fold(1.0f64, |acc, (i, j)| acc.max(cost(i, j).abs()));
    let tol = 1e-9 * scale * (n as f64);

    let mut current = sol.assign.clone();
    let mut col_fixed = vec![false; m];
    for row in 0..n {
        let assigned = current[row];
        for col in 0..assigned {
            if col_fixed[col] {
                continue;
            }
            // Only tight edges can belong to an optimal assignment.
            if cost(row, col) - sol.u[row] - sol.v[col] > tol {
                continue;
            }
            let candidate = complete_with(row, col, &current, &col_fixed, n, m, &cost);
            if total(&candidate, &cost) <= optimum + tol {
                current = candidate;
                break;
            }
        }
        col_fixed[current[row]] = true;
    }
    current
}

// Keeps rows < `row` as in `prefix`, pins `row` to `col`, and solves the rest.
fn complete_with(
    row: usize,
    col: usize,
    prefix: &[usize],
    col_fixed: &[bool],
    n: usize,
    m: usize,
    cost: &impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let mut out = prefix[..row].to_vec();
    out.push(col);
    let free_rows: Vec<usize> = (row + 1..n).collect();
    if free_rows.is_empty() {
        return out;
    }
    let free_cols: Vec<usize> = (0..m).filter(|&j| !col_fixed[j] && j != col).collect();
    let sub = solve(free_rows.len(), free_cols.len(), |i, j| {
        cost(free_rows[i], free_cols[j])
    });
    out.extend(sub.assign.iter().map(|&j| free_cols[j]));
    out
}

/// Solves the linear assignment problem on `c`, returning `min(rows, cols)`
/// pairs that minimize the summed cost.
pub fn hungarian(c: &CostMatrix) -> MatchResult {
    if c.rows == 0 || c.cols == 0 {
        return MatchResult::default();
    }
    let mut pairs: Vec<(usize, usize)> = if c.cols <= c.rows {
        solve_lexicographic(c.cols, c.rows, |t, p| c.get(p, t))
            .into_iter()
            .enumerate()
            .map(|(t, p)| (p, t))
            .collect()
    } else {
        solve_lexicographic(c.rows, c.cols, |p, t| c.get(p, t))
            .into_iter()
            .enumerate()
            .collect()
    };
    pairs.sort_by_key(|&(p, t)| (t, p));
    let cost = pairs.iter().map(|&(p, t)| c.get(p, t)).sum();
    MatchResult { pairs, cost }
}

/// Weights of the three matching-cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// A ground-truth object as seen by the matcher: head class index and box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchTarget {
    pub class: usize,
    pub bbox: BBox,
}

/// Builds the set-prediction cost
/// `w_cls (1 - p[class]) + w_l1 |b - t|_1 + w_giou (1 - giou(b, t))`
/// for every slot/target pair and solves it.
pub fn detr_match(
    class_probs: &[Vec<f64>],
    boxes: &[BBox],
    targets: &[MatchTarget],
    weights: MatchWeights,
) -> Result<MatchResult> {
    if class_probs.len() != boxes.len() {
        return Err(Error::domain(format!(
            "{} probability rows for {} boxes",
            class_probs.len(),
            boxes.len()
        )));
    }
    if targets.is_empty() {
        return Ok(MatchResult::default());
    }
    let slots = boxes.len();
    if targets.len() > slots {
        return Err(Error::config(format!(
            "{} targets exceed {slots} prediction slots",
            targets.len()
        )));
    }
    let mut data = Vec::with_capacity(slots * targets.len());
    for (probs, b) in class_probs.iter().zip(boxes) {
        for t in targets {
            let p = *probs.get(t.class).ok_or_else(|| {
                Error::domain(format!(
                    "target class {} outside {} known classes",
                    t.class,
                    probs.len()
                ))
            })?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("class probability {p} outside [0, 1]")));
            }
            let c = weights.class * (1.0 - p)
                + weights.l1 * b.l1_distance(&t.bbox)
                + weights.giou * (1.0 - giou(b, &t.bbox)?);
            data.push(c);
        }
    }
    Ok(hungarian(&CostMatrix::new(slots, targets.len(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Exhaustive search over injections of targets into slots, visited in
    // lexicographic order so the first minimum is the lexicographic one.
    fn brute_force(c: &CostMatrix) -> (f64, Vec<usize>) {
        fn rec(
            c: &CostMatrix,
            t: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            acc: f64,
            best: &mut (f64, Vec<usize>),
        ) {
            if t == c.cols() {
                if acc < best.0 {
                    *best = (acc, cur.clone());
                }
                return;
            }
            for p in 0..c.rows() {
                if !used[p] {
                    used[p] = true;
                    cur.push(p);
                    rec(c, t + 1, used, cur, acc + c.get(p, t), best);
                    cur.pop();
                    used[p] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(c, 0, &mut vec![false; c.rows()], &mut vec![], 0.0, &mut best);
        best
    }

    #[test]
    fn one_by_one() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![0.0]]).unwrap());
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let r = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap());
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.cost, 2.0);
    }

    #[test]
    fn three_by_three() {
        let c = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
        let r = hungarian(&c);
        assert_eq!(r.cost, 5.0);
        let mut pairs = r.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn empty_matrix_gives_empty_match() {
        let r = hungarian(&CostMatrix::new(4, 0, vec![]).unwrap());
        assert!(r.pairs.is_empty());
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn non_finite_cost_rejected() {
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn wide_matrix_assigns_every_row() {
        let c = CostMatrix::from_rows(&[vec![3.0, 1.0, 2.0], vec![1.0, 5.0, 0.5]]).unwrap();
        let r = hungarian(&c);
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.cost, 1.5);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = CostMatrix::from_rows(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = CostMatrix::new(4, 2, vec![0.0; 8]).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn matches_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let cols = rng.random_range(1..=5);
            let rows = rng.random_range(cols..=6);
            // Small integer range forces frequent exact ties.
            let data = (0..rows * cols).map(|_| rng.random_range(0..4) as f64).collect();
            let c = CostMatrix::new(rows, cols, data).unwrap();
            let (best, seq) = brute_force(&c);
            let r = hungarian(&c);
            assert_eq!(r.cost, best);
            let got: Vec<usize> = r.pairs.iter().map(|&(p, _)| p).collect();
            assert_eq!(got, seq, "{c:?}");
        }
    }

    #[test]
    fn constant_shift_keeps_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=rows);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
            let shifted = data.iter().map(|x| x + 3.5).collect();
            let a = hungarian(&CostMatrix::new(rows, cols, data).unwrap());
            let b = hungarian(&CostMatrix::new(rows, cols, shifted).unwrap());
            assert_eq!(a.pairs, b.pairs);
        }
    }

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn detr_match_zero_targets() {
        let r = detr_match(&[vec![0.5]], &[bx(0.5, 0.5, 0.2, 0.2)], &[], MatchWeights::default()).unwrap();
        assert!(r.pairs.is_empty());
    }

    #[test]
    fn detr_match_prefers_dominant_slot() {
        let target = bx(0.3, 0.3, 0.2, 0.2);
        let probs = vec![vec![0.9], vec![0.1]];
        let boxes = vec![target, bx(0.8, 0.8, 0.1, 0.1)];
        let r = detr_match(
            &probs,
            &boxes,
            &[MatchTarget { class: 0, bbox: target }],
            MatchWeights::default(),
        )
        .unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
    }

    #[test]
    fn detr_match_cardinality() {
        let probs = vec![vec![0.3, 0.6]; 3];
        let boxes = vec![bx(0.2, 0.2, 0.1, 0.1), bx(0.5, 0.5, 0.2, 0.2), bx(0.7, 0.3, 0.2, 0.1)];
        let targets = [
            MatchTarget {
                class: 0,
                bbox: bx(0.5, 0.5, 0.2, 0.25),
            },
            MatchTarget {
                class: 1,
                bbox: bx(0.2, 0.25, 0.1, 0.1),
            },
        ];
        let r = detr_match(&probs, &boxes, &targets, MatchWeights::default()).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_ne!(r.pairs[0].0, r.pairs[1].0);
    }

    #[test]
    fn detr_match_rejects_too_many_targets() {
        let t = MatchTarget {
            class: 0,
            bbox: bx(0.5, 0.5, 0.2, 0.2),
        };
        let err = detr_match(&[vec![0.5]], &[t.bbox], &[t, t], MatchWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn detr_match_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rbox = |rng: &mut ChaCha8Rng| {
            bx(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
            )
        };
        for _ in 0..100 {
            let slots = 6;
            let probs: Vec<Vec<f64>> = (0..slots).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
            let boxes: Vec<BBox> = (0..slots).map(|_| rbox(&mut rng)).collect();
            let targets: Vec<MatchTarget> = (0..4)
                .map(|_| MatchTarget {
                    class: rng.random_range(0..3),
                    bbox: rbox(&mut rng),
                })
                .collect();
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<MatchTarget> = perm.iter().map(|&i| targets[i]).collect();
            let a = detr_match(&probs, &boxes, &targets, MatchWeights::default()).unwrap();
            let b = detr_match(&probs, &boxes, &permuted, MatchWeights::default()).unwrap();
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                assert_eq!(a.prediction_for(old_idx), b.prediction_for(new_idx));
            }
        }
    }
}
