//! One-to-one assignment between predictions and ground truths.
//!
//! The cost of pairing prediction `i` with ground truth `j` is
//! `1 - IoU(pred_i, gt_j)`. Rectangular problems are padded to a square
//! matrix with cost 1.0, the cost of a pairing with no overlap, and padded
//! assignments are discarded.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, GroundTruthBox, ImageId};

/// Default IoU floor for calibration pairing.
pub const DEFAULT_MIN_IOU: f64 = 0.1;

const PAD_COST: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred: Detection,
    pub gt: GroundTruthBox,
    pub iou: f64,
}

impl MatchedPair {
    /// Pairs a prediction with a ground truth from the same image.
    pub fn new(pred: Detection, gt: GroundTruthBox) -> Result<Self> {
        if pred.image_id() != gt.image_id() {
            return Err(Error::MixedImageIds(
                pred.image_id().to_string(),
                gt.image_id().to_string(),
            ));
        }
        let iou = iou(pred.bbox(), gt.bbox());
        Ok(MatchedPair { pred, gt, iou })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<Detection>,
    pub unmatched_gts: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub pairs: usize,
    pub unmatched_preds: usize,
    pub unmatched_gts: usize,
}

impl MatchResult {
    pub fn counts(&self) -> MatchCounts {
        MatchCounts {
            pairs: self.pairs.len(),
            unmatched_preds: self.unmatched_preds.len(),
            unmatched_gts: self.unmatched_gts.len(),
        }
    }
}

fn common_image<'a>(
    preds: &'a [Detection],
    gts: &'a [GroundTruthBox],
) -> Result<Option<&'a ImageId>> {
    let mut ids = preds
        .iter()
        .map(Detection::image_id)
        .chain(gts.iter().map(GroundTruthBox::image_id));
    let first = match ids.next() {
        Some(id) => id,
        None => return Ok(None),
    };
    for id in ids {
        if id != first {
            return Err(Error::MixedImageIds(first.to_string(), id.to_string()));
        }
    }
    Ok(Some(first))
}

/// `cost[i][j] = 1 - IoU(pred_i, gt_j)`; all inputs must share an image id.
pub fn build_cost_matrix(preds: &[Detection], gts: &[GroundTruthBox]) -> Result<Vec<Vec<f64>>> {
    common_image(preds, gts)?;
    Ok(preds
        .iter()
        .map(|p| gts.iter().map(|g| 1.0 - iou(p.bbox(), g.bbox())).collect())
        .collect())
}

/// Minimum-cost perfect assignment on a square matrix.
///
/// Returns `assignment[row] = column`. Shortest augmenting path with row and
/// column potentials, O(n³). Among assignments of equal total cost the
/// lexicographically smallest `(row, column)` pairing is returned.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let (mut assignment, u, v) = shortest_augmenting_path(cost);
    lexicographic_refine(cost, &u, &v, &mut assignment);
    assignment
}

/// Reduced costs at or below this count as zero when looking for
/// alternative optima.
const TIGHT_TOL: f64 = 1e-9;

/// Total cost summed in ascending order, so equal multisets give equal sums.
fn total_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let mut c: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .collect();
    c.sort_by(f64::total_cmp);
    c.into_iter().sum()
}

/// Walks rows in order and moves each to the smallest column reachable by
/// an alternating cycle of zero reduced cost through later rows, keeping
/// the move only when the total cost is unchanged.
fn lexicographic_refine(cost: &[Vec<f64>], u: &[f64], v: &[f64], assignment: &mut [usize]) {
    let n = assignment.len();
    let tight = |i: usize, j: usize| cost[i][j] - u[i + 1] - v[j + 1] <= TIGHT_TOL;
    let mut owner = vec![0usize; n];
    for (i, &j) in assignment.iter().enumerate() {
        owner[j] = i;
    }
    let mut best = total_cost(cost, assignment);

    for i in 0..n {
        let target = assignment[i];
        for j in 0..target {
            let k = owner[j];
            if k < i || !tight(i, j) {
                continue;
            }
            // breadth-first search over later rows for a path k -> ... -> target
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
            let mut seen_col = vec![false; n];
            seen_col[j] = true;
            let mut queue = std::collections::VecDeque::from([k]);
            let mut visited_row = vec![false; n];
            visited_row[k] = true;
            let mut end = None;
            'search: while let Some(r) = queue.pop_front() {
                for c in 0..n {
                    if seen_col[c] || !tight(r, c) {
                        continue;
                    }
                    seen_col[c] = true;
                    if c == target {
                        end = Some((r, c));
                        break 'search;
                    }
                    let next = owner[c];
                    if next > i && !visited_row[next] {
                        visited_row[next] = true;
                        parent[next] = Some((r, c));
                        queue.push_back(next);
                    }
                }
            }
            let Some((mut r, mut c)) = end else { continue };
            let mut trial = assignment.to_vec();
            trial[i] = j;
            loop {
                trial[r] = c;
                match parent[r] {
                    // pr moves onto pc, the column r vacates
                    Some((pr, pc)) => {
                        c = pc;
                        r = pr;
                    }
                    None => break,
                }
            }
            let t = total_cost(cost, &trial);
            if t <= best {
                best = t;
                assignment.copy_from_slice(&trial);
                for (row, &col) in assignment.iter().enumerate() {
                    owner[col] = row;
                }
                break;
            }
        }
    }
}

fn shortest_augmenting_path(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    debug_assert!(cost.iter().all(|r| r.len() == n));

    // 1-based; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    (assignment, u, v)
}

/// Index form of [`hungarian_match`]: `(pred index, gt index, iou)` for
/// every kept pair, in prediction order.
pub fn hungarian_assign(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    min_iou: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    if !(0.0..=1.0).contains(&min_iou) {
        return Err(Error::InvalidArgument(format!(
            "min_iou must lie in [0, 1], got {min_iou}"
        )));
    }
    let cost = build_cost_matrix(preds, gts)?;
    let n = preds.len().max(gts.len());
    let square: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match cost.get(i).and_then(|r| r.get(j)) {
                    Some(&c) => c,
                    None => PAD_COST,
                })
                .collect()
        })
        .collect();
    let assignment = solve_assignment(&square);

    let mut kept = Vec::new();
    for (i, pred) in preds.iter().enumerate() {
        let j = assignment[i];
        if j < gts.len() {
            let overlap = iou(pred.bbox(), gts[j].bbox());
            if overlap >= min_iou {
                kept.push((i, j, overlap));
            }
        }
    }
    Ok(kept)
}

/// Optimal one-to-one matching within a single image.
///
/// Assigned pairs whose IoU falls below `min_iou` are demoted to unmatched.
pub fn hungarian_match(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    min_iou: f64,
) -> Result<MatchResult> {
    let kept = hungarian_assign(preds, gts, min_iou)?;
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for &(i, j, overlap) in &kept {
        pred_used[i] = true;
        gt_used[j] = true;
        result.pairs.push(MatchedPair {
            pred: preds[i].clone(),
            gt: gts[j].clone(),
            iou: overlap,
        });
    }
    result.unmatched_preds = preds
        .iter()
        .zip(&pred_used)
        .filter(|(_, &u)| !u)
        .map(|(p, _)| p.clone())
        .collect();
    result.unmatched_gts = gts
        .iter()
        .zip(&gt_used)
        .filter(|(_, &u)| !u)
        .map(|(g, _)| g.clone())
        .collect();
    Ok(result)
}

/// Per-image matching over a whole dataset, concatenated in sorted image-id
/// order. Images run in parallel; the output does not depend on scheduling.
pub fn match_dataset(
    preds_by_image: &BTreeMap<ImageId, Vec<Detection>>,
    gts_by_image: &BTreeMap<ImageId, Vec<GroundTruthBox>>,
    min_iou: f64,
) -> Result<MatchResult> {
    let images: BTreeSet<&ImageId> = preds_by_image.keys().chain(gts_by_image.keys()).collect();
    let images: Vec<&ImageId> = images.into_iter().collect();
    let per_image: Vec<Result<MatchResult>> = images
        .par_iter()
        .map(|id| {
            let preds = preds_by_image.get(*id).map(Vec::as_slice).unwrap_or(&[]);
            let gts = gts_by_image.get(*id).map(Vec::as_slice).unwrap_or(&[]);
            hungarian_match(preds, gts, min_iou)
        })
        .collect();

    let mut out = MatchResult::default();
    for r in per_image {
        let r = r?;
        out.pairs.extend(r.pairs);
        out.unmatched_preds.extend(r.unmatched_preds);
        out.unmatched_gts.extend(r.unmatched_gts);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn pred(img: &str, b: [f64; 4]) -> Detection {
        Detection::single_class(img, BBox::from_array(b).unwrap(), 0.9).unwrap()
    }

    fn gt(img: &str, b: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox::new(img, BBox::from_array(b).unwrap(), 0).unwrap()
    }

    /// Boxes on a unit-height strip so that IoU is a 1-D overlap ratio.
    /// gt0 = [0,10], gt1 = [100,110].
    /// pred0 = [0,8]       -> IoU(gt0) = 0.8
    /// pred1 = [100,109]   -> IoU(gt1) = 0.9
    fn two_by_two() -> (Vec<Detection>, Vec<GroundTruthBox>) {
        let gts = vec![
            gt("a", [0.0, 0.0, 10.0, 1.0]),
            gt("a", [100.0, 0.0, 110.0, 1.0]),
        ];
        let preds = vec![
            pred("a", [0.0, 0.0, 8.0, 1.0]),
            pred("a", [100.0, 0.0, 109.0, 1.0]),
        ];
        (preds, gts)
    }

    #[test]
    fn cost_matrix_examples() {
        let b = [0.0, 0.0, 4.0, 4.0];
        assert_eq!(
            build_cost_matrix(&[pred("a", b)], &[gt("a", b)]).unwrap(),
            vec![vec![0.0]]
        );
        let far = [10.0, 10.0, 12.0, 12.0];
        assert_eq!(
            build_cost_matrix(&[pred("a", far)], &[gt("a", b)]).unwrap(),
            vec![vec![1.0]]
        );
        assert!(matches!(
            build_cost_matrix(&[pred("a", b)], &[gt("b", b)]),
            Err(Error::MixedImageIds(..))
        ));
    }

    #[test]
    fn cost_matrix_is_one_minus_iou() {
        let (preds, gts) = two_by_two();
        let cost = build_cost_matrix(&preds, &gts).unwrap();
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                assert_eq!(cost[i][j], 1.0 - iou(p.bbox(), g.bbox()));
            }
        }
        assert!((cost[0][0] - 0.2).abs() < 1e-12);
        assert!((cost[1][1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn solver_matches_both_permutations_oracle() {
        // iou [[0.8,0.1],[0.2,0.9]]
        let cost = vec![vec![0.2, 0.9], vec![0.8, 0.1]];
        let identity = cost[0][0] + cost[1][1];
        let swapped = cost[0][1] + cost[1][0];
        assert!(identity < swapped);
        assert_eq!(solve_assignment(&cost), vec![0, 1]);
    }

    #[test]
    fn hungarian_examples() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let r = hungarian_match(&[pred("a", [0.0, 0.0, 10.0, 9.0])], &[gt("a", b)], 0.1).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pairs[0].iou - 0.9).abs() < 1e-12);

        let (preds, gts) = two_by_two();
        let r = hungarian_match(&preds, &gts, 0.1).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.pairs[0].gt, gts[0]);
        assert_eq!(r.pairs[1].gt, gts[1]);

        // IoU 0.05 < 0.1 floor
        let r = hungarian_match(&[pred("a", [0.0, 0.0, 10.0, 0.5])], &[gt("a", b)], 0.1).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_preds.len(), 1);
        assert_eq!(r.unmatched_gts.len(), 1);
    }

    #[test]
    fn empty_and_rectangular_inputs() {
        let r = hungarian_match(&[], &[], 0.1).unwrap();
        assert_eq!(r, MatchResult::default());

        let b = [0.0, 0.0, 10.0, 10.0];
        let preds = vec![pred("a", [50.0, 50.0, 60.0, 60.0]), pred("a", b)];
        let r = hungarian_match(&preds, &[gt("a", b)], 0.1).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].pred, preds[1]);
        assert_eq!(r.unmatched_preds, vec![preds[0].clone()]);

        let r = hungarian_match(&[], &[gt("a", b)], 0.1).unwrap();
        assert_eq!(r.unmatched_gts.len(), 1);
    }

    #[test]
    fn raising_min_iou_never_adds_pairs() {
        let (preds, gts) = two_by_two();
        let mut last = usize::MAX;
        for k in 0..=10 {
            let n = hungarian_match(&preds, &gts, k as f64 / 10.0)
                .unwrap()
                .pairs
                .len();
            assert!(n <= last);
            last = n;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn dataset_matching_is_sorted_by_image() {
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        assert!(match_dataset(&preds, &gts, 0.1).unwrap().pairs.is_empty());
        for img in ["b", "a"] {
            let b = [0.0, 0.0, 4.0, 4.0];
            preds.insert(ImageId::from(img), vec![pred(img, b)]);
            gts.insert(ImageId::from(img), vec![gt(img, b)]);
        }
        gts.insert(ImageId::from("c"), vec![gt("c", [0.0, 0.0, 1.0, 1.0])]);
        let r = match_dataset(&preds, &gts, 0.1).unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.pairs[0].pred.image_id().as_str(), "a");
        assert_eq!(r.counts().unmatched_gts, 1);
    }
    fn lexicographic_oracle(cost: &[Vec<f64>]) -> Vec<usize> {
        fn go(
            cost: &[Vec<f64>],
            row: usize,
            cur: &mut Vec<usize>,
            best: &mut Option<(f64, Vec<usize>)>,
        ) {
            let n = cost.len();
            if row == n {
                let t = total_cost(cost, cur);
                if best
                    .as_ref()
                    .is_none_or(|(b, a)| t < *b || (t == *b && *cur < *a))
                {
                    *best = Some((t, cur.clone()));
                }
                return;
            }
            for j in 0..n {
                if !cur.contains(&j) {
                    cur.push(j);
                    go(cost, row + 1, cur, best);
                    cur.pop();
                }
            }
        }
        let mut best = None;
        go(cost, 0, &mut Vec::new(), &mut best);
        best.map(|(_, a)| a).unwrap_or_default()
    }

    #[test]
    fn ties_resolve_to_lowest_indices() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let preds = vec![pred("a", b), pred("a", b), pred("a", b)];
        let gts = vec![gt("a", b), gt("a", b)];
        let kept = hungarian_assign(&preds, &gts, 0.1).unwrap();
        let idx: Vec<(usize, usize)> = kept.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(idx, vec![(0, 0), (1, 1)]);

        let flat = vec![vec![1.0; 4]; 4];
        assert_eq!(solve_assignment(&flat), vec![0, 1, 2, 3]);
    }

    proptest::proptest! {
        #[test]
        fn assignment_is_lexicographically_smallest_optimum(
            n in 1usize..6,
            raw in proptest::collection::vec(0u8..3, 36),
        ) {
            let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(raw[i * 6 + j])).collect()).collect();
            proptest::prop_assert_eq!(solve_assignment(&cost), lexicographic_oracle(&cost));
        }
    }
}
