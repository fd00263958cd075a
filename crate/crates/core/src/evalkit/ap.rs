use ndarray::Array2;

/// Detection indices by descending score; equal scores keep input order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching in score order. Each detection takes the unmatched ground
/// truth with the highest IoU at or above `threshold`. The result is indexed
/// like `scores`. `ious` is `[detections, ground truths]`.
pub fn greedy_match(scores: &[f64], ious: &Array2<f64>, threshold: f64) -> Vec<Option<usize>> {
    assert_eq!(ious.nrows(), scores.len(), "one IoU row per detection");
    let mut taken = vec![false; ious.ncols()];
    let mut out = vec![None; scores.len()];
    for i in rank_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in ious.row(i).iter().enumerate() {
            if !taken[j] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// All-point AP from TP flags in rank order, using the precision envelope.
pub fn ap_from_ranked(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

pub fn average_precision(scores: &[f64], ious: &Array2<f64>, threshold: f64) -> f64 {
    let matches = greedy_match(scores, ious, threshold);
    let tp: Vec<bool> = rank_order(scores).into_iter().map(|i| matches[i].is_some()).collect();
    ap_from_ranked(&tp, ious.ncols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert!((ap_from_ranked(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(ap_from_ranked(&[true], 1), 1.0);
        assert_eq!(ap_from_ranked(&[], 3), 0.0);
        assert_eq!(ap_from_ranked(&[true, true], 0), 0.0);
        let ious = Array2::from_shape_vec((1, 1), vec![0.7]).unwrap();
        assert_eq!(average_precision(&[0.3], &ious, 0.5), 1.0);
    }

    #[test]
    fn one_ground_truth_is_matched_once() {
        let ious = Array2::from_shape_vec((3, 1), vec![0.9, 0.95, 0.8]).unwrap();
        let m = greedy_match(&[0.9, 0.5, 0.7], &ious, 0.5);
        assert_eq!(m, vec![Some(0), None, None]);
    }

    proptest! {
        #[test]
        fn monotone_score_transform_is_invariant(
            scores in prop::collection::vec(0.01f64..1.0, 1..7),
            ious in prop::collection::vec(0.0f64..1.0, 18),
            n_gt in 1usize..4,
        ) {
            let n = scores.len();
            let m = Array2::from_shape_fn((n, n_gt), |(i, j)| ious[(i * 3 + j) % 18]);
            let a = average_precision(&scores, &m, 0.5);
            let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 7.0 + 1.0).collect();
            prop_assert_eq!(a, average_precision(&warped, &m, 0.5));
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
