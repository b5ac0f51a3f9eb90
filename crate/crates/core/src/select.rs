//! Filter feature-selection scorers and the TF-IDF transform.
//!
//! All scorers work directly on CSR storage: implicit zeros form their own
//! value category, counted from class totals rather than materialized, so
//! peak memory stays proportional to the stored entries plus the
//! per-feature contingency tables.
//!
//! Logarithm conventions: entropy and information gain use base 2, TF-IDF
//! uses the natural logarithm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Which statistic produced a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    Chi2,
    FScore,
    InfoGain,
}

/// Per-feature relevance scores; higher means more class-informative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub method: ScoreMethod,
    pub scores: Vec<f64>,
}

impl FeatureScores {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature_index,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}

/// Number of examples per class, sized by the largest label seen.
fn class_totals(x: &CsrMatrix, y: &[usize]) -> Result<Vec<usize>> {
    if y.len() != x.n_rows() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} rows",
            y.len(),
            x.n_rows()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidArg("empty dataset".into()));
    }
    let n_classes = y.iter().max().unwrap() + 1;
    let mut totals = vec![0usize; n_classes];
    for &c in y {
        totals[c] += 1;
    }
    Ok(totals)
}

/// Per-feature contingency tables over discrete values. Entry `(v, counts)`
/// holds the per-class example counts for value `v`; the implicit-zero
/// category comes first, followed by stored values in ascending order.
/// Categories with no examples are omitted.
fn contingency_tables(
    x: &CsrMatrix,
    y: &[usize],
    totals: &[usize],
) -> Vec<Vec<(f64, Vec<usize>)>> {
    let n_classes = totals.len();
    let mut entries: Vec<(usize, f64, usize)> = Vec::with_capacity(x.nnz());
    for r in 0..x.n_rows() {
        let (cols, vals) = x.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if v != 0.0 {
                entries.push((c, v, y[r]));
            }
        }
    }
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut tables = vec![Vec::new(); x.n_cols()];
    let mut pos = 0;
    while pos < entries.len() {
        let feat = entries[pos].0;
        let mut cats: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut stored_per_class = vec![0usize; n_classes];
        while pos < entries.len() && entries[pos].0 == feat {
            let v = entries[pos].1;
            let mut counts = vec![0usize; n_classes];
            while pos < entries.len() && entries[pos].0 == feat && entries[pos].1 == v {
                counts[entries[pos].2] += 1;
                pos += 1;
            }
            for (s, c) in stored_per_class.iter_mut().zip(&counts) {
                *s += c;
            }
            cats.push((v, counts));
        }
        let zero_counts: Vec<usize> =
            totals.iter().zip(&stored_per_class).map(|(&t, &s)| t - s).collect();
        if zero_counts.iter().any(|&c| c > 0) {
            cats.insert(0, (0.0, zero_counts));
        }
        tables[feat] = cats;
    }
    for (feat, cats) in tables.iter_mut().enumerate() {
        let _ = feat;
        if cats.is_empty() {
            cats.push((0.0, totals.to_vec()));
        }
    }
    tables
}

/// Chi-square independence statistic per feature, treating each distinct
/// value (implicit zero included) as one contingency row. Expected counts
/// come from the marginals; cells with expected count 0 contribute nothing.
/// A single-class labeling yields all-zero scores.
pub fn chi_square_scores(x: &CsrMatrix, y: &[usize]) -> Result<FeatureScores> {
    let totals = class_totals(x, y)?;
    if x.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArg(
            "chi-square requires non-negative feature values".into(),
        ));
    }
    if totals.len() < 2 {
        return Ok(FeatureScores { method: ScoreMethod::Chi2, scores: vec![0.0; x.n_cols()] });
    }
    let n = y.len() as f64;
    let tables = contingency_tables(x, y, &totals);
    let scores = tables
        .iter()
        .map(|cats| {
            let mut chi2 = 0.0;
            for (_, counts) in cats {
                let row_total: usize = counts.iter().sum();
                for (k, &o) in counts.iter().enumerate() {
                    let e = row_total as f64 * totals[k] as f64 / n;
                    if e > 0.0 {
                        let diff = o as f64 - e;
                        chi2 += diff * diff / e;
                    }
                }
            }
            chi2
        })
        .collect();
    Ok(FeatureScores { method: ScoreMethod::Chi2, scores })
}

/// Fisher score per feature: between-class mean spread over pooled
/// within-class variance (population form). A feature whose within-class
/// variance is exactly zero while class means differ scores infinite; a
/// feature constant overall scores 0.
pub fn f_score(x: &CsrMatrix, y: &[usize]) -> Result<FeatureScores> {
    let totals = class_totals(x, y)?;
    let n_classes = totals.len();
    if n_classes < 2 {
        return Err(Error::InvalidArg("F-score needs at least 2 classes".into()));
    }
    let d = x.n_cols();
    let mut sums = vec![0.0f64; d * n_classes];
    let mut stored = vec![0usize; d * n_classes];
    for r in 0..x.n_rows() {
        let (cols, vals) = x.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            sums[c * n_classes + y[r]] += v;
            stored[c * n_classes + y[r]] += 1;
        }
    }
    let mut sqdev = vec![0.0f64; d * n_classes];
    for r in 0..x.n_rows() {
        let (cols, vals) = x.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let k = y[r];
            let mu = sums[c * n_classes + k] / totals[k] as f64;
            sqdev[c * n_classes + k] += (v - mu) * (v - mu);
        }
    }
    let n = y.len() as f64;
    let scores = (0..d)
        .map(|c| {
            let mut overall = 0.0;
            for k in 0..n_classes {
                overall += sums[c * n_classes + k];
            }
            let mu = overall / n;
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..n_classes {
                let n_k = totals[k];
                if n_k == 0 {
                    continue;
                }
                let mu_k = sums[c * n_classes + k] / n_k as f64;
                num += n_k as f64 * (mu_k - mu) * (mu_k - mu);
                let zeros = (n_k - stored[c * n_classes + k]) as f64;
                den += sqdev[c * n_classes + k] + zeros * mu_k * mu_k;
            }
            if den == 0.0 {
                if num == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                num / den
            }
        })
        .collect();
    Ok(FeatureScores { method: ScoreMethod::FScore, scores })
}

fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    h
}

/// Base-2 entropy of a label sequence.
pub fn entropy(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArg("empty dataset".into()));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; n_classes];
    for &c in labels {
        counts[c] += 1;
    }
    Ok(entropy_of_counts(&counts))
}

/// Information gain per feature: the label entropy minus the conditional
/// entropy after partitioning examples by feature value (implicit zero is
/// one partition). Clamped at 0 against rounding.
pub fn info_gain(x: &CsrMatrix, y: &[usize]) -> Result<FeatureScores> {
    let totals = class_totals(x, y)?;
    let h = entropy_of_counts(&totals);
    let n = y.len() as f64;
    let tables = contingency_tables(x, y, &totals);
    let scores = tables
        .iter()
        .map(|cats| {
            let mut cond = 0.0;
            for (_, counts) in cats {
                let size: usize = counts.iter().sum();
                cond += size as f64 / n * entropy_of_counts(counts);
            }
            (h - cond).max(0.0)
        })
        .collect();
    Ok(FeatureScores { method: ScoreMethod::InfoGain, scores })
}

/// Indices of the `k` highest scores, in rank order; ties rank the lower
/// index first, and infinite flags rank above every finite score.
pub fn select_k_best(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArg(format!(
            "cannot select {k} of {} features",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// TF-IDF with logarithmic term frequency `1 + ln(1 + f)` and inverse
/// document frequency `ln(N / df)`, both natural logs. Fitting computes the
/// document frequencies on `counts`; passing `fitted_idf` replays training
/// weights instead. Terms with IDF 0 (present in every training document,
/// or absent from it entirely) have their columns zeroed, which drops those
/// entries from the result.
pub fn tfidf_transform(
    counts: &CsrMatrix,
    fitted_idf: Option<&[f64]>,
) -> Result<(CsrMatrix, Vec<f64>)> {
    if counts.values().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArg("term counts must be non-negative".into()));
    }
    let idf: Vec<f64> = match fitted_idf {
        Some(idf) => {
            if idf.len() != counts.n_cols() {
                return Err(Error::DimMismatch(format!(
                    "{} IDF weights for {} terms",
                    idf.len(),
                    counts.n_cols()
                )));
            }
            idf.to_vec()
        }
        None => {
            let mut df = vec![0usize; counts.n_cols()];
            for r in 0..counts.n_rows() {
                let (cols, vals) = counts.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    if v > 0.0 {
                        df[c] += 1;
                    }
                }
            }
            let n = counts.n_rows() as f64;
            df.iter().map(|&f| if f == 0 { 0.0 } else { (n / f as f64).ln() }).collect()
        }
    };
    let mut rows = Vec::with_capacity(counts.n_rows());
    for r in 0..counts.n_rows() {
        let (cols, vals) = counts.row(r);
        let mut row = Vec::new();
        for (&c, &f) in cols.iter().zip(vals) {
            if f > 0.0 && idf[c] != 0.0 {
                row.push((c, (1.0 + (1.0 + f).ln()) * idf[c]));
            }
        }
        rows.push(row);
    }
    let out = CsrMatrix::from_row_entries(counts.n_rows(), counts.n_cols(), rows)?;
    Ok((out, idf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csr_from_dense_u8(rows: &[Vec<u8>], d: usize) -> CsrMatrix {
        let entries = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(c, &v)| (c, v as f64))
                    .collect()
            })
            .collect();
        CsrMatrix::from_row_entries(rows.len(), d, entries).unwrap()
    }

    /// Dense reference: builds the full value-by-class table per feature
    /// and sums (O-E)^2/E over cells in ascending value order.
    fn chi2_brute_force(rows: &[Vec<u8>], y: &[usize]) -> Vec<f64> {
        let n_classes = y.iter().max().unwrap() + 1;
        let mut totals = vec![0usize; n_classes];
        for &c in y {
            totals[c] += 1;
        }
        let d = rows[0].len();
        let n = y.len() as f64;
        (0..d)
            .map(|i| {
                let mut values: Vec<u8> = rows.iter().map(|r| r[i]).collect();
                values.sort_unstable();
                values.dedup();
                let mut chi2 = 0.0;
                for &v in &values {
                    let mut counts = vec![0usize; n_classes];
                    for (r, &c) in rows.iter().zip(y) {
                        if r[i] == v {
                            counts[c] += 1;
                        }
                    }
                    let row_total: usize = counts.iter().sum();
                    for (k, &o) in counts.iter().enumerate() {
                        let e = row_total as f64 * totals[k] as f64 / n;
                        if e > 0.0 {
                            let diff = o as f64 - e;
                            chi2 += diff * diff / e;
                        }
                    }
                }
                chi2
            })
            .collect()
    }

    /// Dense reference for information gain via explicit partitions.
    fn ig_brute_force(rows: &[Vec<u8>], y: &[usize]) -> Vec<f64> {
        let n_classes = y.iter().max().unwrap() + 1;
        let mut totals = vec![0usize; n_classes];
        for &c in y {
            totals[c] += 1;
        }
        let h = entropy_of_counts(&totals);
        let d = rows[0].len();
        let n = y.len() as f64;
        (0..d)
            .map(|i| {
                let mut values: Vec<u8> = rows.iter().map(|r| r[i]).collect();
                values.sort_unstable();
                values.dedup();
                let mut cond = 0.0;
                for &v in &values {
                    let mut counts = vec![0usize; n_classes];
                    for (r, &c) in rows.iter().zip(y) {
                        if r[i] == v {
                            counts[c] += 1;
                        }
                    }
                    let size: usize = counts.iter().sum();
                    cond += size as f64 / n * entropy_of_counts(counts.as_slice());
                }
                (h - cond).max(0.0)
            })
            .collect()
    }

    #[test]
    fn chi2_matches_brute_force_on_random_instances() {
        let mut rng = crate::rng::RngStream::new(42, 0);
        for _ in 0..200 {
            let n = 2 + rng.next_range(19) as usize;
            let d = 1 + rng.next_range(10) as usize;
            let rows: Vec<Vec<u8>> = (0..n)
                .map(|_| (0..d).map(|_| rng.next_range(3) as u8).collect())
                .collect();
            let y: Vec<usize> = (0..n).map(|_| rng.next_range(2) as usize).collect();
            if y.iter().max() == y.iter().min() {
                continue;
            }
            let x = csr_from_dense_u8(&rows, d);
            let got = chi_square_scores(&x, &y).unwrap().scores;
            let want = chi2_brute_force(&rows, &y);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn chi2_of_feature_equal_to_binary_class_is_four() {
        let rows = vec![vec![0u8], vec![1], vec![0], vec![1]];
        let y = vec![0, 1, 0, 1];
        let x = csr_from_dense_u8(&rows, 1);
        let scores = chi_square_scores(&x, &y).unwrap().scores;
        assert_eq!(scores, vec![4.0]);
    }

    #[test]
    fn chi2_of_class_independent_features_is_zero() {
        // Each class sees the same value distribution, and the second
        // feature is constant.
        let rows = vec![vec![0u8, 2], vec![1, 2], vec![0, 2], vec![1, 2]];
        let y = vec![0, 0, 1, 1];
        let x = csr_from_dense_u8(&rows, 2);
        let scores = chi_square_scores(&x, &y).unwrap().scores;
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    #[test]
    fn chi2_single_class_scores_zero() {
        let x = csr_from_dense_u8(&[vec![1u8], vec![0]], 1);
        let scores = chi_square_scores(&x, &[0, 0]).unwrap().scores;
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn chi2_rejects_negative_values() {
        let x =
            CsrMatrix::from_row_entries(2, 1, vec![vec![(0, -1.0)], vec![(0, 1.0)]]).unwrap();
        assert!(chi_square_scores(&x, &[0, 1]).is_err());
    }

    #[test]
    fn f_score_hand_example() {
        let x = CsrMatrix::from_row_entries(
            4,
            1,
            vec![vec![(0, 1.0)], vec![(0, 2.0)], vec![(0, 3.0)], vec![(0, 4.0)]],
        )
        .unwrap();
        let scores = f_score(&x, &[0, 0, 1, 1]).unwrap().scores;
        assert!((scores[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn f_score_flags_and_fallbacks() {
        // Feature 0: constant overall. Feature 1: constant per class with
        // different means, including an all-zero class.
        let x = CsrMatrix::from_row_entries(
            4,
            2,
            vec![
                vec![(0, 5.0)],
                vec![(0, 5.0)],
                vec![(0, 5.0), (1, 2.0)],
                vec![(0, 5.0), (1, 2.0)],
            ],
        )
        .unwrap();
        let scores = f_score(&x, &[0, 0, 1, 1]).unwrap().scores;
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[1], f64::INFINITY);
    }

    #[test]
    fn f_score_single_class_is_an_error() {
        let x = csr_from_dense_u8(&[vec![1u8], vec![2]], 1);
        assert!(f_score(&x, &[0, 0]).is_err());
    }

    #[test]
    fn entropy_of_balanced_binary_labels_is_one() {
        assert_eq!(entropy(&[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(entropy(&[0, 0, 0]).unwrap(), 0.0);
        assert!(entropy(&[]).is_err());
    }

    #[test]
    fn info_gain_of_label_copy_equals_label_entropy() {
        let rows = vec![vec![0u8], vec![1], vec![0], vec![1], vec![1]];
        let y = vec![0, 1, 0, 1, 1];
        let x = csr_from_dense_u8(&rows, 1);
        let ig = info_gain(&x, &y).unwrap().scores[0];
        let h = entropy(&y).unwrap();
        assert!((ig - h).abs() < 1e-12);
    }

    #[test]
    fn info_gain_of_independent_feature_is_zero() {
        // Product construction: every (value, class) combination equally
        // often.
        let rows = vec![vec![0u8], vec![0], vec![1], vec![1]];
        let y = vec![0, 1, 0, 1];
        let x = csr_from_dense_u8(&rows, 1);
        let ig = info_gain(&x, &y).unwrap().scores[0];
        assert!(ig.abs() < 1e-12);
    }

    #[test]
    fn select_k_best_breaks_ties_by_index_and_ranks_infinities_first() {
        assert_eq!(select_k_best(&[3.0, 1.0, 3.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_k_best(&[1.0, 2.0], 2).unwrap(), vec![1, 0]);
        assert_eq!(
            select_k_best(&[5.0, f64::INFINITY, 9.0], 1).unwrap(),
            vec![1]
        );
        assert!(select_k_best(&[1.0], 2).is_err());
    }

    #[test]
    fn tfidf_matches_direct_formula() {
        // 4 documents; term 0 appears once with count 2, term 1 in all
        // documents.
        let counts = CsrMatrix::from_row_entries(
            4,
            2,
            vec![
                vec![(0, 2.0), (1, 1.0)],
                vec![(1, 1.0)],
                vec![(1, 3.0)],
                vec![(1, 1.0)],
            ],
        )
        .unwrap();
        let (out, idf) = tfidf_transform(&counts, None).unwrap();
        assert!((idf[0] - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(idf[1], 0.0);
        let expect = (1.0 + 3.0f64.ln()) * 4.0f64.ln();
        let (cols, vals) = out.row(0);
        assert_eq!(cols, &[0]);
        assert!((vals[0] - expect).abs() < 1e-12);
        for r in 1..4 {
            assert_eq!(out.row(r).0.len(), 0, "IDF-0 column must be dropped");
        }
    }

    #[test]
    fn tfidf_replays_fitted_weights() {
        let train =
            CsrMatrix::from_row_entries(2, 2, vec![vec![(0, 1.0)], vec![(1, 1.0)]]).unwrap();
        let (_, idf) = tfidf_transform(&train, None).unwrap();
        let test = CsrMatrix::from_row_entries(1, 2, vec![vec![(0, 1.0), (1, 4.0)]]).unwrap();
        let (out, replayed) = tfidf_transform(&test, Some(&idf)).unwrap();
        assert_eq!(replayed, idf);
        let (cols, vals) = out.row(0);
        assert_eq!(cols, &[0, 1]);
        assert!((vals[0] - (1.0 + 2.0f64.ln()) * 2.0f64.ln()).abs() < 1e-12);
        assert!((vals[1] - (1.0 + 5.0f64.ln()) * 2.0f64.ln()).abs() < 1e-12);
        assert!(tfidf_transform(&test, Some(&idf[..1])).is_err());
    }

    #[test]
    fn tfidf_rejects_negative_counts() {
        let counts =
            CsrMatrix::from_row_entries(1, 1, vec![vec![(0, -2.0)]]).unwrap();
        assert!(tfidf_transform(&counts, None).is_err());
    }

    fn tiny_labeled_dataset() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<usize>)> {
        (2usize..12, 1usize..6).prop_flat_map(|(n, d)| {
            (
                proptest::collection::vec(proptest::collection::vec(0u8..3, d), n),
                proptest::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn scores_are_equivariant_under_example_and_feature_permutation(
            (rows, y) in tiny_labeled_dataset(),
            seed in 0u64..1000,
        ) {
            prop_assume!(y.iter().max() != y.iter().min());
            let n = rows.len();
            let d = rows[0].len();
            let mut row_perm: Vec<usize> = (0..n).collect();
            let mut col_perm: Vec<usize> = (0..d).collect();
            let mut rng = crate::rng::RngStream::new(seed, 0);
            rng.shuffle(&mut row_perm);
            rng.shuffle(&mut col_perm);

            let permuted_rows: Vec<Vec<u8>> = row_perm
                .iter()
                .map(|&r| col_perm.iter().map(|&c| rows[r][c]).collect())
                .collect();
            let permuted_y: Vec<usize> = row_perm.iter().map(|&r| y[r]).collect();

            let x = csr_from_dense_u8(&rows, d);
            let xp = csr_from_dense_u8(&permuted_rows, d);
            for scorer in [chi_square_scores, info_gain] {
                let base = scorer(&x, &y).unwrap().scores;
                let perm = scorer(&xp, &permuted_y).unwrap().scores;
                for (new_idx, &old) in col_perm.iter().enumerate() {
                    prop_assert!((perm[new_idx] - base[old]).abs() < 1e-9);
                }
            }
            let base = f_score(&x, &y);
            let perm = f_score(&xp, &permuted_y);
            if let (Ok(base), Ok(perm)) = (base, perm) {
                for (new_idx, &old) in col_perm.iter().enumerate() {
                    let (b, p) = (base.scores[old], perm.scores[new_idx]);
                    prop_assert!(
                        (b.is_infinite() && p.is_infinite()) || (b - p).abs() < 1e-9
                    );
                }
            }
        }

        #[test]
        fn info_gain_is_bounded_by_label_entropy(
            (rows, y) in tiny_labeled_dataset(),
        ) {
            let x = csr_from_dense_u8(&rows, rows[0].len());
            let h = entropy(&y).unwrap();
            for ig in info_gain(&x, &y).unwrap().scores {
                prop_assert!(ig >= 0.0);
                prop_assert!(ig <= h + 1e-12);
            }
        }

        #[test]
        fn info_gain_matches_brute_force(
            (rows, y) in tiny_labeled_dataset(),
        ) {
            let x = csr_from_dense_u8(&rows, rows[0].len());
            let got = info_gain(&x, &y).unwrap().scores;
            let want = ig_brute_force(&rows, &y);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-12);
            }
        }
    }
}
