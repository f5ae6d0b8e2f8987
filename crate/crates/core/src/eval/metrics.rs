use std::collections::BTreeMap;

use crate::error::{Error, Result};

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

type Ngram = Vec<String>;

struct Counts {
    grams: [BTreeMap<Ngram, f64>; CIDER_N],
    words: usize,
}

fn count_ngrams(text: &str) -> Counts {
    let tokens = tokenize(text);
    let mut grams: [BTreeMap<Ngram, f64>; CIDER_N] = Default::default();
    for (n, table) in grams.iter_mut().enumerate() {
        for w in tokens.windows(n + 1) {
            *table.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    Counts {
        grams,
        words: tokens.len(),
    }
}

struct Weighted {
    vec: [BTreeMap<Ngram, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    words: usize,
}

fn weigh(counts: &Counts, df: &BTreeMap<Ngram, f64>, log_n: f64) -> Weighted {
    let mut vec: [BTreeMap<Ngram, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        for (g, tf) in &counts.grams[n] {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf * (log_n - d);
            norm[n] += w * w;
            vec[n].insert(g.clone(), w);
        }
        norm[n] = norm[n].sqrt();
    }
    Weighted {
        vec,
        norm,
        words: counts.words,
    }
}

fn similarity(hyp: &Weighted, reference: &Weighted) -> [f64; CIDER_N] {
    let delta = hyp.words as f64 - reference.words as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; CIDER_N];
    for n in 0..CIDER_N {
        let mut v = 0.0;
        for (g, h) in &hyp.vec[n] {
            if let Some(r) = reference.vec[n].get(g) {
                v += h.min(*r) * r;
            }
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            v /= hyp.norm[n] * reference.norm[n];
        }
        out[n] = v * penalty;
    }
    out
}

/// Per-query CIDEr-D scores. Document frequencies come from the references of
/// all queries together.
pub fn cider_d_per_query(predictions: &[String], references: &[Vec<String>]) -> Result<Vec<f64>> {
    if predictions.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} reference sets",
            predictions.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Eval(format!("query {i} has no references")));
    }
    let refs: Vec<Vec<Counts>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| count_ngrams(r)).collect())
        .collect();
    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for rs in &refs {
        let mut seen: Vec<&Ngram> = rs.iter().flat_map(|c| c.grams.iter().flat_map(|t| t.keys())).collect();
        seen.sort();
        seen.dedup();
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (references.len() as f64).ln();
    Ok(predictions
        .iter()
        .zip(&refs)
        .map(|(p, rs)| {
            let hyp = weigh(&count_ngrams(p), &df, log_n);
            let mut acc = [0.0; CIDER_N];
            for r in rs {
                let s = similarity(&hyp, &weigh(r, &df, log_n));
                acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
            let mean_n = acc.iter().sum::<f64>() / CIDER_N as f64;
            mean_n / rs.len() as f64 * 10.0
        })
        .collect())
}

/// Corpus CIDEr-D: the mean of [`cider_d_per_query`].
pub fn cider_d(predictions: &[String], references: &[Vec<String>]) -> Result<f64> {
    let scores = cider_d_per_query(predictions, references)?;
    if scores.is_empty() {
        return Err(Error::Eval("no predictions to score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Lowercase, punctuation removed, articles dropped, whitespace collapsed.
pub fn normalize_answer(answer: &str) -> String {
    tokenize(answer)
        .into_iter()
        .filter(|w| !matches!(w.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `min(#matching annotators / 3, 1)` after normalization.
pub fn vqa_accuracy(prediction: &str, ground_truth: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    let matches = ground_truth.iter().filter(|g| normalize_answer(g) == p).count();
    (matches as f64 / 3.0).min(1.0)
}

/// Area under the ROC curve with half credit for ties, via mid-ranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("non-finite class score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based mid-rank of the tie group i..=j
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn disjoint_and_empty_predictions_score_zero() {
        let refs = vec![s(&["a dog runs"]), s(&["a cat sleeps"])];
        assert_eq!(cider_d(&s(&["purple", "zebra"]), &refs).unwrap(), 0.0);
        assert_eq!(cider_d(&s(&["", ""]), &refs).unwrap(), 0.0);
    }

    #[test]
    fn single_image_corpus_is_zero() {
        assert_eq!(cider_d(&s(&["a dog"]), &[s(&["a dog"])]).unwrap(), 0.0);
    }

    #[test]
    fn empty_reference_set_fails() {
        assert!(cider_d(&s(&["x"]), &[vec![]]).is_err());
    }

    #[test]
    fn exact_match_beats_partial() {
        let refs = vec![s(&["a dog runs on grass"]), s(&["a cat sleeps on a sofa"]), s(&["red bus"])];
        let exact = cider_d_per_query(&s(&["a dog runs on grass", "x", "y"]), &refs).unwrap();
        let partial = cider_d_per_query(&s(&["a dog sleeps", "x", "y"]), &refs).unwrap();
        assert!(exact[0] > partial[0] && partial[0] > 0.0);
    }

    #[test]
    fn vqa_table() {
        let gts = |m: usize| -> Vec<String> {
            (0..10).map(|i| if i < m { "Red".to_string() } else { "blue".to_string() }).collect()
        };
        assert_eq!(vqa_accuracy("red", &gts(0)), 0.0);
        assert_eq!(vqa_accuracy("red", &gts(2)), 2.0 / 3.0);
        assert_eq!(vqa_accuracy("red", &gts(3)), 1.0);
        assert_eq!(vqa_accuracy("the red!", &gts(5)), 1.0);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
