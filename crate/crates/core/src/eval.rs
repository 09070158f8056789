//! Frozen-feature evaluations: a softmax linear probe and cosine retrieval.

use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::config::EvalConfig;
use crate::error::{Result, StcrError};
use crate::model::ModelParams;
use crate::train::center_crop;

/// A feature vector with its class label.
pub type Labeled = (Vec<f64>, usize);

/// Which frozen representation to export per clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// The C′×T′ spatial max-pool descriptor, flattened.
    #[default]
    Descriptor,
    /// The full C′×T′×H′×W′ feature map, flattened.
    FeatureMap,
}

/// Center-cropped frozen features for each video.
pub fn extract_features(
    params: &ModelParams,
    videos: &[VideoClip],
    crop: [usize; 3],
    kind: FeatureKind,
) -> Result<Vec<Vec<f64>>> {
    videos
        .iter()
        .map(|v| {
            let clip = center_crop(v, crop)?;
            let feature = params.features(&clip)?;
            Ok(match kind {
                FeatureKind::Descriptor => crate::model::psi_pool_value(&feature)?.into_data(),
                FeatureKind::FeatureMap => feature.into_data(),
            })
        })
        .collect()
}

/// Splits indices class by class: the first `fraction` of each class (in input
/// order, rounded down but at least one) trains, the rest tests.
pub fn split_by_class(labels: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let quota: Vec<usize> = counts
        .iter()
        .map(|&n| ((n as f64 * fraction).floor() as usize).max(1).min(n))
        .collect();
    let mut seen = vec![0usize; classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        if seen[l] < quota[l] {
            train.push(i);
        } else {
            test.push(i);
        }
        seen[l] += 1;
    }
    (train, test)
}

/// Probe accuracy and recall@k for frozen `params` on a labeled dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub probe_accuracy: f64,
    pub recall_at_k: f64,
    pub k: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nprobe_accuracy,{}\nrecall_at_{},{}\n",
            self.probe_accuracy, self.k, self.recall_at_k
        )
    }
}

/// Linear probe on the class-wise split and leave-one-out retrieval over the
/// whole set, both on center-cropped frozen features.
pub fn evaluate(
    params: &ModelParams,
    data: &[(VideoClip, usize)],
    crop: [usize; 3],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let videos: Vec<VideoClip> = data.iter().map(|(v, _)| v.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    let features = extract_features(params, &videos, crop, eval.feature)?;
    let labeled: Vec<Labeled> = features.into_iter().zip(labels.iter().copied()).collect();
    let (train_idx, test_idx) = split_by_class(&labels, eval.train_fraction);
    let pick = |idx: &[usize]| -> Vec<Labeled> { idx.iter().map(|&i| labeled[i].clone()).collect() };
    let probe_accuracy = linear_probe(&pick(&train_idx), &pick(&test_idx), eval.probe_epochs, eval.probe_lr)?;
    let recall_at_k = retrieval_eval(&labeled, &labeled, eval.retrieval_k, true)?;
    Ok(EvalReport {
        probe_accuracy,
        recall_at_k,
        k: eval.retrieval_k,
    })
}

fn check_features(sets: &[&[Labeled]]) -> Result<usize> {
    let dim = sets
        .iter()
        .flat_map(|s| s.iter())
        .map(|(f, _)| f.len())
        .next()
        .ok_or_else(|| StcrError::Argument("no features".into()))?;
    for s in sets {
        if let Some((f, _)) = s.iter().find(|(f, _)| f.len() != dim) {
            return Err(StcrError::dim(
                "feature",
                format!("feature lengths {dim} and {} differ", f.len()),
            ));
        }
    }
    Ok(dim)
}

/// Softmax regression trained by full-batch gradient descent on standardized
/// features; returns accuracy on `test`.
pub fn linear_probe(train: &[Labeled], test: &[Labeled], epochs: usize, lr: f64) -> Result<f64> {
    let dim = check_features(&[train, test])?;
    if train.is_empty() || test.is_empty() {
        return Err(StcrError::Argument("probe needs train and test features".into()));
    }
    let classes = train.iter().chain(test).map(|(_, y)| *y).max().unwrap() + 1;
    let mut seen = vec![false; classes];
    train.iter().for_each(|(_, y)| seen[*y] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(StcrError::Argument("probe needs at least two training classes".into()));
    }

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for (f, _) in train {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    for (f, _) in train {
        std.iter_mut().zip(f).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |f: &[f64]| -> Vec<f64> {
        f.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|(f, _)| standardize(f)).collect();

    let mut weight = vec![0.0; classes * dim];
    let mut bias = vec![0.0; classes];
    let mut grad_w = vec![0.0; classes * dim];
    let mut grad_b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..epochs {
        grad_w.iter_mut().for_each(|v| *v = 0.0);
        grad_b.iter_mut().for_each(|v| *v = 0.0);
        for (x, (_, y)) in xs.iter().zip(train) {
            logits_into(&weight, &bias, x, &mut probs);
            softmax_in_place(&mut probs);
            for c in 0..classes {
                let d = (probs[c] - if c == *y { 1.0 } else { 0.0 }) / n;
                grad_b[c] += d;
                grad_w[c * dim..(c + 1) * dim].iter_mut().zip(x).for_each(|(g, v)| *g += d * v);
            }
        }
        weight.iter_mut().zip(&grad_w).for_each(|(w, g)| *w -= lr * g);
        bias.iter_mut().zip(&grad_b).for_each(|(b, g)| *b -= lr * g);
    }

    let correct = test
        .iter()
        .filter(|(f, y)| {
            logits_into(&weight, &bias, &standardize(f), &mut probs);
            argmax(&probs) == *y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn logits_into(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = bias[c] + weight[c * dim..(c + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter_mut().for_each(|x| *x = (*x - m).exp());
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Recall@k under cosine similarity: a query scores when any of its `k` nearest
/// gallery items shares its label. With `exclude_self`, query `i` and gallery
/// item `i` are the same clip and that pair is skipped.
pub fn retrieval_eval(queries: &[Labeled], gallery: &[Labeled], k: usize, exclude_self: bool) -> Result<f64> {
    check_features(&[queries, gallery])?;
    if k == 0 {
        return Err(StcrError::Argument("k must be at least 1".into()));
    }
    if exclude_self && queries.len() != gallery.len() {
        return Err(StcrError::Argument("self-exclusion needs queries aligned with the gallery".into()));
    }
    let available = gallery.len() - usize::from(exclude_self);
    if k > available {
        return Err(StcrError::Argument(format!("k = {k} exceeds gallery size {available}")));
    }
    if queries.is_empty() {
        return Err(StcrError::Argument("no queries".into()));
    }
    let mut hits = 0usize;
    for (qi, (q, label)) in queries.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = gallery
            .iter()
            .enumerate()
            .filter(|(gi, _)| !(exclude_self && *gi == qi))
            .map(|(gi, (f, _))| (cosine(q, f), gi))
            .collect();
        // highest similarity first, lower gallery index on ties
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if scored[..k].iter().any(|&(_, gi)| gallery[gi].1 == *label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_split_keeps_order() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let (train, test) = split_by_class(&labels, 0.7);
        assert_eq!(train, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(test, vec![6, 7, 8, 9]);
    }

    #[test]
    fn separable_probe_is_perfect() {
        let data: Vec<Labeled> = (0..40)
            .map(|i| {
                let y = i % 2;
                let s = if y == 0 { -1.0 } else { 1.0 };
                (vec![s * (1.0 + (i as f64) * 0.01), (i as f64 * 0.37).sin()], y)
            })
            .collect();
        let acc = linear_probe(&data[..30], &data[30..], 200, 0.5).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_rejects_single_class_and_ragged() {
        let one: Vec<Labeled> = (0..4).map(|i| (vec![i as f64], 0)).collect();
        assert!(matches!(linear_probe(&one, &one, 10, 0.1), Err(StcrError::Argument(_))));
        let ragged = vec![(vec![1.0], 0), (vec![1.0, 2.0], 1)];
        assert!(matches!(linear_probe(&ragged, &ragged, 10, 0.1), Err(StcrError::Dimension { .. })));
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let make = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Labeled> {
            (0..n)
                .map(|i| ((0..10).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 2))
                .collect()
        };
        let train = make(&mut rng, 400);
        let test = make(&mut rng, 1000);
        let acc = linear_probe(&train, &test, 100, 0.5).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn retrieval_duplicates_and_exhaustive_k() {
        let items: Vec<Labeled> = (0..10)
            .flat_map(|c| {
                let f: Vec<f64> = (0..4).map(|j| ((c * 4 + j) as f64).sin()).collect();
                [(f.clone(), c), (f, c)]
            })
            .collect();
        assert_eq!(retrieval_eval(&items, &items, 1, true).unwrap(), 1.0);

        let gallery: Vec<Labeled> = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)];
        let queries: Vec<Labeled> = vec![(vec![1.0, 1.0], 0), (vec![1.0, 1.0], 2), (vec![-1.0, 0.0], 1)];
        let r = retrieval_eval(&queries, &gallery, 2, false).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(retrieval_eval(&queries, &gallery, 3, false), Err(StcrError::Argument(_))));
        assert!(retrieval_eval(&queries, &gallery, 0, false).is_err());
    }

    #[test]
    fn random_retrieval_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<Labeled> = (0..1000)
            .map(|i| ((0..16).map(|_| rng.random_range(-1.0..1.0)).collect(), i % 5))
            .collect();
        let r = retrieval_eval(&items, &items, 1, true).unwrap();
        assert!((r - 0.2).abs() <= 0.05, "{r}");
    }
}
