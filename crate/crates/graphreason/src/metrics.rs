//! Ranking and accuracy metrics over per-region class probabilities.
//!
//! Average precision uses all-points interpolation: sort candidates by
//! score (stable, so ties keep input order), take precision at each
//! positive's rank, and average after applying the running-max envelope
//! from the bottom of the ranking upward. Classes or pools with no
//! positives yield `None` rather than a made-up number.

/// AP of a scored candidate list; `None` if it contains no positive.
pub fn average_precision(scored: &[(f64, bool)]) -> Option<f64> {
    let total_pos = scored.iter().filter(|(_, p)| *p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    // Stable sort by descending score; equal scores keep input order.
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());
    let mut precisions = Vec::with_capacity(total_pos);
    let mut tp = 0usize;
    for (rank0, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
            precisions.push(tp as f64 / (rank0 + 1) as f64);
        }
    }
    let mut envelope = 0.0f64;
    let mut sum = 0.0;
    for p in precisions.iter().rev() {
        envelope = envelope.max(*p);
        sum += envelope;
    }
    Some(sum / total_pos as f64)
}

/// Summary metrics over `R` regions with `C`-way probabilities
/// (`probs[r * classes + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub regions: usize,
    /// AP over the pooled (region, class) candidates.
    pub per_instance_ap: Option<f64>,
    /// Mean AP over classes that have at least one positive region.
    pub per_class_ap: Option<f64>,
    /// Fraction of regions whose argmax matches the label.
    pub per_instance_ac: f64,
    /// Mean within-class recall over classes present in the labels.
    pub per_class_ac: Option<f64>,
}

impl Metrics {
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("per_instance_ap", self.per_instance_ap),
            ("per_class_ap", self.per_class_ap),
            ("per_instance_ac", Some(self.per_instance_ac)),
            ("per_class_ac", self.per_class_ac),
        ]
    }
}

/// Argmax with ties resolved to the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(probs: &[f64], labels: &[usize], classes: usize) -> Metrics {
    assert_eq!(probs.len(), labels.len() * classes, "probs/labels mismatch");
    let regions = labels.len();

    // Pooled candidates, region-major then class-minor.
    let mut pooled = Vec::with_capacity(regions * classes);
    for (r, &y) in labels.iter().enumerate() {
        for c in 0..classes {
            pooled.push((probs[r * classes + c], c == y));
        }
    }
    let per_instance_ap = average_precision(&pooled);

    let mut class_aps = Vec::new();
    for c in 0..classes {
        let scored: Vec<(f64, bool)> = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| (probs[r * classes + c], y == c))
            .collect();
        if let Some(ap) = average_precision(&scored) {
            class_aps.push(ap);
        }
    }
    let per_class_ap = if class_aps.is_empty() {
        None
    } else {
        Some(class_aps.iter().sum::<f64>() / class_aps.len() as f64)
    };

    let mut correct = 0usize;
    let mut per_class_total = vec![0usize; classes];
    let mut per_class_correct = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        let pred = argmax_row(&probs[r * classes..(r + 1) * classes]);
        per_class_total[y] += 1;
        if pred == y {
            correct += 1;
            per_class_correct[y] += 1;
        }
    }
    let per_instance_ac = if regions == 0 {
        0.0
    } else {
        correct as f64 / regions as f64
    };
    let mut recalls = Vec::new();
    for c in 0..classes {
        if per_class_total[c] > 0 {
            recalls.push(per_class_correct[c] as f64 / per_class_total[c] as f64);
        }
    }
    let per_class_ac = if recalls.is_empty() {
        None
    } else {
        Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
    };

    Metrics {
        regions,
        per_instance_ap,
        per_class_ap,
        per_instance_ac,
        per_class_ac,
    }
}
