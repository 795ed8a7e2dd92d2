use crate::error::{Error, Result};

fn check_labels(preds: &[usize], golds: &[usize], classes: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Metric("empty prediction list".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(Error::Metric(format!("label {bad} outside a vocabulary of {classes}")));
    }
    Ok(())
}

/// Per-class (tp, fp, fn).
fn confusion(preds: &[usize], golds: &[usize], classes: usize) -> Vec<(u64, u64, u64)> {
    let mut c = vec![(0, 0, 0); classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            c[p].0 += 1;
        } else {
            c[p].1 += 1;
            c[g].2 += 1;
        }
    }
    c
}

fn f1(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 over pooled true/false positive counts of all classes.
pub fn micro_f1(preds: &[usize], golds: &[usize], classes: usize) -> Result<f64> {
    check_labels(preds, golds, classes)?;
    let (tp, fp, fneg) = confusion(preds, golds, classes)
        .into_iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(f1(tp, fp, fneg))
}

/// Unweighted mean of per-class F1 over all `classes`; a class that appears
/// in neither list scores 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> Result<f64> {
    check_labels(preds, golds, classes)?;
    let c = confusion(preds, golds, classes);
    Ok(c.iter().map(|&(tp, fp, fneg)| f1(tp, fp, fneg)).sum::<f64>() / classes as f64)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("scores need at least one positive and one negative".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    // walk from the lowest scores up, counting negatives already passed
    let mut below = 0u64;
    let mut wins = 0.0;
    for g in tie_groups(scores).iter().rev() {
        let p = g.iter().filter(|&&i| labels[i]).count() as u64;
        let n = g.len() as u64 - p;
        wins += p as f64 * (below as f64 + 0.5 * n as f64);
        below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over the distinct score
/// thresholds in descending order, without interpolation.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    let mut tp = 0u64;
    let mut seen = 0u64;
    let mut ap = 0.0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i]).count() as u64;
        tp += p;
        seen += g.len() as u64;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Least-squares line `y = slope * x + intercept` and the root-mean-square
/// residual.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Metric("a line fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Metric("a line fit needs two distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    Ok((slope, intercept, (rss / n).sqrt()))
}
