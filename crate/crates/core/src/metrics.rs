//! Verification and identification metrics over cosine similarity scores.
//!
//! Acceptance is score >= threshold throughout. The equal error rate
//! interpolates linearly between the two adjacent operating points where
//! FAR and FRR cross; AUC is the trapezoidal area of the swept ROC, which
//! equals the pairwise comparison statistic with ties weighted one half.

use std::fmt;

/// Genuine and impostor similarity scores from a 1:1 protocol.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    EmptySide(&'static str),
    BadFar(f64),
    ProbeNotInGallery(String),
    Parse(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::EmptySide(side) => write!(f, "score set has no {side} scores"),
            MetricError::BadFar(v) => write!(f, "target FAR must lie in (0,1), got {v}"),
            MetricError::ProbeNotInGallery(l) => {
                write!(f, "closed-set protocol violated: probe identity {l} absent from gallery")
            }
            MetricError::Parse(d) => write!(f, "score file: {d}"),
        }
    }
}

impl std::error::Error for MetricError {}

pub type Result<T> = std::result::Result<T, MetricError>;

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> ScoreSet {
        ScoreSet { genuine, impostor }
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(MetricError::EmptySide("genuine"));
        }
        if self.impostor.is_empty() {
            return Err(MetricError::EmptySide("impostor"));
        }
        Ok(())
    }
}

/// Fraction of impostor scores accepted at a threshold.
fn far_at(impostor: &[f64], theta: f64) -> f64 {
    impostor.iter().filter(|&&s| s >= theta).count() as f64 / impostor.len() as f64
}

/// Fraction of genuine scores rejected at a threshold.
fn frr_at(genuine: &[f64], theta: f64) -> f64 {
    genuine.iter().filter(|&&s| s < theta).count() as f64 / genuine.len() as f64
}

fn distinct_sorted(scores: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = scores.genuine.iter().chain(scores.impostor.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    all
}

/// Threshold candidates: every distinct score plus a sentinel above the
/// maximum (the reject-everything operating point).
fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut cands = distinct_sorted(scores);
    let top = *cands.last().unwrap();
    cands.push(top + 1.0);
    cands
}

/// Equal error rate: the crossing of FAR and FRR over the threshold sweep,
/// linearly interpolated between the bracketing operating points.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64> {
    scores.check_nonempty()?;
    let cands = candidate_thresholds(scores);
    let mut prev_far = 1.0;
    let mut prev_frr = 0.0;
    for &theta in &cands {
        let far = far_at(&scores.impostor, theta);
        let frr = frr_at(&scores.genuine, theta);
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(far);
            }
            let d_prev = prev_far - prev_frr;
            let lambda = d_prev / (d_prev - d);
            return Ok(prev_far + lambda * (far - prev_far));
        }
        prev_far = far;
        prev_frr = frr;
    }
    unreachable!("FAR - FRR always reaches -1 at the sentinel threshold")
}

/// Area under the ROC curve by trapezoidal integration over the sweep.
pub fn compute_roc_auc(scores: &ScoreSet) -> Result<f64> {
    scores.check_nonempty()?;
    let mut cands = candidate_thresholds(scores);
    cands.reverse(); // descending: start at (0,0)
    let mut auc = 0.0;
    let mut prev_fpr = 0.0;
    let mut prev_tpr = 0.0;
    for &theta in &cands {
        let fpr = far_at(&scores.impostor, theta);
        let tpr = 1.0 - frr_at(&scores.genuine, theta);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    auc += (1.0 - prev_fpr) * (1.0 + prev_tpr) * 0.5;
    Ok(auc)
}

/// True acceptance rate at the smallest threshold whose empirical FAR does
/// not exceed the target.
pub fn compute_tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<f64> {
    scores.check_nonempty()?;
    if !(0.0..1.0).contains(&far_target) || far_target == 0.0 {
        return Err(MetricError::BadFar(far_target));
    }
    let cands = candidate_thresholds(scores);
    for &theta in &cands {
        if far_at(&scores.impostor, theta) <= far_target {
            let accepted = scores.genuine.iter().filter(|&&s| s >= theta).count();
            return Ok(accepted as f64 / scores.genuine.len() as f64);
        }
    }
    unreachable!("sentinel threshold has FAR 0")
}

/// One labeled embedding.
#[derive(Clone, Debug)]
pub struct LabeledEmbedding {
    pub label: String,
    pub values: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Closed-set identification: rank-k accuracy for k = 1..=max_rank.
/// Gallery ties break by insertion order.
pub fn compute_cmc(
    gallery: &[LabeledEmbedding],
    probes: &[LabeledEmbedding],
    max_rank: usize,
) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(MetricError::EmptySide("gallery"));
    }
    if probes.is_empty() {
        return Err(MetricError::EmptySide("probe"));
    }
    for p in probes {
        if !gallery.iter().any(|g| g.label == p.label) {
            return Err(MetricError::ProbeNotInGallery(p.label.clone()));
        }
    }
    let max_rank = max_rank.min(gallery.len()).max(1);
    let mut hits = vec![0usize; max_rank];
    for p in probes {
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let sims: Vec<f64> = gallery.iter().map(|g| cosine(&g.values, &p.values)).collect();
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        let first_correct = order
            .iter()
            .position(|&gi| gallery[gi].label == p.label)
            .expect("closed-set check above");
        if first_correct < max_rank {
            for slot in hits.iter_mut().skip(first_correct) {
                *slot += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / probes.len() as f64).collect())
}

// ---------------------------------------------------------------------------
// brute-force reference implementations
// ---------------------------------------------------------------------------

/// Exhaustive EER: evaluates FAR/FRR at every candidate by rescanning the
/// raw score lists, walks all adjacent pairs for the sign change, and
/// applies the same linear interpolation convention.
pub fn eer_oracle(scores: &ScoreSet) -> f64 {
    let mut cands = distinct_sorted(scores);
    let lo = cands[0] - 1.0;
    let hi = *cands.last().unwrap() + 1.0;
    cands.insert(0, lo);
    cands.push(hi);
    let points: Vec<(f64, f64)> = cands
        .iter()
        .map(|&t| (far_at(&scores.impostor, t), frr_at(&scores.genuine, t)))
        .collect();
    for k in 0..points.len() - 1 {
        let (fa0, fr0) = points[k];
        let (fa1, fr1) = points[k + 1];
        let d0 = fa0 - fr0;
        let d1 = fa1 - fr1;
        if d0 == 0.0 {
            return fa0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            if d1 == 0.0 {
                return fa1;
            }
            let lambda = d0 / (d0 - d1);
            return fa0 + lambda * (fa1 - fa0);
        }
    }
    unreachable!("a crossing always exists")
}

/// Pairwise comparison statistic: P(genuine > impostor) + 0.5 P(equal).
pub fn auc_oracle(scores: &ScoreSet) -> f64 {
    let mut acc = 0.0;
    for &g in &scores.genuine {
        for &i in &scores.impostor {
            if g > i {
                acc += 1.0;
            } else if g == i {
                acc += 0.5;
            }
        }
    }
    acc / (scores.genuine.len() as f64 * scores.impostor.len() as f64)
}

/// Exhaustive TAR@FAR: scans all candidates ascending and re-counts both
/// sides at each.
pub fn tar_at_far_oracle(scores: &ScoreSet, far_target: f64) -> f64 {
    let mut cands = distinct_sorted(scores);
    let hi = *cands.last().unwrap() + 1.0;
    cands.push(hi);
    let mut best: Option<f64> = None;
    for &t in cands.iter().rev() {
        let far = scores.impostor.iter().filter(|&&s| s >= t).count() as f64
            / scores.impostor.len() as f64;
        if far <= far_target {
            let tar = scores.genuine.iter().filter(|&&s| s >= t).count() as f64
                / scores.genuine.len() as f64;
            best = Some(tar);
        } else {
            break; // FAR only grows as t decreases further
        }
    }
    best.expect("sentinel always qualifies")
}

/// Rank accuracies by explicit per-probe sorting with stable tie order.
pub fn cmc_oracle(gallery: &[LabeledEmbedding], probes: &[LabeledEmbedding], max_rank: usize) -> Vec<f64> {
    let max_rank = max_rank.min(gallery.len()).max(1);
    let mut acc = vec![0.0; max_rank];
    for p in probes {
        let mut scored: Vec<(usize, f64)> = gallery
            .iter()
            .enumerate()
            .map(|(i, g)| (i, cosine(&g.values, &p.values)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..max_rank {
            if scored[..=k].iter().any(|(i, _)| gallery[*i].label == p.label) {
                acc[k] += 1.0;
            }
        }
    }
    for a in acc.iter_mut() {
        *a /= probes.len() as f64;
    }
    acc
}

// ---------------------------------------------------------------------------
// score files and the metric report
// ---------------------------------------------------------------------------

/// Serialize as `label,score` rows with a header.
pub fn write_score_csv(scores: &ScoreSet) -> String {
    let mut out = String::from("label,score\n");
    for &s in &scores.genuine {
        out.push_str(&format!("genuine,{}\n", fmt_f64(s)));
    }
    for &s in &scores.impostor {
        out.push_str(&format!("impostor,{}\n", fmt_f64(s)));
    }
    out
}

/// Shortest decimal that round-trips through f64.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

pub fn parse_score_csv(text: &str) -> Result<ScoreSet> {
    let mut lines = text.lines();
    match lines.next() {
        Some("label,score") => {}
        other => return Err(MetricError::Parse(format!("bad header {other:?}"))),
    }
    let mut set = ScoreSet::default();
    for (i, row) in lines.enumerate() {
        if row.is_empty() {
            continue;
        }
        let (label, score) = row
            .split_once(',')
            .ok_or_else(|| MetricError::Parse(format!("row {}: missing comma", i + 2)))?;
        let score: f64 = score
            .parse()
            .map_err(|_| MetricError::Parse(format!("row {}: bad score {score:?}", i + 2)))?;
        match label {
            "genuine" => set.genuine.push(score),
            "impostor" => set.impostor.push(score),
            other => return Err(MetricError::Parse(format!("row {}: bad label {other:?}", i + 2))),
        }
    }
    Ok(set)
}

/// The five summary numbers every evaluation reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub eer: f64,
    pub auc: f64,
    pub tar_at_far_1e2: f64,
    pub tar_at_far_1e3: f64,
    pub rank1: f64,
}

impl MetricReport {
    pub fn compute(
        scores: &ScoreSet,
        gallery: &[LabeledEmbedding],
        probes: &[LabeledEmbedding],
    ) -> Result<MetricReport> {
        Ok(MetricReport {
            eer: compute_eer(scores)?,
            auc: compute_roc_auc(scores)?,
            tar_at_far_1e2: compute_tar_at_far(scores, 1e-2)?,
            tar_at_far_1e3: compute_tar_at_far(scores, 1e-3)?,
            rank1: compute_cmc(gallery, probes, 1)?[0],
        })
    }

    pub fn render(&self) -> String {
        format!(
            "eer = {}\nauc = {}\ntar_at_far_1e2 = {}\ntar_at_far_1e3 = {}\nrank1 = {}\n",
            fmt_f64(self.eer),
            fmt_f64(self.auc),
            fmt_f64(self.tar_at_far_1e2),
            fmt_f64(self.tar_at_far_1e3),
            fmt_f64(self.rank1)
        )
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        let mut vals = std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MetricError::Parse(format!("bad report line {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| MetricError::Parse(format!("bad report value in {line:?}")))?;
            vals.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            vals.get(k).copied().ok_or_else(|| MetricError::Parse(format!("report missing key {k}")))
        };
        Ok(MetricReport {
            eer: get("eer")?,
            auc: get("auc")?,
            tar_at_far_1e2: get("tar_at_far_1e2")?,
            tar_at_far_1e3: get("tar_at_far_1e3")?,
            rank1: get("rank1")?,
        })
    }
}

#[cfg(test)]
mod tests;
