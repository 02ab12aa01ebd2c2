//! Presentation-attack detection metrics.
//!
//! Scores are "bonafide-ness": a sample is accepted as bonafide when its
//! score is `>= t`. FAR is the share of accepted attacks (APCER) and FRR
//! the share of rejected bonafide samples (BPCER).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const ATTACK: u8 = 0;
pub const BONAFIDE: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::mismatch("score set", &[scores.len()], &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidLabel(l as f64));
        }
        if let Some(s) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::Numeric(format!("score {s}")));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let bonafide = self.labels.iter().filter(|&&l| l == BONAFIDE).count();
        (self.labels.len() - bonafide, bonafide)
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (attacks, bonafide) = self.counts();
        if attacks == 0 || bonafide == 0 {
            return Err(Error::ClassAbsent { attacks, bonafide });
        }
        Ok((attacks, bonafide))
    }

    /// `(score, label)` pairs sorted by ascending score.
    fn sorted(&self) -> Vec<(f64, u8)> {
        let mut v: Vec<(f64, u8)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    /// Applies `f` to every score.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> ScoreSet {
        ScoreSet {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Parses `label<TAB>score` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Format(format!("score file line {}: {line:?}", no + 1));
            let (l, s) = line.split_once('\t').ok_or_else(bad)?;
            let label: u8 = l.trim().parse().map_err(|_| bad())?;
            let score: f64 = s.trim().parse().map_err(|_| bad())?;
            if label > 1 {
                return Err(bad());
            }
            labels.push(label);
            scores.push(score);
        }
        ScoreSet::new(scores, labels)
    }

    /// `label<TAB>score` lines. Scores use Rust's shortest round-trip
    /// formatting, so [`ScoreSet::parse`] recovers them bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# label\tscore\n");
        for (s, l) in self.scores.iter().zip(&self.labels) {
            let _ = writeln!(out, "{l}\t{s:?}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// APCER, BPCER and their mean at threshold `t`.
pub fn apcer_bpcer_acer(s: &ScoreSet, t: f64) -> Result<ErrorRates> {
    let (attacks, bonafide) = s.require_both()?;
    let mut accepted_attacks = 0usize;
    let mut rejected_bonafide = 0usize;
    for (&score, &label) in s.scores.iter().zip(&s.labels) {
        let accept = score >= t;
        match label {
            ATTACK if accept => accepted_attacks += 1,
            BONAFIDE if !accept => rejected_bonafide += 1,
            _ => {}
        }
    }
    let apcer = accepted_attacks as f64 / attacks as f64;
    let bpcer = rejected_bonafide as f64 / bonafide as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Candidate thresholds: `-inf`, midpoints between adjacent distinct
/// scores, `+inf`; ascending.
pub fn candidate_thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut uniq: Vec<f64> = s.scores.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut out = Vec::with_capacity(uniq.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Error counts at each candidate threshold, from one sorted sweep.
/// Yields `(threshold, accepted_attacks, rejected_bonafide)`.
fn sweep(s: &ScoreSet) -> Vec<(f64, usize, usize)> {
    let sorted = s.sorted();
    let (attacks, _) = s.counts();
    let cands = candidate_thresholds(s);
    let mut out = Vec::with_capacity(cands.len());
    // number of samples below the threshold so far
    let mut idx = 0;
    let mut below_attack = 0;
    let mut below_bonafide = 0;
    for t in cands {
        while idx < sorted.len() && sorted[idx].0 < t {
            if sorted[idx].1 == ATTACK {
                below_attack += 1;
            } else {
                below_bonafide += 1;
            }
            idx += 1;
        }
        out.push((t, attacks - below_attack, below_bonafide));
    }
    out
}

/// Threshold minimising `|FAR - FRR|` over the candidates, ties to the
/// lower threshold.
pub fn eer_threshold(dev: &ScoreSet) -> Result<f64> {
    let (attacks, bonafide) = dev.require_both()?;
    let mut best = (f64::INFINITY, f64::NAN);
    for (t, acc_att, rej_bon) in sweep(dev) {
        let gap = (acc_att as f64 / attacks as f64 - rej_bon as f64 / bonafide as f64).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

/// Equal error rate: mean of FAR and FRR at [`eer_threshold`].
pub fn eer(dev: &ScoreSet) -> Result<(f64, f64)> {
    let t = eer_threshold(dev)?;
    Ok((t, apcer_bpcer_acer(dev, t)?.acer))
}

/// Highest candidate threshold whose BPCER stays at or below `target`
/// (the operating point that minimises APCER under that constraint).
pub fn bpcer_threshold(dev: &ScoreSet, target: f64) -> Result<f64> {
    let (_, bonafide) = dev.require_both()?;
    let mut best = f64::NEG_INFINITY;
    for (t, _, rej_bon) in sweep(dev) {
        if rej_bon as f64 / bonafide as f64 <= target {
            best = t;
        }
    }
    Ok(best)
}

/// Half total error rate at a threshold fixed elsewhere.
pub fn hter(test: &ScoreSet, t: f64) -> Result<f64> {
    Ok(apcer_bpcer_acer(test, t)?.acer)
}

/// Empirical ROC vertices `(fpr, tpr)`, from the strictest operating point
/// `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_points(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (attacks, bonafide) = s.require_both()?;
    let mut sorted = s.sorted();
    sorted.reverse();
    let mut pts = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == ATTACK {
                fp += 1;
            } else {
                tp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / attacks as f64, tp as f64 / bonafide as f64));
    }
    Ok(pts)
}

/// TPR at the largest operating point with FPR `<= target`, interpolating
/// linearly towards the next vertex. Returns 0 when only the trivial
/// `(0, 0)` point qualifies.
pub fn tpr_at_fpr(s: &ScoreSet, target: f64) -> Result<f64> {
    Ok(tpr_from_roc(&roc_points(s)?, target))
}

pub(crate) fn tpr_from_roc(pts: &[(f64, f64)], target: f64) -> f64 {
    let Some(last) = pts.iter().rposition(|&(fpr, _)| fpr <= target) else {
        return 0.0;
    };
    if last == 0 {
        return 0.0;
    }
    let (f0, t0) = pts[last];
    match pts.get(last + 1) {
        Some(&(f1, t1)) if f1 > f0 => t0 + (target - f0) / (f1 - f0) * (t1 - t0),
        _ => t0,
    }
}
