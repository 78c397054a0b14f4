//! Segment decoding, IoU interval matching and dialogue-role F1 scoring.
//!
//! Localization is scored per conversational role. A predicted segment is a
//! true positive when it is matched one-to-one with a ground-truth segment of
//! IoU at least `theta`; counts are pooled over clips before precision,
//! recall and F1 are computed (micro-averaging), and the headline number is
//! the harmonic mean of the speaking and listening F1 scores. Every `0/0`
//! ratio is taken to be `0`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, ClipSample, ConversationalState, DatasetManifest, Span};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU threshold for a true positive.
    pub theta: f64,
    /// Frame score threshold used when decoding segments.
    pub threshold: f64,
    pub min_duration: usize,
    pub merge_gap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { theta: 0.5, threshold: 0.5, min_duration: 3, merge_gap: 2 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config("eval: theta must lie in (0, 1]".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("eval: threshold must lie in (0, 1)".into()));
        }
        if self.min_duration < 1 {
            return Err(Error::Config("eval: min_duration must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSegment {
    pub onset: usize,
    pub offset: usize,
    /// Mean frame score over the segment.
    pub score: f64,
}

impl PredictedSegment {
    pub fn span(&self) -> Span {
        Span { onset: self.onset, offset: self.offset }
    }
}

/// Decodes frame scores into segments: maximal runs at or above
/// `threshold`, merged across gaps of at most `merge_gap` frames, then
/// filtered to runs of at least `min_duration` frames.
pub fn extract_segments(s_loc: &[f64], threshold: f64, min_duration: usize, merge_gap: usize) -> Vec<PredictedSegment> {
    let mut runs: Vec<Span> = Vec::new();
    let mut start = None;
    for (t, &s) in s_loc.iter().enumerate() {
        match (s >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(on)) => {
                runs.push(Span::new(on, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(on) = start {
        runs.push(Span::new(on, s_loc.len() - 1));
    }

    let mut merged: Vec<Span> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.onset - last.offset - 1 <= merge_gap => last.offset = run.offset,
            _ => merged.push(run),
        }
    }

    merged
        .into_iter()
        .filter(|s| s.len() >= min_duration)
        .map(|s| {
            let score = s_loc[s.onset..=s.offset].iter().sum::<f64>() / s.len() as f64;
            PredictedSegment { onset: s.onset, offset: s.offset, score }
        })
        .collect()
}

/// Frame-set IoU of two inclusive intervals.
pub fn interval_iou(a: Span, b: Span) -> f64 {
    let lo = a.onset.max(b.onset);
    let hi = a.offset.min(b.offset);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// For each prediction (input order): matched ground-truth index and the
    /// IoU of that match, or `None` and the best IoU against any ground truth.
    pub assignments: Vec<(Option<usize>, f64)>,
}

/// One-to-one greedy matching: candidate pairs with IoU >= `theta` are taken
/// in order of decreasing IoU, ties broken by earlier prediction, then
/// earlier ground truth.
pub fn match_segments(preds: &[Span], gts: &[Span], theta: f64) -> MatchOutcome {
    let mut candidates = Vec::new();
    let mut best = vec![0.0f64; preds.len()];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = interval_iou(*p, *g);
            best[i] = best[i].max(iou);
            if iou >= theta {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| preds[a.1].cmp(&preds[b.1]))
            .then_with(|| gts[a.2].cmp(&gts[b.2]))
    });

    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut assignments: Vec<(Option<usize>, f64)> = best.iter().map(|&b| (None, b)).collect();
    let mut tp = 0;
    for (iou, i, j) in candidates {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            assignments[i] = (Some(j), iou);
            tp += 1;
        }
    }
    MatchOutcome { tp, fp: preds.len() - tp, fn_: gts.len() - tp, assignments }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of the two role F1 scores.
///
/// Equal inputs return that value exactly, and the result is clamped to the
/// input range so rounding can never push it outside.
pub fn f1_dr(f1_listening: f64, f1_speaking: f64) -> f64 {
    if f1_listening == f1_speaking {
        return f1_listening;
    }
    let (lo, hi) = (f1_listening.min(f1_speaking), f1_listening.max(f1_speaking));
    ratio(2.0 * f1_listening * f1_speaking, f1_listening + f1_speaking).clamp(lo, hi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RoleScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        RoleScores { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Model output for one clip, as stored in a predictions file line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub p_me: f64,
    pub p_state: f64,
    pub s_loc: Vec<f64>,
}

/// Labels of one clip needed for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub clip_id: String,
    pub has_me: bool,
    pub state: ConversationalState,
    pub spans: Vec<Span>,
}

impl From<&ClipRecord> for GroundTruth {
    fn from(r: &ClipRecord) -> Self {
        GroundTruth { clip_id: r.clip_id.clone(), has_me: r.has_me, state: r.state, spans: r.spans() }
    }
}

impl From<&ClipSample> for GroundTruth {
    fn from(c: &ClipSample) -> Self {
        GroundTruth { clip_id: c.clip_id.clone(), has_me: c.has_me, state: c.state, spans: c.spans() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub clip_id: String,
    pub state: ConversationalState,
    pub predicted: PredictedSegment,
    pub matched: Option<Span>,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub acc_me: f64,
    pub acc_state: f64,
    pub speaking: RoleScores,
    pub listening: RoleScores,
    pub f1_speaking: f64,
    pub f1_listening: f64,
    pub f1_dr: f64,
    pub match_ledger: Vec<LedgerEntry>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "clips      {}", self.clips)?;
        writeln!(f, "acc_me     {:.4}", self.acc_me)?;
        writeln!(f, "acc_state  {:.4}", self.acc_state)?;
        for (name, r) in [("speaking", &self.speaking), ("listening", &self.listening)] {
            writeln!(
                f,
                "{name:<10} tp={} fp={} fn={}  P={:.4} R={:.4} F1={:.4}",
                r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
            )?;
        }
        write!(f, "f1_dr      {:.4}", self.f1_dr)
    }
}

/// Scores predictions against ground truth. Every ground-truth clip must
/// have a prediction; extra predictions are ignored.
pub fn evaluate_truths(preds: &[Prediction], truths: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.clip_id.as_str(), p)).collect();
    let paired = truths
        .iter()
        .map(|t| {
            by_id.get(t.clip_id.as_str()).map(|p| (t, *p)).ok_or_else(|| Error::MissingPrediction(t.clip_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    struct ClipScore {
        me_ok: bool,
        state_ok: bool,
        state: ConversationalState,
        outcome: MatchOutcome,
        entries: Vec<LedgerEntry>,
    }

    let per_clip: Vec<ClipScore> = paired
        .par_iter()
        .map(|(truth, pred)| {
            let segs = extract_segments(&pred.s_loc, cfg.threshold, cfg.min_duration, cfg.merge_gap);
            let spans: Vec<Span> = segs.iter().map(PredictedSegment::span).collect();
            let outcome = match_segments(&spans, &truth.spans, cfg.theta);
            let entries = segs
                .iter()
                .zip(&outcome.assignments)
                .map(|(seg, &(m, iou))| LedgerEntry {
                    clip_id: truth.clip_id.clone(),
                    state: truth.state,
                    predicted: *seg,
                    matched: m.map(|j| truth.spans[j]),
                    iou,
                })
                .collect();
            ClipScore {
                me_ok: (pred.p_me >= 0.5) == truth.has_me,
                state_ok: (pred.p_state >= 0.5) == truth.state.is_speaking(),
                state: truth.state,
                outcome,
                entries,
            }
        })
        .collect();

    let n = per_clip.len();
    let mut counts: HashMap<ConversationalState, (usize, usize, usize)> = HashMap::new();
    let mut me_ok = 0;
    let mut state_ok = 0;
    let mut match_ledger = Vec::new();
    for c in per_clip {
        me_ok += c.me_ok as usize;
        state_ok += c.state_ok as usize;
        let e = counts.entry(c.state).or_default();
        e.0 += c.outcome.tp;
        e.1 += c.outcome.fp;
        e.2 += c.outcome.fn_;
        match_ledger.extend(c.entries);
    }
    let role = |s| {
        let (tp, fp, fn_) = counts.get(&s).copied().unwrap_or_default();
        RoleScores::from_counts(tp, fp, fn_)
    };
    let speaking = role(ConversationalState::Speaking);
    let listening = role(ConversationalState::Listening);
    Ok(EvalReport {
        clips: n,
        acc_me: ratio(me_ok as f64, n as f64),
        acc_state: ratio(state_ok as f64, n as f64),
        f1_speaking: speaking.f1,
        f1_listening: listening.f1,
        f1_dr: f1_dr(listening.f1, speaking.f1),
        speaking,
        listening,
        match_ledger,
    })
}

/// Scores predictions for every clip listed in `manifest`.
pub fn evaluate(preds: &[Prediction], manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let truths: Vec<GroundTruth> = manifest.clips.iter().map(GroundTruth::from).collect();
    evaluate_truths(preds, &truths, cfg)
}

/// Writes one JSON prediction per line.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("prediction serializes");
        writeln!(w, "{line}").at(path)?;
    }
    w.flush().at(path)
}

/// Writes the match ledger, one JSON entry per line.
pub fn write_ledger(path: &Path, ledger: &[LedgerEntry]) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    for e in ledger {
        let line = serde_json::to_string(e).expect("ledger entry serializes");
        writeln!(w, "{line}").at(path)?;
    }
    w.flush().at(path)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ConversationalState::{Listening, Speaking};

    fn spans(v: &[(usize, usize)]) -> Vec<Span> {
        v.iter().map(|&(a, b)| Span::new(a, b)).collect()
    }

    #[test]
    fn extract_examples() {
        let s = [0.1, 0.8, 0.9, 0.7, 0.2, 0.1, 0.9, 0.9, 0.05];
        let got: Vec<Span> = extract_segments(&s, 0.5, 2, 0).iter().map(|p| p.span()).collect();
        assert_eq!(got, spans(&[(1, 3), (6, 7)]));
        assert!(extract_segments(&[0.1, 0.2, 0.49], 0.5, 1, 0).is_empty());
        let got: Vec<Span> = extract_segments(&[0.9, 0.2, 0.9], 0.5, 1, 1).iter().map(|p| p.span()).collect();
        assert_eq!(got, spans(&[(0, 2)]));
        let seg = extract_segments(&[0.9, 0.2, 0.9], 0.5, 1, 1)[0];
        assert!((seg.score - (2.0 / 3.0)).abs() < 1e-12);
        // run touching the last frame
        let got: Vec<Span> = extract_segments(&[0.0, 0.6, 0.6], 0.5, 1, 0).iter().map(|p| p.span()).collect();
        assert_eq!(got, spans(&[(1, 2)]));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(Span::new(5, 9), Span::new(5, 9)), 1.0);
        assert!((interval_iou(Span::new(10, 20), Span::new(12, 22)) - 9.0 / 13.0).abs() < 1e-15);
        assert_eq!(interval_iou(Span::new(0, 4), Span::new(10, 12)), 0.0);
    }

    #[test]
    fn match_examples() {
        let m = match_segments(&spans(&[(10, 20)]), &spans(&[(12, 22)]), 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_segments(&[], &spans(&[(3, 8)]), 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 1));
        // Two predictions competing for one ground truth: higher IoU wins.
        let m = match_segments(&spans(&[(0, 9), (1, 10)]), &spans(&[(1, 10)]), 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.assignments[1], (Some(0), 1.0));
        assert_eq!(m.assignments[0].0, None);
    }

    #[test]
    fn f1_dr_examples() {
        assert_eq!(f1_dr(0.5, 0.5), 0.5);
        assert!((f1_dr(0.2, 0.6) - 0.3).abs() < 1e-15);
        assert_eq!(f1_dr(0.0, 0.7), 0.0);
        assert_eq!(f1_dr(0.0, 0.0), 0.0);
    }

    fn truth(id: &str, state: ConversationalState, s: &[(usize, usize)]) -> GroundTruth {
        GroundTruth { clip_id: id.into(), has_me: !s.is_empty(), state, spans: spans(s) }
    }

    fn scores_for(t: usize, segs: &[(usize, usize)]) -> Vec<f64> {
        let mut s = vec![0.1; t];
        for &(a, b) in segs {
            for v in &mut s[a..=b] {
                *v = 0.9;
            }
        }
        s
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truths = vec![truth("a", Speaking, &[(3, 8)]), truth("b", Listening, &[(10, 14), (20, 25)])];
        let preds: Vec<Prediction> = truths
            .iter()
            .map(|t| Prediction {
                clip_id: t.clip_id.clone(),
                p_me: if t.has_me { 0.9 } else { 0.1 },
                p_state: if t.state.is_speaking() { 0.9 } else { 0.1 },
                s_loc: scores_for(32, &t.spans.iter().map(|s| (s.onset, s.offset)).collect::<Vec<_>>()),
            })
            .collect();
        let r = evaluate_truths(&preds, &truths, &EvalConfig::default()).unwrap();
        assert_eq!((r.acc_me, r.acc_state, r.f1_dr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let truths = vec![truth("a", Speaking, &[(3, 8)]), truth("b", Listening, &[(10, 14)])];
        let preds: Vec<Prediction> = truths
            .iter()
            .map(|t| Prediction { clip_id: t.clip_id.clone(), p_me: 0.2, p_state: 0.2, s_loc: vec![0.0; 32] })
            .collect();
        let r = evaluate_truths(&preds, &truths, &EvalConfig::default()).unwrap();
        assert_eq!(r.speaking, RoleScores { tp: 0, fp: 0, fn_: 1, precision: 0.0, recall: 0.0, f1: 0.0 });
        assert_eq!(r.listening.f1, 0.0);
        assert_eq!(r.f1_dr, 0.0);
    }

    /// Four clips (two per role, three ground-truth segments) built so that
    /// the hand tally is tp=2, fp=1, fn=1.
    #[test]
    fn hand_built_fixture() {
        let truths = vec![
            truth("s1", Speaking, &[(5, 10)]),   // hit: prediction (5,10)
            truth("s2", Speaking, &[]),          // false alarm at (20,24)
            truth("l1", Listening, &[(2, 6)]),   // hit: prediction (3,6), IoU 4/5
            truth("l2", Listening, &[(15, 20)]), // missed: nothing predicted
        ];
        let pred = |id: &str, me: f64, st: f64, segs: &[(usize, usize)]| Prediction {
            clip_id: id.into(),
            p_me: me,
            p_state: st,
            s_loc: scores_for(32, segs),
        };
        let preds = vec![
            pred("s1", 0.8, 0.7, &[(5, 10)]),
            pred("s2", 0.6, 0.4, &[(20, 24)]),
            pred("l1", 0.9, 0.2, &[(3, 6)]),
            pred("l2", 0.3, 0.1, &[]),
        ];
        let r = evaluate_truths(&preds, &truths, &EvalConfig::default()).unwrap();
        assert_eq!((r.speaking.tp, r.speaking.fp, r.speaking.fn_), (1, 1, 0));
        assert_eq!((r.listening.tp, r.listening.fp, r.listening.fn_), (1, 0, 1));
        let total = |f: fn(&RoleScores) -> usize| f(&r.speaking) + f(&r.listening);
        assert_eq!((total(|r| r.tp), total(|r| r.fp), total(|r| r.fn_)), (2, 1, 1));
        // acc_me: s1 ok, s2 wrong (0.6 vs false), l1 ok, l2 wrong (0.3 vs true)
        assert_eq!(r.acc_me, 0.5);
        // acc_state: s1 ok, s2 wrong, l1 ok, l2 ok
        assert_eq!(r.acc_state, 0.75);
        assert!((r.speaking.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.listening.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1_dr - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.match_ledger.len(), 3);
        assert_eq!(r.match_ledger[2].matched, Some(Span::new(2, 6)));
        assert!((r.match_ledger[2].iou - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let truths = vec![truth("a", Speaking, &[])];
        assert!(matches!(
            evaluate_truths(&[], &truths, &EvalConfig::default()),
            Err(Error::MissingPrediction(id)) if id == "a"
        ));
    }
}
