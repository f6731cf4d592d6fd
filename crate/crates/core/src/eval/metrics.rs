use serde::Serialize;

use super::EvalInput;

/// Pixel thresholds of δ^x and AJ.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Error beyond which a track counts as lost.
pub const SURVIVAL_PX: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaAvg {
    pub per_threshold: [f64; 5],
    pub mean: f64,
}

/// Fraction of ground-truth-visible pairs within each threshold; `None`
/// without visible pairs.
pub fn delta_avg(input: &EvalInput<'_>) -> Option<DeltaAvg> {
    let mut within = [0usize; 5];
    let mut count = 0usize;
    for (i, t) in input.scored().filter(|&(i, t)| input.gt.is_visible(i, t)) {
        let e = input.error(i, t);
        count += 1;
        for (w, th) in within.iter_mut().zip(THRESHOLDS) {
            *w += usize::from(e <= th);
        }
    }
    if count == 0 {
        return None;
    }
    let per_threshold = within.map(|w| w as f64 / count as f64);
    Some(DeltaAvg { mean: per_threshold.iter().sum::<f64>() / 5.0, per_threshold })
}

/// Fraction of scored pairs whose predicted flag matches.
pub fn occlusion_accuracy(input: &EvalInput<'_>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, t) in input.scored() {
        n += 1;
        hit += usize::from(input.pred.is_visible(i, t) == input.gt.is_visible(i, t));
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Mean Jaccard over thresholds; thresholds with an empty denominator are
/// skipped and returned separately.
pub fn average_jaccard(input: &EvalInput<'_>) -> (Option<f64>, Vec<f64>) {
    let mut vals = Vec::new();
    let mut skipped = Vec::new();
    for th in THRESHOLDS {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (i, t) in input.scored() {
            let gv = input.gt.is_visible(i, t);
            let pv = input.pred.is_visible(i, t);
            let close = input.error(i, t) <= th;
            if gv && pv && close {
                tp += 1;
            } else {
                fn_ += usize::from(gv);
                fp += usize::from(pv);
            }
        }
        let denom = tp + fp + fn_;
        if denom == 0 {
            skipped.push(th);
        } else {
            vals.push(tp as f64 / denom as f64);
        }
    }
    let aj = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    (aj, skipped)
}

/// Median error over ground-truth-visible pairs.
pub fn mte(input: &EvalInput<'_>) -> Option<f64> {
    let mut errs: Vec<f64> = input.scored().filter(|&(i, t)| input.gt.is_visible(i, t)).map(|(i, t)| input.error(i, t)).collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(f64::total_cmp);
    let m = errs.len() / 2;
    Some(if errs.len() % 2 == 1 { errs[m] } else { 0.5 * (errs[m - 1] + errs[m]) })
}

/// Mean over tracks of `(failure − start) / (T − start)`, where failure is
/// the first visible frame with error above [`SURVIVAL_PX`].
pub fn survival(input: &EvalInput<'_>) -> Option<f64> {
    let (gt, frames) = (input.gt, input.gt.frames);
    let mut fracs = Vec::new();
    for i in 0..gt.queries {
        let s = gt.starts[i];
        if s + 1 >= frames {
            continue;
        }
        let fail = (s + 1..frames).find(|&t| gt.is_visible(i, t) && input.error(i, t) > SURVIVAL_PX).unwrap_or(frames);
        fracs.push((fail - s) as f64 / (frames - s) as f64);
    }
    (!fracs.is_empty()).then(|| fracs.iter().sum::<f64>() / fracs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub aj: Option<f64>,
    pub delta_avg: Option<f64>,
    pub delta: Option<[f64; 5]>,
    pub oa: Option<f64>,
    pub mte: Option<f64>,
    pub survival: Option<f64>,
    pub tracks: usize,
    pub scored_pairs: usize,
    pub visible_pairs: usize,
    pub skipped_thresholds: Vec<f64>,
}

pub fn evaluate(input: &EvalInput<'_>) -> MetricReport {
    let d = delta_avg(input);
    let (aj, skipped_thresholds) = average_jaccard(input);
    MetricReport {
        aj,
        delta_avg: d.as_ref().map(|d| d.mean),
        delta: d.map(|d| d.per_threshold),
        oa: occlusion_accuracy(input),
        mte: mte(input),
        survival: survival(input),
        tracks: input.gt.queries,
        scored_pairs: input.scored().count(),
        visible_pairs: input.scored().filter(|&(i, t)| input.gt.is_visible(i, t)).count(),
        skipped_thresholds,
    }
}
