//! Matching-based counting and center-error metrics.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SequenceAnnotation};
use crate::error::{Error, Result};
use crate::model::{Prediction, Variant, Vtssi, VtssiConfig};
use crate::rect::RectMode;

/// Normalized `(x, y)` in `[-1, 1]` to pixel coordinates on an `[H, W]` frame.
///
/// ```
/// use vtssi::eval::to_pixels;
/// assert_eq!(to_pixels([-1.0, -1.0], [50, 50]), [0.0, 0.0]);
/// assert_eq!(to_pixels([0.0, 0.0], [50, 50]), [24.5, 24.5]);
/// ```
pub fn to_pixels(p: [f64; 2], frame_hw: [usize; 2]) -> [f64; 2] {
    let [h, w] = frame_hw;
    [(p[0] + 1.0) / 2.0 * (w as f64 - 1.0), (p[1] + 1.0) / 2.0 * (h as f64 - 1.0)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Injective maps from `0..n` into `0..m` (`n <= m`), in lexicographic order.
fn injections(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, m: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(n, m, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, m, &mut Vec::with_capacity(n), &mut vec![false; m], &mut out);
    out
}

/// Assignment of `(gt, inferred)` pairs, sorted by ground-truth index, that
/// minimizes the summed center distance over the first `prefix` frames.
/// Ties go to the lexicographically smallest pair list.
pub fn match_objects(gt: &[Vec<[f64; 2]>], inferred: &[Vec<[f64; 2]>], prefix: usize) -> Vec<(usize, usize)> {
    let cost = |g: usize, i: usize| -> f64 {
        gt[g].iter()
            .zip(&inferred[i])
            .take(prefix)
            .map(|(a, b)| dist(*a, *b))
            .sum()
    };
    let (ng, ni) = (gt.len(), inferred.len());
    let candidates: Vec<Vec<(usize, usize)>> = if ng <= ni {
        injections(ng, ni)
            .into_iter()
            .map(|f| f.into_iter().enumerate().collect())
            .collect()
    } else {
        let mut c: Vec<Vec<(usize, usize)>> = injections(ni, ng)
            .into_iter()
            .map(|f| {
                let mut pairs: Vec<(usize, usize)> = f.into_iter().enumerate().map(|(i, g)| (g, i)).collect();
                pairs.sort();
                pairs
            })
            .collect();
        c.sort();
        c
    };
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for pairs in candidates {
        let c: f64 = pairs.iter().map(|&(g, i)| cost(g, i)).sum();
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, pairs));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Fraction of units whose predicted count equals the ground truth.
pub fn count_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}

/// Per-step mean distance over matched objects, `[T]`, for pixel tracks.
pub fn position_errors(gt: &[Vec<[f64; 2]>], tracks: &[Vec<[f64; 2]>], pairs: &[(usize, usize)], len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| {
            if pairs.is_empty() {
                return 0.0;
            }
            pairs.iter().map(|&(g, i)| dist(gt[g][t], tracks[i][t])).sum::<f64>() / pairs.len() as f64
        })
        .collect()
}

/// Splits a full-horizon curve into its observed part and its generated part.
pub fn split_curve(curve: &[f64], split_at: usize) -> (Vec<f64>, Vec<f64>) {
    let k = split_at.min(curve.len());
    (curve[..k].to_vec(), curve[k..].to_vec())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    PerSequence,
    PerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Observed frames.
    pub observe: usize,
    /// Total frames (observed plus generated).
    pub horizon: usize,
    pub batch_size: usize,
    pub rect_mode: RectMode,
    /// Score the tracking stage's positions instead of the fused ones on observed frames.
    pub find_direct: bool,
    /// Sequences to evaluate (all when `None`).
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            observe: 10,
            horizon: 20,
            batch_size: 32,
            rect_mode: RectMode::Soft,
            find_direct: false,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub index: usize,
    pub true_count: usize,
    /// One entry, or one per observed frame for per-frame counting.
    pub counts: Vec<usize>,
    pub count_correct: bool,
    /// `(gt, inferred)` pairs; one list, or one per frame for per-frame inference.
    pub matching: Vec<Vec<(usize, usize)>>,
    /// Per-step mean pixel error; `None` where the step is excluded.
    pub errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub checkpoint_step: u64,
    pub count_mode: CountMode,
    pub count_accuracy: f64,
    pub sequences: usize,
    /// Sequences contributing to the error curves (count correct).
    pub matched_sequences: usize,
    /// Mean pixel error per observed step, `[observe]`.
    pub inference_error_curve: Vec<Option<f64>>,
    /// Mean pixel error per step, `[horizon]`; observed steps are `None`.
    pub prediction_error_curve: Vec<Option<f64>>,
    /// Median over sequences of the mean error on observed steps.
    pub median_inference_error: Option<f64>,
    /// Median over sequences of the error `k` generated steps after the last observation, `[horizon - observe]`.
    pub median_prediction_error: Vec<Option<f64>>,
    /// Frames used to train the model.
    pub train_len: usize,
    pub options: EvalOptions,
    pub config: VtssiConfig,
    pub per_sequence: Vec<SequenceRecord>,
}

impl EvalReport {
    /// Median prediction error `k >= 1` generated steps after the observations.
    pub fn median_prediction_at(&self, k: usize) -> Option<f64> {
        self.median_prediction_error.get(k.checked_sub(1)?).copied().flatten()
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.options;
        let bad = |m: &str| Err(Error::invalid(format!("malformed report: {m}")));
        if self.inference_error_curve.len() != o.observe || self.prediction_error_curve.len() != o.horizon {
            return bad("curve lengths");
        }
        if self.median_prediction_error.len() != o.horizon - o.observe {
            return bad("prediction medians");
        }
        if !(0.0..=1.0).contains(&self.count_accuracy) || self.per_sequence.len() != self.sequences {
            return bad("counts");
        }
        let finite_nonneg = |v: &Option<f64>| v.is_none_or(|x| x.is_finite() && x >= 0.0);
        if !self.inference_error_curve.iter().all(finite_nonneg)
            || !self.prediction_error_curve.iter().all(finite_nonneg)
            || !finite_nonneg(&self.median_inference_error)
        {
            return bad("non-finite or negative errors");
        }
        Ok(())
    }
}

fn pixel_tracks(tracks: &[Vec<[f64; 2]>], hw: [usize; 2]) -> Vec<Vec<[f64; 2]>> {
    tracks
        .iter()
        .map(|tr| tr.iter().map(|p| to_pixels(*p, hw)).collect())
        .collect()
}

fn gt_tracks(a: &SequenceAnnotation, len: usize) -> Vec<Vec<[f64; 2]>> {
    (0..a.count)
        .map(|i| (0..len).map(|t| a.centers[t][i]).collect())
        .collect()
}

fn score_sequence(
    index: usize,
    pred: &Prediction,
    ann: &SequenceAnnotation,
    mode: CountMode,
    opts: &EvalOptions,
    hw: [usize; 2],
) -> SequenceRecord {
    let (s, h) = (opts.observe, opts.horizon);
    let gt = gt_tracks(ann, h);
    match mode {
        CountMode::PerSequence => {
            let count = pred.count();
            let tracks = pixel_tracks(&pred.tracks[..count.min(pred.tracks.len())], hw);
            let correct = count == ann.count;
            let pairs = match_objects(&gt, &tracks, s);
            let mut errors: Vec<Option<f64>> = if correct {
                position_errors(&gt, &tracks, &pairs, h).into_iter().map(Some).collect()
            } else {
                vec![None; h]
            };
            if correct && opts.find_direct && !pred.find_tracks.is_empty() {
                let find = pixel_tracks(&pred.find_tracks[..count.min(pred.find_tracks.len())], hw);
                for (t, e) in position_errors(&gt, &find, &pairs, s).into_iter().enumerate() {
                    errors[t] = Some(e);
                }
            }
            SequenceRecord {
                index,
                true_count: ann.count,
                counts: vec![count],
                count_correct: correct,
                matching: vec![pairs],
                errors,
            }
        }
        CountMode::PerFrame => {
            let tracks = pixel_tracks(&pred.tracks, hw);
            let mut matching = Vec::with_capacity(s);
            let mut errors = vec![None; h];
            for t in 0..h {
                let tt = t.min(s - 1);
                let c = pred.counts[tt];
                let gt_t: Vec<Vec<[f64; 2]>> = gt.iter().map(|g| vec![g[t]]).collect();
                let tr_t: Vec<Vec<[f64; 2]>> = tracks[..c.min(tracks.len())].iter().map(|tr| vec![tr[t]]).collect();
                let pairs = match_objects(&gt_t, &tr_t, 1);
                if c == ann.count {
                    errors[t] = Some(position_errors(&gt_t, &tr_t, &pairs, 1)[0]);
                }
                if t < s {
                    matching.push(pairs);
                }
            }
            let counts = pred.counts.clone();
            SequenceRecord {
                index,
                true_count: ann.count,
                count_correct: counts.iter().all(|c| *c == ann.count),
                counts,
                matching,
                errors,
            }
        }
    }
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs mode-replaced inference on the first `observe` frames of each
/// sequence, generates up to `horizon`, and scores against the annotations.
pub fn evaluate(model: &Vtssi, data: &Dataset, checkpoint_step: u64, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = model.config();
    if opts.observe == 0 || opts.horizon < opts.observe {
        return Err(Error::invalid("need 0 < observe <= horizon"));
    }
    if opts.horizon > data.seq_len() {
        return Err(Error::invalid(format!(
            "horizon {} exceeds the dataset's {} frames",
            opts.horizon,
            data.seq_len()
        )));
    }
    if data.frame_hw() != cfg.frame_hw {
        return Err(Error::invalid("dataset frame size differs from the model's"));
    }
    let n = opts.limit.map_or(data.len(), |l| l.min(data.len()));
    let mode = if cfg.variant == Variant::Air {
        CountMode::PerFrame
    } else {
        CountMode::PerSequence
    };
    let hw = cfg.frame_hw;
    let mut records = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(opts.batch_size.max(1)) {
        let frames = data.batch(chunk, opts.observe, model.dtype())?;
        let preds = model.predict(&frames, opts.horizon, opts.rect_mode, None)?;
        for (&i, p) in chunk.iter().zip(&preds) {
            records.push(score_sequence(i, p, data.annotation(i), mode, opts, hw));
        }
    }

    let (predicted, truth): (Vec<usize>, Vec<usize>) = match mode {
        CountMode::PerSequence => records.iter().map(|r| (r.counts[0], r.true_count)).unzip(),
        CountMode::PerFrame => records
            .iter()
            .flat_map(|r| r.counts.iter().map(move |c| (*c, r.true_count)))
            .unzip(),
    };
    let (s, h) = (opts.observe, opts.horizon);
    let curve: Vec<Option<f64>> = (0..h).map(|t| mean_opt(records.iter().map(|r| r.errors[t]))).collect();
    let inference_error_curve = curve[..s].to_vec();
    let prediction_error_curve = (0..h).map(|t| if t < s { None } else { curve[t] }).collect();
    let per_seq_inf: Vec<f64> = records
        .iter()
        .filter_map(|r| mean_opt(r.errors[..s].iter().copied()))
        .collect();
    let median_prediction_error = (s..h)
        .map(|t| median(&records.iter().filter_map(|r| r.errors[t]).collect::<Vec<_>>()))
        .collect();
    let matched = records.iter().filter(|r| r.errors.iter().any(Option::is_some)).count();
    let report = EvalReport {
        variant: cfg.variant,
        checkpoint_step,
        count_mode: mode,
        count_accuracy: count_accuracy(&predicted, &truth),
        sequences: records.len(),
        matched_sequences: matched,
        inference_error_curve,
        prediction_error_curve,
        median_inference_error: median(&per_seq_inf),
        median_prediction_error,
        train_len: cfg.t,
        options: opts.clone(),
        config: cfg.clone(),
        per_sequence: records,
    };
    report.validate()?;
    Ok(report)
}

/// Headline numbers of several reports side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub count_accuracy: f64,
    pub median_inference_error: Option<f64>,
    pub mean_inference_error: Option<f64>,
    pub median_prediction_error_last: Option<f64>,
}

pub fn compare(reports: &[EvalReport]) -> Vec<ComparisonRow> {
    reports
        .iter()
        .map(|r| ComparisonRow {
            variant: r.variant,
            count_accuracy: r.count_accuracy,
            median_inference_error: r.median_inference_error,
            mean_inference_error: mean_opt(r.inference_error_curve.iter().copied()),
            median_prediction_error_last: r.median_prediction_error.last().copied().flatten(),
        })
        .collect()
}
