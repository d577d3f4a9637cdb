//! Tracking metrics: precision and success curves, the min-over-modalities
//! variants, and the confidence-gated F-score.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::{parse_prediction, BBox};

pub const PRECISION_AT: f64 = 20.0;

/// Center-error thresholds 0..=50 px.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Overlap thresholds 0, 0.05, ..., 1.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) / 20.0).collect()
}

/// Confidence thresholds 0, 0.01, ..., 1.
pub fn confidence_thresholds() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| *t == threshold)
            .map(|i| self.values[i])
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        self.thresholds
            .iter()
            .zip(&self.values)
            .map(|(t, v)| format!("{t},{v:.6}\n"))
            .collect()
    }
}

fn fraction_curve(samples: &[f64], thresholds: Vec<f64>, hit: impl Fn(f64, f64) -> bool) -> Curve {
    let n = samples.len().max(1) as f64;
    let values = thresholds
        .iter()
        .map(|&t| samples.iter().filter(|&&s| hit(s, t)).count() as f64 / n)
        .collect();
    Curve { thresholds, values }
}

/// Fraction of frames with center error at most each threshold.
pub fn precision_curve(distances: &[f64]) -> Curve {
    fraction_curve(distances, precision_thresholds(), |d, t| d <= t)
}

/// Fraction of frames with overlap at least each threshold.
pub fn success_curve(overlaps: &[f64]) -> Curve {
    fraction_curve(overlaps, success_thresholds(), |o, t| o >= t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub precision: Curve,
    pub success: Curve,
    /// Precision at 20 px.
    pub pr20: f64,
    /// Mean of the success curve.
    pub auc: f64,
}

impl Curves {
    fn from_samples(distances: &[f64], overlaps: &[f64]) -> Self {
        let precision = precision_curve(distances);
        let success = success_curve(overlaps);
        Self {
            pr20: precision.at(PRECISION_AT).expect("20 px is on the grid"),
            auc: success.mean(),
            precision,
            success,
        }
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Eval(format!("{what}: {a} predictions for {b} frames")));
    }
    Ok(())
}

/// Precision and success over the visible frames.
pub fn precision_success(preds: &[BBox], gts: &[BBox], visible: &[bool]) -> Result<Curves> {
    mpr_msr(preds, gts, gts, visible)
}

/// Per frame, the smaller center error and the larger overlap against the
/// two modality ground truths.
pub fn mpr_msr(preds: &[BBox], gt_rgb: &[BBox], gt_x: &[BBox], visible: &[bool]) -> Result<Curves> {
    check_len("ground truth", preds.len(), gt_rgb.len())?;
    check_len("X ground truth", preds.len(), gt_x.len())?;
    check_len("visibility", preds.len(), visible.len())?;
    let mut dist = Vec::new();
    let mut ovl = Vec::new();
    for i in (0..preds.len()).filter(|&i| visible[i]) {
        let p = &preds[i];
        dist.push(p.center_distance(&gt_rgb[i]).min(p.center_distance(&gt_x[i])));
        ovl.push(p.iou(&gt_rgb[i]).max(p.iou(&gt_x[i])));
    }
    Ok(Curves::from_samples(&dist, &ovl))
}

/// Harmonic mean, 0 when both are 0.
pub fn f_measure(pr: f64, re: f64) -> f64 {
    if pr + re > 0.0 {
        2.0 * pr * re / (pr + re)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub threshold: f64,
}

/// Precision and recall at one confidence threshold. A prediction counts as
/// made when its score reaches `threshold`; overlaps on invisible frames are 0.
pub fn pr_re_at(preds: &[BBox], gts: &[BBox], visible: &[bool], threshold: f64) -> (f64, f64) {
    let (mut made, mut made_sum, mut vis, mut vis_sum) = (0usize, 0.0, 0usize, 0.0);
    for i in 0..preds.len() {
        let is_made = preds[i].score.unwrap_or(0.0) >= threshold;
        let o = if visible[i] { preds[i].iou(&gts[i]) } else { 0.0 };
        if is_made {
            made += 1;
            made_sum += o;
        }
        if visible[i] {
            vis += 1;
            if is_made {
                vis_sum += o;
            }
        }
    }
    let pr = if made > 0 { made_sum / made as f64 } else { 0.0 };
    let re = if vis > 0 { vis_sum / vis as f64 } else { 0.0 };
    (pr, re)
}

/// F-score maximized over `thresholds`; ties keep the lowest threshold.
pub fn f_score(preds: &[BBox], gts: &[BBox], visible: &[bool], thresholds: &[f64]) -> Result<FScore> {
    check_len("ground truth", preds.len(), gts.len())?;
    check_len("visibility", preds.len(), visible.len())?;
    if !visible.iter().any(|v| *v) {
        return Err(Error::Eval("no visible frames".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Eval("empty confidence sweep".into()));
    }
    let mut best: Option<FScore> = None;
    for &t in thresholds {
        let (pr, re) = pr_re_at(preds, gts, visible, t);
        let f = f_measure(pr, re);
        if best.is_none_or(|b| f > b.f) {
            best = Some(FScore { precision: pr, recall: re, f, threshold: t });
        }
    }
    Ok(best.expect("nonempty sweep"))
}

/// Predictions and ground truth of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInput {
    pub preds: Vec<BBox>,
    pub gt: Vec<BBox>,
    pub gt_x: Option<Vec<BBox>>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub frames: usize,
    pub standard: Curves,
    pub dual: Curves,
    pub fscore: FScore,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames: {}", self.frames);
        let _ = writeln!(s, "precision@20: {:.6}", self.standard.pr20);
        let _ = writeln!(s, "success_auc: {:.6}", self.standard.auc);
        let _ = writeln!(s, "mpr@20: {:.6}", self.dual.pr20);
        let _ = writeln!(s, "msr_auc: {:.6}", self.dual.auc);
        let _ = writeln!(s, "pr: {:.6}", self.fscore.precision);
        let _ = writeln!(s, "re: {:.6}", self.fscore.recall);
        let _ = writeln!(s, "f_score: {:.6}", self.fscore.f);
        let _ = writeln!(s, "f_threshold: {}", self.fscore.threshold);
        s
    }

    /// Writes `report.txt` and the four curve tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        std::fs::write(dir.join("precision.csv"), self.standard.precision.to_csv())?;
        std::fs::write(dir.join("success.csv"), self.standard.success.to_csv())?;
        std::fs::write(dir.join("mpr.csv"), self.dual.precision.to_csv())?;
        std::fs::write(dir.join("msr.csv"), self.dual.success.to_csv())?;
        Ok(())
    }
}

/// Metrics pooled per frame over all sequences.
pub fn evaluate(inputs: &[EvalInput]) -> Result<MetricsReport> {
    let mut preds = Vec::new();
    let mut gt = Vec::new();
    let mut gt_x = Vec::new();
    let mut visible = Vec::new();
    for (k, inp) in inputs.iter().enumerate() {
        check_len(&format!("sequence {k}"), inp.preds.len(), inp.gt.len())?;
        preds.extend_from_slice(&inp.preds);
        gt.extend_from_slice(&inp.gt);
        gt_x.extend_from_slice(inp.gt_x.as_deref().unwrap_or(&inp.gt));
        visible.extend_from_slice(&inp.visible);
    }
    Ok(MetricsReport {
        frames: preds.len(),
        standard: precision_success(&preds, &gt, &visible)?,
        dual: mpr_msr(&preds, &gt, &gt_x, &visible)?,
        fscore: f_score(&preds, &gt, &visible, &confidence_thresholds())?,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (frame, b) = parse_prediction(line)?;
        if frame != out.len() {
            return Err(Error::Format(format!(
                "{}: expected frame {}, found {frame}",
                path.display(),
                out.len()
            )));
        }
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
        (0..n)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.0..100.0),
                    rng.random_range(0.0..100.0),
                    rng.random_range(1.0..30.0),
                    rng.random_range(1.0..30.0),
                )
                .with_score(rng.random())
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_boxes(&mut rng, 30);
        let c = precision_success(&g, &g, &[true; 30]).unwrap();
        assert_eq!((c.pr20, c.auc), (1.0, 1.0));
    }

    #[test]
    fn constant_offset_gives_step_precision() {
        let g: Vec<BBox> = (0..10).map(|i| BBox::new(i as f64 * 3.0, 5.0, 8.0, 8.0)).collect();
        let p: Vec<BBox> = g.iter().map(|b| b.translated(12.0, 16.0)).collect();
        let c = precision_success(&p, &g, &[true; 10]).unwrap();
        for (t, v) in c.precision.thresholds.iter().zip(&c.precision.values) {
            assert_eq!(*v, if *t < 20.0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = vec![BBox::new(1.0, 1.0, 1.0, 1.0); 3];
        assert!(precision_success(&g[..2], &g, &[true; 3]).is_err());
    }

    #[test]
    fn dual_protocol_takes_the_closer_truth() {
        let p = [BBox::new(0.0, 0.0, 2.0, 2.0)];
        let r = [BBox::new(3.0, 4.0, 2.0, 2.0)];
        let x = [BBox::new(0.0, 6.0, 2.0, 2.0)];
        let c = mpr_msr(&p, &r, &x, &[true]).unwrap();
        assert_eq!(c.precision.at(5.0), Some(1.0));
        assert_eq!(c.precision.at(4.0), Some(0.0));
    }

    #[test]
    fn f_measure_of_equal_parts_and_table_check() {
        assert!((f_measure(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert!((f_measure(62.3, 61.9) - 62.1).abs() < 0.05);
    }

    #[test]
    fn no_visible_frames_is_an_error() {
        let g = vec![BBox::new(1.0, 1.0, 1.0, 1.0); 2];
        assert!(f_score(&g, &g, &[false, false], &confidence_thresholds()).is_err());
    }

    #[test]
    fn invisible_frames_are_skipped_by_curves() {
        let g = vec![BBox::new(10.0, 10.0, 4.0, 4.0); 4];
        let mut p = g.clone();
        p[1] = BBox::new(90.0, 90.0, 4.0, 4.0);
        let c = precision_success(&p, &g, &[true, false, true, true]).unwrap();
        assert_eq!((c.pr20, c.auc), (1.0, 1.0));
    }

    /// Direct per-frame evaluation of precision, success, Pr, Re and F.
    fn oracle(p: &[BBox], g: &[BBox], gx: &[BBox], vis: &[bool]) -> (Vec<f64>, Vec<f64>, FScore) {
        let idx: Vec<usize> = (0..p.len()).filter(|&i| vis[i]).collect();
        let n = idx.len() as f64;
        let prec = (0..=50)
            .map(|t| {
                idx.iter()
                    .filter(|&&i| {
                        let d1 = ((p[i].cx - g[i].cx).powi(2) + (p[i].cy - g[i].cy).powi(2)).sqrt();
                        let d2 = ((p[i].cx - gx[i].cx).powi(2) + (p[i].cy - gx[i].cy).powi(2)).sqrt();
                        d1.min(d2) <= t as f64
                    })
                    .count() as f64
                    / n
            })
            .collect();
        let area_iou = |a: &BBox, b: &BBox| {
            let ix = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0) - (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
            let iy = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0) - (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
            let inter = ix.max(0.0) * iy.max(0.0);
            inter / (a.w * a.h + b.w * b.h - inter)
        };
        let succ = (0..=20)
            .map(|k| {
                idx.iter()
                    .filter(|&&i| area_iou(&p[i], &g[i]).max(area_iou(&p[i], &gx[i])) >= k as f64 / 20.0)
                    .count() as f64
                    / n
            })
            .collect();
        let mut best = FScore { precision: 0.0, recall: 0.0, f: -1.0, threshold: 0.0 };
        for k in 0..=100 {
            let th = k as f64 / 100.0;
            let made: Vec<usize> = (0..p.len()).filter(|&i| p[i].score.unwrap() >= th).collect();
            let iou_at = |i: usize| if vis[i] { area_iou(&p[i], &g[i]) } else { 0.0 };
            let pr = if made.is_empty() { 0.0 } else { made.iter().map(|&i| iou_at(i)).sum::<f64>() / made.len() as f64 };
            let re = made.iter().filter(|&&i| vis[i]).map(|&i| iou_at(i)).sum::<f64>() / n;
            let f = if pr + re > 0.0 { 2.0 * pr * re / (pr + re) } else { 0.0 };
            if f > best.f {
                best = FScore { precision: pr, recall: re, f, threshold: th };
            }
        }
        (prec, succ, best)
    }

    #[test]
    fn matches_per_frame_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let p = random_boxes(&mut rng, n);
            let g = random_boxes(&mut rng, n);
            let gx: Vec<BBox> = g.iter().map(|b| b.translated(rng.random_range(-5.0..5.0), 0.0)).collect();
            let mut vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            vis[0] = true;
            let (prec, succ, fs) = oracle(&p, &g, &gx, &vis);
            let c = mpr_msr(&p, &g, &gx, &vis).unwrap();
            assert_eq!(c.precision.values, prec);
            for (a, b) in c.success.values.iter().zip(&succ) {
                assert!((a - b).abs() < 1e-12);
            }
            let got = f_score(&p, &g, &vis, &confidence_thresholds()).unwrap();
            assert!((got.f - fs.f).abs() < 1e-10 && got.threshold == fs.threshold);
        }
    }

    #[test]
    fn report_text_of_perfect_run() {
        let g: Vec<BBox> = (0..5).map(|i| BBox::new(10.0 + i as f64, 10.0, 6.0, 6.0).with_score(1.0)).collect();
        let r = evaluate(&[EvalInput { preds: g.clone(), gt: g, gt_x: None, visible: vec![true; 5] }]).unwrap();
        let text = r.to_text();
        for key in ["precision@20", "success_auc", "mpr@20", "msr_auc", "pr", "re", "f_score"] {
            assert!(text.contains(&format!("{key}: 1.000000")), "{key}");
        }
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_bounded(seed in 0u64..500, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_boxes(&mut rng, n);
            let g = random_boxes(&mut rng, n);
            let c = precision_success(&p, &g, &vec![true; n]).unwrap();
            prop_assert!(c.precision.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.success.values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.precision.values.iter().chain(&c.success.values).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn metrics_ignore_global_translation(seed in 0u64..500, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_boxes(&mut rng, 12);
            let g = random_boxes(&mut rng, 12);
            let vis = vec![true; 12];
            let a = precision_success(&p, &g, &vis).unwrap();
            let pt: Vec<BBox> = p.iter().map(|b| b.translated(dx, dy)).collect();
            let gt: Vec<BBox> = g.iter().map(|b| b.translated(dx, dy)).collect();
            let b = precision_success(&pt, &gt, &vis).unwrap();
            prop_assert!((a.pr20 - b.pr20).abs() < 1e-9 && (a.auc - b.auc).abs() < 1e-9);
        }

        #[test]
        fn dual_protocol_with_equal_truths_is_standard(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_boxes(&mut rng, 10);
            let g = random_boxes(&mut rng, 10);
            let vis = vec![true; 10];
            let a = mpr_msr(&p, &g, &g, &vis).unwrap();
            let b = precision_success(&p, &g, &vis).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
