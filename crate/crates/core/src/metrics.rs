//! Depth accuracy and temporal consistency metrics, and the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Result, SvdcError};
use crate::flow::{warp_backward, warped_mask, FlowField};
use crate::scene::DepthFrame;
use crate::tensor::{kernels, Tensor};

fn check_pred(pred: &Tensor, gt: &DepthFrame) -> Result<()> {
    if pred.shape() != [1, gt.height(), gt.width()] {
        return shape_err(format!("prediction {:?} vs ground truth {}x{}", pred.shape(), gt.height(), gt.width()));
    }
    Ok(())
}

/// `(pred, gt)` pairs over pixels with valid ground truth and a positive, finite prediction.
fn valid_pairs<'a>(pred: &'a Tensor, gt: &'a DepthFrame) -> Result<Vec<(f64, f64)>> {
    check_pred(pred, gt)?;
    let pairs: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.depth())
        .zip(gt.valid())
        .filter(|((p, _), &v)| v && p.is_finite() && **p > 0.0)
        .map(|((p, d), _)| (*p, *d))
        .collect();
    if pairs.is_empty() {
        return Err(SvdcError::EmptyMask);
    }
    Ok(pairs)
}

pub fn rmse(pred: &Tensor, gt: &DepthFrame) -> Result<f64> {
    let p = valid_pairs(pred, gt)?;
    Ok((p.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64).sqrt())
}

pub fn rel(pred: &Tensor, gt: &DepthFrame) -> Result<f64> {
    let p = valid_pairs(pred, gt)?;
    Ok(p.iter().map(|(a, b)| (a - b).abs() / b).sum::<f64>() / p.len() as f64)
}

/// Fraction of pixels with `max(pred/gt, gt/pred) < t`.
pub fn delta_acc(pred: &Tensor, gt: &DepthFrame, t: f64) -> Result<f64> {
    let p = valid_pairs(pred, gt)?;
    Ok(p.iter().filter(|(a, b)| (a / b).max(b / a) < t).count() as f64 / p.len() as f64)
}

/// Temporal end-point error in millimetres: the mean over usable pixels of
/// `|(W(gt_i) - gt_i1) - (W(pred_i) - pred_i1)|` where `W` warps frame `i`
/// onto frame `i + 1` with `flow` (frame `i + 1` to frame `i`). Pixels that
/// are occluded, have invalid ground truth in either frame, or sample an
/// invalid pixel of frame `i` are skipped.
pub fn tepe(pred_i: &Tensor, pred_i1: &Tensor, gt_i: &DepthFrame, gt_i1: &DepthFrame, flow: &FlowField) -> Result<f64> {
    check_pred(pred_i, gt_i)?;
    check_pred(pred_i1, gt_i1)?;
    let (h, w) = (gt_i1.height(), gt_i1.width());
    if (flow.height(), flow.width()) != (h, w) || (gt_i.height(), gt_i.width()) != (h, w) {
        return shape_err("tepe inputs differ in size");
    }
    let wp = warp_backward(pred_i, flow)?;
    let wg = warp_backward(&gt_i.to_tensor(), flow)?;
    let valid_i: Vec<f64> = gt_i.valid().iter().map(|&v| v as u8 as f64).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..h * w {
        if flow.occluded()[p] || !gt_i1.valid()[p] {
            continue;
        }
        let (du, dv) = flow.at(p / w, p % w);
        let x = (p % w) as f64 + du;
        let y = (p / w) as f64 + dv;
        if kernels::bilinear_sample(&valid_i, h, w, x, y) < 1.0 - 1e-12 {
            continue;
        }
        let dg = wg.data()[p] - gt_i1.depth()[p];
        let dp = wp.data()[p] - pred_i1.data()[p];
        sum += (dg - dp).abs();
        n += 1;
    }
    if n == 0 {
        return Err(SvdcError::EmptyMask);
    }
    Ok(1000.0 * sum / n as f64)
}

/// `mean(M * |pred_n - W(pred_prev)|)` for one pair without gradients.
pub fn opw_pair(
    pred_n: &Tensor,
    pred_prev: &Tensor,
    guidance_n: &Tensor,
    guidance_prev: &Tensor,
    flow: &FlowField,
    beta: f64,
) -> Result<f64> {
    if pred_n.shape() != pred_prev.shape() {
        return shape_err("opw predictions differ in size");
    }
    let mask = warped_mask(guidance_n, guidance_prev, flow, beta)?;
    let warped = warp_backward(pred_prev, flow)?;
    if mask.shape() != pred_n.shape() {
        return shape_err("opw mask and prediction differ in size");
    }
    let n = pred_n.numel() as f64;
    Ok(pred_n.data().iter().zip(warped.data()).zip(mask.data()).map(|((a, b), m)| m * (a - b).abs()).sum::<f64>() / n)
}

/// Mean of [`opw_pair`] over consecutive frames. `flows_bwd[n]` maps frame
/// `n` to `n - 1`; entry 0 is unused.
pub fn opw_metric(preds: &[Tensor], guidances: &[Tensor], flows_bwd: &[FlowField], beta: f64) -> Result<f64> {
    if preds.len() < 2 || guidances.len() != preds.len() || flows_bwd.len() != preds.len() {
        return Err(SvdcError::InvalidArgument("opw needs at least two frames with matching guidance and flow".into()));
    }
    let mut sum = 0.0;
    for n in 1..preds.len() {
        sum += opw_pair(&preds[n], &preds[n - 1], &guidances[n], &guidances[n - 1], &flows_bwd[n], beta)?;
    }
    Ok(sum / (preds.len() - 1) as f64)
}

/// Whether the pair `(i, i + 1)` spans two stride-`window` windows.
pub fn is_cross_window(i: usize, window: usize) -> bool {
    (i + 1) % window == 0
}

/// Temporal metrics bucketed by whether the frame pair straddles a window boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowSplit {
    pub intra_tepe: f64,
    pub cross_tepe: f64,
    pub intra_opw: f64,
    pub cross_opw: f64,
    pub intra_pairs: usize,
    pub cross_pairs: usize,
}

/// Per-pair TEPE and OPW of one stitched sequence, each tagged cross/intra.
/// Pairs without a usable TEPE pixel are left out of the TEPE average.
pub fn pair_metrics(
    preds: &[Tensor],
    gts: &[DepthFrame],
    guidances: &[Tensor],
    flows_bwd: &[FlowField],
    window: usize,
    beta: f64,
) -> Result<Vec<PairMetric>> {
    let n = preds.len();
    if gts.len() != n || guidances.len() != n || flows_bwd.len() != n || window == 0 {
        return Err(SvdcError::InvalidArgument("sequence inputs differ in length".into()));
    }
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let t = match tepe(&preds[i], &preds[i + 1], &gts[i], &gts[i + 1], &flows_bwd[i + 1]) {
            Ok(v) => Some(v),
            Err(SvdcError::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        let o = opw_pair(&preds[i + 1], &preds[i], &guidances[i + 1], &guidances[i], &flows_bwd[i + 1], beta)?;
        out.push(PairMetric { first: i, cross: is_cross_window(i, window), tepe: t, opw: o });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetric {
    pub first: usize,
    pub cross: bool,
    pub tepe: Option<f64>,
    pub opw: f64,
}

/// Averages per-pair values within each bucket. Empty buckets report 0.
pub fn split_window_metrics(pairs: &[PairMetric]) -> WindowSplit {
    let bucket = |cross: bool| {
        let ps: Vec<&PairMetric> = pairs.iter().filter(|p| p.cross == cross).collect();
        let tepes: Vec<f64> = ps.iter().filter_map(|p| p.tepe).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(&tepes), mean(&ps.iter().map(|p| p.opw).collect::<Vec<_>>()), ps.len())
    };
    let (intra_tepe, intra_opw, intra_pairs) = bucket(false);
    let (cross_tepe, cross_opw, cross_pairs) = bucket(true);
    WindowSplit { intra_tepe, cross_tepe, intra_opw, cross_opw, intra_pairs, cross_pairs }
}

/// Frame-level accuracy of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub fn frame_metrics(pred: &Tensor, gt: &DepthFrame) -> Result<FrameMetrics> {
    Ok(FrameMetrics {
        rmse: rmse(pred, gt)?,
        rel: rel(pred, gt)?,
        delta1: delta_acc(pred, gt, 1.25)?,
        delta2: delta_acc(pred, gt, 1.25f64.powi(2))?,
        delta3: delta_acc(pred, gt, 1.25f64.powi(3))?,
    })
}

/// Aggregate metrics: frame metrics averaged over frames, temporal metrics
/// averaged over frame pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub tepe: f64,
    pub opw: f64,
    pub split: WindowSplit,
}

impl Summary {
    pub fn from_parts(frames: &[FrameMetrics], pairs: &[PairMetric]) -> Self {
        let nf = frames.len().max(1) as f64;
        let avg = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / nf;
        let tepes: Vec<f64> = pairs.iter().filter_map(|p| p.tepe).collect();
        Self {
            rmse: avg(|m| m.rmse),
            rel: avg(|m| m.rel),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
            tepe: if tepes.is_empty() { 0.0 } else { tepes.iter().sum::<f64>() / tepes.len() as f64 },
            opw: if pairs.is_empty() { 0.0 } else { pairs.iter().map(|p| p.opw).sum::<f64>() / pairs.len() as f64 },
            split: split_window_metrics(pairs),
        }
    }

    fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("rmse", self.rmse),
            ("rel", self.rel),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("tepe_mm", self.tepe),
            ("opw", self.opw),
            ("intra_tepe_mm", self.split.intra_tepe),
            ("cross_tepe_mm", self.split.cross_tepe),
            ("intra_opw", self.split.intra_opw),
            ("cross_opw", self.split.cross_opw),
            ("intra_pairs", self.split.intra_pairs as f64),
            ("cross_pairs", self.split.cross_pairs as f64),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|(_, v)| v.is_finite())
    }
}

/// One row of the per-frame CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRow {
    pub clip: usize,
    pub frame: usize,
    pub window: usize,
    pub model: FrameMetrics,
    pub baseline: Option<FrameMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub model: Summary,
    pub baseline: Option<Summary>,
    pub frames: Vec<FrameRow>,
}

impl EvalReport {
    /// Flat `key=value` lines; baseline keys carry a `baseline_` prefix.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        if let Some(b) = &self.baseline {
            for (k, v) in b.entries() {
                let _ = writeln!(s, "baseline_{k}={v}");
            }
        }
        let _ = writeln!(s, "frames={}", self.frames.len());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,frame,window,rmse,rel,delta1,delta2,delta3,baseline_rmse,baseline_rel\n");
        for r in &self.frames {
            let m = r.model;
            let (br, bl) = r.baseline.map_or((f64::NAN, f64::NAN), |b| (b.rmse, b.rel));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.clip, r.frame, r.window, m.rmse, m.rel, m.delta1, m.delta2, m.delta3, br, bl
            );
        }
        s
    }

    /// Writes the key=value report to `path` and the per-frame CSV next to it
    /// (same stem, `.csv` extension).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_key_values())?;
        std::fs::write(path.with_extension("csv"), self.to_csv())?;
        Ok(())
    }
}
