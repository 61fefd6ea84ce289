//! Training objective: scale-invariant log loss, flow-warped temporal loss,
//! cross-window consistency and their weighted total.

use crate::error::{shape_err, Result, SvdcError};
use crate::flow::{warped_mask, FlowField};
use crate::net::{WindowOutput, DOWNSAMPLE};
use crate::scene::DepthFrame;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_si: f64,
    pub alpha_si: f64,
    pub gamma_coarse: f64,
    pub lambda_opw: f64,
    pub beta_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_si: 0.85, alpha_si: 10.0, gamma_coarse: 0.25, lambda_opw: 0.125, beta_mask: 50.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_si, self.alpha_si, self.gamma_coarse, self.lambda_opw, self.beta_mask];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SvdcError::Config(format!("loss weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Scale-invariant loss of `pred` (`[1, H, W]`) against the valid pixels of `gt`.
pub fn si_loss(g: &mut Graph, pred: Var, gt: &DepthFrame, w: &LossWeights) -> Result<Var> {
    let target = g.constant(gt.to_tensor());
    g.si_loss(pred, target, Some(gt.valid()), w.lambda_si, w.alpha_si)
}

/// Scale-invariant loss between two predictions, every pixel counted.
pub fn si_between(g: &mut Graph, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    g.si_loss(pred, target, None, w.lambda_si, w.alpha_si)
}

/// `mean(M * |pred_n - warp(pred_prev, flow)|)` with `M` the photometric
/// occlusion mask of the guidance frames, zero where `flow` is occluded.
pub fn opw_loss(
    g: &mut Graph,
    pred_n: Var,
    pred_prev: Var,
    guidance_n: &Tensor,
    guidance_prev: &Tensor,
    flow: &FlowField,
    w: &LossWeights,
) -> Result<Var> {
    let mask = warped_mask(guidance_n, guidance_prev, flow, w.beta_mask)?;
    if g.shape(pred_n) != mask.shape() || g.shape(pred_prev) != mask.shape() {
        return shape_err(format!("opw shapes differ: {:?} / {:?} vs mask {:?}", g.shape(pred_n), g.shape(pred_prev), mask.shape()));
    }
    let flow_v = g.constant(flow.to_tensor());
    let warped = g.warp(pred_prev, flow_v)?;
    let diff = g.sub(pred_n, warped)?;
    let abs = g.abs(diff);
    let m = g.constant(mask);
    let weighted = g.mul(m, abs)?;
    Ok(g.mean(weighted))
}

/// Sum over the frames shared by two overlapping windows of the
/// scale-invariant loss between window `j`'s prediction and window `j+1`'s.
/// `window_j` covers frames `n..n+T`, `window_j1` frames `n+1..n+T+1`.
pub fn cross_window_loss(g: &mut Graph, window_j: &[Var], window_j1: &[Var], w: &LossWeights) -> Result<Var> {
    if window_j.len() != window_j1.len() || window_j.len() < 2 {
        return shape_err(format!("windows of {} and {} frames do not overlap by one shift", window_j.len(), window_j1.len()));
    }
    let mut total: Option<Var> = None;
    for (a, b) in window_j[1..].iter().zip(window_j1) {
        let term = si_between(g, *a, *b, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one shared frame"))
}

/// Ground truth for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameTargets<'a> {
    pub depth: &'a DepthFrame,
    pub guidance: &'a Tensor,
    /// Frame `n` to frame `n - 1`.
    pub flow_bwd: &'a FlowField,
}

/// Which optional terms enter the total. Disabled terms are still evaluated
/// for logging but do not contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    pub cross: bool,
    pub opw: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self { cross: true, opw: true }
    }
}

/// Unweighted component values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum of final-resolution SI terms over every frame of both windows.
    pub si_final: f64,
    /// Sum of coarse-resolution SI terms, before the `gamma` weight.
    pub si_coarse: f64,
    pub cross: f64,
    /// Sum of the OPW terms over consecutive pairs inside each window, before `lambda_opw`.
    pub opw: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights, sw: LossSwitches) -> f64 {
        let mut t = self.si_final + w.gamma_coarse * self.si_coarse;
        if sw.cross {
            t += self.cross;
        }
        if sw.opw {
            t += w.lambda_opw * self.opw;
        }
        t
    }
}

fn accumulate(g: &mut Graph, acc: &mut Option<Var>, term: Var) -> Result<()> {
    *acc = Some(match *acc {
        Some(a) => g.add(a, term)?,
        None => term,
    });
    Ok(())
}

/// Objective for two windows shifted by one frame. `targets` covers the
/// union of their frames (`T + 1` entries).
pub fn total_loss(
    g: &mut Graph,
    window_j: &WindowOutput,
    window_j1: &WindowOutput,
    targets: &[FrameTargets],
    w: &LossWeights,
    sw: LossSwitches,
) -> Result<(Var, LossBreakdown)> {
    let t = window_j.fine.len();
    if window_j1.fine.len() != t || targets.len() != t + 1 || window_j.coarse.len() != t || window_j1.coarse.len() != t {
        return shape_err(format!("expected two {t}-frame windows and {} targets, got {}", t + 1, targets.len()));
    }
    let coarse_gt: Vec<DepthFrame> = targets.iter().map(|f| f.depth.downsample(DOWNSAMPLE)).collect::<Result<_>>()?;

    let mut si_final = None;
    let mut si_coarse = None;
    let mut opw = None;
    for (offset, win) in [(0usize, window_j), (1, window_j1)] {
        for k in 0..t {
            let frame = offset + k;
            let sf = si_loss(g, win.fine[k], targets[frame].depth, w)?;
            accumulate(g, &mut si_final, sf)?;
            let sc = si_loss(g, win.coarse[k], &coarse_gt[frame], w)?;
            accumulate(g, &mut si_coarse, sc)?;
            if k > 0 {
                let cur = &targets[frame];
                let prev = &targets[frame - 1];
                let o = opw_loss(g, win.fine[k], win.fine[k - 1], cur.guidance, prev.guidance, cur.flow_bwd, w)?;
                accumulate(g, &mut opw, o)?;
            }
        }
    }
    let si_final = si_final.expect("non-empty window");
    let si_coarse = si_coarse.expect("non-empty window");
    let cross = cross_window_loss(g, &window_j.coarse, &window_j1.coarse, w)?;

    let weighted_coarse = g.scale(si_coarse, w.gamma_coarse);
    let mut total = g.add(si_final, weighted_coarse)?;
    if sw.cross {
        total = g.add(total, cross)?;
    }
    let opw_value = match opw {
        Some(o) => {
            if sw.opw {
                let weighted = g.scale(o, w.lambda_opw);
                total = g.add(total, weighted)?;
            }
            g.value(o).item()
        }
        None => 0.0,
    };
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        si_final: g.value(si_final).item(),
        si_coarse: g.value(si_coarse).item(),
        cross: g.value(cross).item(),
        opw: opw_value,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward_window, FrameInput, ModelConfig, ModelParams};
    use crate::tensor::gradcheck::{max_relative_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred_si(pred: &[f64], gt: &[f64], w: &LossWeights) -> f64 {
        let n = pred.len();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 1, n], pred.to_vec()).unwrap());
        let gt = DepthFrame::from_dense(1, n, gt.to_vec()).unwrap();
        let l = si_loss(&mut g, p, &gt, w).unwrap();
        g.value(l).item()
    }

    #[test]
    fn si_fixtures() {
        let w = LossWeights::default();
        let e = std::f64::consts::E;
        assert!((pred_si(&[e, e], &[1.0, 1.0], &w) - 10.0 * 0.15f64.sqrt()).abs() < 1e-9);
        assert!((pred_si(&[e, e], &[1.0, 1.0], &w) - 3.8730).abs() < 1e-4);
        assert_eq!(pred_si(&[1.5, 2.0, 3.0], &[1.5, 2.0, 3.0], &w), 0.0);
        let scale_inv = LossWeights { lambda_si: 1.0, ..w };
        assert!(pred_si(&[3.0, 6.0, 9.0], &[1.0, 2.0, 3.0], &scale_inv).abs() < 1e-9);
        assert!(pred_si(&[1.1, 2.0, 3.3], &[1.0, 2.0, 3.0], &w) > 0.0);
    }

    #[test]
    fn si_empty_mask_is_an_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 2, 2], 1.0));
        let gt = DepthFrame::new(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(si_loss(&mut g, p, &gt, &LossWeights::default()), Err(SvdcError::EmptyMask)));
    }

    fn opw_value(pred_n: Tensor, pred_prev: Tensor, gn: &Tensor, gp: &Tensor, flow: &FlowField) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(pred_n);
        let b = g.constant(pred_prev);
        let l = opw_loss(&mut g, a, b, gn, gp, flow, &LossWeights::default()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn opw_fixtures() {
        let gd = Tensor::full(&[3, 4, 5], 0.4);
        let zero = FlowField::zeros(4, 5);
        let p = Tensor::from_fn(&[1, 4, 5], |i| 1.0 + i as f64 * 0.1);
        assert_eq!(opw_value(p.clone(), p.clone(), &gd, &gd, &zero), 0.0);
        let plus = Tensor::from_fn(&[1, 4, 5], |i| p.data()[i] + 1.0);
        assert!((opw_value(plus.clone(), p.clone(), &gd, &gd, &zero) - 1.0).abs() < 1e-12);

        // a guidance mismatch at one pixel suppresses that pixel by exp(-beta * d2)
        let mut other = gd.clone();
        other.data_mut()[0] += 0.1;
        let v = opw_value(plus.clone(), p.clone(), &gd, &other, &zero);
        assert!((v - (19.0 + (-0.5f64).exp()) / 20.0).abs() < 1e-12);

        // occluded pixels drop out entirely
        let mut occ = FlowField::zeros(4, 5);
        let mut mask = vec![false; 20];
        mask[..10].fill(true);
        occ.set_occluded(mask).unwrap();
        assert!((opw_value(plus, p, &gd, &gd, &occ) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn opw_bounded_by_mean_warped_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(&[1, 5, 6], |_| rng.random_range(1.0..3.0));
        let b = Tensor::from_fn(&[1, 5, 6], |_| rng.random_range(1.0..3.0));
        let ga = Tensor::from_fn(&[3, 5, 6], |_| rng.random_range(0.0..1.0));
        let gb = Tensor::from_fn(&[3, 5, 6], |_| rng.random_range(0.0..1.0));
        let flow = FlowField::new(5, 6, (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![false; 30]).unwrap();
        let v = opw_value(a.clone(), b.clone(), &ga, &gb, &flow);
        let warped = crate::flow::warp_backward(&b, &flow).unwrap();
        let bound = a.data().iter().zip(warped.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 30.0;
        assert!(v >= 0.0 && v <= bound);
    }

    fn cross_value(a: &[Tensor], b: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let av: Vec<Var> = a.iter().map(|t| g.constant(t.clone())).collect();
        let bv: Vec<Var> = b.iter().map(|t| g.constant(t.clone())).collect();
        let l = cross_window_loss(&mut g, &av, &bv, &LossWeights::default()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn cross_window_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[1, 3, 4], |_| rng.random_range(1.0..4.0))).collect();
        let wj = frames[0..3].to_vec();
        let wj1 = frames[1..4].to_vec();
        assert_eq!(cross_value(&wj, &wj1), 0.0);

        let e = std::f64::consts::E;
        let scaled: Vec<Tensor> = wj1.iter().map(|t| Tensor::from_fn(t.shape(), |i| e * t.data()[i])).collect();
        assert!((cross_value(&wj, &scaled) - 2.0 * 10.0 * 0.15f64.sqrt()).abs() < 1e-9);
        assert!(cross_value(&scaled, &wj) > 0.0);

        // any non-uniform perturbation of a shared frame is penalised
        let mut bumped = wj1.clone();
        bumped[0].data_mut()[3] *= 1.2;
        assert!(cross_value(&wj, &bumped) > 0.0);

        let mut g = Graph::new();
        let v: Vec<Var> = wj.iter().map(|t| g.constant(t.clone())).collect();
        assert!(cross_window_loss(&mut g, &v, &v[..2], &LossWeights::default()).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = [1, 4, 5];
        let inputs: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&n, |_| rng.random_range(1.0..4.0))).collect();
        let gt = DepthFrame::from_dense(4, 5, (0..20).map(|_| rng.random_range(1.0..4.0)).collect()).unwrap();
        let ga = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(0.0..1.0));
        let gb = Tensor::from_fn(&[3, 4, 5], |i| ga.data()[i] + rng.random_range(-0.1..0.1));
        let flow = FlowField::new(4, 5, (0..40).map(|_| rng.random_range(-0.8..0.8)).collect(), vec![false; 20]).unwrap();
        let w = LossWeights::default();
        let build = |g: &mut Graph, ts: &[Tensor], trainable: bool| -> Result<(Var, Vec<Var>)> {
            let vs: Vec<Var> = ts.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
            let a = si_loss(g, vs[0], &gt, &w)?;
            let b = opw_loss(g, vs[0], vs[1], &ga, &gb, &flow, &w)?;
            let c = si_between(g, vs[1], vs[0], &w)?;
            let ab = g.add(a, b)?;
            Ok((g.add(ab, c)?, vs))
        };
        let mut g = Graph::new();
        let (loss, vs) = build(&mut g, &inputs, true).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vs.iter().map(|v| g.grad(*v).unwrap()).collect();
        let mut f = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let (l, _) = build(&mut g, ts, false)?;
            Ok(g.value(l).item())
        };
        let numeric = numeric_gradient(&mut f, &inputs, 1e-5, None).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    struct Fixture {
        rgb: Vec<Tensor>,
        sparse: Vec<Tensor>,
        depth: Vec<DepthFrame>,
        flow: FlowField,
    }

    fn static_fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let depth = DepthFrame::from_dense(8, 12, (0..96).map(|_| rng.random_range(1.0..4.0)).collect()).unwrap();
        let rgb = Tensor::from_fn(&[3, 8, 12], |_| rng.random_range(0.0..1.0));
        Fixture {
            rgb: vec![rgb; 4],
            sparse: vec![Tensor::zeros(&[1, 8, 12]); 4],
            depth: vec![depth; 4],
            flow: FlowField::zeros(8, 12),
        }
    }

    #[test]
    fn perfect_static_predictions_give_zero_loss() {
        let fx = static_fixture();
        let mut g = Graph::new();
        let fine: Vec<Var> = fx.depth.iter().map(|d| g.constant(d.to_tensor())).collect();
        let coarse: Vec<Var> = fx.depth.iter().map(|d| g.constant(d.downsample(4).unwrap().to_tensor())).collect();
        let wj = WindowOutput { coarse: coarse[0..3].to_vec(), fine: fine[0..3].to_vec() };
        let wj1 = WindowOutput { coarse: coarse[1..4].to_vec(), fine: fine[1..4].to_vec() };
        let targets: Vec<FrameTargets> =
            (0..4).map(|i| FrameTargets { depth: &fx.depth[i], guidance: &fx.rgb[i], flow_bwd: &fx.flow }).collect();
        let (_, b) = total_loss(&mut g, &wj, &wj1, &targets, &LossWeights::default(), LossSwitches::default()).unwrap();
        assert_eq!(b, LossBreakdown::default());
    }

    fn model_loss(
        fx: &Fixture,
        p: &ModelParams,
        cfg: &ModelConfig,
        w: &LossWeights,
        sw: LossSwitches,
    ) -> (Graph, Var, LossBreakdown, crate::net::Bound) {
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        let frames: Vec<FrameInput> = (0..4)
            .map(|i| FrameInput { guidance: &fx.rgb[i], sparse: &fx.sparse[i], flow_fwd: &fx.flow, flow_bwd: &fx.flow })
            .collect();
        let wj = forward_window(&mut g, &b, cfg, &frames[0..3]).unwrap();
        let wj1 = forward_window(&mut g, &b, cfg, &frames[1..4]).unwrap();
        let targets: Vec<FrameTargets> =
            (0..4).map(|i| FrameTargets { depth: &fx.depth[i], guidance: &fx.rgb[i], flow_bwd: &fx.flow }).collect();
        let (l, bd) = total_loss(&mut g, &wj, &wj1, &targets, w, sw).unwrap();
        (g, l, bd, b)
    }

    #[test]
    fn breakdown_bookkeeping() {
        let fx = static_fixture();
        let cfg = ModelConfig { base_channels: 2, guide_channels: 2, num_bins: 3, ..ModelConfig::default() };
        let mut p = ModelParams::init(&cfg, 5).unwrap();
        p.jitter(0.2, 6);
        let w = LossWeights::default();
        let (_, _, b, _) = model_loss(&fx, &p, &cfg, &w, LossSwitches::default());
        assert!((b.recombine(&w, LossSwitches::default()) - b.total).abs() < 1e-12);
        assert!(b.si_final > 0.0 && b.si_coarse > 0.0 && b.cross > 0.0 && b.opw > 0.0);

        let no_cross = LossSwitches { cross: false, opw: true };
        let (_, _, b2, _) = model_loss(&fx, &p, &cfg, &w, no_cross);
        assert_eq!((b2.si_final, b2.si_coarse, b2.opw, b2.cross), (b.si_final, b.si_coarse, b.opw, b.cross));
        assert!((b2.total - (b.total - b.cross)).abs() < 1e-12);

        // with gamma and lambda_opw zeroed only SI(final) and the cross term remain
        let tiny = LossWeights { gamma_coarse: 0.0, lambda_opw: 0.0, ..w };
        let (_, _, b3, _) = model_loss(&fx, &p, &cfg, &tiny, LossSwitches::default());
        assert!((b3.total - (b3.si_final + b3.cross)).abs() < 1e-12);
    }
}
