//! Corpus construction, the windowed training loop and stitched evaluation.

mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{clip_gradients, AdamW, OneCycle};

use crate::error::{Result, SvdcError};
use crate::flow::FlowField;
use crate::io::Clip;
use crate::losses::{total_loss, FrameTargets, LossBreakdown, LossSwitches, LossWeights};
use crate::metrics::{frame_metrics, pair_metrics, EvalReport, FrameRow, Summary};
use crate::net::{forward_encoded, forward_window, FrameInput, ModelConfig, ModelParams};
use crate::scene::{
    generate_scene, nearest_fill, rasterize_sparse, simulate_dtof, DToFConfig, DepthFrame, LayoutParams, SceneConfig,
};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Overlapping window pairs per step.
    pub batch: usize,
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub window: usize,
    pub seed: u64,
    pub use_cross_loss: bool,
    pub use_opw_loss: bool,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            lr_max: 3e-4,
            warmup_frac: 0.3,
            weight_decay: 1e-2,
            grad_clip: 0.1,
            window: 3,
            seed: 0,
            use_cross_loss: true,
            use_opw_loss: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SvdcError::Config(m.to_string()));
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if !(self.lr_max > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("lr_max and grad_clip must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if self.window < 2 {
            return bad("window must be at least 2 for overlapping-window training");
        }
        Ok(())
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches { cross: self.use_cross_loss, opw: self.use_opw_loss }
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle::new(self.lr_max, self.steps, self.warmup_frac)
    }
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Horizontal FOV of the rendering camera; must match the sensor's `camera_fov_deg`.
    pub hfov_deg: f64,
    pub clip_frames: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub seed: u64,
    pub min_spheres: usize,
    pub max_spheres: usize,
    pub max_motion_px: f64,
    pub camera_motion: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let l = LayoutParams::default();
        Self {
            height: 48,
            width: 64,
            hfov_deg: 90.0,
            clip_frames: 10,
            train_clips: 20,
            eval_clips: 6,
            seed: 0,
            min_spheres: l.min_spheres,
            max_spheres: l.max_spheres,
            max_motion_px: l.max_motion_px,
            camera_motion: l.camera_motion,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(SvdcError::Config(format!("resolution {}x{} must be a positive multiple of 4", self.height, self.width)));
        }
        if self.clip_frames < 3 {
            return Err(SvdcError::Config("clip_frames must be at least 3".into()));
        }
        if self.min_spheres > self.max_spheres {
            return Err(SvdcError::Config("min_spheres exceeds max_spheres".into()));
        }
        Ok(())
    }

    fn layout(&self) -> LayoutParams {
        LayoutParams {
            min_spheres: self.min_spheres,
            max_spheres: self.max_spheres,
            max_motion_px: self.max_motion_px,
            camera_motion: self.camera_motion,
        }
    }
}

/// Which split a generated clip belongs to; the splits use disjoint seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn clip_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7A1E_u64,
        Split::Eval => 0xE7A1_u64,
    };
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ index as u64
}

/// Renders clip `index` of `split` and simulates its sensor readout.
pub fn generate_clip(data: &DataConfig, dtof: &DToFConfig, split: Split, index: usize) -> Result<Clip> {
    data.validate()?;
    if dtof.camera_fov_deg != data.hfov_deg {
        return Err(SvdcError::Config(format!(
            "sensor host FOV {} differs from camera FOV {}",
            dtof.camera_fov_deg, data.hfov_deg
        )));
    }
    let seed = clip_seed(data.seed, split, index);
    let scene = SceneConfig::random(seed, data.height, data.width, data.clip_frames, data.hfov_deg, data.layout());
    let frames = generate_scene(&scene)?;
    let sensor = DToFConfig { seed: dtof.seed ^ seed, ..dtof.clone() };
    let sparse = frames
        .iter()
        .enumerate()
        .map(|(i, f)| simulate_dtof(&f.depth, &f.guidance, &sensor, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Clip { frames, sparse })
}

pub fn generate_corpus(data: &DataConfig, dtof: &DToFConfig, split: Split) -> Result<Vec<Clip>> {
    let n = match split {
        Split::Train => data.train_clips,
        Split::Eval => data.eval_clips,
    };
    (0..n).map(|i| generate_clip(data, dtof, split, i)).collect()
}

/// A frame with its network input and targets ready to use.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub guidance: Tensor,
    pub sparse: Tensor,
    pub depth: DepthFrame,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
}

impl PreparedFrame {
    pub fn input(&self) -> FrameInput<'_> {
        FrameInput { guidance: &self.guidance, sparse: &self.sparse, flow_fwd: &self.flow_fwd, flow_bwd: &self.flow_bwd }
    }

    pub fn targets(&self) -> FrameTargets<'_> {
        FrameTargets { depth: &self.depth, guidance: &self.guidance, flow_bwd: &self.flow_bwd }
    }
}

pub fn prepare_clip(clip: &Clip) -> Vec<PreparedFrame> {
    clip.frames
        .iter()
        .zip(&clip.sparse)
        .map(|(f, s)| PreparedFrame {
            guidance: f.guidance.clone(),
            sparse: rasterize_sparse(s, (f.depth.height(), f.depth.width())),
            depth: f.depth.clone(),
            flow_fwd: f.flow_fwd.clone(),
            flow_bwd: f.flow_bwd.clone(),
        })
        .collect()
}

/// Mean component values over a batch plus the learning rate used.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Largest absolute gradient entry before clipping.
    pub max_grad: f64,
}

/// Forward both windows of every batch element (each a run of `T + 1`
/// frames), back-propagate the batch-mean objective, clip, and update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[&[PreparedFrame]],
    model: &ModelConfig,
    weights: &LossWeights,
    switches: LossSwitches,
    lr: f64,
    grad_clip: f64,
    step_index: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(SvdcError::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut mean = LossBreakdown::default();
    for frames in batch {
        let t = frames.len() - 1;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let mut enc = Vec::with_capacity(t + 1);
        let mut ff = Vec::with_capacity(t + 1);
        let mut fb = Vec::with_capacity(t + 1);
        for f in frames.iter() {
            let (e, a, b) = f.input().prepare(&mut g, &bound, model)?;
            enc.push(e);
            ff.push(a);
            fb.push(b);
        }
        let wj = forward_encoded(&mut g, &bound, model, &enc[..t], &ff[..t], &fb[..t])?;
        let wj1 = forward_encoded(&mut g, &bound, model, &enc[1..], &ff[1..], &fb[1..])?;
        let targets: Vec<FrameTargets> = frames.iter().map(PreparedFrame::targets).collect();
        let (loss, b) = total_loss(&mut g, &wj, &wj1, &targets, weights, switches)?;
        if !b.total.is_finite() {
            return Err(SvdcError::NonFinite { step: step_index, detail: format!("loss {b:?}") });
        }
        let loss = g.scale(loss, scale);
        g.backward(loss)?;
        for (name, v) in bound.iter() {
            let Some(gv) = g.grad(v) else { continue };
            match grads.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(name.to_string(), gv);
                }
            }
        }
        mean.total += scale * b.total;
        mean.si_final += scale * b.si_final;
        mean.si_coarse += scale * b.si_coarse;
        mean.cross += scale * b.cross;
        mean.opw += scale * b.opw;
    }
    let mut max_grad: f64 = 0.0;
    for (name, gv) in &grads {
        for v in gv.data() {
            if !v.is_finite() {
                return Err(SvdcError::NonFinite { step: step_index, detail: format!("gradient of {name}") });
            }
            max_grad = max_grad.max(v.abs());
        }
    }
    clip_gradients(&mut grads, grad_clip);
    opt.step(params, &grads, lr)?;
    if !params.is_finite() || !opt.moments_finite() {
        return Err(SvdcError::NonFinite { step: step_index, detail: "parameters after update".into() });
    }
    Ok(StepStats { lr, loss: mean, max_grad })
}

/// Training windows: `(clip, first frame)` for every run of `window + 1` frames.
pub fn window_starts(clips: &[Vec<PreparedFrame>], window: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, frames)| (0..frames.len().saturating_sub(window)).map(move |s| (c, s)))
        .collect()
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<StepStats>,
    pub checkpoint: Option<PathBuf>,
}

/// Observer for per-step progress.
pub type Progress<'a> = &'a mut dyn FnMut(usize, &StepStats);

/// Full training run. With `out_dir` set, writes `loss_curve.csv`,
/// periodic `checkpoint_NNNNNN.ckpt` files and the final `checkpoint.ckpt`.
pub fn run_training(
    train: &TrainConfig,
    model: &ModelConfig,
    weights: &LossWeights,
    corpus: &[Clip],
    out_dir: Option<&Path>,
    mut progress: Option<Progress>,
) -> Result<TrainOutcome> {
    train.validate()?;
    model.validate()?;
    if train.window != model.window {
        return Err(SvdcError::Config(format!("train window {} differs from model window {}", train.window, model.window)));
    }
    let prepared: Vec<Vec<PreparedFrame>> = corpus.iter().map(prepare_clip).collect();
    let starts = window_starts(&prepared, train.window);
    if starts.is_empty() {
        return Err(SvdcError::Config(format!("no clip has the {} frames a window pair needs", train.window + 1)));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut params = ModelParams::init(model, train.seed)?;
    let mut opt = AdamW::new(train.weight_decay);
    let sched = train.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xBA7C_4E5_u64);
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let picks: Vec<(usize, usize)> = (0..train.batch).map(|_| starts[rng.random_range(0..starts.len())]).collect();
        let batch: Vec<&[PreparedFrame]> =
            picks.iter().map(|&(c, s)| &prepared[c][s..s + train.window + 1]).collect();
        let stats = train_step(
            &mut params,
            &mut opt,
            &batch,
            model,
            weights,
            train.switches(),
            sched.lr(step),
            train.grad_clip,
            step,
        )?;
        if let Some(p) = progress.as_mut() {
            p(step, &stats);
        }
        curve.push(stats);
        if let Some(dir) = out_dir {
            if train.checkpoint_every > 0 && (step + 1) % train.checkpoint_every == 0 && step + 1 < train.steps {
                params.save(&dir.join(format!("checkpoint_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&curve))?;
        let path = dir.join("checkpoint.ckpt");
        params.save(&path)?;
        checkpoint = Some(path);
    }
    Ok(TrainOutcome { params, curve, checkpoint })
}

pub fn loss_curve_csv(curve: &[StepStats]) -> String {
    let mut s = String::from("step,lr,total,si_final,si_coarse,cross,opw\n");
    for (i, c) in curve.iter().enumerate() {
        let l = c.loss;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", i, c.lr, l.total, l.si_final, l.si_coarse, l.cross, l.opw);
    }
    s
}

/// Final-resolution predictions for a clip, one window per `window` frames
/// (the last window may be shorter).
pub fn predict_clip(params: &ModelParams, model: &ModelConfig, frames: &[PreparedFrame], window: usize) -> Result<Vec<Tensor>> {
    if window == 0 {
        return Err(SvdcError::Config("window must be positive".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(window) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let inputs: Vec<FrameInput> = chunk.iter().map(PreparedFrame::input).collect();
        let w = forward_window(&mut g, &bound, model, &inputs)?;
        out.extend(w.fine.iter().map(|v| g.value(*v).clone()));
    }
    Ok(out)
}

/// Metrics of a set of stitched predictions.
pub fn evaluate_predictions(
    clips: &[Vec<PreparedFrame>],
    preds: &[Vec<Tensor>],
    window: usize,
    beta: f64,
) -> Result<(Summary, Vec<Vec<crate::metrics::FrameMetrics>>)> {
    let mut all_frames = Vec::new();
    let mut all_pairs = Vec::new();
    let mut per_clip = Vec::new();
    for (frames, p) in clips.iter().zip(preds) {
        let fm: Vec<_> = p.iter().zip(frames).map(|(p, f)| frame_metrics(p, &f.depth)).collect::<Result<_>>()?;
        let gts: Vec<DepthFrame> = frames.iter().map(|f| f.depth.clone()).collect();
        let gds: Vec<Tensor> = frames.iter().map(|f| f.guidance.clone()).collect();
        let fls: Vec<FlowField> = frames.iter().map(|f| f.flow_bwd.clone()).collect();
        all_pairs.extend(pair_metrics(p, &gts, &gds, &fls, window, beta)?);
        all_frames.extend(fm.iter().copied());
        per_clip.push(fm);
    }
    Ok((Summary::from_parts(&all_frames, &all_pairs), per_clip))
}

/// Stitched evaluation of `params` on `clips`, with the nearest-sample
/// baseline alongside.
pub fn run_eval(params: &ModelParams, model: &ModelConfig, clips: &[Clip], beta: f64) -> Result<EvalReport> {
    let prepared: Vec<Vec<PreparedFrame>> = clips.iter().map(prepare_clip).collect();
    let preds: Vec<Vec<Tensor>> =
        prepared.iter().map(|f| predict_clip(params, model, f, model.window)).collect::<Result<_>>()?;
    let base: Vec<Vec<Tensor>> = prepared
        .iter()
        .map(|fs| fs.iter().map(|f| nearest_fill(&f.sparse)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let (model_summary, model_frames) = evaluate_predictions(&prepared, &preds, model.window, beta)?;
    let (base_summary, base_frames) = evaluate_predictions(&prepared, &base, model.window, beta)?;
    let mut rows = Vec::new();
    for (c, (mf, bf)) in model_frames.iter().zip(&base_frames).enumerate() {
        for (i, (m, b)) in mf.iter().zip(bf).enumerate() {
            rows.push(FrameRow { clip: c, frame: i, window: i / model.window, model: *m, baseline: Some(*b) });
        }
    }
    Ok(EvalReport { model: model_summary, baseline: Some(base_summary), frames: rows })
}
