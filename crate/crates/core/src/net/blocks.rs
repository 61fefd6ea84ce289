use super::{Bound, FusionMode, ModelConfig, DOWNSAMPLE, NUM_OFFSETS};
use crate::error::{shape_err, Result};
use crate::flow::FlowField;
use crate::scene::nearest_fill;
use crate::tensor::{Graph, PoolMode, Tensor, Var};

fn conv(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(bias), stride, k / 2)
}

fn conv_relu(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, b, name, x, stride)?;
    Ok(g.relu(y))
}

/// Full-resolution guide features and the 1/4-resolution frame feature.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub feat: Var,
    pub guide: Var,
}

/// Per `factor`-sized block: the mean of the measured (non-zero) depths of
/// `sparse`, with empty blocks taking the nearest measured block, and the
/// fraction of the block's pixels that carry a measurement. `[2, H/f, W/f]`.
pub fn sparse_prior(sparse: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, h, w) = sparse.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("{h}x{w} is not divisible by {factor}"));
    }
    let (bh, bw) = (h / factor, w / factor);
    let mut sum = vec![0.0; bh * bw];
    let mut count = vec![0usize; bh * bw];
    for (p, &v) in sparse.data().iter().enumerate() {
        if v > 0.0 {
            let cell = (p / w / factor) * bw + (p % w) / factor;
            sum[cell] += v;
            count[cell] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let filled = nearest_fill(&Tensor::new(vec![1, bh, bw], mean)?)?;
    let area = (factor * factor) as f64;
    let mut data = filled.into_data();
    data.extend(count.iter().map(|&n| n as f64 / area));
    Tensor::new(vec![2, bh, bw], data)
}

/// `guidance` is `[3, H, W]` in `[0, 1]`, `sparse` the rasterized `[1, H, W]`
/// depth map (0 where no sample landed). The first layer sees the image, the
/// scaled depth and its validity mask; the guide output is that layer's
/// features plus the scaled depth and mask. At 1/4 resolution the features
/// are joined with the block-pooled depth prior of the measurements.
pub fn encode(g: &mut Graph, b: &Bound, cfg: &ModelConfig, guidance: Var, sparse: Var) -> Result<Encoded> {
    let (h, w) = (g.shape(guidance)[1], g.shape(guidance)[2]);
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return shape_err(format!("input {h}x{w} is not divisible by {DOWNSAMPLE}"));
    }
    let raw = g.value(sparse).clone();
    let mask = Tensor::from_fn(raw.shape(), |i| if raw.data()[i] > 0.0 { 1.0 } else { 0.0 });
    let mut prior = sparse_prior(&raw, DOWNSAMPLE)?;
    let (_, ph, pw) = prior.dims3()?;
    prior.data_mut()[..ph * pw].iter_mut().for_each(|v| *v /= cfg.d_max);

    let mask = g.constant(mask);
    let prior = g.constant(prior);
    let sparse = g.scale(sparse, 1.0 / cfg.d_max);
    let x = g.concat(&[guidance, sparse, mask], 0)?;
    let first = conv_relu(g, b, "enc1", x, 1)?;
    let guide = g.concat(&[first, sparse, mask], 0)?;
    let half = conv_relu(g, b, "enc2", first, 2)?;
    let quarter = conv_relu(g, b, "enc3", half, 2)?;
    let joined = g.concat(&[quarter, prior], 0)?;
    let feat = conv_relu(g, b, "enc4", joined, 1)?;
    Ok(Encoded { feat, guide })
}

/// Brings `source` onto the grid of `reference`. `flow` (`[2, h, w]`, feature
/// pixels) maps reference coordinates into the source frame; eight residual
/// offsets predicted from `(reference, source, flow)` refine it, the source is
/// sampled once per refined flow and a 1x1 conv merges the candidates.
pub fn flow_guided_align(g: &mut Graph, b: &Bound, prefix: &str, reference: Var, source: Var, flow: Var) -> Result<Var> {
    if g.shape(reference) != g.shape(source) {
        return shape_err(format!("align inputs differ: {:?} vs {:?}", g.shape(reference), g.shape(source)));
    }
    let (h, w) = (g.shape(source)[1], g.shape(source)[2]);
    if g.shape(flow) != [2, h, w] {
        return shape_err(format!("flow {:?} does not match features {h}x{w}", g.shape(flow)));
    }
    let cat = g.concat(&[reference, source, flow], 0)?;
    let offsets = conv(g, b, &format!("{prefix}.align.offset"), cat, 1)?;
    let mut candidates = Vec::with_capacity(NUM_OFFSETS);
    for k in 0..NUM_OFFSETS {
        let residual = g.slice_channels(offsets, 2 * k, 2)?;
        let refined = g.add(flow, residual)?;
        candidates.push(g.warp(source, refined)?);
    }
    let stacked = g.concat(&candidates, 0)?;
    conv(g, b, &format!("{prefix}.align.merge"), stacked, 1)
}

/// Channel attention `A_c = sigmoid(mlp(avg) + mlp(max))` and `A_c * F`.
pub fn channel_enhance(g: &mut Graph, b: &Bound, prefix: &str, f: Var) -> Result<(Var, Var)> {
    let branch = |g: &mut Graph, mode| -> Result<Var> {
        let pooled = g.pool_spatial(f, mode)?;
        let hidden = conv_relu(g, b, &format!("{prefix}.ce.fc1"), pooled, 1)?;
        conv(g, b, &format!("{prefix}.ce.fc2"), hidden, 1)
    };
    let avg = branch(g, PoolMode::Avg)?;
    let max = branch(g, PoolMode::Max)?;
    let logits = g.add(avg, max)?;
    let a_c = g.sigmoid(logits);
    let f_ce = g.mul(a_c, f)?;
    Ok((f_ce, a_c))
}

/// `sigmoid(conv1x1([mean_c F, max_c F]))`, shape `[1, h, w]`.
pub fn spatial_attention(g: &mut Graph, b: &Bound, prefix: &str, f: Var) -> Result<Var> {
    let avg = g.pool_channel(f, PoolMode::Avg)?;
    let max = g.pool_channel(f, PoolMode::Max)?;
    let cat = g.concat(&[avg, max], 0)?;
    let logits = conv(g, b, &format!("{prefix}.sa"), cat, 1)?;
    Ok(g.sigmoid(logits))
}

/// Enhanced feature and spatial attention map. With `enabled == false` the
/// feature passes through and the map is a constant 0.5.
pub fn csea(g: &mut Graph, b: &Bound, prefix: &str, f: Var, enabled: bool) -> Result<(Var, Var)> {
    if !enabled {
        let (h, w) = (g.shape(f)[1], g.shape(f)[2]);
        let half = g.constant(Tensor::full(&[1, h, w], 0.5));
        return Ok((f, half));
    }
    let (f_ce, _) = channel_enhance(g, b, prefix, f)?;
    let a = spatial_attention(g, b, prefix, f_ce)?;
    let f_enh = g.mul(a, f_ce)?;
    Ok((f_enh, a))
}

/// `A * conv_small(x) + (1 - A) * conv_large(x)`.
pub fn afsf(g: &mut Graph, b: &Bound, prefix: &str, features_cat: Var, a: Var, mode: FusionMode) -> Result<Var> {
    let small = format!("{prefix}.fuse.small");
    let large = format!("{prefix}.fuse.large");
    match mode {
        FusionMode::Small => conv(g, b, &small, features_cat, 1),
        FusionMode::Large => conv(g, b, &large, features_cat, 1),
        FusionMode::Adaptive => {
            let f_s = conv(g, b, &small, features_cat, 1)?;
            let f_l = conv(g, b, &large, features_cat, 1)?;
            let neg = g.scale(a, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            let ws = g.mul(a, f_s)?;
            let wl = g.mul(one_minus, f_l)?;
            g.add(ws, wl)
        }
    }
}

/// `x + conv(relu(conv(x)))`.
pub fn residual_block(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = conv_relu(g, b, &format!("{prefix}.res.c1"), x, 1)?;
    let r = conv(g, b, &format!("{prefix}.res.c2"), h, 1)?;
    g.add(x, r)
}

fn propagate_step(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    cur: Var,
    neighbour: Option<(Var, Var)>,
) -> Result<Var> {
    let (cur_enh, a) = csea(g, b, prefix, cur, cfg.use_csea)?;
    let Some((state, flow)) = neighbour else {
        return residual_block(g, b, prefix, cur_enh);
    };
    let aligned = flow_guided_align(g, b, prefix, cur, state, flow)?;
    let (nb_enh, _) = csea(g, b, prefix, aligned, cfg.use_csea)?;
    let cat = g.concat(&[cur_enh, nb_enh], 0)?;
    let fused = afsf(g, b, prefix, cat, a, cfg.fusion)?;
    residual_block(g, b, prefix, fused)
}

/// Recurrent sweep from the last frame to the first, then from the first to
/// the last over the backward sweep's outputs. `flows_fwd[n]` maps frame `n`
/// to `n + 1` and `flows_bwd[n]` maps `n` to `n - 1`, both at feature
/// resolution.
pub fn bidirectional_propagate(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    feats: &[Var],
    flows_fwd: &[Var],
    flows_bwd: &[Var],
) -> Result<Vec<Var>> {
    let t = feats.len();
    if flows_fwd.len() != t || flows_bwd.len() != t {
        return shape_err(format!("{t} features but {} / {} flows", flows_fwd.len(), flows_bwd.len()));
    }
    let mut back: Vec<Var> = Vec::with_capacity(t);
    for n in (0..t).rev() {
        let nb = back.last().map(|&s| (s, flows_fwd[n]));
        back.push(propagate_step(g, b, cfg, "bwd", feats[n], nb)?);
    }
    back.reverse();
    let mut out: Vec<Var> = Vec::with_capacity(t);
    for n in 0..t {
        let nb = out.last().map(|&s| (s, flows_bwd[n]));
        out.push(propagate_step(g, b, cfg, "fwd", back[n], nb)?);
    }
    Ok(out)
}

// Fixed gain on the bin-probability logits so that the softmax can sharpen
// within a few optimizer steps.
const PROB_GAIN: f64 = 10.0;

/// Adaptive-bin depth: global bin widths, per-pixel bin probabilities,
/// depth as the probability-weighted sum of bin centres. `[1, h, w]`.
pub fn depth_head(g: &mut Graph, b: &Bound, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let pooled = g.pool_spatial(f, PoolMode::Avg)?;
    let hidden = conv_relu(g, b, "head.bins1", pooled, 1)?;
    let logits = conv(g, b, "head.bins2", hidden, 1)?;
    let widths = g.softmax_channel(logits)?;
    let centers = g.bin_centers(widths, cfg.d_min, cfg.d_max)?;
    let prob_logits = conv(g, b, "head.prob", f, 1)?;
    let prob_logits = g.scale(prob_logits, PROB_GAIN);
    let probs = g.softmax_channel(prob_logits)?;
    let weighted = g.mul(probs, centers)?;
    let ones = g.constant(Tensor::full(&[1, cfg.num_bins, 1, 1], 1.0));
    g.conv2d(weighted, ones, None, 1, 0)
}

/// Bilinear 4x upsampling of `coarse` times a bounded ratio
/// `exp(clamp * tanh(r))`. The log ratio `r` is predicted at coarse
/// resolution from the coarse depth, the propagated feature, the
/// space-to-depth folded guide features and the folded log measurement
/// residual `mask * (ln sparse - ln upsampled)`, then unfolded by
/// depth-to-space. The measurement residual also skips the hidden layer into
/// the output conv. The last two guide channels must be the sparse depth over
/// `d_max` and its 0/1 mask, as produced by [`encode`].
pub fn upsample_refine(g: &mut Graph, b: &Bound, cfg: &ModelConfig, coarse: Var, feat: Var, guide: Var) -> Result<Var> {
    let (h, w) = (g.shape(coarse)[1], g.shape(coarse)[2]);
    let (gc, gh, gw) = (g.shape(guide)[0], g.shape(guide)[1], g.shape(guide)[2]);
    if gh != DOWNSAMPLE * h || gw != DOWNSAMPLE * w || gc < 2 {
        return shape_err(format!("guide {gc}x{gh}x{gw} does not fit the coarse {h}x{w}"));
    }
    let up = g.upsample(coarse, DOWNSAMPLE)?;
    let sparse = g.slice_channels(guide, gc - 2, 1)?;
    let mask = g.slice_channels(guide, gc - 1, 1)?;
    // unmeasured pixels read 1 so that their log is 0
    let sparse = g.scale(sparse, cfg.d_max);
    let unmeasured = g.scale(mask, -1.0);
    let unmeasured = g.add_scalar(unmeasured, 1.0);
    let filled = g.add(sparse, unmeasured)?;
    let log_sparse = g.ln(filled)?;
    let log_up = g.ln(up)?;
    let gap = g.sub(log_sparse, log_up)?;
    let gap = g.mul(mask, gap)?;
    let gap = g.space_to_depth(gap, DOWNSAMPLE)?;

    let folded = g.space_to_depth(guide, DOWNSAMPLE)?;
    let norm = g.scale(coarse, 1.0 / cfg.d_max);
    let x = g.concat(&[norm, feat, folded, gap], 0)?;
    let hidden = conv_relu(g, b, "up.c1", x, 1)?;
    let joined = g.concat(&[hidden, gap], 0)?;
    let sub = conv(g, b, "up.c2", joined, 1)?;
    let residual = g.depth_to_space(sub, DOWNSAMPLE)?;
    let bounded = g.tanh(residual);
    let bounded = g.scale(bounded, cfg.residual_clamp);
    let ratio = g.exp(bounded);
    g.mul(up, ratio)
}

/// One frame of network input.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub guidance: &'a Tensor,
    /// Rasterized sparse depth `[1, H, W]`.
    pub sparse: &'a Tensor,
    pub flow_fwd: &'a FlowField,
    pub flow_bwd: &'a FlowField,
}

impl FrameInput<'_> {
    /// Encodes the frame and places its feature-resolution flows on `g`.
    /// Returns `(encoded, flow_fwd, flow_bwd)`.
    pub fn prepare(&self, g: &mut Graph, b: &Bound, cfg: &ModelConfig) -> Result<(Encoded, Var, Var)> {
        let guidance = g.constant(self.guidance.clone());
        let sparse = g.constant(self.sparse.clone());
        let enc = encode(g, b, cfg, guidance, sparse)?;
        let ff = g.constant(self.flow_fwd.downsample(DOWNSAMPLE)?.to_tensor());
        let fb = g.constant(self.flow_bwd.downsample(DOWNSAMPLE)?.to_tensor());
        Ok((enc, ff, fb))
    }
}

/// Per-frame coarse (`[1, h, w]`) and final (`[1, H, W]`) depth of a window.
#[derive(Clone, Debug)]
pub struct WindowOutput {
    pub coarse: Vec<Var>,
    pub fine: Vec<Var>,
}

/// Window forward pass from already-encoded frames.
pub fn forward_encoded(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    encoded: &[Encoded],
    flows_fwd: &[Var],
    flows_bwd: &[Var],
) -> Result<WindowOutput> {
    let feats: Vec<Var> = encoded.iter().map(|e| e.feat).collect();
    let fused = bidirectional_propagate(g, b, cfg, &feats, flows_fwd, flows_bwd)?;
    let mut coarse = Vec::with_capacity(fused.len());
    let mut fine = Vec::with_capacity(fused.len());
    for (f, e) in fused.iter().zip(encoded) {
        let c = depth_head(g, b, cfg, *f)?;
        fine.push(upsample_refine(g, b, cfg, c, *f, e.guide)?);
        coarse.push(c);
    }
    Ok(WindowOutput { coarse, fine })
}

pub fn forward_window(g: &mut Graph, b: &Bound, cfg: &ModelConfig, frames: &[FrameInput]) -> Result<WindowOutput> {
    if frames.is_empty() {
        return shape_err("empty window");
    }
    let shape = frames[0].guidance.shape().to_vec();
    let mut encoded = Vec::with_capacity(frames.len());
    let mut ff = Vec::with_capacity(frames.len());
    let mut fb = Vec::with_capacity(frames.len());
    for fr in frames {
        if fr.guidance.shape() != shape.as_slice() {
            return shape_err("window frames differ in resolution");
        }
        let (e, f, bw) = fr.prepare(g, b, cfg)?;
        encoded.push(e);
        ff.push(f);
        fb.push(bw);
    }
    forward_encoded(g, b, cfg, &encoded, &ff, &fb)
}
