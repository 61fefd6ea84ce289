//! End-to-end acceptance checks, one report line per criterion.
//!
//! Runs without the libtest harness so the lines come out in order and the
//! training runs shared by criteria 6-8 happen once. `SVDC_ACCEPTANCE=1,3,5`
//! restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svdc::flow::{occlusion_mask, FlowField};
use svdc::io::Clip;
use svdc::losses::{si_loss, total_loss, FrameTargets, LossSwitches, LossWeights};
use svdc::metrics::{delta_acc, opw_pair, rel, rmse, tepe, EvalReport};
use svdc::net::{afsf, forward_encoded, param_gradient_error, FrameInput, FusionMode, ModelConfig, ModelParams};
use svdc::scene::{sample_rel, simulate_dtof, DToFConfig, DepthFrame};
use svdc::tensor::gradcheck::numeric_gradient;
use svdc::tensor::{Graph, PoolMode, Tensor, Var};
use svdc::train::{generate_corpus, run_eval, run_training, DataConfig, Split, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------
// 1. gradient checks

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Analytic vs central-difference gradient of `sum(op(inputs) * probe)` for every input entry.
fn op_check(inputs: &[Tensor], op: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |g: &mut Graph, vars: &[Var]| -> Var {
        let out = op(g, vars);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = rand_tensor(&mut rng, g.shape(out), 0.5, 1.5);
        let p = g.constant(probe);
        let prod = g.mul(out, p).unwrap();
        g.sum(prod)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = eval(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> =
        vars.iter().zip(inputs).map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let mut f = |ts: &[Tensor]| -> svdc::Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = eval(&mut g, &vars);
        Ok(g.value(loss).item())
    };
    let numeric = numeric_gradient(&mut f, inputs, 1e-5, None).unwrap();
    analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(x, y)| rel_err(*x, *y)).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Values bounded away from zero so ReLU and |x| stay differentiable under the probe step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Flow whose sample positions stay inside the image and away from integer coordinates.
fn smooth_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = (x as f64 + rng.random_range(-1.5..1.5)).clamp(0.3, w as f64 - 1.3);
            let ty = (y as f64 + rng.random_range(-1.5..1.5)).clamp(0.3, h as f64 - 1.3);
            let fx = tx.floor() + rng.random_range(0.2..0.8);
            let fy = ty.floor() + rng.random_range(0.2..0.8);
            data[p] = fx - x as f64;
            data[h * w + p] = fy - y as f64;
        }
    }
    Tensor::new(vec![2, h, w], data).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 6, 8], -1.0, 1.0);
    let wt = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let nz = away_from_zero(&mut rng, &[2, 6, 8]);
    let pos = rand_tensor(&mut rng, &[1, 6, 8], 0.5, 4.0);
    let target = rand_tensor(&mut rng, &[1, 6, 8], 0.5, 4.0);
    let chan = rand_tensor(&mut rng, &[3, 1, 1], -1.0, 1.0);
    let four = rand_tensor(&mut rng, &[4, 4, 6], -1.0, 1.0);
    let flow = smooth_flow(&mut rng, 6, 8);
    let widths = rand_tensor(&mut rng, &[4, 1, 1], 0.1, 1.0);
    let mask: Vec<bool> = (0..48).map(|i| i % 7 != 3).collect();

    type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("conv2d s1", vec![x.clone(), wt.clone(), bias.clone()], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap())),
        ("conv2d s2", vec![x.clone(), wt.clone()], Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, 1).unwrap())),
        ("pool_spatial avg", vec![x.clone()], Box::new(|g, v| g.pool_spatial(v[0], PoolMode::Avg).unwrap())),
        ("pool_spatial max", vec![x.clone()], Box::new(|g, v| g.pool_spatial(v[0], PoolMode::Max).unwrap())),
        ("pool_channel avg", vec![x.clone()], Box::new(|g, v| g.pool_channel(v[0], PoolMode::Avg).unwrap())),
        ("pool_channel max", vec![nz.clone()], Box::new(|g, v| g.pool_channel(v[0], PoolMode::Max).unwrap())),
        ("sigmoid", vec![x.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("relu", vec![nz.clone()], Box::new(|g, v| g.relu(v[0]))),
        ("tanh", vec![x.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("abs", vec![nz.clone()], Box::new(|g, v| g.abs(v[0]))),
        ("exp", vec![x.clone()], Box::new(|g, v| g.exp(v[0]))),
        ("ln", vec![pos.clone()], Box::new(|g, v| g.ln(v[0]).unwrap())),
        ("scale", vec![x.clone()], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("add_scalar", vec![x.clone()], Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        ("softmax_channel", vec![x.clone()], Box::new(|g, v| g.softmax_channel(v[0]).unwrap())),
        ("add broadcast", vec![x.clone(), pos.clone()], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![nz.clone(), x.clone()], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul broadcast", vec![chan.clone(), four.clone()], Box::new(|g, v| {
            let c3 = g.slice_channels(v[1], 0, 3).unwrap();
            g.mul(v[0], c3).unwrap()
        })),
        ("concat", vec![x.clone(), pos.clone()], Box::new(|g, v| g.concat(&[v[0], v[1]], 0).unwrap())),
        ("gather", vec![x.clone()], Box::new(|g, v| g.gather(v[0], vec![5, 5, 0, 95, 17], vec![5]).unwrap())),
        ("slice_channels", vec![four.clone()], Box::new(|g, v| g.slice_channels(v[0], 1, 2).unwrap())),
        ("depth_to_space", vec![four.clone()], Box::new(|g, v| g.depth_to_space(v[0], 2).unwrap())),
        ("space_to_depth", vec![x.clone()], Box::new(|g, v| g.space_to_depth(v[0], 2).unwrap())),
        ("warp", vec![x.clone(), flow.clone()], Box::new(|g, v| g.warp(v[0], v[1]).unwrap())),
        ("upsample", vec![four.clone()], Box::new(|g, v| g.upsample(v[0], 2).unwrap())),
        ("sum", vec![x.clone()], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![x.clone()], Box::new(|g, v| g.mean(v[0]))),
        ("si_loss", vec![pos.clone(), target.clone()], Box::new(move |g, v| g.si_loss(v[0], v[1], Some(&mask), 0.85, 10.0).unwrap())),
        ("bin_centers", vec![widths.clone()], Box::new(|g, v| g.bin_centers(v[0], 0.5, 10.0).unwrap())),
    ];
    let mut worst = (0.0, "");
    for (name, inputs, op) in &cases {
        let e = op_check(inputs, op.as_ref());
        if e > worst.0 {
            worst = (e, name);
        }
    }

    // end to end: two overlapping windows of a 2-channel model on 8x12 frames
    let cfg = ModelConfig { base_channels: 2, guide_channels: 2, num_bins: 3, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, 7).unwrap();
    params.jitter(0.2, 8);
    let (h, w) = (8, 12);
    let mut frames = Vec::new();
    for _ in 0..4 {
        let guidance = rand_tensor(&mut rng, &[3, h, w], 0.0, 1.0);
        let sparse = Tensor::from_fn(&[1, h, w], |i| if i % 3 == 0 { rng.random_range(1.0..6.0) } else { 0.0 });
        let depth = DepthFrame::from_dense(h, w, (0..h * w).map(|_| rng.random_range(1.0..6.0)).collect()).unwrap();
        let mut ff = FlowField::uniform(h, w, 0.3, -0.2);
        ff.set_occluded(vec![false; h * w]).unwrap();
        let fb = FlowField::uniform(h, w, -0.3, 0.2);
        frames.push((guidance, sparse, depth, ff, fb));
    }
    let weights = LossWeights::default();
    let (e2e, e2e_name) = param_gradient_error(&params, 1e-5, Some(12), &|g, b| {
        let mut enc = Vec::new();
        let (mut ffs, mut fbs) = (Vec::new(), Vec::new());
        for f in &frames {
            let input = FrameInput { guidance: &f.0, sparse: &f.1, flow_fwd: &f.3, flow_bwd: &f.4 };
            let (e, a, c) = input.prepare(g, b, &cfg)?;
            enc.push(e);
            ffs.push(a);
            fbs.push(c);
        }
        let wj = forward_encoded(g, b, &cfg, &enc[..3], &ffs[..3], &fbs[..3])?;
        let wj1 = forward_encoded(g, b, &cfg, &enc[1..], &ffs[1..], &fbs[1..])?;
        let targets: Vec<FrameTargets> =
            frames.iter().map(|f| FrameTargets { depth: &f.2, guidance: &f.0, flow_bwd: &f.4 }).collect();
        Ok(total_loss(g, &wj, &wj1, &targets, &weights, LossSwitches::default())?.0)
    })
    .unwrap();
    outcome(
        worst.0 <= 1e-4 && e2e <= 1e-3,
        format!(
            "{} ops, worst per-op rel err {:.2e} ({}); end-to-end worst {:.2e} ({e2e_name})",
            cases.len(),
            worst.0,
            worst.1,
            e2e
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. adaptive fusion semantics

fn criterion_2() -> Outcome {
    let cfg = ModelConfig { base_channels: 3, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, 21).unwrap();
    params.jitter(0.3, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (h, w) = (5, 7);
    let cat = rand_tensor(&mut rng, &[6, h, w], -1.0, 1.0);
    let run = |a: Tensor, mode: FusionMode| -> Tensor {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(cat.clone());
        let av = g.constant(a);
        let out = afsf(&mut g, &b, "bwd", x, av, mode).unwrap();
        g.value(out).clone()
    };
    let ones = Tensor::full(&[1, h, w], 1.0);
    let fs = run(ones.clone(), FusionMode::Small);
    let fl = run(ones.clone(), FusionMode::Large);
    let d1 = run(ones, FusionMode::Adaptive).max_abs_diff(&fs);
    let d0 = run(Tensor::zeros(&[1, h, w]), FusionMode::Adaptive).max_abs_diff(&fl);
    let mut outside: f64 = 0.0;
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[1, h, w], 1e-3, 1.0 - 1e-3);
        let out = run(a, FusionMode::Adaptive);
        for (i, v) in out.data().iter().enumerate() {
            let (lo, hi) = (fs.data()[i].min(fl.data()[i]), fs.data()[i].max(fl.data()[i]));
            outside = outside.max(lo - v).max(v - hi);
        }
    }
    outcome(
        d1 <= 1e-12 && d0 <= 1e-12 && outside <= 1e-12,
        format!("|A=1 - F_s| {d1:.1e}, |A=0 - F_l| {d0:.1e}, max excursion outside [F_s, F_l] {outside:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. loss fixtures

fn criterion_3() -> Outcome {
    let w = LossWeights::default();
    let e = std::f64::consts::E;
    let mut g = Graph::new();
    let pred = g.constant(Tensor::new(vec![1, 1, 2], vec![e, e]).unwrap());
    let gt = DepthFrame::from_dense(1, 2, vec![1.0, 1.0]).unwrap();
    let si = si_loss(&mut g, pred, &gt, &w).unwrap();
    let si = g.value(si).item();
    let want = 10.0 * 0.15f64.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let depth: Vec<f64> = (0..48).map(|_| rng.random_range(0.5..8.0)).collect();
    let gt = DepthFrame::from_dense(6, 8, depth.clone()).unwrap();
    let scaled = g.constant(Tensor::new(vec![1, 6, 8], depth.iter().map(|d| 2.7 * d).collect()).unwrap());
    let inv = si_loss(&mut g, scaled, &gt, &LossWeights { lambda_si: 1.0, ..w }).unwrap();
    let inv = g.value(inv).item();

    let frame = Tensor::new(vec![3, 1, 1], vec![0.5, 0.2, 0.9]).unwrap();
    let prev = Tensor::new(vec![3, 1, 1], vec![0.5, 0.2 + (1.0f64 / 50.0).sqrt(), 0.9]).unwrap();
    let m = occlusion_mask(&frame, &prev, w.beta_mask).unwrap().item();

    outcome(
        (si - want).abs() <= 1e-6 && inv.abs() <= 1e-9 && (m - 0.36788).abs() <= 1e-5,
        format!("SI fixture {si:.7} (want {want:.7}); scale-invariant {inv:.1e}; mask {m:.6}"),
    )
}

// ---------------------------------------------------------------------------
// 4. metric oracles

/// Clamp-to-edge bilinear sample, written independently of the library kernel.
fn oracle_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> (f64, [(usize, f64); 4]) {
    let cx = x.max(0.0).min((w - 1) as f64);
    let cy = y.max(0.0).min((h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    let taps = [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ];
    let mut v = 0.0;
    for (p, wt) in taps {
        v += wt * plane[p];
    }
    (v, taps)
}

struct Fixture {
    pred_i: Vec<f64>,
    pred_i1: Vec<f64>,
    gt_i: Vec<f64>,
    gt_i1: Vec<f64>,
    valid_i: Vec<bool>,
    valid_i1: Vec<bool>,
    du: Vec<f64>,
    dv: Vec<f64>,
    occ: Vec<bool>,
    guid_i: Vec<f64>,
    guid_i1: Vec<f64>,
}

const N: usize = 8;

fn fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let hw = N * N;
    let mut v = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let pred_i = v(0.5, 10.0, hw);
    let pred_i1 = v(0.5, 10.0, hw);
    let gt_i = v(0.5, 10.0, hw);
    let gt_i1 = v(0.5, 10.0, hw);
    let du = v(-2.0, 2.0, hw);
    let dv = v(-2.0, 2.0, hw);
    let guid_i = v(0.0, 1.0, 3 * hw);
    let guid_i1 = v(0.0, 1.0, 3 * hw);
    let valid_i = (0..hw).map(|_| rng.random_bool(0.9)).collect();
    let valid_i1 = (0..hw).map(|_| rng.random_bool(0.9)).collect();
    let occ = (0..hw).map(|_| rng.random_bool(0.1)).collect();
    Fixture { pred_i, pred_i1, gt_i, gt_i1, valid_i, valid_i1, du, dv, occ, guid_i, guid_i1 }
}

fn depth_frame(d: &[f64], valid: &[bool]) -> DepthFrame {
    let depth: Vec<f64> = d.iter().zip(valid).map(|(x, v)| if *v { *x } else { 0.0 }).collect();
    DepthFrame::new(N, N, depth, valid.to_vec()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let hw = N * N;
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut mismatched_masks = 0;
    for _ in 0..100 {
        let f = fixture(&mut rng);
        let p_i = Tensor::new(vec![1, N, N], f.pred_i.clone()).unwrap();
        let p_i1 = Tensor::new(vec![1, N, N], f.pred_i1.clone()).unwrap();
        let g_i = depth_frame(&f.gt_i, &f.valid_i);
        let g_i1 = depth_frame(&f.gt_i1, &f.valid_i1);
        let mut raw = f.du.clone();
        raw.extend(&f.dv);
        let flow = FlowField::new(N, N, raw, f.occ.clone()).unwrap();

        // RMSE / REL / delta
        let (mut se, mut re, mut n) = (0.0, 0.0, 0usize);
        let mut hits = [0usize; 3];
        for p in 0..hw {
            if !f.valid_i[p] {
                continue;
            }
            let (a, b) = (f.pred_i[p], f.gt_i[p]);
            se += (a - b) * (a - b);
            re += (a - b).abs() / b;
            n += 1;
            let ratio = if a > b { a / b } else { b / a };
            for (k, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
                if ratio < *t {
                    hits[k] += 1;
                }
            }
        }
        worst = worst.max((rmse(&p_i, &g_i).unwrap() - (se / n as f64).sqrt()).abs());
        worst = worst.max((rel(&p_i, &g_i).unwrap() - re / n as f64).abs());
        let mut deltas = [0.0; 3];
        for k in 0..3 {
            deltas[k] = delta_acc(&p_i, &g_i, 1.25f64.powi(k as i32 + 1)).unwrap();
            worst = worst.max((deltas[k] - hits[k] as f64 / n as f64).abs());
        }
        monotone &= deltas[0] <= deltas[1] && deltas[1] <= deltas[2];

        // TEPE
        let gt_i_plane: Vec<f64> = f.gt_i.iter().zip(&f.valid_i).map(|(d, v)| if *v { *d } else { 0.0 }).collect();
        let (mut sum, mut cnt) = (0.0, 0usize);
        for y in 0..N {
            for x in 0..N {
                let p = y * N + x;
                if f.occ[p] || !f.valid_i1[p] {
                    continue;
                }
                let (sx, sy) = (x as f64 + f.du[p], y as f64 + f.dv[p]);
                let (wg, taps) = oracle_sample(&gt_i_plane, N, N, sx, sy);
                if taps.iter().any(|(q, wt)| *wt > 0.0 && !f.valid_i[*q]) {
                    continue;
                }
                let (wp, _) = oracle_sample(&f.pred_i, N, N, sx, sy);
                sum += ((wg - f.gt_i1[p]) - (wp - f.pred_i1[p])).abs();
                cnt += 1;
            }
        }
        match tepe(&p_i, &p_i1, &g_i, &g_i1, &flow) {
            Ok(t) if cnt > 0 => worst = worst.max((t - 1000.0 * sum / cnt as f64).abs()),
            Err(svdc::SvdcError::EmptyMask) if cnt == 0 => {}
            _ => mismatched_masks += 1,
        }

        // OPW
        let beta = 50.0;
        let mut acc = 0.0;
        for y in 0..N {
            for x in 0..N {
                let p = y * N + x;
                if f.occ[p] {
                    continue;
                }
                let (sx, sy) = (x as f64 + f.du[p], y as f64 + f.dv[p]);
                let mut d2 = 0.0;
                for c in 0..3 {
                    let (wv, _) = oracle_sample(&f.guid_i[c * hw..(c + 1) * hw], N, N, sx, sy);
                    d2 += (f.guid_i1[c * hw + p] - wv).powi(2);
                }
                let (wp, _) = oracle_sample(&f.pred_i, N, N, sx, sy);
                acc += (-beta * d2).exp() * (f.pred_i1[p] - wp).abs();
            }
        }
        let gi = Tensor::new(vec![3, N, N], f.guid_i.clone()).unwrap();
        let gi1 = Tensor::new(vec![3, N, N], f.guid_i1.clone()).unwrap();
        let opw = opw_pair(&p_i1, &p_i, &gi1, &gi, &flow, beta).unwrap();
        worst = worst.max((opw - acc / hw as f64).abs());
    }
    outcome(
        worst <= 1e-9 && monotone && mismatched_masks == 0,
        format!("100 fixtures, max |metric - oracle| {worst:.1e}, delta monotone {monotone}, TEPE mask mismatches {mismatched_masks}"),
    )
}

// ---------------------------------------------------------------------------
// 5. sensor simulator

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (h, w) = (48, 64);
    let plane = DepthFrame::from_dense(h, w, vec![3.25; h * w]).unwrap();
    let gray = Tensor::full(&[3, h, w], 0.5);
    let exact = simulate_dtof(&plane, &gray, &DToFConfig::noiseless(), 0).unwrap();
    let count = exact.samples.len();
    let max_err = exact.samples.iter().map(|s| (s.depth - 3.25).abs()).fold(0.0, f64::max);

    let data = DataConfig { clip_frames: 5, train_clips: 10, eval_clips: 0, seed: 5, ..DataConfig::default() };
    let clips = generate_corpus(&data, &DToFConfig::default(), Split::Train).unwrap();
    let (mut sum, mut n, mut frames) = (0.0, 0usize, 0usize);
    for clip in &clips {
        for (f, s) in clip.frames.iter().zip(&clip.sparse) {
            let (r, k) = sample_rel(s, &f.depth).unwrap();
            sum += r * k as f64;
            n += k;
            frames += 1;
        }
    }
    let rel = sum / n as f64;
    let elapsed = start.elapsed();
    outcome(
        count == 1200 && max_err == 0.0 && (rel - 0.06).abs() <= 0.01 && elapsed < Duration::from_secs(60),
        format!("noiseless {count} samples, max error {max_err}; calibrated REL {rel:.4} over {frames} frames; {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------------------
// 6-8. training experiments

/// Model, schedule and corpus sizes used by the training criteria.
fn experiment_model() -> ModelConfig {
    ModelConfig::default()
}

fn experiment_train(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig { steps, seed, lr_max: 3e-3, ..TrainConfig::default() }
}

const STEPS: usize = 2000;
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Full,
    NoCross,
    Small,
    Large,
}

struct Run {
    first: f64,
    last: f64,
    report: EvalReport,
    elapsed: Duration,
}

struct Lab {
    train: Vec<Clip>,
    eval: Vec<Clip>,
    runs: BTreeMap<(Variant, u64), Run>,
}

impl Lab {
    fn new() -> Self {
        let data = DataConfig::default();
        let train = generate_corpus(&data, &DToFConfig::default(), Split::Train).unwrap();
        let eval = generate_corpus(&data, &DToFConfig::default(), Split::Eval).unwrap();
        Self { train, eval, runs: BTreeMap::new() }
    }

    fn run(&mut self, variant: Variant, seed: u64) -> &Run {
        if !self.runs.contains_key(&(variant, seed)) {
            let start = Instant::now();
            let mut model = experiment_model();
            let mut train = experiment_train(seed, STEPS);
            match variant {
                Variant::Full => {}
                Variant::NoCross => train.use_cross_loss = false,
                Variant::Small => model.fusion = FusionMode::Small,
                Variant::Large => model.fusion = FusionMode::Large,
            }
            let out = run_training(&train, &model, &LossWeights::default(), &self.train, None, None).unwrap();
            let n = out.curve.len();
            let mean = |s: &[svdc::train::StepStats]| s.iter().map(|c| c.loss.total).sum::<f64>() / s.len() as f64;
            let report = run_eval(&out.params, &model, &self.eval, LossWeights::default().beta_mask).unwrap();
            let run = Run {
                first: mean(&out.curve[..10]),
                last: mean(&out.curve[n - 100..]),
                report,
                elapsed: start.elapsed(),
            };
            eprintln!(
                "  [{variant:?} seed {seed}] loss {:.3} -> {:.3}, rmse {:.4}, cross tepe {:.1} opw {:.4}, intra tepe {:.1} opw {:.4} ({:.0?})",
                run.first,
                run.last,
                run.report.model.rmse,
                run.report.model.split.cross_tepe,
                run.report.model.split.cross_opw,
                run.report.model.split.intra_tepe,
                run.report.model.split.intra_opw,
                run.elapsed
            );
            self.runs.insert((variant, seed), run);
        }
        &self.runs[&(variant, seed)]
    }
}

fn criterion_6(lab: &mut Lab) -> Outcome {
    let frames = (lab.train.iter().map(|c| c.frames.len()).sum::<usize>(), lab.eval.iter().map(|c| c.frames.len()).sum::<usize>());
    let r = lab.run(Variant::Full, SEEDS[0]);
    let drop = 1.0 - r.last / r.first;
    let base = r.report.baseline.as_ref().unwrap().rmse;
    let gain = 1.0 - r.report.model.rmse / base;
    outcome(
        drop >= 0.6 && gain >= 0.2 && frames == (200, 60),
        format!(
            "{STEPS} steps on {} frames: loss {:.3} -> {:.3} (-{:.0}%); held-out RMSE {:.4} vs baseline {:.4} (-{:.1}%) on {} frames; {:.0?}",
            frames.0,
            r.first,
            r.last,
            100.0 * drop,
            r.report.model.rmse,
            base,
            100.0 * gain,
            frames.1,
            r.elapsed
        ),
    )
}

fn criterion_7(lab: &mut Lab) -> Outcome {
    let mut failures = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let with = lab.run(Variant::Full, seed).report.model.split;
        let without = lab.run(Variant::NoCross, seed).report.model.split;
        let ok = with.cross_tepe < without.cross_tepe
            && with.cross_opw < without.cross_opw
            && with.intra_tepe <= 1.1 * without.intra_tepe
            && with.intra_opw <= 1.1 * without.intra_opw;
        failures += usize::from(!ok);
        lines.push(format!(
            "seed {seed}: cross TEPE {:.1}/{:.1} OPW {:.4}/{:.4}, intra TEPE {:.1}/{:.1} OPW {:.4}/{:.4} {}",
            with.cross_tepe,
            without.cross_tepe,
            with.cross_opw,
            without.cross_opw,
            with.intra_tepe,
            without.intra_tepe,
            with.intra_opw,
            without.intra_opw,
            if ok { "ok" } else { "regressed" }
        ));
    }
    outcome(failures < 2, format!("with/without cross loss; {}", lines.join("; ")))
}

fn criterion_8(lab: &mut Lab) -> Outcome {
    let mean = |lab: &mut Lab, v: Variant| SEEDS.iter().map(|&s| lab.run(v, s).report.model.rmse).sum::<f64>() / SEEDS.len() as f64;
    let full = mean(lab, Variant::Full);
    let small = mean(lab, Variant::Small);
    let large = mean(lab, Variant::Large);
    outcome(
        full <= small && full <= large,
        format!("seed-mean held-out RMSE adaptive {full:.4}, small-only {small:.4}, large-only {large:.4}"),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism

fn criterion_9() -> Outcome {
    let data = DataConfig { clip_frames: 6, train_clips: 2, eval_clips: 1, ..DataConfig::default() };
    let corpus = generate_corpus(&data, &DToFConfig::default(), Split::Train).unwrap();
    let eval = generate_corpus(&data, &DToFConfig::default(), Split::Eval).unwrap();
    let model = ModelConfig { base_channels: 8, ..ModelConfig::default() };
    let train = TrainConfig { seed: 9, ..experiment_train(9, 15) };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    let mut ckpts = Vec::new();
    for d in &dirs {
        let out = run_training(&train, &model, &LossWeights::default(), &corpus, Some(d.path()), None).unwrap();
        curves.push(std::fs::read(d.path().join("loss_curve.csv")).unwrap());
        let r = run_eval(&out.params, &model, &eval, 50.0).unwrap();
        reports.push(r.to_key_values() + &r.to_csv());
        let path = out.checkpoint.unwrap();
        let loaded = ModelParams::load(&path, &model).unwrap();
        let bits_equal = loaded
            .iter()
            .zip(out.params.iter())
            .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let resaved = d.path().join("again.ckpt");
        loaded.save(&resaved).unwrap();
        ckpts.push(bits_equal && std::fs::read(&path).unwrap() == std::fs::read(&resaved).unwrap());
    }
    let same_curve = curves[0] == curves[1];
    let same_report = reports[0] == reports[1];
    let round_trip = ckpts.iter().all(|&b| b);
    outcome(
        same_curve && same_report && round_trip,
        format!("loss curves identical {same_curve}, eval reports identical {same_report}, checkpoint round-trip exact {round_trip}"),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("SVDC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| selected.as_ref().is_none_or(|s| s.contains(&k));
    let names = [
        "gradient integrity",
        "adaptive fusion semantics",
        "loss fixtures",
        "metric oracle equivalence",
        "dToF simulator fidelity",
        "learning smoke test",
        "cross-window loss trend",
        "adaptive vs fixed kernels",
        "determinism",
    ];
    let mut lab: Option<Lab> = None;
    let mut failed = 0;
    for k in 1..=9 {
        if !wanted(k) {
            continue;
        }
        let start = Instant::now();
        let o = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(lab.get_or_insert_with(Lab::new)),
            7 => criterion_7(lab.get_or_insert_with(Lab::new)),
            8 => criterion_8(lab.get_or_insert_with(Lab::new)),
            _ => criterion_9(),
        };
        failed += usize::from(!o.pass);
        println!(
            "criterion {k} ({}): {} - {} [{:.1?}]",
            names[k - 1],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    }
}
