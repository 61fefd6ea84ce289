//! Finite-difference check of every parameter gradient of a small model
//! trained end to end on two overlapping windows.
//!
//! cargo run --release --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svdc::flow::FlowField;
use svdc::losses::{total_loss, FrameTargets, LossSwitches, LossWeights};
use svdc::net::{forward_encoded, param_gradient_error, FrameInput, ModelConfig, ModelParams};
use svdc::scene::DepthFrame;
use svdc::Tensor;

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig { base_channels: 2, guide_channels: 2, num_bins: 3, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, 0)?;
    params.jitter(0.2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (8, 12);
    let frames: Vec<_> = (0..4)
        .map(|_| {
            let rgb = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
            let sparse = Tensor::from_fn(&[1, h, w], |i| if i % 3 == 0 { rng.random_range(1.0..6.0) } else { 0.0 });
            let depth = DepthFrame::from_dense(h, w, (0..h * w).map(|_| rng.random_range(1.0..6.0)).collect()).unwrap();
            let mut fwd = FlowField::uniform(h, w, 0.3, -0.2);
            fwd.set_occluded(vec![false; h * w]).unwrap();
            (rgb, sparse, depth, fwd, FlowField::uniform(h, w, -0.3, 0.2))
        })
        .collect();
    let weights = LossWeights::default();

    println!("{} parameter tensors, {} scalars", params.len(), params.num_scalars());
    let (err, name) = param_gradient_error(&params, 1e-5, Some(16), &|g, b| {
        let mut enc = Vec::new();
        let (mut ff, mut fb) = (Vec::new(), Vec::new());
        for f in &frames {
            let (e, a, c) = FrameInput { guidance: &f.0, sparse: &f.1, flow_fwd: &f.3, flow_bwd: &f.4 }.prepare(g, b, &cfg)?;
            enc.push(e);
            ff.push(a);
            fb.push(c);
        }
        let wj = forward_encoded(g, b, &cfg, &enc[..3], &ff[..3], &fb[..3])?;
        let wj1 = forward_encoded(g, b, &cfg, &enc[1..], &ff[1..], &fb[1..])?;
        let targets: Vec<_> = frames.iter().map(|f| FrameTargets { depth: &f.2, guidance: &f.0, flow_bwd: &f.4 }).collect();
        Ok(total_loss(g, &wj, &wj1, &targets, &weights, LossSwitches::default())?.0)
    })?;
    println!("worst relative error {err:.2e} in {name}");
    Ok(())
}
