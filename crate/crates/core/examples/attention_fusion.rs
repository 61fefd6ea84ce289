//! Channel-spatial enhancement attention feeding the adaptive fusion of a
//! 1x1 and a 3x3 kernel path: the attention map decides per pixel how much
//! of each path is used.
//!
//! cargo run --release --example attention_fusion

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svdc::net::{afsf, csea, FusionMode, ModelConfig, ModelParams};
use svdc::{Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig { base_channels: 8, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, 0)?;
    params.jitter(0.3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feat = Tensor::from_fn(&[8, 6, 8], |_| rng.random_range(-1.0..1.0));
    let neighbour = Tensor::from_fn(&[8, 6, 8], |_| rng.random_range(-1.0..1.0));

    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let f = g.constant(feat);
    let n = g.constant(neighbour);
    let (enhanced, a) = csea(&mut g, &b, "bwd", f, true)?;
    let cat = g.concat(&[enhanced, n], 0)?;
    let fused = afsf(&mut g, &b, "bwd", cat, a, FusionMode::Adaptive)?;
    let small = afsf(&mut g, &b, "bwd", cat, a, FusionMode::Small)?;
    let large = afsf(&mut g, &b, "bwd", cat, a, FusionMode::Large)?;

    let am = g.value(a).data();
    let mean = am.iter().sum::<f64>() / am.len() as f64;
    let (lo, hi) = am.iter().fold((1.0f64, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    println!("attention map: mean {mean:.3}, range {lo:.3}..{hi:.3}");

    // pixel with the strongest attention leans towards the small-kernel path
    let p = am.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map(|(i, _)| i).unwrap_or(0);
    let (fv, sv, lv) = (g.value(fused).data()[p], g.value(small).data()[p], g.value(large).data()[p]);
    println!("pixel {p}: A = {:.3}, fused {fv:.4} = {:.3} * small {sv:.4} + {:.3} * large {lv:.4}", am[p], am[p], 1.0 - am[p]);
    Ok(())
}
