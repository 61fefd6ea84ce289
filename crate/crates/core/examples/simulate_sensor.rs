//! Simulates the 30x40 dToF sensor on a rendered frame, with and without
//! the calibrated imperfections, and reports sample count and accuracy.
//!
//! cargo run --release --example simulate_sensor

use svdc::scene::{generate_scene, nearest_fill, rasterize_sparse, sample_rel, simulate_dtof, DToFConfig, LayoutParams, SceneConfig};

fn main() -> anyhow::Result<()> {
    let scene = SceneConfig::random(3, 48, 64, 3, 90.0, LayoutParams::default());
    let frames = generate_scene(&scene)?;
    let frame = &frames[0];

    for (name, cfg) in [("noiseless", DToFConfig::noiseless()), ("calibrated", DToFConfig::default())] {
        let sparse = simulate_dtof(&frame.depth, &frame.guidance, &cfg, 0)?;
        let (rel, n) = sample_rel(&sparse, &frame.depth).unwrap_or((f64::NAN, 0));
        let map = rasterize_sparse(&sparse, (48, 64));
        let covered = map.data().iter().filter(|v| **v > 0.0).count();
        println!("{name:>10}: {} samples, REL {rel:.4} over {n}, {covered} of 3072 pixels measured", sparse.samples.len());
    }

    // the sensor only covers the central part of the 90 degree image
    let sparse = simulate_dtof(&frame.depth, &frame.guidance, &DToFConfig::default(), 0)?;
    let filled = nearest_fill(&rasterize_sparse(&sparse, (48, 64)))?;
    let mut err = 0.0;
    let mut n = 0;
    for (p, (gt, v)) in frame.depth.depth().iter().zip(frame.depth.valid()).enumerate() {
        if *v {
            err += (filled.data()[p] - gt).powi(2);
            n += 1;
        }
    }
    println!("nearest-sample fill RMSE {:.3} m", (err / n as f64).sqrt());
    Ok(())
}
