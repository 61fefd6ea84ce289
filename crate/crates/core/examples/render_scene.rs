//! Renders one synthetic RGB-D clip with ground-truth flow and writes it to
//! disk in the corpus layout used by `svdc eval --data`.
//!
//! cargo run --release --example render_scene -- [out_dir]

use std::path::PathBuf;

use svdc::io::dump_clip;
use svdc::scene::DToFConfig;
use svdc::train::{generate_clip, DataConfig, Split};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("svdc_clip"));
    let data = DataConfig { clip_frames: 6, ..DataConfig::default() };
    let clip = generate_clip(&data, &DToFConfig::default(), Split::Train, 0)?;

    for (i, f) in clip.frames.iter().enumerate() {
        let valid: Vec<f64> = f.depth.depth().iter().zip(f.depth.valid()).filter(|(_, v)| **v).map(|(d, _)| *d).collect();
        let (lo, hi) = valid.iter().fold((f64::MAX, f64::MIN), |(a, b), d| (a.min(*d), b.max(*d)));
        let occluded = f.flow_bwd.occluded().iter().filter(|o| **o).count();
        let motion = f.flow_bwd.du().iter().zip(f.flow_bwd.dv()).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max);
        println!(
            "frame {i}: depth {lo:.2}..{hi:.2} m, max motion {motion:.2} px, {occluded} occluded px, {} sensor samples",
            clip.sparse[i].samples.len()
        );
    }
    dump_clip(&out, &clip)?;
    println!("wrote {}", out.display());
    Ok(())
}
