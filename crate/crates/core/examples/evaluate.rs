//! Trains briefly, then runs stitched sliding-window evaluation on held-out
//! clips and compares against nearest-sample inpainting of the sensor map.
//!
//! cargo run --release --example evaluate -- [steps]

use svdc::losses::LossWeights;
use svdc::net::ModelConfig;
use svdc::scene::DToFConfig;
use svdc::train::{generate_corpus, run_eval, run_training, DataConfig, Split, TrainConfig};

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let data = DataConfig { train_clips: 8, eval_clips: 2, clip_frames: 9, ..DataConfig::default() };
    let train_set = generate_corpus(&data, &DToFConfig::default(), Split::Train)?;
    let eval_set = generate_corpus(&data, &DToFConfig::default(), Split::Eval)?;
    let model = ModelConfig::default();
    let weights = LossWeights::default();
    let train = TrainConfig { steps, lr_max: 3e-3, ..TrainConfig::default() };
    let outcome = run_training(&train, &model, &weights, &train_set, None, None)?;

    let report = run_eval(&outcome.params, &model, &eval_set, weights.beta_mask)?;
    let m = report.model;
    println!("{:<10} {:>8} {:>8} {:>8} {:>10} {:>8}", "", "RMSE", "REL", "delta1", "TEPE mm", "OPW");
    println!("{:<10} {:>8.4} {:>8.4} {:>8.4} {:>10.1} {:>8.4}", "model", m.rmse, m.rel, m.delta1, m.tepe, m.opw);
    if let Some(b) = report.baseline {
        println!("{:<10} {:>8.4} {:>8.4} {:>8.4} {:>10.1} {:>8.4}", "baseline", b.rmse, b.rel, b.delta1, b.tepe, b.opw);
    }
    let s = m.split;
    println!(
        "window split: intra TEPE {:.1} mm / OPW {:.4} over {} pairs, cross TEPE {:.1} mm / OPW {:.4} over {} pairs",
        s.intra_tepe, s.intra_opw, s.intra_pairs, s.cross_tepe, s.cross_opw, s.cross_pairs
    );
    Ok(())
}
