//! Short training run on a small synthetic corpus, printing the loss
//! components as they fall and saving the checkpoint and loss curve.
//!
//! cargo run --release --example train_small -- [steps] [out_dir]

use std::path::PathBuf;

use svdc::losses::LossWeights;
use svdc::net::ModelConfig;
use svdc::scene::DToFConfig;
use svdc::train::{generate_corpus, run_training, DataConfig, Split, StepStats, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("svdc_train"));

    let data = DataConfig { train_clips: 6, ..DataConfig::default() };
    let corpus = generate_corpus(&data, &DToFConfig::default(), Split::Train)?;
    let train = TrainConfig { steps, lr_max: 3e-3, ..TrainConfig::default() };
    let model = ModelConfig::default();

    let every = (steps / 10).max(1);
    let mut log = |i: usize, s: &StepStats| {
        if i % every == 0 || i + 1 == steps {
            let l = s.loss;
            println!(
                "step {i:>5} lr {:.1e}  total {:.3}  si {:.3}  coarse {:.3}  cross {:.3}  opw {:.3}",
                s.lr, l.total, l.si_final, l.si_coarse, l.cross, l.opw
            );
        }
    };
    let outcome = run_training(&train, &model, &LossWeights::default(), &corpus, Some(&out), Some(&mut log))?;
    println!("checkpoint and loss_curve.csv in {}", outcome.checkpoint.as_deref().and_then(|p| p.parent()).unwrap_or(&out).display());
    Ok(())
}
