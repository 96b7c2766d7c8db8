//! Trains one variant on the reduced-scale setup and prints progress.
//!
//! `cargo run --release --example toy_run -- <variant> <steps> <run_dir> [seed]`
use std::path::PathBuf;
use std::time::Instant;

use vtssi::checkpoint::Checkpoint;
use vtssi::data::Dataset;
use vtssi::toy;
use vtssi::train::train;

fn main() -> vtssi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map_or("vtssi", |s| s.as_str()).parse()?;
    let steps: u64 = args.get(2).map_or(2_000, |s| s.parse().unwrap());
    let dir = PathBuf::from(args.get(3).map_or("/tmp/toy_run", |s| s.as_str()));
    let seed: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());
    let data = Dataset::generate(&toy::data_config(seed), toy::TRAIN_SEQUENCES)?;
    let resume = dir.join("last.ckpt");
    let resume = resume.exists().then(|| Checkpoint::load(&resume)).transpose()?;
    let t0 = Instant::now();
    train(
        &data,
        &toy::model_config(variant),
        &toy::train_config(variant, steps, seed),
        &dir,
        resume.as_ref(),
        |r| {
            if r.step % 100 == 0 {
                println!(
                    "{:>6} {:>7.0}s len {:>2} elbo {:>9.1} recon {:>9.1} cnt {:.2} size {:.1} desc {:.1} pos {:.1} mot {:.1} |g| {:.1}",
                    r.step,
                    t0.elapsed().as_secs_f64(),
                    r.curriculum_len,
                    r.elbo,
                    r.recon,
                    r.kl_cnt,
                    r.kl_size,
                    r.kl_desc,
                    r.kl_position,
                    r.kl_motion,
                    r.grad_norm
                );
            }
        },
    )?;
    Ok(())
}
