//! Evaluates a checkpoint on the held-out reduced-scale sequences.
//!
//! `cargo run --release --example toy_eval -- <checkpoint> [report.json]`
use std::path::Path;

use vtssi::checkpoint::Checkpoint;
use vtssi::eval::evaluate;
use vtssi::toy;

fn main() -> vtssi::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ck = Checkpoint::load(Path::new(&args[1]))?;
    let model = ck.restore()?;
    let report = evaluate(&model, &toy::test_data()?, ck.global_step, &toy::eval_options())?;
    println!(
        "{} step {}: count acc {:.3}, median inference {:?}, median prediction {:?}",
        report.variant, report.checkpoint_step, report.count_accuracy, report.median_inference_error, report.median_prediction_error
    );
    println!("inference curve {:?}", report.inference_error_curve);
    let wrong: Vec<(usize, Vec<usize>)> = report
        .per_sequence
        .iter()
        .filter(|r| !r.count_correct)
        .take(10)
        .map(|r| (r.true_count, r.counts.clone()))
        .collect();
    println!("count errors (truth, predicted): {wrong:?}");
    if let Some(out) = args.get(2) {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}
