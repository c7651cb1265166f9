//! Generates the default synthetic workload, replays it through both cache
//! systems, and prints the stage-level reports.
//!
//! Run: `cargo run --release -p sirc --example replay`

use sirc::prelude::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ExperimentConfig::default().resolve_seeds();
    let workload = generate(&config.workload)?;
    println!(
        "workload: {} prompts ({} seed / {} challenge), {} families, {} near misses",
        workload.prompts.len(),
        config.workload.n_seed_prompts,
        config.workload.n_challenge_prompts,
        config.workload.n_intent_families,
        workload.prompts.iter().filter(|p| p.is_near_miss).count(),
    );

    let outcome = run_experiment(&workload.prompts, &workload.schema, &config, true)?;
    println!();
    print!("{}", outcome.pipeline_report.render_human());
    println!();
    print!("{}", outcome.monolithic_report.render_human());

    println!();
    println!(
        "tokens per prompt: pipeline {:.1} vs monolithic {:.1}",
        outcome.pipeline_report.tokens_per_prompt(),
        outcome.monolithic_report.tokens_per_prompt(),
    );
    Ok(())
}
