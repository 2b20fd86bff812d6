//! Trains the COR Network and the same model with the co-occurrence loss
//! disabled on the default synthetic benchmark, over several seeds.
//!
//! cargo run --release --example benchmark -- [seeds] [epochs] [first_seed] [noise] [baseline]
//!
//! Passing `baseline` as the last argument trains only the disabled variant.

use std::time::Instant;

use cornet_cli::config::RunConfig;
use cornet_cli::train::train;
use cornet_core::synth::{generate_dataset, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(5), |s| s.parse())?;
    let epochs: usize = args.next().map_or(Ok(30), |s| s.parse())?;
    let first: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let noise: f64 = args.next().map_or(Ok(SynthSpec::default().noise_sigma), |s| s.parse())?;
    let balances: &[f64] = if args.next().as_deref() == Some("baseline") { &[0.0] } else { &[0.001, 0.0] };
    let start = Instant::now();
    let (mut with, mut without) = (0.0, 0.0);
    for seed in first..first + seeds {
        let corpus = generate_dataset(&SynthSpec {
            seed,
            noise_sigma: noise,
            ..SynthSpec::default()
        })?;
        let mut maps = [f64::NAN; 2];
        for (&balance, slot) in balances.iter().zip(2 - balances.len()..) {
            let config = RunConfig {
                epochs,
                balance_factor: balance,
                ..RunConfig::benchmark("<memory>", seed)
            };
            let outcome = train(&config, &corpus, |_, _, _| Ok(()))?;
            let last = outcome.records.last().expect("at least one epoch");
            maps[slot] = last.val_map.unwrap_or(f64::NAN);
            println!(
                "seed {seed} a={balance}: first total {:.4} last total {:.4} val_map {:.4}",
                outcome.records[0].total, last.total, maps[slot]
            );
        }
        with += maps[0];
        without += maps[1];
    }
    println!(
        "mean val_map: COR {:.4}  a=0 {:.4}  ({:.1} s)",
        with / seeds as f64,
        without / seeds as f64,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
