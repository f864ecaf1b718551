//! Leave-one-out on the synthetic benchmark.
//!
//! Usage: `cargo run --release -p mitodet --example loo_benchmark -- [BATCHES] [FOLDS]`

use std::time::Instant;

use mitodet::benchmark::{benchmark_datasets, benchmark_train_config};
use mitodet::eval::EvalConfig;
use mitodet::loo::leave_one_out_with;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let batches: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let folds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let mut data = benchmark_datasets()?;
    data.truncate(folds.max(2));
    let cfg = benchmark_train_config(batches);
    let start = Instant::now();
    let res = leave_one_out_with(&data, &cfg, &EvalConfig::default(), |i, r| {
        eprintln!(
            "fold {i} done at {:.0?}: {:?} events {:?}",
            start.elapsed(),
            r.slices,
            r.events
        );
    })?;
    println!("{}", res.report.to_table());
    eprintln!("total {:.0?}", start.elapsed());
    Ok(())
}
