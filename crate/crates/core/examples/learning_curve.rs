//! Per-epoch train and test accuracy for one variant on the desk-scale
//! synthetic task.
//!
//! ```text
//! cargo run --release --example learning_curve -- [variant] [seed] [epochs]
//! ```

use std::time::Instant;

use wglin::config::RunConfig;
use wglin::model::{Adam, Variant, Wglin};
use wglin::run::{load_datasets, predict_dataset, train_model, Control, RunError};

fn main() -> Result<(), RunError> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("full").parse()?;
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let cfg = RunConfig { variant, seed, epochs, ..RunConfig::default() };
    let (train, test, _) = load_datasets(&cfg)?;
    let mut model = Wglin::new(cfg.model.clone(), variant, seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let t0 = Instant::now();
    println!("variant,seed,epoch,loss,train_acc,test_acc,seconds");
    train_model(&mut model, &mut adam, &train, &cfg, 1, |r, m, _| {
        let test_acc = predict_dataset(m, &test, cfg.batch_size, 1)?.accuracy();
        println!(
            "{variant},{seed},{},{:.4},{:.4},{:.4},{:.0}",
            r.epoch,
            r.loss,
            r.train_acc,
            test_acc,
            t0.elapsed().as_secs_f64()
        );
        Ok(Control::Continue)
    })?;
    Ok(())
}
