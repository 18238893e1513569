//! Train the toy policy on the default synthetic task and print the
//! validation log.
//!
//! Run: `cargo run --release -p ehi --example train_toy -- [seed]`

use std::time::Instant;

use ehi::trainer::{train, SyntheticTask, TrainConfig};
use ehi::Gazetteer;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let task = SyntheticTask { seed, ..SyntheticTask::default() };
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(&task, &config, Gazetteer::builtin()).expect("training diverged");
    for entry in &out.log {
        println!(
            "update {:>5}  val_ehi {:.4}  val_f1 {:.4}  reward {}",
            entry.update,
            entry.mean_val_ehi,
            entry.mean_val_f1,
            entry.mean_reward_raw.map_or("-".to_string(), |r| format!("{r:.4}"))
        );
    }
    println!(
        "best val_ehi {:.4} at update {} ({:.1?})",
        out.best_val_ehi,
        out.best_update,
        start.elapsed()
    );
}
