//! Upload noise strength against final accuracy, through the same sweep
//! machinery as `mrff sweep --axis noise`.
//!
//! cargo run --release --example noise_sweep -- [rounds]

use mrff::cli::{run_sweep, sweep_table, ExperimentConfig, SweepAxis};

fn main() -> mrff::Result<()> {
    let rounds: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let cfg = ExperimentConfig::from_toml(&format!(
        "seed = 0
[model]
d_model = 8
max_seq_len = 8
ffn_hidden = 16

[federation]
rounds = {rounds}
lr = 0.5
batch_size = 8
local_epochs = 2
eval_every = {rounds}

[data.synthetic]
n_users = 60
"
    ))?;
    let out = std::env::temp_dir().join("mrff-noise-sweep");
    let values: Vec<String> = ["0", "0.1", "0.2", "0.3", "0.4", "0.5"].map(String::from).to_vec();
    let cells = run_sweep(&cfg, SweepAxis::Noise, &values, &out)?;
    print!("{}", sweep_table(SweepAxis::Noise, &cells));
    println!("cells written under {}", out.display());
    Ok(())
}
