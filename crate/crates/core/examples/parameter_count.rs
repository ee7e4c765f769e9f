//! Parameter budget by partition for a few model sizes.
//!
//! cargo run --example parameter_count

use mrff::model::{count_params, ModelConfig};

fn main() -> mrff::Result<()> {
    let configs = [
        ("reference", ModelConfig::kuairand_like()),
        ("compact", ModelConfig::compact(40, 200)),
        ("compact, no group ffn", ModelConfig { group_ffn: false, ..ModelConfig::compact(40, 200) }),
        ("reference, 8 groups", ModelConfig { n_groups: 8, ..ModelConfig::kuairand_like() }),
    ];
    println!("{:<24} {:>8} {:>8} {:>8} {:>8}", "config", "private", "global", "group", "total");
    for (name, cfg) in configs {
        let c = count_params(&cfg)?;
        println!("{name:<24} {:>8} {:>8} {:>8} {:>8}", c.private, c.global, c.group, c.total);
    }
    Ok(())
}
