//! Per-block group shares over rounds on data with planted clusters, with
//! and without the balance loss. Uses the routing setup of the acceptance
//! suite: Adam at a small learning rate, one local epoch.
//!
//! cargo run --release --example routing_dynamics -- [rounds] [seed]

use mrff::data::{prepare, synthetic_generate, SyntheticSpec};
use mrff::federated::{Federation, FederationConfig, Optimizer};
use mrff::model::ModelConfig;

fn main() -> mrff::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let rounds = args.first().copied().unwrap_or(100) as usize;
    let seed = args.get(1).copied().unwrap_or(0);

    let spec = SyntheticSpec { seed, ..Default::default() };
    let synth = synthetic_generate(&spec)?;
    let model = ModelConfig::compact(spec.n_items(), spec.n_users);
    for alpha in [0.1, 0.0] {
        let (catalog, seqs) = prepare(&synth.log, model.max_seq_len)?;
        let hyper = FederationConfig {
            rounds,
            alpha,
            seed,
            optimizer: Optimizer::Adam,
            lr: 0.003,
            eval_every: rounds.max(1),
            ..Default::default()
        };
        let mut fed = Federation::new(model.clone(), hyper, catalog, seqs)?;
        println!("alpha = {alpha}");
        while fed.server.round < rounds {
            let r = fed.step()?;
            if r.round % 10 == 0 || r.round == 1 {
                let shares: Vec<String> = r
                    .group_shares
                    .iter()
                    .map(|b| b.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" "))
                    .collect();
                println!("  round {:>3}  balance {:.3}  [{}]", r.round, r.balance_loss, shares.join(" | "));
            }
        }
        println!("  max share {:.3}", fed.server.f.max_share());
    }
    Ok(())
}
