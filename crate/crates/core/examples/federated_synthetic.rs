//! Full federation on the planted-cluster data: the group-gated model next
//! to the same model without group FFNs.
//!
//! cargo run --release --example federated_synthetic -- [rounds] [seed]

use mrff::data::{prepare, synthetic_generate, SyntheticSpec};
use mrff::federated::{Federation, FederationConfig};
use mrff::model::ModelConfig;

fn main() -> mrff::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let rounds = args.first().copied().unwrap_or(60) as usize;
    let seed = args.get(1).copied().unwrap_or(0);

    let spec = SyntheticSpec { seed, ..Default::default() };
    let log = synthetic_generate(&spec)?.log;
    let clicks = log.records.iter().filter(|r| r.label == 1).count();
    println!("{} users, {} items, {} impressions, ctr {:.3}", log.n_users(), log.n_items(), log.len(), clicks as f64 / log.len() as f64);

    for group_ffn in [true, false] {
        let model = ModelConfig { group_ffn, ..ModelConfig::compact(spec.n_items(), spec.n_users) };
        let (catalog, seqs) = prepare(&log, model.max_seq_len)?;
        let hyper = FederationConfig {
            rounds,
            seed,
            lr: 0.5,
            local_epochs: 2,
            batch_size: 8,
            eval_every: 20,
            ..Default::default()
        };
        let mut fed = Federation::new(model, hyper, catalog, seqs)?;
        println!("group ffn: {group_ffn}");
        for r in fed.run()?.iter().filter(|r| r.test.is_some()) {
            let t = r.test.as_ref().unwrap();
            println!(
                "  round {:>3}  train loss {:>6}  test auc {}  logloss {}",
                r.round,
                r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                t.auc.map_or("-".into(), |a| format!("{a:.4}")),
                t.logloss.map_or("-".into(), |a| format!("{a:.4}")),
            );
        }
    }
    Ok(())
}
