//! Stops a federation halfway, saves it, resumes from disk and checks the
//! result against an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use mrff::data::{prepare, synthetic_generate, SyntheticSpec};
use mrff::federated::{Federation, FederationConfig, Optimizer};
use mrff::model::ModelConfig;

fn main() -> mrff::Result<()> {
    let spec = SyntheticSpec { n_users: 30, ..Default::default() };
    let log = synthetic_generate(&spec)?.log;
    let model = ModelConfig::compact(spec.n_items(), spec.n_users);
    let (catalog, seqs) = prepare(&log, model.max_seq_len)?;
    let hyper = FederationConfig {
        rounds: 8,
        optimizer: Optimizer::Adam,
        lr: 0.01,
        noise: Some(0.01),
        eval_every: 4,
        ..Default::default()
    };

    let mut whole = Federation::new(model.clone(), hyper.clone(), catalog.clone(), seqs.clone())?;
    whole.run()?;

    let path = std::env::temp_dir().join("mrff-checkpoint.json");
    let mut half = Federation::new(model, hyper, catalog.clone(), seqs.clone())?;
    for _ in 0..4 {
        half.step()?;
    }
    half.save_checkpoint(&path)?;
    println!("saved round {} to {} ({} bytes)", half.server.round, path.display(), std::fs::metadata(&path)?.len());

    let mut resumed = Federation::resume(&path, catalog, seqs)?;
    resumed.run()?;
    let same = resumed.server.params == whole.server.params
        && resumed.clients.iter().zip(&whole.clients).all(|(a, b)| a.private == b.private);
    println!("resumed run identical to uninterrupted run: {same}");
    Ok(())
}
