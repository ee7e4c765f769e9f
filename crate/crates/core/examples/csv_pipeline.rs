//! From a delimited log on disk to a trained federation: load with a column
//! mapping, split, write the split manifest, build sequences, train.
//!
//! cargo run --release --example csv_pipeline

use std::fmt::Write as _;

use mrff::data::{build_sequences, leave_one_out_split, load_interactions, synthetic_generate, Schema, SyntheticSpec};
use mrff::federated::{Federation, FederationConfig};
use mrff::model::ModelConfig;

fn main() -> mrff::Result<()> {
    let dir = std::env::temp_dir().join("mrff-csv-pipeline");
    std::fs::create_dir_all(&dir)?;

    // a tab-separated log with string ids and a category column
    let synth = synthetic_generate(&SyntheticSpec { n_users: 40, ..Default::default() })?;
    let mut text = String::from("uid\tvideo\tts\tclicked\tcategory\n");
    for r in &synth.log.records {
        let cat = synth.item_cluster[r.item as usize];
        writeln!(text, "user-{}\tv{:03}\t{}\t{}\tc{cat}", r.user, r.item, 1000 + r.time, r.label).unwrap();
    }
    let path = dir.join("log.tsv");
    std::fs::write(&path, text)?;

    let schema = Schema {
        user: "uid".into(),
        item: "video".into(),
        time: "ts".into(),
        label: "clicked".into(),
        attrs: vec!["category".into()],
        delimiter: None,
    };
    let log = load_interactions(&path, &schema)?;
    println!("loaded {} impressions, {} users, {} items", log.len(), log.n_users(), log.n_items());

    let split = leave_one_out_split(&log);
    split.write_manifest(&log, &dir.join("split.json"))?;
    log.save_id_maps(&dir.join("ids.json"))?;
    let cold = split.users.iter().filter(|u| u.train_only).count();
    println!("{cold} users with fewer than three clicks kept for training only");

    let catalog = log.catalog()?;
    let model = ModelConfig {
        d_model: 4,
        max_seq_len: 8,
        ffn_hidden: 16,
        attr_vocab: catalog.vocab().to_vec(),
        n_users: log.n_users(),
        ..Default::default()
    };
    let seqs = build_sequences(&log, &split, model.max_seq_len);
    let hyper = FederationConfig { rounds: 10, lr: 0.5, batch_size: 8, eval_every: 5, ..Default::default() };
    let mut fed = Federation::new(model, hyper, catalog, seqs)?;
    for r in fed.run()?.iter().filter(|r| r.test.is_some()) {
        println!("round {:>2}  test auc {:?}", r.round, r.test.as_ref().and_then(|m| m.auc));
    }
    println!("manifest and id maps in {}", dir.display());
    Ok(())
}
