use mrff::cli::verify::tiny_setup;
use mrff::federated::{
    client_rng, local_train, Federation, FederationConfig, Optimizer, OptimizerState, RoundReport,
};
use mrff::loss::GroupProportions;
use mrff::model::{ModelConfig, Partition};

fn hyper(rounds: usize) -> FederationConfig {
    FederationConfig {
        rounds,
        lr: 0.1,
        batch_size: 4,
        seed: 17,
        ..Default::default()
    }
}

fn no_time(reports: &[RoundReport]) -> Vec<RoundReport> {
    reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_seconds = 0.0;
            r
        })
        .collect()
}

#[test]
fn four_groups_single_round_matches_local_training() {
    let (model, catalog, data) = tiny_setup(1, 4).unwrap();
    let h = FederationConfig {
        local_epochs: 3,
        ..hyper(1)
    };
    let mut fed = Federation::new(model.clone(), h.clone(), catalog.clone(), data).unwrap();
    let client = fed.clients[0].clone();
    let mut params = client.model(&fed.server.params).unwrap();
    let mut opt = OptimizerState::new(h.optimizer);
    let f = GroupProportions::uniform(model.n_blocks, model.n_groups);
    let stats = local_train(
        &model,
        &catalog,
        &h,
        &f,
        &mut params,
        &client.train,
        &mut opt,
        &mut client_rng(h.seed, 1, client.user),
    )
    .unwrap();
    let out = fed.step_detailed().unwrap();
    assert_eq!(out.payloads[0].assignments, stats.assignments);
    for p in params.iter() {
        let keep = match p.partition {
            Partition::Group { block, group } => stats.assignments[block] == group,
            _ => true,
        };
        let server = fed.clients[0].model(&fed.server.params).unwrap();
        if keep {
            assert_eq!(server.get(&p.name), Some(&p.value), "{}", p.name);
        }
    }
}

#[test]
fn adam_single_client_matches_local_training() {
    let (model, catalog, data) = tiny_setup(1, 5).unwrap();
    let model = ModelConfig { n_groups: 1, ..model };
    let h = FederationConfig {
        optimizer: Optimizer::Adam,
        lr: 0.01,
        ..hyper(3)
    };
    let mut fed = Federation::new(model.clone(), h.clone(), catalog.clone(), data).unwrap();
    let client = fed.clients[0].clone();
    let mut params = client.model(&fed.server.params).unwrap();
    let mut opt = OptimizerState::new(h.optimizer);
    let mut f = fed.server.f.clone();
    for round in 1..=3 {
        let s = local_train(
            &model,
            &catalog,
            &h,
            &f,
            &mut params,
            &client.train,
            &mut opt,
            &mut client_rng(h.seed, round, client.user),
        )
        .unwrap();
        f = GroupProportions::from_assignments(&[s.assignments], model.n_blocks, 1).unwrap();
    }
    fed.run().unwrap();
    assert_eq!(fed.clients[0].model(&fed.server.params).unwrap(), params);
    assert_eq!(fed.clients[0].optimizer, opt);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let (model, catalog, data) = tiny_setup(6, 2).unwrap();
    let h = FederationConfig {
        noise: Some(0.01),
        participation: 0.5,
        optimizer: Optimizer::Adam,
        lr: 0.01,
        ..hyper(6)
    };
    let mut straight = Federation::new(model.clone(), h.clone(), catalog.clone(), data.clone()).unwrap();
    straight.run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut first = Federation::new(model, h, catalog.clone(), data.clone()).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    first.save_checkpoint(&path).unwrap();
    let mut resumed = Federation::resume(&path, catalog, data).unwrap();
    resumed.run().unwrap();

    assert_eq!(resumed.server.params, straight.server.params);
    assert_eq!(resumed.server.f, straight.server.f);
    for (a, b) in resumed.clients.iter().zip(&straight.clients) {
        assert_eq!(a.private, b.private);
        assert_eq!(a.optimizer, b.optimizer);
    }
    assert_eq!(no_time(&resumed.reports), no_time(&straight.reports));
}

#[test]
fn resume_rejects_other_data() {
    let (model, catalog, data) = tiny_setup(4, 2).unwrap();
    let fed = Federation::new(model, hyper(1), catalog, data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    fed.save_checkpoint(&path).unwrap();
    let (_, catalog, fewer) = tiny_setup(3, 2).unwrap();
    assert!(Federation::resume(&path, catalog, fewer).is_err());
}

#[test]
fn same_seed_same_run() {
    let (model, catalog, data) = tiny_setup(5, 1).unwrap();
    let h = FederationConfig {
        participation: 0.6,
        noise: Some(0.05),
        ..hyper(3)
    };
    let mut a = Federation::new(model.clone(), h.clone(), catalog.clone(), data.clone()).unwrap();
    let mut b = Federation::new(model, h, catalog, data).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.server.params, b.server.params);
    assert_eq!(no_time(&a.reports), no_time(&b.reports));
}

#[test]
fn frozen_gate_never_moves() {
    let (model, catalog, data) = tiny_setup(6, 3).unwrap();
    let h = FederationConfig {
        freeze_gate: true,
        alpha: 1.0,
        ..hyper(3)
    };
    let mut fed = Federation::new(model, h, catalog, data).unwrap();
    let before = fed.server.params.clone();
    fed.run().unwrap();
    for (a, b) in fed.server.params.iter().zip(before.iter()) {
        if a.name.contains(".gate.") {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn groups_only_move_with_members() {
    let (model, catalog, data) = tiny_setup(6, 3).unwrap();
    let mut fed = Federation::new(model, hyper(1), catalog, data).unwrap();
    let before = fed.server.params.clone();
    let out = fed.step_detailed().unwrap();
    for (a, b) in fed.server.params.iter().zip(before.iter()) {
        if let Partition::Group { block, group } = a.partition {
            let used = out.payloads.iter().any(|p| p.assignments[block] == group);
            if !used {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }
    let shares = &out.report.group_shares;
    for row in shares {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_local_epochs_upload_zero_deltas() {
    let (model, catalog, data) = tiny_setup(4, 3).unwrap();
    let h = FederationConfig {
        local_epochs: 0,
        ..hyper(1)
    };
    let mut fed = Federation::new(model, h, catalog, data).unwrap();
    let before = fed.server.params.clone();
    let out = fed.step_detailed().unwrap();
    assert!(!out.payloads.is_empty());
    for p in &out.payloads {
        assert!(p.deltas.iter().all(|d| d.values.iter().all(|&v| v == 0.0)));
    }
    assert_eq!(fed.server.params, before);
}

#[test]
fn zero_rounds_keeps_only_init_report() {
    let (model, catalog, data) = tiny_setup(3, 3).unwrap();
    let mut fed = Federation::new(model, hyper(0), catalog, data).unwrap();
    let before = fed.server.params.clone();
    fed.run().unwrap();
    assert_eq!(fed.reports.len(), 1);
    assert_eq!(fed.reports[0].round, 0);
    assert!(fed.reports[0].test.is_some());
    assert_eq!(fed.server.params, before);
}

#[test]
fn private_parameters_differ_between_clients() {
    let (model, catalog, data) = tiny_setup(3, 3).unwrap();
    let mut fed = Federation::new(model, hyper(2), catalog, data).unwrap();
    fed.run().unwrap();
    assert_ne!(fed.clients[0].private, fed.clients[1].private);
}

#[test]
fn without_group_ffn_nothing_is_grouped() {
    let (model, catalog, data) = tiny_setup(4, 3).unwrap();
    let model = ModelConfig {
        group_ffn: false,
        ..model
    };
    let mut fed = Federation::new(model, hyper(2), catalog, data).unwrap();
    assert!(fed
        .server
        .params
        .iter()
        .all(|p| !matches!(p.partition, Partition::Group { .. }) && !p.name.contains(".gate.")));
    fed.run().unwrap();
    assert_eq!(fed.reports.last().unwrap().balance_loss, 0.0);
}
