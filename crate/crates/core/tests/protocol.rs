use pego_core::data::{generate_dataset, DataConfig};
use pego_core::numerics::Rng;
use pego_core::report::summary_csv;
use pego_core::trainer::{ablate, leave_one_domain_out, mean_stderr, sweep_n, TrainConfig};
use pego_core::vit::{init_vit, VitConfig, VitModel};

fn tiny() -> (TrainConfig, VitModel) {
    let mut cfg = TrainConfig::canonical();
    cfg.vit = VitConfig {
        image_size: 8,
        embed_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        ..VitConfig::default()
    };
    cfg.data = DataConfig {
        domains: 4,
        classes: 2,
        per_class: 10,
        image_size: 8,
        seed: 0,
    };
    cfg.rank = 2;
    cfg.group_n = 2;
    cfg.iterations = 6;
    cfg.eval_every = 3;
    cfg.batch_per_domain = 4;
    let base = init_vit(&cfg.vit, &mut Rng::new(1)).unwrap();
    (cfg, base)
}

#[test]
fn lodo_counts_and_aggregates() {
    let (cfg, base) = tiny();
    let ds = generate_dataset(&cfg.data, 0).unwrap();
    let r = leave_one_domain_out(&base, &ds, &cfg, &[0, 1, 2], 1).unwrap();
    assert_eq!(r.records.len(), 12);
    assert_eq!(r.per_domain.len(), 4);
    let mean_of_means = r.per_domain.iter().map(|d| d.mean).sum::<f64>() / 4.0;
    assert!((r.average - mean_of_means).abs() < 1e-15);
    for rec in &r.records {
        assert!((0.0..=1.0).contains(&rec.accuracy));
        assert_eq!(rec.history.len(), 6);
    }
    for d in &r.per_domain {
        let accs: Vec<f64> = r
            .records
            .iter()
            .filter(|x| x.test_domain == d.domain)
            .map(|x| x.accuracy)
            .collect();
        assert_eq!(mean_stderr(&accs), (d.mean, d.stderr));
        assert!(d.stderr >= 0.0);
    }
}

#[test]
fn reruns_are_byte_identical_and_parallelism_is_transparent() {
    let (cfg, base) = tiny();
    let ds = generate_dataset(&cfg.data, 0).unwrap();
    let a = leave_one_domain_out(&base, &ds, &cfg, &[5, 6], 1).unwrap();
    let b = leave_one_domain_out(&base, &ds, &cfg, &[5, 6], 1).unwrap();
    let c = leave_one_domain_out(&base, &ds, &cfg, &[5, 6], 3).unwrap();
    assert_eq!(summary_csv(&a.records), summary_csv(&b.records));
    assert_eq!(summary_csv(&a.records), summary_csv(&c.records));
}

#[test]
fn ablation_and_sweep_shapes() {
    let (cfg, base) = tiny();
    let ds = generate_dataset(&cfg.data, 0).unwrap();
    let rows = ablate(&base, &ds, &cfg, &[0], 1).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].label, "LoRA");
    assert!(rows.iter().all(|r| r.stderr == 0.0));
    let s = sweep_n(&base, &ds, &cfg, &[2], &[0], 1).unwrap();
    assert_eq!(s.selected, 2);
    assert_eq!(s.rows.len(), 1);
    assert!(sweep_n(&base, &ds, &cfg, &[], &[0], 1).is_err());
}

#[test]
fn too_few_domains_rejected() {
    let (cfg, base) = tiny();
    let ds = generate_dataset(
        &DataConfig {
            domains: 3,
            ..cfg.data.clone()
        },
        0,
    )
    .unwrap();
    let two = ds.subset(&[0, 1]);
    assert!(leave_one_domain_out(&base, &two, &cfg, &[0], 1).is_err());
    assert!(leave_one_domain_out(&base, &ds, &cfg, &[], 1).is_err());
}
