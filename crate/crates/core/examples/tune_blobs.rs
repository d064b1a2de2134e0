// criterion-7/8 scenario dry run (removed before final commit)
use splitsim::attacks::{apply_poisoning, AttackMode, AttackPlan};
use splitsim::cost::CostModel;
use splitsim::data::{gen_blobs, partition, PartitionPlan, PartitionScheme};
use splitsim::ledger::{run_bsfl, EvalMetric};
use splitsim::nn::ModelSpec;
use splitsim::rng;
use splitsim::topology::{run_ssfl, TopologyConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let top_k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let cycles: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(24);
    let patience: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
    let per_class: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f32 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.1);

    let t0 = Instant::now();
    let spec = ModelSpec::two_conv_classifier(1, 14, 14);
    let cost = CostModel::default();
    let mut ssfl_ok = 0;
    let mut bsfl_ok = 0;
    let mut hygienic_cycles = 0usize;
    let mut total_cycles = 0usize;

    for seed in 0..seeds {
        let base = gen_blobs(per_class, 14, 0.8, rng::mix(seed, "dataset", &[]));
        // hold out val/test like the runner does
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(&mut rng::stream(seed, "holdout-split", &[]));
        let val_n = base.len() / 10;
        let take = |idx: &[usize]| splitsim::data::Dataset {
            images: idx.iter().map(|&i| base.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| base.labels[i]).collect(),
            shape: base.shape.clone(),
        };
        let val = take(&order[..val_n]);
        let test = take(&order[val_n..2 * val_n]);
        let train = take(&order[2 * val_n..]);
        let plan = PartitionPlan {
            scheme: PartitionScheme::Dirichlet { alpha: 1.0 },
            node_count: 9,
            seed: rng::mix(seed, "partition", &[]),
        };
        let parts = partition(&train, &plan).unwrap();
        let attack = AttackPlan::derive(1.0 / 3.0, 9, vec![AttackMode::PoisonData], seed).unwrap();
        let poisoned = apply_poisoning(&parts, &attack);

        let cfg = TopologyConfig {
            node_count: 9, shard_count: 3, clients_per_shard: 2,
            rounds_per_cycle: 1, cycles, epochs: 1,
            learning_rate: lr, batch_size: 16, seed, patience: Some(patience),
        };

        let ssfl_clean = run_ssfl(&cfg, &spec, &parts, &val, &cost).unwrap();
        let ssfl_att = run_ssfl(&cfg, &spec, &poisoned, &val, &cost).unwrap();
        let (scl, _) = ssfl_clean.test_metrics(&spec, &test).unwrap();
        let (sat, _) = ssfl_att.test_metrics(&spec, &test).unwrap();

        let bsfl_clean = run_bsfl(&cfg, &spec, &parts, &val, &cost, &AttackPlan::none(), EvalMetric::Loss, top_k).unwrap();
        let bsfl_att = run_bsfl(&cfg, &spec, &poisoned, &val, &cost, &attack, EvalMetric::Loss, top_k).unwrap();
        let (bcl, _) = bsfl_clean.history.test_metrics(&spec, &test).unwrap();
        let (bat, _) = bsfl_att.history.test_metrics(&spec, &test).unwrap();

        // hygiene on the attacked bsfl run
        let mut clean_cycles = 0;
        for (row, asg) in bsfl_att.history.rows.iter().zip(&bsfl_att.assignments) {
            let mut tainted = false;
            for &w in &row.winners {
                let idx = asg.shards.iter().position(|s| s.server == w).unwrap();
                if asg.members_of(idx).iter().any(|&m| attack.is_malicious(m)) {
                    tainted = true;
                }
            }
            if !tainted { clean_cycles += 1; }
        }
        hygienic_cycles += clean_cycles;
        total_cycles += bsfl_att.history.rows.len();

        let s_ratio = sat / scl;
        let b_ratio = bat / bcl;
        if s_ratio >= 1.5 { ssfl_ok += 1; }
        if b_ratio <= 1.15 { bsfl_ok += 1; }
        println!(
            "seed {}: ssfl {:.3}->{:.3} (x{:.2}) | bsfl {:.3}->{:.3} (x{:.2}) | hygiene {}/{} | cycles c{} a{}",
            seed, scl, sat, s_ratio, bcl, bat, b_ratio, clean_cycles, bsfl_att.history.rows.len(),
            bsfl_clean.history.rows.len(), bsfl_att.history.rows.len()
        );
    }
    println!(
        "K={} cycles={} patience={} pc={} lr={}: ssfl_ok {}/{} bsfl_ok {}/{} hygiene {}/{} = {:.1}%  [{:.0}s]",
        top_k, cycles, patience, per_class, lr, ssfl_ok, seeds, bsfl_ok, seeds,
        hygienic_cycles, total_cycles, 100.0 * hygienic_cycles as f64 / total_cycles.max(1) as f64,
        t0.elapsed().as_secs_f64()
    );
}
