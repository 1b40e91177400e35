//! Train ablation variants on synthetic data and print test metrics.
//!
//! Usage: cargo run -p starec-core --example synthetic_run [-- variant...]

use starec_core::data::temporal_split;
use starec_core::evaluation::variant_flags;
use starec_core::search::UserSearchIndex;
use starec_core::synth::{generate_synthetic, SyntheticSpec};
use starec_core::training::{anneal_temperature, evaluate_tasks, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(|s| s.as_str()).unwrap_or("periodic");
    let variants: Vec<String> = if args.len() > 1 {
        args[1..].to_vec()
    } else {
        vec!["starec".into(), "gru".into()]
    };

    let users: u32 = std::env::var("USERS").ok().and_then(|v| v.parse().ok()).unwrap_or(1000);
    let events: u32 = std::env::var("EVENTS").ok().and_then(|v| v.parse().ok()).unwrap_or(50);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let seed: u64 = std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(7);
    let lr_start: f64 = std::env::var("LR_START").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-2);
    let lr_end: f64 = std::env::var("LR_END").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-6);
    let batch: usize = std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(100);
    let momentum: f64 = std::env::var("MOMENTUM").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let decay = match std::env::var("DECAY").as_deref() {
        Ok("log") => starec_core::DecayMode::Log,
        _ => starec_core::DecayMode::Reciprocal,
    };
    let optimizer = match std::env::var("OPT").as_deref() {
        Ok("adam") => starec_core::training::Optimizer::Adam,
        _ => starec_core::training::Optimizer::Sgd,
    };

    let t0 = std::time::Instant::now();
    let ds = match mode {
        "periodic" => generate_synthetic(&SyntheticSpec::periodic(users, events, 20, seed)).unwrap(),
        "suppression" => {
            generate_synthetic(&SyntheticSpec::suppression(users, events, 2, seed)).unwrap()
        }
        // deterministic dt rule: label = 1 iff the gap from the previous
        // event is >= 2; sanity probe for the decay input channel
        "gaprule" => {
            use rand::Rng;
            use rand::SeedableRng;
            let mut histories = Vec::new();
            for u in 0..users {
                let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ (u as u64 * 7919));
                let mut t = 0u64;
                let mut evs = Vec::new();
                for _ in 0..events {
                    let gap = if rng.random::<f64>() < 0.5 {
                        1
                    } else {
                        2 + rng.random_range(0..4) as u64
                    };
                    t += gap;
                    let cat = rng.random_range(0..8u32);
                    let item = cat * 5 + rng.random_range(0..5u32);
                    evs.push(starec_core::Interaction::simple(
                        u,
                        item,
                        cat,
                        t,
                        u8::from(gap >= 2),
                    ));
                }
                let n = evs.len();
                histories.push(starec_core::UserHistory::new(u, evs, n));
            }
            starec_core::Dataset::from_histories(histories)
        }
        other => panic!("unknown mode {other}"),
    };
    let split = temporal_split(&ds);
    let rate: f64 = ds
        .histories()
        .iter()
        .flat_map(|h| h.events.iter())
        .map(|e| e.label as f64)
        .sum::<f64>()
        / ds.n_events() as f64;
    eprintln!(
        "dataset: {} users, {} events, base rate {:.3}, gen {:?}",
        ds.n_users(),
        ds.n_events(),
        rate,
        t0.elapsed()
    );

    for name in &variants {
        let mut cfg = TrainConfig {
            epochs,
            seed,
            log: true,
            lr_start,
            lr_end,
            batch_size: batch,
            momentum,
            optimizer,
            patience: epochs,
            ..Default::default()
        };
        cfg.model.embed_dim = std::env::var("DIM").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
        cfg.model.hidden_dim = std::env::var("HID").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
        cfg.model.search.seq_len = std::env::var("SEQ").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
        cfg.model.search.n_similar_users = std::env::var("SIM").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        if let Ok(rf) = std::env::var("RF") {
            cfg.model.search.recent_fraction = rf.parse().unwrap();
        }
        cfg.model.flags = variant_flags(name).expect("known variant");
        cfg.model.decay = decay;
        if let Ok(d) = std::env::var("DROPOUT") {
            cfg.model.dropout = d.parse().unwrap();
        }
        let t0 = std::time::Instant::now();
        let out = train(&ds, &split.split, &cfg).unwrap();
        let index = UserSearchIndex::build(&ds);
        let final_tau = anneal_temperature(cfg.epochs - 1, cfg.epochs, cfg.tau_start, cfg.tau_end);
        let test = evaluate_tasks(
            &out.model,
            &ds,
            &index,
            &split.split.test,
            final_tau,
            cfg.seed ^ 0x5EED_0EA1u64,
            cfg.acc_threshold,
        )
        .unwrap();
        println!(
            "{:<16} best_epoch {:>2}  val_auc {:.4}  test_auc {:.4}  test_logloss {:.4}  ({:?})",
            name,
            out.report.best_epoch,
            out.report.epochs[out.report.best_epoch].val_auc.unwrap_or(f64::NAN),
            test.auc.unwrap_or(f64::NAN),
            test.logloss,
            t0.elapsed(),
        );
    }
}
