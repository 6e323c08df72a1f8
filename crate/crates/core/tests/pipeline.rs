use hyperalign_core::eval::evaluate;
use hyperalign_core::model::{LrSchedule, RunConfig};
use hyperalign_core::supervision::hamming_distance;
use hyperalign_core::synth::{synth_generate, CorpusRecord, SynthConfig, World};
use hyperalign_core::train::{batch_loss, initial_model, train};
use hyperalign_core::Graph;

fn small(steps: usize) -> RunConfig {
    RunConfig {
        steps,
        batch_size: 8,
        ..RunConfig::desk()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    synth_generate(&SynthConfig::new(n, seed)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_the_model_untouched() {
    let cfg = RunConfig {
        lr: 0.0,
        lr_schedule: LrSchedule::Constant,
        ..small(1)
    };
    let data = corpus(32, 1);
    let trained = train(&cfg, &data).unwrap().model;
    let init = initial_model(&cfg).unwrap();
    for ((name, a), (_, b)) in trained.named().iter().zip(init.named()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} moved");
    }
}

#[test]
fn zero_weights_leave_only_the_task_gradient() {
    let cfg = RunConfig {
        alpha: 0.0,
        beta: 0.0,
        ..small(1)
    };
    let data = corpus(8, 2);
    let batch: Vec<&CorpusRecord> = data.iter().collect();
    let model = initial_model(&cfg).unwrap();
    let world = World::new(cfg.d_t);
    let mut g = Graph::new();
    let vars = model.bind(&mut g).unwrap();
    let loss = batch_loss(&mut g, &vars, &model, &cfg, &world, &batch).unwrap();
    assert_eq!(g.item(loss.total).unwrap(), g.item(loss.task).unwrap());
    let total = g.backward(loss.total).unwrap();
    let task = g.backward(loss.task).unwrap();
    for v in vars.all() {
        assert_eq!(total.wrt(v).data(), task.wrt(v).data());
    }
}

#[test]
fn database_records_retrieve_themselves() {
    let cfg = small(5);
    let data = corpus(64, 3);
    let model = train(&cfg, &data).unwrap().model;
    let report = evaluate(&model, &cfg, &data, &data[..32], vec![]).unwrap();
    assert_eq!(report.p_at_1, 1.0);
    assert_eq!(report.mean_oracle_hamming, 0.0);
    assert_eq!(report.mean_retrieved_hamming, 0.0);
}

#[test]
fn reported_oracle_matches_an_exhaustive_scan() {
    let cfg = small(3);
    let (db, queries) = (corpus(64, 4), corpus(20, 5));
    let model = initial_model(&cfg).unwrap();
    let report = evaluate(&model, &cfg, &db, &queries, vec![]).unwrap();
    let mut sum = 0u32;
    for q in &queries {
        let qc = q.status_vector().unwrap();
        sum += db
            .iter()
            .map(|r| hamming_distance(qc, r.status_vector().unwrap()))
            .min()
            .unwrap();
    }
    assert_eq!(report.mean_oracle_hamming, sum as f64 / queries.len() as f64);
    assert!(report.mean_retrieved_hamming >= report.mean_oracle_hamming);
    assert!((0.0..=1.0).contains(&report.p_at_1));
}

#[test]
fn training_is_reproducible() {
    let cfg = small(4);
    let data = corpus(32, 6);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.totals(), b.totals());
    for ((_, x), (_, y)) in a.model.named().iter().zip(b.model.named()) {
        assert_eq!(x.data(), y.data());
    }
}
