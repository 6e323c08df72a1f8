//! Acceptance criteria. Each test prints one PASS/FAIL line with its
//! evidence and runtime, then fails if the criterion does not hold.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use hyperalign::paired_corpora;
use hyperalign_core::attention::sinkhorn_normalize;
use hyperalign_core::eval::evaluate;
use hyperalign_core::gradsuite::{check_path, GradTarget, TOLERANCE};
use hyperalign_core::hyperbolic::{mobius_add, poincare_distance, BallConfig, HnnParams};
use hyperalign_core::losses::{fcc_loss, task_loss_tokens, total_loss, total_loss_value, LossWeights};
use hyperalign_core::model::RunConfig;
use hyperalign_core::retrieval::{
    distance, embed_rows, index_build, rank_loss, rank_targets, Backend, DistanceMatrix, RankTargets,
};
use hyperalign_core::rng::Rng;
use hyperalign_core::supervision::{hamming_matrix, StatusVector, STATUS_BITS};
use hyperalign_core::synth::{logit_matrix, synth_generate, SynthConfig, NUM_ENTITIES};
use hyperalign_core::train::{initial_model, train};
use hyperalign_core::{Graph, Tensor};

// One criterion at a time, so that runtimes are not shared.
static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn criterion(id: u8, name: &str, limit_secs: Option<f64>, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut outcome = body();
    let secs = start.elapsed().as_secs_f64();
    if let (Ok(detail), Some(limit)) = (&outcome, limit_secs) {
        if secs >= limit {
            outcome = Err(format!("{detail}; runtime {secs:.1}s over the {limit}s budget"));
        }
    }
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Straight to the handle: the harness only captures the print macros.
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id} ({name}): {detail} [{secs:.2}s]");
    if let Err(d) = outcome {
        panic!("criterion {id} failed: {d}");
    }
}

fn check(ok: bool, what: String, failures: &mut Vec<String>) {
    if !ok {
        failures.push(what);
    }
}

fn verdict(summary: String, failures: Vec<String>) -> Outcome {
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

fn ball_point(rng: &mut Rng, dim: usize) -> Vec<f64> {
    // Uniform in the open unit ball.
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = rng.uniform().powf(1.0 / dim as f64) * (1.0 - 1e-9);
    v.iter().map(|x| x / n * r).collect()
}

fn mobius(x: &[f64], y: &[f64], ball: &BallConfig) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(1, x.len(), x.to_vec()).unwrap()).unwrap();
    let b = g.constant(Tensor::matrix(1, y.len(), y.to_vec()).unwrap()).unwrap();
    let s = mobius_add(&mut g, a, b, ball).unwrap();
    g.value(s).data().to_vec()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn criterion_1_hyperbolic_metric() {
    criterion(1, "hyperbolic metric suite", Some(5.0), || {
        let ball = BallConfig::new(1.0).unwrap();
        let flat = BallConfig::new(1e-8).unwrap();
        let mut rng = Rng::new(1);
        let (mut asym, mut self_d, mut slack, mut ident, mut inverse, mut flat_err) =
            (0.0f64, 0.0f64, f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..1000 {
            let (x, y, z) = (ball_point(&mut rng, 5), ball_point(&mut rng, 5), ball_point(&mut rng, 5));
            let dxy = poincare_distance(&x, &y, &ball);
            asym = asym.max((dxy - poincare_distance(&y, &x, &ball)).abs());
            self_d = self_d.max(poincare_distance(&x, &x, &ball));
            slack = slack.min(poincare_distance(&x, &z, &ball) + poincare_distance(&z, &y, &ball) - dxy);
            let zero = vec![0.0; 5];
            let s = mobius(&x, &zero, &ball);
            ident = ident.max(s.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            inverse = inverse.max(norm(&mobius(&neg, &x, &ball)));
            let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            flat_err = flat_err.max((poincare_distance(&x, &y, &flat) - 2.0 * norm(&diff)).abs());
        }
        let mut f = Vec::new();
        check(asym <= 1e-10, format!("asymmetry {asym:e} > 1e-10"), &mut f);
        check(self_d <= 1e-12, format!("d(x,x) {self_d:e} > 1e-12"), &mut f);
        check(slack >= -1e-9, format!("triangle slack {slack:e} < -1e-9"), &mut f);
        check(ident <= 1e-15, format!("|x (+) 0 - x| {ident:e}"), &mut f);
        check(inverse < 1e-9, format!("|(-x) (+) x| {inverse:e} >= 1e-9"), &mut f);
        check(flat_err < 1e-4, format!("flat-limit error {flat_err:e} >= 1e-4"), &mut f);
        verdict(
            format!(
                "1000 triples: max asymmetry {asym:.1e}, max d(x,x) {self_d:.1e}, min triangle slack {slack:.2e}, \
                 max |(-x)(+)x| {inverse:.1e}, max flat-limit error {flat_err:.1e}"
            ),
            f,
        )
    });
}

#[test]
fn criterion_2_sinkhorn() {
    criterion(2, "Sinkhorn suite", Some(5.0), || {
        let (a, b) = (vec![1.0 / 8.0; 8], vec![1.0 / 5.0; 5]);
        let mut rng = Rng::new(2);
        let mut f = Vec::new();
        let (mut worst, mut over, mut negatives, mut increases) = (0.0f64, 0usize, 0usize, 0usize);
        for m in 0..100 {
            let s = rng.uniform_tensor(&[8, 5], 0.0, 1.0);
            let mut prev = f64::INFINITY;
            for it in 1..=50 {
                let t = sinkhorn_normalize(&s, 0.1, it, &a, &b).map_err(|e| e.to_string())?;
                let r = t.row_residual.max(t.col_residual);
                // Rounding allowance for plans that have already converged.
                if r > prev + 1e-15 {
                    increases += 1;
                }
                prev = r;
                if it == 50 {
                    negatives += t.plan.data().iter().filter(|&&x| x < 0.0).count();
                    worst = worst.max(r);
                    if r >= 1e-6 {
                        over += 1;
                        if over <= 3 {
                            f.push(format!("matrix {m}: residual {r:e} after 50 iterations"));
                        }
                    }
                }
            }
        }
        let u = sinkhorn_normalize(&Tensor::full(&[8, 5], 0.3), 0.1, 50, &a, &b).map_err(|e| e.to_string())?;
        let uniform_err = u.plan.data().iter().map(|x| (x - 1.0 / 40.0).abs()).fold(0.0, f64::max);
        check(over == 0, format!("{over}/100 matrices at or above 1e-6"), &mut f);
        check(negatives == 0, format!("{negatives} negative plan entries"), &mut f);
        check(increases == 0, format!("{increases} residual increases across iterations"), &mut f);
        check(uniform_err <= 1e-12, format!("uniform plan error {uniform_err:e}"), &mut f);
        verdict(
            format!(
                "100 U(0,1) 8x5 matrices, eps 0.1, 50 iterations: worst residual {worst:.3e}, \
                 negatives {negatives}, residual increases {increases}, uniform-plan error {uniform_err:.1e}"
            ),
            f,
        )
    });
}

#[test]
fn criterion_3_gradients() {
    criterion(3, "gradient suite", Some(60.0), || {
        let mut parts = Vec::new();
        let mut f = Vec::new();
        for t in GradTarget::ALL {
            let r = check_path(t, 0, 20).map_err(|e| e.to_string())?;
            parts.push(format!(
                "{} {} points worst {:.2e} ({} resampled)",
                t.name(),
                r.points,
                r.worst.max_rel_err,
                r.rejected
            ));
            check(r.passed(), format!("{} worst {:e} at {}", t.name(), r.worst.max_rel_err, r.worst_input), &mut f);
        }
        verdict(format!("h 1e-6, tolerance {TOLERANCE:e}: {}", parts.join(", ")), f)
    });
}

fn bitwise_hamming(a: StatusVector, b: StatusVector) -> u32 {
    (0..STATUS_BITS).filter(|&k| a.bit(k) != b.bit(k)).count() as u32
}

#[test]
fn criterion_4_oracles() {
    criterion(4, "oracle equivalence", Some(30.0), || {
        let err = |e: hyperalign_core::Error| e.to_string();
        let db = synth_generate(&SynthConfig::new(4096, 11)).map_err(err)?;
        let queries = synth_generate(&SynthConfig::new(100, 12)).map_err(err)?;
        let hnn = HnnParams::init(NUM_ENTITIES, 16, BallConfig::new(0.1).map_err(err)?, &mut Rng::new(13));
        let mut f = Vec::new();
        let k = 10;
        for backend in [Backend::Hyperbolic, Backend::Euclidean, Backend::Cosine] {
            let index = index_build(&db, &hnn, backend).map_err(err)?;
            let emb = embed_rows(&hnn, &logit_matrix(&db).map_err(err)?, backend).map_err(err)?;
            let qs = embed_rows(&hnn, &logit_matrix(&queries).map_err(err)?, backend).map_err(err)?;
            let mut mismatches = 0;
            for (qi, q) in queries.iter().enumerate() {
                let got: Vec<usize> = index.query(&q.logits, k).map_err(err)?.iter().map(|n| n.position).collect();
                let mut scan: Vec<(f64, usize)> = (0..db.len())
                    .map(|i| (distance(backend, qs.row(qi), emb.row(i), &hnn.config), i))
                    .collect();
                scan.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                if got != scan[..k].iter().map(|x| x.1).collect::<Vec<_>>() {
                    mismatches += 1;
                }
            }
            check(mismatches == 0, format!("{backend:?}: {mismatches}/100 top-{k} lists differ"), &mut f);
        }

        let codes: Vec<StatusVector> = db[..512].iter().map(|r| r.status_vector()).collect::<Result<_, _>>().map_err(err)?;
        let d = hamming_matrix(&codes).map_err(err)?;
        let mut bad_pairs = 0;
        for i in 0..codes.len() {
            for j in 0..codes.len() {
                if d.get(i, j) != bitwise_hamming(codes[i], codes[j]) {
                    bad_pairs += 1;
                }
            }
        }
        check(bad_pairs == 0, format!("{bad_pairs} Hamming pairs differ from the bit count"), &mut f);
        let t = rank_targets(&d).map_err(err)?;
        let bad_rows = (0..codes.len())
            .filter(|&i| {
                let best = (0..codes.len()).filter(|&j| j != i).min_by_key(|&j| (d.get(i, j), j)).unwrap();
                t.indices()[i] != best
            })
            .count();
        check(bad_rows == 0, format!("{bad_rows} rank targets differ from the row argmin"), &mut f);
        verdict(
            format!(
                "4096 records, 100 queries, top-{k} on 3 backends; 512x512 Hamming matrix; 512 rank targets"
            ),
            f,
        )
    });
}

#[test]
fn criterion_5_closed_forms() {
    criterion(5, "closed-form values", None, || {
        let err = |e: hyperalign_core::Error| e.to_string();
        let mut g = Graph::new();
        let mut f = Vec::new();

        let mut dm = Tensor::full(&[4, 4], 0.7);
        for i in 0..4 {
            dm.data_mut()[i * 4 + i] = 0.0;
        }
        let values = g.constant(dm).map_err(err)?;
        let d_hat = DistanceMatrix {
            values,
            backend: Backend::Hyperbolic,
            diagonal_masked: false,
        };
        let targets = RankTargets::new(vec![1, 0, 3, 2]).map_err(err)?;
        let v = rank_loss(&mut g, &d_hat, &targets, 0.5).map_err(err)?;
        let rank = g.item(v).map_err(err)?;
        let ln3 = 1.0986122886681098;
        check((rank - ln3).abs() <= 1e-9, format!("rank loss {rank} vs ln 3"), &mut f);

        let logits = g.constant(Tensor::zeros(&[18, 4])).map_err(err)?;
        let tokens: Vec<usize> = (0..18).map(|i| i % 4).collect();
        let v = task_loss_tokens(&mut g, logits, &tokens).map_err(err)?;
        let ce = g.item(v).map_err(err)?;
        let ln4 = 1.3862943611198906;
        check((ce - ln4).abs() <= 1e-12, format!("token CE {ce} vs ln 4"), &mut f);

        let sig1 = 0.7310585786300049;
        let s = g.constant(Tensor::full(&[3, 5], sig1)).map_err(err)?;
        let o = g.constant(Tensor::ones(&[3, 5])).map_err(err)?;
        let v = fcc_loss(&mut g, s, o).map_err(err)?;
        let fcc = g.item(v).map_err(err)?;
        check((fcc - 0.268941).abs() <= 1e-6, format!("fcc {fcc} vs 0.268941"), &mut f);

        let w = LossWeights::new(2.0, 0.5).map_err(err)?;
        let (t, r, c) = (
            g.constant(Tensor::scalar(1.0)).map_err(err)?,
            g.constant(Tensor::scalar(0.5)).map_err(err)?,
            g.constant(Tensor::scalar(0.2)).map_err(err)?,
        );
        let v = total_loss(&mut g, t, r, c, w).map_err(err)?;
        let total = g.item(v).map_err(err)?;
        let plain = total_loss_value(1.0, 0.5, 0.2, w);
        check(total == 2.1 && plain == 2.1, format!("total loss {total} / {plain} vs 2.1"), &mut f);
        verdict(
            format!("rank {rank:.12} (ln 3), token CE {ce:.15} (ln 4), fcc {fcc:.9}, total {total}"),
            f,
        )
    });
}

#[test]
fn criterion_6_end_to_end_training() {
    criterion(6, "end-to-end training", Some(120.0), || {
        let err = |e: hyperalign::Error| e.to_string();
        let cfg = RunConfig::desk();
        let (train_set, test_set) = paired_corpora(7, 512, 128, &SynthConfig::new(512, 7)).map_err(err)?;
        let outcome = train(&cfg, &train_set).map_err(|e| e.to_string())?;
        let curve = outcome.totals();
        let (first, last) = (curve[0], *curve.last().unwrap());
        let report = evaluate(&outcome.model, &cfg, &train_set, &test_set, curve.clone()).map_err(|e| e.to_string())?;
        let mut f = Vec::new();
        check(last < first, format!("final loss {last} not below step-1 loss {first}"), &mut f);
        check(report.p_at_1 >= 0.6, format!("p@1 {} below the 0.6 bound", report.p_at_1), &mut f);

        let mut paired = Vec::new();
        for seed in 1..=5u64 {
            let c = RunConfig { seed, ..cfg.clone() };
            let (tr, te) = paired_corpora(seed, 512, 128, &SynthConfig::new(512, seed)).map_err(err)?;
            let untrained = evaluate(&initial_model(&c).map_err(|e| e.to_string())?, &c, &tr, &te, vec![])
                .map_err(|e| e.to_string())?
                .p_at_1;
            let model = train(&c, &tr).map_err(|e| e.to_string())?.model;
            let trained = evaluate(&model, &c, &tr, &te, vec![]).map_err(|e| e.to_string())?.p_at_1;
            check(trained > untrained, format!("seed {seed}: trained {trained} <= untrained {untrained}"), &mut f);
            paired.push(format!("{seed}: {untrained:.3}->{trained:.3}"));
        }
        verdict(
            format!(
                "seed 7, 300 steps: loss {first:.4} -> {last:.4}, p@1 {:.4} (bound 0.6); paired p@1 {}",
                report.p_at_1,
                paired.join(", ")
            ),
            f,
        )
    });
}

#[test]
fn criterion_7_ablation_sweep() {
    criterion(7, "ablation sweep", None, || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_hyperalign"))
            .args(["sweep", "--out-dir"])
            .arg(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("sweep exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        let mut reader = csv::Reader::from_path(dir.path().join("sweep.csv")).map_err(|e| e.to_string())?;
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("no {name} column"));
        let (backend, attention, status, p1) = (col("backend")?, col("attention")?, col("status")?, col("p_at_1")?);
        let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let mut f = Vec::new();
        check(rows.len() == 6, format!("{} rows instead of 6", rows.len()), &mut f);
        let mut cells = Vec::new();
        for r in &rows {
            check(&r[status] == "ok", format!("{}+{} failed", &r[backend], &r[attention]), &mut f);
            cells.push(format!("{}+{} {}", &r[backend], &r[attention], &r[p1]));
        }
        let main = rows
            .iter()
            .find(|r| &r[backend] == "hyperbolic" && &r[attention] == "mpsa")
            .map(|r| r[p1].to_string());
        check(main.is_some(), "no hyperbolic+mpsa row".into(), &mut f);
        verdict(
            format!(
                "{} rows; hyperbolic+mpsa p@1 {}; all cells: {}",
                rows.len(),
                main.unwrap_or_default(),
                cells.join(", ")
            ),
            f,
        )
    });
}

fn pipeline(dir: &Path, config: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_hyperalign");
    let d = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let steps: [Vec<String>; 4] = [
        vec!["gen-data".into(), "--n".into(), "128".into(), "--seed".into(), "7".into(), "--out".into(), d("train.jsonl")],
        vec!["gen-data".into(), "--n".into(), "32".into(), "--seed".into(), "1007".into(), "--out".into(), d("test.jsonl")],
        vec![
            "train".into(), "--config".into(), config.to_str().unwrap().into(), "--corpus".into(), d("train.jsonl"),
            "--out-checkpoint".into(), d("checkpoint.json"), "--out-curve".into(), d("curve.json"),
        ],
        vec![
            "eval".into(), "--checkpoint".into(), d("checkpoint.json"), "--train-corpus".into(), d("train.jsonl"),
            "--test-corpus".into(), d("test.jsonl"), "--curve".into(), d("curve.json"), "--out".into(), d("metrics.json"),
        ],
    ];
    for args in steps {
        let out = Command::new(bin).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism", None, || {
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = root.path().join("config.json");
        let cfg = RunConfig {
            steps: 40,
            ..RunConfig::desk()
        };
        fs::write(&config, hyperalign::config::config_json(&cfg)).map_err(|e| e.to_string())?;
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        for dir in [&a, &b] {
            fs::create_dir(dir).map_err(|e| e.to_string())?;
            pipeline(dir, &config)?;
        }
        let mut f = Vec::new();
        let mut sizes = Vec::new();
        for name in ["train.jsonl", "test.jsonl", "checkpoint.json", "curve.json", "metrics.json"] {
            let x = fs::read(a.join(name)).map_err(|e| e.to_string())?;
            let y = fs::read(b.join(name)).map_err(|e| e.to_string())?;
            check(x == y, format!("{name} differs between runs"), &mut f);
            sizes.push(format!("{name} {}B", x.len()));
        }
        verdict(format!("two gen-data/train/eval runs byte-identical: {}", sizes.join(", ")), f)
    });
}
