//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5, 6, 8, 9 and the real-data half of 10 need the MNIST IDX
//! files (see `scripts/fetch-mnist.sh`); they report FAIL when the data is
//! missing. The process exits 0 unless `PROTONET_ACCEPTANCE_STRICT=1`, so a
//! failing criterion is reported without masking the rest of the test run.

mod common;

use std::time::Instant;

use common::*;
use protonet::dataset::{self, Dataset};
use protonet::explain::{self, ExplanationRecord};
use protonet::loss::{self, Hyperparams, Optimizer};
use protonet::model::{self, Preset, WMode};
use protonet::tensor::{self, Tensor};
use protonet::train::{self, AugmentSettings, EpochMetrics, Splits, TrainOptions, TrainState};
use rand::Rng;

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((id.to_string(), pass));
    }
}

type GradCheck = (&'static str, fn(u64) -> f64);

fn criterion_1(rep: &mut Report) {
    let started = Instant::now();
    let checks: [GradCheck; 7] = [
        ("conv", gc_conv),
        ("deconv", gc_deconv),
        ("activations", gc_activations),
        ("softmax+ce", gc_softmax_ce),
        ("pairwise", gc_pairwise),
        ("r1/r2", gc_r1_r2),
        ("matmul", gc_matmul),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, f) in checks {
        worst.push((name.into(), (0..20).map(f).fold(0.0, f64::max)));
    }
    for cfg in [tiny_same(), tiny_valid()] {
        let e = (0..20).map(|s| gc_total_loss(&cfg, s).0).fold(0.0, f64::max);
        worst.push((format!("total loss ({})", cfg.name), e));
    }
    let secs = started.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    rep.record(
        "1",
        max < 1e-5 && secs < 60.0,
        format!(
            "max relative error {max:.2e} over 20 seeds [{}] in {secs:.1}s (need < 1e-5, < 60s)",
            parts.join(", ")
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    let mut worst = [0.0f64; 5];
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let q = r.random_range(1..6);
        let (b, m) = (r.random_range(1..10), r.random_range(1..8));
        let z = uniform(&[b, q], -2.0, 2.0, &mut r);
        let p = uniform(&[m, q], -2.0, 2.0, &mut r);
        worst[0] = worst[0].max((loss::r1(&p, &z).unwrap() - brute_r1(&p, &z)).abs());
        worst[1] = worst[1].max((loss::r2(&p, &z).unwrap() - brute_r2(&p, &z)).abs());
        let d = tensor::pairwise_sq_dist(&z, &p).unwrap();
        for (a, o) in d.data().iter().zip(naive_sq_dist(&z, &p).concat()) {
            worst[2] = worst[2].max((a - o).abs());
        }
        let k = r.random_range(2..11);
        let probs = tensor::softmax_rows(&uniform(&[b, k], -4.0, 4.0, &mut r)).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        worst[3] =
            worst[3].max((loss::cross_entropy(&probs, &labels).unwrap() - naive_cross_entropy(&probs, &labels)).abs());
        let shape = [b, r.random_range(1..6), r.random_range(1..6), r.random_range(1..4)];
        let x = uniform(&shape, 0.0, 1.0, &mut r);
        let y = uniform(&shape, 0.0, 1.0, &mut r);
        worst[4] = worst[4].max((loss::reconstruction_loss(&x, &y).unwrap() - naive_reconstruction(&x, &y)).abs());
    }
    let names = ["r1", "r2", "pairwise", "cross_entropy", "reconstruction"];
    let parts: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    rep.record(
        "2",
        worst.iter().all(|&w| w < 1e-10),
        format!(
            "max |impl - oracle| over 100 instances: {} (need < 1e-10)",
            parts.join(", ")
        ),
    );
}

fn criterion_3(rep: &mut Report) {
    let mnist = model::preset(Preset::Mnist);
    let car = model::preset(Preset::Car);
    let ms = mnist.encoder_shapes().unwrap();
    let cs = car.encoder_shapes().unwrap();
    let ok = ms == vec![[14, 14, 32], [7, 7, 32], [4, 4, 32], [2, 2, 10]]
        && mnist.latent_dim() == 40
        && cs == vec![[30, 30, 32], [13, 13, 10]];
    rep.record(
        "3",
        ok,
        format!(
            "mnist {ms:?} q={}; car {cs:?} q={}",
            mnist.latent_dim(),
            car.latent_dim()
        ),
    );
}

fn criterion_4(rep: &mut Report) {
    let mut cfg = model::preset(Preset::Mnist).with_w_mode(WMode::NegativeIdentity);
    cfg.n_prototypes = cfg.n_classes;
    let params = model::init_params(&cfg, 4).unwrap();
    let mut r = rng(4);
    let z = uniform(&[1000, cfg.latent_dim()], 0.0, 1.0, &mut r);
    let (_, _, probs) = model::classify_codes(&params, &cfg, &z).unwrap();
    let predicted = model::predictions(&probs);
    let agree = (0..1000)
        .filter(|&i| {
            let d: Vec<f64> = (0..cfg.n_prototypes)
                .map(|j| {
                    z.row(i)
                        .iter()
                        .zip(params.prototypes.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            let nearest = (0..d.len()).fold(0, |b, j| if d[j] < d[b] { j } else { b });
            nearest == predicted[i]
        })
        .count();
    rep.record(
        "4",
        agree == 1000 && cfg.n_prototypes == cfg.n_classes,
        format!(
            "m=K={}, W=-I: {agree}/1000 predictions equal the nearest prototype",
            cfg.n_classes
        ),
    );
}

struct DeskRun {
    epochs: Vec<EpochMetrics>,
    state: TrainState,
    test_accuracy: f64,
    seconds: f64,
}

fn desk_hyper(lambda_1: f64, lambda_2: f64) -> Hyperparams {
    Hyperparams {
        lambda_1,
        lambda_2,
        learning_rate: 0.005,
        batch_size: 25,
        epochs: 30,
        optimizer: Optimizer::Adam,
        ..Hyperparams::default()
    }
}

fn desk_run(cfg: &model::ModelConfig, train_set: &Dataset, test: &Dataset, hyper: Hyperparams, label: &str) -> DeskRun {
    let mut opts = TrainOptions::new(hyper);
    opts.augment = Some(AugmentSettings::default());
    opts.eval_train = false;
    let started = Instant::now();
    let (state, metrics) = train::train_loop(
        cfg,
        &opts,
        Splits {
            train: train_set,
            validation: None,
        },
        7,
        None,
        |m, _| {
            let l = &m.loss;
            println!(
                "  [{label}] epoch {:>2}  L {:.4}  E {:.4}  R {:.3}  R1 {:.4}  R2 {:.4}  {:.1}s",
                m.epoch, l.total, l.cross_entropy, l.reconstruction, l.proto_to_data, l.data_to_proto, m.seconds
            );
            Ok(())
        },
    )
    .expect("training runs");
    let test_accuracy = train::evaluate(&state.params, cfg, test).unwrap();
    DeskRun {
        epochs: metrics.epochs,
        state,
        test_accuracy,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn criterion_5(rep: &mut Report, run: &DeskRun) {
    let l: Vec<f64> = run.epochs.iter().take(5).map(|e| e.loss.total).collect();
    let monotone = l.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    let ok = run.test_accuracy >= 0.95 && monotone && l.len() == 5;
    let shown: Vec<String> = l.iter().map(|v| format!("{v:.3}")).collect();
    rep.record(
        "5",
        ok,
        format!(
            "test accuracy {:.4} (need >= 0.95); epoch loss 1-5 [{}] non-increasing within 5%: {monotone}; {:.0}s",
            run.test_accuracy,
            shown.join(", "),
            run.seconds
        ),
    );
}

fn criterion_6(rep: &mut Report, reg: &DeskRun, ablated: &DeskRun) {
    let first = &reg.epochs[0].loss;
    let last = &reg.epochs.last().unwrap().loss;
    let r1_ratio = last.proto_to_data / first.proto_to_data;
    let r2_ratio = last.data_to_proto / first.data_to_proto;
    let ab = ablated.epochs.last().unwrap().loss.proto_to_data;
    let ab_ratio = ab / last.proto_to_data;
    let ok = r1_ratio < 0.25 && r2_ratio < 0.25 && ab_ratio >= 2.0;
    rep.record(
        "6",
        ok,
        format!(
            "R1 {:.4} -> {:.4} (ratio {r1_ratio:.3}, need < 0.25); R2 {:.4} -> {:.4} (ratio {r2_ratio:.3}, need < 0.25); \
             lambda1=lambda2=0 final R1 {ab:.4} = {ab_ratio:.2}x regularized (need >= 2)",
            first.proto_to_data, last.proto_to_data, first.data_to_proto, last.data_to_proto
        ),
    );
}

fn criterion_7(rep: &mut Report) {
    let cfg = model::preset(Preset::Mnist);
    let d = synthetic_dataset(60, 28, 28, 10, 77);
    let dir = tempfile::tempdir().unwrap();
    let mut opts = TrainOptions::new(Hyperparams {
        learning_rate: 0.005,
        batch_size: 25,
        epochs: 3,
        optimizer: Optimizer::Adam,
        ..Hyperparams::default()
    });
    opts.augment = Some(AugmentSettings::default());
    opts.checkpoint_every = 1;
    let splits = Splits {
        train: &d,
        validation: None,
    };
    let run = |out: Option<std::path::PathBuf>, resume: Option<TrainState>| {
        let o = TrainOptions {
            out_dir: out,
            ..opts.clone()
        };
        train::train_loop(&cfg, &o, splits, 31, resume, |_, _| Ok(()))
            .unwrap()
            .0
    };
    let a = run(Some(dir.path().to_path_buf()), None);
    let b = run(None, None);
    let ck = train::load_checkpoint_for(&dir.path().join("epoch-0001.pnck"), &cfg).unwrap();
    let resumed = run(None, Some(ck.state));
    let last = train::load_checkpoint_for(&dir.path().join("last.pnck"), &cfg).unwrap();
    let ok = a == b && resumed == a && last.state == a;
    rep.record(
        "7",
        ok,
        format!(
            "two fixed-seed runs identical: {}; resumed from epoch 1 equals uninterrupted: {}; checkpoint round trip exact: {}",
            a == b,
            resumed == a,
            last.state == a
        ),
    );
}

fn criterion_8(rep: &mut Report, run: &DeskRun, cfg: &model::ModelConfig, train_set: &Dataset) {
    let err = train::mean_reconstruction_error(&run.state.params, cfg, train_set).unwrap();
    let gallery = explain::reconstruction_gallery(&run.state.params, cfg, train_set, 10, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = gallery.write(dir.path(), explain::ImageKind::Png).is_ok();
    let (lo, hi) = gallery.grid.min_max();
    let ok = err.is_finite() && err < 30.0 && lo >= 0.0 && hi <= 1.0 && written;
    rep.record(
        "8",
        ok,
        format!("mean reconstruction error {err:.3} on undeformed training images (need < 30; reference 4.22); gallery pixel range [{lo:.4}, {hi:.4}]"),
    );
}

fn criterion_9(rep: &mut Report, run: &DeskRun, cfg: &model::ModelConfig, test: &Dataset) {
    // the checkpoint alone must carry everything the explanation uses
    let bytes = train::encode_checkpoint(&run.state, cfg, &desk_hyper(0.05, 0.05));
    let ck = train::decode_checkpoint(&bytes).unwrap();
    let params = &ck.state.params;
    let mut r = rng(9);
    let picks: Vec<usize> = (0..50).map(|_| r.random_range(0..test.len())).collect();
    let evaluated = train::predict_dataset(params, &ck.model, &test.subset(&picks, "picked")).unwrap();
    let (k, m) = (ck.model.n_classes, ck.model.n_prototypes);
    let mut worst = 0.0f64;
    let mut same_class = 0;
    for (n, &i) in picks.iter().enumerate() {
        let image = Tensor::new(cfg.input_shape.to_vec(), test.images.row(i).to_vec()).unwrap();
        let e = explain::explain_input(params, &ck.model, &image).unwrap();
        let json = serde_json::to_string(&e.record(Vec::new())).unwrap();
        let rec: ExplanationRecord = serde_json::from_str(&json).unwrap();
        let logits: Vec<f64> = (0..k)
            .map(|c| {
                (0..m)
                    .map(|j| params.weights.data()[c * m + j] * rec.distances[j])
                    .sum()
            })
            .collect();
        for (a, b) in rec.probabilities.iter().zip(naive_softmax(&logits)) {
            worst = worst.max((a - b).abs());
        }
        same_class += usize::from(rec.predicted == evaluated[n]);
    }
    rep.record(
        "9",
        worst <= 1e-12 && same_class == 50,
        format!("50 test images: max |json prob - softmax(W d)| {worst:.1e} (need <= 1e-12); predicted == evaluate path for {same_class}/50"),
    );
}

fn criterion_10(rep: &mut Report, mnist: Option<&(Dataset, Dataset, Dataset)>) {
    let dir = tempfile::tempdir().unwrap();
    let mut exact = true;
    for seed in 0..20 {
        let d = synthetic_dataset(17, 9, 5, 10, seed);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        dataset::write_idx(&d, &ip, &lp).unwrap();
        let back = dataset::load_idx(&ip, &lp).unwrap();
        exact &= back.images == d.images && back.labels == d.labels;
    }
    match mnist {
        Some((tr, va, te)) => {
            let sizes = (tr.len(), va.len(), te.len());
            rep.record(
                "10",
                exact && sizes == (55000, 5000, 10000),
                format!("synthetic write->load bit-exact: {exact}; MNIST train/validation/test = {sizes:?}"),
            );
        }
        None => rep.record(
            "10",
            false,
            format!("synthetic write->load bit-exact: {exact}; MNIST files missing"),
        ),
    }
}

/// Runs one criterion; a panic inside it is reported as that criterion's
/// failure instead of aborting the suite.
fn guarded(rep: &mut Report, ids: &[&str], f: impl FnOnce(&mut Report)) {
    let mut inner = Report { results: Vec::new() };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut inner)));
    rep.results.append(&mut inner.results);
    if let Err(e) = outcome {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        for id in ids {
            if !rep.results.iter().any(|(r, _)| r == id) {
                rep.record(id, false, format!("panicked: {msg}"));
            }
        }
    }
}

fn main() {
    let mut rep = Report { results: Vec::new() };
    guarded(&mut rep, &["1"], criterion_1);
    guarded(&mut rep, &["2"], criterion_2);
    guarded(&mut rep, &["3"], criterion_3);
    guarded(&mut rep, &["4"], criterion_4);
    guarded(&mut rep, &["7"], criterion_7);

    let mnist = mnist_dir().map(|dir| dataset::load_mnist_splits(&dir, 5000).expect("readable MNIST files"));
    guarded(&mut rep, &["10"], |r| criterion_10(r, mnist.as_ref()));
    match &mnist {
        Some((full_train, _, full_test)) => {
            let cfg = model::preset(Preset::Mnist);
            let train_set = full_train.take(5000);
            let test = full_test.take(1000);
            println!("  desk run: 5000 train / 1000 test, elastic on, adam lr 0.005, batch 25, 30 epochs, seed 7");
            guarded(&mut rep, &["5", "6", "8", "9"], |rep| {
                let reg = desk_run(&cfg, &train_set, &test, desk_hyper(0.05, 0.05), "regularized");
                criterion_5(rep, &reg);
                criterion_8(rep, &reg, &cfg, &train_set);
                criterion_9(rep, &reg, &cfg, &test);
                let ablated = desk_run(&cfg, &train_set, &test, desk_hyper(0.0, 0.0), "lambda1=lambda2=0");
                criterion_6(rep, &reg, &ablated);
            });
        }
        None => {
            for id in ["5", "6", "8", "9"] {
                rep.record(
                    id,
                    false,
                    "MNIST IDX files not found: run scripts/fetch-mnist.sh or set PROTONET_MNIST_DIR".into(),
                );
            }
        }
    }

    rep.results.sort_by_key(|(id, _)| id.parse::<u32>().unwrap_or(0));
    let passed = rep.results.iter().filter(|r| r.1).count();
    let failed: Vec<&str> = rep.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("acceptance: {passed}/{} criteria passed", rep.results.len());
    if !failed.is_empty() {
        println!("acceptance: failing criteria: {}", failed.join(", "));
        if std::env::var("PROTONET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
