//! Acceptance suite. Prints one PASS / FAIL / NOT RUN line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 1-3 need the real corpus (`BAVED_ROOT`) and, for 1-2, the three
//! published checkpoints under `BAVED_SER_CHECKPOINTS`. Without them they
//! are reported as NOT RUN.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use baved_ser::backbones::{
    extract_all, BackboneError, BackboneId, BackboneName, CheckpointLoader, FeatureCache, FeatureSequence, StubBackbone,
};
use baved_ser::dataset::synthetic::{write_corpus, SynthSpec};
use baved_ser::dataset::{scan_dataset, Dataset, SplitAssignment};
use baved_ser::experiment::{self, RunConfig, RunOptions};
use baved_ser::heads::{HeadConfig, HeadKind, HeadModel};
use baved_ser::metrics::{confusion_matrix, f1_from_pr, report};
use baved_ser::trainer::{train, ExperimentConfig, TrainObserver};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- corpus

fn baved_root() -> Option<PathBuf> {
    std::env::var_os("BAVED_ROOT").map(PathBuf::from).filter(|p| p.is_dir())
}

fn checkpoints_present() -> Result<(), String> {
    let loader = CheckpointLoader::from_env();
    for name in BackboneName::ALL {
        let dir = loader.checkpoint_dir(name.default_checkpoint());
        if !dir.join("config.json").is_file() {
            return Err(format!("checkpoint {} not found under {}", name.default_checkpoint(), loader.root.display()));
        }
    }
    Ok(())
}

fn real_config(root: &Path, out: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(root);
    c.output.dir = out.to_path_buf();
    c.train.seed = seed;
    c.split.seed = seed;
    c
}

fn criterion_1_and_2() -> (Outcome, Outcome) {
    let Some(root) = baved_root() else {
        let why = "BAVED_ROOT is not set to the corpus directory".to_string();
        return (Outcome::NotRun(why.clone()), Outcome::NotRun(why));
    };
    if let Err(why) = checkpoints_present() {
        return (Outcome::NotRun(why.clone()), Outcome::NotRun(why));
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut per_seed = Vec::new();
    for seed in [42u64, 43, 44] {
        let config = real_config(&root, &tmp.path().join(format!("seed{seed}")), seed);
        match experiment::compare(&config, &RunOptions::checkpoints()) {
            Ok(outcome) => per_seed.push((seed, outcome.rows)),
            Err(e) => {
                let msg = format!("compare failed: {e}");
                return (Outcome::Fail(msg.clone()), Outcome::Fail(msg));
            }
        }
    }
    let acc = |rows: &[experiment::ComparisonRow], name: BackboneName| {
        rows.iter().find(|r| r.model == name).map(|r| r.accuracy).unwrap_or(0.0)
    };
    let rows42 = &per_seed[0].1;
    let (w, hb, hl) = (
        acc(rows42, BackboneName::Wav2vec2Arabic),
        acc(rows42, BackboneName::HubertBase),
        acc(rows42, BackboneName::HubertLarge),
    );
    let c1 = check(
        w >= 0.80 && hb >= 0.72 && hl >= 0.72,
        format!("seed 42 accuracy: wav2vec2_arabic {w:.4} (>= 0.80), hubert_base {hb:.4} (>= 0.72), hubert_large {hl:.4} (>= 0.72)"),
    );
    let wins: Vec<String> = per_seed
        .iter()
        .map(|(s, rows)| {
            let (a, b) = (acc(rows, BackboneName::Wav2vec2Arabic), acc(rows, BackboneName::HubertLarge));
            format!("seed {s}: {a:.4} vs {b:.4}")
        })
        .collect();
    let n_wins = per_seed
        .iter()
        .filter(|(_, rows)| acc(rows, BackboneName::Wav2vec2Arabic) > acc(rows, BackboneName::HubertLarge))
        .count();
    let c2 = check(n_wins >= 2, format!("wav2vec2_arabic > hubert_large in {n_wins}/3 seeds ({})", wins.join("; ")));
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let Some(root) = baved_root() else {
        return Outcome::NotRun("BAVED_ROOT is not set to the corpus directory".into());
    };
    let config = RunConfig::new(&root);
    let dataset = match experiment::load_dataset(&config) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("scan failed: {e}")),
    };
    let tmp = tempfile::tempdir().unwrap();
    let (_, fp) = experiment::write_corpus_manifest(&dataset, tmp.path()).unwrap();
    let minutes = fp.total_duration_s / 60.0;
    check(
        fp.records == 1935 && fp.speakers == 61 && (minutes - 19.0).abs() <= 1.9,
        format!("{} records (1935), {} speakers (61), {minutes:.2} min (19 +/- 1.9)", fp.records, fp.speakers),
    )
}

// --------------------------------------------------------------- metrics

/// Per-class precision, recall and F1 from pair-by-pair counting, written
/// without the confusion matrix.
fn brute_force(truth: &[usize], pred: &[usize]) -> ([f64; 3], [f64; 3], [f64; 3], f64, f64) {
    let mut p = [0.0; 3];
    let mut r = [0.0; 3];
    let mut f = [0.0; 3];
    for c in 0..3 {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fneg = 0u64;
        for (&t, &y) in truth.iter().zip(pred) {
            match (t == c, y == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        p[c] = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        r[c] = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        f[c] = if p[c] + r[c] == 0.0 { 0.0 } else { 2.0 * p[c] * r[c] / (p[c] + r[c]) };
    }
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / truth.len() as f64;
    let macro_f1 = (f[0] + f[1] + f[2]) / 3.0;
    (p, r, f, macro_f1, accuracy)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=300);
        let skew: f64 = rng.random();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> =
            truth.iter().map(|&t| if rng.random::<f64>() < skew { t } else { rng.random_range(0..3) }).collect();
        let m = confusion_matrix(&truth, &pred).unwrap();
        let rep = report(&m).unwrap();
        let (p, r, f, macro_f1, accuracy) = brute_force(&truth, &pred);
        for c in 0..3 {
            let pc = &rep.per_class[c];
            for (a, b) in [(pc.precision, p[c]), (pc.recall, r[c]), (pc.f1, f[c])] {
                worst = worst.max((a - b).abs());
            }
        }
        worst = worst.max((rep.macro_f1 - macro_f1).abs()).max((rep.accuracy - accuracy).abs());
    }
    let mut fixed = f1_from_pr(1.0, 1.0) == 1.0 && f1_from_pr(0.0, 0.0) == 0.0;
    for _ in 0..10_000 {
        let p: f64 = rng.random();
        fixed &= f1_from_pr(p, p) == p;
    }
    fixed &= f1_from_pr(0.5, 0.5) == 0.5;
    check(
        worst <= 1e-12 && fixed,
        format!("1000 random instances, max deviation {worst:.3e} (<= 1e-12); fixed points exact: {fixed}"),
    )
}

// ------------------------------------------------------------- gradients

fn max_gradient_error(config: &HeadConfig) -> f64 {
    let (d, t) = (8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = Array2::<f32>::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let target = 2;
    let model = HeadModel::new(config, d, 17).unwrap();
    let loss = |m: &HeadModel| {
        let mut scratch = m.zeros_like();
        m.accumulate_gradient(frames.view(), target, None, &mut scratch, 1.0).unwrap()
    };
    let mut grads = model.zeros_like();
    model.accumulate_gradient(frames.view(), target, None, &mut grads, 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = grads.named_tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (k, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let original = probe.tensors_mut()[k][i];
            probe.tensors_mut()[k][i] = original + eps;
            let up = loss(&probe);
            probe.tensors_mut()[k][i] = original - eps;
            let down = loss(&probe);
            probe.tensors_mut()[k][i] = original;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let mlp = max_gradient_error(&HeadConfig { dropout: 0.0, ..HeadConfig::default() });
    let lstm = max_gradient_error(&HeadConfig { dropout: 0.0, ..HeadConfig::bilstm() });
    check(
        mlp <= 1e-4 && lstm <= 1e-4,
        format!("D=8 T=5, max relative error: mlp {mlp:.2e}, bilstm {lstm:.2e} (<= 1e-4)"),
    )
}

// ----------------------------------------------------------- determinism

fn synthetic_corpus(dir: &Path) -> Dataset {
    write_corpus(dir, &SynthSpec { speakers: 6, words: 4, ..Default::default() }).unwrap();
    scan_dataset(dir).unwrap()
}

fn stub_config(corpus: &Path, out: &Path, cache: &Path) -> RunConfig {
    let mut c = RunConfig::new(corpus);
    c.output.dir = out.to_path_buf();
    c.cache.root = Some(cache.to_path_buf());
    c.backbone.name = BackboneName::HubertBase;
    c
}

const COMPARED_FILES: [&str; 5] = ["split.csv", "history.csv", "metrics.json", "confusion.csv", "predictions.csv"];

fn read_all(dir: &Path) -> Vec<Vec<u8>> {
    COMPARED_FILES.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect()
}

#[derive(Default)]
struct LeakProbe {
    contributing: BTreeSet<String>,
}

impl TrainObserver for LeakProbe {
    fn on_batch(&mut self, _: usize, _: usize, ids: &[&str], _: f64) {
        self.contributing.extend(ids.iter().map(|s| s.to_string()));
    }
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let dataset = synthetic_corpus(&corpus);
    let mut details = Vec::new();
    let mut ok = true;

    for kind in [HeadKind::Mlp, HeadKind::Bilstm] {
        let mut a = stub_config(&corpus, &tmp.path().join(format!("a-{}", kind.as_str())), &tmp.path().join("cache"));
        a.head.kind = kind;
        let mut b = a.clone();
        b.output.dir = tmp.path().join(format!("b-{}", kind.as_str()));
        let first = experiment::run(&a, &RunOptions::stub()).unwrap();
        let second = experiment::run(&b, &RunOptions::stub()).unwrap();
        let same = read_all(&first.out_dir) == read_all(&second.out_dir);
        ok &= same;
        details.push(format!("{} artifacts byte-identical: {same}", kind.as_str()));
    }

    let config = stub_config(&corpus, &tmp.path().join("c"), &tmp.path().join("cache"));
    let split = experiment::make_split(&config, &dataset).unwrap();
    let mut worst = 0.0f64;
    for level in 0..3 {
        let n = dataset.records().iter().filter(|r| r.emotion_level.index() == level).count();
        let in_val = split.val_ids.iter().filter(|id| dataset.get(id).unwrap().emotion_level.index() == level).count();
        worst = worst.max((in_val as f64 - config.split.val * n as f64).abs());
    }
    ok &= worst <= 1.0;
    details.push(format!("max per-class deviation from 20% {worst:.2} records"));

    let id = BackboneId::new(BackboneName::HubertBase);
    let stub = StubBackbone::new(id.clone());
    let records: Vec<_> = dataset.records().iter().collect();
    let (features, _) = extract_all(&stub, &records, dataset.root(), None, 2).unwrap();
    let mut leaked = 0;
    for kind in [HeadKind::Mlp, HeadKind::Bilstm] {
        let experiment = config.experiment(BackboneName::HubertBase, kind);
        let mut probe = LeakProbe::default();
        train(&experiment, &dataset, &split, &features, &mut probe).unwrap();
        leaked += probe.contributing.intersection(&split.val_ids).count();
        ok &= probe.contributing == split.train_ids;
    }
    ok &= leaked == 0;
    details.push(format!("validation ids contributing gradients: {leaked}"));
    check(ok, details.join("; "))
}

// ---------------------------------------------------------------- overfit

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = synthetic_corpus(tmp.path());
    let id = BackboneId::new(BackboneName::HubertBase);
    let stub = StubBackbone::new(id.clone());
    let mut chosen = BTreeSet::new();
    for level in 0..3 {
        let quota = if level < 2 { 11 } else { 10 };
        chosen.extend(
            dataset
                .records()
                .iter()
                .filter(|r| r.emotion_level.index() == level)
                .take(quota)
                .map(|r| r.record_id.clone()),
        );
    }
    let records: Vec<_> = dataset.records().iter().filter(|r| chosen.contains(&r.record_id)).collect();
    let (features, _) = extract_all(&stub, &records, dataset.root(), None, 2).unwrap();
    let probe = SplitAssignment {
        train_ids: chosen.clone(),
        val_ids: chosen.clone(),
        seed: 0,
        ratios: (1.0, 0.0),
        speaker_disjoint: false,
    };
    let mut details = Vec::new();
    let mut ok = chosen.len() == 32;
    for head in [HeadConfig::default(), HeadConfig::bilstm()] {
        let mut config = ExperimentConfig::new(id.clone(), head.clone());
        config.train.epochs = 50;
        config.train.batch_size = 8;
        let (_, history) = train(&config, &dataset, &probe, &features, &mut baved_ser::trainer::NoopObserver).unwrap();
        let reached = history.epochs.iter().find(|r| r.val_accuracy >= 0.95).map(|r| r.epoch);
        let last = history.last().unwrap().val_accuracy;
        ok &= reached.is_some() && last >= 0.95;
        details.push(format!(
            "{}: train accuracy {last:.4} at epoch 50, first >= 0.95 at epoch {}",
            head.kind.as_str(),
            reached.map(|e| e.to_string()).unwrap_or_else(|| "never".into())
        ));
    }
    check(ok, format!("32 examples, stub features, batch 8: {}", details.join("; ")))
}

// ------------------------------------------------------------------ cache

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(tmp.path().join("cache"));
    let id = BackboneId::new(BackboneName::Wav2vec2Arabic);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut frames = Array2::from_shape_fn((37, id.width()), |_| rng.random_range(-50.0f32..50.0));
    frames[[0, 0]] = -0.0;
    frames[[0, 1]] = f32::MIN_POSITIVE / 4.0;
    frames[[0, 2]] = f32::MAX;
    let f = FeatureSequence::new(frames, id.clone(), "1/3-7-1-22-1-4.wav", id.width()).unwrap();
    cache.put(&f).unwrap();
    let back = cache.get(&f.record_id, &id).unwrap().unwrap();
    let exact = back.frames().iter().zip(f.frames()).all(|(a, b)| a.to_bits() == b.to_bits()) && back == f;

    let path = cache.entry_path(&f.record_id, &id).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let truncated = matches!(cache.get(&f.record_id, &id), Err(BackboneError::CorruptCacheEntry { .. }));
    let miss = cache.get("0/never-written.wav", &id).unwrap().is_none();

    let corpus = tmp.path().join("corpus");
    synthetic_corpus(&corpus);
    let with = stub_config(&corpus, &tmp.path().join("on"), &tmp.path().join("feature-cache"));
    let mut without = with.clone();
    without.cache.enabled = false;
    without.output.dir = tmp.path().join("off");
    experiment::run(&with, &RunOptions::stub()).unwrap();
    let warm = read_all(&with.output.dir);
    experiment::run(&with, &RunOptions::stub()).unwrap();
    let warm_again = read_all(&with.output.dir);
    experiment::run(&without, &RunOptions::stub()).unwrap();
    let uncached = read_all(&without.output.dir);
    let transparent = warm == uncached && warm == warm_again;

    check(
        exact && truncated && miss && transparent,
        format!(
            "bit-exact round trip: {exact}; truncated entry is CorruptCacheEntry: {truncated}; miss on absent id: {miss}; cache on/off artifacts identical: {transparent}"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let (c1, c2) = catch_unwind(criterion_1_and_2).unwrap_or_else(|e| {
        let msg = format!("panicked: {}", panic_message(&e));
        (Outcome::Fail(msg.clone()), Outcome::Fail(msg))
    });
    let mut results: Vec<(u32, &str, Outcome)> =
        vec![(1, "backbone accuracy thresholds", c1), (2, "backbone ordering across seeds", c2)];
    let rest: [Criterion; 6] = [
        (3, "corpus integrity", criterion_3),
        (4, "metrics oracle equivalence", criterion_4),
        (5, "gradient correctness", criterion_5),
        (6, "determinism suite", criterion_6),
        (7, "overfit sanity", criterion_7),
        (8, "cache contract", criterion_8),
    ];
    for (n, name, f) in rest {
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Outcome::Fail(format!("panicked: {}", panic_message(&e))));
        results.push((n, name, outcome));
    }
    let mut failed = 0;
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("{tag} criterion {n} ({name}): {detail}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
