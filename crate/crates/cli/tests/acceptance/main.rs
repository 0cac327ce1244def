//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fail.

mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use lfhn_core::data::PoseRoster;
use lfhn_core::eval::{Prediction, RankTable};
use lfhn_core::gradcheck::{grad_check, layer_check, probe_batch, CheckOptions, LayerKind};
use lfhn_core::graph::{load_checkpoint, save_checkpoint, LfhnConfig, NetworkGraph};
use lfhn_core::layers::LrnAdjoint;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn lfhn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfhn"))
        .args(args)
        .env_remove("LFHN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch lfhn")
}

fn ok(args: &[&str]) -> Result<Output, String> {
    let out = lfhn(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`lfhn {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg.into()) }
}

struct EpochRow {
    loss: f64,
    acc: f64,
}

fn read_log(path: &Path) -> Result<Vec<EpochRow>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    check(lines.next() == Some("epoch,mean_loss,train_acc"), "unexpected log header")?;
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            match f[..] {
                [_, loss, acc] => Ok(EpochRow {
                    loss: loss.parse().map_err(|_| format!("bad loss in {l:?}"))?,
                    acc: acc.parse().map_err(|_| format!("bad acc in {l:?}"))?,
                }),
                _ => Err(format!("bad log line {l:?}")),
            }
        })
        .collect()
}

struct EvalRow {
    yaw: f64,
    n: usize,
    rate: Option<f64>,
}

fn read_eval(path: &Path) -> Result<(Vec<EvalRow>, f64), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    let mut mean = None;
    for l in text.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        if f[0] == "mean" {
            mean = f[3].parse().ok();
            continue;
        }
        rows.push(EvalRow {
            yaw: f[1].parse().map_err(|_| format!("bad yaw in {l:?}"))?,
            n: f[2].parse().map_err(|_| format!("bad count in {l:?}"))?,
            rate: f[3].parse().ok(),
        });
    }
    Ok((rows, mean.ok_or("missing mean row")?))
}

/// Sample-weighted accuracy over all rows, in percent.
fn pooled(rows: &[EvalRow]) -> f64 {
    let n: usize = rows.iter().map(|r| r.n).sum();
    let hits: f64 = rows.iter().map(|r| r.n as f64 * r.rate.unwrap_or(0.0) / 100.0).sum();
    100.0 * hits / n as f64
}

fn shapes() -> Outcome {
    let start = Instant::now();
    let out = ok(&["shapes"])?;
    let elapsed = start.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let got: Vec<(&str, &str)> =
        text.lines().filter_map(|l| l.split_once(' ').map(|(a, b)| (a, b.trim()))).collect();
    let want = [
        ("input", "227x227x3"),
        ("conv1", "55x55x96"),
        ("pool1", "27x27x96"),
        ("conv3", "27x27x400"),
        ("conv4", "27x27x300"),
        ("concat", "27x27x700"),
        ("conv5", "27x27x500"),
    ];
    for (name, dims) in want {
        let found = got.iter().find(|(n, _)| *n == name).map(|(_, d)| *d);
        check(found == Some(dims), format!("{name}: expected {dims}, got {found:?}"))?;
    }
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("every node extent matches ({} ms)", elapsed.as_millis()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let net = NetworkGraph::build(&LfhnConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let (x, labels) = probe_batch(&net, 2, 0);
    let opts = CheckOptions::default();
    let report = grad_check(&net, &x, &labels, &opts).map_err(|e| e.to_string())?;
    for p in net.params() {
        let e = report.entry(&p.name).ok_or(format!("{} not checked", p.name))?;
        let want = p.value.len().min(32);
        check(e.checked >= want, format!("{}: {} of {want} elements checked", p.name, e.checked))?;
    }
    let net_err = report.max_error();
    check(net_err < 1e-5, format!("network max relative error {net_err:e}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;

    let mut layer_worst = 0.0f64;
    for kind in LayerKind::ALL {
        let r = layer_check(kind, &opts, LrnAdjoint::Exact).map_err(|e| e.to_string())?;
        check(r.max_error() < 1e-6, format!("layer {}: {:e}", kind.name(), r.max_error()))?;
        layer_worst = layer_worst.max(r.max_error());
    }

    ok(&["--threads", "1", "gradcheck"])?;
    let faulty = lfhn(&["--threads", "1", "gradcheck", "--inject-fault", "lrn-cross-terms"]);
    check(faulty.status.code() == Some(1), format!("fault injection exited {:?}", faulty.status.code()))?;
    Ok(format!(
        "network {net_err:.2e} in {} ms, worst layer {layer_worst:.2e}, injected fault caught",
        elapsed.as_millis()
    ))
}

fn conv_equivalence() -> Outcome {
    let general = oracle::general_conv_cases(200, 1);
    check(general < 1e-10, format!("im2col vs naive {general:e}"))?;
    let pointwise = oracle::pointwise_cases(200, 2);
    check(pointwise < 1e-12, format!("1x1 fast path vs general {pointwise:e}"))?;
    Ok(format!("im2col vs naive {general:.1e}, 1x1 vs general {pointwise:.1e}"))
}

/// Trailing mean over up to `window` epochs.
fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn overfit(corpus: &Path, work: &Path) -> Outcome {
    let model = work.join("overfit.lfhn");
    let log = work.join("overfit.log.csv");
    let eval_csv = work.join("overfit.eval.csv");
    let start = Instant::now();
    ok(&[
        "--threads", "1", "train", "--preset", "desk", "--data", p(corpus), "--out", p(&model),
        "--log", p(&log), "--seed", "1", "--epochs", "200", "--no-augment",
        "--set", "target_accuracy=0.99",
    ])?;
    let elapsed = start.elapsed();
    let rows = read_log(&log)?;
    let last = rows.last().ok_or("empty epoch log")?;
    check(rows.len() <= 200, format!("{} epochs", rows.len()))?;
    check(last.acc >= 0.99, format!("training accuracy {:.4} after {} epochs", last.acc, rows.len()))?;
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let s = smoothed(&losses, 5);
    if let Some(i) = (1..s.len()).find(|&i| s[i] > s[i - 1]) {
        return Err(format!("smoothed loss rises at epoch {}: {} -> {}", i + 1, s[i - 1], s[i]));
    }
    check(elapsed < Duration::from_secs(15 * 60), format!("took {elapsed:?}"))?;

    ok(&["--threads", "1", "eval", "--model", p(&model), "--data", p(corpus), "--csv", p(&eval_csv)])?;
    let (bins, _) = read_eval(&eval_csv)?;
    let acc = pooled(&bins);
    check(acc >= 99.0, format!("post-training accuracy on the training set {acc:.2}%"))?;
    Ok(format!(
        "{:.2}% after {} epochs ({acc:.2}% re-evaluated), {:.0} s",
        100.0 * last.acc,
        rows.len(),
        elapsed.as_secs_f64()
    ))
}

fn train_and_eval(corpus: &Path, work: &Path, split: &str) -> Result<(Vec<EvalRow>, f64), String> {
    let model = work.join(format!("{split}.lfhn"));
    let eval_csv = work.join(format!("{split}.eval.csv"));
    ok(&[
        "--threads", "1", "train", "--preset", "desk", "--data", p(corpus), "--out", p(&model),
        "--split", split, "--seed", "1", "--epochs", "200", "--no-augment",
        "--set", "target_accuracy=0.99",
    ])?;
    ok(&[
        "--threads", "1", "eval", "--model", p(&model), "--data", p(corpus), "--split", split,
        "--csv", p(&eval_csv),
    ])?;
    read_eval(&eval_csv)
}

fn invariance(corpus: &Path, work: &Path) -> Outcome {
    let (rows, _) = train_and_eval(corpus, work, "holdout-light")?;
    let light = pooled(&rows);
    check(light >= 90.0, format!("unseen lightings {light:.2}%"))?;

    let (rows, _) = train_and_eval(corpus, work, "holdout-pose")?;
    let profile: Vec<f64> = rows.iter().filter(|r| r.yaw.abs() == 90.0).filter_map(|r| r.rate).collect();
    check(profile.len() == 2, format!("expected two profile bins, got {}", profile.len()))?;
    let mean = profile.iter().sum::<f64>() / 2.0;
    check(mean >= 70.0, format!("profile bins {profile:?}"))?;
    Ok(format!("unseen lightings {light:.2}%, profile bins {:.2}% / {:.2}%", profile[0], profile[1]))
}

fn determinism(corpus: &Path, work: &Path) -> Outcome {
    let run = |tag: &str| -> Result<(Vec<u8>, Vec<u8>, PathBuf), String> {
        let model = work.join(format!("det-{tag}.lfhn"));
        let log = work.join(format!("det-{tag}.log.csv"));
        ok(&[
            "--threads", "1", "train", "--preset", "desk", "--data", p(corpus), "--out", p(&model),
            "--log", p(&log), "--seed", "3", "--epochs", "3",
        ])?;
        let read = |f: &Path| std::fs::read(f).map_err(|e| e.to_string());
        Ok((read(&model)?, read(&log)?, model))
    };
    let (m1, l1, path) = run("a")?;
    let (m2, l2, _) = run("b")?;
    check(m1 == m2, "checkpoints differ")?;
    check(l1 == l2, "epoch logs differ")?;

    let net = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let again = work.join("det-resaved.lfhn");
    save_checkpoint(&net, &again).map_err(|e| e.to_string())?;
    check(std::fs::read(&again).map_err(|e| e.to_string())? == m1, "save after load changes bytes")?;
    Ok(format!("{} checkpoint bytes and {} log bytes identical, reload exact", m1.len(), l1.len()))
}

fn frozen_root(work: &Path) -> Outcome {
    let corpus = work.join("two-ids");
    ok(&["gen-data", "--out", p(&corpus), "--ids", "2", "--seed", "4"])?;
    let train = |epochs: &str, out: &Path| {
        ok(&[
            "--threads", "1", "train", "--preset", "desk", "--data", p(&corpus), "--out", p(out),
            "--seed", "5", "--epochs", epochs, "--freeze-root",
        ])
    };
    let initial = work.join("frozen-0.lfhn");
    let trained = work.join("frozen-50.lfhn");
    train("0", &initial)?;
    train("50", &trained)?;
    let a = load_checkpoint(&initial).map_err(|e| e.to_string())?;
    let b = load_checkpoint(&trained).map_err(|e| e.to_string())?;
    let mut changed = 0;
    for (x, y) in a.params().iter().zip(b.params()) {
        let same = x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        if x.name.starts_with("conv1.") {
            check(same, format!("{} changed", x.name))?;
        } else {
            check(!same, format!("{} did not change", x.name))?;
            changed += 1;
        }
    }
    Ok(format!("conv1 bit-identical after 50 epochs, {changed} other tensors all changed"))
}

/// Bins with a hand-chosen confusion pattern: pose `p` gets `p` misses out of
/// `8 * ids` samples, except pose 3 which is left empty.
fn fixture() -> Vec<Prediction> {
    let ids = 4;
    let mut preds = Vec::new();
    for pose in 0..13 {
        if pose == 3 {
            continue;
        }
        let mut misses = pose;
        for light in 0..8 {
            for truth in 0..ids {
                let predicted = if misses > 0 {
                    misses -= 1;
                    (truth + 1) % ids
                } else {
                    truth
                };
                preds.push(Prediction { pose, light, truth, predicted });
            }
        }
    }
    preds
}

fn evaluation() -> Outcome {
    let roster = PoseRoster::default();
    let preds = fixture();
    let t = RankTable::from_predictions(&roster, &preds).map_err(|e| e.to_string())?;
    let mut rates = Vec::new();
    for pose in 0..13 {
        let n = preds.iter().filter(|p| p.pose == pose).count();
        let correct = preds.iter().filter(|p| p.pose == pose && p.truth == p.predicted).count();
        let bin = &t.bins[pose];
        check(bin.n == n && bin.correct == correct, format!("pose {pose}: {bin:?} vs {n}/{correct}"))?;
        let want = (n > 0).then(|| correct as f64 / n as f64 * 100.0);
        check(bin.rate() == want, format!("pose {pose}: rate {:?} vs {want:?}", bin.rate()))?;
        if pose != 3 {
            check(want == Some(100.0 * (32 - pose) as f64 / 32.0), format!("pose {pose}: fixture drifted"))?;
        }
        rates.extend(want);
    }
    let want_mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let mean = t.mean().ok_or("no mean")?;
    check((mean - want_mean).abs() < 1e-9, format!("mean {mean} vs {want_mean}"))?;
    Ok(format!("13 bins match enumeration, mean {mean:.6}"))
}

fn main() {
    let work = TempDir::new().expect("temp dir");
    let corpus = work.path().join("corpus");
    let corpus_ready = ok(&["gen-data", "--out", p(&corpus), "--ids", "10", "--size", "67", "--seed", "0"]);

    let with_corpus = |f: &dyn Fn(&Path, &Path) -> Outcome| match &corpus_ready {
        Ok(_) => f(&corpus, work.path()),
        Err(e) => Err(format!("corpus generation failed: {e}")),
    };

    let criteria: Vec<Criterion> = vec![
        ("shape conformance", Box::new(shapes)),
        ("gradient correctness", Box::new(gradients)),
        ("convolution oracle equivalence", Box::new(conv_equivalence)),
        ("capacity/overfit", Box::new(|| with_corpus(&overfit))),
        ("invariance probe", Box::new(|| with_corpus(&invariance))),
        ("determinism", Box::new(|| with_corpus(&determinism))),
        ("frozen root", Box::new(|| frozen_root(work.path()))),
        ("evaluation arithmetic", Box::new(evaluation)),
    ];

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} PASS: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL: {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
