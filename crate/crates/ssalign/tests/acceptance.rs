//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ssalign_core::align::{
    attention_weights, compute_prototypes, evaluate, ict_pair_loss, statistical_loss, BatchLayout,
    BatchSnippets, ClassMeans, Detached, ObjectiveConfig, Prototypes, StatMetric, Term, TermWeights,
};
use ssalign_core::data::{
    generate_synthetic_benchmark, DomainDataset, ShiftSpec, SyntheticBenchmark, SyntheticSpec,
    DEFAULT_BIAS_SCALE, DEFAULT_FRAMES_PER_VIDEO,
};
use ssalign_core::diffkernel::{check_gradients, entropy, kl_divergence, softmax_row, DualValue};
use ssalign_core::model::{backward_batch, forward_batch, ModelDims, ModelParams};
use ssalign_core::sampler::{sample_target_snippets, snippet_count, EpochSamplingState};
use ssalign_core::trainer::{
    assemble_batch, plan_epoch, stream_rng, train, BatchPlan, TrainConfig,
};
use ssalign_core::Tensor2;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn toy_bench(n_source: usize, k_shot: usize, frames: usize, seed: u64) -> SyntheticBenchmark {
    generate_synthetic_benchmark(&SyntheticSpec {
        num_classes: 2,
        feature_dim: 4,
        n_source,
        k_shot,
        n_test: 4,
        frames_per_video: frames,
        shift: ShiftSpec {
            rotation_angle: 0.8,
            bias_scale: 1.0,
            noise_std: 0.3,
            seed,
        },
    })
    .unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        m: 4,
        m_hat: 4,
        r: 2,
        hidden: 8,
        embed: 4,
        ..TrainConfig::default()
    }
}

/// Central-difference step. At 1e-6 round-off alone reaches ~5e-10 on
/// gradients that are exactly zero (CORAL ignores a shift shared by all
/// source rows), which is above the checker's absolute floor.
const FD_STEP: f64 = 1e-5;

fn gradients() -> Outcome {
    let bench = toy_bench(2, 1, 16, 11);
    let target = DomainDataset {
        videos: bench.target_train.videos[..1].to_vec(),
        ..bench.target_train.clone()
    };
    let config = toy_config();
    let dims = config.check_data(&bench.source, &target).map_err(|e| e.to_string())?;
    let params = ModelParams::init(dims, 3).unwrap();
    let plan = BatchPlan {
        source: vec![0, 1],
        target: vec![0],
    };
    let mut sample_rng = stream_rng(5, 1);
    let mut state = EpochSamplingState::new();
    let batch = assemble_batch(&bench.source, &target, &plan, &config, &mut state, &mut sample_rng).unwrap();
    let fwd = forward_batch(&params, &batch.input).unwrap();
    let labels: Vec<usize> = (0..batch.layout.len()).map(|i| batch.layout.label(i)).collect();
    let mut means = compute_prototypes(&fwd.features, &labels, dims.classes).unwrap();
    means.means.scale(0.5);
    let mut protos = Prototypes::new(dims.classes, dims.embed, config.lambda_p).unwrap();
    protos.initialize(&means).unwrap();

    let mut worst = 0.0f64;
    for metric in [StatMetric::Mmd, StatMetric::Coral] {
        let cfg = ObjectiveConfig {
            stat_metric: Some(metric),
            ..ObjectiveConfig::default()
        };
        let full = TermWeights::from_config(&cfg, true);
        let snippets = BatchSnippets::new(batch.layout.clone(), fwd.features.clone(), fwd.probs.clone()).unwrap();
        let detached = Detached::compute(&snippets, &cfg, &full, &mut stream_rng(5, 2)).unwrap();
        let mut cases: Vec<(String, TermWeights)> = [Term::Pred, Term::Proto, Term::Cross, Term::SnDist, Term::SnStat]
            .iter()
            .map(|&t| (format!("{t:?}"), TermWeights::only(t)))
            .collect();
        cases.push(("total".into(), full));
        for (name, w) in cases {
            let report = check_gradients(
                |blocks| {
                    let p = ModelParams::from_blocks(dims, blocks.to_vec())?;
                    let fwd = forward_batch(&p, &batch.input)?;
                    let r = evaluate(&p, &fwd, &batch.layout, &protos, &detached, &w)?;
                    Ok(DualValue {
                        value: r.total,
                        grads: r.grads,
                    })
                },
                params.blocks(),
                FD_STEP,
                1e-4,
            )
            .map_err(|e| format!("{metric} {name}: {e}"))?;
            worst = worst.max(report.max_rel_error());
            check(report.passed(), format!("{metric} {name}: {:?}", report.flagged))?;
        }
    }
    Ok(format!("6 objectives x 2 metrics, worst relative error {worst:.2e}"))
}

fn identities() -> Outcome {
    let p = softmax_row(&[0.3, -1.2, 2.0]);
    let kl = kl_divergence(&p, &p).unwrap();
    check(kl.abs() <= 1e-12, format!("KL(p,p) = {kl}"))?;

    let bench = toy_bench(6, 2, 16, 2);
    let x = bench.source.videos[0].frames.clone();
    for metric in [StatMetric::Mmd, StatMetric::Coral] {
        let v = statistical_loss(&x, &x, metric, None).unwrap().value;
        check(v.abs() <= 1e-9, format!("{metric} on identical batches = {v}"))?;
    }

    let probs = Tensor2::from_rows(&[
        softmax_row(&[1.0, 0.0]),
        softmax_row(&[0.2, 0.9]),
        softmax_row(&[2.0, -1.0]),
        softmax_row(&[-0.5, 0.5]),
        softmax_row(&[0.0, 3.0]),
        softmax_row(&[1.5, 1.4]),
        softmax_row(&[-2.0, 0.1]),
    ])
    .unwrap();
    let layout = BatchLayout {
        source_labels: vec![0],
        target_labels: vec![1, 0],
        r: 3,
    };
    let batch = BatchSnippets::new(layout, Tensor2::zeros(7, 2), probs).unwrap();
    let w = attention_weights(&batch).unwrap();
    for j in 0..2 {
        let mean = w.group(j).iter().sum::<f64>() / 3.0;
        check((mean - 1.0).abs() <= 1e-9, format!("attention group {j} mean {mean}"))?;
    }

    let prev = ClassMeans {
        means: Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
        counts: vec![1, 1],
    };
    let cur = ClassMeans {
        means: Tensor2::from_rows(&[[-0.1, 0.7], [5.5, -2.25]]).unwrap(),
        counts: vec![2, 3],
    };
    for (lambda, expect) in [(1.0, &cur), (0.0, &prev)] {
        let mut pr = Prototypes::new(2, 2, lambda).unwrap();
        pr.initialize(&prev).unwrap();
        pr.update(&cur).unwrap();
        check(pr.centers() == &expect.means, format!("EMA endpoint lambda_p = {lambda}"))?;
    }

    let dims = ModelDims {
        snippet_len: 4,
        frame_dim: 4,
        hidden: 8,
        embed: 4,
        classes: 2,
    };
    let params = ModelParams::init(dims, 1).unwrap();
    let input = Tensor2::new(2, 16, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let fwd = forward_batch(&params, &input).unwrap();
    let (f_a, o_a) = (fwd.features.row(0), fwd.probs.row(0));
    let out = ict_pair_loss(f_a, o_a, fwd.features.row(1), fwd.probs.row(1), 1.0, &params).unwrap();
    let h = entropy(o_a);
    check((out.value - h).abs() <= 1e-9, format!("ICT at lambda 1 = {} vs entropy {h}", out.value))?;
    Ok("KL, stat, attention, EMA endpoints and ICT identities hold".into())
}

/// Whether some `r` of `starts` are pairwise at least `gap` apart.
fn admits(starts: &[usize], r: usize, gap: usize) -> bool {
    fn go(starts: &[usize], r: usize, gap: usize, last: Option<usize>) -> bool {
        if r == 0 {
            return true;
        }
        starts.iter().enumerate().any(|(i, &s)| {
            last.is_none_or(|l| s >= l + gap) && go(&starts[i + 1..], r - 1, gap, Some(s))
        })
    }
    go(starts, r, gap, None)
}

fn sampler() -> Outcome {
    let (n, m, gap, r) = (30, 8, 8, 3);
    let mut rng = stream_rng(17, 1);
    let mut state = EpochSamplingState::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let mut resets = 0;
    for draw in 0..10_000 {
        if draw % 6 == 0 {
            state.reset_epoch();
            used.clear();
        }
        let snippets = sample_target_snippets(0, n, r, m, gap, &mut state, &mut rng).unwrap();
        check(snippets.len() == r, "wrong snippet count")?;
        let mut starts: Vec<usize> = snippets.iter().map(|s| s.start).collect();
        starts.sort();
        for s in &snippets {
            check(s.length == m && s.end() <= n, format!("draw {draw}: {s:?} out of bounds"))?;
        }
        for w in starts.windows(2) {
            check(w[1] - w[0] >= gap, format!("draw {draw}: starts {starts:?} closer than {gap}"))?;
        }
        let unused: Vec<usize> = (0..=n - m).filter(|s| !used.contains(s)).collect();
        if admits(&unused, r, gap) {
            check(
                starts.iter().all(|s| !used.contains(s)),
                format!("draw {draw}: repeated a start before exhaustion"),
            )?;
            used.extend(&starts);
        } else {
            resets += 1;
            used = starts.into_iter().collect();
        }
    }
    let count = snippet_count(300, 8).unwrap();
    check(count == 293, format!("snippet_count(300, 8) = {count}"))?;
    Ok(format!("10000 triples in bounds and gapped, {resets} exhaustion resets, 293 snippets of 300 frames"))
}

/// Cross-entropy SGD written against the model's forward and backward passes
/// only, fed by the same epoch plans and snippets as the trainer.
fn standalone_baseline(bench: &SyntheticBenchmark, config: &TrainConfig, epochs: usize) -> Vec<ModelParams> {
    let (source, target) = (&bench.source, &bench.target_train);
    let dims = config.check_data(source, target).unwrap();
    let mut params = ModelParams::init(dims, config.seed).unwrap();
    let mut velocity: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.data().len()]).collect();
    let mut rng = stream_rng(config.seed, 1);
    let mut state = EpochSamplingState::new();
    let mut trajectory = Vec::new();
    for _ in 0..epochs {
        let plans = plan_epoch(source.len(), target.len(), config.batch_source, config.batch_target, &mut rng).unwrap();
        for plan in &plans {
            let batch = assemble_batch(source, target, plan, config, &mut state, &mut rng).unwrap();
            let fwd = forward_batch(&params, &batch.input).unwrap();
            let ns = batch.layout.num_source();
            let nt = batch.layout.num_target();
            let mut d_logits = Tensor2::zeros(fwd.probs.rows(), fwd.probs.cols());
            for row in 0..batch.layout.len() {
                let label = batch.layout.label(row);
                let count = if row < ns { ns } else { nt } as f64;
                for (c, (o, &p)) in d_logits.row_mut(row).iter_mut().zip(fwd.probs.row(row)).enumerate() {
                    let y = if c == label { 1.0 } else { 0.0 };
                    *o = (p - y) / count;
                }
            }
            let d_features = Tensor2::zeros(fwd.features.rows(), fwd.features.cols());
            let grads = backward_batch(&params, &fwd, &d_features, &d_logits).unwrap();
            for ((theta, g), v) in params.blocks_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = config.momentum * *vi + (gi + config.weight_decay * *t);
                    *t -= config.lr * *vi;
                }
            }
        }
        state.reset_epoch();
        trajectory.push(params.clone());
    }
    trajectory
}

fn baseline_oracle() -> Outcome {
    let bench = toy_bench(8, 2, 16, 4);
    let config = TrainConfig {
        batch_source: 3,
        batch_target: 2,
        seed: 9,
        ..TrainConfig {
            m: 4,
            m_hat: 4,
            r: 2,
            hidden: 8,
            embed: 4,
            ..TrainConfig::baseline()
        }
    };
    let oracle = standalone_baseline(&bench, &config, 3);
    for (e, expect) in oracle.iter().enumerate() {
        let cfg = TrainConfig { epochs: e + 1, ..config };
        let (params, _) = train(&bench.source, &bench.target_train, &bench.target_test, &cfg).map_err(|e| e.to_string())?;
        for (name, (a, b)) in ["w1", "b1", "w2", "b2", "wc", "bc"].iter().zip(params.blocks().iter().zip(expect.blocks())) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            check(same, format!("epoch {}: block {name} differs", e + 1))?;
        }
    }
    Ok("trainer matches the standalone cross-entropy trainer bit for bit over 3 epochs".into())
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Benchmark {
    full: Vec<f64>,
    baseline: Vec<f64>,
    no_ssa: Vec<f64>,
    coral: Vec<f64>,
    seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_benchmark() -> Result<Benchmark, String> {
    let start = Instant::now();
    let mut out = Benchmark {
        full: vec![],
        baseline: vec![],
        no_ssa: vec![],
        coral: vec![],
        seconds: 0.0,
    };
    for seed in SEEDS {
        let bench = generate_synthetic_benchmark(&SyntheticSpec {
            num_classes: 8,
            feature_dim: 16,
            n_source: 800,
            k_shot: 5,
            n_test: 400,
            frames_per_video: DEFAULT_FRAMES_PER_VIDEO,
            shift: ShiftSpec {
                rotation_angle: 0.8,
                bias_scale: DEFAULT_BIAS_SCALE,
                noise_std: 0.3,
                seed,
            },
        })
        .map_err(|e| e.to_string())?;
        let full = TrainConfig { seed, ..TrainConfig::default() };
        let runs = [
            (full, &mut out.full),
            (TrainConfig { seed, ..TrainConfig::baseline() }, &mut out.baseline),
            (TrainConfig { enable_ssa: false, ..full }, &mut out.no_ssa),
            (TrainConfig { stat_metric: Some(StatMetric::Coral), ..full }, &mut out.coral),
        ];
        for (config, sink) in runs {
            let (_, log) = train(&bench.source, &bench.target_train, &bench.target_test, &config)
                .map_err(|e| e.to_string())?;
            sink.push(log.final_accuracy().unwrap_or(0.0));
        }
    }
    out.seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

fn adaptation_gain(b: &Benchmark) -> Outcome {
    let gain = mean(&b.full) - mean(&b.baseline);
    let wins = b.full.iter().zip(&b.baseline).filter(|(f, s)| f > s).count();
    let detail = format!(
        "full {:.4} vs baseline {:.4}: gain {:+.2} points, {wins}/5 wins, {:.0}s for 20 runs",
        mean(&b.full),
        mean(&b.baseline),
        100.0 * gain,
        b.seconds
    );
    check(gain >= 0.03 && wins >= 4 && b.seconds < 300.0, detail.clone())?;
    Ok(detail)
}

fn ablation_direction(b: &Benchmark) -> Outcome {
    let detail = format!("no-ssa {:.4} vs full {:.4}", mean(&b.no_ssa), mean(&b.full));
    check(mean(&b.no_ssa) <= mean(&b.full), detail.clone())?;
    Ok(detail)
}

fn metric_insensitivity(b: &Benchmark) -> Outcome {
    let diff = (mean(&b.full) - mean(&b.coral)).abs();
    let detail = format!(
        "mmd {:.4} vs coral {:.4}: {:.2} points apart",
        mean(&b.full),
        mean(&b.coral),
        100.0 * diff
    );
    check(diff <= 0.03, detail.clone())?;
    Ok(detail)
}

fn ssalign(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssalign"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |p: &str| tmp.path().join(p).display().to_string();
    let (data, run) = (dir("data"), dir("run"));
    ssalign(&[
        "generate", "--classes", "3", "--dim", "6", "--k-shot", "2", "--n-source", "30", "--n-test", "12",
        "--frames", "32", "--seed", "5", "--out", &data,
    ])?;
    let train_args = [
        "train", "--data", &data, "--out", &run, "--epochs", "4", "--e-warmup", "1", "--seed", "3",
    ];
    let ablate_record = dir("ablate.json");
    let ablate_args = [
        "ablate", "--data", &data, "--epochs", "2", "--seeds", "1,2", "--out", &ablate_record,
    ];
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    let mut records = Vec::new();
    for _ in 0..2 {
        ssalign(&train_args)?;
        ssalign(&ablate_args)?;
        records.push((read(&Path::new(&run).join("metrics.json"))?, read(Path::new(&ablate_record))?));
    }
    check(records[0].0 == records[1].0, "train metrics differ between identical runs")?;
    check(records[0].1 == records[1].1, "ablation metrics differ between identical runs")?;
    Ok("train and ablate metrics records are byte-identical on repeat".into())
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "loss identities", &mut identities);
    report(3, "sampler contract", &mut sampler);
    report(4, "baseline equivalence", &mut baseline_oracle);
    let bench = run_benchmark();
    report(5, "adaptation gain", &mut || adaptation_gain(bench.as_ref().map_err(Clone::clone)?));
    report(6, "ablation direction", &mut || ablation_direction(bench.as_ref().map_err(Clone::clone)?));
    report(7, "metric insensitivity", &mut || metric_insensitivity(bench.as_ref().map_err(Clone::clone)?));
    report(8, "determinism", &mut determinism);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
