//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segcore::arch::{build_residual_block, load_checkpoint, ArchitectureSpec, Family, ForwardOptions, Model};
use segcore::data::{generate_synthetic, synthetic_samples, Sample};
use segcore::gradcheck::{run_suite, GRADCHECK_THRESHOLD};
use segcore::loss::{dice_coefficient, dice_loss};
use segcore::metrics::{per_class_report, quadratic_kappa, ConfusionMatrix};
use segcore::nn::{self, max_pool2d, max_unpool2d, Mode};
use segcore::train::{evaluate, one_hot, train, TrainConfig};
use segcore::{LabelMap, Shape, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let results = match run_suite(2024) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = t.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error))
        .unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} cases, worst {} at {:.2e} (< {GRADCHECK_THRESHOLD:e}), failed {failed:?}, {:.1}s (< 120s)",
            results.len(),
            worst.name,
            worst.report.max_relative_error,
            elapsed.as_secs_f64()
        ),
    )
}

/// Loss computed pixel by pixel with explicit loops.
fn brute_force_dice_loss(probs: &Tensor, truth: &Tensor) -> f64 {
    let s = probs.shape();
    let eps = 1e-7;
    let mut total = 0.0;
    for c in 0..s.c {
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let p = probs.at(n, c, y, x);
                    let g = truth.at(n, c, y, x);
                    inter += p * g;
                    pp += p * p;
                    gg += g * g;
                }
            }
        }
        total += (2.0 * inter + eps) / (pp + gg + eps);
    }
    1.0 - total / s.c as f64
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: u8) -> LabelMap {
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let logits = Tensor::randn(Shape::new(1, 5, 8, 8), 2.0, &mut rng);
        let probs = nn::softmax_channels(&mut Tape::new(), &logits).unwrap();
        let truth = one_hot(&random_labels(&mut rng, 1, 8, 8, 5), 5).unwrap();
        let fast = dice_loss(&mut Tape::new(), &probs, &truth).unwrap().item();
        worst = worst.max((fast - brute_force_dice_loss(&probs, &truth)).abs());
    }
    let truth = one_hot(&random_labels(&mut rng, 1, 8, 8, 5), 5).unwrap();
    let perfect = dice_loss(&mut Tape::new(), &truth, &truth).unwrap().item();
    let p: Vec<f64> = (0..64).map(|i| (i < 20) as u8 as f64).collect();
    let g: Vec<f64> = (0..64).map(|i| (i >= 40) as u8 as f64).collect();
    let disjoint = dice_coefficient(&p, &g).unwrap();
    let pass = worst <= 1e-12 && perfect < 1e-6 && disjoint < 1e-6;
    outcome(
        pass,
        format!(
            "max |vectorized − brute force| {worst:.1e} (≤ 1e-12), perfect-overlap loss {perfect:.1e} (< 1e-6), disjoint dice {disjoint:.1e} (< 1e-6)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for i in 0..100 {
        let shape = Shape::new(1 + i % 2, 1 + i % 3, 2 * rng.random_range(1..6), 2 * rng.random_range(1..6));
        // Post-ReLU activations, as SegNet pools them; every fourth input is
        // integer-valued to force ties and zero plateaus.
        let x = if i % 4 == 0 {
            Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0..3) as f64)
        } else {
            Tensor::randn(shape, 1.0, &mut rng).map(|v| v.max(0.0))
        };
        let mut tape = Tape::new();
        let (y, idx) = max_pool2d(&mut tape, &x).unwrap();
        let u = max_unpool2d(&mut tape, &y, &idx, shape).unwrap();
        let (y2, _) = max_pool2d(&mut tape, &u).unwrap();
        let round_trip = y2.data() == y.data();
        let s = shape;
        let mut only_at_argmax = true;
        for n in 0..s.n {
            for c in 0..s.c {
                let recorded: Vec<(usize, usize)> = (0..s.h / 2)
                    .flat_map(|i| (0..s.w / 2).map(move |j| (i, j)))
                    .map(|(i, j)| idx.position(n, c, i, j))
                    .collect();
                for r in 0..s.h {
                    for col in 0..s.w {
                        if u.at(n, c, r, col) != 0.0 && !recorded.contains(&(r, col)) {
                            only_at_argmax = false;
                        }
                    }
                }
            }
        }
        if !(round_trip && only_at_argmax) {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{bad}/100 non-negative inputs violate pool∘unpool∘pool = pool or argmax placement"),
    )
}

fn criterion_4() -> Outcome {
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    for name in Family::NAMES {
        let spec = ArchitectureSpec::new(name.parse().unwrap());
        let model = Model::build(&spec, 4).unwrap();
        for size in [32, 64, 256] {
            let n = if size == 256 { 1 } else { 2 };
            let x = Tensor::uniform(Shape::new(n, 3, size, size), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(size as u64));
            match model.predict(&x) {
                Ok(p) if p.shape() == Shape::new(n, 5, size, size) => {
                    for b in 0..n {
                        for y in 0..size {
                            for xx in 0..size {
                                let s: f64 = (0..5).map(|c| p.at(b, c, y, xx)).sum();
                                worst = worst.max((s - 1.0).abs());
                            }
                        }
                    }
                }
                Ok(p) => problems.push(format!("{name}@{size}: output {}", p.shape())),
                Err(e) => problems.push(format!("{name}@{size}: {e}")),
            }
        }
    }
    let ladder = ArchitectureSpec::new(Family::Unet).encoder_filters();
    let res_ladder = ArchitectureSpec::new(Family::Resunet).encoder_filters();
    let expected = vec![64, 128, 256, 512, 1024];
    let pass = problems.is_empty() && worst <= 1e-9 && ladder == expected && res_ladder == expected;
    outcome(
        pass,
        format!(
            "6 families × {{32, 64, 256}}: max |Σp − 1| {worst:.1e} (≤ 1e-9), shape problems {problems:?}, U-Net ladder {ladder:?}, ResU-Net ladder {res_ladder:?}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for (i, o) in [(3, 8), (8, 8), (16, 4)] {
        let mut block = build_residual_block(i, o, &mut rng);
        block.zero_residual_path();
        let x = Tensor::randn(Shape::new(2, i, 8, 8), 1.0, &mut rng);
        for mode in [Mode::Eval, Mode::Train] {
            let out = block.forward(&mut Tape::new(), &x, mode).unwrap();
            let y1 = out.first_conv.unwrap();
            exact &= out.output.data() == y1.data();
        }
    }
    // Whole network: zeroed residual paths equal the pre-conv + first-conv network.
    let spec = ArchitectureSpec::new(Family::Resunet).with_depth(2).with_base_filters(4).with_input_size(16);
    let mut model = Model::build(&spec, 5).unwrap();
    model.zero_residual_paths();
    let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let full = model.forward(&mut tape, &b, &x, Mode::Eval).unwrap().probs;
    let short = model
        .forward_with(&mut tape, &b, &x, Mode::Eval, ForwardOptions { bypass_residual: true })
        .unwrap()
        .probs;
    let network = full.data() == short.data();
    outcome(
        exact && network,
        format!("block output == first-conv output exactly: {exact}; ResU-Net equals bypassed network: {network}"),
    )
}

fn overfit(family: Family, samples: &[Sample]) -> (f64, f64, f64, f64, Duration) {
    let spec = ArchitectureSpec::new(family).with_depth(2).with_base_filters(8).with_input_size(32);
    let mut cfg = TrainConfig::new(spec);
    cfg.epochs = 300;
    cfg.batch_size = 8;
    cfg.max_steps = Some(300);
    cfg.seed = 1;
    let t = Instant::now();
    let out = train(&cfg, samples).unwrap();
    let elapsed = t.elapsed();
    let cm = evaluate(&out.model, samples).unwrap();
    let dice = per_class_report(&cm).unwrap().mean_foreground_dice().unwrap_or(0.0);
    let kappa = quadratic_kappa(&cm).unwrap_or(f64::NEG_INFINITY);
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    (dice, kappa, first, last, elapsed)
}

fn criterion_6() -> Outcome {
    let samples: Vec<Sample> = synthetic_samples(8, 32, 11).unwrap().into_iter().map(|s| s.sample).collect();
    let (rd, rk, r0, r1, rt) = overfit(Family::Resunet, &samples);
    let (ud, uk, u0, u1, ut) = overfit(Family::Unet, &samples);
    let limit = Duration::from_secs(300);
    let pass = rd >= 0.95 && rk >= 0.9 && ud >= 0.90 && rt < limit && ut < limit && r1 < r0 && u1 < u0;
    outcome(
        pass,
        format!(
            "ResU-Net dice {rd:.4} (≥ 0.95) κ {rk:.4} (≥ 0.9) loss {r0:.3}→{r1:.4} {:.1}s; U-Net dice {ud:.4} (≥ 0.90) κ {uk:.4} loss {u0:.3}→{u1:.4} {:.1}s; 300 steps each",
            rt.as_secs_f64(),
            ut.as_secs_f64()
        ),
    )
}

/// Weighted kappa in agreement form, `(p_o − p_e) / (1 − p_e)` with
/// agreement weights `1 − (i − j)²/(K − 1)²`.
fn kappa_oracle(counts: &[u64], k: usize) -> f64 {
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let agree = |i: usize, j: usize| 1.0 - ((i as f64 - j as f64) / (k as f64 - 1.0)).powi(2);
    let row = |i: usize| (0..k).map(|j| counts[i * k + j] as f64).sum::<f64>();
    let col = |j: usize| (0..k).map(|i| counts[i * k + j] as f64).sum::<f64>();
    let mut po = 0.0;
    let mut pe = 0.0;
    for i in 0..k {
        for j in 0..k {
            po += agree(i, j) * counts[i * k + j] as f64 / total;
            pe += agree(i, j) * row(i) * col(j) / (total * total);
        }
    }
    (po - pe) / (1.0 - pe)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut undefined = 0;
    for _ in 0..1000 {
        let counts: Vec<u64> = (0..25).map(|_| rng.random_range(0..50)).collect();
        let cm = ConfusionMatrix::from_counts(5, counts.clone()).unwrap();
        match quadratic_kappa(&cm) {
            Ok(k) => worst = worst.max((k - kappa_oracle(&counts, 5)).abs()),
            Err(_) => undefined += 1,
        }
    }
    let diag = ConfusionMatrix::from_counts(5, (0..25).map(|i| if i % 6 == 0 { 10 } else { 0 }).collect()).unwrap();
    let d = quadratic_kappa(&diag).unwrap();
    let t = quadratic_kappa(&ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap()).unwrap();
    let pass = worst <= 1e-12 && undefined == 0 && d == 1.0 && (t - 1.0 / 3.0).abs() <= 1e-12;
    outcome(
        pass,
        format!("1000 random 5×5: max |κ − oracle| {worst:.1e} (≤ 1e-12); diagonal κ {d}; [[2,1],[1,2]] κ {t:.15}"),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_synthetic(&a, 12, 32, 8).unwrap();
    generate_synthetic(&b, 12, 32, 8).unwrap();
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let data_same = fa == fb && fa.len() == 25;

    let samples: Vec<Sample> = synthetic_samples(4, 32, 8).unwrap().into_iter().map(|s| s.sample).collect();
    let run = |tag: &str| {
        let spec = ArchitectureSpec::new(Family::Resunet).with_depth(2).with_base_filters(4).with_input_size(32);
        let mut cfg = TrainConfig::new(spec);
        cfg.epochs = 3;
        cfg.batch_size = 2;
        cfg.seed = 8;
        cfg.checkpoint = Some(tmp.path().join(format!("{tag}.sgck")));
        cfg.loss_log = Some(tmp.path().join(format!("{tag}.csv")));
        let out = train(&cfg, &samples).unwrap();
        let ckpt = std::fs::read(cfg.checkpoint.as_ref().unwrap()).unwrap();
        let log = std::fs::read(cfg.loss_log.as_ref().unwrap()).unwrap();
        (out.history, ckpt, log)
    };
    let (h1, c1, l1) = run("one");
    let (h2, c2, l2) = run("two");
    let bits = |h: &[segcore::train::LossRecord]| h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let train_same = bits(&h1) == bits(&h2) && c1 == c2 && l1 == l2 && h1.len() == 6;
    let reload = load_checkpoint(&tmp.path().join("one.sgck")).is_ok();
    outcome(
        data_same && train_same && reload,
        format!(
            "synthetic files identical: {data_same} ({} files); loss histories, loss CSVs and checkpoints identical: {train_same} ({} steps, {} checkpoint bytes)",
            fa.len(),
            h1.len(),
            c1.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", criterion_1),
        ("dice oracle equivalence", criterion_2),
        ("segnet index round trip", criterion_3),
        ("shape and normalization contract", criterion_4),
        ("residual identity property", criterion_5),
        ("overfit experiment", criterion_6),
        ("kappa correctness", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        println!(
            "[{}] criterion {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "[INFO] criterion 9 not reproducible at desk scale: the reported pixel-level quadratic kappa of 0.52 needs the original private histology data; criteria 1-8 stand in for it"
    );
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
