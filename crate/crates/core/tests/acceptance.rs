//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! ```text
//! cargo test --release -p cdkit --test acceptance
//! ```

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cdkit::checkpoint::Checkpoint;
use cdkit::config::RunConfig;
use cdkit::data::{gen_pattern_images, read_cifar_binary, write_cifar_binary, CIFAR_GEOM};
use cdkit::eval::{acc, ari, evaluate_model, nmi, Stage};
use cdkit::gradcheck::{check_model, ModelCheckOptions};
use cdkit::losses::{cosine_similarity_matrix, nt_xent, PairIndex};
use cdkit::nn::Named;
use cdkit::seed::rng_for;
use cdkit::train::{adam_step, clip_gradients, cosine_lr, loss_csv, train_loop, AdamState, Trainer};
use cdkit::{OpKind, Tape, Tensor};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(what: &str, got: Duration, limit: Duration) -> Result<(), String> {
    ensure(got < limit, format!("{what} took {:.1}s, limit {}s", got.as_secs_f64(), limit.as_secs()))
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let r = check_model(&ModelCheckOptions::default()).map_err(|e| e.to_string())?;
    let w = r.worst().clone();
    ensure(w.max_error < 1e-4, format!("max relative error {:.3e} in {}", w.max_error, w.name))?;
    let broken = check_model(&ModelCheckOptions {
        fault: Some(OpKind::NtXent),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    ensure(!broken.passed(), "a corrupted backward rule went unnoticed")?;
    within("gradcheck", t.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "max rel. error {:.2e} over {} coordinates ({}), {:.2}s",
        w.max_error,
        r.coordinates,
        w.name,
        t.elapsed().as_secs_f64()
    ))
}

fn loss_oracles() -> Outcome {
    let tape = Tape::<f64>::new();
    let ones = tape.constant(&Tensor::full([4, 4], 1.0));
    let sim = cosine_similarity_matrix(ones).map_err(|e| e.to_string())?;
    let got = nt_xent(sim, &PairIndex::new(2), 0.5).map_err(|e| e.to_string())?.item().unwrap();
    // Every anchor sees e^{1/τ} on its positive and on two negatives.
    let expected = -(1.0f64 / 3.0).ln();
    ensure((got - expected).abs() < 1e-10, format!("all-ones NT-Xent {got}, expected {expected}"))?;

    let single = inst_loss(&vec![vec![0.3, -1.0, 2.0]], &vec![vec![1.0, 0.5, -0.2]], 0.5);
    ensure(single == 0.0, format!("N=1 instance loss {single}"))?;

    let half = vec![vec![0.5; 3]; 4];
    let e = entropy_loss(&half, &half);
    ensure((e - 1.0).abs() < 1e-9, format!("entropy of 0.5s {e}"))?;
    Ok(format!("log3 err {:.1e}, N=1 -> {single}, entropy(0.5) = {e}", (got - expected).abs()))
}

fn symmetry_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = rng_for(2024, 3);
    let mut worst = 0.0f64;
    let mut check = |a: f64, b: f64, what: &str| -> Result<(), String> {
        let d = (a - b).abs();
        worst = worst.max(d);
        ensure(d <= 1e-10, format!("{what}: {a} vs {b}"))
    };
    for _ in 0..1000 {
        let (n, d, k) = (rng.gen_range(2..7), rng.gen_range(2..6), rng.gen_range(2..7));
        let (z1, z2) = (random_rows(&mut rng, n, d), random_rows(&mut rng, n, d));
        let (y1, y2) = (random_mat(&mut rng, n, k, 0.02, 0.98), random_mat(&mut rng, n, k, 0.02, 0.98));
        let base = (inst_loss(&z1, &z2, 0.5), feat_loss(&y1, &y2, 1.0), entropy_loss(&y1, &y2));

        check(base.0, inst_loss(&z2, &z1, 0.5), "view swap, instance")?;
        check(base.1, feat_loss(&y2, &y1, 1.0), "view swap, feature")?;
        check(base.2, entropy_loss(&y2, &y1), "view swap, entropy")?;

        let p = random_perm(&mut rng, n);
        check(base.0, inst_loss(&permute_rows(&z1, &p), &permute_rows(&z2, &p), 0.5), "sample permutation")?;

        let h = random_perm(&mut rng, k);
        let (h1, h2) = (permute_cols(&y1, &h), permute_cols(&y2, &h));
        check(base.1, feat_loss(&h1, &h2, 1.0), "head permutation, feature")?;
        check(base.2, entropy_loss(&h1, &h2), "head permutation, entropy")?;

        let mut s1 = z1.clone();
        let (row, c) = (rng.gen_range(0..n), rng.gen_range(0.05..20.0));
        s1[row].iter_mut().for_each(|v| *v *= c);
        check(base.0, inst_loss(&s1, &z2, 0.5), "row scaling")?;
    }
    within("symmetry suite", t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("1000 trials, worst deviation {worst:.1e}, {:.2}s", t.elapsed().as_secs_f64()))
}

fn metric_oracles() -> Outcome {
    let mut rng = rng_for(77, 0);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let (ka, kb) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let l: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
        let (got, want) = (ari(&l, &p).unwrap(), ari_by_pairs(&l, &p));
        ensure(got == want, format!("ARI {got} vs pair count {want} for {l:?} / {p:?}"))?;
        let k = ka.max(kb);
        let (got, want) = (acc(&l, &p).unwrap(), acc_brute(&l, &p, k));
        ensure(got == want, format!("ACC {got} vs brute force {want} for {l:?} / {p:?}"))?;
    }
    let (l, p) = ([0, 0, 1, 1], [0, 1, 0, 1]);
    let got = (nmi(&l, &p).unwrap(), ari(&l, &p).unwrap(), acc(&l, &p).unwrap());
    ensure(got == (0.0, -0.5, 0.5), format!("[0,0,1,1] vs [0,1,0,1] gave {got:?}"))?;
    Ok("1000 random ARI/ACC oracle comparisons exact; NMI 0, ARI -0.5, ACC 0.5".into())
}

fn optimizer_contracts() -> Outcome {
    let base = 0.37;
    for total in [2usize, 10, 1000, 1001] {
        let (a, b) = (cosine_lr(0, total, base).unwrap(), cosine_lr(total, total, base).unwrap());
        ensure(a == base && b == 0.0, format!("endpoints {a}, {b} at T={total}"))?;
        if total % 2 == 0 {
            let m = cosine_lr(total / 2, total, base).unwrap();
            ensure(m == base / 2.0, format!("midpoint {m} at T={total}"))?;
        }
    }

    let mut rng = rng_for(5, 5);
    let mut worst_norm = 0.0f64;
    for _ in 0..200 {
        let max_norm = rng.gen_range(0.1..3.0);
        let mut params: Vec<Named<f64>> = (0..3)
            .map(|i| {
                let len = rng.gen_range(1..8);
                let mut t = Tensor::zeros([len]);
                t.set_grad((0..len).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
                Named {
                    name: format!("p{i}"),
                    tensor: t,
                }
            })
            .collect();
        clip_gradients(&mut params, max_norm).unwrap();
        let norm = params
            .iter()
            .flat_map(|p| p.tensor.grad().unwrap().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        ensure(norm <= max_norm + 1e-9, format!("post-clip norm {norm} > {max_norm}"))?;
        worst_norm = worst_norm.max(norm - max_norm);
    }

    let mut worst_adam = 0.0f64;
    for _ in 0..200 {
        let (g, p0, lr) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0), rng.gen_range(1e-4..1e-1));
        let mut t = Tensor::from_vec(vec![p0]);
        t.set_grad(vec![g]).unwrap();
        let mut params = vec![Named { name: "w".into(), tensor: t }];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, lr).unwrap();
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
        let want = p0 - lr * m_hat / (v_hat.sqrt() + eps);
        let d = (params[0].tensor.data()[0] - want).abs();
        ensure(d < 1e-12, format!("Adam first step off by {d:e}"))?;
        worst_adam = worst_adam.max(d);
    }
    Ok(format!(
        "cosine endpoints exact; clip overshoot <= {worst_norm:.1e}; Adam first-step error {worst_adam:.1e}"
    ))
}

/// Learning rate of the toy ablation runs (see README).
const TOY_LR: f64 = 3e-3;
const ABLATION_SEEDS: u64 = 5;

fn directional_ablation() -> Outcome {
    let t = Instant::now();
    let ds = toy_config(0).data.load().map_err(|e| e.to_string())?;
    let variants: [(&str, bool, bool); 3] = [("full", true, true), ("no-NE", true, false), ("instance-only", false, false)];
    let mut medians = Vec::new();
    for (name, head, ne) in variants {
        let mut nmis = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            let mut cfg = toy_config(seed);
            cfg.train.lr = TOY_LR;
            cfg.train.use_feature_head = head;
            cfg.train.use_entropy_loss = ne;
            let (ckpt, _) = train_loop(&cfg, ds.samples()).map_err(|e| e.to_string())?;
            let r = evaluate_model(&ckpt, &ds, Stage::FinalOutput, 0).map_err(|e| e.to_string())?;
            nmis.push(r.nmi);
        }
        println!("      {name:<14} final-output NMI per seed {:?}", nmis.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        medians.push(median(nmis));
    }
    let detail = format!(
        "median NMI full {:.4} / no-NE {:.4} / instance-only {:.4}, {:.0}s",
        medians[0],
        medians[1],
        medians[2],
        t.elapsed().as_secs_f64()
    );
    ensure(medians[0] > medians[1], format!("full does not beat no-NE: {detail}"))?;
    ensure(medians[0] > medians[2], format!("full does not beat instance-only: {detail}"))?;
    within("ablation", t.elapsed(), Duration::from_secs(20 * 60))?;
    Ok(detail)
}

fn determinism_and_resume() -> Outcome {
    let cfg = tiny_config(21);
    let ds = cfg.data.load().map_err(|e| e.to_string())?;
    let (a, la) = train_loop(&cfg, ds.samples()).map_err(|e| e.to_string())?;
    let (_, lb) = train_loop(&cfg, ds.samples()).map_err(|e| e.to_string())?;
    ensure(loss_csv(&la) == loss_csv(&lb), "loss CSVs differ between identical runs")?;

    let mut first = Trainer::new(&cfg, ds.samples().shape()).map_err(|e| e.to_string())?;
    let mut log = first.run(ds.samples(), Some(2)).map_err(|e| e.to_string())?;
    let restored = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).map_err(|e| e.to_string())?;
    let mut second = Trainer::from_checkpoint(restored).map_err(|e| e.to_string())?;
    log.extend(second.run(ds.samples(), Some(3)).map_err(|e| e.to_string())?);
    ensure(loss_csv(&log) == loss_csv(&la), "resumed loss log differs")?;
    ensure(second.checkpoint().to_bytes() == a.to_bytes(), "resumed checkpoint differs")?;
    Ok(format!("{} epochs; 2+3 resume bit-identical to 5 straight", cfg.train.epochs))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = gen_pattern_images(10, 4, CIFAR_GEOM, 8).map_err(|e| e.to_string())?;
    let path = dir.path().join("cifar.bin");
    write_cifar_binary(&ds, &path).map_err(|e| e.to_string())?;
    ensure(read_cifar_binary(&path).map_err(|e| e.to_string())? == ds, "CIFAR round trip changed data")?;

    let cfg = tiny_config(4);
    let train = cfg.data.load().map_err(|e| e.to_string())?;
    let (ckpt, _) = train_loop(&cfg, train.samples()).map_err(|e| e.to_string())?;
    let (p, q) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&p).map_err(|e| e.to_string())?;
    Checkpoint::load(&p).and_then(|c| c.save(&q)).map_err(|e| e.to_string())?;
    ensure(fs::read(&p).unwrap() == fs::read(&q).unwrap(), "checkpoint save/load/save not byte-identical")?;

    let resolved = cfg.resolved();
    let c = dir.path().join("config.resolved");
    resolved.save(&c).map_err(|e| e.to_string())?;
    let again = RunConfig::load(&c).map_err(|e| e.to_string())?.resolved();
    ensure(again == resolved && again.to_text() == resolved.to_text(), "config resolve is not a fixpoint")?;
    Ok(format!("CIFAR {} records, checkpoint {} bytes, config fixpoint", ds.len(), fs::metadata(&p).unwrap().len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("loss oracles", loss_oracles),
        ("loss symmetry suite", symmetry_suite),
        ("metric oracles", metric_oracles),
        ("scheduler/optimizer contracts", optimizer_contracts),
        ("directional ablation", directional_ablation),
        ("determinism and resume", determinism_and_resume),
        ("format round trips", format_round_trips),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
