//! Acceptance criteria A1 to A9. Runs as a plain binary so each criterion
//! prints one PASS/FAIL line regardless of output capture; exits nonzero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use picso::cli::run_from_args;
use picso::corpus::{
    compute_stats, filter_pairs, generate_synthetic_corpus, levenshtein, read_instances, write_instances,
    SynonymPair, SyntheticSpec, DEFAULT_CAP_PER_UID, DEFAULT_MIN_EDIT,
};
use picso::eval::{
    ambiguity_probe, embed_instances, hac_cluster, macro_micro_f1, rank_candidates, retrieval_acc_at_k,
    split_queries, Clustering, EmbedMode, Linkage,
};
use picso::loss::{contrastive_loss, BatchEmbeddings, LossConfig};
use picso::model::{
    attention_on_tape, compose_adapters, entity_mask, masked_attention, Backbone, DomainModule, ModelConfig,
};
use picso::numerics::tape::Tape;
use picso::numerics::{l2_normalize_rows, Parameter, Parameterized, Tensor2D};
use picso::trainer::{continual_train, tiny_gradient_check, train_adapter, TrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
    Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn a1_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut masked_rows = 0;
    for _ in 0..1000 {
        let l = rng.gen_range(3..24);
        let p_s = rng.gen_range(0..l - 1);
        let p_e = rng.gen_range(p_s + 1..l);
        let depth = rng.gen_range(1..4);
        let layer = rng.gen_range(1..=depth);
        let m = entity_mask(layer, depth, p_s, p_e, l).map_err(|e| e.to_string())?;
        for i in 0..l {
            for j in 0..l {
                let inside_row = p_s <= i && i <= p_e;
                let outside_col = j < p_s || j > p_e;
                let want = if layer == depth && inside_row && outside_col { f64::NEG_INFINITY } else { 0.0 };
                ensure!(m.tensor().get(i, j) == want, "mask ({l},{p_s},{p_e},{depth},{layer}) differs at ({i},{j})");
            }
        }

        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let w = 4 * heads;
        let h = rand_tensor(&mut rng, l, w);
        let wq = Parameter::frozen("wq", rand_tensor(&mut rng, w, w));
        let wk = Parameter::frozen("wk", rand_tensor(&mut rng, w, w));
        let wv = Parameter::frozen("wv", rand_tensor(&mut rng, w, w));
        let out = masked_attention(&h, &wq, &wk, &wv, &m, heads).map_err(|e| e.to_string())?;
        if layer == depth {
            for p in &out.probs {
                for i in p_s..=p_e {
                    for j in (0..p_s).chain(p_e + 1..l) {
                        ensure!(p.get(i, j) == 0.0, "mass {} outside the span at ({i},{j})", p.get(i, j));
                    }
                    masked_rows += 1;
                }
            }
        } else {
            let mut tape = Tape::new();
            let x = tape.constant(&h);
            let (q, k, v) = (tape.param(&wq), tape.param(&wk), tape.param(&wv));
            let (o, _) = attention_on_tape(&mut tape, x, q, k, v, None, heads).map_err(|e| e.to_string())?;
            ensure!(tape.value(o) == &out.output, "early layer differs from unmasked attention");
        }
    }
    Ok(format!("1000 tuples, {masked_rows} masked entity rows checked"))
}

/// Per-anchor loss written directly from the formula.
fn reference_loss(v: &[Vec<f64>], uids: &[usize], cfg: &LossConfig) -> (f64, usize) {
    let b = v.len();
    let dot = |i: usize, j: usize| v[i].iter().zip(&v[j]).map(|(a, c)| a * c).sum::<f64>();
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && uids[j] == uids[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let neg: Vec<usize> = (0..b).filter(|&k| k != i && uids[k] != uids[i]).collect();
        let s_plus: f64 = pos.iter().map(|&j| (dot(i, j) / cfg.t).exp()).sum();
        let n = (b - 1 - pos.len()) as f64;
        let floor = (-1.0 / cfg.t).exp();
        let s_minus = if neg.is_empty() {
            floor
        } else {
            let num: f64 = neg.iter().map(|&k| ((1.0 + cfg.beta) * dot(i, k) / cfg.t).exp()).sum();
            let den: f64 = neg.iter().map(|&k| (cfg.beta * dot(i, k) / cfg.t).exp()).sum();
            let tilde = n * num / den;
            ((-n * cfg.tau_plus * s_plus + tilde) / (1.0 - cfg.tau_plus)).max(floor)
        };
        total += -(s_plus / (s_plus + s_minus)).ln();
        anchors += 1;
    }
    (total, anchors)
}

fn a2_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut floored, mut no_neg, mut worst) = (0, 0, 0.0f64);
    let mut checked = 0;
    while checked < 500 {
        let b = rng.gen_range(2..=8);
        let classes = rng.gen_range(1..=b);
        let uids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let cfg = LossConfig {
            t: [0.5, 1.0][rng.gen_range(0..2)],
            tau_plus: rng.gen_range(0.0..0.3),
            beta: rng.gen_range(0.0..2.0),
        };
        // Pull some batches toward shared directions so the floor engages.
        let d = rng.gen_range(2..6);
        let mut raw = rand_tensor(&mut rng, b, d);
        if rng.gen_bool(0.3) {
            let base = raw.row(0).to_vec();
            for r in 1..b {
                for (x, y) in raw.row_mut(r).iter_mut().zip(&base) {
                    *x = 0.2 * *x + y;
                }
            }
        }
        let v = l2_normalize_rows(&raw);
        let rows: Vec<Vec<f64>> = (0..b).map(|r| v.row(r).to_vec()).collect();
        let (want, anchors) = reference_loss(&rows, &uids, &cfg);
        let names = uids.iter().map(|u| format!("u{u}")).collect();
        let batch = BatchEmbeddings::new(v, names).map_err(|e| e.to_string())?;
        match contrastive_loss(&batch, &cfg) {
            Ok(out) => {
                ensure!(anchors > 0, "loss returned for a batch without positives");
                ensure!(out.contributing() == anchors, "{} anchors, reference {anchors}", out.contributing());
                let err = (out.loss - want).abs();
                worst = worst.max(err);
                ensure!(err <= 1e-10, "loss {} vs reference {want}", out.loss);
            }
            Err(e) => {
                ensure!(anchors == 0, "loss failed with {anchors} valid anchors: {e}");
                continue;
            }
        }
        if classes == 1 {
            no_neg += 1;
        }
        // Count anchors where the clamp decides the negative term.
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&j| j != i && uids[j] == uids[i]).collect();
            let neg: Vec<usize> = (0..b).filter(|&k| uids[k] != uids[i]).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let dot = |j: usize| rows[i].iter().zip(&rows[j]).map(|(a, c)| a * c).sum::<f64>();
            let sp: f64 = pos.iter().map(|&j| (dot(j) / cfg.t).exp()).sum();
            let n = neg.len() as f64;
            let num: f64 = neg.iter().map(|&k| ((1.0 + cfg.beta) * dot(k) / cfg.t).exp()).sum();
            let den: f64 = neg.iter().map(|&k| (cfg.beta * dot(k) / cfg.t).exp()).sum();
            if (-n * cfg.tau_plus * sp + n * num / den) / (1.0 - cfg.tau_plus) < (-1.0 / cfg.t).exp() {
                floored += 1;
            }
        }
        checked += 1;
    }
    ensure!(floored > 0 && no_neg > 0, "floor cases {floored}, no-negative batches {no_neg}");
    Ok(format!(
        "500 batches, max abs error {worst:.1e}, {floored} floored anchors, {no_neg} no-negative batches"
    ))
}

fn a3_gradients() -> Outcome {
    let objective = TrainConfig::default().objective();
    let r = tiny_gradient_check(0, &objective).map_err(|e| e.to_string())?;
    let tiny = ModelConfig::tiny(8);
    let module = DomainModule::new(&tiny, "x", 0).map_err(|e| e.to_string())?;
    let trainable: usize = module.parameters().iter().filter(|p| p.is_trainable()).map(|p| p.value.len()).sum();
    ensure!(r.checked_elements == trainable, "{} of {trainable} elements checked", r.checked_elements);
    ensure!(r.max_rel_error <= 1e-5, "max relative error {:.3e} at {:?}", r.max_rel_error, r.worst);
    Ok(format!("{} elements, max relative error {:.2e}", r.checked_elements, r.max_rel_error))
}

fn a4_isolation() -> Outcome {
    let e = |e: picso::Error| e.to_string();
    let c = generate_synthetic_corpus(&SyntheticSpec::parse("40x4x5x0.3").map_err(e)?, 4).map_err(e)?;
    let cfg = ModelConfig::desk(c.vocab.len());
    let backbone = Backbone::new(&cfg).map_err(e)?;
    let bb_before = backbone.checksum();
    let tc = TrainConfig {
        max_steps: Some(200),
        epochs: 100,
        seed: 4,
        ..TrainConfig::default()
    };
    let first = DomainModule::new(&cfg, "first", 4).map_err(e)?;
    let (first, rep) = train_adapter(&backbone, first, &c.instances, &tc).map_err(e)?;
    ensure!(rep.steps == 200, "{} steps", rep.steps);
    ensure!(backbone.checksum() == bb_before, "backbone changed in training");
    ensure!(rep.backbone_checksum_after == bb_before, "report shows a backbone change");

    let first_sum = first.checksum();
    let tc2 = TrainConfig {
        max_steps: Some(50),
        ..tc
    };
    let (second, _) = continual_train(&backbone, &[first.clone()], "second", &c.instances, &tc2).map_err(e)?;
    ensure!(first.checksum() == first_sum, "first adapter changed");
    ensure!(backbone.checksum() == bb_before, "backbone changed in continual training");

    let both = compose_adapters(backbone.clone(), vec![first.clone(), second.clone()]).map_err(e)?;
    let only_first = compose_adapters(backbone.clone(), vec![first]).map_err(e)?;
    let only_second = compose_adapters(backbone, vec![second]).map_err(e)?;
    for inst in c.instances.iter().take(20) {
        let f = both.features(&inst.tokens, inst.p_s, inst.p_e).map_err(e)?;
        let a = only_first.features(&inst.tokens, inst.p_s, inst.p_e).map_err(e)?;
        let b = only_second.features(&inst.tokens, inst.p_s, inst.p_e).map_err(e)?;
        let joint = f.concatenated().map_err(e)?;
        let separate = Tensor2D::concat_cols(&[&a.h_p, &a.h_a[0], &b.h_a[0]]).map_err(e)?;
        ensure!(joint == separate, "composed forward differs from separate forwards");
    }
    Ok("backbone and first adapter checksums unchanged; composed forward exact on 20 instances".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let r = run_from_args(std::iter::once("picso").chain(args.iter().copied()));
    if r.code == 0 {
        Ok(())
    } else {
        Err(format!("{args:?} exited {}: {}", r.code, r.summary))
    }
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    std::fs::write(root.join("run.conf"), "epochs = 2\nbatch_size = 16\n").map_err(|e| e.to_string())?;
    cli(&["build-corpus", "--out", &p("corpus"), "--synthetic", "20x4x5x0.3", "--seed", "5"])?;
    cli(&["pretrain", "--corpus", &p("corpus"), "--out", &p("ckpt"), "--config", &p("run.conf"), "--seed", "5", "--holdout"])?;
    for task in ["retrieval", "canonicalize", "probe"] {
        cli(&["eval", task, "--corpus", &p("corpus"), "--checkpoint", &p("ckpt"), "--out", &p("eval")])?;
    }
    cli(&["eval", "gradcheck", "--seed", "5", "--out", &p("eval")])
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn a5_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path())?;
    pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure!(fa.keys().eq(fb.keys()), "artifact sets differ: {:?} vs {:?}", fa.keys(), fb.keys());
    for (name, bytes) in &fa {
        ensure!(&fb[name] == bytes, "{name} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical", fa.len()))
}

fn a6_seed(seed: u64) -> Result<(f64, f64, f64), String> {
    let e = |e: picso::Error| e.to_string();
    let c = generate_synthetic_corpus(&SyntheticSpec::parse("50x4x5x0.3").map_err(e)?, seed).map_err(e)?;
    let mut cfg = ModelConfig::desk(c.vocab.len());
    cfg.backbone_seed = seed;
    let backbone = Backbone::new(&cfg).map_err(e)?;
    let (queries, candidates) = split_queries(&c.instances);
    let train: Vec<_> = candidates.iter().map(|&i| c.instances[i].clone()).collect();
    let held: Vec<_> = queries.iter().map(|&i| c.instances[i].clone()).collect();

    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let module = DomainModule::new(&cfg, "synthetic", seed).map_err(e)?;
    let (module, rep) = train_adapter(&backbone, module, &train, &tc).map_err(e)?;
    let ratio = rep.epoch_losses[rep.epoch_losses.len() - 1] / rep.epoch_losses[0];

    let model = compose_adapters(backbone, vec![module]).map_err(e)?;
    let q = embed_instances(&model, &held, EmbedMode::PretrainPooled).map_err(e)?;
    let cands = embed_instances(&model, &train, EmbedMode::PretrainPooled).map_err(e)?;
    let acc = retrieval_acc_at_k(&q, &cands, 1).map_err(e)?;
    ensure!(acc == retrieval_acc_at_k(&q, &cands, 1).map_err(e)?, "retrieval is not repeatable");
    for r in 0..q.len() {
        let first = rank_candidates(q.matrix.row(r), &cands.matrix);
        ensure!(first == rank_candidates(q.matrix.row(r), &cands.matrix), "ranking is not repeatable");
    }
    let probe = ambiguity_probe(&model, &train).map_err(e)?;
    Ok((ratio, acc, probe.margin))
}

fn a6_learning() -> Outcome {
    // Ties resolve to the lower candidate index.
    let tied = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    ensure!(rank_candidates(&[1.0, 0.0], &tied) == vec![0, 2, 1], "tie order");

    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [1, 2, 3] {
        let (ratio, acc, margin) = a6_seed(seed)?;
        lines.push(format!("seed {seed}: loss ratio {ratio:.3}, Acc@1 {acc:.3}, margin {margin:.3}"));
        if ratio >= 0.8 {
            failures.push(format!("seed {seed} loss ratio {ratio:.3} >= 0.8"));
        }
        if acc < 0.8 {
            failures.push(format!("seed {seed} Acc@1 {acc:.3} < 0.8"));
        }
        if margin <= 0.1 {
            failures.push(format!("seed {seed} probe margin {margin:.3} <= 0.1"));
        }
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), lines.join("; ")))
    }
}

fn one_hot(labels: &[usize], width: usize) -> Tensor2D {
    let mut m = Tensor2D::zeros(labels.len(), width);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

fn a7_canonicalization() -> Outcome {
    let (uids, per) = (50, 4);
    let gold_labels: Vec<usize> = (0..uids * per).map(|i| i / per).collect();
    let gold = Clustering::from_labels(&gold_labels);
    let e = |e: picso::Error| e.to_string();
    let pred = hac_cluster(&one_hot(&gold_labels, uids), Linkage::Average, 0.5).map_err(e)?;
    let f = macro_micro_f1(&pred, &gold).map_err(e)?;
    ensure!(f.macro_f1 == 1.0 && f.micro_f1 == 1.0, "oracle F1 {} / {}", f.macro_f1, f.micro_f1);

    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut shuffled = gold_labels.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pred = hac_cluster(&one_hot(&shuffled, uids), Linkage::Average, 0.5).map_err(e)?;
        let f = macro_micro_f1(&pred, &gold).map_err(e)?;
        worst = worst.max(f.macro_f1);
        ensure!(f.macro_f1 < 0.2, "seed {seed}: shuffled macro F1 {}", f.macro_f1);
    }
    Ok(format!("oracle macro = micro = 1; shuffled macro F1 at most {worst:.3}"))
}

fn a8_corpus() -> Outcome {
    ensure!(DEFAULT_MIN_EDIT == 10 && DEFAULT_CAP_PER_UID == 50, "defaults {DEFAULT_MIN_EDIT}/{DEFAULT_CAP_PER_UID}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(1..16);
        (0..n).map(|_| (b'a' + rng.gen_range(0..6u8)) as char).collect()
    };
    let pairs: Vec<SynonymPair> = (0..3000)
        .map(|_| SynonymPair {
            a: word(&mut rng),
            b: word(&mut rng),
            uid: format!("U{}", rng.gen_range(0..12)),
        })
        .collect();
    let kept = filter_pairs(&pairs, DEFAULT_MIN_EDIT, DEFAULT_CAP_PER_UID, 8).map_err(|e| e.to_string())?;
    ensure!(kept.iter().all(|p| levenshtein(&p.a, &p.b) >= 10), "a close pair survived");
    let mut per_uid: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &kept {
        *per_uid.entry(&p.uid).or_default() += 1;
    }
    ensure!(per_uid.values().all(|&n| n <= 50), "cap exceeded: {per_uid:?}");
    let qualifying = pairs.iter().filter(|p| levenshtein(&p.a, &p.b) >= 10).count();
    ensure!(per_uid.values().any(|&n| n == 50), "cap never engaged ({qualifying} qualifying)");

    let e = |e: picso::Error| e.to_string();
    let c = generate_synthetic_corpus(&SyntheticSpec::parse("30x4x5x0.3").map_err(e)?, 8).map_err(e)?;
    let stats = compute_stats(&c.instances, &c.vocab);
    let ratio = stats.synonym_pair_count as f64 / stats.uid_count as f64;
    ensure!((stats.pairs_per_uid - ratio).abs() <= 1e-9, "pairs_per_uid {} vs {ratio}", stats.pairs_per_uid);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("instances.jsonl");
    write_instances(&path, &c.instances, &c.vocab).map_err(e)?;
    let back = read_instances(&path, &c.vocab).map_err(e)?;
    ensure!(back == c.instances, "JSONL round-trip changed the corpus");
    Ok(format!(
        "{} of {qualifying} qualifying pairs kept; {:.3} pairs/uid; {} instances round-tripped",
        kept.len(),
        stats.pairs_per_uid,
        back.len()
    ))
}

fn a9_base_scale() -> Outcome {
    let e = |e: picso::Error| e.to_string();
    let cfg = ModelConfig::base_scale(1000);
    ensure!(
        cfg.d == 768 && cfg.n_layers == 12 && cfg.adapter_positions == [0, 5, 11] && cfg.adapter_depth == 2,
        "unexpected base-scale shape {cfg:?}"
    );
    cfg.validate().map_err(e)?;
    let backbone = Backbone::new(&cfg).map_err(e)?;
    let module = DomainModule::new(&cfg, "general", 0).map_err(e)?;
    let model = compose_adapters(backbone, vec![module]).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tokens: Vec<usize> = (0..32).map(|_| rng.gen_range(10..1000)).collect();
    tokens[10] = picso::corpus::E_START;
    tokens[13] = picso::corpus::E_END;
    let f = model.features(&tokens, 10, 13).map_err(e)?;
    let v = f.v.ok_or("no pooled vector")?;
    ensure!(f.h_p.shape() == (32, 768) && f.h_a[0].shape() == (32, 768), "feature shapes");
    ensure!(v.all_finite() && f.h_a[0].all_finite(), "non-finite forward output");
    Ok(format!("{} parameters, forward at l = 32 finite", model.parameters().iter().map(|p| p.value.len()).sum::<usize>()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("A1 mask correctness", a1_mask),
        ("A2 loss oracle equivalence", a2_loss),
        ("A3 gradient soundness", a3_gradients),
        ("A4 frozen backbone and continual isolation", a4_isolation),
        ("A5 determinism", a5_determinism),
        ("A6 synthetic learning signal", a6_learning),
        ("A7 canonicalization harness", a7_canonicalization),
        ("A8 corpus pipeline contracts", a8_corpus),
        ("A9 base-scale configuration", a9_base_scale),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name} ({}): {detail}", secs(took)),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({}): {why}", secs(took));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
