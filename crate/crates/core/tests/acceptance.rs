//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 6`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mintime::assembler::{assemble, AssemblyConfig, SortPolicy};
use mintime::clustering::{cluster_faces, ClusterConfig, SimilarityKind};
use mintime::embeddings::{size_bin, token_indices, SIZE_BINS};
use mintime::evaluation::{accuracy, auc, fpr, localization_accuracy, mav, score_videos, ScoredVideo};
use mintime::model::{fit, ModelConfig, ModelInput};
use mintime::synth::{generate, SynthConfig, SynthDataset};
use mintime::trackdata::FaceRecord;
use mintime::{Model64, Tensor64};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_identities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<u32>> {
    // at least one slot of each identity, a few trailing PAD slots
    let pad = rng.gen_range(0..=n / 4);
    let mut ids: Vec<Option<u32>> = (0..n - pad).map(|_| Some(rng.gen_range(0..2))).collect();
    ids[0] = Some(0);
    ids[1] = Some(1);
    ids.extend(std::iter::repeat_n(None, pad));
    ids
}

fn random_input(cfg: &ModelConfig, ids: &[Option<u32>], rng: &mut ChaCha8Rng) -> ModelInput<f64> {
    let s = cfg.input_shape();
    let mut frame = [0u64; 2];
    let slots = ids
        .iter()
        .map(|id| {
            id.map(|i| {
                frame[i as usize] += rng.gen_range(1..3);
                (frame[i as usize], rng.gen_range(0..SIZE_BINS))
            })
        })
        .collect();
    ModelInput {
        crops: Tensor64::randn(&[ids.len(), s[0], s[1], s[2]], 1.0, rng),
        slots,
        identities: ids.to_vec(),
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        max_frames: 32,
        ..ModelConfig::default()
    }
}

fn identity_isolation() -> Outcome {
    let cfg = toy_config();
    let t = cfg.tokens_per_face();
    let model = Model64::new(cfg.clone(), 101).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0usize;
    for case in 0..100 {
        let n = rng.gen_range(4..=16);
        let ids = random_identities(&mut rng, n);
        let tokens = Tensor64::randn(&[1 + n * t, cfg.dim], 1.0, &mut rng);
        let base = model.temporal_attention(&tokens, &ids).unwrap();
        let mut perturbed = tokens.clone();
        for (s, id) in ids.iter().enumerate() {
            if *id == Some(1) {
                for row in 1 + s * t..1 + (s + 1) * t {
                    for x in &mut perturbed.data_mut()[row * cfg.dim..(row + 1) * cfg.dim] {
                        *x += rng.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        let out = model.temporal_attention(&perturbed, &ids).unwrap();
        for (s, id) in ids.iter().enumerate() {
            if *id == Some(0) {
                for row in 1 + s * t..1 + (s + 1) * t {
                    if base.row(row) != out.row(row) {
                        return Err(format!("sequence {case}: identity-A row {row} changed"));
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} identity-A token rows bit-identical over 100 sequences"))
}

fn pad_neutrality() -> Outcome {
    let cfg = toy_config();
    let model = Model64::new(cfg.clone(), 102).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ids: Vec<Option<u32>> = (0..12).map(|i| Some(i % 2)).collect();
    ids.extend([None; 4]);
    let input = random_input(&cfg, &ids, &mut rng);
    let base = model.forward(&input).unwrap().logit;
    let per = input.crops.len() / ids.len();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut other = input.clone();
        for x in &mut other.crops.data_mut()[12 * per..] {
            *x = rng.gen_range(-1e3..1e3);
        }
        worst = worst.max((model.forward(&other).unwrap().logit - base).abs());
    }
    check(worst <= 1e-12, format!("max |logit difference| {worst:e} over 100 PAD perturbations"))
}

fn tcpe_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 16;
    let (mut frames_shared, mut ordered_pairs) = (0usize, 0usize);
    for case in 0..60 {
        let data = generate(&SynthConfig {
            num_videos: 4,
            frames: rng.gen_range(4..40),
            identities: rng.gen_range(1..=3),
            dropout: rng.gen_range(0.0..0.4),
            seed: case,
            ..SynthConfig::default()
        })
        .unwrap();
        let asm = AssemblyConfig {
            sequence_length: [4, 8, 16, 32][rng.gen_range(0..4)],
            max_identities: [None, Some(1), Some(2), Some(3)][rng.gen_range(0..4)],
            sorting: [SortPolicy::SizeBased, SortPolicy::FrequencyBased, SortPolicy::Random][rng.gen_range(0..3)],
            seed: rng.gen(),
        };
        for video in &data.videos {
            let seq = assemble(video, &asm, rng.gen_range(0..5)).unwrap();
            let keys = seq.slot_keys();
            let (pos, _) = token_indices(&keys, t, 64 * t).unwrap();
            let ids_of = |s: usize| &pos[s * t..(s + 1) * t];
            let mut by_frame: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
            let mut last: BTreeMap<u32, usize> = BTreeMap::new();
            for (s, slot) in seq.slots.iter().enumerate() {
                let Some(face) = slot else { continue };
                let expect: Vec<usize> = (0..t).map(|k| face.frame_index as usize * t + 1 + k).collect();
                if ids_of(s) != expect.as_slice() {
                    return Err(format!("slot {s} of {}: ids {:?}", seq.video_id, ids_of(s)));
                }
                by_frame.entry(face.frame_index).or_default().push(s);
                if let Some(&prev) = last.get(&face.identity_id) {
                    ordered_pairs += 1;
                    if ids_of(prev).iter().max() >= ids_of(s).iter().min() {
                        return Err(format!("{}: ids do not increase along identity {}", seq.video_id, face.identity_id));
                    }
                }
                last.insert(face.identity_id, s);
            }
            for slots in by_frame.values() {
                let distinct: std::collections::BTreeSet<u32> =
                    slots.iter().map(|&s| seq.slots[s].as_ref().unwrap().identity_id).collect();
                if distinct.len() > 1 {
                    frames_shared += 1;
                    if slots.iter().any(|&s| ids_of(s) != ids_of(slots[0])) {
                        return Err(format!("{}: same-frame faces disagree on ids", seq.video_id));
                    }
                }
            }
        }
    }
    check(
        frames_shared > 0 && ordered_pairs > 0,
        format!("{frames_shared} multi-identity frames share ids; {ordered_pairs} consecutive track pairs strictly increasing"),
    )
}

fn size_bins() -> Outcome {
    if size_bin(0.16).unwrap() != 3 {
        return Err(format!("bin(0.16) = {}", size_bin(0.16).unwrap()));
    }
    for k in 1..=1000u32 {
        // s = k/1000 lies in [b/20, (b+1)/20) exactly when b = floor(k/50)
        let want = ((k / 50) as usize).min(SIZE_BINS - 1);
        let got = size_bin(k as f64 / 1000.0).unwrap();
        if got != want {
            return Err(format!("bin({}) = {got}, oracle {want}", k as f64 / 1000.0));
        }
    }
    check(size_bin(0.0).is_err() && size_bin(1.5).is_err(), "bin(0.16)=3; 1000-point sweep matches".into())
}

fn gradient_fidelity() -> Outcome {
    let cfg = toy_config();
    let mut model = Model64::new(cfg.clone(), 105).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = [Some(0), Some(1), Some(0), Some(1), Some(0), Some(1), None, None];
    let input = random_input(&cfg, &ids, &mut rng);
    let label = 1.0;
    let (_, grads) = model.loss_and_gradients(&input, label).unwrap();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let loss = |m: &Model64| {
        let z = m.forward(&input).unwrap().logit;
        // BCE with logits, written out independently
        z.max(0.0) - z * label + (-z.abs()).exp().ln_1p()
    };
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let mut worst_at = String::new();
    for (name, grad) in names.iter().zip(&grads) {
        let len = grad.len();
        let mut nonzero: Vec<usize> = (0..len).filter(|&i| grad.data()[i] != 0.0).collect();
        let mut zero: Vec<usize> = (0..len).filter(|&i| grad.data()[i] == 0.0).collect();
        // shuffle both pools, prefer entries with a gradient
        for pool in [&mut nonzero, &mut zero] {
            for i in (1..pool.len()).rev() {
                pool.swap(i, rng.gen_range(0..=i));
            }
        }
        let picks: Vec<usize> = nonzero.into_iter().chain(zero).take(50).collect();
        for i in picks {
            let orig = model.params()[name].data()[i];
            model.param_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&model);
            model.param_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&model);
            model.param_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    check(
        worst < 1e-4,
        format!("{checked} entries over {} tensors, worst relative error {worst:.2e} ({worst_at})", names.len()),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let n = rng.gen_range(2..=50);
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.gen_range(0..5) as f64 / 4.0 } else { rng.gen() })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).unwrap();
        let want = pairwise_auc(&scores, &labels);
        if got != want {
            return Err(format!("set {case}: auc {got} vs pairwise {want}"));
        }
        let thr = rng.gen();
        let (fp, tn) = scores.iter().zip(&labels).filter(|(_, &y)| !y).fold((0, 0), |(fp, tn), (&s, _)| {
            if s >= thr {
                (fp + 1, tn)
            } else {
                (fp, tn + 1)
            }
        });
        let want_fpr = fp as f64 / (tn + fp) as f64;
        if (fpr(&scores, &labels, thr).unwrap() - want_fpr).abs() > 1e-15 {
            return Err(format!("set {case}: fpr mismatch"));
        }
        let hits = scores.iter().zip(&labels).filter(|(&s, &y)| (s >= thr) == y).count();
        if (accuracy(&scores, &labels, thr).unwrap() - hits as f64 / n as f64).abs() > 1e-15 {
            return Err(format!("set {case}: accuracy mismatch"));
        }
        let classes: Vec<f64> = (0..rng.gen_range(1..6)).map(|_| rng.gen()).collect();
        let spread = classes.iter().cloned().fold(f64::MIN, f64::max) - classes.iter().cloned().fold(f64::MAX, f64::min);
        if mav(&classes).unwrap() != spread {
            return Err(format!("set {case}: mav mismatch"));
        }
    }
    let m = mav(&[0.7, 0.9, 0.8]).unwrap();
    check((m - 0.2).abs() < 1e-12, format!("1000 sets match the oracles; MAV(0.7, 0.9, 0.8) = {m:.12}"))
}

fn components_oracle(faces: &[FaceRecord], cfg: &ClusterConfig) -> Vec<Vec<usize>> {
    let n = faces.len();
    let sim = |a: &[f32], b: &[f32]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        match cfg.similarity {
            SimilarityKind::Dot => dot,
            SimilarityKind::Cosine => {
                let na = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                let nb = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    };
    // label propagation until stable: each face takes the smallest label in reach
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j && sim(&faces[i].embedding, &faces[j].embedding) > cfg.threshold && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut tracks: Vec<(f64, u64, usize, Vec<usize>)> = Vec::new();
    for root in 0..n {
        let comp: Vec<usize> = (0..n).filter(|&i| label[i] == root).collect();
        if comp.is_empty() {
            continue;
        }
        // one face per frame, the largest (earliest on ties), in frame order
        let mut frames: Vec<u64> = comp.iter().map(|&i| faces[i].frame_index).collect();
        frames.sort_unstable();
        frames.dedup();
        let members: Vec<usize> = frames
            .iter()
            .map(|&f| {
                comp.iter()
                    .copied()
                    .filter(|&i| faces[i].frame_index == f)
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if faces[b].area() >= faces[i].area() => Some(b),
                        _ => Some(i),
                    })
                    .unwrap()
            })
            .collect();
        if members.len() < cfg.min_cluster_size {
            continue;
        }
        let mean = members.iter().map(|&i| faces[i].area()).sum::<f64>() / members.len() as f64;
        tracks.push((mean, faces[members[0]].frame_index, root, members));
    }
    tracks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    tracks.into_iter().map(|t| t.3).collect()
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let centers = [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.7, 0.7, 0.0]];
    let (mut pruned, mut multi) = (0usize, 0usize);
    for case in 0..500 {
        let n = rng.gen_range(1..=50);
        let faces: Vec<FaceRecord> = (0..n)
            .map(|_| {
                let c = centers[rng.gen_range(0..4)];
                let side = rng.gen_range(1..6) as f64 * 10.0;
                FaceRecord {
                    frame_index: rng.gen_range(0..15),
                    bbox: [0.0, 0.0, side, side],
                    frame_size: [1000, 1000],
                    embedding: c.iter().map(|&x| x + rng.gen_range(-0.25f32..0.25)).collect(),
                    feature_ref: String::new(),
                }
            })
            .collect();
        let dot = rng.gen_bool(0.3);
        let cfg = ClusterConfig {
            threshold: if dot { rng.gen_range(0.3..1.2) } else { rng.gen_range(0.3..0.95) },
            min_cluster_size: rng.gen_range(1..5),
            similarity: if dot { SimilarityKind::Dot } else { SimilarityKind::Cosine },
        };
        let got = cluster_faces(&faces, &cfg).unwrap();
        let want = components_oracle(&faces, &cfg);
        let got_ids: Vec<Vec<*const FaceRecord>> =
            got.tracks.iter().map(|t| t.faces.iter().map(|f| f as *const _).collect()).collect();
        let got_faces: Vec<Vec<&FaceRecord>> = got.tracks.iter().map(|t| t.faces.iter().collect()).collect();
        let want_faces: Vec<Vec<&FaceRecord>> = want.iter().map(|w| w.iter().map(|&i| &faces[i]).collect()).collect();
        if got_faces != want_faces {
            return Err(format!("instance {case} (n={n}): {} tracks vs oracle {}", got_ids.len(), want.len()));
        }
        if got.tracks.iter().enumerate().any(|(i, t)| t.identity_id != i as u32) {
            return Err(format!("instance {case}: identity ids not enumerated in order"));
        }
        pruned += usize::from(got.pruned_faces > 0);
        multi += usize::from(got.tracks.len() > 1);
    }
    check(
        pruned > 0 && multi > 0,
        format!("500 instances match ({pruned} with pruning, {multi} with several tracks)"),
    )
}

struct Trained {
    scored: Vec<ScoredVideo>,
    test: SynthDataset,
    auc: f64,
    secs: f64,
}

/// Trains the toy model for 10 epochs on 2000 synthetic videos and scores a
/// held-out 400-video split.
fn train_and_score(strength: f64, train_ids: Option<usize>, infer_ids: Option<usize>) -> Trained {
    let start = Instant::now();
    let synth = |n, seed| SynthConfig {
        num_videos: n,
        strength,
        seed,
        ..SynthConfig::default()
    };
    let train = generate(&synth(2000, 1)).unwrap();
    let test = generate(&synth(400, 2)).unwrap();
    let mut model = Model64::new(toy_config(), 7).unwrap();
    let asm = AssemblyConfig {
        max_identities: train_ids,
        ..AssemblyConfig::default()
    };
    let tc = mintime::model::TrainConfig {
        seed: 3,
        ..Default::default()
    };
    fit(&mut model, &train.videos, &asm, &train, &tc, |_| {}).unwrap();
    let infer = AssemblyConfig {
        max_identities: infer_ids,
        ..asm
    };
    let scored = score_videos(&model, &test.videos, &infer, &test).unwrap();
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label.is_some_and(|l| l.is_fake())).collect();
    Trained {
        auc: auc(&scores, &labels).unwrap(),
        scored,
        test,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "synth.num_videos=24\nsynth.frames=12\nmodel.dim=16\nmodel.depth=1\nmodel.heads=2\nmodel.max_frames=16\ntrain.epochs=2\ntrain.batch_size=8\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_mintime"))
            .current_dir(d)
            .env_remove("MINTIME_SEED")
            .env("RUST_LOG", "warn")
            .args(["--config", "run.cfg", "--seed", "11"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    for r in ["a", "b"] {
        let p = |f: &str| format!("{r}/{f}");
        run(&["synth", "--out", &p("data")]);
        run(&["assemble", "--manifest", &p("data/manifest.jsonl"), "--out", &p("seqs.mnts")]);
        run(&["train", "--sequences", &p("seqs.mnts"), "--out", &p("ckpt")]);
        run(&[
            "eval", "--checkpoint", &p("ckpt"), "--manifest", &p("data/manifest.jsonl"),
            "--out", &p("report.json"), "--localization", &p("loc.json"),
        ]);
    }
    let read = |f: &str| std::fs::read(Path::new(d).join(f)).unwrap();
    check(
        read("a/report.json") == read("b/report.json") && read("a/loc.json") == read("b/loc.json"),
        format!("report ({} bytes) and localization identical across runs", read("a/report.json").len()),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: u32| selected.is_empty() || selected.contains(&k);
    let mut failures = 0;
    let mut report = |k: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {k:>2} {tag} {name}: {detail}");
    };
    let guarded = |f: &dyn Fn() -> Outcome| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        })
    };

    let cheap: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "identity isolation", identity_isolation),
        (2, "PAD neutrality", pad_neutrality),
        (3, "temporal coherent positions", tcpe_property),
        (4, "size bins", size_bins),
        (5, "gradient fidelity", gradient_fidelity),
        (6, "metric oracles", metric_oracles),
        (7, "clustering oracle", clustering_oracle),
    ];
    for (k, name, f) in cheap {
        if want(k) {
            report(k, name, guarded(&f));
        }
    }

    if want(8) || want(9) || want(10) {
        let full = catch_unwind(|| train_and_score(1.0, Some(2), None));
        match &full {
            Err(_) => {
                for (k, name) in [(8, "synthetic end-to-end"), (9, "multi-identity advantage"), (10, "localization")] {
                    if want(k) {
                        report(k, name, Err("training panicked".into()));
                    }
                }
            }
            Ok(full) => {
                if want(8) {
                    let null = guarded(&|| {
                        let null = train_and_score(0.0, Some(2), None);
                        check(
                            (null.auc - 0.5).abs() <= 0.05,
                            format!("null-control AUC {:.4} ({:.0}s)", null.auc, null.secs),
                        )
                    });
                    let outcome = match null {
                        Ok(n) if full.auc >= 0.90 => Ok(format!("AUC {:.4} ({:.0}s); {n}", full.auc, full.secs)),
                        Ok(n) | Err(n) => Err(format!("AUC {:.4} (needs >= 0.90); {n}", full.auc)),
                    };
                    report(8, "synthetic end-to-end", outcome);
                }
                if want(9) {
                    let outcome = guarded(&|| {
                        let single = train_and_score(1.0, Some(1), Some(1));
                        let gap = full.auc - single.auc;
                        check(
                            gap >= 0.05,
                            format!("full AUC {:.4} vs largest-identity-only {:.4}, gap {gap:.4}", full.auc, single.auc),
                        )
                    });
                    report(9, "multi-identity advantage", outcome);
                }
                if want(10) {
                    let outcome = guarded(&|| {
                        let flagged = full.scored.iter().filter(|s| s.score >= 0.5 && s.label.is_some_and(|l| l.is_fake())).count();
                        let acc = localization_accuracy(&full.scored, &full.test.videos, 0.5)
                            .ok_or_else(|| "no correctly flagged fakes".to_string())?;
                        check(acc >= 0.70, format!("suspect identity correct on {acc:.4} of {flagged} flagged fakes"))
                    });
                    report(10, "localization", outcome);
                }
            }
        }
    }

    if want(11) {
        report(11, "CLI determinism", guarded(&cli_determinism));
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
