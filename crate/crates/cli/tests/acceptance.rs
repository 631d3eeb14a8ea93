//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use code_core::align::{hcl_loss, hcl_loss_value, similarity_matrix};
use code_core::corpus::generate_synthetic_corpus;
use code_core::cosegment::{
    image_seg_loss, kg_loss, pseudo_labels, region_logits, region_masks, text_seg_loss, word_class_log_probs,
    word_logits, word_mask_values, CosegConfig, ImageSegInputs, Resampler,
};
use code_core::eval::{evaluate_synthetic, miou, ClassVocabulary, LabelMap, IGNORE_LABEL};
use code_core::highlight::{highlight_region, highlight_text};
use code_core::nn::gradcheck::check;
use code_core::nn::{Graph, Tensor, Var};
use code_core::trainer::{
    load_checkpoint, save_checkpoint, synth_config, NdjsonSink, TrainConfig, TrainCorpus, Trainer, VecSink,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIMPLEX_TOL: f64 = 1e-6;
const HCL_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const REGION_IOU_MIN: f64 = 0.5;
const WORD_ACC_MIN: f64 = 0.8;
const HELD_OUT_N: usize = 100;
const HELD_OUT_SEED: u64 = 1000;

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

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut o = f();
    let dt = t0.elapsed();
    o.detail.push_str(&format!("; {:.1}s", dt.as_secs_f64()));
    if let Some(limit) = limit {
        if dt > limit {
            o.pass = false;
            o.detail.push_str(&format!(" exceeds {}s", limit.as_secs()));
        }
    }
    o
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (j, l) = (rng.gen_range(1..=6), rng.gen_range(1..=20));
        let logits: Vec<Vec<f64>> = (0..j).map(|_| (0..l).map(|_| rng.gen_range(-30.0..30.0)).collect()).collect();
        let (masks, residual) = word_mask_values(&logits);
        for i in 0..l {
            let s: f64 = masks.iter().map(|m| m[i]).sum::<f64>() + residual[i];
            worst = worst.max((s - 1.0).abs());
        }
        let mut g = Graph::new();
        let flat = g.constant(Tensor::new(&[j, l], logits.concat()));
        let lp = word_class_log_probs(&mut g, flat);
        for row in g.value(lp).data().chunks(j + 1) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    let graph_hcl = |s: Vec<Vec<f64>>, tau: f64| {
        let b = s.len();
        let mut g = Graph::new();
        let sv = g.constant(Tensor::new(&[b, b], s.concat()));
        let lt = g.constant(Tensor::scalar(tau.ln()));
        let l = hcl_loss(&mut g, sv, lt).unwrap();
        g.value(l).item()
    };
    let cases: Vec<(&str, Vec<Vec<f64>>, f64, f64)> = vec![
        ("B=1", vec![vec![0.3]], 1.0, 0.0),
        ("constant S, B=5", vec![vec![0.7; 5]; 5], 0.5, 5f64.ln()),
        ("[[2,0],[0,2]]", vec![vec![2.0, 0.0], vec![0.0, 2.0]], 1.0, 0.126928),
    ];
    let mut hcl_err: f64 = 0.0;
    for (_, s, tau, want) in &cases {
        hcl_err = hcl_err.max((hcl_loss_value(s, *tau) - want).abs());
        hcl_err = hcl_err.max((graph_hcl(s.clone(), *tau) - want).abs());
    }
    outcome(
        worst < SIMPLEX_TOL && hcl_err < HCL_TOL,
        format!("simplex max |sum-1| {worst:.2e} over 10000 draws; hcl closed forms max err {hcl_err:.2e}"),
    )
}

fn gradcheck_family(name: &str, seed: u64, build: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_INSTANCES {
        let (inputs, f) = build(&mut rng);
        let r = check(&inputs, 1e-6, |g, v| f(g, v));
        worst = worst.max(r.max_rel_err);
    }
    (worst, format!("{name} {worst:.1e}"))
}

fn criterion_2() -> Outcome {
    let mut results = Vec::new();
    results.push(gradcheck_family("kg", 201, |rng| {
        let (j, c) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
        let inputs = vec![rand_tensor(rng, &[j, c], 1.0)];
        // The anchor is a stop-gradient input.
        let anchor = rand_tensor(rng, &[j, c], 1.0);
        let f = Box::new(move |g: &mut Graph, v: &[Var]| {
            let n = g.l2_normalize(v[0]);
            let a = g.constant(anchor.clone());
            let a = g.l2_normalize(a);
            kg_loss(g, n, a)
        });
        (inputs, f as Box<dyn Fn(&mut Graph, &[Var]) -> Var>)
    }));
    results.push(gradcheck_family("seg_t", 202, |rng| {
        let (j, l, c) = (rng.gen_range(1..=3), rng.gen_range(2..=6), rng.gen_range(2..=5));
        let inputs = vec![
            rand_tensor(rng, &[l, c], 1.0),
            rand_tensor(rng, &[j, c], 1.0),
            Tensor::scalar(rng.gen_range(2.0..8.0)),
            Tensor::scalar(rng.gen_range(-1.0..1.0)),
        ];
        let valid: Vec<bool> = (0..l).map(|i| i == 0 || rng.gen_bool(0.8)).collect();
        // Labels come from the unperturbed logits, as in training.
        let labels = {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let x = g.l2_normalize(v[0]);
            let n = g.l2_normalize(v[1]);
            let lg = word_logits(&mut g, x, n, v[2], v[3]);
            let host: Vec<Vec<f64>> = g.value(lg).data().chunks(l).map(<[f64]>::to_vec).collect();
            pseudo_labels(&host)
        };
        let f = Box::new(move |g: &mut Graph, v: &[Var]| {
            let x = g.l2_normalize(v[0]);
            let n = g.l2_normalize(v[1]);
            let lg = word_logits(g, x, n, v[2], v[3]);
            let lp = word_class_log_probs(g, lg);
            text_seg_loss(g, lp, &labels, &valid).unwrap()
        });
        (inputs, f as Box<dyn Fn(&mut Graph, &[Var]) -> Var>)
    }));
    results.push(gradcheck_family("seg_v", 203, |rng| {
        let (p, k, c, grid, size) = (rng.gen_range(1..=3), rng.gen_range(1..=3), 3, 2, 4);
        let n = grid * grid;
        let present: Vec<Vec<bool>> = (0..p).map(|_| (0..k).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let present: Vec<Vec<bool>> = present
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r[i % k] = true;
                r
            })
            .collect();
        let trips: Vec<(usize, usize)> = (0..p).map(|i| (i, i % k)).collect();
        let inputs = vec![
            rand_tensor(rng, &[p, n, c], 1.0),
            rand_tensor(rng, &[k, c], 1.0),
            Tensor::scalar(rng.gen_range(2.0..10.0)),
            Tensor::scalar(rng.gen_range(-2.0..0.0)),
        ];
        let up = Resampler::new(grid, size).up;
        let cfg = CosegConfig::default();
        let f = Box::new(move |g: &mut Graph, v: &[Var]| {
            let flat = g.reshape(v[0], &[p * n, c]);
            let flat = g.l2_normalize(flat);
            let pix = g.reshape(flat, &[p, n, c]);
            let nouns = g.l2_normalize(v[1]);
            let pidx: Vec<usize> = trips.iter().map(|t| t.0).collect();
            let kidx: Vec<usize> = trips.iter().map(|t| t.1).collect();
            let pflat = g.reshape(pix, &[p, n * c]);
            let pt = g.select0(pflat, &pidx);
            let pt = g.reshape(pt, &[trips.len(), n, c]);
            let nt = g.select0(nouns, &kidx);
            let lg = region_logits(g, pt, nt, v[2], v[3]);
            let upv = g.constant(up.clone());
            let masks = region_masks(g, lg, upv);
            image_seg_loss(
                g,
                &ImageSegInputs {
                    masks,
                    height: size,
                    width: size,
                    pixels: pix,
                    nouns,
                    gamma: v[2],
                    beta: v[3],
                    present: present.clone(),
                },
                &cfg,
            )
            .total
        });
        (inputs, f as Box<dyn Fn(&mut Graph, &[Var]) -> Var>)
    }));
    results.push(gradcheck_family("hcl", 204, |rng| {
        let (b, c) = (rng.gen_range(1..=5), rng.gen_range(2..=6));
        let inputs = vec![
            rand_tensor(rng, &[b, c], 1.0),
            rand_tensor(rng, &[b, c], 1.0),
            Tensor::scalar(rng.gen_range(-3.0..0.0)),
        ];
        let f = Box::new(|g: &mut Graph, v: &[Var]| {
            let s = similarity_matrix(g, v[0], v[1]).unwrap();
            hcl_loss(g, s, v[2]).unwrap()
        });
        (inputs, f as Box<dyn Fn(&mut Graph, &[Var]) -> Var>)
    }));
    let pass = results.iter().all(|(w, _)| *w < GRAD_REL_TOL);
    let detail = results.into_iter().map(|(_, d)| d).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max rel err over {GRAD_INSTANCES} instances each: {detail}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut ok = true;
    let (t, hw, l, c) = (3, 16, 7, 5);
    let x = rand_tensor(&mut rng, &[t, hw, 3], 1.0);
    let pv = rand_tensor(&mut rng, &[hw, 3], 1.0);
    let e = rand_tensor(&mut rng, &[t, l, c], 1.0);
    let pt = rand_tensor(&mut rng, &[l, c], 1.0);
    let tile = |p: &Tensor, reps: usize| Tensor::new(&[reps, p.shape()[0], p.shape()[1]], p.data().repeat(reps));

    for fill in [1.0, 0.0] {
        let mut g = Graph::new();
        let (xv, pvv) = (g.constant(x.clone()), g.constant(pv.clone()));
        let m = g.constant(Tensor::full(&[t, hw], fill));
        let h = highlight_region(&mut g, xv, m, pvv).unwrap();
        let want = if fill == 1.0 { x.clone() } else { tile(&pv, t) };
        ok &= g.value(h).data() == want.data();

        let (ev, ptv) = (g.constant(e.clone()), g.constant(pt.clone()));
        let m = g.constant(Tensor::full(&[t, l], fill));
        let h = highlight_text(&mut g, ev, m, ptv).unwrap();
        let want = if fill == 1.0 { e.clone() } else { tile(&pt, t) };
        ok &= g.value(h).data() == want.data();
    }

    // dH/dM per channel equals X - P.
    let mut worst: f64 = 0.0;
    let mr = rand_tensor(&mut rng, &[t, hw], 1.0).map(|v| 0.5 + 0.5 * v);
    for ch in 0..3 {
        let mut g = Graph::new();
        let (xv, pvv) = (g.constant(x.clone()), g.constant(pv.clone()));
        let m = g.leaf(mr.clone());
        let h = highlight_region(&mut g, xv, m, pvv).unwrap();
        let sel = Tensor::new(&[t, hw, 3], (0..t * hw * 3).map(|i| f64::from(u8::from(i % 3 == ch))).collect());
        let picked = g.mul_const(h, Rc::new(sel));
        let s = g.sum(picked);
        let grad = g.backward(s).get(m).unwrap().clone();
        for b in 0..t {
            for p in 0..hw {
                let want = x.data()[(b * hw + p) * 3 + ch] - pv.data()[p * 3 + ch];
                worst = worst.max((grad.data()[b * hw + p] - want).abs());
            }
        }
    }
    let mt = rand_tensor(&mut rng, &[t, l], 1.0).map(|v| 0.5 + 0.5 * v);
    for ch in 0..c {
        let mut g = Graph::new();
        let (ev, ptv) = (g.constant(e.clone()), g.constant(pt.clone()));
        let m = g.leaf(mt.clone());
        let h = highlight_text(&mut g, ev, m, ptv).unwrap();
        let sel = Tensor::new(&[t, l, c], (0..t * l * c).map(|i| f64::from(u8::from(i % c == ch))).collect());
        let picked = g.mul_const(h, Rc::new(sel));
        let s = g.sum(picked);
        let grad = g.backward(s).get(m).unwrap().clone();
        for b in 0..t {
            for i in 0..l {
                let want = e.data()[(b * l + i) * c + ch] - pt.data()[i * c + ch];
                worst = worst.max((grad.data()[b * l + i] - want).abs());
            }
        }
    }
    outcome(
        ok && worst < 1e-12,
        format!("identities bit-exact: {ok}; max |dH/dM - (X-P)| {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let vocab = ClassVocabulary::parse_list("a,b,c", true, 0.5).unwrap();
    let k = vocab.num_labels();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut draw = |ignore: bool| -> Vec<u8> {
            (0..64)
                .map(|_| {
                    if ignore && rng.gen_bool(0.1) {
                        IGNORE_LABEL
                    } else {
                        rng.gen_range(0..k as u8)
                    }
                })
                .collect()
        };
        let p = draw(false);
        let gt = draw(true);
        let mut inter = vec![0u64; k];
        let mut union = vec![0u64; k];
        for (&a, &b) in p.iter().zip(&gt) {
            if b == IGNORE_LABEL {
                continue;
            }
            for cls in 0..k as u8 {
                inter[cls as usize] += u64::from(a == cls && b == cls);
                union[cls as usize] += u64::from(a == cls || b == cls);
            }
        }
        let ious: Vec<f64> = (0..k).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        let Ok(r) = miou(
            &[LabelMap::new(8, 8, p).unwrap()],
            &[LabelMap::new(8, 8, gt).unwrap()],
            &vocab,
        ) else {
            mismatches += 1;
            continue;
        };
        let counts_ok = r
            .classes
            .iter()
            .enumerate()
            .all(|(c, ci)| ci.intersection == inter[c] && ci.union == union[c]);
        if !counts_ok || r.miou != want {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 1000 random 8x8 pairs"))
}

struct Ablation {
    json: serde_json::Value,
    dir: tempfile::TempDir,
    elapsed: Duration,
}

fn run_ablation() -> Result<Ablation, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_code"))
        .args(["ablate", "--profile", "desk", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = fs::read_to_string(dir.path().join("ablation.json")).map_err(|e| e.to_string())?;
    let json = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(Ablation {
        json,
        dir,
        elapsed: t0.elapsed(),
    })
}

fn criterion_6(ab: &Result<Ablation, String>) -> Outcome {
    let ab = match ab {
        Ok(a) => a,
        Err(e) => return outcome(false, format!("code ablate failed: {e}")),
    };
    let rows = ab.json["components"].as_array().cloned().unwrap_or_default();
    let sweep = ab.json["hcl_sweep"].as_array().cloned().unwrap_or_default();
    let labels: Vec<&str> = rows.iter().filter_map(|r| r["run"].as_str()).collect();
    let lambdas: Vec<f64> = sweep.iter().filter_map(|r| r["lambda_hcl"].as_f64()).collect();
    let avg = |label: &str| rows.iter().find(|r| r["run"] == label).and_then(|r| r["average"].as_f64());
    let structure = labels == ["baseline", "C", "C+W", "C+W+R"] && lambdas == [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
    let splits_ok = rows
        .iter()
        .chain(&sweep)
        .all(|r| r["miou"].as_object().is_some_and(|m| m.len() == 2));
    let (b, c) = (avg("baseline"), avg("C"));
    let improves = matches!((b, c), (Some(b), Some(c)) if c > b);
    outcome(
        structure && splits_ok && improves,
        format!(
            "rows {labels:?}, sweep {lambdas:?}; mean mIoU baseline {} -> C {}; ablate {:.0}s",
            b.map_or("?".into(), |v| format!("{v:.6}")),
            c.map_or("?".into(), |v| format!("{v:.6}")),
            ab.elapsed.as_secs_f64()
        ),
    )
}

/// Full desk run of the complete model, streaming metrics to memory.
struct DeskRun {
    metrics: Vec<u8>,
    trainer: Trainer,
    elapsed: Duration,
}

fn desk_run() -> DeskRun {
    let cfg = TrainConfig::desk();
    let t0 = Instant::now();
    let corpus = TrainCorpus::load(&cfg).unwrap();
    let mut trainer = Trainer::new(cfg, corpus).unwrap();
    let mut sink = NdjsonSink::new(Vec::new());
    trainer.run(&mut sink, None).unwrap();
    DeskRun {
        metrics: sink.into_inner(),
        trainer,
        elapsed: t0.elapsed(),
    }
}

fn criterion_5(run: &DeskRun) -> Outcome {
    let cfg = &run.trainer.cfg;
    let held = generate_synthetic_corpus(&synth_config(cfg, HELD_OUT_N, HELD_OUT_SEED)).unwrap();
    let ev = evaluate_synthetic(&run.trainer.state.model, &held, &ClassVocabulary::shapes(true), false).unwrap();
    let fast = run.elapsed < Duration::from_secs(15 * 60);
    outcome(
        ev.region_iou >= REGION_IOU_MIN && ev.word_accuracy >= WORD_ACC_MIN && fast,
        format!(
            "mean region IoU {:.4} (need >= {REGION_IOU_MIN}), word accuracy {:.4} (need >= {WORD_ACC_MIN}) on {} held-out objects; train {:.0}s on {} thread(s)",
            ev.region_iou,
            ev.word_accuracy,
            ev.objects,
            run.elapsed.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn criterion_7(run: &DeskRun, ab: &Result<Ablation, String>) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    match ab {
        Ok(ab) => {
            let other = fs::read(ab.dir.path().join("C_W_R.ndjson")).unwrap_or_default();
            let same = !other.is_empty() && other == run.metrics;
            pass &= same;
            notes.push(format!(
                "two full desk runs: {} metric lines, identical {same}",
                run.metrics.iter().filter(|&&b| b == b'\n').count()
            ));
            if let Ok((_, st)) = load_checkpoint(&ab.dir.path().join("C_W_R.ckpt")) {
                let bits = |s: &code_core::trainer::TrainState| {
                    s.model.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
                };
                let same = bits(&st) == bits(&run.trainer.state);
                pass &= same;
                notes.push(format!("final parameters identical {same}"));
            } else {
                pass = false;
                notes.push("ablation checkpoint missing".into());
            }
        }
        Err(_) => {
            pass = false;
            notes.push("no ablation stream to compare".into());
        }
    }

    let resume_ok = resume_matches(&mut notes);
    pass &= resume_ok;
    outcome(pass, notes.join("; "))
}

fn resume_matches(notes: &mut Vec<String>) -> bool {
    let cfg = TrainConfig::desk();
    let corpus = TrainCorpus::load(&cfg).unwrap();
    let mut cont = Trainer::new(cfg.clone(), corpus.clone()).unwrap();
    let mut first = VecSink::default();
    for _ in 0..20 {
        let r = cont.step().unwrap();
        code_core::trainer::MetricsSink::record(&mut first, &r).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut a = Trainer::new(cfg, corpus.clone()).unwrap();
    for _ in 0..10 {
        a.step().unwrap();
    }
    save_checkpoint(&a.cfg, &a.state, &path).unwrap();
    drop(a);
    let (cfg, state) = load_checkpoint(&path).unwrap();
    let mut b = Trainer::resume(cfg, corpus, state).unwrap();
    let resumed: Vec<_> = (0..10).map(|_| b.step().unwrap()).collect();
    let same_reports = resumed[..] == first.0[10..];
    let same_params = b.state.model.store.iter().zip(cont.state.model.store.iter()).all(|((_, x), (_, y))| {
        x.value.data().iter().map(|v| v.to_bits()).eq(y.value.data().iter().map(|v| v.to_bits()))
    });
    notes.push(format!("resume at step 10 matches 10 continuous steps: reports {same_reports}, params {same_params}"));
    same_reports && same_params
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

/// Positional numeric arguments select criteria, like a test-name filter.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=7).collect()
    } else {
        picked
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = selected();
    let on = |n: usize| want.contains(&n);
    let mut all = true;
    let mut emit = |n: usize, o: Outcome| {
        report(n, &o);
        all &= o.pass;
    };
    if on(1) {
        emit(1, timed(Some(Duration::from_secs(10)), criterion_1));
    }
    if on(2) {
        emit(2, timed(Some(Duration::from_secs(60)), criterion_2));
    }
    if on(3) {
        emit(3, timed(Some(Duration::from_secs(5)), criterion_3));
    }
    if on(4) {
        emit(4, timed(Some(Duration::from_secs(10)), criterion_4));
    }
    if on(5) || on(6) || on(7) {
        let ab = run_ablation();
        let run = desk_run();
        if on(5) {
            emit(5, criterion_5(&run));
        }
        if on(6) {
            emit(6, criterion_6(&ab));
        }
        if on(7) {
            emit(7, timed(None, || criterion_7(&run, &ab)));
        }
    }
    if !all {
        std::process::exit(1);
    }
}
