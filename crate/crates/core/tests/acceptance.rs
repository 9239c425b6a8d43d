//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Everything runs on one thread.

use std::time::{Duration, Instant};

use oa_vlm::caption::{
    parse_caption, render_caption, shuffle_sentences, tokenize, tokenize_words, TemplateKind, Vocabulary,
    OVERALL_FEATURES,
};
use oa_vlm::cli;
use oa_vlm::evaluation::{bleu4, grad_cam, localization_eval, osteophyte_prompt, retrieval_eval, zero_shot_eval};
use oa_vlm::model::{check_gradients, info_nce_loss, Batch, DualEncoder, ModelConfig};
use oa_vlm::nn::{finite_difference_check, Tape, Tensor, Var};
use oa_vlm::rng::seeded;
use oa_vlm::score::{perturb_negative, sample_record, OaScoreRecord, Site};
use oa_vlm::synth::{Dataset, Split, SplitRatios, SynthConfig};
use oa_vlm::training::{fit, Checkpoint, TrainConfig, TrainError, TrainOutcome};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Values with magnitude at least 0.1, away from the relu kink.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v.signum() * (0.1 + v.abs())
    })
}

/// Max relative error of `d/dx sum(w * op(x))` against central
/// differences over every coordinate of every input.
fn primitive_error<F>(inputs: &[Tensor<f64>], rng: &mut impl Rng, op: F) -> Result<f64, String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let forward = |xs: &[Tensor<f64>], w: &Tensor<f64>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).expect("weights match the output");
        let loss = tape.sum_all(prod);
        (tape, vars, loss)
    };
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = randn(rng, &shape);
    let (tape, vars, loss) = forward(inputs, &weights);
    let grads = tape.backward(loss);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let e = finite_difference_check(inputs[k].data(), &analytic, 1e-4, |theta| {
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::new(inputs[k].shape().to_vec(), theta.to_vec()).expect("same shape");
            let (tape, _, loss) = forward(&xs, &weights);
            tape.item(loss)
        })
        .map_err(err)?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn caption_batch(rng: &mut impl Rng, cfg: &ModelConfig, n: usize) -> Batch<f64> {
    let vocab = Vocabulary::grammar();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        let rec = sample_record(rng, format!("{i}"));
        let negative = perturb_negative(&rec, rng);
        let kind = TemplateKind::ALL[i % 3];
        pos.extend(tokenize(&render_caption(&rec, kind, true).text, &vocab, cfg.max_len));
        neg.extend(tokenize(&render_caption(&negative, kind, true).text, &vocab, cfg.max_len));
    }
    let images = Tensor::from_fn(&[n, 1, cfg.height, cfg.width], |_| rng.random_range(0.0..1.0));
    Batch { images, pos_tokens: pos, neg_tokens: neg }
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..20u64 {
        let mut rng = seeded(1000 + seed);
        let r = &mut rng;
        let mask: Vec<f64> = (0..8).map(|i| if i % 4 == 3 { 0.0 } else { 1.0 }).collect();
        let ids: Vec<u32> = (0..8).map(|i| (i * 3 % 5) as u32).collect();
        let ab = [randn(r, &[3, 4]), randn(r, &[4, 2])];
        record("matmul", primitive_error(&ab, r, |t, v| t.matmul(v[0], v[1]).unwrap())?);
        record("transpose", primitive_error(&[randn(r, &[3, 4])], r, |t, v| t.transpose(v[0]).unwrap())?);
        let xb = [randn(r, &[2, 3, 4]), randn(r, &[4])];
        record("add_bias", primitive_error(&xb, r, |t, v| t.add_bias(v[0], v[1]).unwrap())?);
        let pair = [randn(r, &[3, 4]), randn(r, &[3, 4])];
        record("add", primitive_error(&pair, r, |t, v| t.add(v[0], v[1]).unwrap())?);
        record("mul", primitive_error(&pair, r, |t, v| t.mul(v[0], v[1]).unwrap())?);
        record("scale", primitive_error(&[randn(r, &[3, 4])], r, |t, v| t.scale(v[0], -1.7))?);
        let xs = [randn(r, &[3, 4]), randn(r, &[1])];
        record("scale_by", primitive_error(&xs, r, |t, v| t.scale_by(v[0], v[1]).unwrap())?);
        record("exp", primitive_error(&[randn(r, &[3, 4])], r, |t, v| t.exp(v[0]))?);
        record("relu", primitive_error(&[off_kink(r, &[3, 4])], r, |t, v| t.relu(v[0]))?);
        let conv = [randn(r, &[2, 2, 6, 6]), randn(r, &[3, 2, 3, 3]), randn(r, &[3])];
        record("conv2d", primitive_error(&conv, r, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap())?);
        let conv1 = [randn(r, &[2, 4, 3]), randn(r, &[3, 3, 2]), randn(r, &[2])];
        record("conv1d", primitive_error(&conv1, r, |t, v| t.conv1d(v[0], v[1], Some(v[2])).unwrap())?);
        record(
            "embedding",
            primitive_error(&[randn(r, &[5, 3])], r, |t, v| t.embedding(v[0], &ids, 2, 4).unwrap())?,
        );
        record("mean_pool", primitive_error(&[randn(r, &[2, 3, 4, 4])], r, |t, v| t.mean_pool(v[0]).unwrap())?);
        record(
            "masked_mean_pool",
            primitive_error(&[randn(r, &[2, 4, 3])], r, |t, v| t.masked_mean_pool(v[0], &mask).unwrap())?,
        );
        record("mul_mask", primitive_error(&[randn(r, &[2, 4, 3])], r, |t, v| t.mul_mask(v[0], &mask).unwrap())?);
        record("l2_normalize", primitive_error(&[randn(r, &[3, 5])], r, |t, v| t.l2_normalize(v[0], 1e-8))?);
        record(
            "softmax_cross_entropy",
            primitive_error(&[randn(r, &[4, 3])], r, |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 1]).unwrap())?,
        );
        record("sum_all", primitive_error(&[randn(r, &[3, 4])], r, |t, v| t.sum_all(v[0]))?);

        let cfg = ModelConfig::default();
        let model = DualEncoder::<f64>::new(cfg, seed).map_err(err)?;
        let batch = caption_batch(r, &cfg, 4);
        record("total_loss", check_gradients(&model, &batch, 0.5, 4, 1e-4, r).map_err(err)?);
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let bad: Vec<String> = worst.iter().filter(|w| !(w.1 <= 1e-4)).map(|w| format!("{} {:.2e}", w.0, w.1)).collect();
    let pass = bad.is_empty() && elapsed < Duration::from_secs(60);
    Ok(outcome(
        pass,
        format!(
            "{} ops incl. total_loss, 20 seeds: max rel error {max:.2e} (<= 1e-4){}; {:.1}s (< 60s)",
            worst.len(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) },
            elapsed.as_secs_f64()
        ),
    ))
}

fn loss_closed_forms() -> Check {
    let mut details = Vec::new();
    let mut pass = true;
    for n in [2usize, 8, 32] {
        let s = Tensor::<f64>::full(&[n, n], 0.3);
        let l = info_nce_loss(&s, 0.07).map_err(err)?;
        let e = (l - (n as f64).ln()).abs();
        pass &= e <= 1e-6;
        details.push(format!("N={n} |L-ln N|={e:.1e}"));
    }
    let s = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).map_err(err)?;
    let l = info_nce_loss(&s, 0.1).map_err(err)?;
    let want = (-20.0f64).exp().ln_1p();
    let rel = (l - want).abs() / want;
    pass &= rel <= 1e-12;
    details.push(format!("saturated rel err {rel:.1e}"));
    Ok(outcome(pass, details.join(", ")))
}

fn grammar_round_trip() -> Check {
    let mut rng = seeded(3);
    let (mut checked, mut failures) = (0usize, Vec::new());
    for i in 0..1000 {
        let rec = sample_record(&mut rng, format!("r{i}"));
        for kind in TemplateKind::ALL {
            let caption = render_caption(&rec, kind, true);
            for shuffled in [false, true] {
                let text = if shuffled { shuffle_sentences(&caption, &mut rng).text } else { caption.text.clone() };
                checked += 1;
                let parsed = match parse_caption(&text) {
                    Ok(p) => p,
                    Err(e) => {
                        failures.push(format!("{} {kind:?}: {e}", rec.id));
                        continue;
                    }
                };
                let complete = match kind {
                    TemplateKind::Overall => OVERALL_FEATURES.iter().all(|f| parsed.summaries.contains_key(f)),
                    _ => OaScoreRecord::feature_sites().all(|fs| parsed.values.contains_key(&fs)),
                };
                if parsed.kl != Some(rec.kl) || !complete || !parsed.mismatches(&rec).is_empty() {
                    failures.push(format!("{} {kind:?} shuffled={shuffled}", rec.id));
                }
            }
        }
    }
    Ok(outcome(
        failures.is_empty(),
        format!("{}/{checked} captions recovered{}", checked - failures.len(), first_failure(&failures)),
    ))
}

fn first_failure(failures: &[String]) -> String {
    failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
}

fn negative_sampling() -> Check {
    let mut rng = seeded(4);
    let mut violations = 0usize;
    let mut fields = 0usize;
    for i in 0..10_000 {
        let rec = sample_record(&mut rng, format!("{i}"));
        let neg = perturb_negative(&rec, &mut rng);
        let mut pairs = vec![(rec.kl, neg.kl)];
        pairs.extend(OaScoreRecord::feature_sites().filter_map(|(f, s)| Some((rec.grade(f, s)?, neg.grade(f, s)?))));
        for (a, b) in pairs {
            fields += 1;
            if a.value().abs_diff(b.value()) < 2 {
                violations += 1;
            }
        }
    }
    Ok(outcome(violations == 0, format!("10000 perturbations, {fields} graded fields, {violations} violations")))
}

/// Clipped n-gram BLEU-4 by exhaustive pairwise scans.
fn brute_force_bleu(cand: &[String], reference: &[String]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        if cand.len() < n {
            return 0.0;
        }
        let total = cand.len() + 1 - n;
        let mut matched = 0usize;
        for i in 0..total {
            let gram = &cand[i..i + n];
            if cand[..i].windows(n).any(|w| w == gram) {
                continue;
            }
            let in_cand = cand.windows(n).filter(|w| *w == gram).count();
            let in_ref = reference.windows(n).filter(|w| *w == gram).count();
            matched += in_cand.min(in_ref);
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

fn bleu_oracle() -> Check {
    let mut rng = seeded(5);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in 0..100 {
        let a = sample_record(&mut rng, format!("a{i}"));
        let b = sample_record(&mut rng, format!("b{i}"));
        let ka = TemplateKind::ALL[rng.random_range(0..3)];
        let kb = TemplateKind::ALL[rng.random_range(0..3)];
        let cand = tokenize_words(&render_caption(&a, ka, rng.random_bool(0.5)).text);
        let reference = tokenize_words(&render_caption(&b, kb, rng.random_bool(0.5)).text);
        let got = bleu4(&cand, &reference).map_err(err)?;
        let want = brute_force_bleu(&cand, &reference);
        nonzero += (want > 0.0) as usize;
        worst = worst.max((got - want).abs());
    }
    let hand = bleu4(&tokenize_words("a b c d e"), &tokenize_words("a b c d f")).map_err(err)?;
    let hand_err = (hand - 0.2f64.powf(0.25)).abs();
    Ok(outcome(
        worst <= 1e-9 && hand_err <= 1e-12,
        format!("100 pairs ({nonzero} nonzero): max |diff| {worst:.1e}; hand case {hand:.6} (0.2^(1/4), err {hand_err:.1e})"),
    ))
}

struct DeskRun {
    data: Dataset,
    synth: SynthConfig,
    main: TrainOutcome,
    ablation: TrainOutcome,
    train_time: Duration,
}

fn desk_run() -> Result<DeskRun, String> {
    let synth = SynthConfig::default();
    let data = Dataset::in_memory(2472, &synth, &SplitRatios::default()).map_err(err)?;
    let start = Instant::now();
    let main = fit(&data, &TrainConfig::default()).map_err(err)?;
    let train_time = start.elapsed();
    let ablation = fit(&data, &TrainConfig { lambda: 0.0, ..TrainConfig::default() }).map_err(err)?;
    Ok(DeskRun { data, synth, main, ablation, train_time })
}

fn desk_training(run: &DeskRun) -> Check {
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| run.data.indices(s).len());
    let cfg = &run.main.checkpoint.config;
    let info_nce = run.main.report.final_info_nce().ok_or("no epochs ran")?;
    let bound = (cfg.batch_size as f64).ln() - 0.5;
    let test = run.data.indices(Split::Test);
    let zs = zero_shot_eval(&run.main.checkpoint.model, &run.data, &test).map_err(err)?;
    let image = &run.data.images[0];
    let pass = counts == [2002, 222, 248]
        && (image.height, image.width) == (64, 64)
        && cfg.epochs <= 20
        && cfg.batch_size == 32
        && info_nce < bound
        && zs.accuracy >= 0.4
        && run.train_time <= Duration::from_secs(30 * 60);
    Ok(outcome(
        pass,
        format!(
            "splits {counts:?}, {} epochs: final InfoNCE {info_nce:.3} (< {bound:.3}); zero-shot test accuracy {:.3} (>= 0.40); training {:.0}s (<= 1800s)",
            cfg.epochs,
            zs.accuracy,
            run.train_time.as_secs_f64()
        ),
    ))
}

fn negative_effect(run: &DeskRun) -> Check {
    let with = run.main.report.final_negative_cosine();
    let without = run.ablation.report.final_negative_cosine();
    let init = run.main.report.initial_negative_cosine;
    let same_init = init == run.ablation.report.initial_negative_cosine;
    Ok(outcome(
        same_init && with <= without - 0.05 && with < init,
        format!("cos(T_pos, T_neg): lambda=0.5 {with:.3}, lambda=0 {without:.3} (gap >= 0.05), initial {init:.3}"),
    ))
}

fn retrieval(run: &DeskRun) -> Check {
    let test = run.data.indices(Split::Test);
    let r = retrieval_eval(&run.main.checkpoint.model, &run.data, &test, 5, 0).map_err(err)?;
    Ok(outcome(
        r.mean_top1_bleu >= r.random_bleu + 0.05,
        format!(
            "top-1 BLEU-4 {:.3} vs random {:.3} (margin {:.3} >= 0.05, pool {})",
            r.mean_top1_bleu,
            r.random_bleu,
            r.mean_top1_bleu - r.random_bleu,
            test.len()
        ),
    ))
}

fn saliency(run: &DeskRun) -> Check {
    let model = &run.main.checkpoint.model;
    let test = run.data.indices(Split::Test);
    let (loc, mut maps) = localization_eval(model, &run.data, &test, &run.synth, 2).map_err(err)?;
    let vocab = Vocabulary::grammar();
    for &i in &test {
        let rec = run.data.record(i);
        let prompt = osteophyte_prompt(rec.osteophytes[Site::FemurMedial as usize], Site::FemurMedial);
        maps.push(grad_cam(model, &run.data.images[i], &rec.id, &prompt, &vocab).map_err(err)?);
    }
    let valid = maps.iter().all(|m| {
        let max = m.values.iter().copied().fold(0.0f32, f32::max);
        (m.height, m.width, m.values.len()) == (64, 64, 64 * 64)
            && m.values.iter().all(|v| (0.0..=1.0).contains(v))
            && (max == 1.0 || m.values.iter().all(|v| *v == 0.0))
    });
    Ok(outcome(
        valid && !loc.items.is_empty() && loc.mean_score > 1.0,
        format!(
            "mean localization score {:.3} (> 1.0) over {} prompts; {} maps shape/range {}",
            loc.mean_score,
            loc.items.len(),
            maps.len(),
            if valid { "ok" } else { "VIOLATED" }
        ),
    ))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let data_dir = p("data");
    let code = cli::run(["oavl", "--threads", "1", "synth", "--n", "300", "--seed", "11", "--out-dir", &data_dir]);
    if code != 0 {
        return Err(format!("synth exited {code}"));
    }
    for out in ["a.bin", "b.bin"] {
        let args = ["oavl", "--threads", "1", "train", "--manifest", &data_dir, "--epochs", "2", "--seed", "5", "--out"];
        let code = cli::run(args.into_iter().chain([p(out).as_str()]));
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
    }
    let a = std::fs::read(p("a.bin")).map_err(err)?;
    let b = std::fs::read(p("b.bin")).map_err(err)?;
    let identical = a == b;

    let loaded = Checkpoint::load(dir.path().join("a.bin").as_path()).map_err(err)?;
    loaded.save(dir.path().join("c.bin").as_path()).map_err(err)?;
    let resaved = std::fs::read(p("c.bin")).map_err(err)?;
    let round_trip = resaved == a;

    let mut rng = seeded(10);
    let (mut rejected, mut by_checksum) = (0, 0);
    let trials = 50;
    for _ in 0..trials {
        let mut bad = a.clone();
        let at = rng.random_range(16..bad.len());
        bad[at] ^= 1 << rng.random_range(0..8);
        match Checkpoint::from_bytes(&bad) {
            Err(TrainError::Checksum { .. }) => {
                rejected += 1;
                by_checksum += 1;
            }
            Err(_) => rejected += 1,
            Ok(_) => {}
        }
    }
    let mut payload = a.clone();
    let last = payload.len() - 5;
    payload[last] ^= 0x80;
    let payload_rejected = matches!(Checkpoint::from_bytes(&payload), Err(TrainError::Checksum { .. }));
    Ok(outcome(
        identical && round_trip && payload_rejected && rejected == trials,
        format!(
            "two train runs identical: {identical} ({} bytes); save-load-save identical: {round_trip}; payload flip rejected by checksum: {payload_rejected}; random bit flips rejected {rejected}/{trials} ({by_checksum} by checksum)",
            a.len()
        ),
    ))
}

fn report(number: usize, name: &str, result: Check, failed: &mut usize) {
    let (status, detail) = match result {
        Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => ("FAIL", format!("error: {e}")),
    };
    if status == "FAIL" {
        *failed += 1;
    }
    println!("[{status}] criterion {number:>2} {name}: {detail}");
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool");
    let failed = pool.install(|| {
        let mut failed = 0;
        report(1, "gradient fidelity", gradient_fidelity(), &mut failed);
        report(2, "loss closed forms", loss_closed_forms(), &mut failed);
        report(3, "grammar round trip", grammar_round_trip(), &mut failed);
        report(4, "negative sampling", negative_sampling(), &mut failed);
        report(5, "BLEU oracle", bleu_oracle(), &mut failed);
        match desk_run() {
            Ok(run) => {
                report(6, "desk-scale training", desk_training(&run), &mut failed);
                report(7, "negative-loss effect", negative_effect(&run), &mut failed);
                report(8, "retrieval", retrieval(&run), &mut failed);
                report(9, "saliency localization", saliency(&run), &mut failed);
            }
            Err(e) => {
                for (n, name) in [(6, "desk-scale training"), (7, "negative-loss effect"), (8, "retrieval"), (9, "saliency localization")] {
                    report(n, name, Err(e.clone()), &mut failed);
                }
            }
        }
        report(10, "determinism and persistence", determinism(), &mut failed);
        failed
    });
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
