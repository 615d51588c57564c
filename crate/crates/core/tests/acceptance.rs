//! Acceptance harness: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Reference implementations here are written independently of the
//! library code they check.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fcam_core::cam::{gap_cam_raw, gradcam_raw, CamMethod};
use fcam_core::classifier::{ClassifierBundle, ClassifierSpec, EncoderSpec, HeadKind};
use fcam_core::datasets::{synthetic_records, SampleRecord, Split};
use fcam_core::decoder::{fcam_inference, Decoder};
use fcam_core::evaluation::{evaluate, max_box_acc, max_box_acc_v2, pxap, EvalReport, EvalSample};
use fcam_core::losses::{
    asc_log_barrier, barrier_t_at, crf_loss, crf_loss_pooled, partial_cross_entropy, update_barrier_t, LossConfig,
    MapGrad,
};
use fcam_core::sampling::{otsu_threshold, PixelLabel, PseudoLabelMask, DEFAULT_BINS};
use fcam_core::timing::time_cam_builders;
use fcam_core::training::{eval_view, evaluate_model, finetune_decoder, train_classifier, Localizer};
use fcam_core::{BoundingBox, Cam, CamSource, ImageTensor, Result, RunConfig, SoftmaxMaps};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-6;
const PXAP_TOL: f64 = 1e-9;
const COSINE_MIN: f64 = 0.999;
const GAIN_MIN: f64 = 0.05;
const DESK_BUDGET: Duration = Duration::from_secs(20 * 60);
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const TIMING_RUNS: usize = 100;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn failed(id: usize, name: &'static str, err: impl std::fmt::Display) -> Outcome {
    outcome(id, name, false, format!("error: {err}"))
}

fn unit_planes(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
}

/// Max floor-guarded relative error of `grad` against central differences of `f`.
fn fd_error(maps: &SoftmaxMaps, grad: &MapGrad, eps: f64, f: &dyn Fn(&SoftmaxMaps) -> f64) -> f64 {
    let (h, w) = (maps.height(), maps.width());
    let mut worst = 0.0f64;
    for c in 0..2 {
        for p in 0..maps.len() {
            let shifted = |delta: f64| {
                let mut planes = [maps.background().to_vec(), maps.foreground().to_vec()];
                planes[c][p] += delta;
                let [bg, fg] = planes;
                f(&SoftmaxMaps::from_planes(h, w, bg, fg).unwrap())
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let analytic = grad.channel(c)[p];
            let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn criterion_gradients() -> Outcome {
    const NAME: &str = "gradient oracle";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (h, w) = (8, 8);
    let n = h * w;
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let maps = SoftmaxMaps::from_planes(h, w, unit_planes(&mut rng, n), unit_planes(&mut rng, n)).unwrap();
        let mut mask = PseudoLabelMask::unknown(h, w);
        for l in mask.labels.iter_mut() {
            *l = match rng.random_range(0..3) {
                0 => PixelLabel::Background,
                1 => PixelLabel::Foreground,
                _ => PixelLabel::Unknown,
            };
        }
        let image = ImageTensor::new(h, w, (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let sigma_xy = rng.random_range(1.0..4.0);
        let sigma_rgb = rng.random_range(0.1..0.5);
        // keep both sizes away from the barrier's branch point
        let t = loop {
            let t: f64 = rng.random_range(1.0..10.0);
            let clear = (0..2).all(|c| {
                let size = maps.channel(c).iter().sum::<f64>() / n as f64;
                (size - 1.0 / (t * t)).abs() > 1e-2
            });
            if clear {
                break t;
            }
        };

        let (_, g) = partial_cross_entropy(&maps, &mask).unwrap();
        worst[0] = worst[0].max(fd_error(&maps, &g, 1e-5, &|m| partial_cross_entropy(m, &mask).unwrap().0));
        let (_, g) = crf_loss(&maps, &image, sigma_xy, sigma_rgb).unwrap();
        worst[1] = worst[1].max(fd_error(&maps, &g, 1e-3, &|m| crf_loss(m, &image, sigma_xy, sigma_rgb).unwrap().0));
        let (_, g) = crf_loss_pooled(&maps, &image, sigma_xy, sigma_rgb, 2).unwrap();
        worst[2] = worst[2].max(fd_error(&maps, &g, 1e-3, &|m| {
            crf_loss_pooled(m, &image, sigma_xy, sigma_rgb, 2).unwrap().0
        }));
        let (_, g) = asc_log_barrier(&maps, t).unwrap();
        worst[3] = worst[3].max(fd_error(&maps, &g, 1e-4, &|m| asc_log_barrier(m, t).unwrap().0));
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e < GRAD_REL_TOL) && elapsed < ORACLE_BUDGET;
    outcome(
        1,
        NAME,
        pass,
        format!(
            "max rel err: partial_ce {:.2e}, crf {:.2e}, crf_pooled {:.2e}, asc {:.2e} (tol {GRAD_REL_TOL:.0e}); {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64()
        ),
    )
}

/// Brute-force Otsu: every edge `k / 256`, classes recounted from the pixels,
/// between-class variance compared as exact fractions.
fn otsu_reference(values: &[f32]) -> (f64, bool) {
    let bin = |v: f32| ((v as f64 * 256.0).floor() as usize).min(255);
    let first = bin(values[0]);
    if values.iter().all(|&v| bin(v) == first) {
        return (0.0, true);
    }
    let mut best: Option<(u128, u128, usize)> = None;
    for k in 1..256 {
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for &v in values {
            let b = bin(v) as i128;
            if (b as usize) < k {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // σ_b² ∝ (s0/n0 − s1/n1)² · n0 · n1 = (s0·n1 − s1·n0)² / (n0·n1)
        let d = (s0 * n1 - s1 * n0).unsigned_abs();
        let (num, den) = (d * d, (n0 * n1) as u128);
        match best {
            Some((bn, bd, _)) if num * bd <= bn * den => {}
            _ => best = Some((num, den, k)),
        }
    }
    (best.unwrap().2 as f64 / 256.0, false)
}

fn random_cam_values(rng: &mut ChaCha8Rng, n: usize, kind: usize) -> Vec<f32> {
    match kind {
        0 => (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
        1 => (0..n)
            .map(|_| {
                let centre = if rng.random_bool(0.3) { 0.8 } else { 0.15 };
                (centre + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0)
            })
            .collect(),
        2 => {
            let levels: Vec<f32> = (0..rng.random_range(2..6)).map(|_| rng.random_range(0.0..=1.0)).collect();
            (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect()
        }
        3 => (0..n).map(|_| rng.random_range(0..=256) as f32 / 256.0).collect(),
        _ => vec![rng.random_range(0.0..=1.0); n],
    }
}

fn criterion_otsu() -> Outcome {
    const NAME: &str = "otsu oracle";
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = Vec::new();
    for i in 0..100 {
        let (h, w) = (rng.random_range(4..40), rng.random_range(4..40));
        let values = random_cam_values(&mut rng, h * w, i % 5);
        let cam = Cam::from_unit(h, w, values.clone(), CamSource::Raw).unwrap();
        let got = otsu_threshold(&cam, DEFAULT_BINS).unwrap();
        let want = otsu_reference(&values);
        if (got.threshold, got.degenerate) != want {
            mismatches.push(format!("#{i}: {:?} vs {:?}", (got.threshold, got.degenerate), want));
        }
    }
    outcome(
        2,
        NAME,
        mismatches.is_empty(),
        format!(
            "{}/100 exact matches{}; {:.2}s",
            100 - mismatches.len(),
            mismatches.first().map(|m| format!(", first mismatch {m}")).unwrap_or_default(),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Average precision from sorted scores: the PR curve is evaluated once per
/// distinct score, `AP = Σ (R_k − R_{k−1}) P_k`.
fn sorted_ap(scores: &[f32], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

fn criterion_pxap() -> Outcome {
    const NAME: &str = "pxap oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 64;
        let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..=512) as f32 / 512.0).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        mask[rng.random_range(0..n)] = true;
        let cam = Cam::from_unit(8, 8, scores.clone(), CamSource::Raw).unwrap();
        let (ap, _) = pxap(&[cam], &[mask.clone()]).unwrap();
        worst = worst.max((ap - sorted_ap(&scores, &mask)).abs());
    }
    outcome(3, NAME, worst <= PXAP_TOL, format!("max |pxap - reference| = {worst:.2e} (tol {PXAP_TOL:.0e})"))
}

fn indicator_reports() -> Result<(f64, f64, EvalReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut samples = Vec::new();
    for _ in 0..40 {
        let (h, w) = (rng.random_range(16..64), rng.random_range(16..64));
        let (x0, y0) = (rng.random_range(0..w - 2), rng.random_range(0..h - 2));
        let (x1, y1) = (rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h));
        let gt = BoundingBox::new(x0, y0, x1, y1)?;
        let inside = |y: usize, x: usize| (y0..y1).contains(&y) && (x0..x1).contains(&x);
        let data = (0..h * w).map(|p| if inside(p / w, p % w) { 1.0 } else { 0.0 }).collect();
        let probs: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
        samples.push(EvalSample {
            cam: Cam::from_unit(h, w, data, CamSource::Raw)?,
            boxes: vec![gt],
            mask: None,
            probs,
            label: rng.random_range(0..10),
        });
    }
    let cams: Vec<Cam> = samples.iter().map(|s| s.cam.clone()).collect();
    let gts: Vec<Vec<BoundingBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let (at_half, _) = max_box_acc(&cams, &gts, 0.5)?;
    let (v2, _) = max_box_acc_v2(&cams, &gts)?;
    Ok((at_half, v2, evaluate("indicator", &samples, None)?))
}

fn criterion_metric_sanity(reports: &[&EvalReport]) -> Outcome {
    const NAME: &str = "metric sanity";
    let (at_half, v2, indicator) = match indicator_reports() {
        Ok(r) => r,
        Err(e) => return failed(4, NAME, e),
    };
    let all: Vec<&EvalReport> = std::iter::once(&indicator).chain(reports.iter().copied()).collect();
    let topk_ok = all.iter().all(|r| r.top5_loc >= r.top1_loc);
    let topk: Vec<String> = all
        .iter()
        .map(|r| format!("{} {:.3}>={:.3}", r.method, r.top5_loc, r.top1_loc))
        .collect();
    outcome(
        4,
        NAME,
        at_half == 1.0 && v2 == 1.0 && topk_ok,
        format!("indicator MaxBoxAcc(0.5) = {at_half}, V2 = {v2}; top5>=top1: {}", topk.join(", ")),
    )
}

fn toy_spec(rng: &mut ChaCha8Rng) -> ClassifierSpec {
    let stages = rng.random_range(1..4);
    ClassifierSpec {
        encoder: EncoderSpec {
            stem_width: rng.random_range(2..8),
            stem_convs: rng.random_range(1..3),
            stage_widths: (0..stages).map(|_| rng.random_range(2..12)).collect(),
            convs_per_stage: rng.random_range(1..3),
        },
        num_classes: rng.random_range(2..6),
        head: HeadKind::GapLinear,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn criterion_gradcam_identity() -> Outcome {
    const NAME: &str = "gradcam/cam identity";
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut lowest = f64::INFINITY;
    for m in 0..10 {
        let spec = toy_spec(&mut rng);
        let classes = spec.num_classes;
        let run = || -> Result<f64> {
            let bundle = ClassifierBundle::new(spec, 1000 + m)?;
            let side = 32;
            let image = ImageTensor::new(side, side, (0..3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect())?;
            let class = rng.random_range(0..classes);
            let (grad, _, _) = gradcam_raw(&bundle, &image, class)?;
            let feats = bundle.encode(&image)?;
            let gap = gap_cam_raw(&bundle, &feats.top, class)?;
            Ok(cosine(&grad, &gap))
        };
        match run() {
            Ok(c) => lowest = lowest.min(c),
            Err(e) => return failed(5, NAME, e),
        }
    }
    outcome(5, NAME, lowest > COSINE_MIN, format!("min cosine over 10 models = {lowest:.9} (need > {COSINE_MIN})"))
}

fn criterion_schedule() -> Outcome {
    const NAME: &str = "barrier schedule";
    let expected = |e: u32| 1.01f64.powf(e as f64).min(10.0);
    let mut cfg = LossConfig::default();
    let mut mismatches = 0;
    for epoch in 0..=300u32 {
        if cfg.barrier_t != expected(epoch) || barrier_t_at(epoch, 1.01, 10.0) != expected(epoch) {
            mismatches += 1;
        }
        cfg = update_barrier_t(cfg);
    }
    outcome(
        10,
        NAME,
        mismatches == 0,
        format!("{mismatches} mismatching epochs in 0..=300; t(300) = {}", barrier_t_at(300, 1.01, 10.0)),
    )
}

struct DeskRun {
    fcam: EvalReport,
    baseline: EvalReport,
    hash_before: String,
    hash_after: String,
    probs_match: bool,
    epoch_t_ok: bool,
    stage1: Duration,
    stage2: Duration,
    total: Duration,
    bundle: ClassifierBundle,
    decoder: Decoder,
    sample: ImageTensor,
    sample_label: usize,
}

fn split_of(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn desk_run() -> Result<DeskRun> {
    let start = Instant::now();
    let cfg = RunConfig::desk_scale();
    let records = synthetic_records(&cfg.dataset.synthetic)?;
    let view = |split| -> Result<Vec<SampleRecord>> {
        split_of(&records, split)
            .iter()
            .map(|r| eval_view(r, cfg.train.resize, cfg.train.crop))
            .collect()
    };
    let train = split_of(&records, Split::Train);
    let (val, test) = (view(Split::Val)?, view(Split::Test)?);

    let mut bundle = ClassifierBundle::new(cfg.classifier.clone(), cfg.train.seed)?;
    train_classifier(&mut bundle, &train, &val, &cfg.train)?;
    let stage1 = start.elapsed();

    let hash_before = bundle.param_hash();
    let mut decoder = Decoder::new(cfg.decoder.clone(), &cfg.classifier.encoder, cfg.train.seed)?;
    let s2 = Instant::now();
    let outcome = finetune_decoder(&bundle, &mut decoder, &train, &val, &cfg.train, &cfg.loss)?;
    let stage2 = s2.elapsed();
    let hash_after = bundle.param_hash();
    let epoch_t_ok = outcome
        .epochs
        .iter()
        .enumerate()
        .all(|(e, log)| log.barrier_t == 1.01f64.powf(e as f64).min(10.0));

    let operating = |loc| -> Result<f64> { Ok(evaluate_model(&bundle, loc, &val, None)?.operating_tau) };
    let fcam_loc = Localizer::Fcam(&decoder);
    let base_loc = Localizer::Cam(CamMethod::GapCam);
    let fcam = evaluate_model(&bundle, fcam_loc, &test, Some(operating(fcam_loc)?))?;
    let baseline = evaluate_model(&bundle, base_loc, &test, Some(operating(base_loc)?))?;

    let mut probs_match = true;
    for r in &test {
        let (with_decoder, _) = fcam_inference(&bundle, &decoder, &r.image)?;
        probs_match &= with_decoder == bundle.forward_classify(&r.image)?;
    }
    let total = start.elapsed();
    Ok(DeskRun {
        fcam,
        baseline,
        hash_before,
        hash_after,
        probs_match,
        epoch_t_ok,
        stage1,
        stage2,
        total,
        sample: test[0].image.clone(),
        sample_label: test[0].label,
        bundle,
        decoder,
    })
}

fn desk_criteria(run: &DeskRun) -> Vec<Outcome> {
    let (f, b) = (&run.fcam, &run.baseline);
    let f_box = f.box_acc(0.5).unwrap_or(f64::NAN);
    let b_box = b.box_acc(0.5).unwrap_or(f64::NAN);
    let f_pxap = f.pxap.unwrap_or(f64::NAN);
    let b_pxap = b.pxap.unwrap_or(f64::NAN);
    vec![
        outcome(
            6,
            "desk-scale improvement",
            f_pxap - b_pxap >= GAIN_MIN && f_box - b_box >= GAIN_MIN && run.total < DESK_BUDGET,
            format!(
                "PxAP {:.1} vs {:.1} ({:+.1}), MaxBoxAcc(0.5) {:.1} vs {:.1} ({:+.1}), need >= +{:.0}; stage1 {:.0}s, stage2 {:.0}s, total {:.0}s",
                100.0 * f_pxap,
                100.0 * b_pxap,
                100.0 * (f_pxap - b_pxap),
                100.0 * f_box,
                100.0 * b_box,
                100.0 * (f_box - b_box),
                100.0 * GAIN_MIN,
                run.stage1.as_secs_f64(),
                run.stage2.as_secs_f64(),
                run.total.as_secs_f64()
            ),
        ),
        outcome(
            7,
            "threshold robustness",
            f.tau_robust_width > b.tau_robust_width,
            format!("tau width {:.3} vs baseline {:.3}", f.tau_robust_width, b.tau_robust_width),
        ),
        outcome(
            8,
            "bimodality",
            f.interior_mass < b.interior_mass,
            format!("mass in (0.2, 0.8) {:.4} vs baseline {:.4}", f.interior_mass, b.interior_mass),
        ),
        outcome(
            9,
            "freeze contract",
            run.hash_before == run.hash_after && run.probs_match && f.classification_accuracy == b.classification_accuracy,
            format!(
                "hash unchanged: {}, probabilities identical: {}, accuracy {:.4} vs {:.4}",
                run.hash_before == run.hash_after,
                run.probs_match,
                f.classification_accuracy,
                b.classification_accuracy
            ),
        ),
    ]
}

fn criterion_timing(run: &DeskRun) -> Outcome {
    const NAME: &str = "timing";
    match time_cam_builders(&run.bundle, &run.decoder, &run.sample, run.sample_label, TIMING_RUNS) {
        Ok(t) => outcome(
            11,
            NAME,
            t.fcam_median_ms < t.gradcam_median_ms,
            format!(
                "median over {} runs at {}x{}: fcam {:.3} ms, gradcam {:.3} ms (gap_cam {:.3} ms)",
                t.runs, t.image_size.0, t.image_size.1, t.fcam_median_ms, t.gradcam_median_ms, t.gap_cam_median_ms
            ),
        ),
        Err(e) => failed(11, NAME, e),
    }
}

fn main() -> ExitCode {
    let mut results = vec![criterion_gradients(), criterion_otsu(), criterion_pxap(), criterion_gradcam_identity()];
    let mut schedule = criterion_schedule();
    match desk_run() {
        Ok(run) => {
            results.push(criterion_metric_sanity(&[&run.fcam, &run.baseline]));
            results.extend(desk_criteria(&run));
            results.push(criterion_timing(&run));
            if !run.epoch_t_ok {
                schedule.pass = false;
                schedule.detail.push_str("; training epochs logged a different t");
            } else {
                schedule.detail.push_str("; training epoch logs agree");
            }
        }
        Err(e) => {
            results.push(criterion_metric_sanity(&[]));
            for (id, name) in [
                (6, "desk-scale improvement"),
                (7, "threshold robustness"),
                (8, "bimodality"),
                (9, "freeze contract"),
                (11, "timing"),
            ] {
                results.push(failed(id, name, &e));
            }
        }
    }
    results.push(schedule);
    results.sort_by_key(|r| r.id);
    for r in &results {
        println!("[{}] {:>2} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.id, r.name, r.detail);
    }
    let failures = results.iter().filter(|r| !r.pass).count();
    println!("{} of {} criteria passed", results.len() - failures, results.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
