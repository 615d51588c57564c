//! Subcommand implementations. Each returns a serializable summary that the
//! binary prints as JSON on stdout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fcam_core::cam::{CamExtractor, CamMethod};
use fcam_core::checkpoint::{
    classifier_dir, decoder_dir, load_classifier, load_decoder, save_classifier, save_decoder,
};
use fcam_core::classifier::ClassifierBundle;
use fcam_core::config::RunConfig;
use fcam_core::datasets::{generate_synthetic, load_image, DatasetManifest, SampleRecord, Split, MANIFEST_FILE};
use fcam_core::decoder::{fcam_inference, Decoder};
use fcam_core::error::FcamError;
use fcam_core::evaluation::{evaluate, EvalReport, EvalSample, BOX_SIGMAS};
use fcam_core::losses::{LossConfig, LossTerms};
use fcam_core::raster::{load_cam, save_cam};
use fcam_core::timing::{time_cam_builders, TimingReport};
use fcam_core::training::{
    evaluate_model, finetune_decoder, grid_search_decoder, localize, train_classifier, CheckpointRecord,
    GridPoint, Localizer,
};
use fcam_core::ImageTensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::run::{eval_records, load_split, open_dataset, RunDir};

/// Map scored by `eval`: the decoder output or one of the CAM baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    Fcam,
    Cam(CamMethod),
}

impl EvalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMethod::Fcam => "fcam",
            EvalMethod::Cam(m) => m.name(),
        }
    }

    fn localizer<'a>(&self, decoder: Option<&'a Decoder>, run: &RunDir) -> CliResult<Localizer<'a>> {
        Ok(match self {
            EvalMethod::Fcam => Localizer::Fcam(
                decoder.ok_or_else(|| FcamError::CheckpointNotFound(decoder_dir(&run.root)))?,
            ),
            EvalMethod::Cam(m) => Localizer::Cam(*m),
        })
    }
}

impl FromStr for EvalMethod {
    type Err = FcamError;

    fn from_str(s: &str) -> Result<Self, FcamError> {
        match s {
            "fcam" => Ok(EvalMethod::Fcam),
            other => CamMethod::from_str(other).map(EvalMethod::Cam),
        }
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Writes the synthetic dataset. Refuses to touch an existing dataset
/// unless `force` is set.
pub fn generate(cfg: &RunConfig, out: Option<&Path>, force: bool) -> CliResult<GenerateSummary> {
    let root = out.unwrap_or(&cfg.dataset.root);
    if root.join(MANIFEST_FILE).exists() && !force {
        return Err(CliError::Usage(format!(
            "a dataset already exists at {}; pass --force to overwrite it",
            root.display()
        )));
    }
    let manifest = generate_synthetic(&cfg.dataset.synthetic, root)?;
    Ok(GenerateSummary {
        root: root.to_path_buf(),
        manifest,
    })
}

#[derive(Debug, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub epochs: usize,
    pub selected: CheckpointRecord,
    pub checkpoint: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<GridPoint>>,
}

/// Stage 1: classifier training.
pub fn train(run: &RunDir, cfg: &RunConfig) -> CliResult<StageSummary> {
    let ds = open_dataset(cfg)?;
    let train = load_split(&ds, Split::Train)?;
    let val = load_split(&ds, Split::Val)?;
    run.save_config(cfg)?;
    let mut bundle = ClassifierBundle::new(cfg.classifier.clone(), cfg.train.seed)?;
    let outcome = train_classifier(&mut bundle, &train, &val, &cfg.train)?;
    let dir = classifier_dir(&run.root);
    save_classifier(&dir, &bundle, cfg.train.seed, Some(outcome.selected.clone()))?;
    run.write_jsonl("logs/stage1_iterations.jsonl", &outcome.iterations)?;
    run.write_jsonl("logs/stage1_epochs.jsonl", &outcome.epochs)?;
    Ok(StageSummary {
        stage: "classifier",
        epochs: outcome.epochs.len(),
        selected: outcome.selected,
        checkpoint: dir,
        grid: None,
    })
}

fn load_bundle(run: &RunDir, cfg: &RunConfig) -> CliResult<ClassifierBundle> {
    let (bundle, _) = load_classifier(&classifier_dir(&run.root))?;
    if bundle.spec() != &cfg.classifier {
        return Err(FcamError::Config(
            "classifier settings differ from the stored stage-1 checkpoint".into(),
        )
        .into());
    }
    Ok(bundle)
}

/// Stage 2: decoder fine-tuning, optionally over the `(n⁻, α)` grid.
pub fn finetune(run: &RunDir, cfg: &RunConfig, grid: bool) -> CliResult<StageSummary> {
    let bundle = load_bundle(run, cfg)?;
    let ds = open_dataset(cfg)?;
    let train = load_split(&ds, Split::Train)?;
    let val = load_split(&ds, Split::Val)?;
    run.save_config(cfg)?;
    let mut decoder = Decoder::new(cfg.decoder.clone(), &bundle.spec().encoder, cfg.train.seed)?;
    let (outcome, points) = if grid {
        let g = grid_search_decoder(&bundle, &decoder, &train, &val, &cfg.train, &cfg.loss)?;
        decoder = g.decoder;
        (g.outcome, Some(g.points))
    } else {
        let o = finetune_decoder(&bundle, &mut decoder, &train, &val, &cfg.train, &cfg.loss)?;
        (o, None)
    };
    let dir = decoder_dir(&run.root);
    save_decoder(&dir, &decoder, bundle.spec(), Some(outcome.selected.clone()))?;
    run.write_jsonl("logs/stage2_iterations.jsonl", &outcome.iterations)?;
    run.write_jsonl("logs/stage2_epochs.jsonl", &outcome.epochs)?;
    if let Some(p) = &points {
        run.write_jsonl("logs/stage2_grid.jsonl", p)?;
    }
    Ok(StageSummary {
        stage: "decoder",
        epochs: outcome.epochs.len(),
        selected: outcome.selected,
        checkpoint: dir,
        grid: points,
    })
}

/// Compact view of a report for stdout and tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub method: String,
    pub split: String,
    pub max_box_acc: f64,
    pub max_box_acc_v2: f64,
    pub pxap: Option<f64>,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub classification_accuracy: f64,
    pub tau_robust_width: f64,
    pub interior_mass: f64,
}

impl ReportSummary {
    pub fn new(report: &EvalReport, split: Split) -> Self {
        Self {
            method: report.method.clone(),
            split: split.to_string(),
            max_box_acc: report.box_acc(0.5).unwrap_or(0.0),
            max_box_acc_v2: report.max_box_acc_v2,
            pxap: report.pxap,
            top1_loc: report.top1_loc,
            top5_loc: report.top5_loc,
            classification_accuracy: report.classification_accuracy,
            tau_robust_width: report.tau_robust_width,
            interior_mass: report.interior_mass,
        }
    }
}

pub fn box_curves_csv(report: &EvalReport) -> String {
    let mut s = String::from("tau");
    for sigma in BOX_SIGMAS {
        s.push_str(&format!(",sigma_{sigma}"));
    }
    s.push('\n');
    let taus = &report.box_curves[0].taus;
    for (i, t) in taus.iter().enumerate() {
        s.push_str(&format!("{t:.3}"));
        for c in &report.box_curves {
            s.push_str(&format!(",{}", c.scores[i]));
        }
        s.push('\n');
    }
    s
}

pub fn histogram_csv(report: &EvalReport) -> String {
    let n = report.histogram.len();
    let mut s = String::from("bin_low,bin_high,mass\n");
    for (i, m) in report.histogram.iter().enumerate() {
        s.push_str(&format!("{},{},{m}\n", i as f64 / n as f64, (i + 1) as f64 / n as f64));
    }
    s
}

/// Writes `<prefix>.json` plus curve CSVs next to it.
pub fn write_report(run: &RunDir, prefix: &str, report: &EvalReport) -> CliResult<PathBuf> {
    let path = run.write_text(&format!("{prefix}.json"), &report.to_json()?)?;
    run.write_text(&format!("{prefix}_box_curves.csv"), &box_curves_csv(report))?;
    run.write_text(&format!("{prefix}_histogram.csv"), &histogram_csv(report))?;
    if let Some(pr) = &report.pr_curve {
        run.write_text(&format!("{prefix}_pr.csv"), &pr.to_csv())?;
    }
    Ok(path)
}

/// Scores `method` on `records`; the top-k operating τ comes from `val`
/// when given.
fn score(
    run: &RunDir,
    bundle: &ClassifierBundle,
    decoder: Option<&Decoder>,
    method: EvalMethod,
    records: &[SampleRecord],
    val: Option<&[SampleRecord]>,
) -> CliResult<EvalReport> {
    let localizer = method.localizer(decoder, run)?;
    let tau = match val {
        Some(v) => Some(evaluate_model(bundle, localizer, v, None)?.operating_tau),
        None => None,
    };
    Ok(evaluate_model(bundle, localizer, records, tau)?)
}

fn save_maps(
    run: &RunDir,
    bundle: &ClassifierBundle,
    decoder: Option<&Decoder>,
    method: EvalMethod,
    records: &[SampleRecord],
    split: Split,
) -> CliResult<PathBuf> {
    let dir = run.dir(&format!("cams/{}_{}", method.name(), split))?;
    let localizer = method.localizer(decoder, run)?;
    let mut probs = BTreeMap::new();
    for r in records {
        let (cam, p) = localize(bundle, localizer, &r.image, r.label)?;
        save_cam(&dir.join(format!("{}.fcr", r.id)), &cam, Some(r.label))?;
        probs.insert(r.id.clone(), p);
    }
    run.write_json(&format!("cams/{}_{}/probs.json", method.name(), split), &probs)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub reports: Vec<ReportSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

pub fn eval(run: &RunDir, cfg: &RunConfig, methods: &[EvalMethod], split: Split, timing: bool) -> CliResult<EvalSummary> {
    let bundle = load_bundle(run, cfg)?;
    let decoder = if timing || methods.contains(&EvalMethod::Fcam) {
        Some(load_decoder(&decoder_dir(&run.root), bundle.spec())?.0)
    } else {
        None
    };
    let ds = open_dataset(cfg)?;
    let records = eval_records(cfg, &ds, split)?;
    let val = if cfg.eval.operating_tau_from_val && split != Split::Val {
        Some(eval_records(cfg, &ds, Split::Val)?)
    } else {
        None
    };
    let mut reports = Vec::new();
    for &m in methods {
        let report = score(run, &bundle, decoder.as_ref(), m, &records, val.as_deref())?;
        write_report(run, &format!("reports/{}_{}", m.name(), split), &report)?;
        if cfg.eval.save_cams {
            save_maps(run, &bundle, decoder.as_ref(), m, &records, split)?;
        }
        reports.push(ReportSummary::new(&report, split));
    }
    let timing = match (timing, &decoder, records.first()) {
        (true, Some(dec), Some(r)) => {
            let t = time_cam_builders(&bundle, dec, &r.image, r.label, cfg.eval.timing_runs)?;
            run.write_json("reports/timing.json", &t)?;
            Some(t)
        }
        _ => None,
    };
    Ok(EvalSummary { reports, timing })
}

/// Scores maps previously written by `eval` with `eval.save_cams = true`.
pub fn eval_stored(
    run: &RunDir,
    cfg: &RunConfig,
    cams: &Path,
    split: Split,
    operating_tau: Option<f64>,
) -> CliResult<ReportSummary> {
    let ds = open_dataset(cfg)?;
    let records = eval_records(cfg, &ds, split)?;
    let probs_path = cams.join("probs.json");
    let text = std::fs::read_to_string(&probs_path).map_err(|source| FcamError::Io {
        path: probs_path.clone(),
        source,
    })?;
    let probs: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(FcamError::from)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let (cam, _) = load_cam(&cams.join(format!("{}.fcr", r.id)))?;
        if (cam.height(), cam.width()) != (r.image.height(), r.image.width()) {
            return Err(FcamError::Record {
                id: r.id.clone(),
                message: format!("stored map is {}x{}", cam.height(), cam.width()),
            }
            .into());
        }
        let p = probs.get(&r.id).cloned().ok_or_else(|| FcamError::Record {
            id: r.id.clone(),
            message: "no class probabilities stored".into(),
        })?;
        samples.push(EvalSample {
            cam,
            boxes: r.gt_boxes.clone(),
            mask: r.gt_mask.clone(),
            probs: p,
            label: r.label,
        });
    }
    let name = cams
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stored".into());
    let report = evaluate(&name, &samples, operating_tau)?;
    write_report(run, &format!("reports/stored_{name}_{split}"), &report)?;
    Ok(ReportSummary::new(&report, split))
}

#[derive(Debug, Serialize)]
pub struct InferResult {
    pub image: PathBuf,
    pub method: String,
    pub predicted_class: usize,
    pub map_class: usize,
    pub probs: Vec<f64>,
    pub map: PathBuf,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Brings an arbitrary image to the evaluation view of the config.
fn to_model_view(img: ImageTensor, cfg: &RunConfig) -> CliResult<ImageTensor> {
    let (r, c) = (cfg.train.resize, cfg.train.crop);
    if (img.height(), img.width()) == (c, c) {
        return Ok(img);
    }
    let off = (r - c) / 2;
    Ok(img.resize(r, r)?.crop(off, off, c, c)?)
}

pub fn infer(
    run: &RunDir,
    cfg: &RunConfig,
    images: &[PathBuf],
    out: &Path,
    method: EvalMethod,
    class: Option<usize>,
) -> CliResult<Vec<InferResult>> {
    let bundle = load_bundle(run, cfg)?;
    let decoder = match method {
        EvalMethod::Fcam => Some(load_decoder(&decoder_dir(&run.root), bundle.spec())?.0),
        EvalMethod::Cam(_) => None,
    };
    if let Some(c) = class {
        bundle.check_class(c)?;
    }
    let mut results = Vec::new();
    for path in images {
        let img = to_model_view(load_image(path)?, cfg)?;
        let (probs, cam) = match (method, &decoder) {
            (EvalMethod::Fcam, Some(dec)) => fcam_inference(&bundle, dec, &img)?,
            (EvalMethod::Cam(m), _) => {
                let probs = bundle.forward_classify(&img)?;
                let c = class.unwrap_or_else(|| argmax(&probs));
                (probs, m.extract_full(&bundle, &img, c)?)
            }
            (EvalMethod::Fcam, None) => unreachable!("decoder loaded above"),
        };
        let predicted = argmax(&probs);
        let map_class = class.unwrap_or(predicted);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let map = out.join(format!("{stem}_{}.fcr", method.name()));
        save_cam(&map, &cam, Some(map_class))?;
        results.push(InferResult {
            image: path.clone(),
            method: method.name().into(),
            predicted_class: predicted,
            map_class,
            probs,
            map,
        });
    }
    Ok(results)
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
    pub fcam: ReportSummary,
    pub baseline: ReportSummary,
}

pub fn tau_curves_csv(fcam: &EvalReport, baseline: &EvalReport) -> String {
    let mut s = format!("tau,{},{}\n", fcam.method, baseline.method);
    let (a, b) = (&fcam.box_curves[1], &baseline.box_curves[1]);
    for i in 0..a.taus.len() {
        s.push_str(&format!("{:.3},{},{}\n", a.taus[i], a.scores[i], b.scores[i]));
    }
    s
}

/// n⁻ × α grid on validation, then the τ sweep of the winner against the
/// baseline CAM on test.
pub fn sweep(run: &RunDir, cfg: &RunConfig) -> CliResult<SweepSummary> {
    let bundle = load_bundle(run, cfg)?;
    let ds = open_dataset(cfg)?;
    let train = load_split(&ds, Split::Train)?;
    let val = load_split(&ds, Split::Val)?;
    let template = Decoder::new(cfg.decoder.clone(), &bundle.spec().encoder, cfg.train.seed)?;
    let g = grid_search_decoder(&bundle, &template, &train, &val, &cfg.train, &cfg.loss)?;
    let mut csv = String::from("n_minus,alpha,val_localization,selected_epoch\n");
    for p in &g.points {
        csv.push_str(&format!("{},{},{},{}\n", p.n_minus, p.alpha, p.val_localization, p.selected_epoch));
    }
    run.write_text("sweep/n_minus.csv", &csv)?;
    run.write_json("sweep/grid.json", &g.points)?;
    save_decoder(&run.root.join("sweep/decoder"), &g.decoder, bundle.spec(), Some(g.outcome.selected.clone()))?;
    let test = eval_records(cfg, &ds, Split::Test)?;
    let val_view = eval_records(cfg, &ds, Split::Val)?;
    let fcam = score(run, &bundle, Some(&g.decoder), EvalMethod::Fcam, &test, Some(&val_view))?;
    let base_method = EvalMethod::Cam(cfg.train.cam_method);
    let baseline = score(run, &bundle, None, base_method, &test, Some(&val_view))?;
    write_report(run, "sweep/fcam_test", &fcam)?;
    write_report(run, &format!("sweep/{}_test", base_method.name()), &baseline)?;
    run.write_text("sweep/tau_curves.csv", &tau_curves_csv(&fcam, &baseline))?;
    Ok(SweepSummary {
        best: g.points[g.best].clone(),
        points: g.points,
        fcam: ReportSummary::new(&fcam, Split::Test),
        baseline: ReportSummary::new(&baseline, Split::Test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub max_box_acc: f64,
    pub max_box_acc_v2: f64,
    pub pxap: Option<f64>,
    pub delta_max_box_acc: f64,
    pub delta_pxap: Option<f64>,
}

pub const ABLATION_ROWS: [&str; 4] = ["baseline", "+SR", "+SR+CRF", "+SR+CRF+ASC"];

fn ablation_terms(row: usize) -> LossTerms {
    LossTerms {
        sampling: true,
        crf: row >= 2,
        asc: row >= 3,
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("row,max_box_acc,max_box_acc_v2,pxap,delta_max_box_acc,delta_pxap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.row,
            r.max_box_acc,
            r.max_box_acc_v2,
            opt(r.pxap),
            r.delta_max_box_acc,
            opt(r.delta_pxap)
        ));
    }
    s
}

/// Baseline CAM followed by decoders trained with sampling, then CRF, then
/// the size constraint. Deltas are against the baseline row.
pub fn ablate(run: &RunDir, cfg: &RunConfig) -> CliResult<Vec<AblationRow>> {
    let bundle = load_bundle(run, cfg)?;
    let ds = open_dataset(cfg)?;
    let train = load_split(&ds, Split::Train)?;
    let val = load_split(&ds, Split::Val)?;
    let test = eval_records(cfg, &ds, Split::Test)?;
    let val_view = eval_records(cfg, &ds, Split::Val)?;
    let template = Decoder::new(cfg.decoder.clone(), &bundle.spec().encoder, cfg.train.seed)?;
    let mut reports = Vec::new();
    for (i, name) in ABLATION_ROWS.iter().enumerate() {
        let report = if i == 0 {
            score(run, &bundle, None, EvalMethod::Cam(cfg.train.cam_method), &test, Some(&val_view))?
        } else {
            let loss = LossConfig {
                terms: ablation_terms(i),
                ..cfg.loss.clone()
            };
            let mut decoder = template.clone();
            finetune_decoder(&bundle, &mut decoder, &train, &val, &cfg.train, &loss)?;
            score(run, &bundle, Some(&decoder), EvalMethod::Fcam, &test, Some(&val_view))?
        };
        let slug = name.replace('+', "_").trim_start_matches('_').to_lowercase();
        write_report(run, &format!("ablation/{slug}_test"), &report)?;
        reports.push(report);
    }
    let base = &reports[0];
    let base_acc = base.box_acc(0.5).unwrap_or(0.0);
    let rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .zip(&reports)
        .map(|(name, r)| {
            let acc = r.box_acc(0.5).unwrap_or(0.0);
            AblationRow {
                row: name.to_string(),
                max_box_acc: acc,
                max_box_acc_v2: r.max_box_acc_v2,
                pxap: r.pxap,
                delta_max_box_acc: acc - base_acc,
                delta_pxap: r.pxap.zip(base.pxap).map(|(a, b)| a - b),
            }
        })
        .collect();
    run.write_json("ablation/ablation.json", &rows)?;
    run.write_text("ablation/ablation.csv", &ablation_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in ["fcam", "gap_cam", "grad_cam", "center_baseline"] {
            assert_eq!(EvalMethod::from_str(name).unwrap().name(), name);
        }
        assert!(EvalMethod::from_str("score_cam").is_err());
    }

    #[test]
    fn ablation_rows_add_terms_in_order() {
        assert_eq!(ABLATION_ROWS, ["baseline", "+SR", "+SR+CRF", "+SR+CRF+ASC"]);
        let t: Vec<(bool, bool)> = (1..4).map(|i| (ablation_terms(i).crf, ablation_terms(i).asc)).collect();
        assert_eq!(t, vec![(false, false), (true, false), (true, true)]);
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
