//! The five commands behind the `ri` binary. Each returns its report; the
//! binary prints and saves it.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ri_core::metrics::{reliability, ReliabilityBin};
use ri_core::model::{RiModel, Variant};
use ri_core::nn::InitScheme;
use ri_core::synth::{generate_dataset, Normalizer};

use crate::checkpoint::Checkpoint;
use crate::data::{prepare, Prepared};
use crate::dataset::{load_dataset, save_dataset};
use crate::evaluate::{analyze as run_analysis, pooled, predict_validation, score_predictions, Scores, SeriesPrediction};
use crate::report::{value, Report};
use crate::train::{overfit as run_overfit, train as run_training, EpochRecord, TrainOutcome, OVERFIT_EPOCHS, OVERFIT_SERIES};
use crate::{Error, RunConfig};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    /// Set when the command ran but its checks did not pass.
    pub failure: Option<String>,
}

impl From<Report> for Outcome {
    fn from(report: Report) -> Self {
        Outcome { report, failure: None }
    }
}

/// `model.rif` → `model.best.rif`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

pub fn generate(cfg: &RunConfig) -> Result<Outcome, Error> {
    if cfg.series == 0 {
        return Err(Error::Config("`series` must be positive".into()));
    }
    let series = generate_dataset(&cfg.gen_params(), cfg.series)?;
    save_dataset(&cfg.dataset, &series)?;
    let frames: usize = series.iter().map(|s| s.len()).sum();
    let labeled: Vec<bool> = series.iter().flat_map(|s| s.labels.iter().flatten().copied()).collect();
    let positives = labeled.iter().filter(|&&l| l).count();
    let mut r = Report::new("generate", cfg);
    r.metric("series", series.len(), series.len());
    r.metric("frames", frames, frames);
    r.metric("labeled_frames", labeled.len(), labeled.len());
    r.metric("ri_frames", positives, labeled.len());
    r.metric("ri_base_rate", positives as f64 / labeled.len().max(1) as f64, labeled.len());
    Ok(r.into())
}

fn load_prepared(cfg: &RunConfig, normalizer: Option<Normalizer>) -> Result<Prepared, Error> {
    prepare(cfg, load_dataset(&cfg.dataset)?, normalizer)
}

fn score_metrics(r: &mut Report, prefix: &str, s: &Scores) {
    r.metric(&format!("{prefix}bs"), s.bs, s.n);
    r.metric(&format!("{prefix}bss_base_rate"), value(s.bss), s.n);
    r.metric(&format!("{prefix}bss_fixed_reference"), s.bss_fixed, s.n);
    r.metric(&format!("{prefix}hss"), value(s.hss), s.n);
    r.metric(&format!("{prefix}hss_textbook"), value(s.hss_textbook), s.n);
    r.metric(&format!("{prefix}acc"), s.acc, s.n);
}

fn log_progress(e: &EpochRecord, s: Option<&Scores>) {
    let mut line = format!(
        "epoch {:>4}  objective {:.5}  ce {:.5}  l2 {:.2e}  {:.1}s",
        e.epoch, e.objective, e.ce, e.l2, e.seconds
    );
    if let Some(s) = s {
        let _ = write!(
            line,
            "  | val bs {:.4} bss {} hss {} hss_textbook {}",
            s.bs,
            value(s.bss.map(|v| format!("{v:.4}"))),
            value(s.hss.map(|v| format!("{v:.4}"))),
            value(s.hss_textbook.map(|v| format!("{v:.4}")))
        );
    }
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn training_report(r: &mut Report, data: &Prepared, out: &TrainOutcome) {
    r.metric("split_fingerprint", format!("{:016x}", data.split.fingerprint()), data.split.train.len() + data.split.validation.len());
    r.metric("train_series", data.train.len(), data.train.len());
    r.metric("validation_series", data.validation.len(), data.validation.len());
    r.metric("train_base_rate", data.base_rate, data.train.len());
    r.metric("parameters", out.model.store.trainable_count(), out.model.store.len());
    if let Some(last) = out.log.epochs.last() {
        r.metric("final_objective", last.objective, last.epoch);
    }
    match &out.best {
        Some(b) => {
            r.metric("best_epoch", b.epoch, out.log.epochs.len());
            score_metrics(r, "best_", &b.scores);
        }
        None => r.metric("best_epoch", "undefined", out.log.epochs.len()),
    }
    r.table(
        "epochs",
        &["epoch", "objective", "ce", "l2", "seconds"],
        out.log.epochs.iter().map(|e| {
            vec![e.epoch.to_string(), e.objective.to_string(), e.ce.to_string(), e.l2.to_string(), format!("{:.3}", e.seconds)]
        }),
    );
    r.table(
        "validation",
        &["epoch", "bs", "bss_base_rate", "bss_fixed_reference", "hss", "hss_textbook", "acc"],
        out.log.evals.iter().map(|v| {
            let s = &v.scores;
            vec![
                v.epoch.to_string(),
                s.bs.to_string(),
                value(s.bss),
                s.bss_fixed.to_string(),
                value(s.hss),
                value(s.hss_textbook),
                s.acc.to_string(),
            ]
        }),
    );
}

/// Trains on the configured dataset, writing the final checkpoint and, when
/// validation produced a defined HSS, the best one beside it.
pub fn train(cfg: &RunConfig, quiet: bool) -> Result<Outcome, Error> {
    if cfg.overfit {
        return overfit(cfg, quiet);
    }
    let data = load_prepared(cfg, None)?;
    let out = run_training(cfg, &data, |e, s| {
        if !quiet {
            log_progress(e, s)
        }
    })?;
    out.final_checkpoint.save(&cfg.checkpoint)?;
    let mut r = Report::new("train", cfg);
    r.section("outputs");
    r.line(format!("final_checkpoint = {}", cfg.checkpoint.display()));
    match &out.best {
        Some(b) => {
            let path = best_checkpoint_path(&cfg.checkpoint);
            b.checkpoint.save(&path)?;
            r.line(format!("best_checkpoint = {}", path.display()));
        }
        None => r.line("best_checkpoint = none (no defined validation HSS)"),
    }
    training_report(&mut r, &data, &out);
    Ok(r.into())
}

/// Fails its check unless the training table becomes perfect within
/// the epoch budget.
fn overfit(cfg: &RunConfig, quiet: bool) -> Result<Outcome, Error> {
    let mut series = load_dataset(&cfg.dataset)?;
    if series.len() < OVERFIT_SERIES {
        return Err(Error::Config(format!(
            "overfit mode needs {OVERFIT_SERIES} series, the dataset has {}",
            series.len()
        )));
    }
    series.truncate(OVERFIT_SERIES);
    let out = run_overfit(&series, cfg.variant, cfg.seed, cfg.l2, |e| {
        if !quiet {
            let _ = writeln!(
                std::io::stderr(),
                "epoch {:>4}  objective {:.5}  | train hss {} hss_textbook {}",
                e.epoch,
                e.objective,
                value(e.hss.map(|v| format!("{v:.4}"))),
                value(e.hss_textbook.map(|v| format!("{v:.4}")))
            );
        }
    })?;
    let mut r = Report::new("train", cfg);
    r.metric("overfit_series", OVERFIT_SERIES, OVERFIT_SERIES);
    r.metric("ri_frames", out.positives, out.labelled);
    r.metric("reached_epoch", value(out.reached), out.epochs.len());
    if let Some(last) = out.epochs.last() {
        r.metric("final_objective", last.objective, last.epoch);
        r.metric("train_hss", value(last.hss), out.labelled);
        r.metric("train_hss_textbook", value(last.hss_textbook), out.labelled);
    }
    r.table(
        "epochs",
        &["epoch", "objective", "train_hss", "train_hss_textbook"],
        out.epochs.iter().map(|e| vec![e.epoch.to_string(), e.objective.to_string(), value(e.hss), value(e.hss_textbook)]),
    );
    let failure = out
        .reached
        .is_none()
        .then(|| format!("training HSS did not reach 1.0 within {OVERFIT_EPOCHS} epochs"));
    Ok(Outcome { report: r, failure })
}

/// Restores the configured checkpoint and predicts the validation split with
/// the checkpoint's normalizer.
fn restore(cfg: &RunConfig) -> Result<(RiModel, Prepared, Vec<SeriesPrediction>), Error> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let data = load_prepared(cfg, Some(ckpt.normalizer()?))?;
    if let Some(stored) = ckpt.split_fingerprint() {
        let now = data.split.fingerprint();
        if stored != now {
            return Err(Error::Mismatch(format!(
                "split fingerprint {stored:016x} in the checkpoint, {now:016x} from the configured dataset and seed"
            )));
        }
    }
    let mut model = RiModel::new(cfg.model_config(), InitScheme::Zeros, cfg.seed)?;
    ckpt.restore(&mut model)?;
    let preds = predict_validation(&mut model, &data)?;
    Ok((model, data, preds))
}

pub fn evaluate(cfg: &RunConfig) -> Result<Outcome, Error> {
    let (_, data, preds) = restore(cfg)?;
    let s = score_predictions(&preds, data.base_rate, cfg.threshold, cfg.reference_bs)?;
    let (y, p) = pooled(&preds);
    let bins = reliability(&y, &p, cfg.reliability_bins)?;
    let mut r = Report::new("evaluate", cfg);
    r.metric("validation_series", preds.len(), preds.len());
    r.metric("labeled_frames", s.n, s.n);
    r.metric("ri_frames", s.positives, s.n);
    r.metric("base_rate_reference", data.base_rate, data.train.len());
    score_metrics(&mut r, "", &s);
    r.metric("tp", s.table.tp, s.n);
    r.metric("fp", s.table.fp, s.n);
    r.metric("tn", s.table.tn, s.n);
    r.metric("fn", s.table.fn_, s.n);
    reliability_table(&mut r, &bins);
    Ok(r.into())
}

fn reliability_table(r: &mut Report, bins: &[ReliabilityBin]) {
    r.table(
        "reliability",
        &["lower", "upper", "count", "mean_forecast", "observed_frequency"],
        bins.iter().map(|b| {
            vec![
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                value(b.mean_forecast),
                value(b.observed_frequency),
            ]
        }),
    );
}

fn export_masks(path: &Path, preds: &[SeriesPrediction]) -> Result<usize, Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut rows = 0;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "series\tframe\ty\tx\tmask")?;
        for p in preds {
            let Some(m) = &p.mask else { continue };
            let (t_len, h, wd) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            for t in 0..t_len {
                for y in 0..h {
                    for x in 0..wd {
                        writeln!(w, "{}\t{t}\t{y}\t{x}\t{}", p.id, m.get(&[t, y, x]))?;
                        rows += 1;
                    }
                }
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

pub fn analyze(cfg: &RunConfig) -> Result<Outcome, Error> {
    let (_, _, preds) = restore(cfg)?;
    let a = run_analysis(&preds, cfg.reliability_bins)?;
    let mut r = Report::new("analyze", cfg);
    r.section("outputs");
    if cfg.variant.uses_self_attention() {
        let rows = export_masks(&cfg.masks, &preds)?;
        r.line(format!("masks = {} ({rows} rows, channel-mean mask per frame pixel)", cfg.masks.display()));
    } else {
        r.line(format!("masks = absent (variant {} has no self-attention)", cfg.variant));
    }
    r.metric("validation_series", a.series.len(), a.series.len());
    r.metric("delay_histogram_total", a.delay_histogram.values().sum::<usize>(), a.series.len());
    r.table(
        "span_histogram",
        &["span", "count"],
        a.span_histogram.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]),
    );
    r.table(
        "delay_histogram",
        &["delay", "count"],
        a.delay_histogram.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]),
    );
    r.table(
        "series",
        &["id", "retained_frames", "peak", "span", "delay"],
        a.series.iter().map(|&(id, len, peak, span, delay)| {
            vec![id.to_string(), len.to_string(), peak.to_string(), span.to_string(), delay.to_string()]
        }),
    );
    reliability_table(&mut r, &a.reliability);
    Ok(Outcome {
        report: r,
        failure: a.audit(),
    })
}

/// Trains every variant from the same seed on the same split and compares
/// their best validation scores.
pub fn ablate(cfg: &RunConfig, quiet: bool) -> Result<Outcome, Error> {
    let base = RunConfig {
        variant: Variant::Both,
        ..cfg.clone()
    };
    let data = load_prepared(&base, None)?;
    let mut rows = Vec::new();
    let mut failure = None;
    for variant in Variant::ALL {
        let vcfg = RunConfig { variant, ..cfg.clone() };
        vcfg.validate()?;
        if !quiet {
            let _ = writeln!(std::io::stderr(), "== variant {variant}");
        }
        let out = run_training(&vcfg, &data, |e, s| {
            if !quiet {
                log_progress(e, s)
            }
        })?;
        let (epoch, scores) = match (&out.best, out.log.evals.last()) {
            (Some(b), _) => (b.epoch, b.scores.clone()),
            (None, Some(last)) => (last.epoch, last.scores.clone()),
            (None, None) => return Err(Error::Check("no validation was run".into())),
        };
        if !scores.hss_textbook.is_some_and(|h| h > 0.0) && failure.is_none() {
            failure = Some(format!("variant {variant}: validation HSS {} is not positive", value(scores.hss_textbook)));
        }
        rows.push(vec![
            variant.to_string(),
            format!("{:016x}", data.split.fingerprint()),
            out.model.store.trainable_count().to_string(),
            epoch.to_string(),
            scores.bs.to_string(),
            value(scores.bss),
            scores.bss_fixed.to_string(),
            value(scores.hss),
            value(scores.hss_textbook),
            scores.acc.to_string(),
        ]);
    }
    let mut r = Report::new("ablate", cfg);
    r.metric("validation_series", data.validation.len(), data.validation.len());
    r.metric("base_rate_reference", data.base_rate, data.train.len());
    r.table(
        "ablation",
        &[
            "variant",
            "split_fingerprint",
            "parameters",
            "selected_epoch",
            "bs",
            "bss_base_rate",
            "bss_fixed_reference",
            "hss",
            "hss_textbook",
            "acc",
        ],
        rows,
    );
    Ok(Outcome { report: r, failure })
}
