//! One function per subcommand. Each echoes its resolved config into the
//! output directory before doing any work.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qtune_core::dataset::{ingest_dataset, Split};
use qtune_core::entropy::{build_huffman_tables, measure_encoded, ExportMetadata, QTableExport, RateReport};
use qtune_core::jpeg::{decode_pipeline, encode_pipeline, Channel, ColorTransform, CompressionKernels, ImageRgb};
use qtune_core::losses::LossConfig;
use qtune_core::metrics;
use qtune_core::sweep::{run_sweep, sweep_losses, SweepRow};
use qtune_core::trainer::{Checkpoint, HistoryRow, TrainConfig, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot;

pub const CONFIG_ECHO: &str = "resolved_config.toml";

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    Ok(())
}

/// Loads the dataset and sizes the classifier head to it.
fn load_data(cfg: &mut RunConfig) -> Result<Split> {
    let split = ingest_dataset(&cfg.dataset).context("loading dataset")?;
    cfg.train.classifier.num_classes = split.train.num_classes.max(2);
    Ok(split)
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HistoryRow::CSV_HEADER)?;
    for r in rows {
        w.write_record(r.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub mode: String,
    pub classifier_params: usize,
    pub accuracy: f64,
    pub topk: Option<(usize, f64)>,
    pub mean_kb: f64,
    pub median_kb: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub penalty: f64,
    pub escapes: u64,
}

fn metadata(loss: &LossConfig, seed: u64) -> ExportMetadata {
    ExportMetadata { lambda: loss.lambda, lambda1: loss.lambda1, c: loss.c, seed }
}

fn export_json(kernels: &CompressionKernels, train: &TrainConfig) -> Result<QTableExport> {
    Ok(QTableExport::new(kernels, metadata(&train.loss, train.seed)))
}

/// Trains (or resumes from `kernels.checkpoint`) and writes checkpoint,
/// history, exported tables and a summary.
pub fn cmd_train(mut cfg: RunConfig) -> Result<TrainSummary> {
    let data = load_data(&mut cfg)?;
    prepare_out(&cfg)?;
    let mut trainer = match &cfg.kernels.checkpoint {
        Some(p) => Trainer::resume(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?, &cfg.train, &data)?,
        None => Trainer::new(&cfg.train, &data)?,
    };
    let outcome = trainer.run();
    let ck = trainer.checkpoint();
    ck.save(&cfg.out.join("checkpoint.json"))?;
    write_history(&cfg.out.join("history.csv"), trainer.history())?;
    outcome.context("training aborted; checkpoint holds the last good state")?;

    let ev = trainer.evaluate()?;
    let state = trainer.state();
    fs::write(cfg.out.join("qtables.json"), export_json(&state.kernels, trainer.config())?.to_json()?)?;
    let summary = TrainSummary {
        mode: format!("{:?}", trainer.config().mode).to_lowercase(),
        classifier_params: state.classifier.param_count(),
        accuracy: ev.top1,
        topk: ev.topk,
        mean_kb: ev.mean_kb,
        median_kb: ev.rate.median_kb(),
        psnr: ev.psnr,
        ssim: ev.ssim,
        penalty: qtune_core::losses::penalty_value(&state.kernels, &trainer.config().loss),
        escapes: ev.rate.escapes,
    };
    fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct SweepCsvRow {
    lambda: f64,
    c: f64,
    lambda1: f64,
    mean_kb: Option<f64>,
    accuracy: Option<f64>,
    psnr: Option<f64>,
    ssim: Option<f64>,
    status: String,
}

/// One training per λ (or c); failed runs are recorded and skipped.
pub fn cmd_sweep(mut cfg: RunConfig) -> Result<Vec<SweepRow>> {
    let data = load_data(&mut cfg)?;
    let losses: Vec<LossConfig> = if !cfg.sweep.cs.is_empty() {
        cfg.sweep.cs.iter().map(|&c| LossConfig { c, ..cfg.train.loss }).collect()
    } else if !cfg.sweep.lambdas.is_empty() {
        sweep_losses(&cfg.train.loss, &cfg.sweep.lambdas, cfg.sweep.coupled)
    } else {
        bail!("sweep needs λ values (--lambda a,b,… or [sweep] lambdas) or c values");
    };
    prepare_out(&cfg)?;
    let results = run_sweep(&cfg.train, &losses, &data);
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    let mut ok = Vec::new();
    for (i, (loss, res)) in results.into_iter().enumerate() {
        let row = match res {
            Ok((ck, ev)) => {
                ck.save(&cfg.out.join(format!("checkpoint_{i}.json")))?;
                let r = SweepRow::from_eval(&loss, None, &ev);
                ok.push(r.clone());
                SweepCsvRow {
                    lambda: loss.lambda,
                    c: loss.c,
                    lambda1: loss.lambda1,
                    mean_kb: Some(r.mean_kb),
                    accuracy: Some(r.accuracy),
                    psnr: Some(r.psnr),
                    ssim: Some(r.ssim),
                    status: "ok".into(),
                }
            }
            Err(e) => SweepCsvRow {
                lambda: loss.lambda,
                c: loss.c,
                lambda1: loss.lambda1,
                mean_kb: None,
                accuracy: None,
                psnr: None,
                ssim: None,
                status: format!("failed: {e}"),
            },
        };
        w.serialize(row)?;
    }
    w.flush()?;
    let pts: Vec<(f64, f64)> = ok.iter().map(|r| (r.mean_kb, r.accuracy)).collect();
    let svg = plot::line_chart("Rate-accuracy", "mean KB / image", "top-1 accuracy", &[("learned tables", pts)]);
    fs::write(cfg.out.join("rate_accuracy.svg"), svg)?;
    Ok(ok)
}

/// Kernels and colour transform from a checkpoint, a Q-table JSON, or standard tables.
pub fn resolve_kernels(cfg: &RunConfig) -> Result<(CompressionKernels, ColorTransform)> {
    let k = &cfg.kernels;
    if let Some(p) = &k.checkpoint {
        let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
        return Ok((ck.state.kernels, ck.state.color));
    }
    if let Some(p) = &k.qtables {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return Ok((QTableExport::from_json(&text)?.deployed_kernels(), ColorTransform::jpeg()));
    }
    if let Some(q) = k.quality {
        return Ok((CompressionKernels::standard(q)?, ColorTransform::jpeg()));
    }
    bail!("no kernel source: pass --checkpoint, --qtables or --quality")
}

#[derive(Debug, Serialize)]
struct RateCsvRow {
    image_id: usize,
    y_bits: u64,
    cb_bits: u64,
    cr_bits: u64,
    total_bits: u64,
    kb: f64,
}

/// Fits tables on the training split and measures the validation split.
pub fn cmd_rate(mut cfg: RunConfig) -> Result<RateReport> {
    let data = load_data(&mut cfg)?;
    let (kernels, ct) = resolve_kernels(&cfg)?;
    prepare_out(&cfg)?;
    if data.test.is_empty() {
        bail!("validation split is empty");
    }
    let codec = build_huffman_tables(&data.train.images, &ct, &kernels, cfg.train.rate_sample, cfg.seed)?;
    let enc = data.test.images.iter().map(|i| encode_pipeline(i, &ct, &kernels)).collect::<qtune_core::Result<Vec<_>>>()?;
    let report = measure_encoded(&enc, &codec)?;
    let mut w = csv::Writer::from_path(cfg.out.join("rate.csv"))?;
    for r in &report.images {
        w.serialize(RateCsvRow {
            image_id: r.image_id,
            y_bits: r.bits[Channel::Y.index()],
            cb_bits: r.bits[Channel::Cb.index()],
            cr_bits: r.bits[Channel::Cr.index()],
            total_bits: r.total(),
            kb: r.total() as f64 / qtune_core::entropy::BITS_PER_KB,
        })?;
    }
    w.flush()?;
    Ok(report)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            v.retain(|f| f.is_file() && is_image(f));
            v.sort();
            files.extend(v);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no input images");
    }
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct EncodeRow {
    pub file: String,
    pub output: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bits: u64,
}

/// Writes reconstructions beside per-image PSNR/SSIM/bits; tables are fitted on the inputs.
pub fn cmd_encode(cfg: RunConfig) -> Result<Vec<EncodeRow>> {
    let files = collect_inputs(&cfg.inputs)?;
    let (kernels, ct) = resolve_kernels(&cfg)?;
    prepare_out(&cfg)?;
    let images = files.iter().map(|f| ImageRgb::load(f)).collect::<qtune_core::Result<Vec<_>>>()?;
    let enc = images.iter().map(|i| encode_pipeline(i, &ct, &kernels)).collect::<qtune_core::Result<Vec<_>>>()?;
    let codec = qtune_core::entropy::build_from_encoded(&enc)?;
    let report = measure_encoded(&enc, &codec)?;
    let mut rows = Vec::new();
    for (i, (f, (img, e))) in files.iter().zip(images.iter().zip(&enc)).enumerate() {
        let dec = decode_pipeline(e, &ct, &kernels);
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let ext = f.extension().and_then(|s| s.to_str()).unwrap_or("png").to_ascii_lowercase();
        let name = format!("{i:04}_{stem}.{}", if ext == "png" { "png" } else { "ppm" });
        dec.save(&cfg.out.join(&name))?;
        rows.push(EncodeRow {
            file: f.display().to_string(),
            output: name,
            psnr: metrics::psnr(img, &dec)?,
            ssim: metrics::ssim(img, &dec)?,
            bits: report.images[i].total(),
        });
    }
    let mut w = csv::Writer::from_path(cfg.out.join("encode.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes `qtables.json` from a checkpoint and returns the tables for echoing.
pub fn cmd_export(cfg: RunConfig) -> Result<QTableExport> {
    let Some(p) = &cfg.kernels.checkpoint else {
        bail!("export needs --checkpoint");
    };
    let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    prepare_out(&cfg)?;
    let ex = export_json(&ck.state.kernels, &ck.config)?;
    fs::write(cfg.out.join("qtables.json"), ex.to_json()?)?;
    Ok(ex)
}

#[derive(Debug, Serialize)]
pub struct IngestReport {
    pub train_images: usize,
    pub test_images: usize,
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub train_per_class: Vec<usize>,
}

/// Loads the dataset and reports its shape.
pub fn cmd_ingest_check(cfg: RunConfig) -> Result<IngestReport> {
    let split = ingest_dataset(&cfg.dataset).context("loading dataset")?;
    prepare_out(&cfg)?;
    let first = split.train.images.first().expect("ingest rejects empty training splits");
    let mut per = vec![0; split.train.num_classes];
    for &l in &split.train.labels {
        per[l] += 1;
    }
    let rep = IngestReport {
        train_images: split.train.len(),
        test_images: split.test.len(),
        classes: split.train.num_classes,
        width: first.width(),
        height: first.height(),
        train_per_class: per,
    };
    fs::write(cfg.out.join("ingest.json"), serde_json::to_string_pretty(&rep)?)?;
    Ok(rep)
}

/// Formats a 64-entry table as eight rows.
pub fn table_text(name: &str, t: &[u16; 64]) -> String {
    let mut s = format!("{name}\n");
    for row in t.chunks(8) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>4}")).collect();
        s.push_str(&cells.join(""));
        s.push('\n');
    }
    s
}
