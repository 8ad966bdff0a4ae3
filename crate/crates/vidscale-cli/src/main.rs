//! Batch command-line surface: train models, evaluate rescaling and
//! compression, rescale or compress individual clips, compute delta bitrate
//! between stored curves, and render rate-distortion plots.

mod plot;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidscale::codec::roundtrip;
use vidscale::data;
use vidscale::metrics::{self, Channel, RdCurve};
use vidscale::tensor::Tensor;
use vidscale::train::{
    self, average_row, evaluate_compress, evaluate_rescale, load_checkpoint, save_checkpoint,
    TrainConfig, Trainer,
};
use vidscale::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vidscale",
    version,
    about = "Learned video rescaling and compression"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus a loss-curve log.
    Train(TrainArgs),
    /// Evaluate rescaling quality over a corpus, writing a metric table.
    EvalRescale(EvalRescaleArgs),
    /// Sweep codec quality, writing rate-distortion curves and delta bitrate.
    EvalCompress(EvalCompressArgs),
    /// Downscale a frame folder with a trained model.
    Downscale(DownscaleArgs),
    /// Upscale a stored low-resolution frame folder with a trained model.
    Upscale(UpscaleArgs),
    /// Downscale, encode, decode and reconstruct one clip; write a report.
    Compress(CompressArgs),
    /// Delta bitrate between two stored curves (prints a percentage).
    Bdbr(BdbrArgs),
    /// Render stored rate-distortion curves to a PNG image.
    PlotRd(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Config overrides, key=value (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (loss_log.tsv, checkpoint/).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalRescaleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest path (defaults to the checkpoint config's data_manifest).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reconstruction draws per clip (1 = deterministic zero-noise draw).
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output metric table (TSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated QP sweep (defaults to the config's qp_set).
    #[arg(long)]
    qps: Option<String>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for curves and the delta-bitrate summary.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DownscaleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input frame folder (PNG frames in lexicographic order).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Quality override (defaults to the first entry of the config qp_set).
    #[arg(long)]
    qp: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BdbrArgs {
    /// Test curve (TSV: <bpp>\t<quality> per line).
    test: PathBuf,
    /// Anchor curve.
    anchor: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve files to plot.
    curves: Vec<PathBuf>,
    #[arg(long, default_value = "bpp")]
    x_label: String,
    #[arg(long, default_value = "quality")]
    y_label: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::EvalRescale(a) => cmd_eval_rescale(a),
        Cmd::EvalCompress(a) => cmd_eval_compress(a),
        Cmd::Downscale(a) => cmd_downscale(a),
        Cmd::Upscale(a) => cmd_upscale(a),
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Bdbr(a) => cmd_bdbr(a),
        Cmd::PlotRd(a) => cmd_plot(a),
    }
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.apply_override("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = Trainer::new(cfg)?;
    let log_path = a.out.join("loss_log.tsv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    trainer.run(&mut log)?;
    drop(log);
    let ckpt = a.out.join("checkpoint");
    save_checkpoint(
        &ckpt,
        &trainer.cfg,
        &trainer.model,
        &trainer.adam,
        trainer.iter,
    )?;
    println!(
        "trained {} iterations; wrote {} and {}",
        trainer.iter,
        log_path.display(),
        ckpt.display()
    );
    Ok(())
}

fn eval_clips(cfg: &TrainConfig, data_override: Option<&Path>) -> Result<Vec<(String, Tensor)>> {
    let manifest = data_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.data_manifest.clone())
        .ok_or_else(|| Error::Config("no data manifest (pass --data)".into()))?;
    let corpus = data::read_manifest(&manifest)?;
    let records = if corpus.eval.is_empty() {
        &corpus.train
    } else {
        &corpus.eval
    };
    if records.is_empty() {
        return Err(Error::Config("manifest has no clips".into()));
    }
    records
        .iter()
        .map(|r| Ok((r.source.clone(), data::load_clip(r, Some(cfg.clip_length))?)))
        .collect()
}

fn cmd_eval_rescale(a: EvalRescaleArgs) -> Result<()> {
    let (cfg, model, _, _) = load_checkpoint(&a.checkpoint)?;
    let clips = eval_clips(&cfg, a.data.as_deref())?;
    let draws = a.draws.unwrap_or(cfg.eval_draws);
    let rows = evaluate_rescale(&model, &clips, draws, a.seed)?;
    let avg = average_row(&rows);
    let mut f = BufWriter::new(File::create(&a.out)?);
    writeln!(f, "{}", train::EvalRow::header())?;
    for r in rows.iter().chain(std::iter::once(&avg)) {
        writeln!(f, "{}", r.line())?;
    }
    f.flush()?;
    println!(
        "psnr_rgb {:.4} dB / psnr_y {:.4} dB over {} clips -> {}",
        avg.psnr_rgb,
        avg.psnr_y,
        rows.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval_compress(a: EvalCompressArgs) -> Result<()> {
    let (cfg, model, _, _) = load_checkpoint(&a.checkpoint)?;
    let clips = eval_clips(&cfg, a.data.as_deref())?;
    let qps: Vec<u8> = match &a.qps {
        Some(csv) => csv
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u8>()
                    .map_err(|e| Error::Config(format!("bad qp {s:?}: {e}")))
            })
            .collect::<Result<_>>()?,
        None => cfg.qp_set.clone(),
    };
    let draws = a.draws.unwrap_or(cfg.eval_draws);
    let eval = evaluate_compress(
        &model,
        &clips,
        &qps,
        cfg.codec_kind,
        cfg.codec_mode,
        draws,
        a.seed,
    )?;
    std::fs::create_dir_all(&a.out)?;
    eval.system_psnr.write_tsv(&a.out.join("system_psnr.tsv"))?;
    eval.system_msssim
        .write_tsv(&a.out.join("system_msssim.tsv"))?;
    eval.anchor_psnr.write_tsv(&a.out.join("anchor_psnr.tsv"))?;
    eval.anchor_msssim
        .write_tsv(&a.out.join("anchor_msssim.tsv"))?;
    let mut summary = String::new();
    if qps.len() >= 4 {
        // delta bitrate is undefined when the quality ranges do not overlap
        // (an untrained or badly mismatched system); record that instead of
        // discarding the curves
        for (name, test, anchor) in [
            ("bdbr_psnr", &eval.system_psnr, &eval.anchor_psnr),
            ("bdbr_msssim", &eval.system_msssim, &eval.anchor_msssim),
        ] {
            match metrics::bdbr(test, anchor) {
                Ok(d) => summary.push_str(&format!("{name}\t{d:.2}\n")),
                Err(Error::Domain(msg)) => {
                    summary.push_str(&format!("{name}\tundefined\t# {msg}\n"))
                }
                Err(e) => return Err(e),
            }
        }
    } else {
        summary.push_str("# need at least 4 quality points for delta bitrate\n");
    }
    std::fs::write(a.out.join("bdbr.tsv"), &summary)?;
    println!("curves and delta bitrate -> {}", a.out.display());
    print!("{summary}");
    Ok(())
}

fn load_frames(dir: &Path) -> Result<Tensor> {
    let rec = data::scan_clip_dir(dir)?;
    data::load_clip(&rec, None)
}

fn cmd_downscale(a: DownscaleArgs) -> Result<()> {
    let (_, model, _, _) = load_checkpoint(&a.checkpoint)?;
    let clip = load_frames(&a.input)?;
    let x_l = model.downscale(&clip)?;
    data::save_clip_frames(&a.out, &x_l)?;
    println!(
        "wrote {} downscaled frames to {}",
        x_l.shape()[1],
        a.out.display()
    );
    Ok(())
}

fn cmd_upscale(a: UpscaleArgs) -> Result<()> {
    let (_, model, _, _) = load_checkpoint(&a.checkpoint)?;
    let x_l = load_frames(&a.input)?;
    let draws = model.upscale_draws(&x_l, a.draws.max(1), a.seed)?;
    // average the reconstruction draws pixelwise
    let mut avg = Tensor::zeros(draws[0].shape());
    for d in &draws {
        avg.add_in_place(d);
    }
    let avg = avg.map(|v| v / draws.len() as f64);
    data::save_clip_frames(&a.out, &avg)?;
    println!(
        "wrote {} upscaled frames to {}",
        avg.shape()[1],
        a.out.display()
    );
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let (cfg, model, _, _) = load_checkpoint(&a.checkpoint)?;
    let clip = load_frames(&a.input)?;
    let [_, t, _, h, w] = clip.dims5()?;
    let qp = a.qp.unwrap_or(cfg.qp_set[0]);
    let codec_cfg = cfg.codec_config(qp);
    let x_l = model.downscale(&clip)?;
    let (decoded, report) = roundtrip(&x_l, &codec_cfg)?;
    let recon = {
        let draws = model.upscale_draws(&decoded, cfg.eval_draws.max(1), a.seed)?;
        let mut avg = Tensor::zeros(draws[0].shape());
        for d in &draws {
            avg.add_in_place(d);
        }
        avg.map(|v| v / draws.len() as f64)
    };
    std::fs::create_dir_all(&a.out)?;
    data::save_clip_frames(&a.out.join("lr"), &decoded)?;
    data::save_clip_frames(&a.out.join("recon"), &recon)?;
    let bpp = metrics::bpp_for_dims(report.encoded_bytes, t, w, h);
    let psnr_rgb = metrics::psnr(&clip, &recon, Channel::Rgb)?;
    let psnr_y = metrics::psnr(&clip, &recon, Channel::Y)?;
    let msssim = metrics::ms_ssim(&clip, &recon)?;
    let mut f = BufWriter::new(File::create(a.out.join("report.tsv"))?);
    writeln!(f, "qp\tencoded_bytes\tbpp\tpsnr_rgb\tpsnr_y\tms_ssim")?;
    writeln!(
        f,
        "{qp}\t{}\t{bpp}\t{psnr_rgb}\t{psnr_y}\t{msssim}",
        report.encoded_bytes
    )?;
    f.flush()?;
    println!(
        "qp {qp}: {} bytes ({bpp:.4} bpp), psnr {psnr_rgb:.2} dB -> {}",
        report.encoded_bytes,
        a.out.display()
    );
    Ok(())
}

fn cmd_bdbr(a: BdbrArgs) -> Result<()> {
    let test = RdCurve::read_tsv(&a.test)?;
    let anchor = RdCurve::read_tsv(&a.anchor)?;
    let d = metrics::bdbr(&test, &anchor)?;
    println!("{d:.2}");
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    if a.curves.is_empty() {
        return Err(Error::Config(
            "plot-rd needs at least one curve file".into(),
        ));
    }
    let mut series = Vec::new();
    for path in &a.curves {
        let curve = RdCurve::read_tsv(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        series.push(plot::Series {
            label,
            points: curve.points.iter().map(|p| (p.bpp, p.quality)).collect(),
        });
    }
    plot::render_rd_plot(&a.out, &series, &a.x_label, &a.y_label)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
