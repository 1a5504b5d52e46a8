use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use illumsplat::config::{TrainConfig, ABLATION_TOKENS};
use illumsplat::data_io::{
    frame_stem, load_checkpoint, load_dataset, read_rgb, save_checkpoint, synth_dataset, write_rgb, Dataset,
    SynthSpec,
};
use illumsplat::metrics::{psnr, ssim, EvalReport, FrameEval};
use illumsplat::trainer::{mean_psnr, reference_row, render_frame, train_loop_with, EmbeddingMode};
use illumsplat::{Error, Result};

#[derive(Parser)]
#[command(name = "illumsplat", version, about = "Exposure-robust dynamic Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic exposure-corrupted dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Render frames, by default with each frame's nearest training embedding.
    Render(RenderArgs),
    /// Render frames with the normal-exposure reference embedding.
    Correct(RenderArgs),
    /// Score predicted images against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 21)]
    frames: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ev_jitter: Option<f64>,
    /// Add a moving occluder that is masked out.
    #[arg(long)]
    tool: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the log and eval tables are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated modules to disable.
    #[arg(long, value_parser = parse_ablate)]
    ablate: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    embedding_mode: Option<EmbeddingMode>,
    /// Render only this dataset frame.
    #[arg(long)]
    frame: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// JSON report path; defaults to eval.json inside --pred.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    Ok((w, h))
}

fn parse_ablate(s: &str) -> std::result::Result<String, String> {
    TrainConfig::default().ablate(s).map_err(|_| {
        format!("expected a comma-separated subset of {}", ABLATION_TOKENS.join(","))
    })?;
    Ok(s.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<EmbeddingMode, String> {
    s.parse().map_err(|_| "expected correction, reconstruction or zero".to_string())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec {
        frames: a.frames,
        width: a.size.0,
        height: a.size.1,
        tool: a.tool,
        ..SynthSpec::default()
    };
    if let Some(j) = a.ev_jitter {
        spec.ev_jitter = j;
    }
    let m = synth_dataset(&spec, a.seed, &a.out)?;
    println!(
        "wrote {} frames ({}x{}) to {}: {} train, {} test",
        m.frames.len(),
        m.width,
        m.height,
        a.out.display(),
        m.train_idx.len(),
        m.test_idx.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(list) = &a.ablate {
        cfg.ablate(list)?;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let echo = cfg.to_text();
    if !a.quiet {
        eprint!("resolved config:\n{echo}");
    }
    let data = load_dataset(&a.data)?;
    let quiet = a.quiet;
    let out = train_loop_with(&cfg, &data, |row| {
        if !quiet && (row.iter + 1) % 100 == 0 {
            eprintln!("iter {}: total {:.5}", row.iter + 1, row.loss.total);
        }
    })?;
    save_checkpoint(&out.model, &echo, &a.out)?;
    write_text(&with_suffix(&a.out, ".log.tsv"), &out.log_tsv())?;
    let mut evals = String::from("iter\ttest_psnr\n");
    for (it, p) in &out.evals {
        evals.push_str(&format!("{it}\t{p:.4}\n"));
    }
    write_text(&with_suffix(&a.out, ".eval.tsv"), &evals)?;
    let modules = cfg.modules();
    let train = mean_psnr(&out.model, &data, modules, out.reference, data.train_idx())?;
    let test = mean_psnr(&out.model, &data, modules, out.reference, data.test_idx())?;
    println!(
        "trained {} iterations, {} gaussians: train PSNR {:.2} dB, test PSNR {:.2} dB",
        cfg.iterations,
        out.model.gaussians.len(),
        train,
        test
    );
    Ok(())
}

fn cmd_render(a: RenderArgs, default_mode: EmbeddingMode) -> Result<()> {
    let (model, echo) = load_checkpoint(&a.ckpt)?;
    let cfg = TrainConfig::from_text(&echo)?;
    let data: Dataset = load_dataset(&a.data)?;
    let mode = a.embedding_mode.unwrap_or(default_mode);
    let reference = reference_row(&cfg, &data)?;
    let frames: Vec<usize> = match a.frame {
        Some(i) if i < data.frames.len() => vec![i],
        Some(i) => return Err(Error::BadConfig(format!("frame {i} out of range"))),
        None => (0..data.frames.len()).collect(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for &i in &frames {
        let img = render_frame(&model, &data, cfg.modules(), reference, mode, i)?;
        write_rgb(&img, &a.out.join(frame_stem(i)))?;
    }
    println!("rendered {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = png_names(&a.pred)?;
    let gt = png_names(&a.gt)?;
    if pred != gt {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted images vs {} ground-truth images with different names",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::MissingFile(a.pred.join("*.png")));
    }
    let mut frames = Vec::new();
    for name in &pred {
        let p = read_rgb(&a.pred.join(name))?;
        let g = read_rgb(&a.gt.join(name))?;
        let mask = match &a.mask {
            Some(dir) => Some(read_rgb(&dir.join(name))?.gray().map(|v| if v >= 0.5 { 1.0 } else { 0.0 })),
            None => None,
        };
        frames.push(FrameEval {
            name: name.clone(),
            psnr: psnr(&p, &g, mask.as_ref())?,
            ssim: ssim(&p, &g)?,
        });
    }
    let policy = if a.mask.is_some() {
        "psnr over mask pixels, ssim full frame"
    } else {
        "full frame"
    };
    let report = EvalReport::new(frames, policy);
    print!("{}", report.to_tsv());
    let json = a.json.unwrap_or_else(|| a.pred.join("eval.json"));
    write_text(&json, &(report.to_json() + "\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a, EmbeddingMode::Reconstruction),
        Command::Correct(a) => cmd_render(a, EmbeddingMode::Correction),
        Command::Eval(a) => cmd_eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
