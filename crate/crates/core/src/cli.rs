//! Command-line front end. Every subcommand is a thin adapter over the
//! library.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. A `--config FILE`
//! of `key=value` lines supplies flags for the subcommand; flags given on
//! the command line take precedence.

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::annot::{load_annotations, save_annotations, SigmaPolicy, DEFAULT_KNN, DEFAULT_KNN_SCALE};
use crate::density::render_density_threaded;
use crate::focus::{density_step, global_density_label, occlusion_level, occlusion_map, seg_mask, SegMask, DEFAULT_DENSITY_LEVELS};
use crate::grid::Grid;
use crate::loss::{
    check_loss, dm_loss, focal_seg_loss, global_density_loss, lp_loss, CheckKind, DmParams, Norm, DEFAULT_GAMMA,
    DEFAULT_LAMBDA_GD, DEFAULT_LAMBDA_OT, DEFAULT_LAMBDA_SEG, DEFAULT_LAMBDA_TV,
};
use crate::metrics::{crowding_split, mae_rmse, occlusion_split, read_records, write_records, EvalRecord};
use crate::occsim::{augment_sample, DEFAULT_BETA};
use crate::raster::{read_pfm, read_pgm, write_pfm, write_pgm, GrayImage};
use crate::toynet::{
    check_composite, deployed_density, evaluate_records, image_to_input, load_dataset, load_model, save_dataset, save_model,
    synth_dataset, train_with_progress, DatasetSpec, Precision, Stage, TrainConfig,
};

type CliResult = Result<(), Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "pointcount", version, about = "Supervision signals, losses and a toy trainer for point-annotated counting")]
#[command(args_override_self = true)]
struct Cli {
    /// Print the resolved configuration (and per-epoch progress) to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    /// Worker threads for commands that can use them.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    /// File of `key=value` lines supplying flags for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SigmaArgs {
    /// `adaptive` (k-nearest-neighbor bandwidth) or a fixed sigma in pixels.
    #[arg(long, default_value = "adaptive", value_parser = parse_sigma)]
    sigma: SigmaChoice,
    /// Neighbors for the adaptive bandwidth.
    #[arg(long, default_value_t = DEFAULT_KNN)]
    k: usize,
    /// Multiplier on the mean neighbor distance.
    #[arg(long, default_value_t = DEFAULT_KNN_SCALE)]
    scale: f64,
}

#[derive(Debug, Clone, Copy)]
enum SigmaChoice {
    Adaptive,
    Fixed(f64),
}

fn parse_sigma(s: &str) -> Result<SigmaChoice, String> {
    if s == "adaptive" {
        return Ok(SigmaChoice::Adaptive);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(SigmaChoice::Fixed(v)),
        _ => Err(format!("expected `adaptive` or a positive number, got {s:?}")),
    }
}

impl SigmaArgs {
    fn policy(&self) -> SigmaPolicy {
        match self.sigma {
            SigmaChoice::Adaptive => SigmaPolicy::Adaptive {
                k: self.k,
                scale: self.scale,
            },
            SigmaChoice::Fixed(s) => SigmaPolicy::Fixed(s),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossKind {
    L1,
    L2,
    FocalSeg,
    Gd,
    Dm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CheckChoice {
    L1,
    L2,
    FocalSeg,
    Gd,
    Dm,
    Toynet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Aux,
    Baseline,
    Distill,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Aux => Stage::Aux,
            StageArg::Baseline => Stage::Baseline,
            StageArg::Distill => Stage::Distill,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    None,
    Occlusion,
    Crowding,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a Gaussian density map (PFM) from annotations.
    Densify {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Foreground mask (PGM, 0/255) of discs of radius sigma.
    Segmask {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Occlusion multiplicity map (PFM) of discs of radius 2 sigma.
    Occmap {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Print the occlusion level of an annotation file.
    Occlevel {
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Print the global-density step over a set of annotation files (whole
    /// images as patches).
    Gdstep {
        #[arg(long, num_args = 1.., required = true)]
        annotations: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DENSITY_LEVELS)]
        levels: usize,
    },
    /// Print the global-density label of a patch.
    Gdlabel {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        step: u64,
        #[arg(long, default_value_t = DEFAULT_DENSITY_LEVELS)]
        levels: usize,
    },
    /// Occlusion-simulation augmentation of one image.
    Occlude {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        /// Blend-mask blur sigma; default is a quarter of each pasted radius.
        #[arg(long)]
        blur: Option<f64>,
        #[arg(long)]
        out_image: PathBuf,
        #[arg(long)]
        out_annotations: PathBuf,
        #[arg(long)]
        out_density: Option<PathBuf>,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Print a loss value for maps stored as PFM.
    Loss {
        #[arg(long, value_enum)]
        kind: LossKind,
        /// Prediction map (all kinds except gd).
        #[arg(long, required_unless_present = "probs")]
        pred: Option<PathBuf>,
        /// Target map; a 0/1 map for focal-seg.
        #[arg(long, required_unless_present = "probs")]
        target: Option<PathBuf>,
        /// Distilled map for the dm TV term; defaults to the target.
        #[arg(long)]
        distilled: Option<PathBuf>,
        /// Comma-separated class probabilities (gd).
        #[arg(long, value_delimiter = ',')]
        probs: Option<Vec<f64>>,
        /// True density level (gd).
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_OT)]
        lambda_ot: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_TV)]
        lambda_tv: f64,
        #[arg(long)]
        reg_eps: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Finite-difference check of a loss gradient on a seeded random problem.
    Gradcheck {
        #[arg(long, value_enum)]
        kind: CheckChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of the square maps (classes - 1 for gd).
        #[arg(long, default_value_t = 8)]
        side: usize,
        /// Relative tolerance; defaults to the kind's own.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(8..))]
        size: u64,
        #[arg(long, default_value_t = 5)]
        min_objects: usize,
        #[arg(long, default_value_t = 30)]
        max_objects: usize,
        #[arg(long, default_value_t = 0.8)]
        background: f64,
        #[arg(long, default_value_t = 1.0)]
        min_separation: f64,
    },
    /// Train a toy network on a dataset directory.
    TrainToy {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "baseline")]
        stage: StageArg,
        /// Frozen auxiliary model (required for distill).
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV of training loss and validation MAE.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_SEG)]
        lambda_s: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_GD)]
        lambda_c: f64,
        #[arg(long)]
        occlusion_aug: bool,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_DENSITY_LEVELS)]
        levels: usize,
        /// 1 or 2.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=2))]
        norm: u32,
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// Run a model on one image or on a dataset directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "baseline")]
        stage: StageArg,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        /// Density map output for `--image`.
        #[arg(long, requires = "image")]
        out_density: Option<PathBuf>,
        /// Dataset directory; writes evaluation records.
        #[arg(long, requires = "records")]
        data: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        sigma: SigmaArgs,
    },
    /// MAE and RMSE of an evaluation CSV, optionally per split.
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        split: SplitArg,
        #[arg(long, default_value_t = 1.5)]
        threshold: f64,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if cli.verbose {
        eprintln!("{cli:#?}");
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Splices the flags of a `--config` file right after the subcommand name, so
/// that flags repeated on the command line (which come later) win.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, Box<dyn Error>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some((pos, sub)) = argv
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s)))
    else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        let is_switch = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .is_some_and(|a| !a.get_action().takes_values());
        if is_switch {
            match value {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(format!("{}:{}: expected true or false, got {other:?}", path.display(), n + 1).into()),
            }
        } else {
            extra.push(format!("--{key}").into());
            extra.extend(value.split_whitespace().map(OsString::from));
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn write_stdout(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn read_map(path: &PathBuf) -> Result<Grid, Box<dyn Error>> {
    Ok(Grid::from_float_map(&read_pfm(path)?))
}

fn mask_image(mask: &SegMask) -> GrayImage {
    let pixels = mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    GrayImage::new(mask.width(), mask.height(), pixels).expect("mask buffer matches its shape")
}

fn execute(cli: &Cli) -> CliResult {
    let threads = cli.threads as usize;
    match &cli.command {
        Command::Densify { annotations, out, sigma } => {
            let ps = load_annotations(annotations)?;
            let discs = sigma.policy().discs(&ps)?;
            let map = render_density_threaded(&discs, ps.width(), ps.height(), threads)?;
            write_pfm(&map.grid().to_float_map(), out)?;
            write_stdout(&format!("count {}\n", map.mass()))
        }
        Command::Segmask { annotations, out, sigma } => {
            let ps = load_annotations(annotations)?;
            let mask = seg_mask(&sigma.policy().discs(&ps)?, ps.width(), ps.height());
            write_pgm(&mask_image(&mask), out)?;
            write_stdout(&format!("foreground {}\n", mask.foreground_pixels()))
        }
        Command::Occmap { annotations, out, sigma } => {
            let ps = load_annotations(annotations)?;
            let map = occlusion_map(&sigma.policy().discs(&ps)?, ps.width(), ps.height());
            write_pfm(&map.grid().to_float_map(), out)?;
            write_stdout(&format!("level {}\n", occlusion_level(&map)))
        }
        Command::Occlevel { annotations, sigma } => {
            let ps = load_annotations(annotations)?;
            let map = occlusion_map(&sigma.policy().discs(&ps)?, ps.width(), ps.height());
            write_stdout(&format!("{}\n", occlusion_level(&map)))
        }
        Command::Gdstep { annotations, levels } => {
            let sets = annotations.iter().map(load_annotations).collect::<Result<Vec<_>, _>>()?;
            let patches: Vec<_> = sets.iter().map(|p| (p, p.area())).collect();
            write_stdout(&format!("{}\n", density_step(&patches, *levels)?))
        }
        Command::Gdlabel { count, step, levels } => {
            if *step == 0 || *levels == 0 {
                return Err("step and levels must be at least 1".into());
            }
            write_stdout(&format!("{}\n", global_density_label(*count, *step, *levels).0))
        }
        Command::Occlude {
            image,
            annotations,
            seed,
            beta,
            blur,
            out_image,
            out_annotations,
            out_density,
            sigma,
        } => {
            let img = read_pgm(image)?;
            let ps = load_annotations(annotations)?;
            if (img.width(), img.height()) != (ps.width(), ps.height()) {
                return Err("image and annotation sizes differ".into());
            }
            let discs = sigma.policy().discs(&ps)?;
            let aug = augment_sample(&img, &ps, &discs, *seed, *beta, *blur);
            write_pgm(&aug.image, out_image)?;
            save_annotations(&aug.points, out_annotations)?;
            if let Some(p) = out_density {
                write_pfm(&aug.density.grid().to_float_map(), p)?;
            }
            write_stdout(&format!("pastes {} of {}\ncount {}\n", aug.pastes, aug.attempts, aug.density.mass()))
        }
        Command::Loss {
            kind,
            pred,
            target,
            distilled,
            probs,
            level,
            gamma,
            lambda_ot,
            lambda_tv,
            reg_eps,
            max_iter,
        } => {
            if let LossKind::Gd = kind {
                let probs = probs.as_ref().ok_or("gd needs --probs")?;
                let level = level.ok_or("gd needs --level")?;
                let r = global_density_loss(probs, crate::focus::GlobalDensityLabel(level), *gamma)?;
                return write_stdout(&format!("{}\n", r.value));
            }
            let pred = read_map(pred.as_ref().ok_or("--pred is required")?)?;
            let target = read_map(target.as_ref().ok_or("--target is required")?)?;
            let value = match kind {
                LossKind::L1 => lp_loss(&pred, &target, Norm::L1)?.value,
                LossKind::L2 => lp_loss(&pred, &target, Norm::L2)?.value,
                LossKind::FocalSeg => {
                    let mask = SegMask::from_grid(target).ok_or("focal-seg target must be a 0/1 map")?;
                    focal_seg_loss(&pred, &mask, *gamma)?.value
                }
                LossKind::Dm => {
                    let distilled = match distilled {
                        Some(p) => read_map(p)?,
                        None => target.clone(),
                    };
                    let defaults = DmParams::default();
                    let params = DmParams {
                        lambda_ot: *lambda_ot,
                        lambda_tv: *lambda_tv,
                        reg_eps: reg_eps.unwrap_or(defaults.reg_eps),
                        max_iter: max_iter.unwrap_or(defaults.max_iter),
                        tol: defaults.tol,
                    };
                    let r = dm_loss(&pred, &target, &distilled, &params)?;
                    if !r.ot_converged {
                        eprintln!("warning: Sinkhorn did not converge");
                    }
                    return write_stdout(&format!(
                        "{}\ncount {}\not {}\ntv {}\n",
                        r.result.value, r.count_term, r.ot_term, r.tv_term
                    ));
                }
                LossKind::Gd => unreachable!("handled above"),
            };
            write_stdout(&format!("{value}\n"))
        }
        Command::Gradcheck { kind, seed, side, tol } => {
            let kind = match kind {
                CheckChoice::L1 => CheckKind::L1,
                CheckChoice::L2 => CheckKind::L2,
                CheckChoice::FocalSeg => CheckKind::FocalSeg,
                CheckChoice::Gd => CheckKind::GlobalDensity,
                CheckChoice::Dm => CheckKind::Dm,
                CheckChoice::Toynet => {
                    if *side < 4 {
                        return Err("toynet check needs --side of at least 4".into());
                    }
                    let c = check_composite(*seed, *side, tol.unwrap_or(1e-3));
                    return write_stdout(&format!("{} ({} skipped at ReLU kinks)\n", c.report, c.skipped));
                }
            };
            if *side < 2 {
                return Err("--side must be at least 2".into());
            }
            let mut report = check_loss(kind, *seed, *side)?;
            if let Some(t) = tol {
                report.passed = report.max_rel_err < *t;
            }
            write_stdout(&format!("{report}\n"))
        }
        Command::Synth {
            out_dir,
            count,
            seed,
            size,
            min_objects,
            max_objects,
            background,
            min_separation,
        } => {
            let spec = DatasetSpec {
                count: *count,
                size: *size as usize,
                objects: (*min_objects, *max_objects),
                background: *background,
                min_separation: *min_separation,
                seed: *seed,
                ..Default::default()
            };
            let samples = synth_dataset(&spec, threads);
            save_dataset(out_dir, &samples)?;
            let objects: usize = samples.iter().map(|s| s.points.len()).sum();
            write_stdout(&format!("scenes {count}\nobjects {objects}\n"))
        }
        Command::TrainToy {
            train,
            val,
            stage,
            aux,
            out,
            history,
            epochs,
            lr,
            batch_size,
            seed,
            lambda_s,
            lambda_c,
            occlusion_aug,
            beta,
            levels,
            norm,
            precision,
            sigma,
        } => {
            let (_, train_set) = load_dataset(train)?;
            let val_set = match val {
                Some(v) => load_dataset(v)?.1,
                None => Vec::new(),
            };
            let aux_net = aux.as_ref().map(load_model).transpose()?;
            let cfg = TrainConfig {
                stage: (*stage).into(),
                epochs: *epochs,
                learning_rate: *lr,
                batch_size: *batch_size,
                seed: *seed,
                lambda_s: *lambda_s,
                lambda_c: *lambda_c,
                use_occlusion_aug: *occlusion_aug,
                beta: *beta,
                norm: Norm::try_from(*norm)?,
                gamma: DEFAULT_GAMMA,
                levels: *levels,
                sigma: sigma.policy(),
                precision: match precision {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                },
            };
            let verbose = cli.verbose;
            let (net, hist) = train_with_progress(&train_set, &val_set, &cfg, aux_net.as_ref(), |e| {
                if verbose {
                    let val = e.val_mae.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                    eprintln!("epoch {} loss {:.6} val_mae {val}", e.epoch + 1, e.train_loss);
                }
            })?;
            save_model(&net, out)?;
            if let Some(p) = history {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["epoch", "train_loss", "val_mae"])?;
                for e in &hist.epochs {
                    let val = e.val_mae.map_or_else(String::new, |v| v.to_string());
                    w.write_record([(e.epoch + 1).to_string(), e.train_loss.to_string(), val])?;
                }
                w.flush()?;
            }
            let last = hist.epochs.last().expect("at least one epoch");
            write_stdout(&format!(
                "selected epoch {}\nfinal loss {}\ndensity step {}\n",
                hist.selected_epoch + 1,
                last.train_loss,
                hist.density_step
            ))
        }
        Command::Infer {
            model,
            stage,
            image,
            out_density,
            data,
            records,
            sigma,
        } => {
            let net = load_model(model)?;
            let stage: Stage = (*stage).into();
            if let Some(path) = image {
                let map = deployed_density(&net, stage, &image_to_input(&read_pgm(path)?));
                if let Some(p) = out_density {
                    write_pfm(&map.to_float_map(), p)?;
                }
                return write_stdout(&format!("{}\n", map.sum()));
            }
            let dir = data.as_ref().expect("clap requires --image or --data");
            let (ids, samples) = load_dataset(dir)?;
            let recs: Vec<EvalRecord> = evaluate_records(&net, stage, &ids, &samples, sigma.policy())?;
            let out = records.as_ref().expect("clap requires --records with --data");
            write_records(fs::File::create(out)?, &recs)?;
            let e = mae_rmse(&recs)?;
            write_stdout(&format!("images {}\nMAE {}\nRMSE {}\n", recs.len(), e.mae, e.rmse))
        }
        Command::Eval {
            records,
            split,
            threshold,
        } => {
            let recs = read_records(records)?;
            let mut rows: Vec<(&str, Vec<EvalRecord>)> = vec![("all", recs.clone())];
            match split {
                SplitArg::None => {}
                SplitArg::Occlusion => {
                    let (low, high) = occlusion_split(&recs, *threshold);
                    rows.push(("low", low));
                    rows.push(("high", high));
                }
                SplitArg::Crowding => {
                    let (sparse, medium, dense) = crowding_split(&recs)?;
                    rows.push(("sparse", sparse));
                    rows.push(("medium", medium));
                    rows.push(("dense", dense));
                }
            }
            let mut text = format!("{:<8} {:>6} {:>12} {:>12}\n", "split", "n", "MAE", "RMSE");
            for (name, set) in rows {
                match mae_rmse(&set) {
                    Ok(e) => text += &format!("{name:<8} {:>6} {:>12.4} {:>12.4}\n", set.len(), e.mae, e.rmse),
                    Err(_) => text += &format!("{name:<8} {:>6} {:>12} {:>12}\n", 0, "-", "-"),
                }
            }
            write_stdout(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        list.iter().map(OsString::from).collect()
    }

    #[test]
    fn sigma_parsing() {
        assert!(matches!(parse_sigma("adaptive"), Ok(SigmaChoice::Adaptive)));
        assert!(matches!(parse_sigma("2.5"), Ok(SigmaChoice::Fixed(v)) if v == 2.5));
        assert!(parse_sigma("-1").is_err());
        assert!(parse_sigma("wide").is_err());
    }

    #[test]
    fn config_lines_go_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "# comment\nepochs = 3\nocclusion_aug=true\nlr=0.5\n").unwrap();
        let argv = args(&["pc", "--config", cfg.to_str().unwrap(), "train-toy", "--lr", "0.1"]);
        let out = expand_config(argv).unwrap();
        let strs: Vec<_> = out.iter().map(|s| s.to_str().unwrap()).collect();
        assert_eq!(
            &strs[3..],
            ["train-toy", "--epochs", "3", "--occlusion-aug", "--lr", "0.5", "--lr", "0.1"]
        );
    }

    #[test]
    fn command_line_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "threshold=2.0\nsplit=occlusion\n").unwrap();
        let argv = expand_config(args(&[
            "pc",
            "eval",
            "--records",
            "r.csv",
            "--threshold",
            "1.0",
            "--config",
            cfg.to_str().unwrap(),
        ]))
        .unwrap();
        let cli = Cli::try_parse_from(argv).unwrap();
        match cli.command {
            Command::Eval { threshold, split, .. } => {
                assert_eq!(threshold, 1.0);
                assert!(matches!(split, SplitArg::Occlusion));
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["pc", "frobnicate"]), 1);
        assert_eq!(run(["pc", "densify", "--bogus"]), 1);
        assert_eq!(run(["pc", "--help"]), 0);
    }
}
