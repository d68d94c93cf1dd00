use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use psmamba_core::data::{list_images, load_image, save_image, write_synthetic_corpus, Dataset};
use psmamba_core::metrics::{psnr, ssim};
use psmamba_core::partition::{adjacency_distortion, ADJACENCY_HEADER};
use psmamba_core::ssm::{decay_profile, SsmParams};
use psmamba_core::tensor::{crop, pad_to_multiple, PadRecord};
use psmamba_core::{checkpoint, Error, LossKind, Model, Real, RestoreTask, SplitLevel, Trainer};

use crate::config::{Config, Precision};
use crate::TaskArg;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::MissingDir(_) | Error::NoImages(_) | Error::Image { .. } => CliError::Data(msg),
            Error::BadMagic(_)
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedDtype(..)
            | Error::RecordShape { .. }
            | Error::MissingRecord(_)
            | Error::Truncated => CliError::Checkpoint(msg),
            Error::Invalid(_) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub task: TaskArg,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

fn task_of(cfg: &Config, task: TaskArg) -> Result<RestoreTask, CliError> {
    let t = match task {
        TaskArg::Denoise => RestoreTask::denoise(cfg.sigma)?.with_loss(LossKind::Charbonnier { eps: cfg.charbonnier_eps })?,
        TaskArg::Sr => RestoreTask::super_resolve(cfg.scale)?,
    };
    Ok(t)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Config::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= args.deterministic;
    let task = task_of(&cfg, args.task)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, task, &args),
        Precision::F64 => train_typed::<f64>(&cfg, task, &args),
    }
}

fn train_typed<T: Real>(cfg: &Config, task: RestoreTask, args: &TrainArgs) -> Result<(), CliError> {
    let tcfg = cfg.train();
    let data = Dataset::<T>::load(&args.data, tcfg.crop_size * task.scale())?;
    log::info!("{} training and {} validation images", data.train.len(), data.val.len());
    let model = match &args.resume {
        Some(p) => checkpoint::load::<T>(p)?,
        None => Model::<T>::new(cfg.model(task.scale()), cfg.seed)?,
    };
    if model.config().levels.is_empty() {
        return Err(CliError::Checkpoint("checkpoint has no stages".into()));
    }
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log"));
    let file = if args.resume.is_some() {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::new(model, task, tcfg, data)?;
    let summary = trainer.run(&mut log, Some(&args.out))?;
    log.flush().map_err(io_err(&log_path))?;
    if let Some(v) = summary.val {
        log::info!(
            "finished {} steps: val PSNR {:.3} dB (input {:.3}), SSIM {:.4}",
            summary.steps,
            v.psnr,
            v.baseline_psnr,
            v.ssim
        );
    }
    // A run resumed at its final step performs no updates; still leave a checkpoint.
    if !args.out.exists() {
        checkpoint::save(&trainer.model, &args.out)?;
    }
    Ok(())
}

/// Pads to the hierarchy's grid, runs the model and crops the padding away.
pub fn restore_image<T: Real>(model: &Model<T>, x: &psmamba_core::FeatureMap<T>) -> Result<psmamba_core::FeatureMap<T>, Error> {
    let (mh, mw) = model.config().grid_multiple();
    let (padded, rec) = pad_to_multiple(x, mh, mw)?;
    let y = model.forward(&padded)?;
    let s = model.config().scale;
    let out_rec = PadRecord {
        orig_h: rec.orig_h * s,
        orig_w: rec.orig_w * s,
        padded_h: rec.padded_h * s,
        padded_w: rec.padded_w * s,
    };
    Ok(crop(&y, &out_rec))
}

pub fn restore(ckpt: &Path, input: &Path, out: &Path, task: TaskArg) -> Result<(), CliError> {
    let bytes = std::fs::read(ckpt).map_err(|e| CliError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
    let model = checkpoint::load_bytes::<f32>(&bytes)?;
    let scale = model.config().scale;
    match (task, scale) {
        (TaskArg::Denoise, 1) => {}
        (TaskArg::Sr, s) if s > 1 => {}
        _ => {
            return Err(CliError::Checkpoint(format!(
                "checkpoint upscales by {scale}, which does not match task {task:?}"
            )))
        }
    }
    let files = list_images(input)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for f in files {
        let img = match load_image::<f32>(&f) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                continue;
            }
        };
        let t = Instant::now();
        let y = restore_image(&model, &img)?;
        let dst = out.join(f.file_name().unwrap());
        save_image(&dst, &y)?;
        log::info!("{} -> {} in {:.3}s", f.display(), dst.display(), t.elapsed().as_secs_f64());
    }
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path) -> Result<(), CliError> {
    let gts = list_images(gt)?;
    list_images(pred)?;
    let mut out = String::from("image\tpsnr\tssim\n");
    let (mut sp, mut ss, mut n) = (0.0, 0.0, 0usize);
    for g in gts {
        let name = g.file_name().unwrap();
        let p = pred.join(name);
        if !p.exists() {
            log::warn!("no prediction for {}", name.to_string_lossy());
            continue;
        }
        let pair = load_image::<f64>(&p).and_then(|a| load_image::<f64>(&g).map(|b| (a, b)));
        let (a, b) = match pair {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", name.to_string_lossy());
                continue;
            }
        };
        let (ps, s) = match (psnr(&a, &b, 1.0), ssim(&a, &b)) {
            (Ok(ps), Ok(s)) => (ps, s),
            _ => {
                log::warn!("skipping {}: size mismatch", name.to_string_lossy());
                continue;
            }
        };
        out += &format!("{}\t{ps:.4}\t{s:.6}\n", name.to_string_lossy());
        sp += ps;
        ss += s;
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Data(format!("no paired images between {} and {}", pred.display(), gt.display())));
    }
    out += &format!("mean\t{:.4}\t{:.6}\n", sp / n as f64, ss / n as f64);
    print!("{out}");
    Ok(())
}

pub fn analyze_adjacency(h: usize, w: usize, levels: &str) -> Result<(), CliError> {
    let levels = levels
        .split(',')
        .map(|s| s.parse::<SplitLevel>().map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from(ADJACENCY_HEADER);
    out.push('\n');
    for l in levels {
        let r = adjacency_distortion(h, w, l).map_err(|e| CliError::Config(e.to_string()))?;
        out += &r.level.tsv_row();
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

pub fn analyze_decay(ckpt: Option<&Path>, block: &str, a: Option<f64>, l_full: usize, l_patch: usize, lags: usize) -> Result<(), CliError> {
    let report = match (a, ckpt) {
        (Some(a), _) => {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::Config(format!("--a must lie in (0, 1), got {a}")));
            }
            let p = SsmParams::<f64>::scalar(a, 1.0, 1.0, 0.0);
            decay_profile(&p.view(), l_full, l_patch, lags)?
        }
        (None, Some(path)) => {
            let model = checkpoint::load::<f64>(path)?;
            let b = model
                .arch
                .blocks()
                .find(|b| model.store.param(b.ssm.a_raw).name == format!("{block}.ssm.a_raw"))
                .ok_or_else(|| CliError::Config(format!("checkpoint has no block {block:?}")))?;
            decay_profile(&b.ssm.view(&model.store), l_full, l_patch, lags)?
        }
        (None, None) => return Err(CliError::Config("decay mode needs --ckpt or --a".into())),
    };
    print!("{}", report.to_tsv());
    Ok(())
}

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<(), CliError> {
    let files = write_synthetic_corpus(out, count, size, seed)?;
    log::info!("wrote {} textures to {}", files.len(), out.display());
    Ok(())
}
