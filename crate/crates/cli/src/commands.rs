//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use lucent_core::checkpoint::Checkpoint;
use lucent_core::enhance::{enhance, EnhanceSpec};
use lucent_core::imaging::{curve_map_image, from_unit, load_image, save_image, scan_corpus, to_unit, IMAGE_EXTENSIONS};
use lucent_core::losses::LossPlugins;
use lucent_core::metrics::evaluate_pairs;
use lucent_core::network::CurveNet;
use lucent_core::train::{load_corpus, train, StepRecord};
use lucent_core::Error;

use crate::config::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => EXIT_CORRUPT,
            Error::Io(_) | Error::Tape(_) | Error::NonFiniteGradient(_) => EXIT_INTERNAL,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type Outcome = Result<(), Failure>;

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::usage(format!("missing required --{flag}")))
}

fn build_net(settings: &Settings) -> Result<CurveNet, Failure> {
    let net = if settings.zero {
        CurveNet::zeroed(settings.net.clone())?
    } else {
        CurveNet::build(settings.net.clone())?
    };
    Ok(net)
}

pub fn cmd_init(settings: &Settings) -> Outcome {
    let path = required(&settings.checkpoint, "checkpoint")?;
    let ck = Checkpoint::fresh(build_net(settings)?, settings.train.seed);
    ck.save(path)?;
    println!(
        "wrote {} ({} parameters{})",
        path.display(),
        ck.net.param_count(),
        if settings.zero { ", zero-initialised" } else { "" }
    );
    Ok(())
}

pub fn cmd_train(settings: &Settings) -> Outcome {
    let corpus_dir = required(&settings.input, "input")?;
    let ck_path = required(&settings.checkpoint, "checkpoint")?;
    if !corpus_dir.is_dir() {
        return Err(Failure::usage(format!("corpus not found: {}", corpus_dir.display())));
    }
    let mut config = settings.train.clone();
    config.validate()?;

    let mut state = if ck_path.exists() {
        let ck = Checkpoint::load(ck_path)?;
        if ck.net.config().width != settings.net.width || ck.net.config().branch_layers != settings.net.branch_layers {
            warn!("resuming: architecture comes from the checkpoint, network flags are ignored");
        }
        info!("resuming from {} at step {}", ck_path.display(), ck.optimizer.step);
        config.seed = ck.train_seed;
        ck
    } else {
        Checkpoint::fresh(build_net(settings)?, config.seed)
    };

    let paths = scan_corpus(corpus_dir, &IMAGE_EXTENSIONS)?;
    let images = load_corpus(&paths, config.image_size)?;
    info!("training on {} images at {}×{}", images.len(), config.image_size, config.image_size);

    let history_path = settings
        .output
        .clone()
        .unwrap_or_else(|| ck_path.with_extension("csv"));
    let report_every = config.max_steps.map_or(10, |s| (s / 10).max(1)) as u64;
    let history = train(&mut state, &images, &config, LossPlugins::default(), |r| {
        if r.step % report_every == 0 {
            info!("step {} {}", r.step, r.loss);
        }
    })?;

    state.extra.insert("train.image_size".into(), config.image_size.to_string());
    state.extra.insert("train.lr".into(), config.adam.learning_rate.to_string());
    state.extra.insert("train.batch_size".into(), config.batch_size.to_string());
    state.save(ck_path)?;
    write_history(&history_path, &history)?;
    println!(
        "trained {} steps (now at step {}), checkpoint {}, history {}",
        history.len(),
        state.optimizer.step,
        ck_path.display(),
        history_path.display()
    );
    Ok(())
}

fn write_history(path: &Path, history: &[StepRecord]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", StepRecord::CSV_HEADER)?;
    for r in history {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()
}

fn enhance_one(net: &CurveNet, spec: &EnhanceSpec, settings: &Settings, src: &Path, dst: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let image = to_unit(&load_image(src)?);
    let map = net.infer(&image)?;
    let out = enhance(&image, map.values(), spec)?;
    save_image(&from_unit(&out, settings.clamp)?, dst)?;
    if settings.curve_maps {
        let stem = dst.file_stem().unwrap_or_default().to_string_lossy();
        save_image(&curve_map_image(map.values())?, dst.with_file_name(format!("{stem}_curve.png")))?;
    }
    println!(
        "{} -> {} ({:.1} ms)",
        src.display(),
        dst.display(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

pub fn cmd_enhance(settings: &Settings) -> Outcome {
    let input = required(&settings.input, "input")?;
    let output = required(&settings.output, "output")?;
    let ck = Checkpoint::load(required(&settings.checkpoint, "checkpoint")?)?;
    let spec = EnhanceSpec {
        iterations: settings.iterations.unwrap_or(ck.net.config().iterations),
        clamp_output: settings.clamp,
    };
    spec.validate()?;

    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        fs::create_dir_all(output)?;
        scan_corpus(input, &IMAGE_EXTENSIONS)?
            .into_iter()
            .map(|src| {
                let dst = output.join(src.file_name().expect("scanned file has a name"));
                (src, dst)
            })
            .collect()
    } else if input.is_file() {
        let dst = if is_image_path(output) {
            output.to_path_buf()
        } else {
            fs::create_dir_all(output)?;
            output.join(input.file_name().unwrap_or_default())
        };
        vec![(input.to_path_buf(), dst)]
    } else {
        return Err(Error::NotFound { path: input.to_path_buf() }.into());
    };
    if jobs.is_empty() {
        return Err(Failure::usage(format!("no images in {}", input.display())));
    }

    let mut failed = 0;
    for (src, dst) in &jobs {
        if let Err(e) = enhance_one(&ck.net, &spec, settings, src, dst) {
            eprintln!("error: {}: {e}", src.display());
            failed += 1;
        }
    }
    if failed == jobs.len() {
        return Err(Failure::usage(format!("all {failed} images failed")));
    }
    if failed > 0 {
        eprintln!("{failed} of {} images failed", jobs.len());
    }
    Ok(())
}

pub fn cmd_evaluate(settings: &Settings) -> Outcome {
    let enhanced = required(&settings.input, "input")?;
    let reference = required(&settings.reference, "reference")?;
    for dir in [enhanced, reference] {
        if !dir.is_dir() {
            return Err(Failure::usage(format!("directory not found: {}", dir.display())));
        }
    }
    let report = evaluate_pairs(enhanced, reference)?;
    print!("{report}");
    if let Some(path) = &settings.output {
        fs::write(path, report.to_csv())?;
        println!("wrote {}", path.display());
    }
    if report.rows.is_empty() {
        return Err(Failure::usage("no matching image pairs"));
    }
    Ok(())
}

pub fn cmd_inspect(settings: &Settings) -> Outcome {
    let ck = Checkpoint::load(required(&settings.checkpoint, "checkpoint")?)?;
    println!("{}", ck.net.describe());
    println!("metadata:");
    for (k, v) in ck.metadata() {
        println!("  {k} = {v}");
    }
    Ok(())
}
