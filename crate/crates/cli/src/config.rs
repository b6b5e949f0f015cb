//! Option resolution: built-in defaults, then a `key=value` config file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use lucent_core::losses::{ExposureTarget, LossWeights};
use lucent_core::network::CurveNetConfig;
use lucent_core::optim::AdamConfig;
use lucent_core::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "lucent", version, about = "Zero-shot low-light image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a freshly initialised checkpoint.
    Init,
    /// Train on a directory of unpaired images (resumes if the checkpoint exists).
    Train,
    /// Enhance an image or every image in a directory.
    Enhance,
    /// Compare enhanced images with same-named references (PSNR, SSIM, MAD).
    Evaluate,
    /// Print the architecture and training metadata of a checkpoint.
    Inspect,
}

/// Every option is global, so it may appear before or after the subcommand.
#[derive(Clone, Debug, Default, Args)]
pub struct Options {
    /// Plain-text `key=value` file; keys are flag names without the dashes.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory (train), image or directory (enhance), enhanced directory (evaluate).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output image or directory (enhance), history CSV (train), report CSV (evaluate).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Reference directory for evaluate.
    #[arg(long, global = true)]
    pub reference: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Exact number of optimisation steps; overrides --epochs.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub branch_layers: Option<usize>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub exposure_level: Option<f64>,
    #[arg(long, global = true)]
    pub exposure_patch: Option<usize>,
    #[arg(long, global = true)]
    pub w_tv: Option<f64>,
    #[arg(long, global = true)]
    pub w_spa: Option<f64>,
    #[arg(long, global = true)]
    pub w_color: Option<f64>,
    #[arg(long, global = true)]
    pub w_exp: Option<f64>,
    #[arg(long, global = true)]
    pub w_seg: Option<f64>,
    #[arg(long, global = true)]
    pub w_nr: Option<f64>,
    /// Clamp enhanced output to [0, 1] before quantising (default true). With
    /// false, out-of-range pixels are reported as errors.
    #[arg(long, global = true)]
    pub clamp: Option<bool>,
    /// Also write `<name>_curve.png`: the curve map with [-1, 1] mapped to
    /// [0, 255], R/G/B channels showing the factors of the matching channels.
    #[arg(long, global = true)]
    pub curve_maps: bool,
    /// init: set every parameter to zero, making enhancement the identity.
    #[arg(long, global = true)]
    pub zero: bool,
}

pub const FILE_KEYS: [&str; 22] = [
    "checkpoint",
    "input",
    "output",
    "reference",
    "epochs",
    "steps",
    "batch-size",
    "image-size",
    "width",
    "branch-layers",
    "iterations",
    "lr",
    "seed",
    "exposure-level",
    "exposure-patch",
    "w-tv",
    "w-spa",
    "w-color",
    "w-exp",
    "w-seg",
    "w-nr",
    "clamp",
];

/// Parsed `key=value` configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    /// Blank lines and `#` comments are ignored; keys may use `-` or `_`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", n + 1))?;
            let key = k.trim().replace('_', "-");
            if !FILE_KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key `{}`", n + 1, k.trim()));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| format!("config key `{key}`: cannot parse {v:?}")))
            .transpose()
    }
}

/// Fully resolved settings for every subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub net: CurveNetConfig,
    /// Set only when given explicitly, so a checkpoint's own value can win otherwise.
    pub iterations: Option<usize>,
    pub train: TrainConfig,
    pub clamp: bool,
    pub curve_maps: bool,
    pub zero: bool,
}

impl Settings {
    pub fn resolve(opts: &Options) -> Result<Self, String> {
        let file = match &opts.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($flag:ident, $key:literal) => {
                match opts.$flag.clone() {
                    Some(v) => Some(v),
                    None => file.get($key)?,
                }
            };
        }

        let net_default = CurveNetConfig::default();
        let width = pick!(width, "width").unwrap_or(net_default.width);
        let seed = pick!(seed, "seed").unwrap_or(0);
        let iterations = pick!(iterations, "iterations");
        let net = CurveNetConfig {
            branch_layers: pick!(branch_layers, "branch-layers").unwrap_or(net_default.branch_layers),
            width,
            attention_width: 2 * width,
            iterations: iterations.unwrap_or(net_default.iterations),
            seed,
        };

        let d = TrainConfig::default();
        let w = LossWeights::default();
        let e = ExposureTarget::default();
        let train = TrainConfig {
            adam: AdamConfig {
                learning_rate: pick!(lr, "lr").unwrap_or(d.adam.learning_rate),
                ..d.adam
            },
            epochs: pick!(epochs, "epochs").unwrap_or(d.epochs),
            max_steps: pick!(steps, "steps"),
            batch_size: pick!(batch_size, "batch-size").unwrap_or(d.batch_size),
            image_size: pick!(image_size, "image-size").unwrap_or(d.image_size),
            seed,
            weights: LossWeights {
                tv: pick!(w_tv, "w-tv").unwrap_or(w.tv),
                spa: pick!(w_spa, "w-spa").unwrap_or(w.spa),
                color: pick!(w_color, "w-color").unwrap_or(w.color),
                exposure: pick!(w_exp, "w-exp").unwrap_or(w.exposure),
                seg: pick!(w_seg, "w-seg").unwrap_or(w.seg),
                nr: pick!(w_nr, "w-nr").unwrap_or(w.nr),
            },
            exposure: ExposureTarget {
                level: pick!(exposure_level, "exposure-level").unwrap_or(e.level),
                patch: pick!(exposure_patch, "exposure-patch").unwrap_or(e.patch),
            },
            ..d
        };

        Ok(Self {
            checkpoint: pick!(checkpoint, "checkpoint"),
            input: pick!(input, "input"),
            output: pick!(output, "output"),
            reference: pick!(reference, "reference"),
            net,
            iterations,
            train,
            clamp: pick!(clamp, "clamp").unwrap_or(true),
            curve_maps: opts.curve_maps,
            zero: opts.zero,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let cfg = FileConfig::parse("# header\nlr = 0.01  # fast\n\nbatch_size=4\n").unwrap();
        assert_eq!(cfg.get::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(cfg.get::<usize>("batch-size").unwrap(), Some(4));
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(FileConfig::parse("learning_rate=1").is_err());
        assert!(FileConfig::parse("lr").is_err());
        let cfg = FileConfig::parse("epochs=many").unwrap();
        assert!(cfg.get::<usize>("epochs").is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "lr=0.5\nwidth=6\nw-tv=3\n").unwrap();
        let opts = Options {
            config: Some(path),
            lr: Some(0.25),
            ..Options::default()
        };
        let s = Settings::resolve(&opts).unwrap();
        assert_eq!(s.train.adam.learning_rate, 0.25);
        assert_eq!(s.net.width, 6);
        assert_eq!(s.net.attention_width, 12);
        assert_eq!(s.train.weights.tv, 3.0);
        assert_eq!(s.train.weights.spa, 1.0);
        assert_eq!(s.train.image_size, 512);
        assert!(s.clamp);
        assert_eq!(s.iterations, None);
    }
}
