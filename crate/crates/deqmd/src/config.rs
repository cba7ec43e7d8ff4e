//! Experiment configuration: a single flat, human-editable text file.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, unknown
//! keys are rejected with their line number. The file is diff-able
//! provenance for a run and is copied verbatim into every output directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Kernel, Seed};
use crate::regularizers::{RedArch, ScalarNetArch, DEFAULT_BETA};
use crate::solvers::MdConfig;

/// Which convolution kernel drives the forward model.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
    Delta,
    File { path: PathBuf },
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        match self {
            KernelSpec::Gaussian { size, sigma } => Kernel::gaussian(*size, *sigma),
            KernelSpec::Uniform { size } => Kernel::uniform(*size),
            KernelSpec::Delta => Ok(Kernel::delta()),
            KernelSpec::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|_| Error::MissingFile(path.display().to_string()))?;
                Kernel::from_text(&text)
            }
        }
    }
}

/// Regularizer families the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    Zero,
    Tv,
    ScalarNet,
    Red,
}

impl RegKind {
    pub fn name(self) -> &'static str {
        match self {
            RegKind::Zero => "zero",
            RegKind::Tv => "tv",
            RegKind::ScalarNet => "scalar_net",
            RegKind::Red => "red",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(RegKind::Zero),
            "tv" => Some(RegKind::Tv),
            "scalar_net" => Some(RegKind::ScalarNet),
            "red" => Some(RegKind::Red),
            _ => None,
        }
    }
}

/// Where clean images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Procedurally generated piecewise-smooth patches.
    Synthetic,
    /// Patches cropped from user-supplied images in a directory.
    Dir(PathBuf),
}

/// Dataset sizing.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub patch: usize,
}

/// Methods the benchmark command can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Observed,
    RlBest,
    KlTvBest,
    DeqS,
    DeqRed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Observed => "observed",
            Method::RlBest => "rl",
            Method::KlTvBest => "kltv",
            Method::DeqS => "deq_s",
            Method::DeqRed => "deq_red",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "observed" => Some(Method::Observed),
            "rl" => Some(Method::RlBest),
            "kltv" => Some(Method::KlTvBest),
            "deq_s" => Some(Method::DeqS),
            "deq_red" => Some(Method::DeqRed),
            _ => None,
        }
    }
}

/// Training schedule knobs exposed through the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_after: usize,
    pub loss_tv_lambda: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub pretrain: bool,
    pub pretrain_sigma: f64,
    pub pretrain_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 5e-4,
            lr_halve_after: 25,
            loss_tv_lambda: 1e-3,
            grad_clip: 1.0,
            checkpoint_every: 0,
            pretrain: false,
            pretrain_sigma: 0.1,
            pretrain_epochs: 20,
        }
    }
}

/// Everything one experiment needs, serializable to a flat text file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: Seed,
    pub out_dir: PathBuf,
    /// Photon intensity of the Poisson channel.
    pub alpha: f64,
    pub kernel: KernelSpec,
    pub regularizer: RegKind,
    /// Weight for the TV regularizer and the TV-based initialization.
    pub tv_lambda: f64,
    /// Grid searched by the oracle-tuned KL+TV baseline.
    pub tv_grid: Vec<f64>,
    pub solver: MdConfig,
    pub train: TrainSettings,
    pub dataset: DatasetConfig,
    /// Iteration budget of the Richardson-Lucy baseline.
    pub rl_iters: usize,
    /// Iterations behind the Richardson-Lucy initialization strategy.
    pub rl_init_iters: usize,
    pub scalar_arch: ScalarNetArch,
    pub red_arch: RedArch,
    pub checkpoint_deq_s: Option<PathBuf>,
    pub checkpoint_deq_red: Option<PathBuf>,
    pub benchmark_methods: Vec<Method>,
    pub benchmark_init_study: bool,
    /// Raw file text, kept for verbatim snapshots.
    source_text: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: Seed(0),
            out_dir: PathBuf::from("runs/out"),
            alpha: 100.0,
            kernel: KernelSpec::Gaussian {
                size: 11,
                sigma: 1.2,
            },
            regularizer: RegKind::Red,
            tv_lambda: 10.0,
            tv_grid: vec![0.5, 1.5, 5.0, 15.0, 50.0, 150.0, 500.0],
            solver: MdConfig::default(),
            train: TrainSettings::default(),
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic,
                n_train: 20,
                n_val: 6,
                n_test: 6,
                patch: 32,
            },
            rl_iters: 200,
            rl_init_iters: 20,
            scalar_arch: ScalarNetArch::default(),
            red_arch: RedArch::default(),
            checkpoint_deq_s: None,
            checkpoint_deq_red: None,
            benchmark_methods: vec![
                Method::Observed,
                Method::RlBest,
                Method::KlTvBest,
                Method::DeqS,
                Method::DeqRed,
            ],
            benchmark_init_study: true,
            source_text: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.source_text = Some(text);
        Ok(cfg)
    }

    /// Parses the flat `key = value` format; `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let err = |line: usize, msg: String| Error::Config {
            path: origin.to_string(),
            line,
            msg,
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| err(line_no, format!("`{key}` expects a number, got `{v}`")))
            };
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(line_no, format!("`{key}` expects an integer, got `{v}`")))
            };
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(line_no, format!("`{key}` expects true/false, got `{v}`"))),
            };
            match key {
                "seed" => {
                    cfg.seed = Seed(value.parse::<u64>().map_err(|_| {
                        err(line_no, format!("`seed` expects a u64, got `{value}`"))
                    })?)
                }
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "alpha" => cfg.alpha = parse_f64(value)?,
                "kernel.kind" => {
                    cfg.kernel = match value {
                        "gaussian" => KernelSpec::Gaussian {
                            size: 11,
                            sigma: 1.2,
                        },
                        "uniform" => KernelSpec::Uniform { size: 9 },
                        "delta" => KernelSpec::Delta,
                        "file" => KernelSpec::File {
                            path: PathBuf::new(),
                        },
                        other => {
                            return Err(err(line_no, format!("unknown kernel kind `{other}`")))
                        }
                    }
                }
                "kernel.size" => {
                    let size = parse_usize(value)?;
                    match &mut cfg.kernel {
                        KernelSpec::Gaussian { size: s, .. } | KernelSpec::Uniform { size: s } => {
                            *s = size
                        }
                        _ => return Err(err(line_no, "kernel.size needs gaussian/uniform".into())),
                    }
                }
                "kernel.sigma" => {
                    let sigma = parse_f64(value)?;
                    match &mut cfg.kernel {
                        KernelSpec::Gaussian { sigma: s, .. } => *s = sigma,
                        _ => return Err(err(line_no, "kernel.sigma needs gaussian".into())),
                    }
                }
                "kernel.path" => {
                    cfg.kernel = KernelSpec::File {
                        path: PathBuf::from(value),
                    }
                }
                "regularizer" => {
                    cfg.regularizer = RegKind::parse(value)
                        .ok_or_else(|| err(line_no, format!("unknown regularizer `{value}`")))?
                }
                "tv.lambda" => cfg.tv_lambda = parse_f64(value)?,
                "tv.grid" => {
                    cfg.tv_grid = value
                        .split(',')
                        .map(|s| parse_f64(s.trim()))
                        .collect::<Result<_>>()?
                }
                "solver.a" => cfg.solver.a = parse_f64(value)?,
                "solver.tau0" => cfg.solver.tau0 = parse_f64(value)?,
                "solver.bt_gamma" => cfg.solver.bt_gamma = parse_f64(value)?,
                "solver.bt_eta" => cfg.solver.bt_eta = parse_f64(value)?,
                "solver.tol" => cfg.solver.tol = parse_f64(value)?,
                "solver.max_iters" => cfg.solver.max_iters = parse_usize(value)?,
                "solver.warm_start_tau" => cfg.solver.warm_start_tau = parse_bool(value)?,
                "train.epochs" => cfg.train.epochs = parse_usize(value)?,
                "train.lr" => cfg.train.lr = parse_f64(value)?,
                "train.lr_halve_after" => cfg.train.lr_halve_after = parse_usize(value)?,
                "train.loss_tv_lambda" => cfg.train.loss_tv_lambda = parse_f64(value)?,
                "train.grad_clip" => cfg.train.grad_clip = parse_f64(value)?,
                "train.checkpoint_every" => cfg.train.checkpoint_every = parse_usize(value)?,
                "train.pretrain" => cfg.train.pretrain = parse_bool(value)?,
                "train.pretrain_sigma" => cfg.train.pretrain_sigma = parse_f64(value)?,
                "train.pretrain_epochs" => cfg.train.pretrain_epochs = parse_usize(value)?,
                "dataset.source" => {
                    cfg.dataset.source = match value {
                        "synthetic" => DatasetSource::Synthetic,
                        other => {
                            return Err(err(
                                line_no,
                                format!("unknown dataset source `{other}` (use synthetic or dataset.dir)"),
                            ))
                        }
                    }
                }
                "dataset.dir" => cfg.dataset.source = DatasetSource::Dir(PathBuf::from(value)),
                "dataset.train" => cfg.dataset.n_train = parse_usize(value)?,
                "dataset.val" => cfg.dataset.n_val = parse_usize(value)?,
                "dataset.test" => cfg.dataset.n_test = parse_usize(value)?,
                "dataset.patch" => cfg.dataset.patch = parse_usize(value)?,
                "rl.iters" => cfg.rl_iters = parse_usize(value)?,
                "rl.init_iters" => cfg.rl_init_iters = parse_usize(value)?,
                "arch.scalar.hidden" => cfg.scalar_arch.hidden = parse_usize(value)?,
                "arch.scalar.feat" => cfg.scalar_arch.feat = parse_usize(value)?,
                "arch.red.width" => cfg.red_arch.width = parse_usize(value)?,
                "arch.red.depth" => cfg.red_arch.depth = parse_usize(value)?,
                "arch.beta" => {
                    let beta = parse_f64(value)?;
                    cfg.scalar_arch.beta = beta;
                    cfg.red_arch.beta = beta;
                }
                "checkpoint.deq_s" => cfg.checkpoint_deq_s = Some(PathBuf::from(value)),
                "checkpoint.deq_red" => cfg.checkpoint_deq_red = Some(PathBuf::from(value)),
                "benchmark.methods" => {
                    cfg.benchmark_methods = value
                        .split(',')
                        .map(|s| {
                            Method::parse(s.trim()).ok_or_else(|| {
                                err(line_no, format!("unknown benchmark method `{s}`"))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "benchmark.init_study" => cfg.benchmark_init_study = parse_bool(value)?,
                other => {
                    return Err(err(line_no, format!("unknown key `{other}`")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        if self.dataset.patch < 8 {
            return Err(Error::InvalidArgument(
                "dataset.patch must be at least 8 pixels".into(),
            ));
        }
        if self.tv_grid.is_empty() {
            return Err(Error::Empty("tv.grid"));
        }
        self.solver.validate()
    }

    /// Canonical serialization; parsing it reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n", self.seed.0));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!("alpha = {}\n", self.alpha));
        match &self.kernel {
            KernelSpec::Gaussian { size, sigma } => {
                s.push_str("kernel.kind = gaussian\n");
                s.push_str(&format!("kernel.size = {size}\n"));
                s.push_str(&format!("kernel.sigma = {sigma}\n"));
            }
            KernelSpec::Uniform { size } => {
                s.push_str("kernel.kind = uniform\n");
                s.push_str(&format!("kernel.size = {size}\n"));
            }
            KernelSpec::Delta => s.push_str("kernel.kind = delta\n"),
            KernelSpec::File { path } => {
                s.push_str(&format!("kernel.path = {}\n", path.display()))
            }
        }
        s.push_str(&format!("regularizer = {}\n", self.regularizer.name()));
        s.push_str(&format!("tv.lambda = {}\n", self.tv_lambda));
        let grid: Vec<String> = self.tv_grid.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("tv.grid = {}\n", grid.join(",")));
        s.push_str(&format!("solver.a = {}\n", self.solver.a));
        s.push_str(&format!("solver.tau0 = {}\n", self.solver.tau0));
        s.push_str(&format!("solver.bt_gamma = {}\n", self.solver.bt_gamma));
        s.push_str(&format!("solver.bt_eta = {}\n", self.solver.bt_eta));
        s.push_str(&format!("solver.tol = {}\n", self.solver.tol));
        s.push_str(&format!("solver.max_iters = {}\n", self.solver.max_iters));
        s.push_str(&format!(
            "solver.warm_start_tau = {}\n",
            self.solver.warm_start_tau
        ));
        s.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        s.push_str(&format!("train.lr = {}\n", self.train.lr));
        s.push_str(&format!(
            "train.lr_halve_after = {}\n",
            self.train.lr_halve_after
        ));
        s.push_str(&format!(
            "train.loss_tv_lambda = {}\n",
            self.train.loss_tv_lambda
        ));
        s.push_str(&format!("train.grad_clip = {}\n", self.train.grad_clip));
        s.push_str(&format!(
            "train.checkpoint_every = {}\n",
            self.train.checkpoint_every
        ));
        s.push_str(&format!("train.pretrain = {}\n", self.train.pretrain));
        s.push_str(&format!(
            "train.pretrain_sigma = {}\n",
            self.train.pretrain_sigma
        ));
        s.push_str(&format!(
            "train.pretrain_epochs = {}\n",
            self.train.pretrain_epochs
        ));
        match &self.dataset.source {
            DatasetSource::Synthetic => s.push_str("dataset.source = synthetic\n"),
            DatasetSource::Dir(d) => s.push_str(&format!("dataset.dir = {}\n", d.display())),
        }
        s.push_str(&format!("dataset.train = {}\n", self.dataset.n_train));
        s.push_str(&format!("dataset.val = {}\n", self.dataset.n_val));
        s.push_str(&format!("dataset.test = {}\n", self.dataset.n_test));
        s.push_str(&format!("dataset.patch = {}\n", self.dataset.patch));
        s.push_str(&format!("rl.iters = {}\n", self.rl_iters));
        s.push_str(&format!("rl.init_iters = {}\n", self.rl_init_iters));
        s.push_str(&format!("arch.scalar.hidden = {}\n", self.scalar_arch.hidden));
        s.push_str(&format!("arch.scalar.feat = {}\n", self.scalar_arch.feat));
        s.push_str(&format!("arch.red.width = {}\n", self.red_arch.width));
        s.push_str(&format!("arch.red.depth = {}\n", self.red_arch.depth));
        if (self.scalar_arch.beta - DEFAULT_BETA).abs() > 0.0 {
            s.push_str(&format!("arch.beta = {}\n", self.scalar_arch.beta));
        }
        if let Some(p) = &self.checkpoint_deq_s {
            s.push_str(&format!("checkpoint.deq_s = {}\n", p.display()));
        }
        if let Some(p) = &self.checkpoint_deq_red {
            s.push_str(&format!("checkpoint.deq_red = {}\n", p.display()));
        }
        let methods: Vec<&str> = self.benchmark_methods.iter().map(|m| m.name()).collect();
        s.push_str(&format!("benchmark.methods = {}\n", methods.join(",")));
        s.push_str(&format!(
            "benchmark.init_study = {}\n",
            self.benchmark_init_study
        ));
        s
    }

    /// Text written as the `config.txt` snapshot: the original file when one
    /// was loaded, the canonical form otherwise.
    pub fn snapshot_text(&self) -> String {
        self.source_text.clone().unwrap_or_else(|| self.to_text())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(out) = out {
            self.out_dir = out;
            self.source_text = None; // snapshot must reflect the override
        }
        if let Some(seed) = seed {
            self.seed = Seed(seed);
            self.source_text = None;
        }
        self
    }
}
