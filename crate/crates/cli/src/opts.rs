use std::path::PathBuf;

use clap::{Args, ValueEnum};
use duet_core::bfv::BfvParams;
use duet_core::linear::DpConfig;
use duet_core::nn::TrainConfig;
use duet_core::nonlinear::TruncMode;
use duet_core::ot::OtBackend;
use duet_core::ring::RingParams;
use duet_core::Result;
use serde_json::{json, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// N = 8192, three 60-bit primes, 59-bit ring with 25 fraction bits.
    Default,
    /// N = 4096, two primes, 41-bit ring with 12 fraction bits; no security claim.
    Small,
}

impl Profile {
    pub fn ring(self) -> RingParams {
        match self {
            Profile::Default => RingParams::default(),
            Profile::Small => RingParams::small(),
        }
    }

    pub fn he(self) -> BfvParams {
        match self {
            Profile::Default => BfvParams::default(),
            Profile::Small => BfvParams::small(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Default => "default",
            Profile::Small => "small",
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    #[arg(long, env = "PENCIL_PARAMS", value_enum, default_value = "default")]
    pub params: Profile,
    #[arg(long, env = "PENCIL_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Worker threads for data-parallel kernels (defaults to all cores).
    #[arg(long, env = "PENCIL_THREADS")]
    pub threads: Option<usize>,
    /// Directory for report.json, manifest.json and other artifacts.
    #[arg(long, env = "PENCIL_OUT")]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn init_threads(&self) -> Result<()> {
        match self.threads {
            Some(t) => duet_core::bfv::set_threads(t),
            None => Ok(()),
        }
    }

    pub fn json(&self) -> Value {
        json!({ "params": self.params.name(), "seed": self.seed, "threads": self.threads })
    }
}

#[derive(Args, Clone, Debug)]
pub struct Hyper {
    #[arg(long, env = "PENCIL_MODEL", default_value = "mnist_mlp")]
    pub model: String,
    #[arg(long, env = "PENCIL_EPOCHS", default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, env = "PENCIL_BATCH", default_value_t = 32)]
    pub batch: usize,
    #[arg(long, env = "PENCIL_LR", default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, env = "PENCIL_MOMENTUM", default_value_t = 0.8)]
    pub momentum: f64,
    /// DP noise multiplier; 0 disables the perturbation.
    #[arg(long, env = "PENCIL_SIGMA", default_value_t = 0.0)]
    pub sigma: f64,
    /// Estimated per-sample gradient norm bound.
    #[arg(long = "clip-c", env = "PENCIL_CLIP_C", default_value_t = 8.0)]
    pub clip_c: f64,
    #[arg(long, env = "PENCIL_TRUNC", default_value = "faithful")]
    pub trunc: TruncMode,
    /// Directory with the MNIST IDX files (or CIFAR-10 binary batches).
    #[arg(long, env = "PENCIL_DATA", default_value = "data/mnist")]
    pub data: PathBuf,
    /// Use only the first N training samples.
    #[arg(long = "train-limit", env = "PENCIL_TRAIN_LIMIT")]
    pub train_limit: Option<usize>,
    /// Evaluate on the first N test samples only.
    #[arg(long = "test-limit", env = "PENCIL_TEST_LIMIT")]
    pub test_limit: Option<usize>,
}

impl Hyper {
    pub fn dp(&self) -> Result<DpConfig> {
        if self.sigma == 0.0 {
            Ok(DpConfig::disabled())
        } else {
            DpConfig::new(self.sigma, self.clip_c, self.batch)
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch: self.batch,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            trunc: self.trunc,
            dp: self.dp()?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn json(&self) -> Value {
        json!({
            "model": self.model,
            "epochs": self.epochs,
            "batch": self.batch,
            "lr": self.lr,
            "momentum": self.momentum,
            "sigma": self.sigma,
            "clip_c": self.clip_c,
            "trunc": format!("{:?}", self.trunc).to_lowercase(),
            "data": self.data,
            "train_limit": self.train_limit,
            "test_limit": self.test_limit,
        })
    }
}

#[derive(Args, Clone, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Number of data owners the training set is split across.
    #[arg(long, env = "PENCIL_DOS", default_value_t = 1)]
    pub dos: usize,
    /// Give each data owner only this many labels (0: uniform random split).
    #[arg(long = "labels-per-do", env = "PENCIL_LABELS_PER_DO", default_value_t = 0)]
    pub labels_per_do: usize,
    /// Train on the first K shards only (defaults to all of them).
    #[arg(long = "use-dos", env = "PENCIL_USE_DOS")]
    pub use_dos: Option<usize>,
    /// Write the trained model here.
    #[arg(long = "save-model", env = "PENCIL_SAVE_MODEL")]
    pub save_model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Mo,
    Do,
    /// Both parties in one process over an in-memory channel.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fullhe,
    Prep,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub hyper: Hyper,
    #[arg(long, env = "PENCIL_ROLE", value_enum)]
    pub role: RoleArg,
    #[arg(long, env = "PENCIL_MODE", value_enum, default_value = "prep")]
    pub mode: ModeArg,
    /// Address to listen on (model owner).
    #[arg(long, env = "PENCIL_LISTEN")]
    pub listen: Option<String>,
    /// Address of the model owner (data owner).
    #[arg(long, env = "PENCIL_CONNECT")]
    pub connect: Option<String>,
    #[arg(long, env = "PENCIL_OT", default_value = "dealer")]
    pub ot: OtBackend,
    /// Independent masks per operator in the mask banks.
    #[arg(long = "masks-m", env = "PENCIL_MASKS_M", default_value_t = 8)]
    pub masks_m: usize,
    #[arg(long, env = "PENCIL_SCALARS", default_value = "vandermonde")]
    pub scalars: duet_core::prep::ScalarMode,
    /// Load (train) or store (prep) mask banks here instead of generating them in the session.
    #[arg(long = "bank-dir", env = "PENCIL_BANK_DIR")]
    pub bank_dir: Option<PathBuf>,
    /// Stop after this many steps in total.
    #[arg(long, env = "PENCIL_STEPS")]
    pub steps: Option<usize>,
    /// Model owner: number of data owners to accept. Data owner: number of shards.
    #[arg(long, env = "PENCIL_DOS", default_value_t = 1)]
    pub dos: usize,
    /// Data owner: which shard of the training set this party holds.
    #[arg(long = "do-index", env = "PENCIL_DO_INDEX", default_value_t = 0)]
    pub do_index: usize,
    #[arg(long = "labels-per-do", env = "PENCIL_LABELS_PER_DO", default_value_t = 0)]
    pub labels_per_do: usize,
    /// Model owner: start from this checkpoint instead of a fresh initialization.
    #[arg(long = "model-file", env = "PENCIL_MODEL_FILE")]
    pub model_file: Option<PathBuf>,
    /// Hash every received frame and report the digest.
    #[arg(long, env = "PENCIL_TRANSCRIPT", default_value_t = false)]
    pub transcript: bool,
    /// Model owner: report test accuracy after training.
    #[arg(long, env = "PENCIL_EVAL", default_value_t = false)]
    pub eval: bool,
}

#[derive(Args, Clone, Debug)]
pub struct BenchHeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Repetitions per operation.
    #[arg(long, env = "PENCIL_ITERS", default_value_t = 20)]
    pub iters: usize,
}

#[derive(Args, Clone, Debug)]
pub struct BenchLayerArgs {
    #[command(flatten)]
    pub common: Common,
    /// `fc:IN:OUT` or `conv:CIN:COUT:KERNEL:STRIDE:PAD:SIZE`.
    #[arg(long, env = "PENCIL_LAYER", default_value = "fc:256:100")]
    pub layer: String,
    #[arg(long, env = "PENCIL_BATCH", default_value_t = 32)]
    pub batch: usize,
    #[arg(long = "masks-m", env = "PENCIL_MASKS_M", default_value_t = 8)]
    pub masks_m: usize,
    #[arg(long, env = "PENCIL_OT", default_value = "dealer")]
    pub ot: OtBackend,
}

#[derive(Args, Clone, Debug)]
pub struct HardnessArgs {
    /// Masks per operator; without --m and --f the standard table is printed.
    #[arg(long)]
    pub m: Option<u32>,
    /// Fraction bits.
    #[arg(long)]
    pub f: Option<u32>,
    #[arg(long, env = "PENCIL_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct DpBoundArgs {
    #[arg(long, env = "PENCIL_BATCH", default_value_t = 32.0)]
    pub batch: f64,
    #[arg(long, env = "PENCIL_STEPS", default_value_t = 18750.0)]
    pub steps: f64,
    #[arg(long, env = "PENCIL_RECORDS", default_value_t = 60000.0)]
    pub records: f64,
    #[arg(long, env = "PENCIL_EPSILON")]
    pub epsilon: f64,
    #[arg(long, env = "PENCIL_DELTA", default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, env = "PENCIL_C2", default_value_t = 1.0)]
    pub c2: f64,
    #[arg(long, env = "PENCIL_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct SelftestArgs {
    #[arg(long, env = "PENCIL_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long, env = "PENCIL_OUT")]
    pub out: Option<PathBuf>,
}
