use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sample a ground-truth model plus training and held-out corpora.
    Synth,
    /// EM, or quantization-aware EM when a quantizer is set.
    Train,
    /// Post-training compression of a saved model.
    Quantize,
    /// Compare a candidate against a reference and sweep sparsity.
    Eval,
    /// Constraint success rate with and without guidance.
    Decode,
    /// Quantization-aware EM over every bit width and interval.
    Sweep,
}

/// Every experiment setting. Each field can come from a flag or from the
/// TOML file given by `--config`; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Experiment to run (alternative to the positional mode).
    #[arg(long = "mode", value_enum)]
    pub mode: Option<Mode>,
    /// Model file; the reference model for eval.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Second model file, compared against --model by eval.
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// Training corpus: one sequence per line, space-separated token IDs.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Held-out corpus used for test likelihoods.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Bit widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u8>>,
    /// Quantization intervals, comma separated.
    #[arg(long, alias = "intervals", value_delimiter = ',')]
    #[serde(alias = "intervals")]
    pub interval: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of corpus chunks; each EM step consumes one.
    #[arg(long)]
    pub chunks: Option<usize>,
    /// Post-training scheme: prune, linear, kmeans, norm-q or integer.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Quantizer applied during training: none, norm-q or kmeans.
    #[arg(long)]
    pub quantizer: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Global pruning ratio in [0, 1).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Row-normalize after pruning.
    #[arg(long)]
    pub renormalize: Option<bool>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden states of a freshly initialized or synthesized model.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Vocabulary size; inferred from the model or corpus when omitted.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Keyword as space-separated token IDs; repeat for several keywords.
    #[arg(long)]
    pub keyword: Option<Vec<String>>,
    /// Pseudo-count added to expected counts in the M-step.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// Sequences sampled by synth.
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Sequence length sampled by synth.
    #[arg(long)]
    pub length: Option<usize>,
    /// Dirichlet concentration of the synthesized ground truth.
    #[arg(long)]
    pub concentration: Option<f64>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($field:ident),+ $(,)?) => {
        Settings { $($field: $flags.$field.or($file.$field)),+ }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set here take precedence over `file`.
    pub fn over(self, file: Settings) -> Settings {
        overlay!(
            self,
            file,
            mode,
            model,
            candidate,
            corpus,
            heldout,
            out,
            bits,
            interval,
            epochs,
            chunks,
            scheme,
            quantizer,
            epsilon,
            ratio,
            renormalize,
            trials,
            max_len,
            seed,
            hidden,
            vocab,
            keyword,
            smoothing,
            kmeans_iters,
            sequences,
            length,
            concentration,
        )
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn bits(&self, default: &[u8]) -> Result<Vec<u8>> {
        let bits = self.bits.clone().unwrap_or_else(|| default.to_vec());
        if bits.is_empty() {
            bail!("--bits needs at least one width");
        }
        Ok(bits)
    }

    pub fn single_bits(&self, default: u8) -> Result<u8> {
        match self.bits(&[default])?.as_slice() {
            [b] => Ok(*b),
            many => bail!("this mode takes one bit width, got {many:?}"),
        }
    }

    pub fn intervals(&self, default: &[usize]) -> Result<Vec<usize>> {
        let intervals = self.interval.clone().unwrap_or_else(|| default.to_vec());
        if intervals.is_empty() {
            bail!("--interval needs at least one value");
        }
        Ok(intervals)
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
        value
            .as_ref()
            .with_context(|| format!("missing required --{flag}"))
    }

    pub fn keywords(&self) -> Result<Vec<Vec<u32>>> {
        let raw = Self::require(&self.keyword, "keyword")?;
        raw.iter()
            .map(|k| {
                k.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<u32>()
                            .with_context(|| format!("keyword token {t:?} is not a token ID"))
                    })
                    .collect()
            })
            .collect()
    }
}
