//! Flat `key = value` settings shared by every command.
//!
//! Values come from built-in defaults, then an optional file, then
//! command-line overrides, each layer replacing the previous one. Unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{IngestOptions, LeakLexicon, SplitRatios};
use crate::embedder::GqaConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadKind, TrainedTask};
use crate::memory::MemoryConfig;
use crate::train::RunConfig;

/// Every key with its default, in display order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dim", "64", "embedding width of the built-in encoder"),
    ("posts_per_batch", "8", "posts grouped into one batch at ingestion"),
    ("vocab_bits", "20", "hashed vocabulary size as a power of two (8..=24)"),
    ("seq_cap", "256", "tokens per batch kept by the encoder"),
    ("gqa.heads", "8", "key/value heads per encoder layer"),
    ("gqa.groups", "2", "key/value heads sharing one query head"),
    ("gqa.layers", "2", "encoder layers"),
    ("theta", "0.98", "cosine threshold for near-duplicate reuse"),
    ("capacity", "none", "maximum stored embeddings, or none"),
    ("bits", "16", "LSH signature bits"),
    ("probe_radius", "1", "Hamming radius searched around a probe's bucket"),
    ("head.kind", "gru", "gru or meanpool"),
    ("head.hidden", "512", "head hidden width"),
    ("head.layers", "3", "stacked GRU layers"),
    ("head.dropout", "0.2", "dropout between GRU layers"),
    ("lr", "0.001", "Adam learning rate"),
    ("epochs", "100", "maximum epochs per run"),
    ("patience", "10", "non-improving epochs before stopping"),
    ("minibatch", "32", "users per optimizer step"),
    ("seed", "0", "seed for every random choice of a command"),
    ("n_runs", "10", "independent training runs"),
    ("task", "dims", "dims or type16"),
    ("split", "0.6,0.2,0.2", "train,validation,test fractions"),
    ("lexicon", "", "file of extra leak terms, one per line"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub dim: usize,
    pub posts_per_batch: usize,
    pub vocab_bits: u32,
    pub seq_cap: usize,
    pub gqa_heads: usize,
    pub gqa_groups: usize,
    pub gqa_layers: usize,
    pub theta: f64,
    pub capacity: Option<usize>,
    pub bits: usize,
    pub probe_radius: usize,
    pub head_kind: HeadKind,
    pub head_hidden: usize,
    pub head_layers: usize,
    pub head_dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub minibatch: usize,
    pub seed: u64,
    pub n_runs: usize,
    pub task: TrainedTask,
    pub split: SplitRatios,
    pub lexicon: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let mut s = Settings {
            dim: 0,
            posts_per_batch: 0,
            vocab_bits: 0,
            seq_cap: 0,
            gqa_heads: 0,
            gqa_groups: 0,
            gqa_layers: 0,
            theta: 0.0,
            capacity: None,
            bits: 0,
            probe_radius: 0,
            head_kind: HeadKind::Gru,
            head_hidden: 0,
            head_layers: 0,
            head_dropout: 0.0,
            lr: 0.0,
            epochs: 0,
            patience: 0,
            minibatch: 0,
            seed: 0,
            n_runs: 0,
            task: TrainedTask::Dims,
            split: SplitRatios::default(),
            lexicon: None,
        };
        for (k, v, _) in KEYS {
            s.set(k, v).expect("built-in default parses");
        }
        s
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dim" => self.dim = parse(key, value)?,
            "posts_per_batch" => self.posts_per_batch = parse(key, value)?,
            "vocab_bits" => self.vocab_bits = parse(key, value)?,
            "seq_cap" => self.seq_cap = parse(key, value)?,
            "gqa.heads" => self.gqa_heads = parse(key, value)?,
            "gqa.groups" => self.gqa_groups = parse(key, value)?,
            "gqa.layers" => self.gqa_layers = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "capacity" => {
                self.capacity = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "bits" => self.bits = parse(key, value)?,
            "probe_radius" => self.probe_radius = parse(key, value)?,
            "head.kind" => self.head_kind = parse(key, value)?,
            "head.hidden" => self.head_hidden = parse(key, value)?,
            "head.layers" => self.head_layers = parse(key, value)?,
            "head.dropout" => self.head_dropout = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "minibatch" => self.minibatch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_runs" => self.n_runs = parse(key, value)?,
            "task" => self.task = parse(key, value)?,
            "split" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                let [train, validation, test] = parts[..] else {
                    return Err(Error::Config(format!("split needs three fractions, got {value:?}")));
                };
                self.split = SplitRatios {
                    train,
                    validation,
                    test,
                };
            }
            "lexicon" => self.lexicon = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies a settings file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(f) = file {
            s.apply_file(f)?;
        }
        for o in overrides {
            s.assign(o)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.gqa().validate()?;
        self.head(self.dim).validate()?;
        self.run().validate()?;
        self.split.validate()?;
        if self.posts_per_batch == 0 {
            return Err(Error::Config("posts_per_batch must be at least 1".into()));
        }
        if !(8..=24).contains(&self.vocab_bits) {
            return Err(Error::Config(format!("vocab_bits {} outside 8..=24", self.vocab_bits)));
        }
        if !(1..=64).contains(&self.bits) {
            return Err(Error::Config(format!("bits {} outside 1..=64", self.bits)));
        }
        if self.capacity == Some(0) {
            return Err(Error::Config("capacity must be at least 1".into()));
        }
        if self.theta.is_nan() {
            return Err(Error::Config("theta is NaN".into()));
        }
        Ok(())
    }

    pub fn gqa(&self) -> GqaConfig {
        GqaConfig {
            dim: self.dim,
            heads: self.gqa_heads,
            groups: self.gqa_groups,
            layers: self.gqa_layers,
            seq_cap: self.seq_cap,
            seed: self.seed,
        }
    }

    pub fn memory(&self, dim: usize) -> MemoryConfig {
        MemoryConfig {
            dim,
            bits: self.bits,
            capacity: self.capacity,
            theta: self.theta,
            probe_radius: self.probe_radius,
            seed: self.seed,
        }
    }

    pub fn head(&self, input_dim: usize) -> HeadConfig {
        HeadConfig {
            kind: self.head_kind,
            input_dim,
            hidden_dim: self.head_hidden,
            layers: self.head_layers,
            dropout_p: self.head_dropout,
            seed: self.seed,
        }
    }

    pub fn run(&self) -> RunConfig {
        RunConfig {
            epochs: self.epochs,
            minibatch: self.minibatch,
            seed: self.seed,
            task: self.task,
            patience: self.patience,
            lr: self.lr,
            n_runs: self.n_runs,
        }
    }

    /// Default lexicon plus the terms listed in the `lexicon` file.
    pub fn ingest(&self) -> Result<IngestOptions> {
        let mut lexicon = LeakLexicon::default_terms();
        if let Some(path) = &self.lexicon {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            lexicon.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')));
        }
        Ok(IngestOptions {
            posts_per_batch: self.posts_per_batch,
            vocab_bits: self.vocab_bits,
            lexicon: Some(lexicon),
        })
    }

    /// Effective settings in file syntax.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _, help) in KEYS {
            let v = match *k {
                "dim" => self.dim.to_string(),
                "posts_per_batch" => self.posts_per_batch.to_string(),
                "vocab_bits" => self.vocab_bits.to_string(),
                "seq_cap" => self.seq_cap.to_string(),
                "gqa.heads" => self.gqa_heads.to_string(),
                "gqa.groups" => self.gqa_groups.to_string(),
                "gqa.layers" => self.gqa_layers.to_string(),
                "theta" => self.theta.to_string(),
                "capacity" => self.capacity.map_or("none".into(), |c| c.to_string()),
                "bits" => self.bits.to_string(),
                "probe_radius" => self.probe_radius.to_string(),
                "head.kind" => self.head_kind.to_string(),
                "head.hidden" => self.head_hidden.to_string(),
                "head.layers" => self.head_layers.to_string(),
                "head.dropout" => self.head_dropout.to_string(),
                "lr" => self.lr.to_string(),
                "epochs" => self.epochs.to_string(),
                "patience" => self.patience.to_string(),
                "minibatch" => self.minibatch.to_string(),
                "seed" => self.seed.to_string(),
                "n_runs" => self.n_runs.to_string(),
                "task" => self.task.to_string(),
                "split" => format!("{},{},{}", self.split.train, self.split.validation, self.split.test),
                "lexicon" => self.lexicon.as_ref().map_or(String::new(), |p| p.display().to_string()),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "# {help}\n{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_match_table() {
        let s = Settings::default();
        s.validate().unwrap();
        assert_eq!(s.head_hidden, 512);
        assert_eq!(s.head_layers, 3);
        assert_eq!(s.head_dropout, 0.2);
        assert_eq!(s.lr, 1e-3);
        assert_eq!(s.n_runs, 10);
        assert_eq!(s.capacity, None);
        assert_eq!(s.theta, 0.98);
        assert_eq!(s.task, TrainedTask::Dims);
    }

    #[test]
    fn render_round_trips() {
        let mut s = Settings::default();
        s.set("capacity", "12").unwrap();
        s.set("task", "type16").unwrap();
        s.set("split", "0.5, 0.25, 0.25").unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(s.render().as_bytes()).unwrap();
        assert_eq!(Settings::resolve(Some(f.path()), &[]).unwrap(), s);
    }

    #[test]
    fn flags_override_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# comment\nepochs = 7\nseed=3  # trailing").unwrap();
        let s = Settings::resolve(Some(f.path()), &["epochs=9".into()]).unwrap();
        assert_eq!((s.epochs, s.seed), (9, 3));
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "epochs = 2\nlearning_rate = 0.1").unwrap();
        assert!(matches!(Settings::resolve(Some(f.path()), &[]), Err(Error::Parse { line: 2, .. })));
        assert!(Settings::resolve(None, &["epochs=two".into()]).is_err());
        assert!(Settings::resolve(None, &["epochs".into()]).is_err());
        assert!(Settings::resolve(None, &["split=0.5,0.5".into()]).is_err());
        assert!(Settings::resolve(None, &["epochs=0".into()]).is_err());
    }
}
