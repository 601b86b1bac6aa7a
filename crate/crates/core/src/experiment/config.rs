//! Flat `key = value` run configuration files with `#` comments.
//!
//! The architecture and tokenization pick the defaults (model preset and
//! training recipe); every other key overrides one field. Dataset paths that
//! are relative resolve against the data root: `data_dir`, else
//! `$TINYLAB_DATA_DIR`, else `./data`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::TokenMode;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig, Positional};
use crate::train::TrainConfig;

pub const DATA_DIR_ENV: &str = "TINYLAB_DATA_DIR";
pub const DEFAULT_DATASET: &str = "tinyshakespeare";

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Everything one training run needs. `model.vocab` is zero until the
/// vocabulary has been built, unless the file pins it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: String,
    pub tokenization: TokenMode,
    pub unk_token: Option<String>,
    pub paths: DataPaths,
    pub out_dir: PathBuf,
    pub overwrite: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

struct Entry<'a> {
    key: &'a str,
    value: &'a str,
    line: usize,
}

const KEYS: &[&str] = &[
    "name",
    "arch",
    "dataset",
    "tokenization",
    "unk_token",
    "data_dir",
    "train_path",
    "val_path",
    "test_path",
    "out_dir",
    "overwrite",
    "context",
    "vocab",
    "d_model",
    "mlp_hidden",
    "heads",
    "layers",
    "ff_width",
    "dropout",
    "attn_dropout",
    "positional",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "train_cap",
    "val_cap",
    "test_cap",
    "early_stop_patience",
    "seed",
    "resample_each_epoch",
];

fn entries(text: &str) -> std::result::Result<Vec<Entry<'_>>, (usize, String)> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or((line, format!("expected key = value, got {content:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err((line, format!("unknown key {key:?}")));
        }
        if !seen.insert(key) {
            return Err((line, format!("duplicate key {key:?}")));
        }
        out.push(Entry { key, value, line });
    }
    Ok(out)
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.replace('_', "")
        .parse()
        .map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Self::parse(&text, path, &name, default_data_root())
    }

    /// Parses `text`; `origin` only labels errors and `default_name` is used
    /// when the file has no `name` key.
    pub fn parse(
        text: &str,
        origin: &Path,
        default_name: &str,
        data_root: PathBuf,
    ) -> Result<Self> {
        let at = |line: usize, msg: String| Error::ConfigParse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let entries = entries(text).map_err(|(line, msg)| at(line, msg))?;
        let find = |key: &str| entries.iter().find(|e| e.key == key);

        let arch_entry =
            find("arch").ok_or_else(|| at(0, "missing required key \"arch\"".into()))?;
        let arch: Arch = arch_entry
            .value
            .parse()
            .map_err(|e: Error| at(arch_entry.line, e.to_string()))?;
        let tokenization = match find("tokenization") {
            Some(e) => e
                .value
                .parse()
                .map_err(|err: Error| at(e.line, err.to_string()))?,
            None => TokenMode::Char,
        };
        let context = match find("context") {
            Some(e) => num(e.value).map_err(|m| at(e.line, m))?,
            None => 128,
        };
        let mut cfg = Self {
            name: default_name.to_string(),
            dataset: DEFAULT_DATASET.to_string(),
            tokenization,
            unk_token: None,
            paths: DataPaths {
                train: PathBuf::new(),
                val: PathBuf::new(),
                test: PathBuf::new(),
            },
            out_dir: PathBuf::from("runs"),
            overwrite: false,
            model: ModelConfig::preset(arch, context, 0),
            train: match tokenization {
                TokenMode::Char => TrainConfig::char_level(arch),
                TokenMode::Word => TrainConfig::word_level(),
            },
        };
        let mut data_root = data_root;
        let mut paths: [Option<PathBuf>; 3] = [None, None, None];
        for e in &entries {
            let v = e.value;
            let r: std::result::Result<(), String> = (|| {
                match e.key {
                    "arch" | "tokenization" | "context" => {}
                    "name" => cfg.name = v.to_string(),
                    "dataset" => cfg.dataset = v.to_string(),
                    "unk_token" => cfg.unk_token = Some(v.to_string()),
                    "data_dir" => data_root = PathBuf::from(v),
                    "train_path" => paths[0] = Some(PathBuf::from(v)),
                    "val_path" => paths[1] = Some(PathBuf::from(v)),
                    "test_path" => paths[2] = Some(PathBuf::from(v)),
                    "out_dir" => cfg.out_dir = PathBuf::from(v),
                    "overwrite" => cfg.overwrite = boolean(v)?,
                    "vocab" => cfg.model.vocab = num(v)?,
                    "d_model" => cfg.model.d_model = num(v)?,
                    "mlp_hidden" => cfg.model.mlp_hidden = num(v)?,
                    "heads" => cfg.model.heads = num(v)?,
                    "layers" => cfg.model.layers = num(v)?,
                    "ff_width" => cfg.model.ff_width = num(v)?,
                    "dropout" => cfg.model.dropout = num(v)?,
                    "attn_dropout" => cfg.model.attn_dropout = num(v)?,
                    "positional" => {
                        cfg.model.positional = v.parse::<Positional>().map_err(|e| e.to_string())?
                    }
                    "learning_rate" => cfg.train.learning_rate = num(v)?,
                    "beta1" => cfg.train.beta1 = num(v)?,
                    "beta2" => cfg.train.beta2 = num(v)?,
                    "eps" => cfg.train.eps = num(v)?,
                    "batch_size" => cfg.train.batch_size = num(v)?,
                    "epochs" => cfg.train.epochs = num(v)?,
                    "train_cap" => cfg.train.train_cap = num(v)?,
                    "val_cap" => cfg.train.val_cap = num(v)?,
                    "test_cap" => cfg.train.test_cap = num(v)?,
                    "early_stop_patience" => {
                        cfg.train.early_stop_patience = match v {
                            "none" => None,
                            _ => Some(num(v)?),
                        }
                    }
                    "seed" => cfg.train.seed = num(v)?,
                    "resample_each_epoch" => cfg.train.resample_each_epoch = boolean(v)?,
                    other => unreachable!("key {other} passed the allow-list"),
                }
                Ok(())
            })();
            r.map_err(|m| at(e.line, format!("{}: {m}", e.key)))?;
        }
        let [train, val, test] = paths;
        let default = |file: &str| PathBuf::from(&cfg.dataset).join(file);
        cfg.paths = DataPaths {
            train: data_root.join(train.unwrap_or_else(|| default("train.txt"))),
            val: data_root.join(val.unwrap_or_else(|| default("valid.txt"))),
            test: data_root.join(test.unwrap_or_else(|| default("test.txt"))),
        };
        cfg.validate().map_err(|e| at(0, e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything that can be checked before the data is read.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid(
                "config",
                format!("run name {:?} is not a plain file name", self.name),
            ));
        }
        let mut probe = self.model.clone();
        if probe.vocab == 0 {
            probe.vocab = 1;
        }
        probe.validate()?;
        self.train.validate()
    }

    /// The model configuration for a vocabulary of `vocab` tokens.
    pub fn model_for_vocab(&self, vocab: usize) -> Result<ModelConfig> {
        if self.model.vocab != 0 && self.model.vocab != vocab {
            return Err(Error::ModelConfig(format!(
                "config pins vocab {} but the data yields {vocab}",
                self.model.vocab
            )));
        }
        let cfg = ModelConfig {
            vocab,
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    /// Key = value text that parses back to an equal configuration, given
    /// the same data root for any relative paths.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("arch", m.arch.to_string());
        kv("dataset", self.dataset.clone());
        kv("tokenization", self.tokenization.to_string());
        if let Some(u) = &self.unk_token {
            kv("unk_token", u.clone());
        }
        kv("train_path", self.paths.train.display().to_string());
        kv("val_path", self.paths.val.display().to_string());
        kv("test_path", self.paths.test.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("overwrite", self.overwrite.to_string());
        kv("context", m.context.to_string());
        kv("vocab", m.vocab.to_string());
        kv("d_model", m.d_model.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("heads", m.heads.to_string());
        kv("layers", m.layers.to_string());
        kv("ff_width", m.ff_width.to_string());
        kv("dropout", m.dropout.to_string());
        kv("attn_dropout", m.attn_dropout.to_string());
        kv("positional", m.positional.name().to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("train_cap", t.train_cap.to_string());
        kv("val_cap", t.val_cap.to_string());
        kv("test_cap", t.test_cap.to_string());
        kv(
            "early_stop_patience",
            t.early_stop_patience
                .map_or("none".into(), |p| p.to_string()),
        );
        kv("seed", t.seed.to_string());
        kv("resample_each_epoch", t.resample_each_epoch.to_string());
        s
    }
}

pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("test.cfg"), "test", PathBuf::from("/data"))
    }

    #[test]
    fn defaults_follow_arch_and_tokenization() {
        let c = parse("arch = transformer\n").unwrap();
        assert_eq!(c.model, ModelConfig::transformer(128, 0, 3));
        assert_eq!(c.train, TrainConfig::char_level(Arch::Transformer));
        assert_eq!(
            c.paths.train,
            PathBuf::from("/data/tinyshakespeare/train.txt")
        );
        assert_eq!(c.name, "test");

        let w = parse("arch = transformer\ntokenization = word\ncontext = 64\n").unwrap();
        assert_eq!(w.train, TrainConfig::word_level());
        assert_eq!(w.model.context, 64);
    }

    #[test]
    fn overrides_and_comments() {
        let c = parse(
            "# a comment\n\narch = mlp   # trailing\nmlp_hidden = 512\nseed = 7\ntrain_cap = 5_000\n\
             early_stop_patience = 3\ndata_dir = /elsewhere\ntrain_path = /abs/train.txt\n",
        )
        .unwrap();
        assert_eq!(c.model.mlp_hidden, 512);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.train_cap, 5_000);
        assert_eq!(c.train.early_stop_patience, Some(3));
        assert_eq!(c.paths.train, PathBuf::from("/abs/train.txt"));
        assert_eq!(
            c.paths.val,
            PathBuf::from("/elsewhere/tinyshakespeare/valid.txt")
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |text: &str| match parse(text) {
            Err(Error::ConfigParse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        };
        assert_eq!(line_of("arch = mlp\nbogus = 1\n"), 2);
        assert_eq!(line_of("arch = mlp\n\nheads 4\n"), 3);
        assert_eq!(line_of("arch = mlp\nseed = 1\nseed = 2\n"), 3);
        assert_eq!(line_of("arch = mlp\nbatch_size = many\n"), 2);
        assert_eq!(line_of("arch = nope\n"), 1);
        assert_eq!(line_of("seed = 1\n"), 0);
    }

    #[test]
    fn zero_batch_size_fails_validation() {
        let err = parse("arch = linear\nbatch_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        assert!(parse("arch = linear\npositional = rope\n").is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = parse(
            "arch = attention\nheads = 2\nlearning_rate = 0.001\nunk_token = <unk>\nseed = 3\n",
        )
        .unwrap();
        let again = parse(&c.render()).unwrap();
        assert_eq!(again, c);
    }
}
