//! Flat `key = value` configuration with a typed schema.
//!
//! Values are layered: schema defaults, then a config file, then command-line
//! overrides, the last write winning. Unknown keys and ill-typed values are
//! rejected. [`Config::resolved`] writes every key, so a resolved snapshot
//! alone reproduces a run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::gaze::{check_threshold, RenderMode, DEFAULT_THRESHOLD};
use crate::network::{NetworkConfig, NormMode, RegionModule};
use crate::trainer::TrainerConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { key: String, origin: String },
    #[error("{origin}: {key} = {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
        origin: String,
    },
    #[error("{origin}: expected `key = value`, found {line:?}")]
    Syntax { line: String, origin: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Uint,
    Float,
    Bool,
    Choice(&'static [&'static str]),
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Uint => f.write_str("non-negative integer"),
            Kind::Float => f.write_str("finite number"),
            Kind::Bool => f.write_str("true or false"),
            Kind::Choice(options) => write!(f, "one of {}", options.join(", ")),
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const NORM_MODES: &[&str] = &["softmax", "sigmoid"];
const ABLATIONS: &[&str] = &["none", "uniform-gaze"];
const RENDER_MODES: &[&str] = &["overlay", "soft", "binary"];

macro_rules! keys {
    ($($name:literal $kind:expr, $help:literal;)*) => {
        pub const SCHEMA: &[Key] = &[$(Key { name: $name, kind: $kind, help: $help }),*];
    };
}

keys! {
    "seed" Kind::Uint, "master seed for parameters, noise, replay sampling and episodes";
    "n_maps" Kind::Uint, "number of gazes N";
    "norm_mode" Kind::Choice(NORM_MODES), "spatial normalization of score maps";
    "ablation" Kind::Choice(ABLATIONS), "uniform-gaze replaces the learned module by one fixed uniform gaze";
    "n_atoms" Kind::Uint, "atoms in the return distribution";
    "v_min" Kind::Float, "lowest support atom";
    "v_max" Kind::Float, "highest support atom";
    "hidden_width" Kind::Uint, "width of the first noisy layer in each stream";
    "score_hidden" Kind::Uint, "width of the 1x1-conv bottleneck";
    "gamma" Kind::Float, "discount";
    "n_step" Kind::Uint, "multi-step horizon";
    "batch" Kind::Uint, "minibatch size";
    "lr" Kind::Float, "Adam learning rate";
    "adam_beta1" Kind::Float, "Adam first-moment decay";
    "adam_beta2" Kind::Float, "Adam second-moment decay";
    "adam_eps" Kind::Float, "Adam epsilon";
    "grad_clip" Kind::Float, "global gradient-norm clip, 0 disables";
    "target_update_period" Kind::Uint, "gradient updates between target syncs";
    "train_start" Kind::Uint, "transitions stored before learning";
    "steps_per_update" Kind::Uint, "environment steps per gradient update";
    "total_steps" Kind::Uint, "environment steps of training";
    "eval_every" Kind::Uint, "environment steps between snapshot evaluations";
    "eval_episodes" Kind::Uint, "episodes per snapshot evaluation";
    "test_episodes" Kind::Uint, "episodes of the final report";
    "eval_epsilon" Kind::Float, "epsilon of evaluation episodes";
    "replay_capacity" Kind::Uint, "replay size, a power of two";
    "priority_exponent" Kind::Float, "priority exponent omega";
    "priority_eps" Kind::Float, "added to priorities before the exponent";
    "beta_start" Kind::Float, "initial importance-sampling exponent";
    "beta_end" Kind::Float, "final importance-sampling exponent";
    "log_every" Kind::Uint, "environment steps between metrics rows";
    "log_wallclock" Kind::Bool, "fill the wallclock_s metrics column";
    "noop_max" Kind::Uint, "maximum random no-op starts";
    "frame_cap" Kind::Uint, "frames per episode, no-op starts included";
    "threshold" Kind::Float, "binarization threshold of saliency maps";
    "mode" Kind::Choice(RENDER_MODES), "gaze render mode";
    "viz_frames" Kind::Uint, "maximum frames visualized per run";
}

pub fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn defaults() -> Vec<(&'static str, String)> {
    let t = TrainerConfig::default();
    let n = &t.network;
    vec![
        ("seed", t.seed.to_string()),
        ("n_maps", n.n_maps.to_string()),
        ("norm_mode", n.norm_mode.to_string()),
        ("ablation", "none".into()),
        ("n_atoms", n.n_atoms.to_string()),
        ("v_min", n.v_min.to_string()),
        ("v_max", n.v_max.to_string()),
        ("hidden_width", n.hidden_width.to_string()),
        ("score_hidden", n.score_hidden.to_string()),
        ("gamma", t.gamma.to_string()),
        ("n_step", t.n_step.to_string()),
        ("batch", t.batch.to_string()),
        ("lr", t.lr.to_string()),
        ("adam_beta1", t.adam_beta1.to_string()),
        ("adam_beta2", t.adam_beta2.to_string()),
        ("adam_eps", t.adam_eps.to_string()),
        ("grad_clip", t.grad_clip.to_string()),
        ("target_update_period", t.target_update_period.to_string()),
        ("train_start", t.train_start.to_string()),
        ("steps_per_update", t.steps_per_update.to_string()),
        ("total_steps", t.total_steps.to_string()),
        ("eval_every", t.eval_every.to_string()),
        ("eval_episodes", t.eval_episodes.to_string()),
        ("test_episodes", t.test_episodes.to_string()),
        ("eval_epsilon", t.eval_epsilon.to_string()),
        ("replay_capacity", t.replay_capacity.to_string()),
        ("priority_exponent", t.priority_exponent.to_string()),
        ("priority_eps", t.priority_eps.to_string()),
        ("beta_start", t.beta_start.to_string()),
        ("beta_end", t.beta_end.to_string()),
        ("log_every", t.log_every.to_string()),
        ("log_wallclock", t.log_wallclock.to_string()),
        ("noop_max", t.noop_max.to_string()),
        ("frame_cap", t.frame_cap.to_string()),
        ("threshold", DEFAULT_THRESHOLD.to_string()),
        ("mode", RenderMode::default().to_string()),
        ("viz_frames", "100".into()),
    ]
}

fn check(kind: Kind, value: &str) -> Result<(), String> {
    match kind {
        Kind::Uint => value.parse::<u64>().map(|_| ()).map_err(|e| e.to_string()),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            Ok(_) => Err("not finite".into()),
            Err(e) => Err(e.to_string()),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|e| e.to_string()),
        Kind::Choice(options) if options.contains(&value) => Ok(()),
        Kind::Choice(_) => Err(format!("expected {kind}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = defaults().into_iter().collect::<BTreeMap<_, _>>();
        debug_assert_eq!(values.len(), SCHEMA.len());
        Self { values }
    }
}

impl Config {
    /// Sets one key after checking it against the schema. `origin` names
    /// where the value came from, for error messages.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let Some(k) = schema_key(key) else {
            return Err(ConfigError::UnknownKey {
                key: key.into(),
                origin: origin.into(),
            });
        };
        check(k.kind, value).map_err(|reason| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason,
            origin: origin.into(),
        })?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{source}:{}", i + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: raw.into(),
                    origin,
                });
            };
            self.set(key.trim(), value.trim(), &origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_file(path)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn raw(&self, key: &str) -> &str {
        self.get(key).unwrap_or_else(|| panic!("{key} is not in the schema"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated on set")
    }

    fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        usize::try_from(self.uint(key)).map_err(|_| ConfigError::Invalid(format!("{key} is too large")))
    }

    pub fn float(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated on set")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.raw(key).parse().expect("validated on set")
    }

    /// Every key in schema order, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for k in SCHEMA {
            out.push_str(&format!("{} = {}\n", k.name, self.raw(k.name)));
        }
        out
    }

    /// Network settings. The uniform-gaze ablation always has one map.
    pub fn network(&self) -> Result<NetworkConfig, ConfigError> {
        let region = match self.raw("ablation") {
            "uniform-gaze" => RegionModule::Uniform,
            _ => RegionModule::Learned,
        };
        let n = NetworkConfig {
            n_maps: if region == RegionModule::Uniform {
                1
            } else {
                self.usize("n_maps")?
            },
            norm_mode: self.raw("norm_mode").parse::<NormMode>().map_err(ConfigError::Invalid)?,
            region,
            n_atoms: self.usize("n_atoms")?,
            v_min: self.float("v_min"),
            v_max: self.float("v_max"),
            hidden_width: self.usize("hidden_width")?,
            score_hidden: self.usize("score_hidden")?,
            ..NetworkConfig::default()
        };
        n.validate().map_err(ConfigError::Invalid)?;
        Ok(n)
    }

    pub fn trainer(&self) -> Result<TrainerConfig, ConfigError> {
        let t = TrainerConfig {
            network: self.network()?,
            gamma: self.float("gamma"),
            n_step: self.usize("n_step")?,
            batch: self.usize("batch")?,
            lr: self.float("lr"),
            adam_beta1: self.float("adam_beta1"),
            adam_beta2: self.float("adam_beta2"),
            adam_eps: self.float("adam_eps"),
            grad_clip: self.float("grad_clip"),
            target_update_period: self.uint("target_update_period"),
            train_start: self.usize("train_start")?,
            steps_per_update: self.uint("steps_per_update"),
            eval_every: self.uint("eval_every"),
            eval_episodes: self.usize("eval_episodes")?,
            test_episodes: self.usize("test_episodes")?,
            eval_epsilon: self.float("eval_epsilon"),
            total_steps: self.uint("total_steps"),
            noop_max: self.usize("noop_max")?,
            frame_cap: self.uint("frame_cap"),
            replay_capacity: self.usize("replay_capacity")?,
            priority_exponent: self.float("priority_exponent"),
            priority_eps: self.float("priority_eps"),
            beta_start: self.float("beta_start"),
            beta_end: self.float("beta_end"),
            log_every: self.uint("log_every"),
            log_wallclock: self.flag("log_wallclock"),
            seed: self.uint("seed"),
        };
        t.validate().map_err(ConfigError::Invalid)?;
        Ok(t)
    }

    pub fn threshold(&self) -> Result<f64, ConfigError> {
        let t = self.float("threshold");
        check_threshold(t).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(t)
    }

    pub fn mode(&self) -> RenderMode {
        self.raw("mode").parse().expect("validated on set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = Config::default();
        assert_eq!(c.trainer().unwrap(), TrainerConfig::default());
        assert_eq!(c.mode(), RenderMode::Binary);
        assert_eq!(c.threshold().unwrap(), DEFAULT_THRESHOLD);
    }

    #[test]
    fn later_layers_win() {
        let mut c = Config::default();
        c.apply_text("seed = 3\n# comment\n\nn_maps = 4  # trailing\n", "a.cfg")
            .unwrap();
        c.set("seed", "7", "--seed").unwrap();
        assert_eq!(c.uint("seed"), 7);
        assert_eq!(c.uint("n_maps"), 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = Config::default();
        assert_eq!(
            c.apply_text("seed = 1\nlearning_rate = 0.1\n", "x.cfg"),
            Err(ConfigError::UnknownKey {
                key: "learning_rate".into(),
                origin: "x.cfg:2".into()
            })
        );
        assert!(matches!(c.set("batch", "-3", "cli"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("gamma", "nan", "cli"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("norm_mode", "tanh", "cli"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.apply_text("just words", "y.cfg"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let mut c = Config::default();
        c.apply_text("lr = 0.0001234567891\nnorm_mode = sigmoid\nablation = uniform-gaze\n", "a")
            .unwrap();
        let mut again = Config::default();
        again.apply_text(&c.resolved(), "resolved").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.trainer().unwrap(), c.trainer().unwrap());
        let n = c.network().unwrap();
        assert_eq!(
            (n.region, n.n_maps, n.norm_mode),
            (RegionModule::Uniform, 1, NormMode::Sigmoid)
        );
    }

    #[test]
    fn semantic_validation() {
        let mut c = Config::default();
        c.set("replay_capacity", "1000", "cli").unwrap();
        assert!(matches!(c.trainer(), Err(ConfigError::Invalid(_))));
        let mut c = Config::default();
        c.set("threshold", "1.5", "cli").unwrap();
        assert!(c.threshold().is_err());
    }
}
