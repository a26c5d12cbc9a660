use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ClaspError, Result};

/// What the flow is fit to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorTarget {
    /// `mu / ||mu||`, the eval-mode embedding.
    Mean,
    /// A fresh reparameterized sample per record.
    Sample,
}

/// Which encoder supplies the flow's training embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorSource {
    Behavior,
    /// The paired caption, i.e. the space the policy is trained on.
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Joint,
    /// Alignment only for the first half of the steps, then the full objective.
    Staged,
}

/// Flat `key = value` training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta_align: f64,
    pub beta_caption: f64,
    pub beta_gen: f64,
    pub beta_kl: f64,
    pub tau: f64,
    pub d: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub distributional: bool,
    pub schedule: Schedule,
    pub dropout: f64,
    pub behavior_width: usize,
    pub behavior_ff: usize,
    pub text_width: usize,
    pub text_ff: usize,
    pub caption_width: usize,
    pub caption_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub policy_width: usize,
    pub log_every: u64,
    pub prior_steps: u64,
    pub prior_lr: f64,
    pub prior_batch: usize,
    pub prior_target: PriorTarget,
    pub prior_source: PriorSource,
    pub prior_normalize: bool,
    pub data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta_align: 1.0,
            beta_caption: 0.5,
            beta_gen: 0.5,
            beta_kl: 0.0,
            tau: 0.07,
            d: 32,
            lr: 3e-4,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            distributional: true,
            schedule: Schedule::Joint,
            dropout: 0.1,
            behavior_width: 64,
            behavior_ff: 128,
            text_width: 32,
            text_ff: 64,
            caption_width: 32,
            caption_ff: 64,
            layers: 2,
            heads: 2,
            prefix_len: 10,
            policy_width: 128,
            log_every: 1,
            prior_steps: 1000,
            prior_lr: 1e-3,
            prior_batch: 64,
            prior_target: PriorTarget::Mean,
            prior_source: PriorSource::Behavior,
            prior_normalize: true,
            data: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ClaspError::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ClaspError::Config(format!(
            "bad value {value:?} for `{key}`"
        ))),
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "beta_align" | "beta1" => self.beta_align = parse(key, v)?,
            "beta_caption" | "beta2" => self.beta_caption = parse(key, v)?,
            "beta_gen" | "beta3" => self.beta_gen = parse(key, v)?,
            "beta_kl" => self.beta_kl = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "distributional" => self.distributional = parse_bool(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "joint" => Schedule::Joint,
                    "staged" => Schedule::Staged,
                    _ => return Err(ClaspError::Config(format!("bad schedule {v:?}"))),
                }
            }
            "dropout" => self.dropout = parse(key, v)?,
            "behavior_width" => self.behavior_width = parse(key, v)?,
            "behavior_ff" => self.behavior_ff = parse(key, v)?,
            "text_width" => self.text_width = parse(key, v)?,
            "text_ff" => self.text_ff = parse(key, v)?,
            "caption_width" => self.caption_width = parse(key, v)?,
            "caption_ff" => self.caption_ff = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "prefix_len" => self.prefix_len = parse(key, v)?,
            "policy_width" => self.policy_width = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "prior_steps" => self.prior_steps = parse(key, v)?,
            "prior_lr" => self.prior_lr = parse(key, v)?,
            "prior_batch" => self.prior_batch = parse(key, v)?,
            "prior_target" => {
                self.prior_target = match v {
                    "mean" => PriorTarget::Mean,
                    "sample" => PriorTarget::Sample,
                    _ => return Err(ClaspError::Config(format!("bad prior_target {v:?}"))),
                }
            }
            "prior_source" => {
                self.prior_source = match v {
                    "behavior" => PriorSource::Behavior,
                    "text" => PriorSource::Text,
                    _ => return Err(ClaspError::Config(format!("bad prior_source {v:?}"))),
                }
            }
            "prior_normalize" => self.prior_normalize = parse_bool(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| v.to_string()),
            other => return Err(ClaspError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ClaspError::Config(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a form [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |v: bool| if v { "true" } else { "false" };
        let _ = writeln!(s, "beta_align = {}", self.beta_align);
        let _ = writeln!(s, "beta_caption = {}", self.beta_caption);
        let _ = writeln!(s, "beta_gen = {}", self.beta_gen);
        let _ = writeln!(s, "beta_kl = {}", self.beta_kl);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "distributional = {}", b(self.distributional));
        let _ = writeln!(
            s,
            "schedule = {}",
            match self.schedule {
                Schedule::Joint => "joint",
                Schedule::Staged => "staged",
            }
        );
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "behavior_width = {}", self.behavior_width);
        let _ = writeln!(s, "behavior_ff = {}", self.behavior_ff);
        let _ = writeln!(s, "text_width = {}", self.text_width);
        let _ = writeln!(s, "text_ff = {}", self.text_ff);
        let _ = writeln!(s, "caption_width = {}", self.caption_width);
        let _ = writeln!(s, "caption_ff = {}", self.caption_ff);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "prefix_len = {}", self.prefix_len);
        let _ = writeln!(s, "policy_width = {}", self.policy_width);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "prior_steps = {}", self.prior_steps);
        let _ = writeln!(s, "prior_lr = {}", self.prior_lr);
        let _ = writeln!(s, "prior_batch = {}", self.prior_batch);
        let _ = writeln!(
            s,
            "prior_target = {}",
            match self.prior_target {
                PriorTarget::Mean => "mean",
                PriorTarget::Sample => "sample",
            }
        );
        let _ = writeln!(
            s,
            "prior_source = {}",
            match self.prior_source {
                PriorSource::Behavior => "behavior",
                PriorSource::Text => "text",
            }
        );
        let _ = writeln!(s, "prior_normalize = {}", b(self.prior_normalize));
        let _ = writeln!(s, "data = {}", self.data.as_deref().unwrap_or(""));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClaspError::Config(m));
        for (name, v) in [
            ("beta_align", self.beta_align),
            ("beta_caption", self.beta_caption),
            ("beta_gen", self.beta_gen),
            ("beta_kl", self.beta_kl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr > 0.0) || !(self.prior_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.d < 2 {
            return bad(format!("d must be at least 2, got {}", self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.heads == 0
            || [self.behavior_width, self.text_width, self.caption_width]
                .iter()
                .any(|w| *w == 0 || w % self.heads != 0)
        {
            return bad("model widths must be positive multiples of heads".into());
        }
        if self.layers == 0 || self.prefix_len == 0 || self.policy_width == 0 {
            return bad("layers, prefix_len and policy_width must be positive".into());
        }
        if self.log_every == 0 || self.prior_batch == 0 {
            return bad("log_every and prior_batch must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("beta2", "0").unwrap();
        c.set("distributional", "false").unwrap();
        c.set("prior_target", "sample").unwrap();
        c.set("prior_source", "text").unwrap();
        c.set("data", "d.clasp").unwrap();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = TrainConfig::from_text("# run\n\nsteps = 10 # short\nseed=4\n").unwrap();
        assert_eq!((c.steps, c.seed), (10, 4));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_text("tau = 0").is_err());
        assert!(TrainConfig::from_text("batch_size = 1").is_err());
        assert!(TrainConfig::from_text("beta_align = -1").is_err());
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("steps").is_err());
        assert!(TrainConfig::from_text("steps = x").is_err());
    }
}
