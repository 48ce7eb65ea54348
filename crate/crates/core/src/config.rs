//! Training configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are the field names of [`TrainConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::ideal_blob_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pose2d,
    Face,
    Lift3d,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose2d" => Ok(Task::Pose2d),
            "face" => Ok(Task::Face),
            "lift3d" => Ok(Task::Lift3d),
            _ => Err(Error::config(format!("unknown task {s:?} (pose2d|face|lift3d)"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Pose2d => "pose2d",
            Task::Face => "face",
            Task::Lift3d => "lift3d",
        })
    }
}

/// How the discriminator objective is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialForm {
    /// Per-element binary cross-entropy on logits.
    CrossEntropy,
    /// `log(1 − |D − target|)` evaluated on probabilities.
    Literal,
}

impl FromStr for AdversarialForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossentropy" | "bce" => Ok(AdversarialForm::CrossEntropy),
            "literal" => Ok(AdversarialForm::Literal),
            _ => Err(Error::config(format!("unknown adversarial_form {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    /// Generator stacks.
    pub stacks: usize,
    /// Generator feature width.
    pub width: usize,
    pub joints: usize,
    /// Square input side in pixels; heatmaps are a quarter of it.
    pub input_size: usize,
    pub hourglass_depth: usize,
    /// Predict occlusion heatmaps alongside pose heatmaps.
    pub multitask: bool,
    pub sigma: f64,
    /// Pose fake-label threshold in units of the task normalizer.
    pub delta: f64,
    /// Confidence fake-label threshold; `None` derives it from `sigma`.
    pub epsilon: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    /// Train without any discriminator.
    pub baseline: bool,
    pub adversarial_form: AdversarialForm,
    pub disc_width: usize,
    pub disc_depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub lifter_width: usize,
    pub lifter_blocks: usize,
    pub dropout: f64,
    pub disc3d_width: usize,
    /// Standard deviation of the noise added to 2D lifter training inputs, in
    /// the units of those inputs (millimetres on the image plane for
    /// synthetic pairs).
    pub input_noise: f64,
    /// Landmark indices of the two eye centers (face task normalizer).
    pub eyes: Option<(usize, usize)>,
}

/// Scale constant between the confidence threshold and one ideal blob.
pub const EPSILON_FRACTION: f64 = 0.5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Pose2d,
            stacks: 2,
            width: 32,
            joints: 16,
            input_size: 64,
            hourglass_depth: 3,
            multitask: true,
            sigma: 1.0,
            delta: 0.5,
            epsilon: None,
            alpha: 1.0 / 220.0,
            beta: 1.0 / 180.0,
            baseline: false,
            adversarial_form: AdversarialForm::CrossEntropy,
            disc_width: 32,
            disc_depth: 3,
            learning_rate: 2.5e-4,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            patience: 10,
            checkpoint_every: 10,
            augment: false,
            lifter_width: 64,
            lifter_blocks: 2,
            dropout: 0.5,
            disc3d_width: 128,
            input_noise: 1.0,
            eyes: None,
        }
    }
}

impl TrainConfig {
    /// Full-size generator: four stacks of 512 features on 256×256 crops.
    pub fn full_scale() -> Self {
        TrainConfig {
            stacks: 4,
            width: 512,
            input_size: 256,
            hourglass_depth: 4,
            epochs: 230,
            lifter_width: 1024,
            ..Default::default()
        }
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }

    /// Confidence fake-label threshold.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
            .unwrap_or_else(|| EPSILON_FRACTION * ideal_blob_norm(self.sigma))
    }

    /// Occlusion heatmaps are predicted and supervised.
    pub fn occlusion_enabled(&self) -> bool {
        self.multitask && self.task == Task::Pose2d
    }

    /// Confidence discriminator in use (only for 2D body pose with α > 0).
    pub fn uses_confidence(&self) -> bool {
        !self.baseline && self.task == Task::Pose2d && self.alpha > 0.0
    }

    pub fn uses_pose_discriminator(&self) -> bool {
        !self.baseline
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.stacks == 0 {
            return bad("stacks must be at least 1");
        }
        if self.width < 2 || self.joints == 0 || self.disc_width == 0 {
            return bad("width, joints and disc_width must be positive");
        }
        if self.input_size % 4 != 0 {
            return bad("input_size must be divisible by 4");
        }
        let hm = self.heatmap_size();
        if hm < crate::heatmap::MIN_GRID {
            return bad("input_size must give a heatmap of at least 8x8");
        }
        if hm % (1 << self.hourglass_depth) != 0 || hm % (1 << self.disc_depth) != 0 {
            return bad("heatmap size must be divisible by 2^hourglass_depth and 2^disc_depth");
        }
        if !(self.sigma > 0.0) || !(self.delta > 0.0) || self.epsilon.is_some_and(|e| !(e > 0.0)) {
            return bad("sigma, delta and epsilon must be positive");
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.task == Task::Face && self.eyes.is_none() {
            return bad("face task needs eyes = i,j");
        }
        if self.eyes.is_some_and(|(a, b)| a == b || a >= self.joints || b >= self.joints) {
            return bad("eyes must be two distinct joint indices");
        }
        if self.lifter_width == 0 || self.disc3d_width == 0 {
            return bad("lifter sizes must be positive");
        }
        Ok(())
    }

    /// Applies `key = value` overrides.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
        }
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "stacks" => self.stacks = p(key, v)?,
            "width" => self.width = p(key, v)?,
            "joints" => self.joints = p(key, v)?,
            "input_size" => self.input_size = p(key, v)?,
            "hourglass_depth" => self.hourglass_depth = p(key, v)?,
            "multitask" => self.multitask = p(key, v)?,
            "sigma" => self.sigma = p(key, v)?,
            "delta" => self.delta = p(key, v)?,
            "epsilon" => {
                self.epsilon = if v == "auto" { None } else { Some(p(key, v)?) };
            }
            "alpha" => self.alpha = parse_ratio(key, v)?,
            "beta" => self.beta = parse_ratio(key, v)?,
            "baseline" => self.baseline = p(key, v)?,
            "adversarial_form" => self.adversarial_form = v.parse()?,
            "disc_width" => self.disc_width = p(key, v)?,
            "disc_depth" => self.disc_depth = p(key, v)?,
            "learning_rate" => self.learning_rate = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "patience" => self.patience = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "augment" => self.augment = p(key, v)?,
            "lifter_width" => self.lifter_width = p(key, v)?,
            "lifter_blocks" => self.lifter_blocks = p(key, v)?,
            "dropout" => self.dropout = p(key, v)?,
            "disc3d_width" => self.disc3d_width = p(key, v)?,
            "input_noise" => self.input_noise = p(key, v)?,
            "eyes" => self.eyes = parse_eyes(v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Text form with every key, readable by `from_text`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let eps = match self.epsilon {
            Some(e) => format!("{e}"),
            None => "auto".into(),
        };
        let form = match self.adversarial_form {
            AdversarialForm::CrossEntropy => "crossentropy",
            AdversarialForm::Literal => "literal",
        };
        let eyes = match self.eyes {
            Some((a, b)) => format!("{a},{b}"),
            None => "none".into(),
        };
        let rows: [(&str, String); 30] = [
            ("task", self.task.to_string()),
            ("stacks", self.stacks.to_string()),
            ("width", self.width.to_string()),
            ("joints", self.joints.to_string()),
            ("input_size", self.input_size.to_string()),
            ("hourglass_depth", self.hourglass_depth.to_string()),
            ("multitask", self.multitask.to_string()),
            ("sigma", self.sigma.to_string()),
            ("delta", self.delta.to_string()),
            ("epsilon", eps),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("baseline", self.baseline.to_string()),
            ("adversarial_form", form.into()),
            ("disc_width", self.disc_width.to_string()),
            ("disc_depth", self.disc_depth.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("patience", self.patience.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("augment", self.augment.to_string()),
            ("lifter_width", self.lifter_width.to_string()),
            ("lifter_blocks", self.lifter_blocks.to_string()),
            ("dropout", self.dropout.to_string()),
            ("disc3d_width", self.disc3d_width.to_string()),
            ("input_noise", self.input_noise.to_string()),
            ("eyes", eyes),
            ("epsilon_resolved", format!("{}", self.epsilon())),
        ];
        for (k, v) in rows.iter().take(rows.len() - 1) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn parse_eyes(v: &str) -> Result<Option<(usize, usize)>> {
    if v == "none" {
        return Ok(None);
    }
    let err = || Error::config(format!("bad value {v:?} for eyes (expected i,j)"));
    let (a, b) = v.split_once(',').ok_or_else(err)?;
    Ok(Some((a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?)))
}

/// Accepts plain numbers and `a/b` fractions.
fn parse_ratio(key: &str, v: &str) -> Result<f64> {
    let err = || Error::config(format!("bad value {v:?} for {key}"));
    match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| err())?;
            let b: f64 = b.trim().parse().map_err(|_| err())?;
            Ok(a / b)
        }
        None => v.parse().map_err(|_| err()),
    }
}

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_weights() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 1.0 / 220.0);
        assert_eq!(c.beta, 1.0 / 180.0);
        assert_eq!(c.learning_rate, 2.5e-4);
        assert_eq!(TrainConfig::full_scale().stacks, 4);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig {
            epsilon: Some(0.3),
            seed: 7,
            task: Task::Face,
            eyes: Some((3, 9)),
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn fractions_and_comments_parse() {
        let c = TrainConfig::from_text("alpha = 1/220 # weight\n\nbeta=0\n").unwrap();
        assert_eq!(c.alpha, 1.0 / 220.0);
        assert_eq!(c.beta, 0.0);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(TrainConfig::from_text("stack = 3").is_err());
    }

    #[test]
    fn invalid_dims_are_rejected() {
        assert!(TrainConfig::from_text("stacks = 0").is_err());
        assert!(TrainConfig::from_text("input_size = 20").is_err());
        assert!(TrainConfig::from_text("alpha = -1").is_err());
    }

    #[test]
    fn epsilon_defaults_to_half_blob_norm() {
        let c = TrainConfig::default();
        assert!((c.epsilon() - 0.5 * ideal_blob_norm(1.0)).abs() < 1e-12);
    }
}
