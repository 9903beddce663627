//! Run configuration: a flat `key = value` text format with `#` comments.
//!
//! Every tunable across the crate lives here under a stable name.
//! Unknown keys are rejected, and the configuration hash is computed
//! over a canonical sorted rendering, so it does not depend on key
//! order in the file.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceEncoderKind {
    CausalConv,
    Spectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalMode {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Phri,
    Remote,
    Both,
}

/// Every named default in one place. See module docs for the file format.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,

    // Dimensions.
    pub workspace_dim: usize,
    pub token_width: usize,
    pub text_width: usize,
    pub latent_dim: usize,
    pub t_obs: usize,
    pub t_fut: usize,
    pub force_window: usize,
    pub heads: usize,
    pub trunk_blocks: usize,

    // Loss weights.
    pub alpha_max: f64,
    pub beta: f64,
    pub gamma: f64,
    pub anneal_frac: f64,

    // Action chunking.
    pub chunk_len: usize,
    pub chunk_decay: f64,
    pub action_bound: f64,
    pub gripper_bound: f64,

    // Impedance gains (per axis).
    pub imp_mass: f64,
    pub imp_damping: f64,
    pub imp_stiffness: f64,

    // Mode manager.
    pub mode_f_on: f64,
    pub mode_f_off: f64,
    pub mode_dwell: usize,

    // Encoders / policy inputs.
    pub force_encoder: ForceEncoderKind,
    pub force_aware: bool,
    pub intent_latent_token: bool,
    pub intent_traj_token: bool,
    pub goal_mode: GoalMode,
    pub force_input_scale: f64,

    // Training.
    pub lr: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,

    // Scripted human.
    pub human_gain: f64,
    pub human_radius: f64,
    pub human_latency: usize,
    pub human_cap: f64,
    pub human_lead: f64,

    // Scenario and dataset generation.
    pub dataset: DatasetKind,
    pub episodes_per_obstacle: usize,
    pub demos_per_task: usize,
    pub plan_speed: f64,
    pub max_rollout_ticks: usize,
    pub eval_rollouts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workspace_dim: 2,
            token_width: 64,
            text_width: 32,
            latent_dim: 16,
            t_obs: 10,
            t_fut: 10,
            force_window: 32,
            heads: 4,
            trunk_blocks: 2,
            alpha_max: 1.0,
            beta: 1.0,
            gamma: 1.0,
            anneal_frac: 0.2,
            chunk_len: 10,
            chunk_decay: 0.1,
            action_bound: 0.05,
            gripper_bound: 0.25,
            imp_mass: 1.0,
            imp_damping: 20.0,
            imp_stiffness: 100.0,
            mode_f_on: 2.0,
            mode_f_off: 0.5,
            mode_dwell: 10,
            force_encoder: ForceEncoderKind::CausalConv,
            force_aware: true,
            intent_latent_token: true,
            intent_traj_token: true,
            goal_mode: GoalMode::Text,
            force_input_scale: 0.1,
            lr: 1e-3,
            train_steps: 5000,
            batch_size: 32,
            checkpoint_every: 500,
            human_gain: 60.0,
            human_radius: 0.10,
            human_latency: 20,
            human_cap: 8.0,
            human_lead: 0.3,
            dataset: DatasetKind::Phri,
            episodes_per_obstacle: 25,
            demos_per_task: 50,
            plan_speed: 0.18,
            max_rollout_ticks: 200,
            eval_rollouts: 20,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Canonical sorted `key = value` rendering.
            pub fn to_text(&self) -> String {
                let mut pairs: Vec<(String, String)> = vec![
                    $( ($key.to_string(), render_value!(self.$field, $kind)) ),+
                ];
                pairs.sort();
                let mut out = String::new();
                for (k, v) in pairs {
                    out.push_str(&format!("{k} = {v}\n"));
                }
                out
            }

            fn apply(&mut self, key: &str, value: &str, line_no: usize) -> Result<()> {
                match key {
                    $( $key => { parse_value!(self.$field, $kind, key, value, line_no); Ok(()) } ),+,
                    _ => Err(Error::Config(format!(
                        "line {line_no}: unknown key {key:?}"
                    ))),
                }
            }
        }
    };
}

macro_rules! render_value {
    ($field:expr, u64) => {
        format!("{}", $field)
    };
    ($field:expr, usize) => {
        format!("{}", $field)
    };
    ($field:expr, f64) => {
        format!("{:?}", $field)
    };
    ($field:expr, bool) => {
        format!("{}", $field)
    };
    ($field:expr, force_encoder) => {
        match $field {
            ForceEncoderKind::CausalConv => "causal_conv".to_string(),
            ForceEncoderKind::Spectrogram => "spectrogram".to_string(),
        }
    };
    ($field:expr, goal_mode) => {
        match $field {
            GoalMode::Text => "text".to_string(),
            GoalMode::Image => "image".to_string(),
        }
    };
    ($field:expr, dataset) => {
        match $field {
            DatasetKind::Phri => "phri".to_string(),
            DatasetKind::Remote => "remote".to_string(),
            DatasetKind::Both => "both".to_string(),
        }
    };
}

macro_rules! parse_value {
    ($field:expr, u64, $key:expr, $value:expr, $line:expr) => {
        $field = $value.parse::<u64>().map_err(|e| {
            Error::Config(format!("line {}: key {}: {e}", $line, $key))
        })?
    };
    ($field:expr, usize, $key:expr, $value:expr, $line:expr) => {
        $field = $value.parse::<usize>().map_err(|e| {
            Error::Config(format!("line {}: key {}: {e}", $line, $key))
        })?
    };
    ($field:expr, f64, $key:expr, $value:expr, $line:expr) => {
        $field = $value.parse::<f64>().map_err(|e| {
            Error::Config(format!("line {}: key {}: {e}", $line, $key))
        })?
    };
    ($field:expr, bool, $key:expr, $value:expr, $line:expr) => {
        $field = $value.parse::<bool>().map_err(|e| {
            Error::Config(format!("line {}: key {}: {e}", $line, $key))
        })?
    };
    ($field:expr, force_encoder, $key:expr, $value:expr, $line:expr) => {
        $field = match $value {
            "causal_conv" => ForceEncoderKind::CausalConv,
            "spectrogram" => ForceEncoderKind::Spectrogram,
            other => {
                return Err(Error::Config(format!(
                    "line {}: key {}: expected causal_conv|spectrogram, got {other:?}",
                    $line, $key
                )))
            }
        }
    };
    ($field:expr, goal_mode, $key:expr, $value:expr, $line:expr) => {
        $field = match $value {
            "text" => GoalMode::Text,
            "image" => GoalMode::Image,
            other => {
                return Err(Error::Config(format!(
                    "line {}: key {}: expected text|image, got {other:?}",
                    $line, $key
                )))
            }
        }
    };
    ($field:expr, dataset, $key:expr, $value:expr, $line:expr) => {
        $field = match $value {
            "phri" => DatasetKind::Phri,
            "remote" => DatasetKind::Remote,
            "both" => DatasetKind::Both,
            other => {
                return Err(Error::Config(format!(
                    "line {}: key {}: expected phri|remote|both, got {other:?}",
                    $line, $key
                )))
            }
        }
    };
}

config_keys! {
    "seed" => seed: u64,
    "workspace_dim" => workspace_dim: usize,
    "token_width" => token_width: usize,
    "text_width" => text_width: usize,
    "latent_dim" => latent_dim: usize,
    "t_obs" => t_obs: usize,
    "t_fut" => t_fut: usize,
    "force_window" => force_window: usize,
    "heads" => heads: usize,
    "trunk_blocks" => trunk_blocks: usize,
    "alpha_max" => alpha_max: f64,
    "beta" => beta: f64,
    "gamma" => gamma: f64,
    "anneal_frac" => anneal_frac: f64,
    "chunk_len" => chunk_len: usize,
    "chunk_decay" => chunk_decay: f64,
    "action_bound" => action_bound: f64,
    "gripper_bound" => gripper_bound: f64,
    "imp_mass" => imp_mass: f64,
    "imp_damping" => imp_damping: f64,
    "imp_stiffness" => imp_stiffness: f64,
    "mode_f_on" => mode_f_on: f64,
    "mode_f_off" => mode_f_off: f64,
    "mode_dwell" => mode_dwell: usize,
    "force_encoder" => force_encoder: force_encoder,
    "force_aware" => force_aware: bool,
    "intent_latent_token" => intent_latent_token: bool,
    "intent_traj_token" => intent_traj_token: bool,
    "goal_mode" => goal_mode: goal_mode,
    "force_input_scale" => force_input_scale: f64,
    "lr" => lr: f64,
    "train_steps" => train_steps: usize,
    "batch_size" => batch_size: usize,
    "checkpoint_every" => checkpoint_every: usize,
    "human_gain" => human_gain: f64,
    "human_radius" => human_radius: f64,
    "human_latency" => human_latency: usize,
    "human_cap" => human_cap: f64,
    "human_lead" => human_lead: f64,
    "dataset" => dataset: dataset,
    "episodes_per_obstacle" => episodes_per_obstacle: usize,
    "demos_per_task" => demos_per_task: usize,
    "plan_speed" => plan_speed: f64,
    "max_rollout_ticks" => max_rollout_ticks: usize,
    "eval_rollouts" => eval_rollouts: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
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
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`, got {line:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
            }
            seen.push(key.to_string());
            cfg.apply(key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_width", self.token_width),
            ("text_width", self.text_width),
            ("latent_dim", self.latent_dim),
            ("t_obs", self.t_obs),
            ("t_fut", self.t_fut),
            ("force_window", self.force_window),
            ("heads", self.heads),
            ("trunk_blocks", self.trunk_blocks),
            ("chunk_len", self.chunk_len),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.workspace_dim != 2 && self.workspace_dim != 3 {
            return Err(Error::Config("workspace_dim must be 2 or 3".into()));
        }
        if self.token_width % self.heads != 0 {
            return Err(Error::Config("token_width must be divisible by heads".into()));
        }
        if !(self.mode_f_on > self.mode_f_off && self.mode_f_off > 0.0) {
            return Err(Error::Config("need mode_f_on > mode_f_off > 0".into()));
        }
        if self.mode_dwell == 0 {
            return Err(Error::Config("mode_dwell must be >= 1".into()));
        }
        for (name, v) in [
            ("imp_mass", self.imp_mass),
            ("imp_damping", self.imp_damping),
            ("imp_stiffness", self.imp_stiffness),
            ("action_bound", self.action_bound),
            ("gripper_bound", self.gripper_bound),
            ("human_gain", self.human_gain),
            ("human_radius", self.human_radius),
            ("human_cap", self.human_cap),
            ("plan_speed", self.plan_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        for (name, v) in [
            ("alpha_max", self.alpha_max),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("anneal_frac", self.anneal_frac),
            ("chunk_decay", self.chunk_decay),
            ("force_input_scale", self.force_input_scale),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative and finite")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical rendering (stable under key reordering
    /// in the source file).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Width of the robot proprioception vector (position, velocity,
    /// gripper opening).
    pub fn state_width(&self) -> usize {
        2 * self.workspace_dim + 1
    }

    /// Width of one action vector (setpoint delta per axis + gripper).
    pub fn action_width(&self) -> usize {
        self.workspace_dim + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::parse("no_such_key = 5\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("no_such_key"), "{msg}");
    }

    #[test]
    fn hash_stable_under_reordering() {
        let a = RunConfig::parse("seed = 9\nlatent_dim = 8\n").unwrap();
        let b = RunConfig::parse("latent_dim = 8\n# comment\nseed = 9\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("latent_dim = 9\nseed = 9\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn hysteresis_ordering_enforced() {
        assert!(RunConfig::parse("mode_f_on = 0.2\n").is_err());
    }
}
