//! Training hyperparameters as a flat `key = value` file.
//!
//! Every key matches a [`TrainConfig`] field name. Blank lines and `#`
//! comments are ignored. Unknown keys and unparsable values are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DaclError, Result};
use crate::geometry::ScaleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_q: usize,
    pub n_p_plus: usize,
    pub n_p_minus: usize,
    pub tau: f64,
    pub phi: f64,
    pub bank_size: usize,
    pub scales: Vec<usize>,
    pub gamma: f64,
    pub lambda_cross: f64,
    /// Minimum counterpart confidence for a pixel to enter the cross loss.
    pub cross_confidence: f64,
    pub warmup_base: f64,
    pub warmup_sharpness: f64,
    pub warmup_gate_iters: usize,
    pub t_max: usize,
    pub iters: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub pcl_random_sampling: bool,
    pub single_scale: bool,
    pub no_bank: bool,
    pub uniform_w: bool,
    pub infonce_denominator: bool,
    pub negatives_from_all: bool,
    /// Dropout rate on model b's decoder input; 0 keeps the models symmetric.
    pub decoder_dropout: f64,
    pub enc_channels1: usize,
    pub enc_channels2: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_q: 4,
            n_p_plus: 8,
            n_p_minus: 512,
            tau: 0.4,
            phi: 0.5,
            bank_size: 1000,
            scales: vec![4, 8, 16],
            gamma: 1.0,
            lambda_cross: 1.0,
            cross_confidence: 0.95,
            warmup_base: 0.1,
            warmup_sharpness: 5.0,
            warmup_gate_iters: 1000,
            t_max: 3000,
            iters: 3000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            labeled_per_batch: 2,
            labeled_fraction: 0.05,
            seed: 0,
            pcl_random_sampling: false,
            single_scale: false,
            no_bank: false,
            uniform_w: false,
            infonce_denominator: false,
            negatives_from_all: false,
            decoder_dropout: 0.0,
            enc_channels1: 8,
            enc_channels2: 16,
            proj_hidden: 16,
            proj_dim: 16,
            num_classes: 4,
            eval_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| DaclError::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(DaclError::config(key, format!("`{value}` is not a boolean"))),
    }
}

macro_rules! config_fields {
    ($($field:ident: $kind:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every key in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($field) => config_fields!(@parse $kind, self.$field, key, value),)*
                    _ => return Err(DaclError::config(key, "unknown key")),
                }
                Ok(())
            }

            /// Canonical `key = value` rendering, one line per key.
            pub fn to_kv(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($field), config_fields!(@show $kind, self.$field)).unwrap();)*
                out
            }
        }
    };
    (@parse scalar, $slot:expr, $key:expr, $v:expr) => { $slot = parse($key, $v)? };
    (@parse flag, $slot:expr, $key:expr, $v:expr) => { $slot = parse_bool($key, $v)? };
    (@parse list, $slot:expr, $key:expr, $v:expr) => {
        $slot = $v.split(',').map(|s| parse($key, s.trim())).collect::<Result<Vec<usize>>>()?
    };
    (@show scalar, $x:expr) => { $x.to_string() };
    (@show flag, $x:expr) => { $x.to_string() };
    (@show list, $x:expr) => { $x.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",") };
}

config_fields! {
    n_q: scalar, n_p_plus: scalar, n_p_minus: scalar, tau: scalar, phi: scalar,
    bank_size: scalar, scales: list, gamma: scalar, lambda_cross: scalar, cross_confidence: scalar,
    warmup_base: scalar, warmup_sharpness: scalar, warmup_gate_iters: scalar,
    t_max: scalar, iters: scalar, lr: scalar, momentum: scalar, weight_decay: scalar,
    batch_size: scalar, labeled_per_batch: scalar, labeled_fraction: scalar, seed: scalar,
    pcl_random_sampling: flag, single_scale: flag, no_bank: flag, uniform_w: flag,
    infonce_denominator: flag, negatives_from_all: flag, decoder_dropout: scalar,
    enc_channels1: scalar, enc_channels2: scalar, proj_hidden: scalar, proj_dim: scalar,
    num_classes: scalar, eval_every: scalar,
}

impl TrainConfig {
    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DaclError::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        let positive = [
            ("n_q", self.n_q),
            ("n_p_plus", self.n_p_plus),
            ("n_p_minus", self.n_p_minus),
            ("bank_size", self.bank_size),
            ("t_max", self.t_max),
            ("batch_size", self.batch_size),
            ("labeled_per_batch", self.labeled_per_batch),
            ("enc_channels1", self.enc_channels1),
            ("enc_channels2", self.enc_channels2),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                bad.push((k, "must be positive".into()));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(("tau", format!("{} must be positive", self.tau)));
        }
        if !(0.0..1.0).contains(&self.phi) {
            bad.push(("phi", format!("{} not in [0, 1)", self.phi)));
        }
        if let Err(e) = ScaleSet::new(self.scales.clone()) {
            bad.push(("scales", e.to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            bad.push(("gamma", format!("{} must be positive", self.gamma)));
        }
        for (k, v) in [
            ("lambda_cross", self.lambda_cross),
            ("warmup_base", self.warmup_base),
            ("warmup_sharpness", self.warmup_sharpness),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push((k, format!("{v} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.cross_confidence) {
            bad.push(("cross_confidence", format!("{} not in [0, 1]", self.cross_confidence)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(("momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.decoder_dropout) {
            bad.push(("decoder_dropout", format!("{} not in [0, 1)", self.decoder_dropout)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            bad.push(("labeled_fraction", format!("{} not in (0, 1]", self.labeled_fraction)));
        }
        if self.labeled_per_batch > self.batch_size {
            bad.push(("labeled_per_batch", "exceeds batch_size".into()));
        }
        if self.iters > self.t_max {
            bad.push(("iters", format!("{} exceeds t_max {}", self.iters, self.t_max)));
        }
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize {
            bad.push(("num_classes", format!("{} not in [2, 255]", self.num_classes)));
        }
        if bad.is_empty() {
            return Ok(());
        }
        let fields = bad.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ");
        let reason = bad.iter().map(|(k, r)| format!("{k}: {r}")).collect::<Vec<_>>().join("; ");
        Err(DaclError::Config { field: fields, reason })
    }

    /// Neighborhood sizes used for density estimation.
    pub fn scale_set(&self) -> Result<ScaleSet> {
        let all = ScaleSet::new(self.scales.clone())?;
        if self.single_scale {
            ScaleSet::single(all.ks()[0])
        } else {
            Ok(all)
        }
    }

    /// False when the contrastive term can never contribute.
    pub fn contrastive_enabled(&self) -> bool {
        self.warmup_base > 0.0
    }

    /// First 8 bytes of the SHA-256 of [`TrainConfig::to_kv`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let (pcl, single, no_bank, uniform) = match a {
            Ablation::Baseline => {
                self.warmup_base = 0.0;
                return;
            }
            Ablation::Pcl => (true, true, true, true),
            Ablation::Da => (false, true, true, true),
            Ablation::Ms => (false, false, true, true),
            Ablation::Bank => (false, false, false, true),
            Ablation::None => (false, false, false, false),
        };
        self.pcl_random_sampling = pcl;
        self.single_scale = single;
        self.no_bank = no_bank;
        self.uniform_w = uniform;
    }
}

/// Cumulative component rows, from plain co-training to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Co-training only; the contrastive term is switched off.
    Baseline,
    /// Random anchors and positives, single scale, batch only, uniform weights.
    Pcl,
    /// Density-ranked sampling at a single scale within the batch.
    Da,
    /// Adds multi-scale density.
    Ms,
    /// Adds the memory bank for density and positives.
    Bank,
    /// Full method with positiveness weights.
    None,
}

impl Ablation {
    pub const ROWS: [Ablation; 6] =
        [Ablation::Baseline, Ablation::Pcl, Ablation::Da, Ablation::Ms, Ablation::Bank, Ablation::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Pcl => "pcl",
            Ablation::Da => "da",
            Ablation::Ms => "ms",
            Ablation::Bank => "bank",
            Ablation::None => "none",
        }
    }
}

impl FromStr for Ablation {
    type Err = DaclError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ROWS
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| DaclError::config("ablate", format!("unknown row `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = TrainConfig { seed: 17, tau: 0.25, no_bank: true, ..TrainConfig::default() };
        cfg.scales = vec![2, 5];
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.to_kv().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = TrainConfig::from_kv("# desk run\n n_q = 7 \n\nuniform_w=yes # trailing\n").unwrap();
        assert_eq!(cfg.n_q, 7);
        assert!(cfg.uniform_w);
    }

    #[test]
    fn errors_name_every_field() {
        let err = TrainConfig::from_kv("n_q = 0\ntau = -1\n").unwrap_err();
        match err {
            DaclError::Config { field, .. } => assert_eq!(field, "n_q, tau"),
            other => panic!("{other}"),
        }
        assert!(TrainConfig::from_kv("bogus = 1").unwrap_err().is_config());
        assert!(TrainConfig::from_kv("n_q = many").unwrap_err().is_config());
        assert!(TrainConfig::from_kv("labeled_fraction = 0").unwrap_err().is_config());
    }

    #[test]
    fn ablation_rows_are_cumulative() {
        let toggles = |a| {
            let mut c = TrainConfig::default();
            c.apply_ablation(a);
            [c.pcl_random_sampling, c.single_scale, c.no_bank, c.uniform_w]
                .iter()
                .filter(|&&b| b)
                .count()
        };
        let counts: Vec<_> = Ablation::ROWS[1..].iter().map(|&a| toggles(a)).collect();
        assert_eq!(counts, vec![4, 3, 2, 1, 0]);
        let mut base = TrainConfig::default();
        base.apply_ablation(Ablation::Baseline);
        assert!(!base.contrastive_enabled());
        assert_eq!("bank".parse::<Ablation>().unwrap(), Ablation::Bank);
    }
}
