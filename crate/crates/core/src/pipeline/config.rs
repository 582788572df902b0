//! Model configuration and its `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::matching::DEFAULT_CAPACITY;
use crate::polymamba::PolyConfig;
use crate::pulse::PulseConfig;
use crate::scalar::Precision;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value '{value}' for '{key}'")]
    InvalidValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every architectural knob of the flow model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub feat_dim: usize,
    /// Backbone downsampling factor, 4 or 8.
    pub stride: usize,
    /// Base channel width of the backbone.
    pub backbone_width: usize,
    /// PolyMamba depth `L`.
    pub depth: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub iterations: usize,
    pub use_aga: bool,
    pub use_self: bool,
    pub use_cross: bool,
    pub use_mlp: bool,
    pub use_pos: bool,
    pub d_hidden: usize,
    pub d_motion: usize,
    pub radius: usize,
    pub mamba_depth: usize,
    pub bidirectional: bool,
    /// Image size the positional embedding is stored for.
    pub image_height: usize,
    pub image_width: usize,
    pub match_capacity: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 128,
            stride: 8,
            backbone_width: 32,
            depth: 8,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            iterations: 2,
            use_aga: true,
            use_self: true,
            use_cross: true,
            use_mlp: true,
            use_pos: true,
            d_hidden: 128,
            d_motion: 64,
            radius: 4,
            mamba_depth: 1,
            bidirectional: true,
            image_height: 64,
            image_width: 64,
            match_capacity: DEFAULT_CAPACITY,
            precision: Precision::F32,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

macro_rules! fields {
    ($m:ident, $($name:ident : $kind:ident),* $(,)?) => {
        impl ModelConfig {
            /// Names of all keys, in serialisation order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            fn set(&mut self, key: &str, value: &str) -> Option<Result<(), ConfigError>> {
                let bad = || ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() };
                match key {
                    $(stringify!($name) => Some(fields!(@parse $kind, value, bad).map(|v| self.$name = v)),)*
                    _ => None,
                }
            }

            /// Value of `key` in text form.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(fields!(@show $kind, self.$name)),)*
                    _ => None,
                }
            }
        }
    };
    (@parse usize, $v:expr, $bad:expr) => { $v.parse::<usize>().map_err(|_| $bad()) };
    (@parse bool, $v:expr, $bad:expr) => { parse_bool($v).ok_or_else($bad) };
    (@parse precision, $v:expr, $bad:expr) => { Precision::parse($v).ok_or_else($bad) };
    (@show usize, $v:expr) => { $v.to_string() };
    (@show bool, $v:expr) => { $v.to_string() };
    (@show precision, $v:expr) => { $v.as_str().to_string() };
}

fields!(ModelConfig,
    feat_dim: usize,
    stride: usize,
    backbone_width: usize,
    depth: usize,
    d_state: usize,
    expand: usize,
    conv_width: usize,
    iterations: usize,
    use_aga: bool,
    use_self: bool,
    use_cross: bool,
    use_mlp: bool,
    use_pos: bool,
    d_hidden: usize,
    d_motion: usize,
    radius: usize,
    mamba_depth: usize,
    bidirectional: bool,
    image_height: usize,
    image_width: usize,
    match_capacity: usize,
    precision: precision,
);

impl ModelConfig {
    /// The small configuration used for toy training runs.
    pub fn tiny() -> Self {
        Self {
            feat_dim: 64,
            stride: 8,
            backbone_width: 16,
            depth: 2,
            d_state: 8,
            d_hidden: 48,
            d_motion: 32,
            image_height: 32,
            image_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.stride != 4 && self.stride != 8 {
            return Err(ConfigError::Invalid(format!("stride must be 4 or 8, got {}", self.stride)));
        }
        let positive = [
            ("feat_dim", self.feat_dim),
            ("backbone_width", self.backbone_width),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("d_hidden", self.d_hidden),
            ("d_motion", self.d_motion),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("match_capacity", self.match_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !self.image_height.is_multiple_of(self.stride) || !self.image_width.is_multiple_of(self.stride) {
            return Err(ConfigError::Invalid(format!(
                "image size {}x{} is not divisible by stride {}",
                self.image_height, self.image_width, self.stride
            )));
        }
        Ok(())
    }

    /// Feature-map resolution for the configured image size.
    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_height / self.stride, self.image_width / self.stride)
    }

    pub fn poly(&self) -> PolyConfig {
        PolyConfig {
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            depth: self.depth,
            use_self: self.use_self,
            use_cross: self.use_cross,
            use_mlp: self.use_mlp,
            use_pos: self.use_pos,
            ..PolyConfig::new(self.feat_dim, self.feature_hw())
        }
    }

    pub fn pulse(&self) -> PulseConfig {
        PulseConfig {
            d_hidden: self.d_hidden,
            d_motion: self.d_motion,
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
            radius: self.radius,
            iterations: self.iterations,
            use_aga: self.use_aga,
            mamba_depth: self.mamba_depth,
            bidirectional: self.bidirectional,
            ..PulseConfig::new(self.feat_dim)
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. Keys not mentioned
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v).ok_or_else(|| ConfigError::UnknownKey { line: i + 1, key: k.to_string() })??;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// First key whose value differs, with `(self, other)` values.
    pub fn first_difference(&self, other: &Self) -> Option<(&'static str, String, String)> {
        Self::KEYS.iter().find_map(|&k| {
            let (a, b) = (self.get(k)?, other.get(k)?);
            (a != b).then_some((k, a, b))
        })
    }
}

impl FromStr for ModelConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let cfg = ModelConfig { use_cross: false, stride: 4, precision: Precision::F64, ..ModelConfig::tiny() };
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ModelConfig::parse(&ModelConfig::default().to_text()).unwrap(), ModelConfig::default());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ModelConfig::parse("# tiny\nfeat_dim = 32   # D\n\nuse_aga=false\n").unwrap();
        assert_eq!(cfg.feat_dim, 32);
        assert!(!cfg.use_aga);
        assert_eq!(cfg.depth, ModelConfig::default().depth);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ModelConfig::parse("depth"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ModelConfig::parse("x\n=1").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(ModelConfig::parse("\nwidth=3"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(ModelConfig::parse("depth=-1"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(ModelConfig::parse("use_mlp=maybe"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(ModelConfig::parse("stride=2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ModelConfig::parse("image_width=60"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn difference_names_field() {
        let a = ModelConfig::tiny();
        let b = ModelConfig { depth: 3, ..a };
        assert_eq!(a.first_difference(&b), Some(("depth", "2".into(), "3".into())));
        assert_eq!(a.first_difference(&a), None);
    }
}
