use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ssm::{keyword_enum, Discretization, ScanMode, ScanOptions};

/// Which views enter the model and how they are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    SingleFrontal,
    SingleLateral,
    /// Both views' patches in one sequence: `[U₁…U_J, cls, V₁…V_J]`.
    #[default]
    InputPatchConcat,
    /// Each view encoded separately with shared weights; the two cls
    /// outputs are concatenated before the head.
    ClsTokenConcat,
}

keyword_enum!(
    Fusion,
    Fusion::SingleFrontal => "single_frontal",
    Fusion::SingleLateral => "single_lateral",
    Fusion::InputPatchConcat => "input_patch_concat",
    Fusion::ClsTokenConcat => "cls_token_concat",
);

impl Fusion {
    pub fn is_multi_view(self) -> bool {
        matches!(self, Fusion::InputPatchConcat | Fusion::ClsTokenConcat)
    }
}

/// How the two directional branches rejoin the residual stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualMode {
    /// `T_out = r_fwd + r_bwd + T_in`
    #[default]
    Single,
    /// `T_out = (r_fwd + T_in) + (r_bwd + T_in)`, which doubles the residual
    /// stream in every block.
    LiteralPaper,
}

keyword_enum!(ResidualMode, ResidualMode::Single => "single", ResidualMode::LiteralPaper => "literal_paper");

/// Normalization applied before each block and to the final cls token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Norm {
    /// Learnable gain, no centering.
    #[default]
    Rms,
    /// Mean-centered with a learnable gain and bias.
    Layer,
}

keyword_enum!(Norm, Norm::Rms => "rms", Norm::Layer => "layer");

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub blocks: usize,
    pub dim: usize,
    pub expand: usize,
    pub state: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub conv_width: usize,
    /// Rank of the `Δ` projection.
    pub delta_rank: usize,
    pub fusion: Fusion,
    pub residual_mode: ResidualMode,
    pub discretization: Discretization,
    pub scan_mode: ScanMode,
    pub norm: Norm,
    /// When false the backward branch is skipped entirely.
    pub bidirectional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            blocks: 4,
            dim: 64,
            expand: 128,
            state: 8,
            patch: 8,
            height: 64,
            width: 64,
            conv_width: 4,
            delta_rank: 4,
            fusion: Fusion::InputPatchConcat,
            residual_mode: ResidualMode::Single,
            discretization: Discretization::Multiplication,
            scan_mode: ScanMode::Sequential,
            norm: Norm::Rms,
            bidirectional: true,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn toy() -> Self {
        ModelConfig {
            blocks: 2,
            dim: 8,
            expand: 16,
            state: 4,
            patch: 8,
            height: 16,
            width: 16,
            conv_width: 4,
            delta_rank: 1,
            ..ModelConfig::desk()
        }
    }

    /// The full-size configuration: 24 blocks, `D = 384`, `E = 768`, `N = 16`
    /// on 512×512 inputs.
    pub fn full() -> Self {
        ModelConfig {
            blocks: 24,
            dim: 384,
            expand: 768,
            state: 16,
            patch: 16,
            height: 512,
            width: 512,
            conv_width: 4,
            delta_rank: 24,
            ..ModelConfig::desk()
        }
    }

    /// `⌈D / 16⌉`
    pub fn default_delta_rank(dim: usize) -> usize {
        dim.div_ceil(16).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("dim", self.dim),
            ("expand", self.expand),
            ("state", self.state),
            ("patch", self.patch),
            ("height", self.height),
            ("width", self.width),
            ("conv_width", self.conv_width),
            ("delta_rank", self.delta_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.expand <= self.dim {
            return Err(Error::Config(format!(
                "expand ({}) must exceed dim ({})",
                self.expand, self.dim
            )));
        }
        Ok(())
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            mode: self.scan_mode,
            discretization: self.discretization,
        }
    }

    /// Patches per view, `J = (H/P)·(W/P)`.
    pub fn patches_per_view(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens in one encoder pass.
    pub fn sequence_length(&self) -> usize {
        let j = self.patches_per_view();
        match self.fusion {
            Fusion::InputPatchConcat => 2 * j + 1,
            _ => j + 1,
        }
    }

    pub fn cls_index(&self) -> usize {
        let j = self.patches_per_view();
        match self.fusion {
            Fusion::InputPatchConcat => j,
            _ => j / 2,
        }
    }

    pub fn head_input_dim(&self) -> usize {
        match self.fusion {
            Fusion::ClsTokenConcat => 2 * self.dim,
            _ => self.dim,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("blocks", self.blocks.to_string()),
            ("dim", self.dim.to_string()),
            ("expand", self.expand.to_string()),
            ("state", self.state.to_string()),
            ("patch", self.patch.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("delta_rank", self.delta_rank.to_string()),
            ("fusion", self.fusion.to_string()),
            ("residual_mode", self.residual_mode.to_string()),
            ("discretization", self.discretization.to_string()),
            ("scan_mode", self.scan_mode.to_string()),
            ("norm", self.norm.to_string()),
            ("bidirectional", self.bidirectional.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 15] = [
        "blocks",
        "dim",
        "expand",
        "state",
        "patch",
        "height",
        "width",
        "conv_width",
        "delta_rank",
        "fusion",
        "residual_mode",
        "discretization",
        "scan_mode",
        "norm",
        "bidirectional",
    ];

    /// Apply one `key = value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "blocks" => self.blocks = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "expand" => self.expand = parse_value(key, value)?,
            "state" => self.state = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "conv_width" => self.conv_width = parse_value(key, value)?,
            "delta_rank" => self.delta_rank = parse_value(key, value)?,
            "fusion" => self.fusion = parse_value(key, value)?,
            "residual_mode" => self.residual_mode = parse_value(key, value)?,
            "discretization" => self.discretization = parse_value(key, value)?,
            "scan_mode" => self.scan_mode = parse_value(key, value)?,
            "norm" => self.norm = parse_value(key, value)?,
            "bidirectional" => self.bidirectional = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for (key, value) in parse_key_values(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped;
/// a repeated key is an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::toy();
        cfg.fusion = Fusion::ClsTokenConcat;
        cfg.residual_mode = ResidualMode::LiteralPaper;
        cfg.norm = Norm::Layer;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ModelConfig::from_text("colour = blue\n").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = ModelConfig::from_text("# header\n\nblocks = 2 # two\n").unwrap();
        assert_eq!(cfg.blocks, 2);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let cfg = ModelConfig {
            height: 20,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn keys_cover_entries() {
        let names: Vec<_> = ModelConfig::desk().entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, ModelConfig::KEYS);
    }
}
