//! Model configuration and the plain `key=value` format used by config
//! files, checkpoints and CLI overrides.
//!
//! A file is a sequence of `key=value` lines. `#` starts a comment. A line
//! of the form `[name]` starts a new named section; files with several
//! sections describe several models (used by the cache audit).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{DEFAULT_EPS, DEFAULT_INIT_STD};
use crate::rope::DEFAULT_ROPE_BASE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mha,
    Gqa,
    Mqa,
    Mla,
    EgMla,
    /// EG-MLA with the gate vectors precomputed per vocabulary id at load.
    EgMlaA,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Mha,
        Variant::Gqa,
        Variant::Mqa,
        Variant::Mla,
        Variant::EgMla,
        Variant::EgMlaA,
    ];

    pub fn is_latent(self) -> bool {
        matches!(self, Variant::Mla | Variant::EgMla | Variant::EgMlaA)
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Variant::EgMla | Variant::EgMlaA)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::Gqa => "gqa",
            Variant::Mqa => "mqa",
            Variant::Mla => "mla",
            Variant::EgMla => "eg-mla",
            Variant::EgMlaA => "eg-mla-a",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

/// How the gate vector combines with the up-projected latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GatingMode {
    /// `LN(kv ⊙ g)`.
    MulLn,
    /// `kv ⊙ g` (LayerNorm removed).
    MulNoLn,
    /// `LN(kv + g)` (product replaced with addition).
    AddLn,
}

impl GatingMode {
    pub const ALL: [GatingMode; 3] = [GatingMode::MulLn, GatingMode::MulNoLn, GatingMode::AddLn];

    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::MulLn => "mul_ln",
            GatingMode::MulNoLn => "mul_noln",
            GatingMode::AddLn => "add_ln",
        }
    }

    pub fn uses_ln(self) -> bool {
        !matches!(self, GatingMode::MulNoLn)
    }
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GatingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown gating mode '{s}'")))
    }
}

/// Shape parameters of one latent attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentAttnConfig {
    pub d_model: usize,
    pub n_head: usize,
    pub d_nope: usize,
    pub d_rope: usize,
    pub d_v: usize,
    /// 0 selects the direct query projection.
    pub q_lora_rank: usize,
    /// Stored latent width.
    pub kv_lora_rank: usize,
    /// 0 means plain MLA (no gate).
    pub kv_emb_dim: usize,
    pub vocab_size: usize,
    pub gating_mode: GatingMode,
    pub use_gate_table: bool,
}

impl LatentAttnConfig {
    /// Width of the up-projected key/value row, `n_h · (d_nope + d_v)`.
    pub fn kv_width(&self) -> usize {
        self.n_head * (self.d_nope + self.d_v)
    }

    pub fn q_width(&self) -> usize {
        self.n_head * (self.d_nope + self.d_rope)
    }

    pub fn is_gated(&self) -> bool {
        self.kv_emb_dim > 0
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_nope", self.d_nope),
            ("d_rope", self.d_rope),
            ("d_v", self.d_v),
            ("kv_lora_rank", self.kv_lora_rank),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_rope % 2 != 0 {
            return Err(Error::config(format!("d_rope must be even, got {}", self.d_rope)));
        }
        if self.use_gate_table && !self.is_gated() {
            return Err(Error::config("gate table requires kv_emb_dim > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub variant: Variant,
    pub vocab_size: usize,
    pub n_layer: usize,
    pub d_model: usize,
    pub n_head: usize,
    /// Key/value groups for GQA.
    pub n_kv_groups: usize,
    /// Per-head dim of the baselines.
    pub head_dim: usize,
    pub d_nope: usize,
    pub d_rope: usize,
    pub d_v: usize,
    pub q_lora_rank: usize,
    pub kv_lora_rank: usize,
    pub kv_emb_dim: usize,
    pub gating_mode: GatingMode,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    /// Consecutive layers sharing one KV down-projection and its activation.
    pub lgz: usize,
    pub seed: u64,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

/// Keys accepted by [`ModelConfig::set`], in canonical order.
pub const MODEL_KEYS: &[&str] = &[
    "name",
    "variant",
    "vocab_size",
    "n_layer",
    "d_model",
    "n_head",
    "n_kv_groups",
    "head_dim",
    "d_nope",
    "d_rope",
    "d_v",
    "q_lora_rank",
    "kv_lora_rank",
    "kv_emb_dim",
    "gating_mode",
    "mlp_hidden",
    "max_seq_len",
    "lgz",
    "seed",
    "rope_base",
    "norm_eps",
    "init_std",
];

pub(crate) fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(Variant::EgMla)
    }
}

impl ModelConfig {
    /// Small runnable model (l=2, d_model=64, V=32).
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            name: format!("desk-{variant}"),
            variant,
            vocab_size: 32,
            n_layer: 2,
            d_model: 64,
            n_head: 4,
            n_kv_groups: 2,
            head_dim: 16,
            d_nope: 16,
            d_rope: 16,
            d_v: 16,
            q_lora_rank: 0,
            kv_lora_rank: 16,
            kv_emb_dim: if variant.is_gated() { 16 } else { 0 },
            gating_mode: GatingMode::MulLn,
            mlp_hidden: 256,
            max_seq_len: 64,
            lgz: 1,
            seed: 0,
            rope_base: DEFAULT_ROPE_BASE,
            norm_eps: DEFAULT_EPS,
            init_std: DEFAULT_INIT_STD,
        }
    }

    /// Very small model for finite-difference checks (l=2, d_model=16, V=17).
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            name: format!("tiny-{variant}"),
            vocab_size: 17,
            d_model: 16,
            n_head: 2,
            n_kv_groups: 2,
            head_dim: 8,
            d_nope: 8,
            d_rope: 4,
            d_v: 8,
            kv_lora_rank: 8,
            kv_emb_dim: if variant.is_gated() { 8 } else { 0 },
            mlp_hidden: 32,
            max_seq_len: 16,
            ..ModelConfig::desk(variant)
        }
    }

    /// Number of key/value heads of a baseline variant.
    pub fn n_kv_heads(&self) -> usize {
        match self.variant {
            Variant::Mha => self.n_head,
            Variant::Gqa => self.n_kv_groups,
            Variant::Mqa => 1,
            _ => 0,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_layer / self.lgz
    }

    /// Rotary dim used by the variant (full head dim for the baselines).
    pub fn rope_dim(&self) -> usize {
        if self.variant.is_latent() {
            self.d_rope
        } else {
            self.head_dim
        }
    }

    pub fn latent(&self) -> LatentAttnConfig {
        LatentAttnConfig {
            d_model: self.d_model,
            n_head: self.n_head,
            d_nope: self.d_nope,
            d_rope: self.d_rope,
            d_v: self.d_v,
            q_lora_rank: self.q_lora_rank,
            kv_lora_rank: self.kv_lora_rank,
            kv_emb_dim: if self.variant.is_gated() { self.kv_emb_dim } else { 0 },
            vocab_size: self.vocab_size,
            gating_mode: self.gating_mode,
            use_gate_table: self.variant == Variant::EgMlaA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
            ("lgz", self.lgz),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.n_layer % self.lgz != 0 {
            return Err(Error::config(format!(
                "layer group size {} does not divide n_layer {}",
                self.lgz, self.n_layer
            )));
        }
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::config("norm_eps > 0, init_std >= 0 and rope_base > 1 required"));
        }
        if self.variant.is_latent() {
            if self.variant.is_gated() && self.kv_emb_dim == 0 {
                return Err(Error::config("gated variants require kv_emb_dim > 0"));
            }
            if self.variant == Variant::Mla && self.kv_emb_dim != 0 {
                return Err(Error::config("plain MLA requires kv_emb_dim = 0"));
            }
            self.latent().validate()
        } else {
            if self.head_dim == 0 || self.head_dim % 2 != 0 {
                return Err(Error::config(format!(
                    "head_dim must be even and positive, got {}",
                    self.head_dim
                )));
            }
            let kv = self.n_kv_heads();
            if kv == 0 || self.n_head % kv != 0 {
                return Err(Error::config(format!(
                    "n_head {} not divisible by key/value heads {kv}",
                    self.n_head
                )));
            }
            Ok(())
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "variant" => self.variant = v.parse()?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "n_layer" => self.n_layer = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "n_head" => self.n_head = parse_num(key, v)?,
            "n_kv_groups" => self.n_kv_groups = parse_num(key, v)?,
            "head_dim" => self.head_dim = parse_num(key, v)?,
            "d_nope" => self.d_nope = parse_num(key, v)?,
            "d_rope" => self.d_rope = parse_num(key, v)?,
            "d_v" => self.d_v = parse_num(key, v)?,
            "q_lora_rank" => self.q_lora_rank = parse_num(key, v)?,
            "kv_lora_rank" => self.kv_lora_rank = parse_num(key, v)?,
            "kv_emb_dim" => self.kv_emb_dim = parse_num(key, v)?,
            "gating_mode" => self.gating_mode = v.parse()?,
            "mlp_hidden" => self.mlp_hidden = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "lgz" => self.lgz = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "rope_base" => self.rope_base = parse_num(key, v)?,
            "norm_eps" => self.norm_eps = parse_num(key, v)?,
            "init_std" => self.init_std = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "name" => self.name.clone(),
            "variant" => self.variant.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "n_layer" => self.n_layer.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_head" => self.n_head.to_string(),
            "n_kv_groups" => self.n_kv_groups.to_string(),
            "head_dim" => self.head_dim.to_string(),
            "d_nope" => self.d_nope.to_string(),
            "d_rope" => self.d_rope.to_string(),
            "d_v" => self.d_v.to_string(),
            "q_lora_rank" => self.q_lora_rank.to_string(),
            "kv_lora_rank" => self.kv_lora_rank.to_string(),
            "kv_emb_dim" => self.kv_emb_dim.to_string(),
            "gating_mode" => self.gating_mode.to_string(),
            "mlp_hidden" => self.mlp_hidden.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "lgz" => self.lgz.to_string(),
            "seed" => self.seed.to_string(),
            // `{:?}` round-trips f64 exactly.
            "rope_base" => format!("{:?}", self.rope_base),
            "norm_eps" => format!("{:?}", self.norm_eps),
            "init_std" => format!("{:?}", self.init_std),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Canonical `key=value` text, one line per key in [`MODEL_KEYS`] order.
    pub fn to_kv_text(&self) -> String {
        MODEL_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k)))
            .collect()
    }

    /// Parses text containing only model keys (a single section).
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        if sections.len() != 1 {
            return Err(Error::config("expected exactly one configuration section"));
        }
        let mut cfg = ModelConfig::from_entries(&sections[0].entries)?;
        if let Some(name) = &sections[0].name {
            cfg.name = name.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `entries` in order on top of the desk preset for the variant
    /// they name, so unset geometry keys follow that variant.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = &'a Entry> + Clone) -> Result<Self> {
        let mut variant = Variant::EgMla;
        for e in entries.clone() {
            if e.key == "variant" {
                variant = e.value.parse()?;
            }
        }
        let mut cfg = ModelConfig::desk(variant);
        for e in entries {
            cfg.set(&e.key, &e.value).map_err(|err| match e.line {
                0 => err,
                n => Error::config(format!("line {n}: {err}")),
            })?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub name: Option<String>,
    pub entries: Vec<Entry>,
}

/// Splits `key=value` text into sections. Entries before the first `[name]`
/// header form an unnamed leading section (dropped when empty).
pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section::default()];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {line_no}: malformed section header")))?;
            sections.push(Section {
                name: Some(name.trim().to_string()),
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {line_no}: expected key=value, got '{line}'")))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {line_no}: empty key")));
        }
        let section = sections.last_mut().expect("non-empty");
        if section.entries.iter().any(|e| e.key == key) {
            return Err(Error::config(format!("line {line_no}: duplicate key '{key}'")));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: line_no,
        });
    }
    if sections[0].entries.is_empty() && sections.len() > 1 {
        sections.remove(0);
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_roundtrip() {
        let mut cfg = ModelConfig::tiny(Variant::EgMla);
        cfg.gating_mode = GatingMode::AddLn;
        cfg.norm_eps = 1.234_567_890_123e-7;
        let back = ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_groups() {
        assert!(ModelConfig::from_kv_text("bogus=1\n").is_err());
        let mut cfg = ModelConfig::desk(Variant::Mla);
        cfg.n_layer = 3;
        cfg.lgz = 2;
        assert!(cfg.validate().unwrap_err().to_string().contains("does not divide"));
        cfg.lgz = 3;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_odd_rope_and_gate_mismatch() {
        let mut cfg = ModelConfig::desk(Variant::EgMla);
        cfg.d_rope = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Variant::EgMla);
        cfg.kv_emb_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Variant::Gqa);
        cfg.n_kv_groups = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sections_and_comments() {
        let text = "# header\n[a]\nx = 1 # trailing\n\n[b]\ny=2\n";
        let s = parse_sections(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].name.as_deref(), Some("a"));
        assert_eq!(s[0].entries[0].value, "1");
        assert_eq!(s[1].entries[0].line, 6);
        assert!(parse_sections("x=1\nx=2\n").is_err());
        assert!(parse_sections("novalue\n").is_err());
    }
}
