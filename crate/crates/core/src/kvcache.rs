//! Append-only KV caches and the per-token cache auditor.

use std::fmt::Write as _;

use crate::baseline::cache_elems_baseline;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::kernel::{DType, Real, Tensor};
use crate::model::param_counts;

/// Bytes used to store one token id alongside a latent cache row.
pub const ID_BYTES: usize = 4;

/// Compressed cache of one latent attention layer (or one layer group when
/// layers share their down-projection): post-norm latents, post-RoPE shared
/// keys and the token ids needed to recompute gates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentKVCache<T: Real = f64> {
    kv_lora_rank: usize,
    d_rope: usize,
    latents: Vec<T>,
    roped_keys: Vec<T>,
    ids: Vec<usize>,
}

impl<T: Real> LatentKVCache<T> {
    pub fn new(kv_lora_rank: usize, d_rope: usize) -> Self {
        LatentKVCache {
            kv_lora_rank,
            d_rope,
            latents: Vec::new(),
            roped_keys: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn kv_lora_rank(&self) -> usize {
        self.kv_lora_rank
    }

    pub fn d_rope(&self) -> usize {
        self.d_rope
    }

    pub fn append(&mut self, latent_row: &[T], roped_key_row: &[T], id: usize) -> Result<()> {
        if latent_row.len() != self.kv_lora_rank || roped_key_row.len() != self.d_rope {
            return Err(Error::shape(
                "cache_append",
                &[self.kv_lora_rank, self.d_rope],
                &[latent_row.len(), roped_key_row.len()],
            ));
        }
        self.latents.extend_from_slice(latent_row);
        self.roped_keys.extend_from_slice(roped_key_row);
        self.ids.push(id);
        Ok(())
    }

    pub fn latent_row(&self, i: usize) -> &[T] {
        &self.latents[i * self.kv_lora_rank..(i + 1) * self.kv_lora_rank]
    }

    pub fn key_row(&self, i: usize) -> &[T] {
        &self.roped_keys[i * self.d_rope..(i + 1) * self.d_rope]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `seq × kv_lora_rank`, or `None` while empty.
    pub fn latents(&self) -> Option<Tensor<T>> {
        (!self.is_empty()).then(|| Tensor::from_parts(vec![self.len(), self.kv_lora_rank], self.latents.clone()))
    }

    /// `seq × d_rope`, or `None` while empty.
    pub fn roped_keys(&self) -> Option<Tensor<T>> {
        (!self.is_empty()).then(|| Tensor::from_parts(vec![self.len(), self.d_rope], self.roped_keys.clone()))
    }

    /// Float elements held (ids excluded).
    pub fn elements(&self) -> usize {
        self.latents.len() + self.roped_keys.len()
    }
}

/// Uncompressed per-head key/value cache of the baselines. Keys are stored
/// post-RoPE.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKVCache<T: Real = f64> {
    width: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> DenseKVCache<T> {
    /// `width = n_kv · d_h`.
    pub fn new(width: usize) -> Self {
        DenseKVCache {
            width,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn append(&mut self, key_row: &[T], value_row: &[T]) -> Result<()> {
        if key_row.len() != self.width || value_row.len() != self.width {
            return Err(Error::shape(
                "dense_cache_append",
                &[self.width],
                &[key_row.len(), value_row.len()],
            ));
        }
        self.keys.extend_from_slice(key_row);
        self.values.extend_from_slice(value_row);
        Ok(())
    }

    pub fn key_row(&self, i: usize) -> &[T] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    pub fn value_row(&self, i: usize) -> &[T] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn elements(&self) -> usize {
        self.keys.len() + self.values.len()
    }
}

/// Number of layers that hold their own cache: layers in a group share the
/// group leader's cached activation.
pub fn cached_layers(cfg: &ModelConfig) -> usize {
    cfg.n_layer / cfg.lgz.max(1)
}

/// Float elements cached per token across the whole model.
pub fn elements_per_token(cfg: &ModelConfig) -> u64 {
    let l = cached_layers(cfg) as u64;
    if cfg.variant.is_latent() {
        (cfg.kv_lora_rank + cfg.d_rope) as u64 * l
    } else {
        cache_elems_baseline(cfg.variant, cfg.n_head, cfg.n_kv_groups, cfg.head_dim, cached_layers(cfg))
    }
}

/// `"18.43K"`-style display used for report parity.
pub fn display_thousands(elements: u64) -> String {
    format!("{:.2}K", elements as f64 / 1000.0)
}

fn rounded_thousands(elements: u64) -> f64 {
    (elements as f64 / 10.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub name: String,
    pub variant: Variant,
    pub n_layer: usize,
    pub elements_per_token: u64,
    pub bytes_per_token: u64,
    /// Token-id bytes per token; metadata, not counted as cache elements.
    pub id_bytes_per_token: u64,
    /// Reduction relative to the first MHA row, from the displayed
    /// (two-decimal thousands) counts.
    pub pct_vs_mha: Option<f64>,
    pub pct_vs_mla: Option<f64>,
    /// Same reductions from the exact integer counts.
    pub exact_pct_vs_mha: Option<f64>,
    pub exact_pct_vs_mla: Option<f64>,
    pub activated_params: u64,
    pub embed_params: u64,
    /// Size of the precomputed gate table, `V · n_h · (d_nope + d_v)` per layer.
    pub gate_table_params: u64,
}

impl AuditRow {
    pub fn display(&self) -> String {
        display_thousands(self.elements_per_token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheAuditReport {
    pub dtype: DType,
    pub rows: Vec<AuditRow>,
}

/// Columns that depend only on cache geometry (not on vocabulary size).
pub const CACHE_COLUMNS: &[&str] = &[
    "name",
    "variant",
    "n_layer",
    "elements_per_token",
    "display",
    "bytes_per_token",
    "pct_vs_mha",
    "pct_vs_mla",
    "exact_pct_vs_mha",
    "exact_pct_vs_mla",
];

pub const PARAM_COLUMNS: &[&str] = &[
    "id_bytes_per_token",
    "activated_params",
    "embed_params",
    "gate_table_params",
];

fn pct(v: Option<f64>) -> String {
    v.map(|p| format!("{p:.1}")).unwrap_or_default()
}

fn reduction(value: f64, base: f64) -> f64 {
    100.0 * (1.0 - value / base)
}

pub fn audit(configs: &[ModelConfig], dtype: DType) -> CacheAuditReport {
    let counts: Vec<u64> = configs.iter().map(elements_per_token).collect();
    let base_of = |v: Variant| configs.iter().position(|c| c.variant == v).map(|i| counts[i]);
    let mha = base_of(Variant::Mha);
    let mla = base_of(Variant::Mla);
    let rows = configs
        .iter()
        .zip(&counts)
        .map(|(cfg, &elems)| {
            let shown = |base: Option<u64>| base.map(|b| reduction(rounded_thousands(elems), rounded_thousands(b)));
            let exact = |base: Option<u64>| base.map(|b| reduction(elems as f64, b as f64));
            let pc = param_counts(cfg);
            let gate_table = if cfg.variant.is_gated() {
                (cfg.vocab_size * cfg.latent().kv_width() * cfg.n_layer) as u64
            } else {
                0
            };
            AuditRow {
                name: cfg.name.clone(),
                variant: cfg.variant,
                n_layer: cfg.n_layer,
                elements_per_token: elems,
                bytes_per_token: elems * dtype.width() as u64,
                id_bytes_per_token: if cfg.variant.is_latent() {
                    (ID_BYTES * cached_layers(cfg)) as u64
                } else {
                    0
                },
                pct_vs_mha: shown(mha),
                pct_vs_mla: shown(mla),
                exact_pct_vs_mha: exact(mha),
                exact_pct_vs_mla: exact(mla),
                activated_params: pc.activated,
                embed_params: pc.embed,
                gate_table_params: gate_table,
            }
        })
        .collect();
    CacheAuditReport { dtype, rows }
}

impl CacheAuditReport {
    fn cache_fields(r: &AuditRow) -> Vec<String> {
        vec![
            r.name.clone(),
            r.variant.to_string(),
            r.n_layer.to_string(),
            r.elements_per_token.to_string(),
            r.display(),
            r.bytes_per_token.to_string(),
            pct(r.pct_vs_mha),
            pct(r.pct_vs_mla),
            pct(r.exact_pct_vs_mha),
            pct(r.exact_pct_vs_mla),
        ]
    }

    fn param_fields(r: &AuditRow) -> Vec<String> {
        vec![
            r.id_bytes_per_token.to_string(),
            r.activated_params.to_string(),
            r.embed_params.to_string(),
            r.gate_table_params.to_string(),
        ]
    }

    /// Geometry-only CSV; this is what golden files pin.
    pub fn cache_csv(&self) -> String {
        let mut out = CACHE_COLUMNS.join(",") + "\n";
        for r in &self.rows {
            out += &(Self::cache_fields(r).join(",") + "\n");
        }
        out
    }

    /// Full CSV including vocabulary-dependent parameter counts.
    pub fn to_csv(&self) -> String {
        let mut out = CACHE_COLUMNS
            .iter()
            .chain(PARAM_COLUMNS)
            .copied()
            .collect::<Vec<_>>()
            .join(",")
            + "\n";
        for r in &self.rows {
            let mut f = Self::cache_fields(r);
            f.extend(Self::param_fields(r));
            out += &(f.join(",") + "\n");
        }
        out
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let header = [
            "model".to_string(),
            "variant".into(),
            "elem/token".into(),
            "display".into(),
            format!("KiB/token({})", self.dtype.name()),
            "vs MHA %".into(),
            "vs MLA %".into(),
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    r.variant.to_string(),
                    r.elements_per_token.to_string(),
                    r.display(),
                    format!("{:.2}", r.bytes_per_token as f64 / 1024.0),
                    pct(r.pct_vs_mha),
                    pct(r.pct_vs_mla),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..7)
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(body.iter()) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_counts_and_preserves_rows() {
        let mut c = LatentKVCache::<f64>::new(3, 2);
        assert!(c.is_empty());
        c.append(&[1.0, 2.0, 3.0], &[4.0, 5.0], 7).unwrap();
        assert_eq!(c.len(), 1);
        let row0 = c.latent_row(0).to_vec();
        c.append(&[9.0, 9.0, 9.0], &[9.0, 9.0], 1).unwrap();
        assert_eq!(c.latent_row(0), row0.as_slice());
        assert_eq!(c.key_row(0), &[4.0, 5.0]);
        assert!(c.append(&[1.0], &[1.0, 1.0], 0).is_err());
        for _ in 0..5 {
            c.append(&[0.0; 3], &[0.0; 2], 0).unwrap();
        }
        assert_eq!(c.elements(), 7 * (3 + 2));
    }

    #[test]
    fn display_rounding() {
        assert_eq!(display_thousands(18432), "18.43K");
        assert_eq!(display_thousands(1536), "1.54K");
        assert_eq!(display_thousands(960), "0.96K");
        assert_eq!(display_thousands(2304), "2.30K");
    }

    #[test]
    fn single_mha_row_reads_zero_vs_itself() {
        let mut cfg = ModelConfig::desk(Variant::Mha);
        cfg.name = "solo".into();
        let report = audit(&[cfg], DType::F64);
        assert_eq!(report.rows[0].pct_vs_mha, Some(0.0));
        assert_eq!(report.rows[0].pct_vs_mla, None);
        assert!(report.cache_csv().lines().nth(1).unwrap().contains(",0.0,,0.0,"));
    }

    #[test]
    fn monotone_in_rank_and_layers() {
        let mut cfg = ModelConfig::desk(Variant::EgMla);
        let a = elements_per_token(&cfg);
        cfg.kv_lora_rank += 1;
        let b = elements_per_token(&cfg);
        cfg.n_layer += 2;
        let c = elements_per_token(&cfg);
        assert!(a < b && b < c);
    }
}
