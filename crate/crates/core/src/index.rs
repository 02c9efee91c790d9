//! Exhaustive nearest-neighbour retrieval over a material gallery.
//!
//! Binary index format, integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MARIIDX1"
//! version   u8       1
//! mode      u8       0 = scaled_dot, 1 = cosine
//! d         u32
//! count     u32
//! checksum  32 bytes SHA-256 of the material encoder checkpoint
//! entry*    id_len u32, id, category_len u32, category, d x f64
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{checkpoint_checksum, embed, patchify, Embedding, EncoderParams};
use crate::error::{Error, Result};
use crate::material::{Category, MaterialSpec};
use crate::par;
use crate::renderer::{render_sphere_swatch, Mask, Raster};
use crate::training::{apply_mask, cosine, similarity};

const MAGIC: &[u8; 8] = b"MARIIDX1";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// The training similarity.
    #[default]
    ScaledDot,
    Cosine,
}

impl SimilarityMode {
    pub fn name(self) -> &'static str {
        match self {
            SimilarityMode::ScaledDot => "scaled_dot",
            SimilarityMode::Cosine => "cosine",
        }
    }

    fn code(self) -> u8 {
        match self {
            SimilarityMode::ScaledDot => 0,
            SimilarityMode::Cosine => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SimilarityMode::ScaledDot),
            1 => Some(SimilarityMode::Cosine),
            _ => None,
        }
    }

    pub fn score(self, query: &Embedding, entry: &Embedding) -> Result<f64> {
        match self {
            SimilarityMode::ScaledDot => similarity(query, entry),
            SimilarityMode::Cosine => cosine(query, entry),
        }
    }
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_dot" => Ok(SimilarityMode::ScaledDot),
            "cosine" => Ok(SimilarityMode::Cosine),
            other => Err(Error::Config(format!("unknown similarity mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub material_id: String,
    pub category: Category,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub mode: SimilarityMode,
    #[serde(with = "hex_bytes")]
    pub encoder_checksum: [u8; 32],
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMaterial {
    pub material_id: String,
    pub category: Category,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub k: usize,
    pub results: Vec<ScoredMaterial>,
}

impl RetrievalIndex {
    /// Validates dimensions, id uniqueness and finiteness.
    pub fn new(
        dim: usize,
        mode: SimilarityMode,
        encoder_checksum: [u8; 32],
        entries: Vec<IndexEntry>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(Error::Shape(format!(
                    "entry `{}` has dimension {}, index has {dim}",
                    e.material_id,
                    e.embedding.dim()
                )));
            }
            if !e.embedding.is_finite() {
                return Err(Error::Config(format!("entry `{}` has a non-finite embedding", e.material_id)));
            }
            if !seen.insert(e.material_id.as_str()) {
                return Err(Error::DuplicateId(e.material_id.clone()));
            }
        }
        Ok(RetrievalIndex { dim, mode, encoder_checksum, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn checksum_hex(&self) -> String {
        hex(&self.encoder_checksum)
    }

    /// A warning when `material_encoder` is not the checkpoint the index was
    /// built from.
    pub fn checksum_warning(&self, material_encoder: &EncoderParams) -> Option<String> {
        let actual = checkpoint_checksum(material_encoder);
        (actual != self.encoder_checksum).then(|| {
            format!(
                "index was built from material encoder {} but the loaded checkpoint is {}",
                self.checksum_hex(),
                hex(&actual)
            )
        })
    }

    /// Scores every entry against `query` and returns the best `k`, ties
    /// broken by ascending material id.
    pub fn rank(&self, query: &Embedding, k: usize) -> Result<QueryResult> {
        if self.is_empty() {
            return Err(Error::Empty("retrieval index has no entries".into()));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::Shape(format!("query has dimension {}, index has {}", query.dim(), self.dim)));
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| {
                Ok(ScoredMaterial {
                    material_id: e.material_id.clone(),
                    category: e.category,
                    score: self.mode.score(query, &e.embedding)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.material_id.cmp(&b.material_id)));
        scored.truncate(k);
        Ok(QueryResult { k, results: scored })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Masked, patchified query input in the form the image encoder sees.
pub fn encode_query(image_encoder: &EncoderParams, image: &Raster, mask: &Mask) -> Result<Embedding> {
    let input = patchify(&image_encoder.config, &apply_mask(image, mask)?)?;
    embed(image_encoder, &input)
}

pub fn query_topk(
    index: &RetrievalIndex,
    image_encoder: &EncoderParams,
    image: &Raster,
    mask: &Mask,
    k: usize,
) -> Result<QueryResult> {
    if index.is_empty() {
        return Err(Error::Empty("retrieval index has no entries".into()));
    }
    if image_encoder.config.output_dim != index.dim {
        return Err(Error::Shape(format!(
            "image encoder outputs dimension {}, index has {}",
            image_encoder.config.output_dim, index.dim
        )));
    }
    index.rank(&encode_query(image_encoder, image, mask)?, k)
}

/// Embeds the quantized sphere swatch of every gallery material.
pub fn build_index(
    material_encoder: &EncoderParams,
    gallery: &[MaterialSpec],
    mode: SimilarityMode,
) -> Result<RetrievalIndex> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery has no materials".into()));
    }
    let mut seen = HashSet::new();
    for m in gallery {
        if !seen.insert(m.id.as_str()) {
            return Err(Error::DuplicateId(m.id.clone()));
        }
    }
    let res = material_encoder.config.resolution;
    let embeddings = par::map(gallery, |m| {
        let swatch = render_sphere_swatch(m, res)?.quantized();
        embed(material_encoder, &patchify(&material_encoder.config, &swatch)?)
    });
    let entries = gallery
        .iter()
        .zip(embeddings)
        .map(|(m, z)| Ok(IndexEntry { material_id: m.id.clone(), category: m.category, embedding: z? }))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::new(material_encoder.config.output_dim, mode, checkpoint_checksum(material_encoder), entries)
}

pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + index.len() * (24 + index.dim * 8));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(index.mode.code());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(&index.encoder_checksum);
    for e in &index.entries {
        for s in [e.material_id.as_str(), e.category.name()] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in e.embedding.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated index file while reading {what} at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| format!("{what} is not valid UTF-8"))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<RetrievalIndex, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err("bad magic, not a MARIIDX1 index file".into());
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(format!("unsupported index version {version}"));
    }
    let code = r.take(1, "mode")?[0];
    let mode = SimilarityMode::from_code(code).ok_or_else(|| format!("unknown similarity mode byte {code}"))?;
    let dim = r.u32("dimension")?;
    let count = r.u32("entry count")?;
    let checksum: [u8; 32] = r.take(32, "checksum")?.try_into().expect("32 bytes");
    let mut entries = Vec::with_capacity(count.min(bytes.len() / 8 + 1));
    for i in 0..count {
        let material_id = r.string(&format!("entry {i} id"))?;
        let category = r.string(&format!("entry {i} category"))?;
        let category: Category = category.parse().map_err(|e: Error| e.to_string())?;
        let raw = r.take(dim * 8, &format!("entry {i} embedding"))?;
        let z = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.push(IndexEntry { material_id, category, embedding: Embedding(z) });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after the last entry", bytes.len() - r.pos));
    }
    RetrievalIndex::new(dim, mode, checksum, entries).map_err(|e| e.to_string())
}

pub fn decode_index(bytes: &[u8], origin: &Path) -> Result<RetrievalIndex> {
    decode(bytes).map_err(|m| Error::format(origin, m))
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    std::fs::write(path, encode_index(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&bytes, path)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

mod hex_bytes {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::hex(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 64 {
            return Err(de::Error::custom("checksum must be 64 hex digits"));
        }
        let mut out = [0u8; 32];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(de::Error::custom)?;
        }
        Ok(out)
    }
}
