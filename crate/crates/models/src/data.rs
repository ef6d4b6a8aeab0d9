use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vexel_core::codec::{normalize_continuous, Codec, EmbedTables, SvgEmbedding};
use vexel_core::conditioning::{document_features, FeatureCache, PixelFeatures};
use vexel_core::normalize::{normalize, NormalizeOptions};
use vexel_core::svg::{parse_svg, Document};

use crate::error::ModelError;

/// One manifest line: an SVG path (relative to the manifest) and a caption.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub svg: PathBuf,
    pub caption: String,
}

/// A parsed, normalized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub path: PathBuf,
    pub caption: String,
    pub doc: Document,
}

/// Reads a JSON-lines manifest, resolving paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ModelError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ModelError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| ModelError::Manifest(format!("line {}: {e}", i + 1)))?;
        if entry.svg.is_relative() {
            entry.svg = base.join(&entry.svg);
        }
        out.push(entry);
    }
    if out.is_empty() {
        return Err(ModelError::Manifest(format!(
            "{} has no entries",
            path.display()
        )));
    }
    Ok(out)
}

/// Parses and normalizes every manifest entry onto `canvas`.
pub fn load_examples(entries: &[ManifestEntry], canvas: u32) -> Result<Vec<Example>, ModelError> {
    entries
        .iter()
        .map(|e| {
            let text = fs::read_to_string(&e.svg)
                .map_err(|err| ModelError::Manifest(format!("{}: {err}", e.svg.display())))?;
            let doc = parse_svg(&text).map_err(|source| ModelError::Svg {
                path: e.svg.display().to_string(),
                source,
            })?;
            let opts = NormalizeOptions {
                canvas,
                ..NormalizeOptions::default()
            };
            Ok(Example {
                path: e.svg.clone(),
                caption: e.caption.clone(),
                doc: normalize(&doc, opts),
            })
        })
        .collect()
}

/// Rendering-sequence prefixes: stage `k` of `b` holds the first
/// `ceil(k·n/b)` elements in paint order.
pub fn build_stages(doc: &Document, b: usize) -> Result<Vec<Document>, ModelError> {
    let n = doc.elements.len();
    if n == 0 {
        return Err(ModelError::EmptyDocument);
    }
    assert!(b >= 1, "at least one stage");
    Ok((1..=b)
        .map(|k| {
            let take = (k * n).div_ceil(b);
            Document::with_elements(doc.canvas, doc.elements[..take].to_vec())
        })
        .collect())
}

/// Pixel features for documents, memoized in memory and optionally backed
/// by an on-disk cache. Values are always rounded through `f32`.
#[derive(Debug, Default)]
pub struct FeatureSource {
    cache: Option<FeatureCache>,
    memo: HashMap<String, PixelFeatures>,
}

impl FeatureSource {
    pub fn new(cache: Option<FeatureCache>) -> Self {
        FeatureSource {
            cache,
            memo: HashMap::new(),
        }
    }

    pub fn features(
        &mut self,
        doc: &Document,
        d_p: usize,
        n: usize,
    ) -> Result<PixelFeatures, ModelError> {
        let key = FeatureCache::key(doc, d_p, n);
        if let Some(f) = self.memo.get(&key) {
            return Ok(f.clone());
        }
        let f = match &self.cache {
            Some(c) => c.features(doc, d_p, n)?,
            None => {
                // match the f32 precision of cached features so training
                // does not depend on whether a cache is configured
                let mut f = document_features(doc, d_p, n);
                f.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
                f
            }
        };
        self.memo.insert(key, f.clone());
        Ok(f)
    }
}

/// Model inputs for one document: the embedded matrix, its pixel
/// features, and the loss mask over valid rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInput {
    pub embedding: SvgEmbedding,
    pub pixels: PixelFeatures,
    pub mask: Vec<bool>,
}

pub fn stage_input(
    doc: &Document,
    codec: &Codec,
    tables: &EmbedTables,
    features: &mut FeatureSource,
    d_p: usize,
) -> Result<StageInput, ModelError> {
    let m = codec.encode(doc)?;
    let mask = m.valid_mask();
    let embedding = tables.embed(&normalize_continuous(&m, codec.canvas));
    let pixels = features.features(doc, d_p, codec.seq_len)?;
    Ok(StageInput {
        embedding,
        pixels,
        mask,
    })
}
