//! Zero-shot classification against template-averaged class embeddings.
//!
//! Each class label is substituted into every prompt template, encoded, and
//! the per-template embeddings are L2-normalized, averaged and (by default)
//! normalized again. Images are scored by dot product with the class rows.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const LABEL_PLACEHOLDER: &str = "[L]";
pub const NORM_TOLERANCE: f32 = 1e-5;

/// Dense row-major `f32` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub rows: usize,
    pub dim: usize,
    pub normalized: bool,
    /// Row keys for lookup encoders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<Vec<String>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl EmbeddingMatrix {
    /// Wraps raw values. `normalized` is verified, not assumed.
    pub fn new(rows: usize, dim: usize, values: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dim must be positive"));
        }
        if values.len() != rows * dim {
            return Err(Error::validation(format!(
                "embedding matrix: {} values for {rows}×{dim}",
                values.len()
            )));
        }
        let m = EmbeddingMatrix {
            rows,
            dim,
            values,
            normalized,
        };
        if normalized {
            if let Some(i) = (0..rows).find(|&i| (norm(m.row(i)) - 1.0).abs() > NORM_TOLERANCE) {
                return Err(Error::validation(format!(
                    "row {i} has norm {} but matrix is marked normalized",
                    norm(m.row(i))
                )));
            }
        }
        Ok(m)
    }

    /// Stacks vectors, normalizing each row.
    pub fn from_rows_normalized(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::validation("ragged embedding rows"));
            }
            values.extend(l2_normalize(r)?);
        }
        Self::new(rows.len(), dim, values, true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Multiplies every value by `s`. The result is no longer marked normalized.
    pub fn scaled(&self, s: f32) -> Self {
        EmbeddingMatrix {
            values: self.values.iter().map(|v| v * s).collect(),
            normalized: false,
            ..self.clone()
        }
    }

    /// Writes `path` (raw little-endian f32) and `path.json`.
    pub fn save(&self, path: impl AsRef<Path>, keys: Option<Vec<String>>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            rows: self.rows,
            dim: self.dim,
            normalized: self.normalized,
            keys,
        };
        let sp = sidecar_path(path);
        fs::write(&sp, serde_json::to_string_pretty(&side).expect("sidecar serializes"))
            .map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Sidecar)> {
        let path = path.as_ref();
        let sp = sidecar_path(path);
        let side_text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::format(&sp, e))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let values = decode_f32(&bytes).ok_or_else(|| Error::format(path, "length is not a multiple of 4"))?;
        let m = Self::new(side.rows, side.dim, values, side.normalized).map_err(|e| Error::format(path, e))?;
        if let Some(keys) = &side.keys {
            if keys.len() != side.rows {
                return Err(Error::format(&sp, "keys length differs from rows"));
            }
        }
        Ok((m, side))
    }
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::validation("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| (f64::from(*x) / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    pub dataset_id: String,
    pub templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(dataset_id: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        let set = PromptTemplateSet {
            dataset_id: dataset_id.into(),
            templates,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::validation(format!("{}: no templates", self.dataset_id)));
        }
        for t in &self.templates {
            if t.matches(LABEL_PLACEHOLDER).count() != 1 {
                return Err(Error::validation(format!(
                    "template '{t}' must contain {LABEL_PLACEHOLDER} exactly once"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        set.validate()?;
        Ok(set)
    }

    pub fn prompts<'a>(&'a self, label: &'a str) -> impl Iterator<Item = String> + 'a {
        self.templates.iter().map(move |t| t.replacen(LABEL_PLACEHOLDER, label, 1))
    }
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>>;
}

pub trait ImageEncoder {
    fn encode_image(&self, img: &Image) -> Result<Vec<f32>>;
}

/// Text "encoder" backed by precomputed vectors keyed by the exact prompt string.
#[derive(Debug, Clone, Default)]
pub struct LookupEncoder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl LookupEncoder {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let table: HashMap<_, _> = entries.into_iter().collect();
        let dim = table.values().next().map_or(0, Vec::len);
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::validation("lookup encoder vectors differ in length"));
        }
        Ok(LookupEncoder { dim, table })
    }

    /// Reads an embedding file whose sidecar carries `keys`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (m, side) = EmbeddingMatrix::load(path)?;
        let keys = side
            .keys
            .ok_or_else(|| Error::format(sidecar_path(path), "lookup encoder needs a 'keys' field"))?;
        Self::new(keys.into_iter().enumerate().map(|(i, k)| (k, m.row(i).to_vec())))
    }
}

impl TextEncoder for LookupEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no embedding for prompt '{text}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassEmbeddingOptions {
    /// Normalize again after averaging the per-template embeddings.
    pub renormalize: bool,
}

impl Default for ClassEmbeddingOptions {
    fn default() -> Self {
        ClassEmbeddingOptions { renormalize: true }
    }
}

pub fn build_class_embeddings(
    encoder: &dyn TextEncoder,
    labels: &[String],
    templates: &PromptTemplateSet,
) -> Result<EmbeddingMatrix> {
    build_class_embeddings_with(encoder, labels, templates, ClassEmbeddingOptions::default())
}

pub fn build_class_embeddings_with(
    encoder: &dyn TextEncoder,
    labels: &[String],
    templates: &PromptTemplateSet,
    opts: ClassEmbeddingOptions,
) -> Result<EmbeddingMatrix> {
    templates.validate()?;
    if labels.is_empty() {
        return Err(Error::validation("no class labels"));
    }
    let dim = encoder.dim();
    let mut values = Vec::with_capacity(labels.len() * dim);
    for label in labels {
        let mut acc = vec![0.0f64; dim];
        let mut count = 0usize;
        for prompt in templates.prompts(label) {
            let v = encoder.encode(&prompt)?;
            if v.len() != dim {
                return Err(Error::validation(format!(
                    "encoder returned {} values for '{prompt}', expected {dim}",
                    v.len()
                )));
            }
            for (a, x) in acc.iter_mut().zip(l2_normalize(&v)?) {
                *a += f64::from(x);
            }
            count += 1;
        }
        let mean: Vec<f32> = acc.iter().map(|a| (a / count as f64) as f32).collect();
        if opts.renormalize {
            values.extend(l2_normalize(&mean)?);
        } else {
            values.extend(mean);
        }
    }
    EmbeddingMatrix::new(labels.len(), dim, values, opts.renormalize)
}

/// Encodes a batch of images into a normalized embedding matrix.
pub fn encode_images(encoder: &dyn ImageEncoder, images: &[Image]) -> Result<EmbeddingMatrix> {
    let rows = images
        .iter()
        .map(|img| encoder.encode_image(img))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows_normalized(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// `images × classes` dot products.
    pub logits: Vec<Vec<f64>>,
    /// Per image, the `k` best classes in descending logit order.
    pub topk: Vec<Vec<usize>>,
    /// The best logit is shared by more than one class; the lowest index won.
    pub ties: Vec<bool>,
}

impl Classification {
    pub fn predictions(&self) -> Vec<usize> {
        self.topk.iter().map(|t| t[0]).collect()
    }

    /// Fraction of images whose label is among the first `k` predictions.
    pub fn accuracy(&self, labels: &[usize], k: usize) -> Result<f64> {
        if labels.len() != self.topk.len() {
            return Err(Error::validation(format!(
                "{} labels for {} images",
                labels.len(),
                self.topk.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::validation("accuracy of an empty set"));
        }
        if k == 0 {
            return Err(Error::validation("k must be >= 1"));
        }
        let hits = self
            .topk
            .iter()
            .zip(labels)
            .filter(|(t, l)| t.iter().take(k).any(|p| p == *l))
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Scores every image against every class and keeps the `k` best per image.
pub fn classify(images: &EmbeddingMatrix, classes: &EmbeddingMatrix, k: usize) -> Result<Classification> {
    if images.dim() != classes.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: images {} vs classes {}",
            images.dim(),
            classes.dim()
        )));
    }
    if classes.rows() == 0 {
        return Err(Error::validation("no classes"));
    }
    if k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    let k = k.min(classes.rows());
    let mut out = Classification {
        logits: Vec::with_capacity(images.rows()),
        topk: Vec::with_capacity(images.rows()),
        ties: Vec::with_capacity(images.rows()),
    };
    for i in 0..images.rows() {
        let img = images.row(i);
        let logits: Vec<f64> = (0..classes.rows())
            .map(|c| {
                img.iter()
                    .zip(classes.row(c))
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum()
            })
            .collect();
        let mut order: Vec<usize> = (0..logits.len()).collect();
        // stable: equal logits keep ascending class order
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        let tie = order.len() > 1 && logits[order[0]] == logits[order[1]];
        order.truncate(k);
        out.logits.push(logits);
        out.topk.push(order);
        out.ties.push(tie);
    }
    Ok(out)
}
