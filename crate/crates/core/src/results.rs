//! Accuracy tables: (model, dataset, resolution) → top-1 accuracy.
//!
//! Everything downstream works in fractions. Percent inputs are accepted only
//! at the file boundary, through a `# unit=percent` comment line (CSV) or a
//! `"unit": "percent"` field (JSON).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resolutions at which low-resolution accuracy is reported.
pub const LOW_RESOLUTIONS: [u32; 4] = [16, 32, 64, 128];

/// Native input resolutions of the evaluated backbones.
pub const HR_RESOLUTIONS: [u32; 7] = [224, 256, 336, 372, 378, 384, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub model_id: String,
    pub backbone_id: String,
    pub dataset_id: String,
    pub resolution: u32,
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "id")]
    pub dataset_id: String,
    pub num_classes: u32,
}

impl DatasetMeta {
    pub fn new(id: impl Into<String>, num_classes: u32) -> Result<Self> {
        let meta = DatasetMeta {
            dataset_id: id.into(),
            num_classes,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Accuracy of a uniformly random guess, `1 / C`.
    pub fn a_rand(&self) -> f64 {
        1.0 / f64::from(self.num_classes)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation(format!(
                "dataset {}: num_classes must be >= 2, got {}",
                self.dataset_id, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(rename = "id")]
    pub model_id: String,
    #[serde(rename = "backbone")]
    pub backbone_id: String,
    pub hr_resolution: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<u64>,
}

impl ModelMeta {
    pub fn new(id: impl Into<String>, backbone: impl Into<String>, hr_resolution: u32) -> Result<Self> {
        let meta = ModelMeta {
            model_id: id.into(),
            backbone_id: backbone.into(),
            hr_resolution,
            param_count: None,
        };
        meta.validate()?;
        Ok(meta)
    }

    fn validate(&self) -> Result<()> {
        if !HR_RESOLUTIONS.contains(&self.hr_resolution) {
            return Err(Error::validation(format!(
                "model {}: hr_resolution {} not in {:?}",
                self.model_id, self.hr_resolution, HR_RESOLUTIONS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::validation(format!("unknown format '{other}' (csv|json)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Unit {
    #[default]
    Fraction,
    Percent,
}

type Key = (String, String, u32);

/// Validated, immutable accuracy table.
#[derive(Debug, Clone, Default)]
pub struct ResultsTable {
    records: Vec<AccuracyRecord>,
    datasets: Vec<DatasetMeta>,
    models: Vec<ModelMeta>,
    index: HashMap<Key, usize>,
}

impl PartialEq for ResultsTable {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.datasets == other.datasets && self.models == other.models
    }
}

/// Which (model, dataset, resolution) triples are present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub present: usize,
    pub models: usize,
    pub datasets: usize,
    pub resolutions: Vec<u32>,
    /// Cross-product cells (over the models, datasets and resolutions seen in
    /// the records) that have no record.
    pub missing: Vec<(String, String, u32)>,
}

impl ResultsTable {
    /// Builds a table, applying every validation rule. Rows in errors are
    /// numbered from 1.
    pub fn from_records(
        records: Vec<AccuracyRecord>,
        datasets: Vec<DatasetMeta>,
        models: Vec<ModelMeta>,
    ) -> Result<Self> {
        let mut builder = TableBuilder::new(datasets, models)?;
        for (i, rec) in records.into_iter().enumerate() {
            builder.push(rec, i + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn empty(datasets: Vec<DatasetMeta>, models: Vec<ModelMeta>) -> Result<Self> {
        Self::from_records(Vec::new(), datasets, models)
    }

    /// Reads an accuracy file in the given format and validates it against the metadata.
    pub fn ingest(
        path: impl AsRef<Path>,
        format: Format,
        datasets: Vec<DatasetMeta>,
        models: Vec<ModelMeta>,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match format {
            Format::Csv => Self::parse_csv(&text, datasets, models),
            Format::Json => Self::parse_json(&text, datasets, models),
        }
    }

    pub fn parse_csv(text: &str, datasets: Vec<DatasetMeta>, models: Vec<ModelMeta>) -> Result<Self> {
        let mut unit = Unit::Fraction;
        let mut body = text;
        let mut line_offset = 0;
        if let Some(first) = text.lines().next() {
            if let Some(comment) = first.trim_start().strip_prefix('#') {
                unit = parse_unit_comment(comment)?;
                body = text.split_once('\n').map_or("", |(_, rest)| rest);
                line_offset = 1;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(body.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::validation(format!("bad CSV header: {e}")))?
            .clone();
        let expected = ["model_id", "backbone_id", "dataset_id", "resolution", "top1"];
        let header_ok = (headers.len() == 5 || (headers.len() == 6 && &headers[5] == "top5"))
            && headers.iter().zip(expected).all(|(h, e)| h == e);
        if !header_ok {
            return Err(Error::validation(format!(
                "CSV header must be model_id,backbone_id,dataset_id,resolution,top1[,top5]; got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let mut builder = TableBuilder::new(datasets, models)?;
        for (i, row) in reader.records().enumerate() {
            // header is data line 1 of `body`
            let row_no = i + 2 + line_offset;
            let row = row.map_err(|e| Error::Row {
                row: row_no,
                message: e.to_string(),
            })?;
            let parse_f = |s: &str, field: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Row {
                    row: row_no,
                    message: format!("{field}: not a number: '{s}'"),
                })
            };
            let resolution = row[3].parse::<u32>().map_err(|_| Error::Row {
                row: row_no,
                message: format!("resolution: not a positive integer: '{}'", &row[3]),
            })?;
            let top1 = parse_f(&row[4], "top1")?;
            let top5 = match row.get(5) {
                Some(s) if !s.is_empty() => Some(parse_f(s, "top5")?),
                _ => None,
            };
            let rec = RawRecord {
                model_id: row[0].to_string(),
                backbone_id: row[1].to_string(),
                dataset_id: row[2].to_string(),
                resolution,
                top1,
                top5,
            };
            builder.push(rec.into_fraction(unit, row_no)?, row_no)?;
        }
        Ok(builder.finish())
    }

    pub fn parse_json(text: &str, datasets: Vec<DatasetMeta>, models: Vec<ModelMeta>) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Bare(Vec<RawRecord>),
            Wrapped {
                #[serde(default)]
                unit: Option<String>,
                records: Vec<RawRecord>,
            },
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::validation(format!("bad JSON: {e}")))?;
        let (unit, raw) = match doc {
            Doc::Bare(r) => (Unit::Fraction, r),
            Doc::Wrapped { unit, records } => (parse_unit_value(unit.as_deref().unwrap_or("fraction"))?, records),
        };
        let mut builder = TableBuilder::new(datasets, models)?;
        for (i, rec) in raw.into_iter().enumerate() {
            builder.push(rec.into_fraction(unit, i + 1)?, i + 1)?;
        }
        Ok(builder.finish())
    }

    pub fn to_csv(&self) -> String {
        let has_top5 = self.records.iter().any(|r| r.top5.is_some());
        let mut out = String::from("model_id,backbone_id,dataset_id,resolution,top1");
        if has_top5 {
            out.push_str(",top5");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{},{},{},{}", r.model_id, r.backbone_id, r.dataset_id, r.resolution, r.top1);
            if has_top5 {
                out.push(',');
                if let Some(t5) = r.top5 {
                    let _ = write!(out, "{t5}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialize")
    }

    pub fn records(&self) -> &[AccuracyRecord] {
        &self.records
    }

    pub fn datasets(&self) -> &[DatasetMeta] {
        &self.datasets
    }

    pub fn models(&self) -> &[ModelMeta] {
        &self.models
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetMeta> {
        self.datasets.iter().find(|d| d.dataset_id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelMeta> {
        self.models.iter().find(|m| m.model_id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Top-1 accuracy for a cell, or `None` when the cell was never recorded.
    pub fn query(&self, model_id: &str, dataset_id: &str, resolution: u32) -> Option<f64> {
        self.index
            .get(&(model_id.to_string(), dataset_id.to_string(), resolution))
            .map(|&i| self.records[i].top1)
    }

    /// Top-1 at the model's native resolution.
    pub fn query_hr(&self, model_id: &str, dataset_id: &str) -> Option<f64> {
        let hr = self.model(model_id)?.hr_resolution;
        self.query(model_id, dataset_id, hr)
    }

    /// Distinct resolutions present, ascending.
    pub fn resolutions(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.resolution)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn coverage(&self) -> Coverage {
        let models: BTreeSet<&str> = self.records.iter().map(|r| r.model_id.as_str()).collect();
        let datasets: BTreeSet<&str> = self.records.iter().map(|r| r.dataset_id.as_str()).collect();
        let resolutions = self.resolutions();
        let mut missing = Vec::new();
        for m in &models {
            for d in &datasets {
                for &n in &resolutions {
                    if self.query(m, d, n).is_none() {
                        missing.push((m.to_string(), d.to_string(), n));
                    }
                }
            }
        }
        Coverage {
            present: self.index.len(),
            models: models.len(),
            datasets: datasets.len(),
            resolutions,
            missing,
        }
    }
}

pub fn load_datasets_meta(path: impl AsRef<Path>) -> Result<Vec<DatasetMeta>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let metas: Vec<DatasetMeta> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    metas.iter().try_for_each(DatasetMeta::validate)?;
    Ok(metas)
}

pub fn load_models_meta(path: impl AsRef<Path>) -> Result<Vec<ModelMeta>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let metas: Vec<ModelMeta> = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    metas.iter().try_for_each(ModelMeta::validate)?;
    Ok(metas)
}

fn parse_unit_comment(comment: &str) -> Result<Unit> {
    match comment.trim().split_once('=') {
        Some((k, v)) if k.trim() == "unit" => parse_unit_value(v.trim()),
        _ => Err(Error::validation(format!("unrecognized header comment '#{comment}'"))),
    }
}

fn parse_unit_value(v: &str) -> Result<Unit> {
    match v {
        "percent" => Ok(Unit::Percent),
        "fraction" => Ok(Unit::Fraction),
        other => Err(Error::validation(format!("unknown unit '{other}' (percent|fraction)"))),
    }
}

#[derive(Deserialize)]
struct RawRecord {
    model_id: String,
    backbone_id: String,
    dataset_id: String,
    resolution: u32,
    top1: f64,
    #[serde(default)]
    top5: Option<f64>,
}

impl RawRecord {
    fn into_fraction(self, unit: Unit, row: usize) -> Result<AccuracyRecord> {
        let (scale, upper) = match unit {
            Unit::Fraction => (1.0, 1.0),
            Unit::Percent => (100.0, 100.0),
        };
        let check = |v: f64, field: &str| -> Result<f64> {
            if !(0.0..=upper).contains(&v) {
                return Err(Error::Row {
                    row,
                    message: format!("{field}={v} outside [0, {upper}]"),
                });
            }
            Ok(v / scale)
        };
        let top1 = check(self.top1, "top1")?;
        let top5 = self.top5.map(|v| check(v, "top5")).transpose()?;
        Ok(AccuracyRecord {
            model_id: self.model_id,
            backbone_id: self.backbone_id,
            dataset_id: self.dataset_id,
            resolution: self.resolution,
            top1,
            top5,
        })
    }
}

struct TableBuilder {
    table: ResultsTable,
}

impl TableBuilder {
    fn new(datasets: Vec<DatasetMeta>, models: Vec<ModelMeta>) -> Result<Self> {
        datasets.iter().try_for_each(DatasetMeta::validate)?;
        models.iter().try_for_each(ModelMeta::validate)?;
        let mut seen = BTreeSet::new();
        if let Some(d) = datasets.iter().find(|d| !seen.insert(d.dataset_id.as_str())) {
            return Err(Error::validation(format!("dataset {} declared twice", d.dataset_id)));
        }
        let mut seen = BTreeSet::new();
        if let Some(m) = models.iter().find(|m| !seen.insert(m.model_id.as_str())) {
            return Err(Error::validation(format!("model {} declared twice", m.model_id)));
        }
        Ok(TableBuilder {
            table: ResultsTable {
                datasets,
                models,
                ..Default::default()
            },
        })
    }

    fn push(&mut self, rec: AccuracyRecord, row: usize) -> Result<()> {
        let row_err = |message: String| Error::Row { row, message };
        let AccuracyRecord { top1, top5, .. } = rec;
        // re-check in fraction units: covers records built in code
        if !(0.0..=1.0).contains(&top1) {
            return Err(row_err(format!("top1={top1} outside [0, 1]")));
        }
        if let Some(t5) = top5 {
            if !(0.0..=1.0).contains(&t5) || t5 < top1 {
                return Err(row_err(format!("top5={t5} must be in [top1, 1]")));
            }
        }
        if self.table.dataset(&rec.dataset_id).is_none() {
            return Err(row_err(format!("unknown dataset_id '{}'", rec.dataset_id)));
        }
        let Some(model) = self.table.model(&rec.model_id) else {
            return Err(row_err(format!("unknown model_id '{}'", rec.model_id)));
        };
        if !LOW_RESOLUTIONS.contains(&rec.resolution) && rec.resolution != model.hr_resolution {
            return Err(row_err(format!(
                "resolution {} is neither in {:?} nor the HR resolution {} of {}",
                rec.resolution, LOW_RESOLUTIONS, model.hr_resolution, model.model_id
            )));
        }
        let key = (rec.model_id.clone(), rec.dataset_id.clone(), rec.resolution);
        if self.table.index.contains_key(&key) {
            return Err(Error::DuplicateKey {
                model: key.0,
                dataset: key.1,
                resolution: key.2,
                row,
            });
        }
        self.table.index.insert(key, self.table.records.len());
        self.table.records.push(rec);
        Ok(())
    }

    fn finish(self) -> ResultsTable {
        self.table
    }
}
