//! File formats. Every id written or read here is 1-based.
//!
//! * annotations CSV: `item,annotator,label`
//! * features CSV: `item,f1,...,fJ`
//! * splits JSON: `{"train": [...], "dev": [...], "test": [...]}`
//! * model JSON: see [`ModelFile`]
//! * predictions CSV: `item,p1,...,pP,argmax`

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{argmax_label, Annotation, AnnotationMatrix, DatasetSplit, LabelDistribution};
use crate::em::SoftAssignments;
use crate::error::{Error, Result};
use crate::genmodel::{GroundTruthModel, Hyperparams};
use crate::pgm::{GraphModel, ModelParams};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn one_based(v: usize, what: &str, line: usize) -> Result<usize> {
    v.checked_sub(1).ok_or_else(|| Error::invalid(format!("{what} id 0 on line {line}; ids start at 1")))
}

/// Optional explicit sizes; anything left `None` is taken from the largest id.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Shape {
    pub items: Option<usize>,
    pub annotators: Option<usize>,
    pub labels: Option<usize>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TripleRow {
    item: usize,
    annotator: usize,
    label: usize,
}

pub fn read_annotations(path: &Path, shape: Shape) -> Result<AnnotationMatrix> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut entries = Vec::new();
    for (i, row) in rdr.deserialize::<TripleRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        entries.push(Annotation {
            item: one_based(row.item, "item", line)?,
            annotator: one_based(row.annotator, "annotator", line)?,
            label: one_based(row.label, "label", line)?,
        });
    }
    let max = |f: fn(&Annotation) -> usize| entries.iter().map(f).max().map_or(0, |v| v + 1);
    let m = shape.items.unwrap_or_else(|| max(|e| e.item));
    let n = shape.annotators.unwrap_or_else(|| max(|e| e.annotator));
    let p = shape.labels.unwrap_or_else(|| max(|e| e.label));
    AnnotationMatrix::new(m, n, p, entries)
}

pub fn write_annotations(path: &Path, matrix: &AnnotationMatrix) -> Result<()> {
    let rows: Vec<TripleRow> = matrix
        .entries()
        .iter()
        .map(|e| TripleRow { item: e.item + 1, annotator: e.annotator + 1, label: e.label + 1 })
        .collect();
    write_csv_rows(path, &rows)
}

/// Feature rows ordered by item; every item `1..=M` must appear exactly once.
pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let mut fields = rec.iter();
        let id: usize = fields
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::invalid(format!("bad item id on line {line}")))?;
        let id = one_based(id, "item", line)?;
        let values = fields
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad feature value {s:?} on line {line}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature on line {line}")));
        }
        if rows.insert(id, values).is_some() {
            return Err(Error::invalid(format!("item {} listed twice", id + 1)));
        }
    }
    let count = rows.len();
    if let Some((&last, _)) = rows.last_key_value() {
        if last + 1 != count {
            let missing = (0..=last).find(|i| !rows.contains_key(i)).unwrap_or(0);
            return Err(Error::invalid(format!("no features for item {}", missing + 1)));
        }
    }
    Ok(rows.into_values().collect())
}

pub fn write_features(path: &Path, features: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let dim = features.first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("item".to_string()).chain((1..=dim).map(|j| format!("f{j}"))).collect();
    w.write_record(&header)?;
    for (m, row) in features.iter().enumerate() {
        let rec: Vec<String> = std::iter::once((m + 1).to_string()).chain(row.iter().map(|v| v.to_string())).collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    dev: Vec<usize>,
    test: Vec<usize>,
}

pub fn read_splits(path: &Path, num_items: usize, features: Option<Vec<Vec<f64>>>) -> Result<DatasetSplit> {
    let f: SplitFile = read_json(path)?;
    let conv = |v: Vec<usize>| v.into_iter().map(|i| one_based(i, "item", 0)).collect::<Result<Vec<_>>>();
    DatasetSplit::new(num_items, conv(f.train)?, conv(f.dev)?, conv(f.test)?, features)
}

pub fn write_splits(path: &Path, split: &DatasetSplit) -> Result<()> {
    let conv = |v: &[usize]| v.iter().map(|i| i + 1).collect();
    write_json(path, &SplitFile { train: conv(&split.train), dev: conv(&split.dev), test: conv(&split.test) })
}

/// Serialized graph model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub hyperparams: Hyperparams,
    /// K × L × P.
    pub theta: Vec<Vec<Vec<f64>>>,
    pub psi: Vec<f64>,
    pub omega: Vec<f64>,
    /// Item cluster per item, 1-based.
    pub w: Vec<usize>,
    /// Annotator cluster per annotator, 1-based.
    pub z: Vec<usize>,
    /// Original 1-based ids of the items `w` refers to, when the model was
    /// fitted on a subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_soft: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_soft: Option<Vec<Vec<f64>>>,
}

impl ModelFile {
    pub fn from_model(model: &GraphModel) -> Self {
        Self {
            hyperparams: model.hp,
            theta: model.params.theta_nested(),
            psi: model.params.psi().to_vec(),
            omega: model.params.omega().to_vec(),
            w: model.w.iter().map(|c| c + 1).collect(),
            z: model.z.iter().map(|c| c + 1).collect(),
            items: None,
            w_soft: None,
            z_soft: None,
        }
    }

    pub fn from_truth(hp: Hyperparams, truth: &GroundTruthModel) -> Self {
        Self {
            hyperparams: hp,
            theta: truth.theta.iter().map(|r| r.iter().map(|d| d.probs().to_vec()).collect()).collect(),
            psi: truth.psi.probs().to_vec(),
            omega: truth.omega.probs().to_vec(),
            w: truth.w.iter().map(|c| c + 1).collect(),
            z: truth.z.iter().map(|c| c + 1).collect(),
            items: None,
            w_soft: None,
            z_soft: None,
        }
    }

    pub fn with_items(mut self, items: &[usize]) -> Self {
        self.items = Some(items.iter().map(|i| i + 1).collect());
        self
    }

    pub fn with_soft(mut self, soft: &SoftAssignments) -> Self {
        self.w_soft = Some(soft.w_soft.clone());
        self.z_soft = Some(soft.z_soft.clone());
        self
    }

    pub fn params(&self) -> Result<ModelParams> {
        let dist = |v: &Vec<f64>| LabelDistribution::new(v.clone());
        let theta = self.theta.iter().map(|r| r.iter().map(dist).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
        ModelParams::new(theta, dist(&self.psi)?, dist(&self.omega)?)
    }

    pub fn to_model(&self) -> Result<GraphModel> {
        self.hyperparams.validate()?;
        let params = self.params()?;
        if params.num_item_clusters() != self.hyperparams.k || params.num_annotator_clusters() != self.hyperparams.l {
            return Err(Error::invalid("model shape disagrees with K/L"));
        }
        let conv = |v: &[usize], max: usize, what: &str| {
            v.iter()
                .map(|&c| {
                    if c == 0 || c > max {
                        Err(Error::invalid(format!("{what} cluster {c} outside 1..={max}")))
                    } else {
                        Ok(c - 1)
                    }
                })
                .collect::<Result<Vec<_>>>()
        };
        let w = conv(&self.w, self.hyperparams.k, "item")?;
        let z = conv(&self.z, self.hyperparams.l, "annotator")?;
        Ok(GraphModel { hp: self.hyperparams, params, w, z })
    }

    /// 0-based ids of the items `w` refers to.
    pub fn item_ids(&self) -> Result<Vec<usize>> {
        match &self.items {
            None => Ok((0..self.w.len()).collect()),
            Some(ids) => {
                if ids.len() != self.w.len() {
                    return Err(Error::LengthMismatch { expected: self.w.len(), got: ids.len() });
                }
                ids.iter().map(|&i| one_based(i, "item", 0)).collect()
            }
        }
    }
}

/// Predicted distributions keyed by 0-based item.
pub type Predictions = BTreeMap<usize, LabelDistribution>;

pub fn write_predictions(path: &Path, preds: &Predictions) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let p = preds.values().next().map_or(0, LabelDistribution::len);
    let header: Vec<String> = std::iter::once("item".to_string())
        .chain((1..=p).map(|j| format!("p{j}")))
        .chain(std::iter::once("argmax".to_string()))
        .collect();
    w.write_record(&header)?;
    for (m, d) in preds {
        let rec: Vec<String> = std::iter::once((m + 1).to_string())
            .chain(d.probs().iter().map(|v| v.to_string()))
            .chain(std::iter::once((argmax_label(d.probs()) + 1).to_string()))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Predictions::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() < 3 {
            return Err(Error::invalid(format!("line {line}: expected item, probabilities and argmax")));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad value {s:?} on line {line}")));
        let id: usize = rec[0].trim().parse().map_err(|_| Error::invalid(format!("bad item id on line {line}")))?;
        let probs = (1..rec.len() - 1).map(|j| parse(&rec[j])).collect::<Result<Vec<_>>>()?;
        let dist = LabelDistribution::from_weights(probs)?;
        if out.insert(one_based(id, "item", line)?, dist).is_some() {
            return Err(Error::invalid(format!("item {id} predicted twice")));
        }
    }
    Ok(out)
}
