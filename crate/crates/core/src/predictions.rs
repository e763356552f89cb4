//! Per-model top-1 predictions over the shared unlabeled corpus.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, TaxonomyGraph};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub String);

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelId {
    fn from(s: &str) -> Self {
        ModelId(s.to_string())
    }
}

/// Opaque image identifier. Cheap to clone; ordered by the raw string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(Arc<str>);

impl ImageId {
    pub fn new(s: &str) -> Self {
        ImageId(Arc::from(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId::new(s)
    }
}

/// Softmax confidence in millionths, so threshold tests are exact for any
/// decimal with up to six fractional digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Confidence(u32);

impl Confidence {
    pub const SCALE: u32 = 1_000_000;
    pub const ONE: Confidence = Confidence(Self::SCALE);

    pub fn from_f64(x: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Predictions(format!("confidence {x} outside [0, 1]")));
        }
        Ok(Confidence((x * Self::SCALE as f64).round() as u32))
    }

    pub fn from_micros(micros: u32) -> Self {
        Confidence(micros.min(Self::SCALE))
    }

    pub fn micros(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }
}

impl std::str::FromStr for Confidence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let x: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Predictions(format!("bad confidence `{s}`")))?;
        Confidence::from_f64(x)
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / Self::SCALE;
        let frac = self.0 % Self::SCALE;
        if frac == 0 {
            return write!(f, "{whole}");
        }
        let digits = format!("{frac:06}");
        write!(f, "{whole}.{}", digits.trim_end_matches('0'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub label: LabelId,
    pub confidence: Confidence,
}

/// One row of a prediction file, still keyed by external ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub model: ModelId,
    pub image: ImageId,
    pub label: LabelId,
    pub confidence: Confidence,
}

/// Dense `model × image` table with full coverage. Images are kept sorted by
/// id, so image indices follow the tie-break order used by selection.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    models: Vec<ModelId>,
    images: Vec<ImageId>,
    image_index: HashMap<ImageId, u32>,
    columns: Vec<Vec<Prediction>>,
}

impl PredictionTable {
    /// Builds the table from flat records. `models` fixes the competition
    /// order; every model must have exactly one record per corpus image.
    pub fn from_records(models: Vec<ModelId>, records: impl IntoIterator<Item = PredictionRecord>) -> Result<Self> {
        let model_pos: HashMap<&ModelId, usize> = models.iter().enumerate().map(|(i, m)| (m, i)).collect();
        if model_pos.len() != models.len() {
            return Err(Error::Predictions("duplicate model id".into()));
        }
        let mut per_model: Vec<HashMap<ImageId, Prediction>> = vec![HashMap::new(); models.len()];
        for r in records {
            let &i = model_pos
                .get(&r.model)
                .ok_or_else(|| Error::UnknownModel(r.model.0.clone()))?;
            let p = Prediction {
                label: r.label,
                confidence: r.confidence,
            };
            if per_model[i].insert(r.image.clone(), p).is_some() {
                return Err(Error::Predictions(format!(
                    "duplicate record for model `{}` image `{}`",
                    r.model, r.image
                )));
            }
        }
        let mut images: Vec<ImageId> = per_model.iter().flat_map(|m| m.keys().cloned()).collect();
        images.sort();
        images.dedup();
        let mut columns = Vec::with_capacity(models.len());
        for (model, preds) in models.iter().zip(&per_model) {
            columns.push(Self::column(model, &images, preds)?);
        }
        let image_index = images
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Ok(Self {
            models,
            images,
            image_index,
            columns,
        })
    }

    fn column(model: &ModelId, images: &[ImageId], preds: &HashMap<ImageId, Prediction>) -> Result<Vec<Prediction>> {
        images
            .iter()
            .map(|img| {
                preds
                    .get(img)
                    .copied()
                    .ok_or_else(|| Error::Predictions(format!("model `{model}` has no prediction for image `{img}`")))
            })
            .collect()
    }

    /// Reads one prediction file per model, in competition order.
    pub fn load(sources: &[PathBuf], graph: &TaxonomyGraph) -> Result<Self> {
        let mut models = Vec::new();
        let mut records = Vec::new();
        for path in sources {
            let (model, recs) = read_prediction_file(path, graph)?;
            models.push(model);
            records.extend(recs);
        }
        Self::from_records(models, records)
    }

    /// Adds a model's predictions, which must cover exactly this corpus.
    pub fn with_model(&self, model: ModelId, records: Vec<PredictionRecord>) -> Result<Self> {
        if self.models.contains(&model) {
            return Err(Error::Predictions(format!("model `{model}` already present")));
        }
        let mut preds = HashMap::with_capacity(records.len());
        for r in records {
            let Some(_) = self.image_index.get(&r.image) else {
                return Err(Error::Predictions(format!(
                    "coverage mismatch: model `{model}` predicts image `{}` outside the corpus",
                    r.image
                )));
            };
            let p = Prediction {
                label: r.label,
                confidence: r.confidence,
            };
            if preds.insert(r.image.clone(), p).is_some() {
                return Err(Error::Predictions(format!(
                    "duplicate record for model `{model}` image `{}`",
                    r.image
                )));
            }
        }
        let column = Self::column(&model, &self.images, &preds)?;
        let mut out = self.clone();
        out.models.push(model);
        out.columns.push(column);
        Ok(out)
    }

    /// The table restricted to the first `m` models.
    pub fn prefix(&self, m: usize) -> Self {
        Self {
            models: self.models[..m].to_vec(),
            columns: self.columns[..m].to_vec(),
            ..self.clone()
        }
    }

    pub fn models(&self) -> &[ModelId] {
        &self.models
    }

    pub fn model_index(&self, model: &ModelId) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::UnknownModel(model.0.clone()))
    }

    pub fn images(&self) -> &[ImageId] {
        &self.images
    }

    pub fn image_index(&self, image: &ImageId) -> Result<usize> {
        self.image_index
            .get(image)
            .map(|&i| i as usize)
            .ok_or_else(|| Error::UnknownImage(image.to_string()))
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Predictions of model `m` indexed by image position.
    pub fn column_of(&self, m: usize) -> &[Prediction] {
        &self.columns[m]
    }

    pub fn prediction_of(&self, model: &ModelId, image: &ImageId) -> Result<Prediction> {
        let m = self.model_index(model)?;
        let i = self.image_index(image)?;
        Ok(self.columns[m][i])
    }

    pub fn records(&self) -> impl Iterator<Item = PredictionRecord> + '_ {
        self.models.iter().enumerate().flat_map(move |(m, model)| {
            self.images
                .iter()
                .zip(&self.columns[m])
                .map(move |(img, p)| PredictionRecord {
                    model: model.clone(),
                    image: img.clone(),
                    label: p.label,
                    confidence: p.confidence,
                })
        })
    }
}

/// Parses a prediction file: a `model <id>` header followed by
/// `image_id,label_id,confidence` rows.
pub fn read_prediction_file(path: &Path, graph: &TaxonomyGraph) -> Result<(ModelId, Vec<PredictionRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path, graph)
}

pub fn parse_predictions(text: &str, origin: &Path, graph: &TaxonomyGraph) -> Result<(ModelId, Vec<PredictionRecord>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "empty prediction file"))?;
    let model = match header.trim().split_once(char::is_whitespace) {
        Some(("model", id)) if !id.trim().is_empty() && !id.trim().contains(char::is_whitespace) => {
            ModelId(id.trim().to_string())
        }
        _ => return Err(Error::parse(origin, hline + 1, "expected `model <model_id>` header")),
    };
    let mut records = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line == "image_id,label_id,confidence" {
            continue;
        }
        let err = |msg: String| Error::parse(origin, lineno + 1, msg);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [image, label, conf] = fields[..] else {
            return Err(err(format!("expected `image_id,label_id,confidence`, got `{line}`")));
        };
        let label = graph.label(label).map_err(|e| err(e.to_string()))?;
        let confidence: Confidence = conf.parse().map_err(|e: Error| err(e.to_string()))?;
        records.push(PredictionRecord {
            model: model.clone(),
            image: ImageId::new(image),
            label,
            confidence,
        });
    }
    Ok((model, records))
}

pub fn format_prediction_file(
    model: &ModelId,
    records: impl IntoIterator<Item = (ImageId, LabelId, Confidence)>,
    graph: &TaxonomyGraph,
) -> String {
    let mut out = format!("model {model}\n");
    for (img, label, conf) in records {
        out.push_str(&format!("{img},{},{conf}\n", graph.label_key(label)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> TaxonomyGraph {
        TaxonomyGraph::parse(
            "N root r root\nN cat c cat\nN dog d dog\nE root cat\nE root dog\nL cat\nL dog\n",
            Path::new("t"),
        )
        .unwrap()
    }

    fn load(files: &[&str], g: &TaxonomyGraph) -> Result<PredictionTable> {
        let mut models = Vec::new();
        let mut records = Vec::new();
        for (i, f) in files.iter().enumerate() {
            let (m, r) = parse_predictions(f, Path::new(&format!("f{i}")), g)?;
            models.push(m);
            records.extend(r);
        }
        PredictionTable::from_records(models, records)
    }

    #[test]
    fn two_models_three_images() {
        let g = graph();
        let t = load(
            &[
                "model a\nx1,cat,0.9\nx2,dog,0.8\nx3,cat,1\n",
                "model b\nimage_id,label_id,confidence\nx3,dog,0.5\nx1,cat,0.95\nx2,cat,0.0\n",
            ],
            &g,
        )
        .unwrap();
        assert_eq!(t.num_models(), 2);
        assert_eq!(t.num_images(), 3);
        let p = t.prediction_of(&"b".into(), &"x3".into()).unwrap();
        assert_eq!(p.label, g.label("dog").unwrap());
        assert_eq!(p.confidence, Confidence::from_f64(0.5).unwrap());
        for r in t.records() {
            let p = t.prediction_of(&r.model, &r.image).unwrap();
            assert_eq!((p.label, p.confidence), (r.label, r.confidence));
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let g = graph();
        let a = load(&["model a\nx1,cat,0.9\nx2,dog,0.8\n"], &g).unwrap();
        let b = load(&["model a\nx2,dog,0.8\nx1,cat,0.9\n"], &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_errors() {
        let g = graph();
        let e = |files: &[&str]| load(files, &g).unwrap_err().to_string();
        assert!(e(&["model a\nx1,cat,1.3\n"]).contains("outside [0, 1]"));
        assert!(e(&["model a\nx1,cow,0.3\n"]).contains("unknown label `cow`"));
        assert!(e(&["model a\nx1,cat,0.3\nx1,dog,0.3\n"]).contains("duplicate record"));
        let missing = e(&["model a\nx1,cat,0.9\nx2,cat,0.9\n", "model b\nx1,cat,0.9\n"]);
        assert!(
            missing.contains("model `b`") && missing.contains("image `x2`"),
            "{missing}"
        );
        assert!(e(&["x1,cat,0.9\n"]).contains("header"));
        assert!(e(&["model a\nx1,cat\n"]).contains("expected"));
    }

    #[test]
    fn unknown_lookups() {
        let g = graph();
        let t = load(&["model a\nx1,cat,0.9\n"], &g).unwrap();
        assert!(matches!(
            t.prediction_of(&"a".into(), &"zz".into()),
            Err(Error::UnknownImage(_))
        ));
        assert!(matches!(
            t.prediction_of(&"q".into(), &"x1".into()),
            Err(Error::UnknownModel(_))
        ));
    }

    #[test]
    fn confidence_fixed_point() {
        let c: Confidence = "0.8".parse().unwrap();
        assert_eq!(c.micros(), 800_000);
        assert_eq!(c.to_string(), "0.8");
        assert_eq!(Confidence::ONE.to_string(), "1");
        assert_eq!("0.0000004".parse::<Confidence>().unwrap().to_string(), "0");
        assert!("-0.1".parse::<Confidence>().is_err());
        assert!("abc".parse::<Confidence>().is_err());
    }

    #[test]
    fn with_model_checks_coverage() {
        let g = graph();
        let t = load(&["model a\nx1,cat,0.9\nx2,cat,0.9\n"], &g).unwrap();
        let rec = |img: &str| PredictionRecord {
            model: "b".into(),
            image: img.into(),
            label: g.label("dog").unwrap(),
            confidence: Confidence::ONE,
        };
        assert!(t.with_model("b".into(), vec![rec("x1")]).is_err());
        assert!(t.with_model("b".into(), vec![rec("x1"), rec("x9")]).is_err());
        let t2 = t.with_model("b".into(), vec![rec("x1"), rec("x2")]).unwrap();
        assert_eq!(t2.num_models(), 2);
        assert_eq!(t2.prefix(1), t);
    }
}
