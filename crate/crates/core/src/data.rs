//! Datasets: synthetic symptom-checker generation, CSV ingestion and splits.
//!
//! The synthetic generator is an analog of a disease/symptom table, not a
//! reproduction of any real one: each label gets a handful of
//! high-probability symptoms and every other symptom fires at a low
//! background rate, independently given the label.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::oracle::{sample_from_model, DiscreteJointModel, QueryTable};
use crate::query::{AnswerDomain, AnswerVector, QuerySet, QuerySpec};
use crate::rng::{derive_seed, stream_rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub answers: AnswerVector,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    queries: QuerySet,
    labels: Vec<String>,
    rows: Vec<Row>,
}

impl Dataset {
    pub fn new(queries: QuerySet, labels: Vec<String>, rows: Vec<Row>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.label >= labels.len() {
                return Err(Error::LabelOutOfRange {
                    label: r.label,
                    classes: labels.len(),
                });
            }
            r.answers.validate(&queries).map_err(|e| match e {
                Error::ShapeMismatch { .. } => Error::ShapeMismatch {
                    op: "dataset_row",
                    lhs: vec![i, r.answers.len()],
                    rhs: vec![queries.len()],
                },
                other => other,
            })?;
        }
        Ok(Dataset { queries, labels, rows })
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// Same schema, different rows.
    pub fn with_rows(&self, rows: Vec<Row>) -> Dataset {
        Dataset {
            queries: self.queries.clone(),
            labels: self.labels.clone(),
            rows,
        }
    }

    /// Writes `label,q_<name>,...` with canonical raw tokens.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain(self.queries.queries().iter().map(|q| format!("q_{}", q.name)))
            .collect();
        w.write_record(&header).map_err(csv_io)?;
        for r in &self.rows {
            let mut record = Vec::with_capacity(self.queries.len() + 1);
            record.push(self.labels[r.label].clone());
            for (spec, &v) in self.queries.queries().iter().zip(r.answers.as_slice()) {
                record.push(spec.domain.raw_token(v).expect("validated answers").to_string());
            }
            w.write_record(&record).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// How CSV cells are decoded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Domain applied to every query column. Ignored when `queries` is set.
    #[serde(default)]
    pub domain: Option<AnswerDomain>,
    /// Full query set; names must match the header after stripping `q_`.
    #[serde(default)]
    pub queries: Option<QuerySet>,
    /// Fixed label list. Without it the distinct labels found are sorted.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn uniform(domain: AnswerDomain) -> Self {
        CsvSchema {
            domain: Some(domain),
            ..Default::default()
        }
    }

    pub fn for_dataset(queries: &QuerySet, labels: &[String]) -> Self {
        CsvSchema {
            domain: None,
            queries: Some(queries.clone()),
            labels: Some(labels.to_vec()),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_csv(text.as_bytes(), schema)
}

/// Parses a dataset; line numbers in errors are 1-based and count the header.
pub fn parse_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
    let parse_err = |e: csv::Error| {
        let (line, message) = match e.position() {
            Some(p) => (p.line() as usize, e.to_string()),
            None => (0, e.to_string()),
        };
        Error::ParseError { line, column: 0, message }
    };
    let header = reader.headers().map_err(parse_err)?.clone();
    if header.get(0).map(str::trim) != Some("label") {
        return Err(Error::ParseError {
            line: 1,
            column: 1,
            message: "first column must be \"label\"".into(),
        });
    }
    let mut names = Vec::new();
    for (c, h) in header.iter().enumerate().skip(1) {
        let name = h.trim().strip_prefix("q_").ok_or_else(|| Error::ParseError {
            line: 1,
            column: c + 1,
            message: format!("query column {h:?} must start with \"q_\""),
        })?;
        names.push(name.to_string());
    }
    let queries = match (&schema.queries, schema.domain) {
        (Some(qs), _) => {
            let expected: Vec<&str> = qs.queries().iter().map(|q| q.name.as_str()).collect();
            if expected != names.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::QuerySetMismatch("CSV header does not match the query set".into()));
            }
            qs.clone()
        }
        (None, Some(domain)) => QuerySet::uniform(names, domain).map_err(|e| Error::ParseError {
            line: 1,
            column: 0,
            message: e.to_string(),
        })?,
        (None, None) => return Err(Error::InvalidConfig("CSV schema needs a domain or a query set".into())),
    };

    let mut labels: Vec<String> = schema.labels.clone().unwrap_or_default();
    let fixed_labels = schema.labels.is_some();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(parse_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let label_name = record.get(0).unwrap_or("").trim();
        let label = match labels.iter().position(|l| l == label_name) {
            Some(i) => i,
            None if !fixed_labels && !label_name.is_empty() => {
                labels.push(label_name.to_string());
                labels.len() - 1
            }
            None => {
                return Err(Error::ParseError {
                    line,
                    column: 1,
                    message: format!("unknown label {label_name:?}"),
                })
            }
        };
        let mut answers = Vec::with_capacity(queries.len());
        for (spec, (c, cell)) in queries.queries().iter().zip(record.iter().enumerate().skip(1)) {
            let v = spec.domain.encode(cell).map_err(|_| Error::DomainViolation {
                line,
                column: c + 1,
                value: cell.to_string(),
                domain: spec.domain.to_string(),
            })?;
            answers.push(v);
        }
        rows.push(Row {
            answers: AnswerVector::new(answers),
            label,
        });
    }
    if !fixed_labels {
        let mut sorted = labels.clone();
        sorted.sort();
        let remap: Vec<usize> = labels.iter().map(|l| sorted.binary_search(l).expect("present")).collect();
        for r in rows.iter_mut() {
            r.label = remap[r.label];
        }
        labels = sorted;
    }
    Dataset::new(queries, labels, rows)
}

/// Seeded shuffle, then the first `fraction` of rows go to the first part.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let cut = (fraction * dataset.len() as f64).round() as usize;
    let take = |ids: &[usize]| dataset.with_rows(ids.iter().map(|&i| dataset.rows[i].clone()).collect());
    Ok((take(&idx[..cut]), take(&idx[cut..])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub num_queries: usize,
    /// Inclusive range for the number of high-probability symptoms per label.
    pub symptoms_per_label: (usize, usize),
    pub high_prob: (f64, f64),
    pub background_prob: (f64, f64),
    /// Fraction of queries eligible to be a label's high-probability symptom;
    /// the rest are background-only.
    pub distinguishing_fraction: f64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Ten labels, thirty binary symptoms, 8000/2000 rows.
    pub fn symcat_mini(seed: u64) -> Self {
        SyntheticSpec {
            num_labels: 10,
            num_queries: 30,
            symptoms_per_label: (4, 8),
            high_prob: (0.6, 0.9),
            background_prob: (0.02, 0.1),
            distinguishing_fraction: 1.0,
            train_rows: 8000,
            test_rows: 2000,
            seed,
        }
    }

    pub fn profile(name: &str, seed: u64) -> Result<Self> {
        match name {
            "symcat-mini" => Ok(SyntheticSpec::symcat_mini(seed)),
            other => Err(Error::InvalidSpec(format!("unknown profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        let in_unit = |(a, b): (f64, f64)| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b;
        if self.num_labels < 2 {
            return bad("at least two labels are required");
        }
        if self.num_queries == 0 {
            return bad("at least one query is required");
        }
        if !in_unit(self.high_prob) || !in_unit(self.background_prob) {
            return bad("probability ranges must be ordered and lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.distinguishing_fraction) {
            return bad("distinguishing fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.symptoms_per_label;
        if lo > hi || hi > self.distinguishing_queries() {
            return bad("symptoms per label exceeds the distinguishing queries");
        }
        if self.train_rows == 0 || self.test_rows == 0 {
            return bad("train and test row counts must be positive");
        }
        Ok(())
    }

    fn distinguishing_queries(&self) -> usize {
        ((self.distinguishing_fraction * self.num_queries as f64).round() as usize).min(self.num_queries)
    }

    /// The conditional-independence model behind the generated data.
    pub fn build_model(&self) -> Result<DiscreteJointModel> {
        self.validate()?;
        let mut rng = stream_rng(derive_seed(self.seed, 0x6d6f64656c), 0);
        let distinguishing = self.distinguishing_queries();
        let c = self.num_labels;
        let mut positive = vec![vec![0.0; c]; self.num_queries];
        let sample = |rng: &mut crate::rng::Rng, (a, b): (f64, f64)| if a == b { a } else { rng.gen_range(a..=b) };
        for row in positive.iter_mut() {
            for p in row.iter_mut() {
                *p = sample(&mut rng, self.background_prob);
            }
        }
        let pool: Vec<usize> = (0..distinguishing).collect();
        for y in 0..c {
            let (lo, hi) = self.symptoms_per_label;
            let count = rng.gen_range(lo..=hi);
            for &q in pool.choose_multiple(&mut rng, count) {
                positive[q][y] = sample(&mut rng, self.high_prob);
            }
        }
        let width = (self.num_queries - 1).to_string().len();
        let queries = positive
            .into_iter()
            .enumerate()
            .map(|(q, probs)| QueryTable {
                name: format!("symptom_{q:0width$}"),
                domain: AnswerDomain::BinaryPM1,
                cond: probs.into_iter().map(|p| vec![1.0 - p, p]).collect(),
            })
            .collect();
        let lw = (c - 1).to_string().len();
        let labels = (0..c).map(|y| format!("disease_{y:0lw$}")).collect();
        DiscreteJointModel::new(vec![1.0 / c as f64; c], queries, Some(labels))
    }
}

/// Builds the model from `spec` and samples disjoint-seeded train and test sets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, DiscreteJointModel)> {
    let model = spec.build_model()?;
    let train = sample_from_model(&model, spec.train_rows, derive_seed(spec.seed, 1))?;
    let test = sample_from_model(&model, spec.test_rows, derive_seed(spec.seed, 2))?;
    Ok((train, test, model))
}

/// Task whose label is the answer of query 0; the other queries are fair
/// coins independent of the label.
pub fn planted_model(num_queries: usize) -> Result<DiscreteJointModel> {
    if num_queries == 0 {
        return Err(Error::InvalidSpec("at least one query is required".into()));
    }
    let mut tables = vec![QueryTable {
        name: "planted".into(),
        domain: AnswerDomain::BinaryPM1,
        cond: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    }];
    for i in 1..num_queries {
        tables.push(QueryTable {
            name: format!("noise_{i}"),
            domain: AnswerDomain::BinaryPM1,
            cond: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        });
    }
    DiscreteJointModel::new(vec![0.5, 0.5], tables, Some(vec!["negative".into(), "positive".into()]))
}

/// Query set of `names` under one domain, for callers building datasets by hand.
pub fn query_set(names: &[&str], domain: AnswerDomain) -> Result<QuerySet> {
    QuerySet::new(
        names
            .iter()
            .enumerate()
            .map(|(id, n)| QuerySpec {
                id,
                name: n.to_string(),
                domain,
            })
            .collect(),
    )
}
