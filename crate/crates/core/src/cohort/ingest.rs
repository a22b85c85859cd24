use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::schema::{SchemaConfig, SUBJECT_ID};
use super::{CohortTable, FeatureNames, SnpGenotype, SubjectRecord, Visit};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortPaths {
    pub imaging: PathBuf,
    pub genetics: PathBuf,
    pub clinical: PathBuf,
    pub mmse: PathBuf,
}

impl CohortPaths {
    /// Standard file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            imaging: dir.join("imaging.csv"),
            genetics: dir.join("genetics.csv"),
            clinical: dir.join("clinical.csv"),
            mmse: dir.join("mmse.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.imaging, &self.genetics, &self.clinical, &self.mmse]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSubject {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub loaded: usize,
    pub dropped: Vec<DroppedSubject>,
}

type Cell = Option<f64>;

struct Table {
    order: Vec<String>,
    rows: HashMap<String, Vec<Cell>>,
    columns: Vec<String>,
}

fn parse_cell(raw: &str) -> Cell {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads one modality file, reordering columns to `expected`.
fn read_table(path: &Path, expected: &[String]) -> Result<Table> {
    if !path.exists() {
        return Err(Error::Data(format!("missing input file {}", path.display())));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.first().map(String::as_str) != Some(SUBJECT_ID) {
        return Err(Error::Data(format!(
            "{}: first column must be `{SUBJECT_ID}`",
            path.display()
        )));
    }
    let position: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let missing: Vec<&str> = expected
        .iter()
        .filter(|c| !position.contains_key(c.as_str()))
        .map(|c| c.as_str())
        .collect();
    let expected_set: std::collections::HashSet<&str> =
        expected.iter().map(|s| s.as_str()).collect();
    let unexpected: Vec<&str> = headers[1..]
        .iter()
        .filter(|h| !expected_set.contains(h.as_str()))
        .map(|h| h.as_str())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::Data(format!(
            "{}: column mismatch vs schema; missing [{}]; unexpected [{}]",
            path.display(),
            missing.join(", "),
            unexpected.join(", ")
        )));
    }
    let idx: Vec<usize> = expected.iter().map(|c| position[c.as_str()]).collect();

    let mut order = Vec::new();
    let mut rows = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("{}: empty subject_id", path.display())));
        }
        let values = idx
            .iter()
            .map(|&i| rec.get(i).and_then(parse_cell))
            .collect();
        if rows.insert(id.clone(), values).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate subject_id {id:?}",
                path.display()
            )));
        }
        order.push(id);
    }
    Ok(Table {
        order,
        rows,
        columns: expected.to_vec(),
    })
}

fn first_missing(values: &[Cell], columns: &[String]) -> Option<String> {
    values
        .iter()
        .zip(columns)
        .find(|(v, _)| v.is_none())
        .map(|(_, c)| c.clone())
}

fn build_genetics(values: &[f64], chromosomes: &[u8]) -> std::result::Result<Vec<SnpGenotype>, String> {
    values
        .chunks(4)
        .zip(chromosomes)
        .map(|(v, &chromosome)| {
            let dosage = v[0];
            if dosage.fract() != 0.0 || !(0.0..=2.0).contains(&dosage) {
                return Err("dosage out of range".to_string());
            }
            if v[1] <= 0.0 {
                return Err("odds ratio not positive".to_string());
            }
            if !(0.0..=1.0).contains(&v[2]) {
                return Err("rare allele frequency out of range".to_string());
            }
            if v[3] != 0.0 && v[3] != 1.0 {
                return Err("intergenic flag not binary".to_string());
            }
            Ok(SnpGenotype {
                dosage: dosage as u8,
                odds_ratio: v[1],
                rare_allele_freq: v[2],
                intergenic: v[3] == 1.0,
                chromosome,
            })
        })
        .collect()
}

/// Loads the four modality files and keeps subjects complete in all of them.
pub fn load_cohort(paths: &CohortPaths, schema: &SchemaConfig) -> Result<(CohortTable, IngestionReport)> {
    schema.validate()?;
    let chromosomes = schema.chromosomes()?;
    let imaging = read_table(&paths.imaging, &schema.imaging_columns())?;
    let genetics = read_table(&paths.genetics, &schema.genetics_columns())?;
    let clinical = read_table(&paths.clinical, &schema.clinical_columns())?;
    let mmse = read_table(&paths.mmse, &schema.mmse_columns())?;

    let mut all_ids: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in [&imaging, &genetics, &clinical, &mmse] {
        for id in &t.order {
            if seen.insert(id.clone()) {
                all_ids.push(id.clone());
            }
        }
    }

    let n_rois = schema.rois.len();
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for id in all_ids {
        let outcome = (|| -> std::result::Result<SubjectRecord, String> {
            let tables = [
                ("imaging", &imaging),
                ("genetics", &genetics),
                ("clinical", &clinical),
                ("mmse", &mmse),
            ];
            let mut rows = Vec::with_capacity(4);
            for (name, t) in tables {
                match t.rows.get(&id) {
                    Some(r) => rows.push((name, r, &t.columns)),
                    None => return Err(format!("missing {name}")),
                }
            }
            for (name, r, cols) in &rows {
                if let Some(c) = first_missing(r, cols) {
                    return Err(format!("missing {name} value {c}"));
                }
            }
            let dense = |r: &Vec<Cell>| r.iter().map(|v| v.unwrap()).collect::<Vec<f64>>();
            let img = dense(rows[0].1);
            let gen = build_genetics(&dense(rows[1].1), &chromosomes)?;
            let clin = dense(rows[2].1);
            let scores = dense(rows[3].1);
            let mut mmse = BTreeMap::new();
            for (v, s) in Visit::ALL.iter().zip(scores) {
                if s.fract() != 0.0 || !(0.0..=30.0).contains(&s) {
                    return Err("mmse out of range".to_string());
                }
                mmse.insert(*v, s as u8);
            }
            Ok(SubjectRecord {
                subject_id: id.clone(),
                imaging: Array2::from_shape_vec((n_rois, 4), img).expect("schema shape"),
                genetics: gen,
                clinical: Array1::from(clin),
                mmse,
            })
        })();
        match outcome {
            Ok(r) => records.push(r),
            Err(reason) => dropped.push(DroppedSubject {
                subject_id: id,
                reason,
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no subject survived ingestion ({} dropped)",
            dropped.len()
        )));
    }
    for d in &dropped {
        log::warn!("dropped subject {}: {}", d.subject_id, d.reason);
    }
    let report = IngestionReport {
        loaded: records.len(),
        dropped,
    };
    Ok((
        CohortTable {
            records,
            labels: None,
            feature_names: FeatureNames::from_schema(schema),
        },
        report,
    ))
}

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a cohort in the four-file CSV layout `load_cohort` reads.
pub fn write_cohort_csv(cohort: &CohortTable, schema: &SchemaConfig, paths: &CohortPaths) -> Result<()> {
    for p in paths.all() {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let with_id = |cols: Vec<String>| {
        let mut h = vec![SUBJECT_ID.to_string()];
        h.extend(cols);
        h
    };
    let fmt = |v: f64| format!("{v}");

    let imaging = cohort
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.subject_id.clone()];
            row.extend(r.imaging.iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    write_rows(&paths.imaging, with_id(schema.imaging_columns()), imaging)?;

    let genetics = cohort
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.subject_id.clone()];
            for g in &r.genetics {
                row.push(g.dosage.to_string());
                row.push(fmt(g.odds_ratio));
                row.push(fmt(g.rare_allele_freq));
                row.push(u8::from(g.intergenic).to_string());
            }
            row
        })
        .collect();
    write_rows(&paths.genetics, with_id(schema.genetics_columns()), genetics)?;

    let clinical = cohort
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.subject_id.clone()];
            row.extend(r.clinical.iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    write_rows(&paths.clinical, with_id(schema.clinical_columns()), clinical)?;

    let mmse = cohort
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.subject_id.clone()];
            row.extend(
                Visit::ALL
                    .iter()
                    .map(|v| r.mmse.get(v).map(|s| s.to_string()).unwrap_or_default()),
            );
            row
        })
        .collect();
    write_rows(&paths.mmse, with_id(schema.mmse_columns()), mmse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> SchemaConfig {
        SchemaConfig::small(2, 2, 2)
    }

    fn write(dir: &Path, name: &str, body: &str) {
        let mut f = File::create(dir.join(name)).unwrap();
        f.write_all(body.as_bytes()).unwrap();
    }

    fn fixture(dir: &Path, mmse_ids: &[&str], dosage_override: Option<(&str, u8)>) -> CohortPaths {
        let s = schema();
        let ids = ["A", "B", "C"];
        let line = |cols: Vec<String>| format!("subject_id,{}\n", cols.join(","));
        let mut img = line(s.imaging_columns());
        let mut gen = line(s.genetics_columns());
        let mut cli = line(s.clinical_columns());
        let mut mm = line(s.mmse_columns());
        for (i, id) in ids.iter().enumerate() {
            let vals: Vec<String> = (0..8).map(|j| format!("{}", i * 8 + j)).collect();
            img += &format!("{id},{}\n", vals.join(","));
            let dose = match dosage_override {
                Some((who, d)) if who == *id => d,
                _ => 1,
            };
            gen += &format!("{id},{dose},1.2,0.3,0,2,0.9,0.1,1\n");
            cli += &format!("{id},{}.5,{}\n", i, i + 10);
            if mmse_ids.contains(id) {
                mm += &format!("{id},28,27,27,26\n");
            }
        }
        write(dir, "imaging.csv", &img);
        write(dir, "genetics.csv", &gen);
        write(dir, "clinical.csv", &cli);
        write(dir, "mmse.csv", &mm);
        CohortPaths::in_dir(dir)
    }

    #[test]
    fn intersection_semantics_with_report() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), &["A", "B"], None);
        let (cohort, report) = load_cohort(&paths, &schema()).unwrap();
        assert_eq!(cohort.ids(), vec!["A", "B"]);
        assert_eq!(
            report.dropped,
            vec![DroppedSubject {
                subject_id: "C".into(),
                reason: "missing mmse".into()
            }]
        );
        let a = &cohort.records[0];
        assert_eq!(a.imaging.dim(), (2, 4));
        assert_eq!(a.imaging[[1, 0]], 4.0);
        assert_eq!(a.genetics[1].dosage, 2);
        assert_eq!(a.genetics[1].chromosome, 2);
        assert!(a.genetics[1].intergenic);
        assert_eq!(a.mmse[&Visit::M24], 26);
    }

    #[test]
    fn out_of_range_dosage_drops_subject() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), &["A", "B", "C"], Some(("B", 3)));
        let (cohort, report) = load_cohort(&paths, &schema()).unwrap();
        assert_eq!(cohort.ids(), vec!["A", "C"]);
        assert_eq!(report.dropped[0].reason, "dosage out of range");
    }

    #[test]
    fn missing_file_and_column_mismatch_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), &["A"], None);
        std::fs::remove_file(&paths.clinical).unwrap();
        assert!(matches!(load_cohort(&paths, &schema()), Err(Error::Data(_))));

        let paths = fixture(dir.path(), &["A"], None);
        write(dir.path(), "clinical.csv", "subject_id,CLIN0,BOGUS\nA,1,2\n");
        let err = load_cohort(&paths, &schema()).unwrap_err().to_string();
        assert!(err.contains("CLIN1") && err.contains("BOGUS"), "{err}");
    }

    #[test]
    fn zero_survivors_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path(), &[], None);
        assert!(load_cohort(&paths, &schema()).is_err());
    }

    #[test]
    fn reference_shapes_and_idempotent_roundtrip() {
        let s = SchemaConfig::default();
        let chromosomes = s.chromosomes().unwrap();
        let records = (0..3)
            .map(|i| SubjectRecord {
                subject_id: format!("S{i}"),
                imaging: Array2::from_shape_fn((72, 4), |(r, c)| (r * 4 + c) as f64 * 0.1 + i as f64),
                genetics: chromosomes
                    .iter()
                    .map(|&c| SnpGenotype {
                        dosage: (i % 3) as u8,
                        odds_ratio: 1.1,
                        rare_allele_freq: 0.25,
                        intergenic: c % 2 == 0,
                        chromosome: c,
                    })
                    .collect(),
                clinical: Array1::from_shape_fn(7, |j| j as f64 / 3.0),
                mmse: Visit::ALL.iter().map(|v| (*v, 27)).collect(),
            })
            .collect();
        let cohort = CohortTable {
            records,
            labels: None,
            feature_names: FeatureNames::from_schema(&s),
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = CohortPaths::in_dir(dir.path());
        write_cohort_csv(&cohort, &s, &paths).unwrap();
        let (a, _) = load_cohort(&paths, &s).unwrap();
        let (b, _) = load_cohort(&paths, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, cohort);
        let r = &a.records[0];
        assert_eq!(r.imaging.dim(), (72, 4));
        assert_eq!(r.genetics.len(), 70);
        assert_eq!(r.clinical.len(), 7);
    }
}
