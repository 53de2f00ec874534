//! CSV and JSON interchange for cohorts, censuses, fits and curves.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::census_fit::CensusFitResult;
use crate::data::{CensusTable, CohortDataset};
use crate::error::{Error, Result};
use crate::numeric::quantile;
use crate::model::{Baseline, ModelCell, ObservationWindow, SubjectPath};
use crate::simulate::integer_horizon;
use crate::variance::ResampleResult;
use crate::zt::ZtFitResult;

const PRE_WINDOW: &str = "pre_window_events";

fn schema(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn fmt_age(a: f64) -> String {
    format!("{a:.12}")
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

fn covariate_header(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("z{j}")).collect()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `subjects.csv` contents. The pre-window column is written when any subject carries it.
pub fn subjects_csv(data: &CohortDataset) -> Result<String> {
    let with_pre = data.subjects.iter().any(|s| s.pre_window_events.is_some() && s.window.c_left > 0.0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject_id".to_string(), "c_left".into(), "c_right".into()];
    header.extend(covariate_header(data.dim));
    if with_pre {
        header.push(PRE_WINDOW.into());
    }
    w.write_record(&header)?;
    for (id, s) in data.ids.iter().zip(&data.subjects) {
        let mut rec = vec![id.to_string(), fmt_age(s.window.c_left), fmt_age(s.window.c_right)];
        rec.extend(s.covariates.iter().map(|&z| fmt_value(z)));
        if with_pre {
            rec.push(s.pre_window_events.map_or_else(String::new, |k| k.to_string()));
        }
        w.write_record(&rec)?;
    }
    finish(w)
}

/// `events.csv` contents.
pub fn events_csv(data: &CohortDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "event_age"])?;
    for (id, s) in data.ids.iter().zip(&data.subjects) {
        for &a in &s.event_ages {
            w.write_record([id.to_string(), fmt_age(a)])?;
        }
    }
    finish(w)
}

/// `census.csv` contents, one row per non-zero `(year, cell, age)`.
pub fn census_csv(census: &CensusTable) -> Result<String> {
    let p = census.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["year".to_string()];
    header.extend(covariate_header(p));
    header.extend(["age".to_string(), "count".into()]);
    w.write_record(&header)?;
    for (yi, year) in census.years.iter().enumerate() {
        for (ci, cell) in census.cells.iter().enumerate() {
            for age in 0..census.ages {
                let n = census.get(yi, ci, age);
                if n == 0 {
                    continue;
                }
                let mut rec = vec![year.to_string()];
                rec.extend(cell.iter().map(|&z| fmt_value(z)));
                rec.extend([age.to_string(), n.to_string()]);
                w.write_record(&rec)?;
            }
        }
    }
    finish(w)
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).from_path(path)?)
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| schema(path, line, format!("{field}: cannot parse '{raw}'")))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Read `subjects.csv` and `events.csv`.
///
/// The dataset is zero-truncated when every subject has an event.
pub fn read_cohort(subjects: &Path, events: &Path, horizon: f64) -> Result<CohortDataset> {
    let mut rdr = reader(subjects)?;
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 3 || names[..3] != ["subject_id", "c_left", "c_right"] {
        return Err(schema(subjects, 1, "header must start with subject_id,c_left,c_right"));
    }
    let pre_col = names.iter().position(|&n| n == PRE_WINDOW);
    if pre_col.is_some_and(|k| k + 1 != names.len()) {
        return Err(schema(subjects, 1, format!("{PRE_WINDOW} must be the last column")));
    }
    let p = names.len() - 3 - usize::from(pre_col.is_some());
    let mut ids = Vec::new();
    let mut paths = Vec::new();
    let mut index = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != names.len() {
            return Err(schema(subjects, line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        let id: u64 = parse(subjects, line, "subject_id", &rec[0])?;
        let c_left: f64 = parse(subjects, line, "c_left", &rec[1])?;
        let c_right: f64 = parse(subjects, line, "c_right", &rec[2])?;
        if !(c_left >= 0.0 && c_left < c_right && c_right <= horizon) {
            return Err(schema(subjects, line, format!("invalid window ({c_left}, {c_right}] for horizon {horizon}")));
        }
        let covariates = (0..p)
            .map(|j| {
                let v: f64 = parse(subjects, line, names[3 + j], &rec[3 + j])?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(schema(subjects, line, format!("{}: non-finite value", names[3 + j])))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let pre_window_events = match pre_col {
            Some(k) if !rec[k].trim().is_empty() => Some(parse(subjects, line, PRE_WINDOW, &rec[k])?),
            _ if c_left <= 0.0 => Some(0),
            _ => None,
        };
        if index.insert(id, paths.len()).is_some() {
            return Err(schema(subjects, line, format!("duplicate subject_id {id}")));
        }
        ids.push(id);
        paths.push(SubjectPath {
            window: ObservationWindow { c_left, c_right },
            covariates,
            event_ages: Vec::new(),
            pre_window_events,
        });
    }

    let mut rdr = reader(events)?;
    let header = rdr.headers()?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["subject_id", "event_age"] {
        return Err(schema(events, 1, "header must be subject_id,event_age"));
    }
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(schema(events, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let id: u64 = parse(events, line, "subject_id", &rec[0])?;
        let age: f64 = parse(events, line, "event_age", &rec[1])?;
        let &k = index
            .get(&id)
            .ok_or_else(|| schema(events, line, format!("unknown subject_id {id}")))?;
        let path = &mut paths[k];
        if !path.window.contains(age) {
            return Err(schema(
                events,
                line,
                format!("event age {age} outside ({}, {}]", path.window.c_left, path.window.c_right),
            ));
        }
        if path.event_ages.contains(&age) {
            return Err(Error::DuplicateEvent { subject: id, age });
        }
        path.event_ages.push(age);
    }
    for s in &mut paths {
        s.event_ages.sort_by(f64::total_cmp);
    }
    let zero_truncated = paths.iter().all(|s| !s.event_ages.is_empty());
    CohortDataset::new(ids, paths, p, horizon, zero_truncated)
}

/// Read `census.csv`; repeated `(year, cell, age)` rows are summed.
pub fn read_census(path: &Path, horizon: f64) -> Result<CensusTable> {
    let ages = integer_horizon(horizon)?;
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 3 || names[0] != "year" || names[names.len() - 2..] != ["age", "count"] {
        return Err(schema(path, 1, "header must be year,z1,...,zp,age,count"));
    }
    let p = names.len() - 3;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != names.len() {
            return Err(schema(path, line, format!("expected {} fields, found {}", names.len(), rec.len())));
        }
        let year: i64 = parse(path, line, "year", &rec[0])?;
        let cell = (0..p)
            .map(|j| parse::<f64>(path, line, names[1 + j], &rec[1 + j]))
            .collect::<Result<Vec<_>>>()?;
        if cell.iter().any(|v| !v.is_finite()) {
            return Err(schema(path, line, "non-finite covariate"));
        }
        let age: usize = parse(path, line, "age", &rec[p + 1])?;
        if age >= ages {
            return Err(schema(path, line, format!("age {age} outside [0, {ages})")));
        }
        let count: u64 = parse(path, line, "count", &rec[p + 2])?;
        rows.push((year, cell, age, count));
    }
    let mut years: Vec<i64> = rows.iter().map(|r| r.0).collect();
    years.sort_unstable();
    years.dedup();
    let mut cells: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    cells.sort_by(|a, b| crate::data::cmp_cells(a, b));
    cells.dedup();
    let mut table = CensusTable::zeros(years, cells, ages);
    for (year, cell, age, count) in rows {
        let yi = table.year_index(year).expect("year collected above");
        let ci = table.cell_index(&cell).expect("cell collected above");
        table.add(yi, ci, age, count);
    }
    Ok(table)
}

/// Serialized fit, tagged by approach.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "approach", rename_all = "kebab-case")]
pub enum FitRecord {
    Zt(ZtFitResult),
    ZtKnown(ZtFitResult),
    Census(CensusFitResult),
    Ideal(CensusFitResult),
}

impl FitRecord {
    pub fn converged(&self) -> bool {
        match self {
            FitRecord::Zt(f) | FitRecord::ZtKnown(f) => f.converged,
            FitRecord::Census(f) | FitRecord::Ideal(f) => f.converged(),
        }
    }

    pub fn model(&self) -> ModelCell {
        match self {
            FitRecord::Zt(f) | FitRecord::ZtKnown(f) => f.model,
            FitRecord::Census(f) | FitRecord::Ideal(f) => f.model,
        }
    }

    /// Fitted baseline per reported stratum.
    pub fn baselines(&self) -> Vec<Baseline> {
        match self {
            FitRecord::Zt(f) | FitRecord::ZtKnown(f) => {
                let k = if f.model.is_unstratified() { 1 } else { 2 };
                f.lambda0[..k].iter().map(|&l| Baseline::Constant(l)).collect()
            }
            FitRecord::Census(f) | FitRecord::Ideal(f) => f.baseline.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn stratum_label(s: usize, strata: usize) -> String {
    if strata == 1 {
        "all".into()
    } else {
        (s + 1).to_string()
    }
}

/// `baseline.csv`: cumulative baseline per stratum on `grid`.
pub fn baseline_csv(baselines: &[Baseline], grid: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratum", "age", "cumulative_baseline"])?;
    for (s, b) in baselines.iter().enumerate() {
        for &a in grid {
            w.write_record([
                stratum_label(s, baselines.len()),
                format!("{a:.1}"),
                fmt_value(b.cumulative(a)),
            ])?;
        }
    }
    finish(w)
}

/// `baseline_curves.csv` with 2.5% and 97.5% percentile bands from the draws,
/// or `NA` bands without draws.
pub fn baseline_curves_csv(
    baselines: &[Baseline],
    grid: &[f64],
    draws: Option<&ResampleResult>,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratum", "age", "estimate", "lo95", "hi95"])?;
    for (s, b) in baselines.iter().enumerate() {
        for (g, &a) in grid.iter().enumerate() {
            let (lo, hi) = match draws {
                Some(r) if !r.draws.is_empty() => {
                    let mut v: Vec<f64> = r.draws.iter().map(|d| d.cumulative[s][g]).collect();
                    v.sort_by(f64::total_cmp);
                    (fmt_value(quantile(&v, 0.025)), fmt_value(quantile(&v, 0.975)))
                }
                _ => ("NA".to_string(), "NA".to_string()),
            };
            w.write_record([
                stratum_label(s, baselines.len()),
                format!("{a:.1}"),
                fmt_value(b.cumulative(a)),
                lo,
                hi,
            ])?;
        }
    }
    finish(w)
}

/// Write every `(path, contents)` pair after all contents have been produced.
///
/// Each file goes to a temporary sibling first and is renamed into place.
pub fn write_all(files: &[(&Path, &str)]) -> Result<()> {
    for (path, contents) in files {
        let tmp = path.with_extension("tmp-write");
        fs::write(&tmp, contents)?;
        fs::rename(&tmp, path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{build_census, extract_cohort, scenario, simulate_population};

    fn small() -> (CohortDataset, CensusTable) {
        let mut sc = scenario(1).unwrap();
        sc.population_size = 3000;
        let pop = simulate_population(&sc).unwrap();
        (extract_cohort(&pop, sc.window), build_census(&pop, sc.window).unwrap())
    }

    #[test]
    fn cohort_round_trip() {
        let (c, _) = small();
        let dir = tempfile::tempdir().unwrap();
        let (sp, ep) = (dir.path().join("s.csv"), dir.path().join("e.csv"));
        fs::write(&sp, subjects_csv(&c).unwrap()).unwrap();
        fs::write(&ep, events_csv(&c).unwrap()).unwrap();
        let back = read_cohort(&sp, &ep, 18.0).unwrap();
        assert_eq!(back.ids, c.ids);
        assert_eq!(back.len(), c.len());
        assert!(back.zero_truncated);
        for (a, b) in back.subjects.iter().zip(&c.subjects) {
            assert_eq!(a.covariates, b.covariates);
            assert_eq!(a.pre_window_events, b.pre_window_events);
            assert!((a.window.c_left - b.window.c_left).abs() < 1e-11);
            for (x, y) in a.event_ages.iter().zip(&b.event_ages) {
                assert!((x - y).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn census_round_trip() {
        let (_, cen) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, census_csv(&cen).unwrap()).unwrap();
        let back = read_census(&p, 18.0).unwrap();
        for (yi, _) in cen.years.iter().enumerate() {
            assert_eq!(back.year_total(yi), cen.year_total(yi));
        }
        for (ci, cell) in cen.cells.iter().enumerate() {
            let bi = back.cell_index(cell).unwrap();
            for a in 0..18 {
                assert_eq!(back.total(bi, a), cen.total(ci, a));
            }
        }
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.csv");
        let ep = dir.path().join("e.csv");
        fs::write(&sp, "subject_id,c_left,c_right,z1\n1,0,5,1\n2,1,x,0\n").unwrap();
        fs::write(&ep, "subject_id,event_age\n").unwrap();
        match read_cohort(&sp, &ep, 18.0) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&sp, "subject_id,c_left,c_right,z1\n1,0,5,1\n").unwrap();
        fs::write(&ep, "subject_id,event_age\n1,2.5\n9,1.0\n").unwrap();
        match read_cohort(&sp, &ep, 18.0) {
            Err(Error::Schema { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("unknown subject_id"));
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&ep, "subject_id,event_age\n1,2.5\n1,2.5\n").unwrap();
        assert!(matches!(
            read_cohort(&sp, &ep, 18.0),
            Err(Error::DuplicateEvent { subject: 1, .. })
        ));
    }

    #[test]
    fn constant_baseline_curve_is_linear() {
        let grid = crate::variance::age_grid(18.0);
        let s = baseline_curves_csv(&[Baseline::Constant(0.05)], &grid, None).unwrap();
        let line = s.lines().nth(21).unwrap();
        assert_eq!(line, "all,2.0,0.1,NA,NA");
    }
}
