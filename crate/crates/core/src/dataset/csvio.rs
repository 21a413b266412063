use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{DatasetError, Design, Role, Study, SubjectPanel};

/// Column names for the long CSV format `role,id,time,y,C,c,W1,...,Wp`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub design: Design,
    pub role: String,
    pub id: String,
    pub time: String,
    pub outcome: String,
    pub surrogate: String,
    pub true_exposure: String,
    /// Covariate columns. `None` picks every header starting with `W`, in
    /// header order.
    pub covariates: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(design: Design) -> Self {
        Self {
            design,
            role: "role".into(),
            id: "id".into(),
            time: "time".into(),
            outcome: "y".into(),
            surrogate: "C".into(),
            true_exposure: "c".into(),
            covariates: None,
        }
    }
}

struct Columns {
    role: usize,
    id: usize,
    time: usize,
    outcome: Option<usize>,
    surrogate: usize,
    true_exposure: Option<usize>,
    covariates: Vec<(String, usize)>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<Self, DatasetError> {
        let find = |name: &str| headers.iter().position(|h| h == name);
        let require = |name: &str| find(name).ok_or_else(|| DatasetError::Schema(name.to_string()));
        let covariates = match &schema.covariates {
            Some(names) => names
                .iter()
                .map(|n| require(n).map(|i| (n.clone(), i)))
                .collect::<Result<Vec<_>, _>>()?,
            None => headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with('W'))
                .map(|(i, h)| (h.to_string(), i))
                .collect(),
        };
        Ok(Self {
            role: require(&schema.role)?,
            id: require(&schema.id)?,
            time: require(&schema.time)?,
            outcome: find(&schema.outcome),
            surrogate: require(&schema.surrogate)?,
            true_exposure: find(&schema.true_exposure),
            covariates,
        })
    }
}

#[derive(Debug, Clone)]
struct Row {
    time: f64,
    y: Option<f64>,
    surrogate: Option<f64>,
    truth: Option<f64>,
    covariates: Vec<Option<f64>>,
}

pub fn load_long_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Study, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_long_csv(file, schema)
}

/// Parses the long format. Rows are grouped by `(role, id)` in order of first
/// appearance and sorted by time. Empty cells are missing values.
pub fn read_long_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Study, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DatasetError::Parse {
            row: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let cols = Columns::resolve(&headers, schema)?;

    let mut order: Vec<(Role, String)> = Vec::new();
    let mut groups: HashMap<(Role, String), Vec<Row>> = HashMap::new();
    for (idx, record) in rdr.records().enumerate() {
        // header is line 1
        let line = idx + 2;
        let record = record.map_err(|e| DatasetError::Parse {
            row: line,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |col: usize, message: String| DatasetError::Parse {
            row: line,
            column: headers.get(col).unwrap_or("").to_string(),
            message,
        };
        let optional = |col: usize| -> Result<Option<f64>, DatasetError> {
            let raw = cell(col);
            if raw.is_empty() {
                return Ok(None);
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(col, format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(col, format!("`{raw}` is not finite")));
            }
            Ok(Some(v))
        };

        let role = match cell(cols.role).to_ascii_lowercase().as_str() {
            "main" => Role::Main,
            "validation" => Role::Validation,
            other => {
                return Err(parse_err(
                    cols.role,
                    format!("role `{other}` is neither `main` nor `validation`"),
                ))
            }
        };
        let id = cell(cols.id).to_string();
        if id.is_empty() {
            return Err(parse_err(cols.id, "empty subject id".into()));
        }
        let time =
            optional(cols.time)?.ok_or_else(|| parse_err(cols.time, "missing time".into()))?;
        let row = Row {
            time,
            y: cols.outcome.map(optional).transpose()?.flatten(),
            surrogate: optional(cols.surrogate)?,
            truth: cols.true_exposure.map(optional).transpose()?.flatten(),
            covariates: cols
                .covariates
                .iter()
                .map(|(_, i)| optional(*i))
                .collect::<Result<_, _>>()?,
        };
        let key = (role, id);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }

    let p = cols.covariates.len();
    let mut main = Vec::new();
    let mut validation = Vec::new();
    for key in order {
        let rows = groups.remove(&key).unwrap_or_default();
        let (role, id) = key;
        if let Some(panel) = build_panel(&id, rows, p)? {
            match role {
                Role::Main => main.push(panel),
                Role::Validation => validation.push(panel),
            }
        } else {
            log::warn!("subject `{id}` has no usable time points and is excluded");
        }
    }
    Ok(Study {
        design: schema.design,
        main,
        validation,
        covariate_names: cols.covariates.into_iter().map(|(n, _)| n).collect(),
    })
}

fn build_panel(
    id: &str,
    mut rows: Vec<Row>,
    p: usize,
) -> Result<Option<SubjectPanel>, DatasetError> {
    rows.sort_by(|a, b| a.time.total_cmp(&b.time));
    if let Some(w) = rows.windows(2).find(|w| w[0].time == w[1].time) {
        return Err(DatasetError::DuplicateTime {
            id: id.to_string(),
            time: w[0].time,
        });
    }

    // Complete-case on the surrogate and covariates. A row that carries the
    // true exposure but lacks the surrogate is kept (surrogate = NaN) so the
    // alignment problem surfaces in validation instead of vanishing.
    rows.retain(|r| {
        let covariates_ok = r.covariates.iter().all(Option::is_some);
        let keep = (r.surrogate.is_some() || r.truth.is_some()) && covariates_ok;
        if !keep {
            log::warn!(
                "subject `{id}`: dropping time {} (missing surrogate or covariate)",
                r.time
            );
        }
        keep
    });
    let has_outcome = rows.iter().any(|r| r.y.is_some());
    if has_outcome {
        rows.retain(|r| {
            if r.y.is_none() {
                log::warn!("subject `{id}`: dropping time {} (missing outcome)", r.time);
            }
            r.y.is_some()
        });
    }
    if rows.is_empty() {
        return Ok(None);
    }

    let m = rows.len();
    let covariates = DMatrix::from_fn(m, p, |i, k| rows[i].covariates[k].unwrap_or(f64::NAN));
    Ok(Some(SubjectPanel {
        id: id.to_string(),
        times: rows.iter().map(|r| r.time).collect(),
        outcome: has_outcome.then(|| rows.iter().map(|r| r.y.unwrap_or(f64::NAN)).collect()),
        surrogate: rows
            .iter()
            .map(|r| r.surrogate.unwrap_or(f64::NAN))
            .collect(),
        true_exposure: rows.iter().map(|r| r.truth).collect(),
        covariates,
    }))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite())
        .map(|x| x.to_string())
        .unwrap_or_default()
}

/// Writes the study back in the long format. Floats use Rust's shortest
/// round-trip representation, so reading the output reproduces the study.
pub fn write_long_csv<W: Write>(study: &Study, writer: W) -> Result<(), DatasetError> {
    let io_err = |e: csv::Error| DatasetError::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["role", "id", "time", "y", "C", "c"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(study.covariate_names.iter().cloned());
    wtr.write_record(&header).map_err(io_err)?;
    let panels = study
        .main
        .iter()
        .map(|p| ("main", p))
        .chain(study.validation.iter().map(|p| ("validation", p)));
    for (role, panel) in panels {
        for j in 0..panel.len() {
            let mut rec = vec![
                role.to_string(),
                panel.id.clone(),
                panel.times[j].to_string(),
                fmt_opt(panel.outcome.as_ref().map(|y| y[j])),
                fmt_opt(Some(panel.surrogate[j])),
                fmt_opt(panel.true_exposure[j]),
            ];
            rec.extend((0..panel.n_covariates()).map(|k| fmt_opt(Some(panel.covariates[(j, k)]))));
            wtr.write_record(&rec).map_err(io_err)?;
        }
    }
    wtr.flush().map_err(|e| DatasetError::Io {
        path: "<writer>".into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, design: Design) -> Result<Study, DatasetError> {
        read_long_csv(text.as_bytes(), &CsvSchema::new(design))
    }

    #[test]
    fn two_subjects_full_columns() {
        let text = "role,id,time,y,C,c,W1\n\
                    main,a,0,0,1.0,,0.5\n\
                    main,a,2,1,1.5,,0.1\n\
                    main,a,1,0,1.2,,0.3\n\
                    validation,b,0,1,0.9,1.1,0.2\n\
                    validation,b,1,0,1.0,1.3,0.2\n\
                    validation,b,2,0,1.1,1.2,0.4\n";
        let s = load(text, Design::MsIvs).unwrap();
        assert_eq!((s.n_main(), s.n_validation()), (1, 1));
        assert_eq!(s.main[0].times, vec![0.0, 1.0, 2.0]);
        assert_eq!(s.main[0].surrogate, vec![1.0, 1.2, 1.5]);
        assert_eq!(s.main[0].outcome, Some(vec![0.0, 0.0, 1.0]));
        assert_eq!(s.validation[0].n_true(), 3);
        assert_eq!(s.covariate_names, vec!["W1".to_string()]);
    }

    #[test]
    fn single_true_measurement_mask() {
        let text = "role,id,time,C,c\n\
                    validation,v,0,1,\n\
                    validation,v,1,1,\n\
                    validation,v,2,1,0.7\n\
                    validation,v,3,1,\n\
                    validation,v,4,1,\n";
        let s = load(text, Design::MsEvs).unwrap();
        assert_eq!(
            s.validation[0].availability_mask(),
            vec![false, false, true, false, false]
        );
        assert!(s.validation[0].outcome.is_none());
    }

    #[test]
    fn duplicate_time_rejected() {
        let text = "role,id,time,y,C\nmain,a,1,0,1\nmain,a,1,1,2\n";
        assert!(matches!(
            load(text, Design::MsEvs),
            Err(DatasetError::DuplicateTime { time, .. }) if time == 1.0
        ));
    }

    #[test]
    fn missing_required_column() {
        let text = "role,id,y,C\nmain,a,0,1\n";
        assert!(matches!(load(text, Design::MsEvs), Err(DatasetError::Schema(c)) if c == "time"));
    }

    #[test]
    fn parse_error_reports_location() {
        let text = "role,id,time,C\nmain,a,0,1\nmain,a,1,abc\n";
        match load(text, Design::MsEvs) {
            Err(DatasetError::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "C");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn incomplete_points_dropped() {
        let text = "role,id,time,y,C,W1\n\
                    main,a,0,0,1,0\n\
                    main,a,1,0,,0\n\
                    main,a,2,1,1,\n\
                    main,b,0,0,,1\n";
        let s = load(text, Design::MsEvs).unwrap();
        assert_eq!(s.n_main(), 1);
        assert_eq!(s.main[0].times, vec![0.0]);
    }
}
