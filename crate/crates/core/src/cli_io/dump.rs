//! CSV logit dumps: `domain,label,quality,logit_0,...,logit_{C-1}`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{BldaError, Result};
use crate::logit_stats::{Domain, LogitBatch, LogitRecord};

use super::files::write_atomic;

const FIXED: [&str; 3] = ["domain", "label", "quality"];

/// 17 significant digits: enough to round-trip any double.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(line: u64, message: impl Into<String>) -> BldaError {
    BldaError::Parse {
        line: line as usize,
        message: message.into(),
    }
}

pub fn read_logit_dump(path: impl AsRef<Path>) -> Result<LogitBatch> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| BldaError::io(path, e))?;
    parse_logit_dump(file)
}

pub fn parse_logit_dump<R: Read>(reader: R) -> Result<LogitBatch> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(r) => r.map_err(|e| csv_err(&e))?,
        None => return Err(parse_err(1, "empty file; expected a header")),
    };
    let line = header.position().map_or(1, |p| p.line());
    if header.len() < FIXED.len() + 1 || header.iter().take(3).ne(FIXED) {
        return Err(parse_err(line, "header must start with domain,label,quality,logit_0"));
    }
    let num_classes = header.len() - FIXED.len();
    for (c, name) in header.iter().skip(FIXED.len()).enumerate() {
        if name != format!("logit_{c}") {
            return Err(parse_err(line, format!("column {} is `{name}`, expected `logit_{c}`", c + 4)));
        }
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| csv_err(&e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields (C={num_classes}), found {}", header.len(), row.len()),
            ));
        }
        let domain: Domain = row[0]
            .parse()
            .map_err(|_| parse_err(line, format!("unknown domain `{}`", &row[0])))?;
        let raw_label: i64 = row[1]
            .parse()
            .map_err(|_| parse_err(line, format!("label `{}` is not an integer", &row[1])))?;
        let label = match raw_label {
            -1 if domain == Domain::Target => None,
            -1 => return Err(parse_err(line, "source rows must be labeled")),
            l if l >= 0 && (l as usize) < num_classes => Some(l as usize),
            l => return Err(parse_err(line, format!("label {l} outside [0, {num_classes})"))),
        };
        let quality: f64 = row[2]
            .parse()
            .map_err(|_| parse_err(line, format!("quality `{}` is not a number", &row[2])))?;
        if !(0.0..=1.0).contains(&quality) {
            return Err(parse_err(line, format!("quality {quality} outside [0, 1]")));
        }
        let logits = row
            .iter()
            .skip(FIXED.len())
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(line, format!("logit `{f}` is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(LogitRecord {
            logits,
            label,
            domain,
            quality,
        });
    }
    LogitBatch::new(num_classes, records)
}

fn csv_err(e: &csv::Error) -> BldaError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, e.to_string())
}

pub fn render_logit_dump<W: Write>(batch: &LogitBatch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..batch.num_classes()).map(|c| format!("logit_{c}")));
    w.write_record(&header).map_err(write_err)?;
    for r in batch.records() {
        let mut row = vec![
            r.domain.as_str().to_string(),
            r.label.map_or("-1".to_string(), |l| l.to_string()),
            format_float(r.quality),
        ];
        row.extend(r.logits.iter().map(|&z| format_float(z)));
        w.write_record(&row).map_err(write_err)?;
    }
    w.flush().map_err(|e| BldaError::io("<csv>", e))
}

fn write_err(e: csv::Error) -> BldaError {
    BldaError::io("<csv>", std::io::Error::other(e.to_string()))
}

pub fn write_logit_dump(path: impl AsRef<Path>, batch: &LogitBatch) -> Result<()> {
    let mut buf = Vec::new();
    render_logit_dump(batch, &mut buf)?;
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<LogitBatch> {
        parse_logit_dump(s.as_bytes())
    }

    #[test]
    fn three_rows_four_classes() {
        let b = parse(
            "domain,label,quality,logit_0,logit_1,logit_2,logit_3\n\
             source,0,1,0.1,0.2,0.3,0.4\n\
             target,-1,0.5,1,2,3,4\n\
             target,3,1,-1,-2,-3,-4\n",
        )
        .unwrap();
        assert_eq!(b.num_classes(), 4);
        assert_eq!(b.len(), 3);
        assert_eq!(b.records()[1].label, None);
        assert_eq!(b.records()[2].logits, vec![-1.0, -2.0, -3.0, -4.0]);
    }

    #[test]
    fn label_out_of_range_names_line() {
        let err = parse("domain,label,quality,logit_0,logit_1,logit_2,logit_3\nsource,0,1,0,0,0,0\nsource,7,1,0,0,0,0\n")
            .unwrap_err();
        match err {
            BldaError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains('7'));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn ragged_rows_and_bad_headers_rejected() {
        let ragged = parse("domain,label,quality,logit_0,logit_1\nsource,0,1,0.5\n").unwrap_err();
        assert!(matches!(ragged, BldaError::Parse { line: 2, .. }));
        assert!(matches!(parse("domain,label,logit_0\n"), Err(BldaError::Parse { line: 1, .. })));
        assert!(matches!(
            parse("domain,label,quality,logit_1\n"),
            Err(BldaError::Parse { line: 1, .. })
        ));
        assert!(matches!(parse(""), Err(BldaError::Parse { line: 1, .. })));
        assert!(parse("domain,label,quality,logit_0\nsource,-1,1,0\n").is_err());
        assert!(parse("domain,label,quality,logit_0\nsource,0,1,nan\n").is_err());
        assert!(parse("domain,label,quality,logit_0\nsource,0,1.5,0\n").is_err());
        assert!(parse("domain,label,quality,logit_0\nvalid,0,1,0\n").is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE, f64::MAX] {
            assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
        }
    }
}
