//! Feature matrix CSV: header is the schema names followed by `label`.

use std::io::{Read, Write};
use std::sync::Arc;

use super::{FeatureError, FeatureSchema, FeatureVector};
use crate::corpus::PairLabel;

pub type LabeledRow = (FeatureVector, PairLabel);

pub fn write_feature_csv<W: Write>(
    schema: &FeatureSchema,
    rows: &[LabeledRow],
    out: W,
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = schema.names().iter().map(|n| n.as_str()).collect();
    header.push("label");
    w.write_record(&header)?;
    for (vector, label) in rows {
        if vector.schema().as_ref() != schema {
            return Err(FeatureError::SchemaMismatch {
                expected: schema.describe(),
                found: vector.schema().describe(),
            });
        }
        let mut record: Vec<String> = vector.values().iter().map(|v| v.to_string()).collect();
        record.push((label.as_f64() as u8).to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_feature_csv<R: Read>(
    input: R,
) -> Result<(Arc<FeatureSchema>, Vec<LabeledRow>), FeatureError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let n = headers.len();
    if n < 2 || &headers[n - 1] != "label" {
        return Err(FeatureError::Matrix("last column must be `label`".into()));
    }
    let names: Vec<&str> = headers.iter().take(n - 1).collect();
    let schema = Arc::new(FeatureSchema::parse(&names)?);
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| FeatureError::Matrix(format!("row {}: `{s}`: {e}", i + 1)))
        };
        let values = record
            .iter()
            .take(n - 1)
            .map(parse)
            .collect::<Result<Vec<_>, _>>()?;
        let label = match &record[n - 1] {
            "1" => PairLabel::Duplicate,
            "0" => PairLabel::NonDuplicate,
            other => {
                return Err(FeatureError::Matrix(format!(
                    "row {}: bad label `{other}`",
                    i + 1
                )))
            }
        };
        rows.push((FeatureVector::new(Arc::clone(&schema), values)?, label));
    }
    Ok((schema, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip(values in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 0..20)) {
            let schema = Arc::new(FeatureSchema::parse(&["sim_title_title", "term_overlap", "sim_image_text"]).unwrap());
            let rows: Vec<LabeledRow> = values
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let label = if i % 2 == 0 { PairLabel::Duplicate } else { PairLabel::NonDuplicate };
                    (FeatureVector::new(Arc::clone(&schema), v).unwrap(), label)
                })
                .collect();
            let mut buf = Vec::new();
            write_feature_csv(&schema, &rows, &mut buf).unwrap();
            let (back_schema, back) = read_feature_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back_schema.as_ref(), schema.as_ref());
            prop_assert_eq!(back, rows);
        }
    }

    #[test]
    fn header_layout() {
        let schema = FeatureSchema::parse(&["sim_code_code"]).unwrap();
        let mut buf = Vec::new();
        write_feature_csv(&schema, &[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sim_code_code,label\n");
    }
}
