//! JSONL corpus format: one question object per line.
//!
//! ```text
//! {"id":1,"title":"...","body_html":"...","tags":["a"],"status":"master","duplicate_of":null}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{ensure_unique_ids, CorpusError, PostId, Question, QuestionStatus};

pub fn load_jsonl_corpus(path: impl AsRef<Path>) -> Result<Vec<Question>, CorpusError> {
    let file = File::open(path.as_ref())?;
    read_jsonl_corpus(BufReader::new(file))
}

pub fn read_jsonl_corpus<R: BufRead>(input: R) -> Result<Vec<Question>, CorpusError> {
    let mut questions = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: line_no,
            field: "<line>".into(),
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(schema(line_no, "<line>", "expected a JSON object"));
        };
        questions.push(question_from_object(&obj, line_no)?);
    }
    ensure_unique_ids(&questions)?;
    Ok(questions)
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn required<'a>(
    obj: &'a Map<String, Value>,
    line: usize,
    field: &str,
) -> Result<&'a Value, CorpusError> {
    obj.get(field).ok_or_else(|| schema(line, field, "missing"))
}

fn as_id(value: &Value, line: usize, field: &str) -> Result<PostId, CorpusError> {
    value
        .as_u64()
        .filter(|&v| v > 0)
        .ok_or_else(|| schema(line, field, "expected a positive integer"))
}

fn as_str<'a>(value: &'a Value, line: usize, field: &str) -> Result<&'a str, CorpusError> {
    value
        .as_str()
        .ok_or_else(|| schema(line, field, "expected a string"))
}

fn question_from_object(obj: &Map<String, Value>, line: usize) -> Result<Question, CorpusError> {
    let id = as_id(required(obj, line, "id")?, line, "id")?;
    let title = as_str(required(obj, line, "title")?, line, "title")?;
    let body_html = as_str(required(obj, line, "body_html")?, line, "body_html")?;
    let tags = required(obj, line, "tags")?
        .as_array()
        .ok_or_else(|| schema(line, "tags", "expected an array of strings"))?
        .iter()
        .map(|t| as_str(t, line, "tags"))
        .collect::<Result<Vec<_>, _>>()?;
    let status: QuestionStatus = as_str(required(obj, line, "status")?, line, "status")?
        .parse()
        .map_err(|m: String| schema(line, "status", m))?;
    let duplicate_of = match obj.get("duplicate_of") {
        None | Some(Value::Null) => None,
        Some(v) => Some(as_id(v, line, "duplicate_of")?),
    };
    match (status, duplicate_of) {
        (QuestionStatus::ClosedDuplicate, None) => {
            return Err(schema(
                line,
                "duplicate_of",
                "closed_duplicate requires a master id",
            ))
        }
        (s, Some(_)) if s != QuestionStatus::ClosedDuplicate => {
            return Err(schema(
                line,
                "duplicate_of",
                "only closed_duplicate questions may link a master",
            ))
        }
        (_, Some(m)) if m == id => return Err(schema(line, "duplicate_of", "self-link")),
        _ => {}
    }
    Ok(Question::new(
        id,
        title,
        body_html,
        tags,
        status,
        duplicate_of,
    ))
}

/// Write questions in the JSONL corpus schema. Derived fields are not written;
/// they are recomputed from `body_html` on load.
pub fn write_jsonl_corpus<W: Write>(questions: &[Question], mut out: W) -> std::io::Result<()> {
    for q in questions {
        let line = json!({
            "id": q.id,
            "title": q.title,
            "body_html": q.body_html,
            "tags": q.tags,
            "status": q.status.as_str(),
            "duplicate_of": q.duplicate_of,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
