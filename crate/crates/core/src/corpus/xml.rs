//! Streaming readers for the Stack Exchange `Posts.xml` and `PostLinks.xml`
//! dump files.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::{CorpusError, PostId, Question, QuestionStatus};
use crate::par::ExecPolicy;

/// Duplicate links: post id → master post id.
pub type LinkMap = BTreeMap<PostId, PostId>;

const DUPLICATE_LINK_TYPE: &str = "3";
const QUESTION_POST_TYPE: &str = "1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub rows_seen: usize,
    pub non_question_rows: usize,
    /// Skipped rows, keyed by the first missing or unparsable attribute.
    pub skipped: BTreeMap<String, usize>,
}

impl ParseDiagnostics {
    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }

    fn skip(&mut self, attr: &str) {
        *self.skipped.entry(attr.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedPosts {
    pub questions: Vec<Question>,
    pub diagnostics: ParseDiagnostics,
}

struct RawQuestion {
    id: PostId,
    title: String,
    body: String,
    tags: String,
    closed: bool,
}

fn xml_error(reader_pos: u64, err: impl std::fmt::Display) -> CorpusError {
    CorpusError::Xml {
        offset: reader_pos,
        message: err.to_string(),
    }
}

/// Read every `<row>` element, handing its attributes to `visit`.
fn for_each_row<R, F>(input: R, mut visit: F) -> Result<(), CorpusError>
where
    R: BufRead,
    F: FnMut(HashMap<String, String>),
{
    let mut reader = Reader::from_reader(input);
    let mut buf = Vec::new();
    let mut depth = 0usize;
    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| xml_error(reader.error_position(), e))?;
        match event {
            Event::Start(ref e) => {
                if e.name().as_ref() == b"row" {
                    visit(row_attributes(e, reader.buffer_position())?);
                }
                depth += 1;
            }
            Event::End(_) => depth = depth.saturating_sub(1),
            Event::Empty(ref e) if e.name().as_ref() == b"row" => {
                visit(row_attributes(e, reader.buffer_position())?);
            }
            Event::Eof => {
                if depth != 0 {
                    return Err(xml_error(
                        reader.buffer_position(),
                        "unexpected end of input",
                    ));
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }
    Ok(())
}

fn row_attributes(e: &BytesStart<'_>, pos: u64) -> Result<HashMap<String, String>, CorpusError> {
    let mut attrs = HashMap::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| xml_error(pos, err))?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let value = attr
            .unescape_value()
            .map_err(|err| xml_error(pos, err))?
            .into_owned();
        attrs.insert(key, value);
    }
    Ok(attrs)
}

/// Parse a `Posts.xml` stream. Only `PostTypeId="1"` rows are emitted; rows
/// missing `Id`, `Title` or `Body` are skipped and tallied. Questions with a
/// `ClosedDate` start out as closed non-duplicates; duplicate and master status
/// comes from [`super::apply_links`].
pub fn parse_posts<R: BufRead>(input: R, exec: &ExecPolicy) -> Result<ParsedPosts, CorpusError> {
    let mut diagnostics = ParseDiagnostics::default();
    let mut raw = Vec::new();
    for_each_row(input, |attrs| {
        diagnostics.rows_seen += 1;
        match attrs.get("PostTypeId").map(String::as_str) {
            None => {
                diagnostics.skip("PostTypeId");
                return;
            }
            Some(QUESTION_POST_TYPE) => {}
            Some(_) => {
                diagnostics.non_question_rows += 1;
                return;
            }
        }
        let Some(id) = attrs
            .get("Id")
            .and_then(|v| v.trim().parse::<PostId>().ok())
        else {
            diagnostics.skip("Id");
            return;
        };
        let (Some(title), Some(body)) = (attrs.get("Title"), attrs.get("Body")) else {
            diagnostics.skip(if attrs.contains_key("Title") {
                "Body"
            } else {
                "Title"
            });
            return;
        };
        raw.push(RawQuestion {
            id,
            title: title.clone(),
            body: body.clone(),
            tags: attrs.get("Tags").cloned().unwrap_or_default(),
            closed: attrs
                .get("ClosedDate")
                .is_some_and(|d| !d.trim().is_empty()),
        });
    })?;

    // Body decomposition is per-row and independent.
    let questions = exec.map(&raw, |r| {
        let status = if r.closed {
            QuestionStatus::ClosedNonDuplicate
        } else {
            QuestionStatus::Open
        };
        Question::new(
            r.id,
            r.title.clone(),
            r.body.clone(),
            split_tags(&r.tags),
            status,
            None,
        )
    });
    Ok(ParsedPosts {
        questions,
        diagnostics,
    })
}

/// Split a dump `Tags` attribute. Handles both `<a><b>` and `|a|b|` forms.
pub fn split_tags(raw: &str) -> Vec<String> {
    raw.split(['<', '>', '|'])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Parse a `PostLinks.xml` stream, keeping duplicate links only. When a post
/// has several duplicate links the last one wins.
pub fn parse_postlinks<R: BufRead>(input: R) -> Result<LinkMap, CorpusError> {
    let mut links = LinkMap::new();
    for_each_row(input, |attrs| {
        if attrs.get("LinkTypeId").map(|s| s.trim()) != Some(DUPLICATE_LINK_TYPE) {
            return;
        }
        let post = attrs
            .get("PostId")
            .and_then(|v| v.trim().parse::<PostId>().ok());
        let related = attrs
            .get("RelatedPostId")
            .and_then(|v| v.trim().parse::<PostId>().ok());
        if let (Some(post), Some(related)) = (post, related) {
            if post != related {
                links.insert(post, related);
            }
        }
    })?;
    Ok(links)
}
