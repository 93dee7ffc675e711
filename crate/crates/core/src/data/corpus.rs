//! Corpus ingestion: one JSON object per line with fields
//! `id`, `question`, `answers`, `passages`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use super::tokenize::{detokenize, tokenize};
use crate::error::{Error, Result};

/// One question with its gold answer strings and tokenized passages.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub question: Vec<String>,
    pub answers: Vec<String>,
    pub passages: Vec<Vec<String>>,
}

/// Ingestion counters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestReport {
    pub questions: usize,
    pub mean_passages: f64,
}

pub const DEFAULT_MAX_PASSAGE_LEN: usize = 60;

fn field<'a>(obj: &'a Value, name: &str, path: &str, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::Schema {
        path: path.to_string(),
        line,
        field: name.to_string(),
    })
}

fn string_field(obj: &Value, name: &str, path: &str, line: usize) -> Result<String> {
    field(obj, name, path, line)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Schema {
            path: path.to_string(),
            line,
            field: name.to_string(),
        })
}

fn string_list_field(obj: &Value, name: &str, path: &str, line: usize) -> Result<Vec<String>> {
    let arr = field(obj, name, path, line)?.as_array().ok_or_else(|| Error::Schema {
        path: path.to_string(),
        line,
        field: name.to_string(),
    })?;
    arr.iter()
        .map(|v| {
            v.as_str().map(str::to_string).ok_or_else(|| Error::Schema {
                path: path.to_string(),
                line,
                field: name.to_string(),
            })
        })
        .collect()
}

/// Parse one corpus line. Passages are truncated to `max_passage_len` tokens;
/// passages that tokenize to nothing are dropped.
pub fn parse_line(raw: &str, path: &str, line: usize, max_passage_len: usize) -> Result<Example> {
    let obj: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
        path: path.to_string(),
        line,
        msg: e.to_string(),
    })?;
    let id = string_field(&obj, "id", path, line)?;
    let question = tokenize(&string_field(&obj, "question", path, line)?);
    if question.is_empty() {
        return Err(Error::Schema {
            path: path.to_string(),
            line,
            field: "question".to_string(),
        });
    }
    let answers = string_list_field(&obj, "answers", path, line)?;
    if answers.is_empty() {
        return Err(Error::Schema {
            path: path.to_string(),
            line,
            field: "answers".to_string(),
        });
    }
    let passages: Vec<Vec<String>> = string_list_field(&obj, "passages", path, line)?
        .iter()
        .map(|p| {
            let mut toks = tokenize(p);
            toks.truncate(max_passage_len);
            toks
        })
        .filter(|toks| !toks.is_empty())
        .collect();
    if passages.is_empty() {
        return Err(Error::Schema {
            path: path.to_string(),
            line,
            field: "passages".to_string(),
        });
    }
    Ok(Example {
        id,
        question,
        answers,
        passages,
    })
}

/// Load a JSONL corpus.
pub fn load_corpus(path: &Path, max_passage_len: usize) -> Result<(Vec<Example>, IngestReport)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let shown = path.display().to_string();
    let mut examples = Vec::new();
    let mut passages_total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, &shown, i + 1, max_passage_len)?;
        passages_total += ex.passages.len();
        examples.push(ex);
    }
    let n = examples.len();
    let report = IngestReport {
        questions: n,
        mean_passages: if n == 0 { 0.0 } else { passages_total as f64 / n as f64 },
    };
    Ok((examples, report))
}

/// Write examples in the same JSONL format the loader reads.
pub fn save_corpus(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = example_to_json(ex);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn example_to_json(ex: &Example) -> String {
    serde_json::json!({
        "id": ex.id,
        "question": detokenize(&ex.question),
        "answers": ex.answers,
        "passages": ex.passages.iter().map(|p| detokenize(p)).collect::<Vec<_>>(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn well_formed_file_loads_with_counts() {
        let f = write_lines(&[
            r#"{"id":"a","question":"Who?","answers":["x"],"passages":["one two","three"]}"#,
            r#"{"id":"b","question":"What is it?","answers":["y"],"passages":["four five six"]}"#,
            r#"{"id":"c","question":"Where?","answers":["z"],"passages":["seven"]}"#,
        ]);
        let (ex, report) = load_corpus(f.path(), 60).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(report.questions, 3);
        assert_eq!(ex[0].question, vec!["who", "?"]);
        assert_eq!(ex[0].passages[0], vec!["one", "two"]);
        assert_eq!(ex[1].passages[0].len(), 3);
    }

    #[test]
    fn missing_answers_is_schema_error_with_line() {
        let f = write_lines(&[
            r#"{"id":"a","question":"Who?","answers":["x"],"passages":["p"]}"#,
            r#"{"id":"b","question":"Who?","passages":["p"]}"#,
        ]);
        match load_corpus(f.path(), 60) {
            Err(Error::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "answers");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error_with_line() {
        let f = write_lines(&[r#"{"id":"a""#]);
        match load_corpus(f.path(), 60) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mean_passage_count_reported() {
        let passages: Vec<String> = (0..100).map(|i| format!("\"tok{i}\"")).collect();
        let line = format!(
            r#"{{"id":"a","question":"q","answers":["x"],"passages":[{}]}}"#,
            passages.join(",")
        );
        let f = write_lines(&[&line]);
        let (_, report) = load_corpus(f.path(), 60).unwrap();
        assert_eq!(report.mean_passages, 100.0);
    }

    #[test]
    fn truncation_caps_passage_length() {
        let long: String = (0..80).map(|i| format!("w{i} ")).collect();
        let line = format!(
            r#"{{"id":"a","question":"q","answers":["x"],"passages":["{long}"]}}"#
        );
        let f = write_lines(&[&line]);
        let (ex, _) = load_corpus(f.path(), 60).unwrap();
        assert_eq!(ex[0].passages[0].len(), 60);
    }

    #[test]
    fn round_trip_preserves_token_sequences() {
        let f = write_lines(&[
            r#"{"id":"a","question":"Rum, lime?","answers":["Cuba Libre"],"passages":["The Cuba Libre, a classic."]}"#,
        ]);
        let (ex, _) = load_corpus(f.path(), 60).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_corpus(out.path(), &ex).unwrap();
        let (ex2, _) = load_corpus(out.path(), 60).unwrap();
        assert_eq!(ex, ex2);
    }
}
