//! JSON-lines corpus files, one record per line. Reals are written with 17
//! significant digits, which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use hyperalign_core::synth::{validate_corpus, CorpusRecord};
use hyperalign_core::Tensor;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    id: String,
    logits: Vec<f64>,
    labels: Vec<u8>,
    tokens: Vec<u8>,
    prompts_local: Vec<Vec<f64>>,
    #[serde(default)]
    prompt_global_ref: Option<String>,
}

fn push_reals(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x:.16e}").expect("write to String");
    }
    out.push(']');
}

fn push_ints(out: &mut String, xs: &[u8]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x}").expect("write to String");
    }
    out.push(']');
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// One record as a single JSON line (without the newline).
pub fn record_line(r: &CorpusRecord) -> String {
    let mut out = String::with_capacity(64 + 24 * (r.logits.len() + r.prompts_local.len()));
    out.push_str("{\"id\":");
    out.push_str(&json_string(&r.id));
    out.push_str(",\"logits\":");
    push_reals(&mut out, &r.logits);
    out.push_str(",\"labels\":");
    push_ints(&mut out, &r.labels);
    out.push_str(",\"tokens\":");
    push_ints(&mut out, &r.tokens);
    out.push_str(",\"prompts_local\":[");
    for i in 0..r.prompts_local.rows() {
        if i > 0 {
            out.push(',');
        }
        push_reals(&mut out, r.prompts_local.row(i));
    }
    out.push_str("],\"prompt_global_ref\":");
    match &r.prompt_global_ref {
        Some(id) => out.push_str(&json_string(id)),
        None => out.push_str("null"),
    }
    out.push('}');
    out
}

pub fn to_jsonl(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_line(r));
        out.push('\n');
    }
    out
}

fn parse_record(line: &str) -> std::result::Result<CorpusRecord, String> {
    let doc: RecordDoc = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let prompts_local = Tensor::from_rows(&doc.prompts_local).map_err(|e| e.to_string())?;
    let record = CorpusRecord {
        id: doc.id,
        logits: doc.logits,
        labels: doc.labels,
        tokens: doc.tokens,
        prompts_local,
        prompt_global_ref: doc.prompt_global_ref,
    };
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

/// Parses and validates a whole corpus. Blank lines are skipped; errors
/// carry the 1-based line number.
pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(line).map_err(|m| Error::format(path, format!("line {}: {m}", i + 1)))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::format(path, "corpus is empty"));
    }
    validate_corpus(&records).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(records)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    parse_jsonl(&fsio::read_string(path)?, path)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    fsio::write_atomic(path, to_jsonl(records).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperalign_core::synth::{synth_generate, SynthConfig};

    fn sample() -> Vec<CorpusRecord> {
        synth_generate(&SynthConfig::new(5, 3)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let records = sample();
        let text = to_jsonl(&records);
        let back = parse_jsonl(&text, Path::new("mem")).unwrap();
        assert_eq!(back, records);
        assert_eq!(to_jsonl(&back), text);
    }

    #[test]
    fn lines_use_documented_field_names() {
        let line = record_line(&sample()[0]);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["id", "logits", "labels", "tokens", "prompts_local", "prompt_global_ref"] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(v["logits"].as_array().unwrap().len(), 75);
    }

    #[test]
    fn errors_name_the_line() {
        let mut text = to_jsonl(&sample());
        text.push_str("{\"id\":\"x\"}\n");
        let err = parse_jsonl(&text, Path::new("c.jsonl")).unwrap_err().to_string();
        assert!(err.contains("line 6"), "{err}");
    }

    #[test]
    fn duplicate_ids_and_bad_labels_are_rejected() {
        let mut records = sample();
        records[1].id = records[0].id.clone();
        assert!(parse_jsonl(&to_jsonl(&records), Path::new("c")).is_err());
        let mut records = sample();
        records[0].labels[0] = 4;
        let text = format!("{}\n", record_line(&records[0]));
        assert!(parse_jsonl(&text, Path::new("c")).is_err());
    }
}
