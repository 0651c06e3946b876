//! Canonical benchmark manifests and reference converters.
//!
//! A manifest is UTF-8 JSONL. Each row is
//! `{"id": .., "image": .., "question": .., "answers": [..]}` with the image
//! path relative to the manifest file. An optional first line
//! `{"manifest": {"name": .., "split": .., "source_notes": ..}}` carries
//! metadata; without it the name defaults to the file stem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{} image(s) missing, first: {}", .0.len(), .0[0].display())]
    MissingImages(Vec<PathBuf>),
    #[error("input does not match the {format} format: {message}")]
    FormatMismatch { format: RawFormat, message: String },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: PathBuf,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    #[serde(default)]
    pub split: String,
    #[serde(default)]
    pub source_notes: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub samples: Vec<Sample>,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.image)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            manifest: self.meta.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }
}

/// Parse and validate manifest text. Images are not checked here.
pub fn parse_manifest(text: &str, origin: &str, default_name: &str) -> Result<(ManifestMeta, Vec<Sample>), DatasetError> {
    let schema = |line: usize, message: String| DatasetError::Schema {
        path: origin.to_string(),
        line,
        message,
    };
    let mut meta = ManifestMeta {
        name: default_name.to_string(),
        ..ManifestMeta::default()
    };
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| schema(line, e.to_string()))?;
        if samples.is_empty() && value.get("manifest").is_some() && value.get("id").is_none() {
            let header: HeaderLine =
                serde_json::from_value(value).map_err(|e| schema(line, e.to_string()))?;
            meta = header.manifest;
            continue;
        }
        let sample: Sample = serde_json::from_value(value).map_err(|e| schema(line, e.to_string()))?;
        if sample.id.is_empty() {
            return Err(schema(line, "empty id".into()));
        }
        if sample.question.trim().is_empty() {
            return Err(schema(line, "empty question".into()));
        }
        if sample.answers.is_empty() {
            return Err(schema(line, "answers must not be empty".into()));
        }
        if !ids.insert(sample.id.clone()) {
            return Err(schema(line, format!("duplicate id '{}'", sample.id)));
        }
        samples.push(sample);
    }
    Ok((meta, samples))
}

/// Load a manifest and check that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let (meta, samples) = parse_manifest(&text, &path.display().to_string(), &stem)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let manifest = DatasetManifest { meta, samples, root };
    let missing: Vec<PathBuf> = manifest
        .samples
        .iter()
        .map(|s| manifest.image_path(s))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingImages(missing));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawFormat {
    TextvqaJson,
    FunsdKie,
}

impl std::fmt::Display for RawFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RawFormat::TextvqaJson => "textvqa_json",
            RawFormat::FunsdKie => "funsd_kie",
        })
    }
}

impl std::str::FromStr for RawFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "textvqa_json" => Ok(RawFormat::TextvqaJson),
            "funsd_kie" => Ok(RawFormat::FunsdKie),
            other => Err(format!("unknown raw format '{other}'")),
        }
    }
}

/// Convert a raw benchmark file into canonical manifest text.
///
/// `image_prefix` is prepended to each image file name and should be the
/// image directory relative to where the manifest will be written.
pub fn convert(raw_path: &Path, format: RawFormat, image_prefix: &str) -> Result<String, DatasetError> {
    let manifest = match format {
        RawFormat::TextvqaJson => convert_textvqa(raw_path, image_prefix)?,
        RawFormat::FunsdKie => convert_funsd(raw_path, image_prefix)?,
    };
    Ok(manifest.to_jsonl())
}

fn join_prefix(prefix: &str, file: &str) -> PathBuf {
    if prefix.is_empty() {
        PathBuf::from(file)
    } else {
        Path::new(prefix).join(file)
    }
}

fn read_json(path: &Path, format: RawFormat) -> Result<Value, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::FormatMismatch {
        format,
        message: format!("{}: {e}", path.display()),
    })
}

fn convert_textvqa(path: &Path, image_prefix: &str) -> Result<DatasetManifest, DatasetError> {
    let format = RawFormat::TextvqaJson;
    let mismatch = |message: String| DatasetError::FormatMismatch { format, message };
    let root = read_json(path, format)?;
    let data = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| mismatch("missing top-level \"data\" array".into()))?;
    let mut samples = Vec::with_capacity(data.len());
    for (i, entry) in data.iter().enumerate() {
        let id = match entry.get("question_id") {
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::String(s)) => s.clone(),
            _ => return Err(mismatch(format!("entry {i}: missing question_id"))),
        };
        let image_id = entry
            .get("image_id")
            .and_then(Value::as_str)
            .ok_or_else(|| mismatch(format!("entry {i}: missing image_id")))?;
        let question = entry
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| mismatch(format!("entry {i}: missing question")))?;
        let answers: Vec<String> = entry
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| mismatch(format!("entry {i}: missing answers")))?
            .iter()
            .map(|a| a.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| mismatch(format!("entry {i}: non-string answer")))?;
        if answers.is_empty() {
            return Err(mismatch(format!("entry {i}: no answers")));
        }
        samples.push(Sample {
            id,
            image: join_prefix(image_prefix, &format!("{image_id}.jpg")),
            question: question.to_string(),
            answers,
        });
    }
    Ok(DatasetManifest {
        meta: ManifestMeta {
            name: root
                .get("dataset_name")
                .and_then(Value::as_str)
                .unwrap_or("textvqa")
                .to_string(),
            split: root
                .get("dataset_type")
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string(),
            source_notes: format!("converted from {}", path.display()),
        },
        samples,
        root: PathBuf::new(),
    })
}

fn funsd_files(path: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn funsd_key(text: &str) -> String {
    text.trim().trim_end_matches(':').trim().to_string()
}

fn convert_funsd(path: &Path, image_prefix: &str) -> Result<DatasetManifest, DatasetError> {
    let format = RawFormat::FunsdKie;
    let mismatch = |message: String| DatasetError::FormatMismatch { format, message };
    let mut samples = Vec::new();
    for file in funsd_files(path)? {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| mismatch(format!("bad file name {}", file.display())))?
            .to_string();
        let root = read_json(&file, format)?;
        let form = root
            .get("form")
            .and_then(Value::as_array)
            .ok_or_else(|| mismatch(format!("{}: missing \"form\" array", file.display())))?;

        struct Entity<'a> {
            id: i64,
            text: &'a str,
            label: &'a str,
            links: Vec<(i64, i64)>,
        }
        let entities: Vec<Entity> = form
            .iter()
            .map(|e| {
                let id = e.get("id").and_then(Value::as_i64)?;
                let text = e.get("text").and_then(Value::as_str)?;
                let label = e.get("label").and_then(Value::as_str)?;
                let links = e
                    .get("linking")
                    .and_then(Value::as_array)
                    .map(|ls| {
                        ls.iter()
                            .filter_map(|l| Some((l.get(0)?.as_i64()?, l.get(1)?.as_i64()?)))
                            .collect()
                    })
                    .unwrap_or_default();
                Some(Entity { id, text, label, links })
            })
            .collect::<Option<_>>()
            .ok_or_else(|| mismatch(format!("{}: entity missing id/text/label", file.display())))?;

        for key in entities.iter().filter(|e| e.label == "question") {
            let values: Vec<&str> = key
                .links
                .iter()
                .filter(|(from, _)| *from == key.id)
                .filter_map(|(_, to)| entities.iter().find(|e| e.id == *to && e.label == "answer"))
                .map(|e| e.text.trim())
                .filter(|t| !t.is_empty())
                .collect();
            let name = funsd_key(key.text);
            if values.is_empty() || name.is_empty() {
                continue;
            }
            samples.push(Sample {
                id: format!("{stem}-{}", key.id),
                image: join_prefix(image_prefix, &format!("{stem}.png")),
                question: format!("What is the value for key '{name}'?"),
                answers: vec![values.join(" ")],
            });
        }
    }
    Ok(DatasetManifest {
        meta: ManifestMeta {
            name: "funsd".into(),
            split: String::new(),
            source_notes: format!("converted from {}", path.display()),
        },
        samples,
        root: PathBuf::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, rel: &str) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            touch(dir.path(), &format!("img/{i}.png"));
        }
        let text: String = (0..3)
            .map(|i| format!("{{\"id\":\"s{i}\",\"image\":\"img/{i}.png\",\"question\":\"q{i}?\",\"answers\":[\"a{i}\"]}}\n"))
            .collect();
        let path = dir.path().join("bench.jsonl");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(m.name(), "bench");
        assert_eq!(m.image_path(&m.samples[1]), dir.path().join("img/1.png"));
    }

    #[test]
    fn missing_answers_reports_line() {
        let text = "{\"id\":\"a\",\"image\":\"x.png\",\"question\":\"q\",\"answers\":[\"1\"]}\n{\"id\":\"b\",\"image\":\"x.png\",\"question\":\"q\"}\n";
        match parse_manifest(text, "m.jsonl", "m") {
            Err(DatasetError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("answers"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let empty = "{\"id\":\"a\",\"image\":\"x.png\",\"question\":\"q\",\"answers\":[]}\n";
        assert!(matches!(
            parse_manifest(empty, "m", "m"),
            Err(DatasetError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let row = "{\"id\":\"a\",\"image\":\"x.png\",\"question\":\"q\",\"answers\":[\"1\"]}\n";
        match parse_manifest(&format!("{row}{row}"), "m", "m") {
            Err(DatasetError::Schema { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_images_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"image\":\"nope.png\",\"question\":\"q\",\"answers\":[\"1\"]}\n",
        )
        .unwrap();
        assert!(matches!(load_manifest(&path), Err(DatasetError::MissingImages(v)) if v.len() == 1));
    }

    #[test]
    fn textvqa_conversion_keeps_all_answers() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("TextVQA_0.5.1_val.json");
        let answers: Vec<String> = (0..10).map(|i| format!("ans{i}")).collect();
        let doc = serde_json::json!({
            "dataset_name": "textvqa",
            "dataset_type": "val",
            "data": [{"question_id": 34602, "image_id": "003a8ae2ef43b901", "question": "what is the brand?", "answers": answers}]
        });
        fs::write(&raw, doc.to_string()).unwrap();
        touch(dir.path(), "images/003a8ae2ef43b901.jpg");
        let text = convert(&raw, RawFormat::TextvqaJson, "images").unwrap();
        let out = dir.path().join("textvqa.jsonl");
        fs::write(&out, text).unwrap();
        let m = load_manifest(&out).unwrap();
        assert_eq!(m.meta.split, "val");
        assert_eq!(m.samples[0].id, "34602");
        assert_eq!(m.samples[0].answers.len(), 10);
    }

    #[test]
    fn funsd_key_value_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("0000971160.json");
        let doc = serde_json::json!({"form": [
            {"id": 0, "text": "DATE:", "label": "question", "linking": [[0, 1]]},
            {"id": 1, "text": "2019-03-01", "label": "answer", "linking": [[0, 1]]},
            {"id": 2, "text": "Orphan", "label": "question", "linking": []},
            {"id": 3, "text": "REPORT", "label": "header", "linking": []}
        ]});
        fs::write(&raw, doc.to_string()).unwrap();
        touch(dir.path(), "images/0000971160.png");
        let text = convert(&raw, RawFormat::FunsdKie, "images").unwrap();
        let out = dir.path().join("funsd.jsonl");
        fs::write(&out, text).unwrap();
        let m = load_manifest(&out).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.samples[0].question, "What is the value for key 'DATE'?");
        assert_eq!(m.samples[0].answers, vec!["2019-03-01".to_string()]);
    }

    #[test]
    fn malformed_json_is_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("bad.json");
        fs::write(&raw, "{not json").unwrap();
        for format in [RawFormat::TextvqaJson, RawFormat::FunsdKie] {
            assert!(matches!(
                convert(&raw, format, ""),
                Err(DatasetError::FormatMismatch { .. })
            ));
        }
        fs::write(&raw, "{\"other\": 1}").unwrap();
        assert!(matches!(
            convert(&raw, RawFormat::TextvqaJson, ""),
            Err(DatasetError::FormatMismatch { .. })
        ));
    }
}
