//! Versioned on-disk formats. Every JSON document and every line-delimited
//! file with a header carries a `format` tag and a `version`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use futuresight_core::corpus::{parse_stopwords, IdfTable, Story, TrainingExample};
use futuresight_core::tokenizer::Tokenizer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DATASET_FORMAT: &str = "futuresight-dataset";
pub const TOKENIZER_FORMAT: &str = "futuresight-tokenizer";
pub const IDF_FORMAT: &str = "futuresight-idf";
pub const FORMAT_VERSION: u32 = 1;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub examples: usize,
}

/// One input story record: `{"id": ..., "text": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRecord {
    pub id: String,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct TokenizerBody {
    vocab_size: usize,
    merges: Vec<(u32, u32)>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn check_tag(path: &Path, line: usize, format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(Error::format(path, line, format!("format tag {format:?}, expected {want:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::format(path, line, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::format(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON record per non-blank line. Errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, i + 1, e))?);
    }
    Ok(out)
}

/// Appends one JSON record as a line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record).map_err(|e| Error::format(path, 0, e))?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Writes a header line followed by one example per line.
pub fn write_dataset(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut w = create(path)?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        examples: examples.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::format(path, 0, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| Error::format(path, 0, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset file. The header must be the first line and its example
/// count must match the number of records.
pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>> {
    let mut lines = open(path)?.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        None => return Err(Error::format(path, 1, "missing dataset header")),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, 1, e))?
        }
    };
    check_tag(path, 1, &header.format, header.version, DATASET_FORMAT)?;
    let mut out = Vec::with_capacity(header.examples);
    let mut last = 1;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        last = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line).map_err(|e| Error::format(path, i + 1, e))?;
        if ex.future_distance == 0 {
            return Err(Error::format(path, i + 1, "future_distance must be at least 1"));
        }
        out.push(ex);
    }
    if out.len() != header.examples {
        return Err(Error::format(
            path,
            last + 1,
            format!("header declares {} examples, file holds {}", header.examples, out.len()),
        ));
    }
    Ok(out)
}

pub fn write_tokenizer(path: &Path, tokenizer: &Tokenizer) -> Result<()> {
    let doc = Tagged {
        format: TOKENIZER_FORMAT.into(),
        version: FORMAT_VERSION,
        body: TokenizerBody {
            vocab_size: tokenizer.vocab_size(),
            merges: tokenizer.merges().to_vec(),
        },
    };
    write_json(path, &doc)
}

pub fn read_tokenizer(path: &Path) -> Result<Tokenizer> {
    let doc: Tagged<TokenizerBody> = read_json(path)?;
    check_tag(path, 1, &doc.format, doc.version, TOKENIZER_FORMAT)?;
    Ok(Tokenizer::from_merges(doc.body.vocab_size, doc.body.merges)?)
}

pub fn write_idf(path: &Path, table: &IdfTable) -> Result<()> {
    let doc = Tagged {
        format: IDF_FORMAT.into(),
        version: FORMAT_VERSION,
        body: table,
    };
    write_json(path, &doc)
}

pub fn read_idf(path: &Path) -> Result<IdfTable> {
    let doc: Tagged<IdfTable> = read_json(path)?;
    check_tag(path, 1, &doc.format, doc.version, IDF_FORMAT)?;
    Ok(doc.body)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, 0, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.line(), e))
}

pub fn read_stopwords(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}

/// Story files under `input`: the file itself, or every `*.jsonl` file of a
/// directory in name order.
pub fn story_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(input, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads story records from a file or directory. Ids must be unique; a story
/// without any sentence is an error naming its line.
pub fn read_stories(input: &Path) -> Result<Vec<Story>> {
    let mut seen = BTreeSet::new();
    let mut stories = Vec::new();
    for file in story_files(input)? {
        for (i, line) in open(&file)?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StoryRecord = serde_json::from_str(&line).map_err(|e| Error::format(&file, i + 1, e))?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::format(&file, i + 1, format!("duplicate story id {:?}", rec.id)));
            }
            stories.push(Story::new(rec.id, rec.text).map_err(|e| Error::format(&file, i + 1, e))?);
        }
    }
    Ok(stories)
}

pub fn write_stories(path: &Path, stories: &[StoryRecord]) -> Result<()> {
    write_jsonl(path, stories)
}
