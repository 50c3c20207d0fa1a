//! File plumbing: JSON-lines corpora and fact files, plus artifact writing.

use std::fs;
use std::path::Path;

use anyhow::Context;
use factgraph_core::eval::CorpusRecord;
use factgraph_core::factstore::Fact;

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> anyhow::Result<Vec<CorpusRecord>> {
    read_jsonl(path)
}

pub fn read_facts(path: &Path) -> anyhow::Result<Vec<Fact>> {
    read_jsonl(path)
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
