//! File layout shared by the subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use msd_core::datagen::{read_jsonl, InstructionExample};
use msd_core::target::TargetParams;
use msd_core::weights::WeightFile;

pub const VERSION: &str = concat!("msd ", env!("CARGO_PKG_VERSION"));

pub const TEXT_FILE: &str = "text.jsonl";
pub const VISUAL_FILE: &str = "visual.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance block embedded in every artifact.
pub fn header(command: &str, seed: u64, config: impl Serialize) -> Result<Value> {
    Ok(serde_json::json!({
        "version": VERSION,
        "command": command,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub header: Value,
    pub grammar_seed: u64,
    pub text_count: usize,
    pub visual_count: usize,
    /// Indices (into each corpus) held out from training.
    pub held_out_text: Vec<usize>,
    pub held_out_visual: Vec<usize>,
}

pub struct Corpus {
    pub text_train: Vec<InstructionExample>,
    pub text_held_out: Vec<InstructionExample>,
    pub visual_train: Vec<InstructionExample>,
    pub visual_held_out: Vec<InstructionExample>,
}

fn partition(examples: Vec<InstructionExample>, held: &[usize]) -> (Vec<InstructionExample>, Vec<InstructionExample>) {
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        if held.binary_search(&i).is_ok() {
            held_out.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, held_out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let read = |name: &str| -> Result<Vec<InstructionExample>> {
        let path = dir.join(name);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
    };
    let text = read(TEXT_FILE)?;
    let visual = read(VISUAL_FILE)?;
    if text.len() != manifest.text_count || visual.len() != manifest.visual_count {
        bail!("corpus sizes disagree with {}", MANIFEST_FILE);
    }
    let (text_train, text_held_out) = partition(text, &manifest.held_out_text);
    let (visual_train, visual_held_out) = partition(visual, &manifest.held_out_visual);
    Ok(Corpus {
        text_train,
        text_held_out,
        visual_train,
        visual_held_out,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    write_file(path, &out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn read_weights(path: &Path, companion: Option<&TargetParams>) -> Result<WeightFile> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    WeightFile::from_bytes_with(&bytes, companion).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_target(path: &Path) -> Result<(TargetParams, Value)> {
    let file = read_weights(path, None)?;
    let target = file
        .target
        .with_context(|| format!("{} holds no target weights", path.display()))?;
    Ok((target, file.meta))
}

/// A `# {provenance json}` comment line opening CSV outputs.
pub fn csv_preamble(out: &mut impl Write, header: &Value) -> Result<()> {
    writeln!(out, "# {}", serde_json::to_string(header)?)?;
    Ok(())
}
