//! Feature files. One record holds one layer of one sample; a sample is a run
//! of consecutive records whose layer numbers count up from 0.
//!
//! Text form: comma-separated with header
//! `domain,task,class,object,split,layer,f0,f1,...`; rows may be shorter than
//! the header when layers differ in size. `split` is `train` or `test`.
//!
//! Binary form: the common container with the raw-features record type and
//! records
//!
//! ```text
//! u16 domain | u32 task | u32 class | u32 object | u8 split | u16 layer | u32 dim | dim floats
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sample, SampleSource, ScenarioError, Split};
use crate::format::{FloatWidth, Header, Reader, RecordType, Writer, MAGIC};
use crate::ilfr::LayerFeatures;
use crate::linalg::FVec;

const TEXT_COLUMNS: [&str; 6] = ["domain", "task", "class", "object", "split", "layer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    Text,
    Binary,
}

impl std::str::FromStr for FeatureFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "csv" => Ok(FeatureFormat::Text),
            "binary" | "bin" => Ok(FeatureFormat::Binary),
            other => Err(format!(
                "unknown feature format {other:?} (expected text or binary)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RowKey {
    domain: u16,
    task: u32,
    class: u32,
    object: u32,
    split: Split,
}

/// Collects layer records into samples.
struct Assembler<'a> {
    path: &'a Path,
    file: usize,
    out: Vec<Sample>,
    current: Option<(RowKey, u64, Vec<FVec>)>,
}

impl<'a> Assembler<'a> {
    fn new(path: &'a Path, file: usize) -> Self {
        Self {
            path,
            file,
            out: Vec::new(),
            current: None,
        }
    }

    fn location(&self, offset: u64) -> String {
        format!("{}:{}", self.path.display(), offset)
    }

    fn push(
        &mut self,
        key: RowKey,
        layer: u16,
        offset: u64,
        values: Vec<f64>,
    ) -> Result<(), ScenarioError> {
        let values = FVec::new(values).map_err(|e| ScenarioError::Parse {
            location: self.location(offset),
            message: e.to_string(),
        })?;
        if layer == 0 {
            self.flush();
            self.current = Some((key, offset, vec![values]));
            return Ok(());
        }
        let location = self.location(offset);
        match &mut self.current {
            Some((k, _, layers)) if *k == key && layers.len() == layer as usize => {
                layers.push(values);
                Ok(())
            }
            Some((k, _, layers)) if *k == key => Err(ScenarioError::Parse {
                location,
                message: format!("expected layer {}, found layer {layer}", layers.len()),
            }),
            _ => Err(ScenarioError::Parse {
                location,
                message: format!(
                    "layer {layer} does not continue a sample (layers must start at 0)"
                ),
            }),
        }
    }

    fn flush(&mut self) {
        if let Some((key, offset, layers)) = self.current.take() {
            self.out.push(Sample {
                domain: key.domain,
                task: key.task,
                class: key.class,
                object: key.object,
                split: key.split,
                features: LayerFeatures::new(layers).expect("at least one layer"),
                source: SampleSource {
                    file: self.file,
                    offset,
                },
            });
        }
    }

    fn finish(mut self) -> Vec<Sample> {
        self.flush();
        self.out
    }
}

/// Reads a text or binary feature file; the format is chosen by the magic
/// bytes. `file` is recorded in every sample's source.
pub fn read_features(path: &Path, file: usize) -> Result<Vec<Sample>, ScenarioError> {
    let bytes = fs::read(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.starts_with(&MAGIC) {
        read_binary(path, file, &bytes)
    } else {
        read_text(path, file, &bytes)
    }
}

fn read_text(path: &Path, file: usize, bytes: &[u8]) -> Result<Vec<Sample>, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let parse_err = |line: u64, message: String| ScenarioError::Parse {
        location: format!("{}:{}", path.display(), line),
        message,
    };
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() <= TEXT_COLUMNS.len() || names[..TEXT_COLUMNS.len()] != TEXT_COLUMNS {
        return Err(parse_err(
            1,
            format!(
                "header must start with {} followed by f0..",
                TEXT_COLUMNS.join(",")
            ),
        ));
    }
    let mut asm = Assembler::new(path, file);
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() <= TEXT_COLUMNS.len() {
            return Err(parse_err(line, "row has no feature values".into()));
        }
        let field = |i: usize| &record[i];
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
            s.parse().map_err(|_| format!("bad {what} {s:?}"))
        }
        let parsed = (|| -> Result<(RowKey, u16, Vec<f64>), String> {
            let key = RowKey {
                domain: num(field(0), "domain")?,
                task: num(field(1), "task")?,
                class: num(field(2), "class")?,
                object: num(field(3), "object")?,
                split: field(4).parse()?,
            };
            let layer: u16 = num(field(5), "layer")?;
            let values = record
                .iter()
                .skip(TEXT_COLUMNS.len())
                .map(|s| num::<f64>(s, "feature value"))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((key, layer, values))
        })();
        let (key, layer, values) = parsed.map_err(|m| parse_err(line, m))?;
        asm.push(key, layer, line, values)?;
    }
    Ok(asm.finish())
}

fn read_binary(path: &Path, file: usize, bytes: &[u8]) -> Result<Vec<Sample>, ScenarioError> {
    let (header, mut r) = Reader::open(bytes, RecordType::RawFeatures)?;
    let mut asm = Assembler::new(path, file);
    for _ in 0..header.count {
        let offset = r.offset() as u64;
        let domain = r.u16()?;
        let task = r.u32()?;
        let class = r.u32()?;
        let object = r.u32()?;
        let split_code = r.u8()?;
        let layer = r.u16()?;
        let dim = r.u32()? as usize;
        let split = Split::from_code(split_code).ok_or_else(|| ScenarioError::Parse {
            location: format!("{}:{}", path.display(), offset),
            message: format!("bad split code {split_code}"),
        })?;
        let values = r.floats(dim)?;
        let key = RowKey {
            domain,
            task,
            class,
            object,
            split,
        };
        asm.push(key, layer, offset, values)?;
    }
    r.finish()?;
    Ok(asm.finish())
}

pub fn write_text_features(path: &Path, samples: &[&Sample]) -> Result<(), ScenarioError> {
    let io = |source: std::io::Error| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    };
    let width = samples
        .iter()
        .flat_map(|s| s.features.dims())
        .max()
        .unwrap_or(1);
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| io(e.into()))?;
    let mut header: Vec<String> = TEXT_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| io(e.into()))?;
    let mut row: Vec<String> = Vec::new();
    for s in samples {
        for (layer, values) in s.features.layers().iter().enumerate() {
            row.clear();
            row.push(s.domain.to_string());
            row.push(s.task.to_string());
            row.push(s.class.to_string());
            row.push(s.object.to_string());
            row.push(s.split.as_str().to_string());
            row.push(layer.to_string());
            row.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| io(e.into()))?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_binary_features(path: &Path, samples: &[&Sample]) -> Result<(), ScenarioError> {
    let records: usize = samples.iter().map(|s| s.features.layers().len()).sum();
    let mut w = Writer::new(
        Header {
            width: FloatWidth::F64,
            record_type: RecordType::RawFeatures,
            count: records as u32,
        },
        0,
    );
    for s in samples {
        for (layer, values) in s.features.layers().iter().enumerate() {
            w.u16(s.domain);
            w.u32(s.task);
            w.u32(s.class);
            w.u32(s.object);
            w.u8(s.split.code());
            w.u16(layer as u16);
            w.u32(values.dim() as u32);
            w.floats(values);
        }
    }
    fs::write(path, w.finish()).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}
