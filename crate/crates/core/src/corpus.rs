//! JSONL scoring corpora and reproducible train/validation/test splits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CorpusError;
use crate::metric::EhiReport;

/// One corpus line. Unknown fields are carried through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<EhiReport>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            summary: None,
            reference: None,
            scores: None,
            extra: Map::new(),
        }
    }
}

/// Read newline-delimited records, preserving order. Blank lines are skipped;
/// line numbers in errors are 1-based physical lines.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<ScoreRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(CorpusError::InvalidRecord {
                line: lineno,
                reason: "empty id".into(),
            });
        }
        if record.source.is_empty() {
            return Err(CorpusError::InvalidRecord {
                line: lineno,
                reason: format!("record {:?} has an empty source", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<W: Write>(records: &[ScoreRecord], mut writer: W) -> Result<(), CorpusError> {
    for record in records {
        serde_json::to_writer(&mut writer, record).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Open a corpus file for reading, decompressing `*.gz` transparently.
pub fn open_reader(path: &Path) -> Result<Box<dyn BufRead>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let inner: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(inner)))
}

pub fn read_jsonl_path(path: &Path) -> Result<Vec<ScoreRecord>, CorpusError> {
    read_jsonl(open_reader(path)?).map_err(|e| match e {
        CorpusError::Stream(source) => CorpusError::io(path, source),
        other => other,
    })
}

pub fn write_jsonl_path(records: &[ScoreRecord], path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let result = if is_gzip(path) {
        let mut enc = GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
        write_jsonl(records, &mut enc).and_then(|_| enc.finish().map(|_| ()).map_err(Into::into))
    } else {
        write_jsonl(records, BufWriter::new(file))
    };
    result.map_err(|e| match e {
        CorpusError::Stream(source) => CorpusError::io(path, source),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self, CorpusError> {
        let spec = Self {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions must be positive, got {fracs:?}"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Partition sizes for `n` records: floor boundaries, remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // absorbs representation error such as 10 * 0.7 = 6.999...
        const SLACK: f64 = 1e-9;
        let nf = n as f64;
        let b1 = ((nf * self.train_frac + SLACK).floor() as usize).min(n);
        let b2 = ((nf * (self.train_frac + self.val_frac) + SLACK).floor() as usize).clamp(b1, n);
        (b1, b2 - b1, n - b2)
    }
}

/// Seeded permutation of `0..n`: SplitMix64 stream, Fisher-Yates from the
/// back, index drawn as the high 64 bits of `u64 * (i + 1)`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        idx.swap(i, j);
    }
    idx
}

pub const MIN_SPLIT_RECORDS: usize = 3;

/// Train, validation and test records.
pub type Partition<T> = (Vec<T>, Vec<T>, Vec<T>);

pub fn split_corpus<T: Clone>(records: &[T], spec: &SplitSpec) -> Result<Partition<T>, CorpusError> {
    spec.validate()?;
    if records.len() < MIN_SPLIT_RECORDS {
        return Err(CorpusError::TooSmall {
            found: records.len(),
            needed: MIN_SPLIT_RECORDS,
        });
    }
    let order = shuffled_indices(records.len(), spec.seed);
    let (n_train, n_val, _) = spec.sizes(records.len());
    let pick = |range: &[usize]| range.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
