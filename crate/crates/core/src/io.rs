//! Interaction file ingestion, id densification and the binary checkpoint format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ctbg::Interaction;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::time_encoding::TimeNormalizer;

/// Raw identifiers in dense-index order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMapping {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMapping {
    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect()
    }

    /// `kind<TAB>raw_id<TAB>index` lines.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (kind, ids) in [("user", &self.users), ("item", &self.items)] {
            for (k, raw) in ids.iter().enumerate() {
                writeln!(w, "{kind}\t{raw}\t{k}")?;
            }
        }
        Ok(())
    }
}

/// Ingested interactions with raw timestamps in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub ids: IdMapping,
    pub normalizer: TimeNormalizer,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.ids.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.ids.items.len()
    }

    /// Interactions with timestamps mapped to model time.
    pub fn normalized(&self) -> Vec<Interaction> {
        self.interactions
            .iter()
            .map(|x| Interaction::new(x.user, x.item, self.normalizer.normalize(x.timestamp)))
            .collect()
    }
}

/// Parses `user<d>item<d>timestamp[<d>...]` lines. Blank lines and lines starting
/// with `#` are skipped; ids are densified in order of first appearance.
pub fn parse_interactions<R: BufRead>(reader: R, delimiter: char) -> Result<Dataset> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut ids = IdMapping::default();
    let mut interactions = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if delimiter.is_whitespace() {
            trimmed.split_whitespace().collect()
        } else {
            trimmed.split(delimiter).map(str::trim).collect()
        };
        if fields.len() < 3 || fields[..3].iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected user, item and timestamp columns, got {} field(s)", fields.len()),
            });
        }
        let timestamp: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("non-numeric timestamp `{}`", fields[2]),
        })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("timestamp {timestamp} must be finite and non-negative"),
            });
        }
        let user = *users.entry(fields[0].to_string()).or_insert_with(|| {
            ids.users.push(fields[0].to_string());
            ids.users.len() - 1
        });
        let item = *items.entry(fields[1].to_string()).or_insert_with(|| {
            ids.items.push(fields[1].to_string());
            ids.items.len() - 1
        });
        interactions.push(Interaction::new(user, item, timestamp));
    }
    if interactions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let normalizer = TimeNormalizer::fit(interactions.iter().map(|x| x.timestamp));
    Ok(Dataset {
        interactions,
        ids,
        normalizer,
    })
}

pub fn ingest(path: &Path, delimiter: char) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_interactions(BufReader::new(File::open(path)?), delimiter)
}

/// Writes interactions as `user<d>item<d>timestamp` using raw ids.
pub fn write_interactions<W: Write>(mut w: W, xs: &[Interaction], ids: &IdMapping, delimiter: char) -> Result<()> {
    for x in xs {
        writeln!(w, "{}{delimiter}{}{delimiter}{}", ids.users[x.user], ids.items[x.item], x.timestamp)?;
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"CTSRCKPT";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to score with a trained model on raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ids: IdMapping,
    pub normalizer: TimeNormalizer,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(get::<8, _>(r)?))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(get::<8, _>(r)?))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u64(r)? as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

impl Checkpoint {
    /// Layout: magic, version, config (TOML text), node counts, time normalizer,
    /// user ids, item ids, then every tensor as `rows, cols, data`, all
    /// little-endian, floats as 64-bit.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(MAGIC)?;
        put_u32(&mut w, FORMAT_VERSION)?;
        let config = toml::to_string(&self.params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_str(&mut w, &config)?;
        put_u64(&mut w, self.params.num_users as u64)?;
        put_u64(&mut w, self.params.num_items as u64)?;
        put_f64(&mut w, self.normalizer.offset)?;
        put_f64(&mut w, self.normalizer.span)?;
        for ids in [&self.ids.users, &self.ids.items] {
            put_u64(&mut w, ids.len() as u64)?;
            for s in ids {
                put_str(&mut w, s)?;
            }
        }
        put_u64(&mut w, self.params.num_tensors() as u64)?;
        for t in self.params.tensors() {
            put_u64(&mut w, t.rows as u64)?;
            put_u64(&mut w, t.cols as u64)?;
            for v in &t.data {
                put_f64(&mut w, *v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        if &get::<8, _>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(get::<4, _>(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config: ModelConfig = toml::from_str(&get_str(&mut r)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let num_users = get_u64(&mut r)? as usize;
        let num_items = get_u64(&mut r)? as usize;
        let normalizer = TimeNormalizer {
            offset: get_f64(&mut r)?,
            span: get_f64(&mut r)?,
        };
        let mut lists = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = get_u64(&mut r)? as usize;
            lists.push((0..n).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?);
        }
        let items = lists.pop().unwrap();
        let users = lists.pop().unwrap();
        let count = get_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let rows = get_u64(&mut r)? as usize;
            let cols = get_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| *n <= 1 << 32)
                .ok_or_else(|| Error::Checkpoint(format!("implausible tensor shape {rows}x{cols}")))?;
            let data = (0..n).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor { rows, cols, data });
        }
        let params = ModelParams::from_tensors(config, num_users, num_items, tensors)?;
        Ok(Checkpoint {
            params,
            ids: IdMapping { users, items },
            normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Checkpoint::read(File::open(path)?)
    }
}
