//! Line-delimited JSON record files with a schema header line.
//!
//! Line 1 is `{"schema":<name>,"version":<n>,"meta":<value>}`; every
//! following non-empty line is one record.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    schema: String,
    version: u32,
    meta: M,
}

#[derive(Debug, Clone, Copy)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
}

impl Schema {
    pub const fn new(name: &'static str, version: u32) -> Self {
        Schema { name, version }
    }

    fn header_line<M: Serialize>(&self, meta: &M) -> Result<String> {
        let header = Header {
            schema: self.name.to_string(),
            version: self.version,
            meta,
        };
        Ok(serde_json::to_string(&header).expect("header serializes"))
    }

    pub fn write<M: Serialize, T: Serialize>(
        &self,
        path: &Path,
        meta: &M,
        records: &[T],
    ) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::storage(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", self.header_line(meta)?)?;
        for r in records {
            let line = serde_json::to_string(r).map_err(|e| Error::storage(path, e))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<M: DeserializeOwned, T: DeserializeOwned>(&self, path: &Path) -> Result<(M, Vec<T>)> {
        let file = File::open(path).map_err(|e| Error::storage(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => return Err(Error::storage(path, "missing schema header line")),
        };
        let header: Header<M> = serde_json::from_str(&first)
            .map_err(|e| Error::storage(path, format!("line 1: bad schema header: {e}")))?;
        if header.schema != self.name {
            return Err(Error::storage(
                path,
                format!("expected schema {:?}, found {:?}", self.name, header.schema),
            ));
        }
        if header.version != self.version {
            return Err(Error::storage(
                path,
                format!(
                    "unsupported {} version {} (expected {})",
                    self.name, header.version, self.version
                ),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| Error::storage(path, format!("line {}: {e}", i + 2)))?;
            records.push(record);
        }
        Ok((header.meta, records))
    }

    /// Appends one record, writing the header first when the file is new.
    pub fn append<T: Serialize>(&self, path: &Path, record: &T) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::storage(path, e))?;
        let mut buf = String::new();
        if fresh {
            buf.push_str(&self.header_line(&())?);
            buf.push('\n');
        }
        buf.push_str(&serde_json::to_string(record).map_err(|e| Error::storage(path, e))?);
        buf.push('\n');
        file.write_all(buf.as_bytes())?;
        Ok(())
    }
}
