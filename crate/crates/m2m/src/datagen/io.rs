//! Dataset persistence: one JSON object per line for samples, plus a JSON
//! sidecar carrying the generator config, seed, schema version, and measured
//! correlations. `load . save` is the identity on anything `generate` emits.

use super::{DataError, DatasetMeta, Sample};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn save(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::Config(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Sample>, DataError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Sidecar path convention: `<data>.meta.json` next to the dataset file.
pub fn meta_path(data_path: &Path) -> std::path::PathBuf {
    let mut os = data_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub fn save_meta(meta: &DatasetMeta, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, meta).map_err(|e| DataError::Config(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<DatasetMeta, DataError> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| DataError::Parse {
        line: 0,
        msg: e.to_string(),
    })
}
