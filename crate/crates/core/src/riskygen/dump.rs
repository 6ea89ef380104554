//! Binary sample dumps plus a CSV index.
//!
//! The dump is a container file whose JSON header carries caller metadata
//! (config, seeds) and per-category counts, followed by little-endian f32
//! blocks for samples and conditions and u32 blocks for the labels.

use super::{GenerateError, GeneratedSample};
use crate::container::{self, f32_block, u32_block, Cursor};
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"RDSAMPLE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDump {
    pub meta: Value,
    pub samples: Vec<GeneratedSample>,
}

fn width(samples: &[GeneratedSample], f: impl Fn(&GeneratedSample) -> usize) -> Result<usize, GenerateError> {
    let w = samples.first().map(&f).unwrap_or(0);
    if samples.iter().any(|s| f(s) != w) {
        return Err(GenerateError::Dump("samples have different widths".into()));
    }
    Ok(w)
}

/// Writes `samples` to `path`. Traces are not stored.
pub fn write_samples(path: &Path, samples: &[GeneratedSample], meta: Value) -> Result<(), GenerateError> {
    let dim = width(samples, |s| s.x.len())?;
    let embed_dim = width(samples, |s| s.embedding_condition.len())?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.intended_category.to_string()).or_default() += 1;
    }
    let header = json!({
        "count": samples.len(),
        "data_dim": dim,
        "embed_dim": embed_dim,
        "category_counts": counts,
        "meta": meta,
    });
    let blocks = vec![
        f32_block(samples.iter().flat_map(|s| s.x.iter().copied())),
        f32_block(samples.iter().flat_map(|s| s.embedding_condition.iter().copied())),
        u32_block(samples.iter().map(|s| s.intended_category as u32)),
        u32_block(samples.iter().map(|s| s.prediction as u32)),
        u32_block(samples.iter().map(|s| s.screen_attempts as u32)),
        u32_block(samples.iter().map(|s| s.screen_accepted as u32)),
    ];
    container::write(path, MAGIC, VERSION, header, &blocks)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleDump, GenerateError> {
    let (header, payload) = container::read(path, MAGIC, "sample dump", VERSION)?;
    let field = |k: &str| {
        header[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| GenerateError::Dump(format!("header lacks {k}")))
    };
    let (n, d, e) = (field("count")?, field("data_dim")?, field("embed_dim")?);
    let mut cur = Cursor::new(&payload);
    let x = cur.f32s(n * d)?;
    let c = cur.f32s(n * e)?;
    let intended = cur.u32s(n)?;
    let prediction = cur.u32s(n)?;
    let attempts = cur.u32s(n)?;
    let accepted = cur.u32s(n)?;
    cur.finish()?;
    let samples = (0..n)
        .map(|i| GeneratedSample {
            x: x[i * d..(i + 1) * d].to_vec(),
            intended_category: intended[i] as usize,
            prediction: prediction[i] as usize,
            is_risky: intended[i] != prediction[i],
            embedding_condition: c[i * e..(i + 1) * e].to_vec(),
            screen_attempts: attempts[i] as usize,
            screen_accepted: accepted[i] != 0,
            trace: None,
        })
        .collect();
    Ok(SampleDump {
        meta: header["meta"].clone(),
        samples,
    })
}

#[derive(Serialize)]
struct IndexRow {
    sample_id: usize,
    intended_category: usize,
    prediction: usize,
    is_risky: bool,
    screen_attempts: usize,
    screen_accepted: bool,
}

pub fn write_sample_index(path: &Path, samples: &[GeneratedSample]) -> Result<(), GenerateError> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in samples.iter().enumerate() {
        w.serialize(IndexRow {
            sample_id: i,
            intended_category: s.intended_category,
            prediction: s.prediction,
            is_risky: s.is_risky,
            screen_attempts: s.screen_attempts,
            screen_accepted: s.screen_accepted,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(y: usize, p: usize) -> GeneratedSample {
        GeneratedSample {
            x: vec![0.5, -1.25, y as f64],
            intended_category: y,
            prediction: p,
            is_risky: y != p,
            embedding_condition: vec![0.25, 0.75],
            screen_attempts: 3,
            screen_accepted: p != 2,
            trace: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let samples = vec![sample(0, 1), sample(2, 2), sample(1, 1)];
        write_samples(&path, &samples, json!({"seed": 7})).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.meta["seed"], 7);

        let csv_path = dir.path().join("s.csv");
        write_sample_index(&csv_path, &samples).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_id,intended_category,prediction,is_risky,screen_attempts,screen_accepted"
        );
        assert_eq!(lines.next().unwrap(), "0,0,1,true,3,true");
    }

    #[test]
    fn truncated_dump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_samples(&path, &[sample(0, 0)], Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_samples(&path).is_err());
    }

    #[test]
    fn ragged_samples_are_rejected() {
        let mut b = sample(1, 1);
        b.x.push(0.0);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_samples(&dir.path().join("s.bin"), &[sample(0, 0), b], Value::Null),
            Err(GenerateError::Dump(_))
        ));
    }
}
