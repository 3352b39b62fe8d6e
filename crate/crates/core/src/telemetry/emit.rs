//! CSV/JSON writers and readers for telemetry files.
//!
//! `steps.csv`: run_id, iteration, step, component, pre_norm, post_norm, loss, lr
//!
//! `deltas.csv`: run_id, iteration, reference, layer, component, rmsd, cosine,
//! layer_max_rmsd, layer_min_cosine

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{ComponentDelta, DeltaRecord, LayerDelta, Reference, StepRecord};
use crate::error::{Error, Result};
use crate::model::{ComponentId, Scope};
use crate::optim::NormPair;

pub const STEPS_HEADER: [&str; 8] = [
    "run_id",
    "iteration",
    "step",
    "component",
    "pre_norm",
    "post_norm",
    "loss",
    "lr",
];

pub const DELTAS_HEADER: [&str; 9] = [
    "run_id",
    "iteration",
    "reference",
    "layer",
    "component",
    "rmsd",
    "cosine",
    "layer_max_rmsd",
    "layer_min_cosine",
];

#[derive(Serialize, Deserialize)]
struct StepRow {
    run_id: String,
    iteration: i64,
    step: u64,
    component: String,
    pre_norm: f64,
    post_norm: f64,
    loss: f64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
struct DeltaRow {
    run_id: String,
    iteration: i64,
    reference: String,
    layer: String,
    component: String,
    rmsd: f64,
    cosine: f64,
    layer_max_rmsd: f64,
    layer_min_cosine: f64,
}

fn csv_writer<W: Write>(out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

pub fn write_steps<W: Write>(out: W, records: &[StepRecord]) -> Result<()> {
    let mut w = csv_writer(out, &STEPS_HEADER)?;
    for r in records {
        for (id, n) in &r.norms {
            w.serialize(StepRow {
                run_id: r.run_id.clone(),
                iteration: r.iteration,
                step: r.step,
                component: id.to_string(),
                pre_norm: n.pre,
                post_norm: n.post,
                loss: r.loss,
                lr: r.lr,
            })?;
        }
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

pub fn write_deltas<W: Write>(out: W, records: &[DeltaRecord]) -> Result<()> {
    let mut w = csv_writer(out, &DELTAS_HEADER)?;
    for r in records {
        for l in &r.layers {
            for c in &l.components {
                w.serialize(DeltaRow {
                    run_id: r.run_id.clone(),
                    iteration: r.iteration,
                    reference: r.reference.to_string(),
                    layer: l.layer.to_string(),
                    component: c.component.to_string(),
                    rmsd: c.rmsd,
                    cosine: c.cosine,
                    layer_max_rmsd: l.max_rmsd,
                    layer_min_cosine: l.min_cosine,
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

fn csv_reader<R: Read>(input: R, header: &[&str]) -> Result<csv::Reader<R>> {
    let mut r = csv::Reader::from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Serde(format!("unexpected CSV header {found:?}")));
    }
    Ok(r)
}

/// Parses `steps.csv` back into records; consecutive rows sharing
/// (run_id, iteration, step) form one record.
pub fn read_steps<R: Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut reader = csv_reader(input, &STEPS_HEADER)?;
    let mut out: Vec<StepRecord> = Vec::new();
    for row in reader.deserialize() {
        let row: StepRow = row?;
        let same = out.last().is_some_and(|r| {
            r.run_id == row.run_id && r.iteration == row.iteration && r.step == row.step
        });
        if !same {
            out.push(StepRecord {
                run_id: row.run_id.clone(),
                iteration: row.iteration,
                step: row.step,
                loss: row.loss,
                lr: row.lr,
                norms: BTreeMap::new(),
            });
        }
        out.last_mut().unwrap().norms.insert(
            ComponentId::new(row.component),
            NormPair {
                pre: row.pre_norm,
                post: row.post_norm,
            },
        );
    }
    Ok(out)
}

pub fn read_deltas<R: Read>(input: R) -> Result<Vec<DeltaRecord>> {
    let mut reader = csv_reader(input, &DELTAS_HEADER)?;
    let mut out: Vec<DeltaRecord> = Vec::new();
    for row in reader.deserialize() {
        let row: DeltaRow = row?;
        let reference = Reference::parse(&row.reference)
            .ok_or_else(|| Error::Serde(format!("unknown reference {}", row.reference)))?;
        let layer = Scope::parse(&row.layer)
            .ok_or_else(|| Error::Serde(format!("unknown layer {}", row.layer)))?;
        let same = out.last().is_some_and(|r| {
            r.run_id == row.run_id && r.iteration == row.iteration && r.reference == reference
        });
        if !same {
            out.push(DeltaRecord {
                run_id: row.run_id.clone(),
                iteration: row.iteration,
                reference,
                layers: Vec::new(),
            });
        }
        let rec = out.last_mut().unwrap();
        if rec.layers.last().map(|l| l.layer) != Some(layer) {
            rec.layers.push(LayerDelta {
                layer,
                max_rmsd: row.layer_max_rmsd,
                min_cosine: row.layer_min_cosine,
                components: Vec::new(),
            });
        }
        rec.layers.last_mut().unwrap().components.push(ComponentDelta {
            component: ComponentId::new(row.component),
            rmsd: row.rmsd,
            cosine: row.cosine,
        });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_steps_file(path: &Path, records: &[StepRecord]) -> Result<()> {
    write_steps(create(path)?, records).map_err(|e| with_path(e, path))
}

pub fn write_deltas_file(path: &Path, records: &[DeltaRecord]) -> Result<()> {
    write_deltas(create(path)?, records).map_err(|e| with_path(e, path))
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text_file(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Serde(msg) => Error::io(path, std::io::Error::other(msg)),
        other => other,
    }
}

/// Deterministic merge order for records from many runs.
pub fn sort_steps(records: &mut [StepRecord]) {
    records.sort_by(|a, b| (&a.run_id, a.step).cmp(&(&b.run_id, b.step)));
}

pub fn sort_deltas(records: &mut [DeltaRecord]) {
    records.sort_by(|a, b| {
        (&a.run_id, a.iteration, a.reference).cmp(&(&b.run_id, b.iteration, b.reference))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(run: &str, s: u64) -> StepRecord {
        let mut norms = BTreeMap::new();
        norms.insert(ComponentId::new("layer.1.ffn.w1.weight"), NormPair { pre: 0.3, post: 0.05 });
        norms.insert(ComponentId::new("head.out.bias"), NormPair { pre: 1e-7, post: 1e-7 });
        StepRecord {
            run_id: run.into(),
            iteration: -1,
            step: s,
            loss: 0.693_147_180_559_945_3,
            lr: 1.0 / 3.0,
            norms,
        }
    }

    #[test]
    fn empty_steps_is_header_only() {
        let mut buf = Vec::new();
        write_steps(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "run_id,iteration,step,component,pre_norm,post_norm,loss,lr\n"
        );
    }

    #[test]
    fn one_record_has_all_columns() {
        let mut rec = step("r0", 3);
        rec.norms.remove("head.out.bias");
        let mut buf = Vec::new();
        write_steps(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), STEPS_HEADER.len());
        assert!(lines[1].starts_with("r0,-1,3,layer.1.ffn.w1.weight,0.3,0.05,"));
    }

    #[test]
    fn steps_round_trip() {
        let records = vec![step("a", 0), step("a", 1), step("b", 0)];
        let mut buf = Vec::new();
        write_steps(&mut buf, &records).unwrap();
        assert_eq!(read_steps(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn deltas_round_trip() {
        let layer = |s: Scope, r: f64| LayerDelta {
            layer: s,
            max_rmsd: r,
            min_cosine: 0.25,
            components: vec![
                ComponentDelta {
                    component: ComponentId::new(format!("{s}.x.weight")),
                    rmsd: r,
                    cosine: 0.25,
                },
                ComponentDelta {
                    component: ComponentId::new(format!("{s}.x.bias")),
                    rmsd: r / 7.0,
                    cosine: 1.0,
                },
            ],
        };
        let records = vec![
            DeltaRecord {
                run_id: "r".into(),
                iteration: 0,
                reference: Reference::Pretrained,
                layers: vec![layer(Scope::Embed, 0.0), layer(Scope::Layer(2), 0.1), layer(Scope::Head, 2.5)],
            },
            DeltaRecord {
                run_id: "r".into(),
                iteration: 0,
                reference: Reference::PreviousIteration,
                layers: vec![layer(Scope::Layer(1), 1e-9)],
            },
        ];
        let mut buf = Vec::new();
        write_deltas(&mut buf, &records).unwrap();
        assert_eq!(read_deltas(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_steps("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn io_error_carries_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = write_steps_file(&blocker.join("steps.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
