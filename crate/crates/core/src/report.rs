//! Evaluation of trained models over client splits and the metrics.csv /
//! summary.json outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};
use crate::labels::LabelMap;
use crate::metrics::{class_metrics, postprocess, ClassMetrics};
use crate::model::PixelGrid;
use crate::synthdata::Sample;

pub const CSV_HEADER: &str = "run,round,client,class,dice,hd,jc,sen,spe,rve";

/// Metrics of one class on one client, averaged over that client's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub round: usize,
    pub client: usize,
    pub class: u8,
    pub dice: f64,
    pub hd: f64,
    pub jc: f64,
    pub sen: f64,
    pub spe: f64,
    pub rve: f64,
}

/// Evaluates `predict` on `samples` for `classes`, against labels with
/// provenance masking removed.
pub fn evaluate_client<F>(
    run: &str,
    round: usize,
    client: usize,
    samples: &[Sample],
    classes: &[u8],
    post: bool,
    mut predict: F,
) -> Result<Vec<MetricRow>>
where
    F: FnMut(&PixelGrid) -> Result<LabelMap>,
{
    if samples.is_empty() {
        return Err(UfpsError::Config(format!("client {client} has no evaluation samples")));
    }
    let mut sums = vec![[0.0f64; 6]; classes.len()];
    for s in samples {
        let mut pred = predict(&s.image)?;
        if post {
            pred = postprocess(&pred);
        }
        let gt = s.labels.unmasked();
        for (acc, &c) in sums.iter_mut().zip(classes) {
            let m = class_metrics(pred.classes(), gt.classes(), gt.width(), gt.height(), c);
            for (a, v) in acc.iter_mut().zip([m.dice, m.hd, m.jc, m.sen, m.spe, m.rve]) {
                *a += v;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(classes
        .iter()
        .zip(sums)
        .map(|(&class, s)| MetricRow {
            run: run.to_string(),
            round,
            client,
            class,
            dice: s[0] / n,
            hd: s[1] / n,
            jc: s[2] / n,
            sen: s[3] / n,
            spe: s[4] / n,
            rve: s[5] / n,
        })
        .collect())
}

/// Mean Dice over images and classes.
pub fn mean_dice<F>(samples: &[Sample], classes: &[u8], mut predict: F) -> Result<f64>
where
    F: FnMut(&PixelGrid) -> Result<Vec<u8>>,
{
    let mut total = 0.0;
    for s in samples {
        let pred = predict(&s.image)?;
        for &c in classes {
            let conf = crate::metrics::confusion_classes(&pred, s.labels.classes(), c);
            total += crate::metrics::dice(&conf);
        }
    }
    Ok(total / (samples.len() * classes.len()) as f64)
}

fn csv_error(path: &Path, e: csv::Error) -> UfpsError {
    UfpsError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(CSV_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| UfpsError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(UfpsError::Format {
            path: path.to_path_buf(),
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Means of every metric over a group of rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dice: f64,
    pub hd: f64,
    pub jc: f64,
    pub sen: f64,
    pub spe: f64,
    pub rve: f64,
}

impl MetricMeans {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> MetricMeans {
        let mut m = MetricMeans::default();
        let mut n = 0usize;
        for r in rows {
            m.dice += r.dice;
            m.hd += r.hd;
            m.jc += r.jc;
            m.sen += r.sen;
            m.spe += r.spe;
            m.rve += r.rve;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            m.dice /= k;
            m.hd /= k;
            m.jc /= k;
            m.sen /= k;
            m.spe /= k;
            m.rve /= k;
        }
        m
    }
}

impl From<ClassMetrics> for MetricMeans {
    fn from(m: ClassMetrics) -> Self {
        MetricMeans {
            dice: m.dice,
            hd: m.hd,
            jc: m.jc,
            sen: m.sen,
            spe: m.spe,
            rve: m.rve,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub clients: BTreeMap<usize, MetricMeans>,
    pub overall: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: BTreeMap<String, RunSummary>,
}

/// Per-client and overall means for every run id in `rows`.
pub fn summarize(rows: &[MetricRow]) -> Summary {
    let mut by_run: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        by_run.entry(r.run.clone()).or_default().push(r);
    }
    let runs = by_run
        .into_iter()
        .map(|(run, rows)| {
            let mut by_client: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
            for r in &rows {
                by_client.entry(r.client).or_default().push(r);
            }
            let clients = by_client
                .into_iter()
                .map(|(c, rs)| (c, MetricMeans::of(rs)))
                .collect();
            (
                run,
                RunSummary {
                    clients,
                    overall: MetricMeans::of(rows),
                },
            )
        })
        .collect();
    Summary { runs }
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let file = File::create(path).map_err(|e| UfpsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, summary).map_err(|e| UfpsError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(|e| UfpsError::io(path, e))?;
    w.flush().map_err(|e| UfpsError::io(path, e))
}
