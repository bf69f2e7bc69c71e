//! CSV writers for run metrics, uncertainty records, mixup batches and
//! embeddings.
//!
//! Metrics use one long format, `round,step,split,metric,value`; `step` is
//! empty for per-round rows.

use std::fs::File;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixup::MixedBatch;
use crate::model::Model;
use crate::training::{PretrainMetrics, RunMetrics};
use crate::uncertainty::UncertaintyRecord;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: "csv",
            detail: format!("{}: {other:?}", path.display()),
        },
    }
}

struct Sink<'a> {
    path: &'a Path,
    w: csv::Writer<File>,
}

impl<'a> Sink<'a> {
    fn create(path: &'a Path) -> Result<Sink<'a>> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Sink {
            path,
            w: csv::Writer::from_writer(file),
        })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(|e| csv_error(self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(self.path, e))
    }
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn metric_row(sink: &mut Sink, round: usize, step: Option<usize>, split: &str, metric: &str, value: f64) -> Result<()> {
    let step = step.map(|s| s.to_string()).unwrap_or_default();
    sink.row([round.to_string(), step, split.to_string(), metric.to_string(), num(value)])
}

const METRIC_HEADER: [&str; 5] = ["round", "step", "split", "metric", "value"];

pub fn write_run_metrics(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut sink = Sink::create(path)?;
    sink.row(METRIC_HEADER)?;
    metric_row(&mut sink, 0, None, "initial_unlabeled", "accuracy", m.initial_unlabeled_accuracy)?;
    metric_row(&mut sink, 0, None, "initial_validation", "accuracy", m.initial_validation_accuracy)?;
    for s in &m.steps {
        for (metric, v) in [("loss_cos", s.cos), ("loss_mse", s.mse), ("loss_ent", s.ent), ("loss_total", s.total)] {
            metric_row(&mut sink, s.round, Some(s.step), "train", metric, v)?;
        }
    }
    for r in &m.rounds {
        metric_row(&mut sink, r.round, None, "unlabeled", "accuracy", r.unlabeled_accuracy)?;
        metric_row(&mut sink, r.round, None, "validation", "accuracy", r.validation_accuracy)?;
        metric_row(&mut sink, r.round, None, "selected", "count", r.selected_count as f64)?;
        let optional = [
            ("mean_entropy", r.mean_selected_entropy, "selected"),
            ("pseudo_accuracy", r.selected_pseudo_accuracy, "selected"),
            ("pseudo_accuracy", r.pool_pseudo_accuracy, "unlabeled"),
        ];
        for (metric, v, split) in optional {
            if let Some(v) = v {
                metric_row(&mut sink, r.round, None, split, metric, v)?;
            }
        }
        for (metric, v) in [
            ("loss_cos", r.loss_cos),
            ("loss_mse", r.loss_mse),
            ("loss_ent", r.loss_ent),
            ("loss_total", r.loss_total),
        ] {
            metric_row(&mut sink, r.round, None, "train_mean", metric, v)?;
        }
    }
    sink.finish()
}

pub fn write_pretrain_metrics(path: &Path, m: &PretrainMetrics) -> Result<()> {
    let mut sink = Sink::create(path)?;
    sink.row(METRIC_HEADER)?;
    for e in &m.epochs {
        metric_row(&mut sink, e.epoch, None, "source_train", "loss", e.train_loss)?;
        metric_row(&mut sink, e.epoch, None, "source_val", "accuracy", e.val_accuracy)?;
        metric_row(&mut sink, e.epoch, None, "source_val", "loss", e.val_loss)?;
    }
    sink.finish()
}

/// `round,index,predicted_class,entropy,p0..p{K-1}`.
pub fn write_uncertainty(path: &Path, rounds: &[Vec<UncertaintyRecord>], num_classes: usize) -> Result<()> {
    let mut sink = Sink::create(path)?;
    let mut header: Vec<String> = ["round", "index", "predicted_class", "entropy"].map(String::from).to_vec();
    header.extend((0..num_classes).map(|k| format!("p{k}")));
    sink.row(&header)?;
    for (round, records) in rounds.iter().enumerate() {
        for r in records {
            let mut row = vec![round.to_string(), r.index.to_string(), r.predicted_class.to_string(), num(r.entropy)];
            row.extend(r.soft_label.iter().map(|&p| num(p)));
            sink.row(&row)?;
        }
    }
    sink.finish()
}

/// `row,first,second,lambda,x0..,y0..` for one mixed batch.
pub fn write_mixup_batch(path: &Path, batch: &MixedBatch) -> Result<()> {
    let mut sink = Sink::create(path)?;
    let (d, k) = (batch.inputs.cols(), batch.targets.cols());
    let mut header: Vec<String> = ["row", "first", "second", "lambda"].map(String::from).to_vec();
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..k).map(|j| format!("y{j}")));
    sink.row(&header)?;
    for (i, (&(a, b), &lam)) in batch.pairs.iter().zip(&batch.lambdas).enumerate() {
        let mut row = vec![i.to_string(), a.to_string(), b.to_string(), num(lam)];
        row.extend(batch.inputs.row(i).iter().map(|&v| num(v)));
        row.extend(batch.targets.row(i).iter().map(|&v| num(v)));
        sink.row(&row)?;
    }
    sink.finish()
}

/// Encoder features (dropout off) for every row of every dataset, as
/// `index,domain,label,f0..`.
pub fn write_embeddings(path: &Path, model: &Model, datasets: &[&Dataset]) -> Result<()> {
    let mut sink = Sink::create(path)?;
    let h = model.config().bottleneck_dim;
    let mut header: Vec<String> = ["index", "domain", "label"].map(String::from).to_vec();
    header.extend((0..h).map(|j| format!("f{j}")));
    sink.row(&header)?;
    for ds in datasets {
        let f = model.encode(&ds.features, None)?;
        for i in 0..ds.len() {
            let mut row = vec![i.to_string(), ds.domain.as_str().to_string(), ds.labels[i].to_string()];
            row.extend(f.row(i).iter().map(|&v| num(v)));
            sink.row(&row)?;
        }
    }
    sink.finish()
}
