//! Classification accuracy of the task head on event encodings.

use crate::config::PipelineConfig;
use crate::data::EventTestSet;
use crate::error::{Error, Result};
use crate::nets::{encode_event, encode_image, task_head, Bind};
use evbridge_autodiff::{Graph, ParamStore, Tensor};
use evbridge_core::{EventHistogram, ScalarField};

const CHUNK: usize = 50;

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0
        })
        .collect()
}

/// Predicted classes of event histograms through the event encoder.
pub fn predict_events(
    cfg: &PipelineConfig,
    gen: &ParamStore,
    events: &[EventHistogram],
) -> Result<Vec<usize>> {
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(events.len());
    for chunk in events.chunks(CHUNK) {
        let data: Vec<f64> = chunk
            .iter()
            .flat_map(|h| h.pos().iter().chain(h.neg()).copied())
            .collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[chunk.len(), 2, s, s], data)?);
        let z = encode_event(&g, Bind::frozen(gen), g.scale(x, cfg.event_input_scale))?;
        out.extend(argmax_rows(&g.tensor(task_head(
            &g,
            Bind::frozen(gen),
            cfg,
            z,
        )?)));
    }
    Ok(out)
}

/// Predicted classes of intensity images through the image encoder.
pub fn predict_images(
    cfg: &PipelineConfig,
    gen: &ParamStore,
    images: &[ScalarField],
) -> Result<Vec<usize>> {
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let data: Vec<f64> = chunk
            .iter()
            .flat_map(|f| f.data().iter().copied())
            .collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[chunk.len(), 1, s, s], data)?);
        let z = encode_image(&g, Bind::frozen(gen), x)?;
        out.extend(argmax_rows(&g.tensor(task_head(
            &g,
            Bind::frozen(gen),
            cfg,
            z,
        )?)));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Accuracy of the task head on the event encoder's features of the
/// held-out set.
pub fn evaluate(cfg: &PipelineConfig, gen: &ParamStore, test: &EventTestSet) -> Result<f64> {
    accuracy(&predict_events(cfg, gen, &test.events)?, &test.labels)
}
