use serde_json::{json, Value};

use super::sample::{Dataset, Label, Modality};

/// Line-delimited summary records for one split: counts and widths, length
/// statistics per modality, and a label histogram.
pub fn summary_records(split: &str, ds: &Dataset) -> Vec<Value> {
    let mut out = vec![json!({
        "record": "split",
        "split": split,
        "task": ds.task.name(),
        "count": ds.len(),
        "dims": ds.dims,
        "content_hash": ds.content_hash(),
    })];
    for m in Modality::ALL {
        let lens: Vec<usize> = ds.samples().iter().map(|s| s.len(m)).collect();
        let (min, max, mean) = if lens.is_empty() {
            (0, 0, 0.0)
        } else {
            let sum: usize = lens.iter().sum();
            (
                *lens.iter().min().expect("nonempty"),
                *lens.iter().max().expect("nonempty"),
                sum as f64 / lens.len() as f64,
            )
        };
        out.push(json!({
            "record": "lengths",
            "split": split,
            "modality": m.name(),
            "min": min,
            "max": max,
            "mean": mean,
        }));
    }
    let histogram = match ds.task {
        crate::data::Task::Sentiment => {
            // seven integer bins -3..=3 of the rounded score
            let mut bins = [0usize; 7];
            for s in ds.samples() {
                if let Label::Sentiment(y) = s.label {
                    bins[(y.clamp(-3.0, 3.0).round() + 3.0) as usize] += 1;
                }
            }
            json!({ "bins": [-3, -2, -1, 0, 1, 2, 3], "counts": bins })
        }
        crate::data::Task::Multilabel4 => {
            let mut pos = [0usize; 4];
            for s in ds.samples() {
                if let Label::Multilabel(f) = s.label {
                    for (p, &on) in pos.iter_mut().zip(&f) {
                        *p += usize::from(on);
                    }
                }
            }
            json!({ "classes": ["neutral", "happy", "sad", "angry"], "positives": pos })
        }
    };
    out.push(json!({ "record": "labels", "split": split, "histogram": histogram }));
    out
}

pub fn to_jsonl(records: &[Value]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}
