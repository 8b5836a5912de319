#![allow(dead_code)]

use std::path::Path;

use ri::RunConfig;

/// A configuration small enough to train in well under a second per epoch,
/// with an RI rate high enough that every split sees positives.
pub fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    let settings = [
        ("seed", "3"),
        ("series", "12"),
        ("frames", "16"),
        ("source_size", "12"),
        ("ri_rate", "2"),
        ("frame_size", "8"),
        ("widths", "4"),
        ("strides", "2"),
        ("hidden_channels", "2"),
        ("head_width", "4"),
        ("history", "2"),
        ("dropout", "0.5"),
        ("epochs", "3"),
        ("validation_interval", "1"),
        ("validation_fraction", "0.25"),
    ];
    for (k, v) in settings {
        cfg.set(k, v).unwrap();
    }
    cfg.dataset = dir.join("data.ritc");
    cfg.checkpoint = dir.join("model.rif");
    cfg.report = dir.join("report.txt");
    cfg.masks = dir.join("masks.tsv");
    cfg
}

pub fn metric(text: &str, name: &str) -> String {
    ri::report::read_metrics(text)
        .remove(name)
        .unwrap_or_else(|| panic!("metric `{name}` missing from\n{text}"))
}

pub fn metric_f64(text: &str, name: &str) -> f64 {
    metric(text, name).parse().unwrap()
}
