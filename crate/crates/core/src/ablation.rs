//! Four-way ablation over the skip-gate and bottleneck-attention flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::train::{train, Evaluation, TrainConfig};

/// Row labels and `(use_rfem, use_cagm)` flags, in table order.
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("Baseline", false, false),
    ("RFEM Only", true, false),
    ("CAGM Only", false, true),
    ("RFEM + CAGM", true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub use_rfem: bool,
    pub use_cagm: bool,
    pub params: usize,
    pub best_epoch: usize,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<14}{:>8}{:>12}{:>11}{:>8}{:>12}\n",
            "Configuration", "mIoU", "Dice Score", "Precision", "Recall", "Params"
        );
        for r in &self.rows {
            let m = &r.evaluation.report;
            s += &format!(
                "{:<14}{:>8.4}{:>12.4}{:>11.4}{:>8.4}{:>12}\n",
                r.configuration, m.miou, m.dice, m.precision, m.recall, r.params
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("configuration,use_rfem,use_cagm,params,mIoU,dice,precision,recall\n");
        for r in &self.rows {
            let m = &r.evaluation.report;
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.configuration,
                r.use_rfem,
                r.use_cagm,
                r.params,
                m.miou,
                m.dice,
                m.precision,
                m.recall
            );
        }
        s
    }
}

/// Train and evaluate every variant of `base` with the same seed, data and
/// schedule. Each variant's artifacts go to `out/<index>` when given.
pub fn ablate(
    base: &ModelConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (i, (name, rfem, cagm)) in VARIANTS.into_iter().enumerate() {
        let mut model = Model::new(base.clone().with_flags(rfem, cagm))?;
        let dir = out.map(|d| d.join(format!("{i}_{}", slug(name))));
        let outcome = train(&mut model, train_set, val_set, config, dir.as_deref())?;
        rows.push(AblationRow {
            configuration: name.to_string(),
            use_rfem: rfem,
            use_cagm: cagm,
            params: model.num_params(),
            best_epoch: outcome.best_epoch,
            evaluation: outcome.best,
        });
    }
    Ok(AblationTable { rows })
}

fn slug(name: &str) -> String {
    name.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}
