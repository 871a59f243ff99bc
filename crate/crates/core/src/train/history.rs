use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub wbce: f64,
    pub dice: f64,
    pub hinge: f64,
    pub boundary: f64,
    pub val_dice: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

const CSV_HEADER: &str = "epoch,loss,wbce,dice,hinge,boundary,val_dice,lr,seconds";

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_dice >= r.val_dice => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.epoch, r.loss, r.wbce, r.dice, r.hinge, r.boundary, r.val_dice, r.lr, r.seconds
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `history.csv` and `history.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [("history.csv", self.to_csv()), ("history.json", self.to_json()?)] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
