//! Per-epoch training records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, HarnessError, Result};

pub const HEADER: &str = "epoch,step,lr,feat_weight_multiplier,feat_total,mutual,total,ce_vit,ce_agent,\
train_top1_vit,train_top1_agent,val_top1_vit,val_top1_agent,zero_norm_features,feat_per_layer";

const COLUMNS: usize = 15;

/// One metrics row. Loss and training-accuracy fields are epoch means and
/// are absent on the initial validation row; fields of a network that
/// the scheme does not train are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub feat_weight_multiplier: f64,
    pub feat_total: Option<f64>,
    pub mutual: Option<f64>,
    pub total: Option<f64>,
    pub ce_vit: Option<f64>,
    pub ce_agent: Option<f64>,
    pub train_top1_vit: Option<f64>,
    pub train_top1_agent: Option<f64>,
    pub val_top1_vit: Option<f64>,
    pub val_top1_agent: Option<f64>,
    pub zero_norm_features: usize,
    /// `(1-based layer, mean term)`.
    pub feat_per_layer: Vec<(usize, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainRecord {
    pub fn to_row(&self) -> String {
        let layers: Vec<String> = self.feat_per_layer.iter().map(|(l, v)| format!("{l}:{v}")).collect();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.feat_weight_multiplier,
            opt(self.feat_total),
            opt(self.mutual),
            opt(self.total),
            opt(self.ce_vit),
            opt(self.ce_agent),
            opt(self.train_top1_vit),
            opt(self.train_top1_agent),
            opt(self.val_top1_vit),
            opt(self.val_top1_agent),
            self.zero_norm_features,
            layers.join(";")
        );
        s
    }

    pub fn parse_row(line: &str, line_no: usize) -> Result<Self> {
        let bad = |what: &str| HarnessError::Format(format!("line {line_no}: {what}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != COLUMNS {
            return Err(bad(&format!("{} fields, expected {COLUMNS}", f.len())));
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(&format!("column {} is not an integer: {:?}", i + 1, f[i])));
        let float = |i: usize| f[i].parse::<f64>().map_err(|_| bad(&format!("column {} is not a number: {:?}", i + 1, f[i])));
        let maybe = |i: usize| if f[i].is_empty() { Ok(None) } else { float(i).map(Some) };
        let feat_per_layer = if f[14].is_empty() {
            Vec::new()
        } else {
            f[14]
                .split(';')
                .map(|kv| {
                    let (l, v) = kv.split_once(':').ok_or_else(|| bad(&format!("layer term {kv:?}")))?;
                    Ok((l.parse().map_err(|_| bad(&format!("layer {l:?}")))?, v.parse().map_err(|_| bad(&format!("value {v:?}")))?))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self {
            epoch: int(0)?,
            step: int(1)?,
            lr: float(2)?,
            feat_weight_multiplier: float(3)?,
            feat_total: maybe(4)?,
            mutual: maybe(5)?,
            total: maybe(6)?,
            ce_vit: maybe(7)?,
            ce_agent: maybe(8)?,
            train_top1_vit: maybe(9)?,
            train_top1_agent: maybe(10)?,
            val_top1_vit: maybe(11)?,
            val_top1_agent: maybe(12)?,
            zero_norm_features: int(13)?,
            feat_per_layer,
        })
    }
}

/// Parses a whole metrics file and checks the header and that
/// `(epoch, step)` keys increase.
pub fn parse_metrics(text: &str) -> Result<Vec<TrainRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        Some(h) => return Err(HarnessError::Format(format!("line 1: unexpected header {h:?}"))),
        None => return Err(HarnessError::Format("empty metrics file".into())),
    }
    let mut out: Vec<TrainRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let r = TrainRecord::parse_row(line, i + 2)?;
        if let Some(prev) = out.last() {
            if (r.epoch, r.step) <= (prev.epoch, prev.step) {
                return Err(HarnessError::Format(format!("line {}: (epoch, step) does not increase", i + 2)));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_metrics(&text).map_err(|e| match e {
        HarnessError::Format(m) => HarnessError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let r = TrainRecord {
            epoch: 3,
            step: 120,
            lr: 1.5e-4,
            feat_weight_multiplier: 0.9,
            feat_total: Some(1.25),
            mutual: Some(0.1),
            total: Some(2.0),
            ce_vit: Some(1.0),
            ce_agent: None,
            train_top1_vit: Some(40.0),
            train_top1_agent: None,
            val_top1_vit: Some(38.5),
            val_top1_agent: None,
            zero_norm_features: 0,
            feat_per_layer: vec![(1, 0.5), (3, 0.75)],
        };
        assert_eq!(TrainRecord::parse_row(&r.to_row(), 2).unwrap(), r);
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let text = format!("{HEADER}\n0,0,0.001,1,,,,,,,,10,,0,\n1,5,x,1,,,,,,,,10,,0,\n");
        let err = parse_metrics(&text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let text = format!("{HEADER}\n1,5,0.001,1,,,,,,,,10,,0,\n1,5,0.001,1,,,,,,,,10,,0,\n");
        assert!(parse_metrics(&text).unwrap_err().to_string().contains("line 3"));
    }
}
