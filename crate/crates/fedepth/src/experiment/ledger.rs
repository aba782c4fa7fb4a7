//! The run ledger: an append-only stream of JSON records, one per line.
//!
//! A ledger is the durable truth about a run. Every record carries the
//! config hash so lines stay self-describing when files are moved or
//! concatenated, and nothing in it depends on wall-clock time, so a rerun
//! with the same settings reproduces the file byte for byte.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::federation::{EpochRecord, RoundRecord, ValidationReport};
use crate::metrics::CostReport;

use super::config::ExperimentConfig;

/// First line of every ledger: what ran and over how much data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub config_hash: String,
    pub scenario: Scenario,
    pub config: ExperimentConfig,
    /// Bytes one participant moves per direction per round.
    pub model_bytes: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// Shard sizes by participant id; a single entry for the pooled run.
    pub participant_counts: Vec<usize>,
}

/// One federated round, stamped with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub config_hash: String,
    #[serde(flatten)]
    pub round: RoundRecord,
}

/// One pooled-baseline epoch, stamped with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub config_hash: String,
    #[serde(flatten)]
    pub epoch: EpochRecord,
}

/// Closing record of a completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub config_hash: String,
    /// Totals with the step fields filled in from the records above.
    pub cost: CostReport,
    pub best_self_loss: Option<f64>,
    /// Evaluation of the final model, metrics included when reference
    /// depth exists.
    pub final_validation: Option<ValidationReport>,
    /// Rounds for federated runs, epochs for the pooled baseline.
    pub units_completed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerRecord {
    Header(HeaderRecord),
    Round(RoundEntry),
    Epoch(EpochEntry),
    Summary(SummaryRecord),
}

/// A parsed ledger plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub path: PathBuf,
    pub records: Vec<LedgerRecord>,
}

impl RunLedger {
    /// Parses a record stream and checks its structural invariants.
    pub fn read(path: &Path) -> Result<RunLedger> {
        let file = File::open(path)
            .map_err(|e| Error::Ledger(format!("cannot open {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (number, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LedgerRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Ledger(format!("{} line {}: {e}", path.display(), number + 1))
            })?;
            records.push(record);
        }
        let ledger = RunLedger {
            path: path.to_path_buf(),
            records,
        };
        ledger.validate()?;
        Ok(ledger)
    }

    /// Header first, one hash throughout, unit indices strictly
    /// increasing, at most one summary and only at the end.
    pub fn validate(&self) -> Result<()> {
        let Some(LedgerRecord::Header(header)) = self.records.first() else {
            return Err(Error::Ledger(format!(
                "{} does not start with a header record",
                self.path.display()
            )));
        };
        let hash = &header.config_hash;
        let mut last_unit: Option<u64> = None;
        for (i, record) in self.records.iter().enumerate() {
            let (record_hash, unit) = match record {
                LedgerRecord::Header(h) => {
                    if i != 0 {
                        return Err(Error::Ledger("header record appears twice".into()));
                    }
                    (&h.config_hash, None)
                }
                LedgerRecord::Round(r) => (&r.config_hash, Some(r.round.round)),
                LedgerRecord::Epoch(e) => (&e.config_hash, Some(e.epoch.epoch)),
                LedgerRecord::Summary(s) => {
                    if i + 1 != self.records.len() {
                        return Err(Error::Ledger("records found after the summary".into()));
                    }
                    (&s.config_hash, None)
                }
            };
            if record_hash != hash {
                return Err(Error::Ledger(format!(
                    "record {} carries hash {} but the header says {}",
                    i, record_hash, hash
                )));
            }
            if let Some(u) = unit {
                if last_unit.is_some_and(|prev| u <= prev) {
                    return Err(Error::Ledger(format!(
                        "unit index {u} does not increase over {}",
                        last_unit.unwrap()
                    )));
                }
                last_unit = Some(u);
            }
        }
        Ok(())
    }

    pub fn header(&self) -> &HeaderRecord {
        match self.records.first() {
            Some(LedgerRecord::Header(h)) => h,
            _ => unreachable!("validated ledgers start with a header"),
        }
    }

    pub fn rounds(&self) -> impl Iterator<Item = &RoundRecord> {
        self.records.iter().filter_map(|r| match r {
            LedgerRecord::Round(entry) => Some(&entry.round),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LedgerRecord::Epoch(entry) => Some(&entry.epoch),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&SummaryRecord> {
        match self.records.last() {
            Some(LedgerRecord::Summary(s)) => Some(s),
            _ => None,
        }
    }

    /// Index, cumulative steps, and best loss of the last progress
    /// record, if any; what a resumed run continues from.
    pub fn last_unit(&self) -> Option<(u64, u64, Option<f64>)> {
        self.records.iter().rev().find_map(|r| match r {
            LedgerRecord::Round(e) => Some((
                e.round.round,
                e.round.cumulative_steps,
                e.round.best_self_loss,
            )),
            LedgerRecord::Epoch(e) => Some((
                e.epoch.epoch,
                e.epoch.cumulative_steps,
                e.epoch.best_self_loss,
            )),
            _ => None,
        })
    }
}

/// Writes records as they happen; every line is flushed so a crash loses
/// at most the record being written.
pub struct LedgerWriter {
    file: File,
}

impl LedgerWriter {
    /// Starts a fresh ledger, discarding any previous one.
    pub fn create(path: &Path) -> Result<LedgerWriter> {
        let file = File::create(path)
            .map_err(|e| Error::Ledger(format!("cannot create {}: {e}", path.display())))?;
        Ok(LedgerWriter { file })
    }

    /// Continues an interrupted ledger.
    pub fn append(path: &Path) -> Result<LedgerWriter> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::Ledger(format!("cannot append to {}: {e}", path.display())))?;
        Ok(LedgerWriter { file })
    }

    pub fn write(&mut self, record: &LedgerRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Ledger(format!("record does not serialize: {e}")))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::config_hash;

    fn round_entry(hash: &str, round: u64) -> LedgerRecord {
        LedgerRecord::Round(RoundEntry {
            config_hash: hash.to_string(),
            round: RoundRecord {
                round,
                selected: vec![0],
                steps: vec![(0, 3)],
                train_loss: vec![(0, 0.5)],
                local_val_loss: vec![],
                failures: vec![],
                aborted: false,
                validation: None,
                best_self_loss: None,
                cumulative_w_max: 10,
                cumulative_w_min: 5.0,
                cumulative_steps: 3 * (round + 1),
            },
        })
    }

    fn header(hash: &str) -> LedgerRecord {
        LedgerRecord::Header(HeaderRecord {
            config_hash: hash.to_string(),
            scenario: Scenario::FtIid,
            config: ExperimentConfig::default(),
            model_bytes: 5,
            train_samples: 8,
            validation_samples: 2,
            participant_counts: vec![4, 4],
        })
    }

    #[test]
    fn records_survive_the_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let hash = config_hash(&ExperimentConfig::default());
        let records = vec![header(&hash), round_entry(&hash, 0), round_entry(&hash, 1)];
        let mut writer = LedgerWriter::create(&path).unwrap();
        for r in &records {
            writer.write(r).unwrap();
        }
        drop(writer);
        let ledger = RunLedger::read(&path).unwrap();
        assert_eq!(ledger.records, records);
        assert_eq!(ledger.rounds().count(), 2);
        assert_eq!(ledger.last_unit(), Some((1, 6, None)));
        assert!(ledger.summary().is_none());
    }

    #[test]
    fn a_ledger_must_start_with_its_header() {
        let ledger = RunLedger {
            path: PathBuf::from("x"),
            records: vec![round_entry("abc", 0)],
        };
        assert!(matches!(ledger.validate(), Err(Error::Ledger(_))));
    }

    #[test]
    fn unit_indices_must_increase() {
        let hash = "abc";
        let ledger = RunLedger {
            path: PathBuf::from("x"),
            records: vec![header(hash), round_entry(hash, 1), round_entry(hash, 1)],
        };
        assert!(matches!(ledger.validate(), Err(Error::Ledger(_))));
    }

    #[test]
    fn foreign_hashes_are_rejected() {
        let ledger = RunLedger {
            path: PathBuf::from("x"),
            records: vec![header("abc"), round_entry("other", 0)],
        };
        assert!(matches!(ledger.validate(), Err(Error::Ledger(_))));
    }
}
