//! Assignment of training samples to participants.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng;

/// How training data is spread over machines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// All samples pooled on one trainer.
    Ct,
    /// Federated, samples spread evenly at random.
    FtIid,
    /// Federated, samples grouped by recording drive.
    FtNiid,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Ct => "ct",
            Scenario::FtIid => "ft-iid",
            Scenario::FtNiid => "ft-niid",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" => Ok(Scenario::Ct),
            "ft-iid" => Ok(Scenario::FtIid),
            "ft-niid" => Ok(Scenario::FtNiid),
            other => Err(Error::invalid(format!(
                "unknown scenario `{other}`, expected ct, ft-iid, or ft-niid"
            ))),
        }
    }
}

/// Which participant holds which sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scenario: Scenario,
    pub seed: u64,
    assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn build(scenario: Scenario, seed: u64, assignments: Vec<Vec<usize>>) -> Result<Self> {
        let plan = PartitionPlan {
            scenario,
            seed,
            assignments,
        };
        let total = plan.total_samples();
        plan.validate(total)?;
        Ok(plan)
    }

    /// Degenerate single-participant plan holding everything.
    pub fn centralized(sample_count: usize, seed: u64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::invalid("cannot plan over zero samples"));
        }
        PartitionPlan::build(Scenario::Ct, seed, vec![(0..sample_count).collect()])
    }

    pub fn participants(&self) -> usize {
        self.assignments.len()
    }

    pub fn samples_of(&self, participant: usize) -> &[usize] {
        &self.assignments[participant]
    }

    /// Per-participant sample counts, the aggregation weights.
    pub fn counts(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.len()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.assignments.iter().map(|a| a.len()).sum()
    }

    /// Checks the plan covers `0..sample_count` exactly once with every
    /// participant holding at least one sample.
    pub fn validate(&self, sample_count: usize) -> Result<()> {
        if self.assignments.is_empty() {
            return Err(Error::invalid("plan has no participants"));
        }
        let mut seen = vec![false; sample_count];
        for (p, list) in self.assignments.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::invalid(format!("participant {p} holds no samples")));
            }
            for &i in list {
                if i >= sample_count {
                    return Err(Error::invalid(format!(
                        "participant {p} references sample {i} outside 0..{sample_count}"
                    )));
                }
                if seen[i] {
                    return Err(Error::invalid(format!(
                        "sample {i} assigned to more than one participant"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!(
                "sample {missing} assigned to no participant"
            )));
        }
        Ok(())
    }

    /// Audit form: a header line, then one `participant: indices` line each.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "scenario={} seed={} participants={}\n",
            self.scenario,
            self.seed,
            self.participants()
        );
        for (p, list) in self.assignments.iter().enumerate() {
            out.push_str(&format!("{p}:"));
            for i in list {
                out.push_str(&format!(" {i}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty partition plan text"))?;
        let mut scenario = None;
        let mut seed = None;
        let mut participants = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad header field `{field}`")))?;
            match key {
                "scenario" => scenario = Some(value.parse::<Scenario>()?),
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        Error::invalid(format!("bad seed `{value}`"))
                    })?)
                }
                "participants" => {
                    participants = Some(value.parse::<usize>().map_err(|_| {
                        Error::invalid(format!("bad participant count `{value}`"))
                    })?)
                }
                other => return Err(Error::invalid(format!("unknown header key `{other}`"))),
            }
        }
        let (Some(scenario), Some(seed), Some(participants)) = (scenario, seed, participants)
        else {
            return Err(Error::invalid(
                "plan header needs scenario, seed, and participants",
            ));
        };
        let mut assignments = vec![Vec::new(); participants];
        for line in lines {
            let (p, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad plan line `{line}`")))?;
            let p: usize = p
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad participant id `{p}`")))?;
            if p >= participants {
                return Err(Error::invalid(format!(
                    "participant {p} outside the declared count {participants}"
                )));
            }
            for tok in rest.split_whitespace() {
                let i: usize = tok
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad sample index `{tok}`")))?;
                assignments[p].push(i);
            }
        }
        PartitionPlan::build(scenario, seed, assignments)
    }
}

/// Even random split: shuffles the sample indices and deals them round
/// robin, so participant counts differ by at most one.
pub fn partition_iid(
    sample_count: usize,
    participants: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if participants == 0 {
        return Err(Error::invalid("participant count must be positive"));
    }
    if sample_count < participants {
        return Err(Error::invalid(format!(
            "{sample_count} samples cannot cover {participants} participants"
        )));
    }
    let mut order: Vec<usize> = (0..sample_count).collect();
    order.shuffle(&mut rng::stream(seed, "partition-iid", &[]));
    let mut assignments = vec![Vec::new(); participants];
    for (i, idx) in order.into_iter().enumerate() {
        assignments[i % participants].push(idx);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    PartitionPlan::build(Scenario::FtIid, seed, assignments)
}

/// Drive-grouped split: the participants are seeded with the drives holding
/// the most samples (size ties broken by drive id), then every sample from
/// the remaining drives joins the currently smallest participant, in
/// shuffled order. Feeding the low end first raises the minimum count as
/// far as the leftover budget allows.
pub fn partition_niid(
    drive_ids: &[String],
    participants: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if participants == 0 {
        return Err(Error::invalid("participant count must be positive"));
    }
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, d) in drive_ids.iter().enumerate() {
        groups.entry(d.as_str()).or_default().push(i);
    }
    if groups.len() < participants {
        return Err(Error::invalid(format!(
            "{} drives cannot seed {participants} participants",
            groups.len()
        )));
    }
    let mut order: Vec<&str> = groups.keys().copied().collect();
    order.sort_by(|a, b| groups[b].len().cmp(&groups[a].len()).then(a.cmp(b)));

    let mut assignments: Vec<Vec<usize>> = order[..participants]
        .iter()
        .map(|d| groups[*d].clone())
        .collect();
    let mut leftovers: Vec<usize> = order[participants..]
        .iter()
        .flat_map(|d| groups[*d].iter().copied())
        .collect();
    leftovers.shuffle(&mut rng::stream(seed, "partition-niid", &[]));
    for idx in leftovers {
        let smallest = assignments
            .iter()
            .enumerate()
            .min_by_key(|(p, a)| (a.len(), *p))
            .expect("participants is positive")
            .0;
        assignments[smallest].push(idx);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    PartitionPlan::build(Scenario::FtNiid, seed, assignments)
}
