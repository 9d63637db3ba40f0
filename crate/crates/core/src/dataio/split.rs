use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};

/// Evaluation configuration: seen/unseen speaker × seen/unseen task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "SS-UT")]
    SsUt,
    #[serde(rename = "US-ST")]
    UsSt,
    #[serde(rename = "US-UT")]
    UsUt,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::SsUt, SplitTag::UsSt, SplitTag::UsUt];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::SsUt => "SS-UT",
            SplitTag::UsSt => "US-ST",
            SplitTag::UsUt => "US-UT",
        }
    }

    fn unseen_speakers(&self) -> bool {
        !matches!(self, SplitTag::SsUt)
    }

    fn unseen_tasks(&self) -> bool {
        !matches!(self, SplitTag::UsSt)
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "SS-UT" => Ok(SplitTag::SsUt),
            "US-ST" => Ok(SplitTag::UsSt),
            "US-UT" => Ok(SplitTag::UsUt),
            _ => Err(Error::Config(format!("unknown split tag '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub tag: SplitTag,
    pub seed: u64,
    pub train_subjects: Vec<String>,
    pub train_tasks: Vec<String>,
    pub eval_subjects: Vec<String>,
    pub eval_tasks: Vec<String>,
    /// One held-out training task per training subject, used for early stopping.
    pub val_tasks: BTreeMap<String, String>,
}

impl SplitSpec {
    /// Role of a (subject, task) utterance, or `None` when it is unused.
    /// Evaluation takes precedence over training for seen-speaker splits.
    pub fn role_of(&self, subject: &str, task: &str) -> Option<Role> {
        let has = |v: &[String], x: &str| v.iter().any(|s| s == x);
        if has(&self.eval_subjects, subject) && has(&self.eval_tasks, task) {
            let seen = has(&self.train_subjects, subject) && has(&self.train_tasks, task);
            if !seen {
                return Some(Role::Eval);
            }
        }
        if has(&self.train_subjects, subject) && has(&self.train_tasks, task) {
            if self.val_tasks.get(subject).map(String::as_str) == Some(task) {
                return Some(Role::Val);
            }
            return Some(Role::Train);
        }
        None
    }

    pub fn select<'a>(&self, samples: &'a [SegSample], role: Role) -> Vec<&'a SegSample> {
        samples
            .iter()
            .filter(|s| self.role_of(&s.subject_id, &s.task_id) == Some(role))
            .collect()
    }

    /// Frame identifiers of one role, in sample order.
    pub fn frame_ids(&self, samples: &[SegSample], role: Role) -> Vec<String> {
        self.select(samples, role).iter().map(|s| s.frame_id()).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let ts: BTreeSet<_> = self.train_subjects.iter().collect();
        let es: BTreeSet<_> = self.eval_subjects.iter().collect();
        let tt: BTreeSet<_> = self.train_tasks.iter().collect();
        let et: BTreeSet<_> = self.eval_tasks.iter().collect();
        let ok = match self.tag {
            SplitTag::SsUt => es.is_subset(&ts) && et.is_disjoint(&tt),
            SplitTag::UsSt => es.is_disjoint(&ts) && et.is_subset(&tt),
            SplitTag::UsUt => es.is_disjoint(&ts) && et.is_disjoint(&tt),
        };
        if ok && !es.is_empty() && !et.is_empty() && !ts.is_empty() && !tt.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("{} split violates its membership rules", self.tag)))
        }
    }
}

fn held_out(n: usize) -> usize {
    ((n as f64) * 0.2).round().max(1.0) as usize
}

/// Partitions subjects and tasks for the given evaluation configuration.
///
/// Unseen speakers: about 20% of subjects are held out (2 of 8). Unseen tasks:
/// about 20% of tasks (2 of 10). Deterministic under `seed`.
pub fn make_splits(
    subjects: &[String],
    tasks: &[String],
    tag: SplitTag,
    seed: u64,
) -> Result<SplitSpec> {
    if tag.unseen_speakers() && subjects.len() < 2 {
        return Err(Error::Config(format!(
            "{tag} needs at least 2 speakers, corpus has {}",
            subjects.len()
        )));
    }
    if tag.unseen_tasks() && tasks.len() < 2 {
        return Err(Error::Config(format!("{tag} needs at least 2 tasks, corpus has {}", tasks.len())));
    }
    if subjects.is_empty() || tasks.is_empty() {
        return Err(Error::Config("corpus has no speakers or tasks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B11_7000_0000 ^ tag as u64);
    let mut subj = subjects.to_vec();
    let mut task = tasks.to_vec();
    subj.sort();
    task.sort();
    subj.shuffle(&mut rng);
    task.shuffle(&mut rng);

    let (train_subjects, eval_subjects) = if tag.unseen_speakers() {
        let k = held_out(subj.len()).min(subj.len() - 1);
        (subj[k..].to_vec(), subj[..k].to_vec())
    } else {
        (subj.clone(), subj.clone())
    };
    let (train_tasks, eval_tasks) = if tag.unseen_tasks() {
        let k = held_out(task.len()).min(task.len() - 1);
        (task[k..].to_vec(), task[..k].to_vec())
    } else {
        (task.clone(), task.clone())
    };

    let mut val_tasks = BTreeMap::new();
    if train_tasks.len() >= 2 {
        for (i, s) in train_subjects.iter().enumerate() {
            val_tasks.insert(s.clone(), train_tasks[i % train_tasks.len()].clone());
        }
    }
    let sort = |mut v: Vec<String>| {
        v.sort();
        v
    };
    let spec = SplitSpec {
        tag,
        seed,
        train_subjects: sort(train_subjects),
        train_tasks: sort(train_tasks),
        eval_subjects: sort(eval_subjects),
        eval_tasks: sort(eval_tasks),
        val_tasks,
    };
    spec.check_invariants()?;
    Ok(spec)
}
