//! Keyword collection: the task queue behind the annotation HTTP service,
//! its append-only record log, and simulated annotators for headless runs.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{argument, Error, Result};
use crate::kea::Tfidf;

pub const MIN_KEYWORDS: usize = 3;
pub const LEASE: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u64,
    pub doc_id: u64,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Open,
    Done,
}

/// One annotator's keyword positions for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: u64,
    pub doc_id: u64,
    pub positions: Vec<usize>,
    pub tokens: Vec<String>,
    pub annotator: String,
    /// Seconds since the Unix epoch; zero for simulated records.
    pub ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub done: usize,
}

/// One task per sampled document, numbered in ascending document-id order.
pub fn build_tasks(corpus: &Corpus, sample: &BTreeSet<u64>) -> Result<Vec<AnnotationTask>> {
    sample
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let doc = corpus
                .get(id)
                .ok_or_else(|| Error::Validation(format!("sampled document {id} is not in the corpus")))?;
            Ok(AnnotationTask {
                task_id: i as u64,
                doc_id: id,
                tokens: doc.tokens.clone(),
            })
        })
        .collect()
}

/// Union of all selected tokens.
pub fn seed_set(records: &[AnnotationRecord]) -> BTreeSet<String> {
    records.iter().flat_map(|r| r.tokens.iter().cloned()).collect()
}

pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

struct Lease {
    annotator: String,
    until: Instant,
}

struct State {
    tasks: Vec<AnnotationTask>,
    status: Vec<TaskStatus>,
    leases: HashMap<u64, Lease>,
    records: Vec<AnnotationRecord>,
    seeds: BTreeSet<String>,
    log: Option<PathBuf>,
}

/// Thread-safe task queue. Tasks move open -> leased -> done; every accepted
/// submission is appended to the log before the state changes.
pub struct AnnotationService {
    state: Mutex<Option<State>>,
    lease: Duration,
}

impl Default for AnnotationService {
    fn default() -> Self {
        Self::new()
    }
}

impl AnnotationService {
    /// A service with no tasks; every call fails until [`Self::initialize`].
    pub fn new() -> Self {
        Self {
            state: Mutex::new(None),
            lease: LEASE,
        }
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    /// Loads the tasks and replays any records already in `log`.
    pub fn initialize(&self, tasks: Vec<AnnotationTask>, log: Option<PathBuf>) -> Result<()> {
        let n = tasks.len();
        let mut state = State {
            tasks,
            status: vec![TaskStatus::Open; n],
            leases: HashMap::new(),
            records: Vec::new(),
            seeds: BTreeSet::new(),
            log: None,
        };
        if let Some(path) = &log {
            if path.exists() {
                for r in read_records(path)? {
                    state.validate(&r.annotator, r.task_id, &r.positions, None)?;
                    state.apply(r);
                }
            }
        }
        state.log = log;
        *self.state.lock().expect("annotation state poisoned") = Some(state);
        Ok(())
    }

    fn with_state<T>(&self, f: impl FnOnce(&mut State) -> Result<T>) -> Result<T> {
        let mut guard = self.state.lock().expect("annotation state poisoned");
        match guard.as_mut() {
            Some(s) => f(s),
            None => Err(Error::State("annotation service has no tasks loaded".into())),
        }
    }

    /// An open task for `annotator`: the one it already holds, otherwise the
    /// lowest-numbered open task nobody else holds. `None` when no such task
    /// exists.
    pub fn next_task(&self, annotator: &str) -> Result<Option<AnnotationTask>> {
        let lease = self.lease;
        self.with_state(|s| {
            let now = Instant::now();
            s.leases.retain(|_, l| l.until > now);
            let held = s
                .leases
                .iter()
                .filter(|(_, l)| l.annotator == annotator)
                .map(|(&id, _)| id)
                .min();
            let pick = held.or_else(|| {
                (0..s.tasks.len() as u64).find(|id| s.status[*id as usize] == TaskStatus::Open && !s.leases.contains_key(id))
            });
            Ok(pick.map(|id| {
                s.leases.insert(
                    id,
                    Lease {
                        annotator: annotator.to_string(),
                        until: now + lease,
                    },
                );
                s.tasks[id as usize].clone()
            }))
        })
    }

    /// Validates and persists one submission. Duplicate positions collapse;
    /// the record stores them ascending.
    pub fn submit(&self, task_id: u64, annotator: &str, positions: &[usize]) -> Result<AnnotationRecord> {
        self.with_state(|s| {
            let now = Instant::now();
            let positions = s.validate(annotator, task_id, positions, Some(now))?;
            let task = &s.tasks[task_id as usize];
            let record = AnnotationRecord {
                task_id,
                doc_id: task.doc_id,
                tokens: positions.iter().map(|&p| task.tokens[p].clone()).collect(),
                positions,
                annotator: annotator.to_string(),
                ts: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            };
            if let Some(path) = &s.log {
                let mut f = OpenOptions::new().create(true).append(true).open(path)?;
                let mut line = serde_json::to_vec(&record)?;
                line.push(b'\n');
                f.write_all(&line)?;
                f.flush()?;
            }
            s.apply(record.clone());
            Ok(record)
        })
    }

    pub fn progress(&self) -> Result<Progress> {
        self.with_state(|s| {
            Ok(Progress {
                total: s.tasks.len(),
                done: s.status.iter().filter(|&&st| st == TaskStatus::Done).count(),
            })
        })
    }

    pub fn status(&self, task_id: u64) -> Result<TaskStatus> {
        self.with_state(|s| {
            s.status
                .get(task_id as usize)
                .copied()
                .ok_or_else(|| Error::Validation(format!("no task {task_id}")))
        })
    }

    pub fn seeds(&self) -> Result<BTreeSet<String>> {
        self.with_state(|s| Ok(s.seeds.clone()))
    }

    pub fn records(&self) -> Result<Vec<AnnotationRecord>> {
        self.with_state(|s| Ok(s.records.clone()))
    }
}

impl State {
    /// Returns the sorted distinct positions. `now` enables the lease check;
    /// replay passes `None`.
    fn validate(&self, annotator: &str, task_id: u64, positions: &[usize], now: Option<Instant>) -> Result<Vec<usize>> {
        let task = self
            .tasks
            .get(task_id as usize)
            .ok_or_else(|| Error::Validation(format!("no task {task_id}")))?;
        if self.status[task_id as usize] == TaskStatus::Done {
            return Err(Error::Conflict(format!("task {task_id} has already been annotated")));
        }
        if let (Some(now), Some(l)) = (now, self.leases.get(&task_id)) {
            if l.annotator != annotator && l.until > now {
                return Err(Error::Conflict(format!("task {task_id} is leased to another annotator")));
            }
        }
        let distinct: BTreeSet<usize> = positions.iter().copied().collect();
        if let Some(&p) = distinct.iter().find(|&&p| p >= task.tokens.len()) {
            return Err(Error::Validation(format!(
                "position {p} is outside the {}-token document",
                task.tokens.len()
            )));
        }
        if distinct.len() < MIN_KEYWORDS {
            return Err(Error::Validation(format!(
                "select at least {MIN_KEYWORDS} keywords, got {}",
                distinct.len()
            )));
        }
        Ok(distinct.into_iter().collect())
    }

    fn apply(&mut self, r: AnnotationRecord) {
        self.status[r.task_id as usize] = TaskStatus::Done;
        self.leases.remove(&r.task_id);
        self.seeds.extend(r.tokens.iter().cloned());
        self.records.push(r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Oracle {
    /// Highest tf-idf tokens of the text, scored over the sample.
    Tfidf,
    /// Tokens most predictive of the document's own label.
    Label,
}

impl FromStr for Oracle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(Self::Tfidf),
            "label" => Ok(Self::Label),
            _ => Err(argument(format!("unknown oracle `{s}`"))),
        }
    }
}

/// Smoothed `P(label | token)` counted over a reference corpus.
struct LabelScores {
    counts: HashMap<String, Vec<usize>>,
    num_classes: usize,
}

impl LabelScores {
    fn fit(corpus: &Corpus) -> Self {
        let mut counts: HashMap<String, Vec<usize>> = HashMap::new();
        for d in &corpus.documents {
            let distinct: BTreeSet<&String> = d.tokens.iter().collect();
            for t in distinct {
                counts.entry(t.clone()).or_insert_with(|| vec![0; corpus.num_classes])[d.label] += 1;
            }
        }
        Self {
            counts,
            num_classes: corpus.num_classes,
        }
    }

    fn score(&self, token: &str, label: usize) -> f64 {
        let c = self.counts.get(token);
        let hit = c.map_or(0, |c| c[label]);
        let total: usize = c.map_or(0, |c| c.iter().sum());
        (hit as f64 + 1.0) / (total as f64 + self.num_classes as f64)
    }
}

/// Machine annotator for `tasks`. The tf-idf oracle fits document
/// frequencies over the tasks themselves; the label oracle scores tokens
/// against `reference` and breaks ties with a `seed`-ed shuffle. Each record
/// marks the first occurrence of each chosen token.
pub fn simulate_annotator(
    tasks: &[AnnotationTask],
    labels: &HashMap<u64, usize>,
    oracle: Oracle,
    reference: &Corpus,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    if tasks.is_empty() {
        return Err(argument("nothing to annotate"));
    }
    let tfidf = Tfidf::fit(tasks.iter().map(|t| t.tokens.as_slice()));
    let scores = (oracle == Oracle::Label).then(|| LabelScores::fit(reference));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let annotator = match oracle {
        Oracle::Tfidf => "sim-tfidf",
        Oracle::Label => "sim-label",
    };
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let chosen = match &scores {
            None => tfidf.top(&task.tokens, MIN_KEYWORDS),
            Some(scores) => {
                let label = *labels
                    .get(&task.doc_id)
                    .ok_or_else(|| argument(format!("no label for document {}", task.doc_id)))?;
                let mut distinct: Vec<&String> = task.tokens.iter().collect::<BTreeSet<_>>().into_iter().collect();
                distinct.shuffle(&mut rng);
                // stable sort keeps the shuffled order among equal scores
                distinct.sort_by(|a, b| scores.score(b, label).total_cmp(&scores.score(a, label)));
                distinct.into_iter().take(MIN_KEYWORDS).cloned().collect()
            }
        };
        if chosen.len() < MIN_KEYWORDS {
            log::warn!(
                "document {} has only {} distinct tokens; recording all of them",
                task.doc_id,
                chosen.len()
            );
        }
        let mut positions: Vec<usize> = chosen
            .iter()
            .map(|t| task.tokens.iter().position(|x| x == t).expect("chosen from the task"))
            .collect();
        positions.sort_unstable();
        out.push(AnnotationRecord {
            task_id: task.task_id,
            doc_id: task.doc_id,
            tokens: positions.iter().map(|&p| task.tokens[p].clone()).collect(),
            positions,
            annotator: annotator.to_string(),
            ts: 0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Split};

    fn task(id: u64, text: &str) -> AnnotationTask {
        AnnotationTask {
            task_id: id,
            doc_id: id * 10,
            tokens: text.split(' ').map(String::from).collect(),
        }
    }

    fn service(n: u64) -> AnnotationService {
        let s = AnnotationService::new();
        s.initialize((0..n).map(|i| task(i, "a b c d e")).collect(), None).unwrap();
        s
    }

    #[test]
    fn uninitialized_is_state_error() {
        let s = AnnotationService::new();
        assert!(matches!(s.next_task("x"), Err(Error::State(_))));
        assert!(matches!(s.progress(), Err(Error::State(_))));
    }

    #[test]
    fn three_rule_and_conflicts() {
        let s = service(2);
        let t = s.next_task("ann").unwrap().unwrap();
        assert!(matches!(s.submit(t.task_id, "ann", &[0, 1]), Err(Error::Validation(_))));
        assert!(matches!(s.submit(t.task_id, "ann", &[0, 1, 1]), Err(Error::Validation(_))));
        assert!(matches!(s.submit(t.task_id, "ann", &[0, 1, 5]), Err(Error::Validation(_))));
        let r = s.submit(t.task_id, "ann", &[4, 0, 2]).unwrap();
        assert_eq!(r.positions, [0, 2, 4]);
        assert_eq!(r.tokens, ["a", "c", "e"]);
        assert_eq!(s.status(t.task_id).unwrap(), TaskStatus::Done);
        assert!(matches!(s.submit(t.task_id, "ann", &[0, 1, 2]), Err(Error::Conflict(_))));
        assert!(matches!(s.submit(99, "ann", &[0, 1, 2]), Err(Error::Validation(_))));
    }

    #[test]
    fn leases_keep_annotators_apart() {
        let s = service(2);
        let a = s.next_task("a").unwrap().unwrap();
        let b = s.next_task("b").unwrap().unwrap();
        assert_ne!(a.task_id, b.task_id);
        assert_eq!(s.next_task("a").unwrap().unwrap().task_id, a.task_id);
        assert!(s.next_task("c").unwrap().is_none());
        assert!(matches!(s.submit(a.task_id, "b", &[0, 1, 2]), Err(Error::Conflict(_))));
    }

    #[test]
    fn expired_lease_reopens() {
        let s = AnnotationService::new().with_lease(Duration::from_millis(1));
        s.initialize(vec![task(0, "a b c")], None).unwrap();
        s.next_task("a").unwrap().unwrap();
        std::thread::sleep(Duration::from_millis(5));
        assert_eq!(s.next_task("b").unwrap().unwrap().task_id, 0);
    }

    #[test]
    fn done_when_all_submitted() {
        let s = service(1);
        let t = s.next_task("a").unwrap().unwrap();
        s.submit(t.task_id, "a", &[0, 1, 2]).unwrap();
        assert!(s.next_task("a").unwrap().is_none());
        assert_eq!(s.progress().unwrap(), Progress { total: 1, done: 1 });
    }

    #[test]
    fn label_oracle_prefers_label_tokens() {
        let docs = vec![
            Document {
                id: 0,
                label: 0,
                tokens: "good film the a".split(' ').map(String::from).collect(),
            },
            Document {
                id: 1,
                label: 1,
                tokens: "bad film the a".split(' ').map(String::from).collect(),
            },
        ];
        let corpus = Corpus::new(docs, 2, Split::Train).unwrap();
        let tasks = vec![task(0, "the good a film x")];
        let labels = [(0u64, 0usize)].into();
        let recs = simulate_annotator(&tasks, &labels, Oracle::Label, &corpus, 1).unwrap();
        assert!(recs[0].tokens.contains(&"good".to_string()));
        assert_eq!(recs[0].tokens.len(), 3);
    }

    #[test]
    fn shortfall_takes_all_distinct() {
        let corpus = Corpus::new(vec![], 2, Split::Train).unwrap();
        let tasks = vec![task(0, "x y x y")];
        let recs = simulate_annotator(&tasks, &HashMap::new(), Oracle::Tfidf, &corpus, 0).unwrap();
        assert_eq!(recs[0].positions, [0, 1]);
    }
}
