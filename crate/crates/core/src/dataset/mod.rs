//! ARC task files, derived splits, data-mix manifests, the task-variant
//! registry and the epoch sampler.

mod registry;
mod sampler;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GridExtent;
use crate::error::{Result, TrmError};
use crate::grid::Grid;

pub use registry::{build_registry, VariantRegistry};
pub use sampler::{sample_epoch, Batch, BatchItem};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: Grid,
    pub output: Grid,
}

/// A test input whose output may be withheld.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestExample {
    pub input: Grid,
    pub output: Option<Grid>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub task_id: String,
    pub train_pairs: Vec<ExamplePair>,
    pub test_examples: Vec<TestExample>,
}

impl Task {
    /// Test examples whose solutions are known, as pairs.
    pub fn test_pairs(&self) -> Vec<ExamplePair> {
        self.test_examples
            .iter()
            .filter_map(|t| {
                t.output.as_ref().map(|output| ExamplePair {
                    input: t.input.clone(),
                    output: output.clone(),
                })
            })
            .collect()
    }

    pub fn grids(&self) -> impl Iterator<Item = &Grid> {
        self.train_pairs
            .iter()
            .flat_map(|p| [&p.input, &p.output])
            .chain(self.test_examples.iter().flat_map(|t| std::iter::once(&t.input).chain(t.output.as_ref())))
    }

    /// Extent over every grid the task holds; augmentations sampled against
    /// it fit all of them.
    pub fn extent(&self) -> GridExtent {
        GridExtent::of(self.grids())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub name: String,
    pub tasks: Vec<Task>,
}

impl Split {
    pub fn new(name: impl Into<String>, tasks: Vec<Task>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(TrmError::Parse {
                    path: String::new(),
                    message: format!("duplicate task id `{}`", t.task_id),
                });
            }
        }
        Ok(Split {
            name: name.into(),
            tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.task_id.as_str()).collect()
    }

    pub fn task(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn mean_train_inputs(&self) -> f64 {
        self.mean_of(|t| t.train_pairs.len())
    }

    pub fn mean_test_inputs(&self) -> f64 {
        self.mean_of(|t| t.test_examples.len())
    }

    fn mean_of(&self, f: impl Fn(&Task) -> usize) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(f).sum::<usize>() as f64 / self.tasks.len() as f64
    }
}

#[derive(Deserialize, Serialize)]
struct RawPair {
    input: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<Vec<Vec<i64>>>,
}

#[derive(Deserialize, Serialize)]
struct RawTask {
    train: Vec<RawPair>,
    test: Vec<RawPair>,
}

fn parse_grid(raw: &[Vec<i64>], task_id: &str) -> Result<Grid> {
    let mut rows = Vec::with_capacity(raw.len());
    for row in raw {
        let mut out = Vec::with_capacity(row.len());
        for &v in row {
            if !(0..=9).contains(&v) {
                return Err(TrmError::GridBounds(format!("task `{task_id}`: color {v}")));
            }
            out.push(v as u8);
        }
        rows.push(out);
    }
    Grid::from_rows(&rows).map_err(|e| TrmError::GridBounds(format!("task `{task_id}`: {e}")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| TrmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TrmError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads an ARC challenges file, attaching test outputs from `solutions`
/// when given. Tasks come back sorted by id.
pub fn load_challenges(path: &Path, solutions: Option<&Path>) -> Result<Split> {
    let raw: BTreeMap<String, RawTask> = read_json(path)?;
    let solutions: Option<BTreeMap<String, Vec<Vec<Vec<i64>>>>> = solutions.map(read_json).transpose()?;

    let mut tasks = Vec::with_capacity(raw.len());
    for (task_id, raw_task) in raw {
        if raw_task.train.is_empty() {
            return Err(TrmError::Parse {
                path: path.display().to_string(),
                message: format!("task `{task_id}` has no train pairs"),
            });
        }
        let mut train_pairs = Vec::with_capacity(raw_task.train.len());
        for pair in &raw_task.train {
            let output = pair.output.as_ref().ok_or_else(|| TrmError::Parse {
                path: path.display().to_string(),
                message: format!("task `{task_id}` train pair without output"),
            })?;
            train_pairs.push(ExamplePair {
                input: parse_grid(&pair.input, &task_id)?,
                output: parse_grid(output, &task_id)?,
            });
        }
        let task_solutions = solutions.as_ref().and_then(|s| s.get(&task_id));
        let mut test_examples = Vec::with_capacity(raw_task.test.len());
        for (i, pair) in raw_task.test.iter().enumerate() {
            let output = match (&pair.output, task_solutions.and_then(|s| s.get(i))) {
                (_, Some(sol)) => Some(parse_grid(sol, &task_id)?),
                (Some(inline), None) => Some(parse_grid(inline, &task_id)?),
                (None, None) => None,
            };
            test_examples.push(TestExample {
                input: parse_grid(&pair.input, &task_id)?,
                output,
            });
        }
        tasks.push(Task {
            task_id,
            train_pairs,
            test_examples,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Split::new(name, tasks)
}

fn to_raw(grid: &Grid) -> Vec<Vec<i64>> {
    grid.rows().map(|r| r.iter().map(|&c| c as i64).collect()).collect()
}

/// Writes a split as an ARC challenges file (test outputs omitted) and,
/// when `solutions` is given, the matching solutions file.
pub fn write_challenges(split: &Split, path: &Path, solutions: Option<&Path>) -> Result<()> {
    let mut challenges = BTreeMap::new();
    let mut sols = BTreeMap::new();
    for task in &split.tasks {
        let raw = RawTask {
            train: task
                .train_pairs
                .iter()
                .map(|p| RawPair {
                    input: to_raw(&p.input),
                    output: Some(to_raw(&p.output)),
                })
                .collect(),
            test: task
                .test_examples
                .iter()
                .map(|t| RawPair {
                    input: to_raw(&t.input),
                    output: None,
                })
                .collect(),
        };
        challenges.insert(task.task_id.clone(), raw);
        if task.test_examples.iter().all(|t| t.output.is_some()) {
            let outs: Vec<_> = task
                .test_examples
                .iter()
                .filter_map(|t| t.output.as_ref().map(to_raw))
                .collect();
            sols.insert(task.task_id.clone(), outs);
        }
    }
    write_json(path, &challenges)?;
    if let Some(sol_path) = solutions {
        write_json(sol_path, &sols)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("plain data serializes");
    fs::write(path, text).map_err(|e| TrmError::io(path, e))
}

pub const DERIVED_EVAL_POOL: usize = 120;
pub const DERIVED_TRAIN: usize = 100;
pub const DERIVED_HELDOUT: usize = 10;

/// Partitions the first 120 tasks (by sorted id) into disjoint
/// train/eval/test subsets of 100/10/10, seeded.
pub fn build_derived_eval_splits(eval_split: &Split, seed: u64) -> Result<(Split, Split, Split)> {
    if eval_split.len() < DERIVED_EVAL_POOL {
        return Err(TrmError::TooFewTasks {
            needed: DERIVED_EVAL_POOL,
            got: eval_split.len(),
        });
    }
    let mut pool: Vec<&Task> = eval_split.tasks.iter().collect();
    pool.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    pool.truncate(DERIVED_EVAL_POOL);
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let take = |range: std::ops::Range<usize>| -> Vec<Task> {
        let mut tasks: Vec<Task> = pool[range].iter().map(|&t| t.clone()).collect();
        tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        tasks
    };
    let base = &eval_split.name;
    Ok((
        Split::new(format!("{base}train"), take(0..DERIVED_TRAIN))?,
        Split::new(format!("{base}eval"), take(DERIVED_TRAIN..DERIVED_TRAIN + DERIVED_HELDOUT))?,
        Split::new(format!("{base}test"), take(DERIVED_TRAIN + DERIVED_HELDOUT..DERIVED_EVAL_POOL))?,
    ))
}

/// Keeps only `keep_ids`, preserving the split's order.
pub fn filter_split(split: &Split, keep_ids: &[impl AsRef<str>]) -> Result<Split> {
    let known: HashSet<&str> = split.tasks.iter().map(|t| t.task_id.as_str()).collect();
    let mut keep = HashSet::new();
    for id in keep_ids {
        let id = id.as_ref();
        if !known.contains(id) {
            return Err(TrmError::UnknownTaskId(id.to_string()));
        }
        keep.insert(id);
    }
    let tasks = split
        .tasks
        .iter()
        .filter(|t| keep.contains(t.task_id.as_str()))
        .cloned()
        .collect();
    Split::new(split.name.clone(), tasks)
}

/// Reads a plain-text task id list: one id per line, `#` comments allowed.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| TrmError::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// One line of a data-mix manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split_path: PathBuf,
    pub use_train: bool,
    pub use_test: bool,
    pub solutions_path: Option<PathBuf>,
}

/// Parses `split_path, use_train, use_test[, solutions_path]` lines.
/// Relative paths resolve against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let parse_bool = |s: &str, line: usize| match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(TrmError::Parse {
            path: "manifest".into(),
            message: format!("line {line}: expected a boolean, got `{other}`"),
        }),
    };
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(TrmError::Parse {
                path: "manifest".into(),
                message: format!("line {}: expected 3 or 4 fields, got {}", i + 1, fields.len()),
            });
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        entries.push(ManifestEntry {
            split_path: resolve(fields[0]),
            use_train: parse_bool(fields[1], i + 1)?,
            use_test: parse_bool(fields[2], i + 1)?,
            solutions_path: fields.get(3).filter(|s| !s.is_empty()).map(|s| resolve(s)),
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path, data_root: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| TrmError::io(path, e))?;
    let base = data_root
        .map(Path::to_path_buf)
        .or_else(|| path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    parse_manifest(&text, &base)
}

/// The example pairs a task contributes to training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTask {
    pub task_id: String,
    pub pairs: Vec<ExamplePair>,
    pub extent: GridExtent,
}

impl TrainingTask {
    pub fn from_task(task: &Task, use_train: bool, use_test: bool) -> Self {
        let mut pairs = Vec::new();
        if use_train {
            pairs.extend(task.train_pairs.iter().cloned());
        }
        if use_test {
            pairs.extend(task.test_pairs());
        }
        TrainingTask {
            task_id: task.task_id.clone(),
            pairs,
            extent: task.extent(),
        }
    }
}

/// Training tasks plus held-out evaluation pairs assembled from a manifest.
#[derive(Clone, Debug, Default)]
pub struct DataMix {
    pub train: Vec<TrainingTask>,
    /// Test pairs of tasks whose test pairs are not trained on.
    pub eval: Vec<(String, ExamplePair)>,
    /// The source tasks, in training order.
    pub tasks: Vec<Task>,
}

impl DataMix {
    pub fn from_splits(entries: &[(Split, bool, bool)]) -> Result<Self> {
        let mut mix = DataMix::default();
        let mut seen = HashSet::new();
        for (split, use_train, use_test) in entries {
            for task in &split.tasks {
                if !seen.insert(task.task_id.clone()) {
                    return Err(TrmError::Parse {
                        path: split.name.clone(),
                        message: format!("task `{}` appears in more than one mix entry", task.task_id),
                    });
                }
                let tt = TrainingTask::from_task(task, *use_train, *use_test);
                if !tt.pairs.is_empty() {
                    mix.train.push(tt);
                    mix.tasks.push(task.clone());
                }
                if !use_test {
                    mix.eval
                        .extend(task.test_pairs().into_iter().map(|p| (task.task_id.clone(), p)));
                }
            }
        }
        Ok(mix)
    }

    pub fn load(entries: &[ManifestEntry]) -> Result<Self> {
        let mut splits = Vec::with_capacity(entries.len());
        for e in entries {
            let split = load_challenges(&e.split_path, e.solutions_path.as_deref())?;
            splits.push((split, e.use_train, e.use_test));
        }
        DataMix::from_splits(&splits)
    }

    pub fn pair_count(&self) -> usize {
        self.train.iter().map(|t| t.pairs.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, n_train: usize, n_test: usize) -> Task {
        let g = Grid::filled(2, 2, 1).unwrap();
        Task {
            task_id: id.to_string(),
            train_pairs: vec![ExamplePair { input: g.clone(), output: g.clone() }; n_train],
            test_examples: vec![TestExample { input: g.clone(), output: Some(g.clone()) }; n_test],
        }
    }

    fn split_of(n: usize) -> Split {
        Split::new("eval", (0..n).map(|i| task(&format!("t{i:04}"), 2, 1)).collect()).unwrap()
    }

    #[test]
    fn derived_splits_partition_the_pool() {
        let split = split_of(125);
        let (a, b, c) = build_derived_eval_splits(&split, 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (100, 10, 10));
        let ids: HashSet<_> = a.task_ids().into_iter().chain(b.task_ids()).chain(c.task_ids()).collect();
        assert_eq!(ids.len(), 120);
        // the pool is the first 120 sorted ids
        assert!(!ids.contains("t0120"));
        let again = build_derived_eval_splits(&split, 3).unwrap();
        assert_eq!(again.1.task_ids(), b.task_ids());
        let other = build_derived_eval_splits(&split, 4).unwrap();
        assert_ne!(other.0.task_ids(), a.task_ids());
    }

    #[test]
    fn derived_splits_need_enough_tasks() {
        assert!(matches!(
            build_derived_eval_splits(&split_of(119), 0),
            Err(TrmError::TooFewTasks { needed: 120, got: 119 })
        ));
    }

    #[test]
    fn filter_preserves_order_and_rejects_unknown() {
        let split = split_of(5);
        let kept = filter_split(&split, &["t0003", "t0001"]).unwrap();
        assert_eq!(kept.task_ids(), vec!["t0001", "t0003"]);
        assert_eq!(filter_split(&split, &split.task_ids()).unwrap(), split);
        assert!(matches!(filter_split(&split, &["nope"]), Err(TrmError::UnknownTaskId(_))));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# replication mix\ntraining2.json, true, true\n\nevaluation2.json,true,false, evaluation2_solutions.json\n";
        let entries = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].split_path, PathBuf::from("/data/training2.json"));
        assert!(entries[0].use_test);
        assert!(!entries[1].use_test);
        assert_eq!(entries[1].solutions_path, Some(PathBuf::from("/data/evaluation2_solutions.json")));
        assert!(parse_manifest("a.json, maybe, true", Path::new(".")).is_err());
        assert!(parse_manifest("a.json, true", Path::new(".")).is_err());
    }

    #[test]
    fn mix_routes_test_pairs() {
        let a = Split::new("a", vec![task("a1", 2, 1)]).unwrap();
        let b = Split::new("b", vec![task("b1", 3, 2)]).unwrap();
        let mix = DataMix::from_splits(&[(a.clone(), true, true), (b, true, false)]).unwrap();
        assert_eq!(mix.train[0].pairs.len(), 3);
        assert_eq!(mix.train[1].pairs.len(), 3);
        assert_eq!(mix.eval.len(), 2);
        assert!(DataMix::from_splits(&[(a.clone(), true, true), (a, true, true)]).is_err());
    }
}
