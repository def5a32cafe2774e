//! Benchmark harness: dataset loading, answer judging, metrics and ablation runs.
//!
//! Datasets are JSON Lines, one [`EvalSample`] per line. Image paths are resolved relative to
//! the dataset file. A run drives every sample through the configured pipeline variant, keeps
//! going past per-sample failures (they count as incorrect) and produces a [`MetricsReport`]
//! plus one transcript per sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::ImageRef;
use crate::detection::Query;
use crate::dictionary::Dictionary;
use crate::pipeline::{Ablation, Exchange, Pipeline, PreparedScenario, TurnResult};
use crate::registry::{ConceptId, Registry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no results to score")]
    EmptyResults,
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    RecognitionPositive,
    RecognitionNegative,
    Vqa,
    TextOnly,
    Sqa,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::RecognitionPositive => "recognition_positive",
            Task::RecognitionNegative => "recognition_negative",
            Task::Vqa => "vqa",
            Task::TextOnly => "text_only",
            Task::Sqa => "sqa",
        }
    }

    pub fn is_recognition(self) -> bool {
        matches!(self, Task::RecognitionPositive | Task::RecognitionNegative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub question: String,
    pub gold: String,
    #[serde(default)]
    pub concept_ids: Vec<ConceptId>,
    #[serde(default)]
    pub scenario_id: String,
}

impl EvalSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question must not be empty".into());
        }
        if self.gold.trim().is_empty() {
            return Err("gold must not be empty".into());
        }
        match self.task {
            Task::RecognitionPositive if !self.gold.trim().eq_ignore_ascii_case("yes") => {
                return Err("recognition_positive requires gold \"yes\"".into());
            }
            Task::RecognitionNegative if !self.gold.trim().eq_ignore_ascii_case("no") => {
                return Err("recognition_negative requires gold \"no\"".into());
            }
            _ => {}
        }
        match (self.task, &self.image) {
            (Task::TextOnly, Some(_)) => Err("text_only samples must not have an image".into()),
            (Task::TextOnly, None) => Ok(()),
            (_, None) => Err(format!("{} samples require an image", self.task.as_str())),
            (_, Some(img)) if img.is_empty() => Err("image must not be empty".into()),
            _ => Ok(()),
        }
    }
}

/// Parses JSON Lines. Blank lines are skipped; relative image paths are joined to `base_dir`.
pub fn parse_dataset(text: &str, base_dir: Option<&Path>) -> Result<Vec<EvalSample>, EvalError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut sample: EvalSample = serde_json::from_str(line).map_err(|e| EvalError::SchemaViolation {
            line: line_no,
            message: e.to_string(),
        })?;
        sample
            .validate()
            .map_err(|message| EvalError::SchemaViolation { line: line_no, message })?;
        if let (Some(ImageRef::Path(p)), Some(base)) = (&sample.image, base_dir) {
            if p.is_relative() {
                sample.image = Some(ImageRef::Path(base.join(p)));
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_dataset(path: &Path) -> Result<Vec<EvalSample>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, path.parent())
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// First `yes`/`no` token in `text`, lowercased.
pub fn first_yes_no(text: &str) -> Option<&'static str> {
    tokens(text).find_map(|t| {
        if t.eq_ignore_ascii_case("yes") {
            Some("yes")
        } else if t.eq_ignore_ascii_case("no") {
            Some("no")
        } else {
            None
        }
    })
}

/// Whether `answer` is correct for `sample`.
///
/// Recognition compares the first yes/no token. Otherwise a single-letter gold must appear as
/// a standalone uppercase token (so the article "a" never matches choice A); longer golds
/// match by case-insensitive containment.
pub fn judge(sample: &EvalSample, answer: &str) -> bool {
    let gold = sample.gold.trim();
    if sample.task.is_recognition() {
        return first_yes_no(answer).is_some_and(|a| a.eq_ignore_ascii_case(gold));
    }
    let is_choice = gold.chars().count() == 1 && gold.chars().all(|c| c.is_ascii_alphabetic());
    if is_choice {
        let letter = gold.to_ascii_uppercase();
        return tokens(answer).any(|t| t == letter);
    }
    !gold.is_empty() && answer.to_lowercase().contains(&gold.to_lowercase())
}

/// How the recognition score combines yes and no recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Unweighted mean of the two recalls.
    #[default]
    Mean,
    /// Pooled accuracy over all recognition samples.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskCount {
    pub total: usize,
    pub correct: usize,
}

impl TaskCount {
    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Metrics over one slice of results. A metric with no samples is `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub yes_recall: Option<f64>,
    pub no_recall: Option<f64>,
    pub weighted_rec: Option<f64>,
    pub vqa_acc: Option<f64>,
    pub text_acc: Option<f64>,
    pub sqa_acc: Option<f64>,
    pub counts: BTreeMap<Task, TaskCount>,
}

/// Recognition score from the two recalls. `Count` needs the sample counts.
pub fn weighted_recall(
    yes: Option<f64>,
    no: Option<f64>,
    weighting: Weighting,
    yes_count: usize,
    no_count: usize,
) -> Option<f64> {
    match weighting {
        Weighting::Mean => Some((yes? + no?) / 2.0),
        Weighting::Count => {
            let total = yes_count + no_count;
            (total > 0).then(|| {
                (yes.unwrap_or(0.0) * yes_count as f64 + no.unwrap_or(0.0) * no_count as f64) / total as f64
            })
        }
    }
}

impl SliceMetrics {
    fn from_counts(counts: BTreeMap<Task, TaskCount>, weighting: Weighting) -> Self {
        let get = |t| counts.get(&t).copied().unwrap_or_default();
        let (pos, neg) = (get(Task::RecognitionPositive), get(Task::RecognitionNegative));
        let yes_recall = pos.ratio();
        let no_recall = neg.ratio();
        Self {
            yes_recall,
            no_recall,
            weighted_rec: weighted_recall(yes_recall, no_recall, weighting, pos.total, neg.total),
            vqa_acc: get(Task::Vqa).ratio(),
            text_acc: get(Task::TextOnly).ratio(),
            sqa_acc: get(Task::Sqa).ratio(),
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: SliceMetrics,
    pub per_scenario: BTreeMap<String, SliceMetrics>,
    pub weighting: Weighting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(default)]
    pub failures: Vec<SampleFailure>,
}

fn tally<'a>(results: impl Iterator<Item = (&'a EvalSample, bool)>) -> BTreeMap<Task, TaskCount> {
    let mut counts: BTreeMap<Task, TaskCount> = BTreeMap::new();
    for (sample, correct) in results {
        let c = counts.entry(sample.task).or_default();
        c.total += 1;
        c.correct += usize::from(correct);
    }
    counts
}

pub fn compute_metrics(results: &[(EvalSample, bool)], weighting: Weighting) -> Result<MetricsReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let overall = SliceMetrics::from_counts(tally(results.iter().map(|(s, c)| (s, *c))), weighting);
    let scenarios: BTreeSet<&str> = results.iter().map(|(s, _)| s.scenario_id.as_str()).collect();
    let per_scenario = scenarios
        .into_iter()
        .map(|id| {
            let slice = results.iter().filter(|(s, _)| s.scenario_id == id).map(|(s, c)| (s, *c));
            (id.to_string(), SliceMetrics::from_counts(tally(slice), weighting))
        })
        .collect();
    Ok(MetricsReport {
        overall,
        per_scenario,
        weighting,
        ablation: None,
        failures: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub ablation: Ablation,
    pub weighting: Weighting,
    pub top_k: usize,
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ablation: Ablation::FULL,
            weighting: Weighting::Mean,
            top_k: crate::dictionary::DEFAULT_TOP_K,
            parallelism: 1,
        }
    }
}

/// Everything recorded for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTranscript {
    pub index: usize,
    pub sample: EvalSample,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<TurnResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
}

/// Per-scenario preparation record: selected adapter and identity-extraction exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTranscript {
    pub scenario_id: String,
    pub concept_ids: Vec<ConceptId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchanges: Vec<Exchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub scenarios: Vec<ScenarioTranscript>,
    pub samples: Vec<SampleTranscript>,
}

/// Concept ids named by a scenario's samples, or every registered concept if none are named.
fn scenario_ids(samples: &[EvalSample], scenario_id: &str, registry: &Registry) -> Vec<ConceptId> {
    let named: BTreeSet<&ConceptId> = samples
        .iter()
        .filter(|s| s.scenario_id == scenario_id)
        .flat_map(|s| s.concept_ids.iter())
        .collect();
    if named.is_empty() {
        return registry.concepts().iter().map(|c| c.id.clone()).collect();
    }
    named.into_iter().cloned().collect()
}

fn run_sample(index: usize, sample: &EvalSample, prepared: Result<&PreparedScenario, &str>, pipeline: &Pipeline, ablation: Ablation) -> SampleTranscript {
    let mut t = SampleTranscript {
        index,
        sample: sample.clone(),
        correct: false,
        answer: None,
        error: None,
        turn: None,
        exchanges: Vec::new(),
    };
    let prepared = match prepared {
        Ok(p) => p,
        Err(e) => {
            t.error = Some(format!("scenario unavailable: {e}"));
            return t;
        }
    };
    let outcome = match (&sample.task, &sample.image) {
        (Task::TextOnly, _) => pipeline.ask_text(prepared, &sample.question).map(|(answer, exchanges)| {
            t.exchanges = exchanges;
            answer
        }),
        (_, Some(image)) => {
            let query = Query::new(image.clone(), sample.question.clone()).expect("validated on load");
            pipeline.ask(prepared, &query, ablation).map(|turn| {
                let answer = turn.answer.clone();
                t.turn = Some(turn);
                answer
            })
        }
        (_, None) => unreachable!("validated on load"),
    };
    match outcome {
        Ok(answer) => {
            t.correct = judge(sample, &answer);
            t.answer = Some(answer);
        }
        Err(e) => t.error = Some(e.to_string()),
    }
    t
}

/// Runs `dataset` through `pipeline`. Results, transcripts and the report are independent of
/// `parallelism` and scheduling order.
pub fn run_eval(
    dataset: &[EvalSample],
    registry: &Registry,
    dictionary: &Dictionary,
    pipeline: &Pipeline,
    options: EvalOptions,
) -> Result<EvalRun, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if options.parallelism == 0 {
        return Err(EvalError::ZeroParallelism);
    }
    let ablation = options.ablation;
    let needs_identities = |id: &str| {
        dataset.iter().filter(|s| s.scenario_id == id).any(|s| {
            s.task == Task::TextOnly || ablation.use_small || ablation.use_reflection
        })
    };

    // Scenarios are prepared up front, in order, so the cached identity extraction is never
    // attributed to whichever sample happens to run first.
    let scenario_names: BTreeSet<&str> = dataset.iter().map(|s| s.scenario_id.as_str()).collect();
    let mut prepared: BTreeMap<&str, Result<PreparedScenario, String>> = BTreeMap::new();
    let mut scenarios = Vec::new();
    for name in scenario_names {
        let ids = scenario_ids(dataset, name, registry);
        let result = registry
            .scenario_for(&ids.iter().map(|i| i.as_str()).collect::<Vec<_>>())
            .map_err(|e| e.to_string())
            .and_then(|s| PreparedScenario::new(s, dictionary, options.top_k).map_err(|e| e.to_string()));
        if let Ok(p) = &result {
            if needs_identities(name) {
                p.identities(pipeline.large());
            }
        }
        scenarios.push(ScenarioTranscript {
            scenario_id: name.to_string(),
            concept_ids: ids,
            adapter_ref: result.as_ref().ok().map(|p| p.selection().adapter_ref()),
            error: result.as_ref().err().cloned(),
            exchanges: result.as_ref().map(|p| p.identity_transcript()).unwrap_or_default(),
        });
        if let Err(e) = &result {
            warn!(scenario = name, error = %e, "scenario preparation failed");
        }
        prepared.insert(name, result);
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SampleTranscript>>> = Mutex::new(vec![None; dataset.len()]);
    std::thread::scope(|scope| {
        for _ in 0..options.parallelism.min(dataset.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = dataset.get(i) else { break };
                let p = match &prepared[sample.scenario_id.as_str()] {
                    Ok(p) => Ok(p),
                    Err(e) => Err(e.as_str()),
                };
                let t = run_sample(i, sample, p, pipeline, ablation);
                slots.lock().unwrap()[i] = Some(t);
            });
        }
    });
    let samples: Vec<SampleTranscript> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|t| t.expect("every sample ran"))
        .collect();

    let results: Vec<(EvalSample, bool)> = samples.iter().map(|t| (t.sample.clone(), t.correct)).collect();
    let mut report = compute_metrics(&results, options.weighting)?;
    report.ablation = Some(ablation);
    report.failures = samples
        .iter()
        .filter_map(|t| {
            t.error.as_ref().map(|e| SampleFailure {
                index: t.index,
                error: e.clone(),
            })
        })
        .collect();
    info!(
        samples = samples.len(),
        failures = report.failures.len(),
        ablation = ablation.label(),
        "evaluation finished"
    );
    Ok(EvalRun {
        report,
        scenarios,
        samples,
    })
}

impl EvalRun {
    /// Writes `report.json`, `scenarios.json` and `transcripts/<index>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        let transcripts = dir.join("transcripts");
        fs::create_dir_all(&transcripts).map_err(io(&transcripts))?;
        let write = |path: PathBuf, value: String| fs::write(&path, value + "\n").map_err(io(&path));
        write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        write(dir.join("scenarios.json"), serde_json::to_string_pretty(&self.scenarios)?)?;
        for t in &self.samples {
            write(transcripts.join(format!("{:05}.json", t.index)), serde_json::to_string_pretty(t)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(task: Task, gold: &str) -> EvalSample {
        EvalSample {
            id: None,
            task,
            image: (task != Task::TextOnly).then(|| ImageRef::parse("x.jpg")),
            question: "q".into(),
            gold: gold.into(),
            concept_ids: vec![],
            scenario_id: "s".into(),
        }
    }

    #[test]
    fn dataset_validation() {
        let ok = r#"{"task":"recognition_positive","image":"img/a.jpg","question":"Is <bo> here?","gold":"yes","concept_ids":["<bo>"],"scenario_id":"s1"}"#;
        let samples = parse_dataset(ok, Some(Path::new("/data"))).unwrap();
        assert_eq!(samples[0].image, Some(ImageRef::Path("/data/img/a.jpg".into())));

        let bad_gold = r#"{"task":"recognition_positive","image":"a.jpg","question":"q","gold":"no"}"#;
        let text_img = r#"{"task":"text_only","image":"a.jpg","question":"q","gold":"A"}"#;
        let no_img = r#"{"task":"vqa","question":"q","gold":"A"}"#;
        for bad in [bad_gold, text_img, no_img, "{not json"] {
            let text = format!("{ok}\n\n{bad}\n");
            assert!(matches!(parse_dataset(&text, None), Err(EvalError::SchemaViolation { line: 3, .. })), "{bad}");
        }
        let url = r#"{"task":"vqa","image":"https://x/y.jpg","question":"q","gold":"A"}"#;
        assert!(matches!(parse_dataset(url, Some(Path::new("/data"))).unwrap()[0].image, Some(ImageRef::Url(_))));
    }

    #[test]
    fn judging() {
        let pos = sample(Task::RecognitionPositive, "yes");
        assert!(judge(&pos, "Yes, <bo> is in the image."));
        assert!(!judge(&pos, "No. Yes."));
        assert!(!judge(&sample(Task::RecognitionNegative, "no"), "I cannot tell"));
        assert!(judge(&sample(Task::RecognitionNegative, "no"), "nope... no"));

        let vqa = sample(Task::Vqa, "A");
        assert!(judge(&vqa, "The answer is (A)."));
        assert!(judge(&vqa, "A"));
        assert!(!judge(&vqa, "It is a dog, B."));
        assert!(!judge(&vqa, "ABBA"));
        let phrase = sample(Task::Sqa, "red scarf");
        assert!(judge(&phrase, "She wears a Red Scarf today."));
        assert!(!judge(&phrase, "a blue hat"));
    }

    #[test]
    fn metrics_from_reported_rows() {
        let build = |pos_ok: usize, neg_ok: usize| {
            let mut r = Vec::new();
            for i in 0..1000 {
                r.push((sample(Task::RecognitionPositive, "yes"), i < pos_ok));
                r.push((sample(Task::RecognitionNegative, "no"), i < neg_ok));
            }
            r
        };
        let m = compute_metrics(&build(926, 764), Weighting::Mean).unwrap();
        assert!((m.overall.weighted_rec.unwrap() - 0.845).abs() < 1e-3);
        let m = compute_metrics(&build(898, 893), Weighting::Mean).unwrap();
        assert!((m.overall.weighted_rec.unwrap() - 0.895).abs() < 1e-3);
        assert_eq!(m.overall.vqa_acc, None);
    }

    #[test]
    fn count_weighting_pools_samples() {
        let mut r = vec![(sample(Task::RecognitionPositive, "yes"), true)];
        r.extend((0..3).map(|i| (sample(Task::RecognitionNegative, "no"), i == 0)));
        let mean = compute_metrics(&r, Weighting::Mean).unwrap();
        let count = compute_metrics(&r, Weighting::Count).unwrap();
        assert!((mean.overall.weighted_rec.unwrap() - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((count.overall.weighted_rec.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_correct_and_empty() {
        let r: Vec<_> = [Task::Vqa, Task::TextOnly, Task::Sqa]
            .into_iter()
            .map(|t| (sample(t, "A"), true))
            .collect();
        let m = compute_metrics(&r, Weighting::Mean).unwrap();
        assert_eq!((m.overall.vqa_acc, m.overall.text_acc, m.overall.sqa_acc), (Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(m.overall.weighted_rec, None);
        assert!(matches!(compute_metrics(&[], Weighting::Mean), Err(EvalError::EmptyResults)));
    }
}
