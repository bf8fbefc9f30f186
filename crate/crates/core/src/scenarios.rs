//! Scripted scenarios: complete pipeline configurations whose backends are
//! canned, so runs are reproducible offline.
//!
//! Control replies are matched by the `# <Agent>` header of each control
//! prompt and registered before the executor behaviors, which match on
//! requirement text.

use serde_json::json;

use crate::backend::{Matcher, Script, ScriptedBehavior};
use crate::orchestrator::agents::{
    COVERAGE_HEADER, FAILURE_REVIEW_HEADER, KNOWLEDGE_HEADER, PLANNER_HEADER, REVIEW_HEADER, SPLITTER_HEADER,
    SUMMARIZER_HEADER, TEMPLATE_HEADER, UPDATE_FAILURE_HEADER, UPDATE_SUCCESS_HEADER,
};
use crate::orchestrator::{PipelineConfig, ReferenceCheck, ReferenceMatch, StabilityMetric};
use crate::prompt::{IoSpec, ModularPrompt, PromptComponentKind};

fn control(header: &str, reply: impl Into<String>) -> ScriptedBehavior {
    ScriptedBehavior::point(Matcher::contains([header]), reply)
}

fn when<const N: usize>(fragments: [&str; N], reply: &str) -> ScriptedBehavior {
    ScriptedBehavior::point(Matcher::contains(fragments), reply)
}

/// Template, knowledge, summarizer and success-update replies shared by the
/// pipeline scenarios.
fn common_controls(script: Script) -> Script {
    script
        .with(control(TEMPLATE_HEADER, "linear-chain"))
        .with(control(KNOWLEDGE_HEADER, "Sales amounts are recorded in USD."))
        .with(control(SUMMARIZER_HEADER, "summary unavailable"))
        .with(control(
            UPDATE_SUCCESS_HEADER,
            json!({"payload": "Row objects carry region and amount fields."}).to_string(),
        ))
}

fn config(task: &str, plan: serde_json::Value, script: Script, answer: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(task);
    let mut all = common_controls(Script::new().with(control(PLANNER_HEADER, plan.to_string())));
    all.behaviors.extend(script.behaviors);
    cfg.script = Some(all);
    cfg.reference = Some(ReferenceCheck { answer: answer.into(), matching: ReferenceMatch::Exact });
    cfg
}

fn subtask(id: &str, description: &str, deps: &[&str], io_spec: serde_json::Value) -> serde_json::Value {
    json!({"id": id, "description": description, "dependencies": deps, "io_spec": io_spec})
}

fn numeric() -> serde_json::Value {
    json!({"output_format": "numeric"})
}

fn rows_object() -> serde_json::Value {
    json!({"output_format": "json-object", "required_keys": ["rows"]})
}

/// Three stable subtasks that all succeed; reference answer "1250".
pub fn happy_path() -> PipelineConfig {
    let plan = json!({"subtasks": [
        subtask("s1", "Load the quarterly sales rows.", &[], rows_object()),
        subtask("s2", "Keep the north region rows.", &["s1"], rows_object()),
        subtask("s3", "Report the total of the north rows as a number.", &["s2"], numeric()),
    ]});
    let script = Script::new()
        .with(when(["Load the quarterly sales rows."], r#"{"rows": 12}"#))
        .with(when(["Keep the north region rows."], r#"{"rows": 5}"#))
        .with(when(["Report the total of the north rows"], "1250"));
    config("Report total north-region sales for the quarter.", plan, script, "1250")
}

/// The middle subtask's prompt is unstable until the reviewer rewrites its
/// requirements, then fails the JSON format once and passes after one
/// augmentation clause.
pub fn refine_then_augment() -> PipelineConfig {
    let plan = json!({"subtasks": [
        subtask("s1", "Load the sales table.", &[], rows_object()),
        subtask("s2", "Filter the rows.", &["s1"], rows_object()),
        subtask("s3", "Report the row count.", &["s2"], numeric()),
    ]});
    let script = Script::new()
        .with(control(
            REVIEW_HEADER,
            json!({"component": "requirements", "replacement": "Keep only rows whose region is north."}).to_string(),
        ))
        .with(control(
            FAILURE_REVIEW_HEADER,
            json!({"requirement": "Return a JSON object with the key rows."}).to_string(),
        ))
        .with(when(["Load the sales table."], r#"{"rows": 12}"#))
        .with(when(["Return a JSON object with the key rows."], r#"{"rows": 5}"#))
        .with(when(["Keep only rows whose region is north."], "rows: 5"))
        .with(ScriptedBehavior::cycle(Matcher::contains(["Filter the rows."]), ["north only", "every region"]))
        .with(when(["Report the row count."], "5"));
    config("Count the north region rows in the sales table.", plan, script, "5")
}

/// The middle subtask fails on every attempt under its planned description.
/// A strategy shift reformulates it, after which it succeeds and the final
/// subtask can use its result. Without the plan updater the run ends with a
/// failed subtask and a wrong answer.
pub fn permanent_failure() -> PipelineConfig {
    let plan = json!({"subtasks": [
        subtask("s1", "Sum the north sales.", &[], numeric()),
        subtask("s2", "Fetch the exchange rate from the live feed.", &["s1"], numeric()),
        subtask("s3", "Convert the total to euros.", &["s2"], numeric()),
    ]});
    let script = Script::new()
        .with(control(FAILURE_REVIEW_HEADER, json!({"requirement": "Answer with the rate as a number only."}).to_string()))
        .with(control(
            UPDATE_FAILURE_HEADER,
            json!({"description": "Use the fixed exchange rate from the task notes.", "payload": "The exchange rate is 1.1"})
                .to_string(),
        ))
        .with(when(["Sum the north sales."], "100"))
        .with(when(["Fetch the exchange rate from the live feed."], "ERROR: feed unavailable"))
        .with(when(["Use the fixed exchange rate from the task notes."], "1.1"))
        .with(when(["Convert the total to euros.", "[s2] 1.1"], "110"))
        .with(when(["Convert the total to euros."], "100"));
    config("Convert the north sales total to euros.", plan, script, "110")
}

/// One coarse subtask: executed whole it gives a wrong total; split into
/// three pieces it gives the right one.
pub fn coarse_subtask() -> PipelineConfig {
    let plan = json!({"subtasks": [subtask(
        "s1",
        "Parse the ledger. Convert each amount to USD. Drop refunds. Sum the amounts. Round to whole dollars. Report the total.",
        &[],
        numeric(),
    )]});
    let pieces = json!({"subtasks": [
        {"description": "Parse the ledger. Convert each amount to USD."},
        {"description": "Drop refunds. Sum the amounts."},
        {"description": "Round to whole dollars. Report the total."},
    ]});
    let script = Script::new()
        .with(control(SPLITTER_HEADER, pieces.to_string()))
        .with(control(COVERAGE_HEADER, "yes"))
        .with(when(["6. Report the total."], "1180"))
        .with(when(["1. Parse the ledger."], "Parsed 4 entries in USD."))
        .with(when(["1. Drop refunds."], "Sum after refunds: 1234.56"))
        .with(when(["1. Round to whole dollars."], "1235"));
    config("Report the refund-adjusted ledger total.", plan, script, "1235")
}

pub const AGREE: &str = "I agree with the forecast.";
pub const DISAGREE: &str = "I do not agree with the forecast.";

/// The verdict prompt alternates between agreeing and disagreeing; only the
/// embedding metric flags it, and only the reviewer can fix it.
pub fn flipping_verdict() -> PipelineConfig {
    let plan = json!({"subtasks": [
        subtask("s1", "Read the analyst memo.", &[], json!({})),
        subtask("s2", "State whether the analyst agrees with the forecast.", &["s1"], json!({})),
    ]});
    let script = Script::new()
        .with(control(
            REVIEW_HEADER,
            json!({"component": "requirements", "replacement": "State that the analyst agrees with the forecast, citing the memo."})
                .to_string(),
        ))
        .with(when(["Read the analyst memo."], "The memo supports the forecast."))
        .with(when(["citing the memo"], AGREE))
        .with(ScriptedBehavior::cycle(Matcher::contains(["State whether the analyst agrees"]), [AGREE, DISAGREE]));
    config("Say whether the analyst agrees with the forecast.", plan, script, AGREE)
}

/// Tasks for the ablation study: one control task plus one task per module.
pub fn ablation_suite() -> Vec<PipelineConfig> {
    vec![happy_path(), coarse_subtask(), flipping_verdict(), permanent_failure()]
}

/// Seeds each ablation task is run with.
pub const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

/// A named configuration change.
#[derive(Debug, Clone, Copy)]
pub struct Ablation {
    pub name: &'static str,
    pub apply: fn(&mut PipelineConfig),
}

pub fn ablations() -> Vec<Ablation> {
    vec![
        Ablation { name: "full system", apply: |_| {} },
        Ablation { name: "w/o subtask optimizer", apply: |c| c.toggles.subtask_optimizer = false },
        Ablation { name: "w/o reviewer", apply: |c| c.toggles.reviewer = false },
        Ablation { name: "KL metric instead of semantic stability", apply: |c| c.toggles.metric = StabilityMetric::Kl },
        Ablation { name: "w/o plan updater", apply: |c| c.toggles.plan_updater = false },
    ]
}

/// Invalid outputs for the correlation scenario; pairwise orthogonal, and
/// orthogonal to "42", under the hash embedder.
const NOISE: [&str; 4] = ["blue", "amber", "gold", "navy"];

/// Number of prompts in the correlation scenario.
pub const CORRELATION_PROMPTS: usize = 200;
const CORRELATION_RUNS: usize = 4;

/// Probability that prompt `k` answers correctly: half the prompts are
/// mostly wrong (0.1 to 0.3), half mostly right (0.8 to 1.0).
pub fn correlation_success_probability(k: usize) -> f64 {
    let half = CORRELATION_PROMPTS / 2;
    let (base, j) = if k < half { (0.1, k) } else { (0.8, k - half) };
    base + 0.2 * j as f64 / (half - 1) as f64
}

/// Pipeline runs over 200 independent numeric prompts. Prompt `k` answers
/// "42" with probability `correlation_success_probability(k)` and otherwise
/// one of four distinct words, so both its stability and its success
/// probability grow with that probability.
pub fn correlation_suite() -> Vec<PipelineConfig> {
    let per_run = CORRELATION_PROMPTS / CORRELATION_RUNS;
    (0..CORRELATION_RUNS)
        .map(|run| {
            let mut subtasks = Vec::with_capacity(per_run);
            let mut script =
                Script::new().with(control(TEMPLATE_HEADER, "linear-chain")).with(control(SUMMARIZER_HEADER, "unused"));
            for j in 0..per_run {
                // interleave so each run mixes both halves
                let k = j * CORRELATION_RUNS + run;
                let description = format!("Report measurement {k} of the batch.");
                subtasks.push(subtask(&format!("m{k}"), &description, &[], numeric()));
                let p = correlation_success_probability(k);
                let rest = (1.0 - p) / NOISE.len() as f64;
                let outcomes = std::iter::once(("42", p)).chain(NOISE.iter().map(|w| (*w, rest)));
                script.push(ScriptedBehavior::weighted(
                    Matcher::contains([description.as_str()]),
                    outcomes,
                    1000 + k as u64,
                ));
            }
            let plan = json!({ "subtasks": subtasks });
            let mut cfg = PipelineConfig::new(format!("Report every measurement of batch {run}."));
            let mut all = Script::new().with(control(PLANNER_HEADER, plan.to_string()));
            all.behaviors.extend(script.behaviors);
            cfg.script = Some(all);
            cfg.refinement.sample_count = 10;
            cfg.augmentation_retries = 0;
            cfg.toggles.reviewer = false;
            cfg.toggles.plan_updater = false;
            cfg.toggles.subtask_optimizer = false;
            cfg.toggles.domain_knowledge = false;
            cfg.seed = run as u64;
            cfg
        })
        .collect()
}

/// A prompt, script and configuration for exercising `refine_until_stable`
/// alone, with the expected step count and outcome.
pub struct RefinementScenario {
    pub name: &'static str,
    pub config: PipelineConfig,
    pub script: Script,
    pub prompt: ModularPrompt,
    pub expected_steps: usize,
    pub expected_outcome: crate::orchestrator::RefinementOutcome,
    /// Requirement clauses of the prompt that should be returned.
    pub expected_requirements: Vec<String>,
}

fn single_requirement_prompt(req: &str) -> ModularPrompt {
    ModularPrompt::new("analyst", vec![req.to_string()], "", "", IoSpec::free_text()).expect("valid prompt")
}

fn review(replacement: &str) -> String {
    json!({"component": "requirements", "replacement": replacement}).to_string()
}

pub fn refinement_scenarios() -> Vec<RefinementScenario> {
    use crate::orchestrator::RefinementOutcome::{Exhausted, Stabilized};

    let stable = RefinementScenario {
        name: "already stable",
        config: PipelineConfig::new("refinement"),
        script: Script::new().with(ScriptedBehavior::point(Matcher::Any, "the total is 42")),
        prompt: single_requirement_prompt("Report the total."),
        expected_steps: 0,
        expected_outcome: Stabilized,
        expected_requirements: vec!["Report the total.".into()],
    };

    let vague = single_requirement_prompt("Describe the result.");
    let fixed = vague
        .replace_component(PromptComponentKind::Requirements, "Report the total as a number.")
        .expect("valid replacement");
    let one_step = RefinementScenario {
        name: "one-step stabilization",
        config: PipelineConfig::new("refinement"),
        script: Script::new()
            .with(ScriptedBehavior::point(Matcher::Fingerprint(fixed.fingerprint()), "42"))
            .with(ScriptedBehavior::cycle(Matcher::Fingerprint(vague.fingerprint()), ["alpha", "omega"]))
            .with(control(REVIEW_HEADER, review("Report the total as a number."))),
        prompt: vague,
        expected_steps: 1,
        expected_outcome: Stabilized,
        expected_requirements: vec!["Report the total as a number.".into()],
    };

    // every revision stays below tau; v2 scores highest
    let mut exhausting = PipelineConfig::new("refinement");
    exhausting.refinement.max_iterations = 3;
    exhausting.refinement.sample_count = 4;
    let exhaustion = RefinementScenario {
        name: "exhaustion",
        config: exhausting,
        script: Script::new()
            .with(ScriptedBehavior::point(Matcher::contains([REVIEW_HEADER, "1. v0"]), review("v1")))
            .with(ScriptedBehavior::point(Matcher::contains([REVIEW_HEADER, "1. v1"]), review("v2")))
            .with(ScriptedBehavior::point(Matcher::contains([REVIEW_HEADER, "1. v2"]), review("v3")))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v0"]), ["red", "blue", "amber", "gold"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v1"]), ["red", "blue", "amber", "amber"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v2"]), ["red", "red", "blue", "blue"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v3"]), ["red", "blue", "blue", "amber"])),
        prompt: single_requirement_prompt("v0"),
        expected_steps: 3,
        expected_outcome: Exhausted,
        expected_requirements: vec!["v2".into()],
    };

    vec![stable, one_step, exhaustion]
}
