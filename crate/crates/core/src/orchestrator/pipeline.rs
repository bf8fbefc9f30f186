use super::{ExecutionResult, Orchestrator, OrchestratorError, PipelineConfig};
use crate::backend::{Embedder, Generator};
use crate::plan::{Plan, SubtaskStatus};
use crate::trace::{EventKind, ExecutionTrace, RunStatus, TraceHeader, TraceSink};

/// Result of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub trace: ExecutionTrace,
    pub status: RunStatus,
    pub plan: Option<Plan>,
    pub final_output: Option<String>,
}

/// Builds the configured backends and runs the task.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, OrchestratorError> {
    cfg.validate()?;
    let generator = cfg.generator.build_generator(cfg.script.clone(), cfg.seed)?;
    let embedder = cfg.embedder.build_embedder()?;
    run_pipeline_with(cfg, generator.as_ref(), embedder.as_ref())
}

/// Template selection, planning, subtask optimization, then for each
/// subtask in topological order: prompt construction, stability gate,
/// execution with requirement augmentation, summarization and plan update.
///
/// A planning failure ends the run early with a `planning-failed` terminal
/// event; backend errors outside execution abort the run.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    generator: &dyn Generator,
    embedder: &dyn Embedder,
) -> Result<PipelineRun, OrchestratorError> {
    cfg.validate()?;
    let sink = TraceSink::new();
    let outcome = {
        let mut orch = Orchestrator::new(cfg, generator, embedder, &sink);
        drive(&mut orch)
    };
    let (status, plan, final_output) = match outcome {
        Ok((plan, output)) => (RunStatus::Completed, Some(plan), output),
        Err(OrchestratorError::PlanningFailure { attempts, reason }) => {
            sink.record(EventKind::Warning {
                code: "planning-failure".into(),
                subtask: None,
                message: format!("after {attempts} attempt(s): {reason}"),
            });
            (RunStatus::PlanningFailed, None, None)
        }
        Err(e) => return Err(e),
    };
    sink.record(EventKind::RunFinished { status, final_output: final_output.clone(), plan: plan.clone() });
    Ok(PipelineRun { trace: sink.into_trace(TraceHeader::new(cfg)), status, plan, final_output })
}

fn drive(orch: &mut Orchestrator<'_>) -> Result<(Plan, Option<String>), OrchestratorError> {
    let task = orch.cfg.task.clone();
    let template = orch.select_interaction_template(&task);
    let mut plan = orch.decompose_task(&task, template)?;
    if orch.cfg.toggles.subtask_optimizer {
        plan = orch.optimize_subtasks(&plan, orch.cfg.target_granularity);
    }
    let ids: Vec<String> = plan.subtasks.iter().map(|s| s.id.clone()).collect();
    let mut last_output = None;
    for id in &ids {
        last_output = run_subtask(orch, &mut plan, id)?;
    }
    Ok((plan, last_output))
}

/// Runs one subtask to its final status; returns the output when it succeeded.
fn run_subtask(orch: &mut Orchestrator<'_>, plan: &mut Plan, id: &str) -> Result<Option<String>, OrchestratorError> {
    let mut reformulated = false;
    loop {
        let built = orch.build_prompt(plan, id)?;
        let mut prompt = match orch.refine_until_stable(Some(id), built) {
            Ok((p, _)) => p,
            Err(OrchestratorError::ReviewFailure { prompt, .. }) => *prompt,
            Err(e) => return Err(e),
        };
        orch.set_status(plan, id, SubtaskStatus::StablePromptReady)?;
        orch.sink.record(EventKind::PromptSelected { subtask: id.to_string(), prompt: prompt.clone() });

        let mut result: ExecutionResult = orch.execute_subtask(plan, id, &prompt, 0)?;
        for attempt in 1..=orch.cfg.augmentation_retries {
            if result.is_ok() {
                break;
            }
            prompt = orch.augment_requirements(&prompt, &result);
            orch.set_status(plan, id, SubtaskStatus::StablePromptReady)?;
            orch.sink.record(EventKind::PromptSelected { subtask: id.to_string(), prompt: prompt.clone() });
            result = orch.execute_subtask(plan, id, &prompt, attempt)?;
        }

        if result.is_ok() {
            let output = result.output.clone().unwrap_or_default();
            let sub = plan.get(id).expect("subtask exists").clone();
            orch.summarize(&output, plan, &sub);
            if orch.cfg.toggles.plan_updater {
                orch.update_plan(plan, &result)?;
            }
            return Ok(Some(output));
        }
        if !orch.cfg.toggles.plan_updater || reformulated {
            return Ok(None);
        }
        orch.update_plan(plan, &result)?;
        if plan.get(id).map(|s| s.status) != Some(SubtaskStatus::Reformulated) {
            return Ok(None);
        }
        reformulated = true;
    }
}
