use super::agents::parse_review;
use super::{
    CallPurpose, Orchestrator, OrchestratorError, PromptScore, RefinementHistory, RefinementOutcome, RefinementStep,
    StabilityMetric,
};
use crate::backend::STABILITY_TEMPERATURE;
use crate::metrics::{kl_stability, semantic_stability};
use crate::prompt::{fingerprint, ModularPrompt, PromptComponentKind};
use crate::trace::EventKind;

impl Orchestrator<'_> {
    /// Draws N samples of the rendered prompt and scores them with the
    /// configured metric. Samples and score are appended to the trace.
    pub fn evaluate_prompt_stability(
        &self,
        subtask: Option<&str>,
        prompt: &ModularPrompt,
    ) -> Result<(PromptScore, Vec<String>), OrchestratorError> {
        let n = self.cfg.refinement.sample_count;
        let text = prompt.render();
        let samples = self.call(CallPurpose::StabilitySampling, subtask, &text, STABILITY_TEMPERATURE, n)?;
        let score = match self.cfg.toggles.metric {
            StabilityMetric::Semantic => {
                let vectors = self.embedder.embed(&samples)?;
                self.sink
                    .record(EventKind::Embedding { subtask: subtask.map(str::to_string), vectors: vectors.clone() });
                let stability = semantic_stability(&vectors)?;
                PromptScore {
                    metric: StabilityMetric::Semantic,
                    value: stability.value,
                    sample_count: stability.sample_count,
                    stability: Some(stability),
                    kl_divergence: None,
                }
            }
            StabilityMetric::Kl => {
                let kl = kl_stability(&samples, self.cfg.kl_alpha)?;
                PromptScore {
                    metric: StabilityMetric::Kl,
                    value: (-kl).exp(),
                    sample_count: samples.len(),
                    stability: None,
                    kl_divergence: Some(kl),
                }
            }
        };
        self.sink.record(EventKind::Score {
            subtask: subtask.map(str::to_string),
            prompt_revision: prompt.revision(),
            prompt_fingerprint: fingerprint(&text),
            score: score.clone(),
        });
        Ok((score, samples))
    }

    /// Evaluate, review, revise until the score reaches τ or the iteration
    /// budget runs out. Returns the best-scoring revision seen.
    ///
    /// With the reviewer disabled the prompt is scored once and returned;
    /// a sub-threshold score is then reported as exhausted.
    pub fn refine_until_stable(
        &self,
        subtask: Option<&str>,
        prompt: ModularPrompt,
    ) -> Result<(ModularPrompt, RefinementHistory), OrchestratorError> {
        let tau = self.cfg.refinement.tau;
        let budget = if self.cfg.toggles.reviewer { self.cfg.refinement.max_iterations as usize } else { 0 };

        let (score, mut samples) = self.evaluate_prompt_stability(subtask, &prompt)?;
        let mut history =
            RefinementHistory { initial: score.clone(), steps: Vec::new(), outcome: RefinementOutcome::Exhausted };
        let mut best = (prompt.clone(), score.value);
        let mut current = (prompt, score);

        loop {
            if current.1.value >= tau {
                history.outcome = RefinementOutcome::Stabilized;
                break;
            }
            if history.steps.len() >= budget {
                break;
            }
            let Some((component, revised)) = self.review(subtask, &current.0, &samples, &current.1)? else {
                self.finish_refinement(subtask, &history, &best);
                return Err(OrchestratorError::ReviewFailure {
                    attempts: self.cfg.review_reasks + 1,
                    prompt: Box::new(best.0),
                    history: Box::new(history),
                });
            };
            let (after, next_samples) = self.evaluate_prompt_stability(subtask, &revised)?;
            history.steps.push(RefinementStep {
                revision: revised.revision(),
                component,
                before: current.1.clone(),
                after: after.clone(),
            });
            if after.value > best.1 {
                best = (revised.clone(), after.value);
            }
            samples = next_samples;
            current = (revised, after);
        }
        self.finish_refinement(subtask, &history, &best);
        Ok((best.0, history))
    }

    fn finish_refinement(&self, subtask: Option<&str>, history: &RefinementHistory, best: &(ModularPrompt, f64)) {
        self.sink.record(EventKind::RefinementFinished {
            subtask: subtask.map(str::to_string),
            outcome: history.outcome,
            steps: history.steps.len(),
            best_revision: best.0.revision(),
            best_value: best.1,
        });
    }

    /// One reviewer cycle with bounded re-asks. `Ok(None)` when no reply
    /// names a usable component.
    fn review(
        &self,
        subtask: Option<&str>,
        prompt: &ModularPrompt,
        samples: &[String],
        score: &PromptScore,
    ) -> Result<Option<(PromptComponentKind, ModularPrompt)>, OrchestratorError> {
        let tau = self.cfg.refinement.tau;
        let base = self.prompts.stability_review(prompt, samples, score.value, tau, score.stability.as_ref());
        for attempt in 0..=self.cfg.review_reasks {
            let text = if attempt == 0 {
                base.clone()
            } else {
                format!("{base}\nYour previous reply could not be used. Name exactly one component.\n")
            };
            let reply =
                match self.call(CallPurpose::Review, subtask, &text, self.cfg.refinement.reviewer_temperature, 1) {
                    Ok(mut out) => out.pop().unwrap_or_default(),
                    Err(_) => continue,
                };
            let Some(revision) = parse_review(&reply) else {
                self.warn("review-unusable", subtask, format!("attempt {}", attempt + 1));
                continue;
            };
            match prompt.replace_component(revision.component, &revision.replacement) {
                Ok(next) => {
                    self.sink.record(EventKind::Revision {
                        subtask: subtask.map(str::to_string),
                        component: revision.component,
                        prompt: next.clone(),
                    });
                    return Ok(Some((revision.component, next)));
                }
                Err(e) => self.warn("review-unusable", subtask, e.to_string()),
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::super::agents::REVIEW_HEADER;
    use super::super::test_support::Harness;
    use super::super::PipelineConfig;
    use super::*;
    use crate::backend::{HashEmbedder, Matcher, Script, ScriptedBehavior};
    use crate::metrics::cosine_distance;
    use crate::prompt::IoSpec;

    fn prompt(req: &str) -> ModularPrompt {
        ModularPrompt::new("analyst", vec![req.to_string()], "", "", IoSpec::free_text()).unwrap()
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig::new("t")
    }

    #[test]
    fn point_mass_scores_one_and_is_deterministic() {
        let script = Script::new().with(ScriptedBehavior::point(Matcher::Any, "the total is 42"));
        let h = Harness::new(cfg(), script.clone());
        let (a, _) = h.orchestrator().evaluate_prompt_stability(None, &prompt("Sum it.")).unwrap();
        assert!((a.value - 1.0).abs() < 1e-12);
        let h2 = Harness::new(cfg(), script);
        let (b, _) = h2.orchestrator().evaluate_prompt_stability(None, &prompt("Sum it.")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orthogonal_pair_scores_zero() {
        let (x, y) = ("alpha", "omega");
        let d = cosine_distance(&HashEmbedder::embed_one(x), &HashEmbedder::embed_one(y)).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "hash features collide: {d}");
        let mut c = cfg();
        c.refinement.sample_count = 2;
        let h = Harness::new(c, Script::new().with(ScriptedBehavior::cycle(Matcher::Any, [x, y])));
        let (score, samples) = h.orchestrator().evaluate_prompt_stability(None, &prompt("Say it.")).unwrap();
        assert_eq!(samples, [x, y]);
        assert!(score.value.abs() < 1e-12);
    }

    #[test]
    fn kl_metric_scores_exp_negative_divergence() {
        let mut c = cfg();
        c.toggles.metric = StabilityMetric::Kl;
        c.refinement.sample_count = 2;
        let h = Harness::new(c, Script::new().with(ScriptedBehavior::cycle(Matcher::Any, ["a a", "b b"])));
        let (score, _) = h.orchestrator().evaluate_prompt_stability(None, &prompt("x")).unwrap();
        let kl = 0.5 * 3f64.ln();
        assert!((score.kl_divergence.unwrap() - kl).abs() < 1e-12);
        assert!((score.value - (-kl).exp()).abs() < 1e-12);
    }

    fn review_reply(component: &str, replacement: &str) -> String {
        serde_json::json!({"component": component, "replacement": replacement}).to_string()
    }

    #[test]
    fn already_stable_takes_no_steps() {
        let h = Harness::new(cfg(), Script::new().with(ScriptedBehavior::point(Matcher::Any, "same")));
        let (p, hist) = h.orchestrator().refine_until_stable(None, prompt("x")).unwrap();
        assert_eq!(hist.outcome, RefinementOutcome::Stabilized);
        assert!(hist.steps.is_empty());
        assert_eq!(p.revision(), 0);
    }

    #[test]
    fn one_step_stabilization() {
        let vague = prompt("Describe the result.");
        let fixed =
            vague.replace_component(PromptComponentKind::Requirements, "Report the total as a number.").unwrap();
        let script = Script::new()
            .with(ScriptedBehavior::point(Matcher::Fingerprint(fixed.fingerprint()), "42"))
            .with(ScriptedBehavior::cycle(Matcher::Fingerprint(vague.fingerprint()), ["alpha", "omega"]))
            .with(ScriptedBehavior::point(
                Matcher::contains([REVIEW_HEADER]),
                review_reply("requirements", "Report the total as a number."),
            ));
        let h = Harness::new(cfg(), script);
        let (p, hist) = h.orchestrator().refine_until_stable(Some("s1"), vague).unwrap();
        assert_eq!(hist.outcome, RefinementOutcome::Stabilized);
        assert_eq!(hist.steps.len(), 1);
        assert_eq!(hist.steps[0].component, PromptComponentKind::Requirements);
        assert!(hist.initial.value < 0.7);
        assert!((hist.steps[0].after.value - 1.0).abs() < 1e-12);
        assert_eq!(p, fixed);
    }

    #[test]
    fn exhaustion_returns_argmax_revision() {
        let mut c = cfg();
        c.refinement.max_iterations = 3;
        c.refinement.sample_count = 4;
        // each revision's outputs depend on the requirement text; revision 2 is the best but still below tau
        let script = Script::new()
            .with(ScriptedBehavior::point(
                Matcher::contains([REVIEW_HEADER, "1. v0"]),
                review_reply("requirements", "v1"),
            ))
            .with(ScriptedBehavior::point(
                Matcher::contains([REVIEW_HEADER, "1. v1"]),
                review_reply("requirements", "v2"),
            ))
            .with(ScriptedBehavior::point(
                Matcher::contains([REVIEW_HEADER, "1. v2"]),
                review_reply("requirements", "v3"),
            ))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v0"]), ["red", "blue", "amber", "gold"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v1"]), ["red", "blue", "amber", "amber"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v2"]), ["red", "red", "blue", "blue"]))
            .with(ScriptedBehavior::cycle(Matcher::contains(["1. v3"]), ["red", "blue", "blue", "amber"]));
        let h = Harness::new(c, script);
        let (p, hist) = h.orchestrator().refine_until_stable(None, prompt("v0")).unwrap();
        assert_eq!(hist.outcome, RefinementOutcome::Exhausted);
        assert_eq!(hist.steps.len(), 3);
        let values: Vec<f64> =
            std::iter::once(hist.initial.value).chain(hist.steps.iter().map(|s| s.after.value)).collect();
        let argmax = values.iter().enumerate().fold(0, |m, (i, v)| if *v > values[m] { i } else { m });
        assert_eq!(argmax, 2, "{values:?}");
        assert_eq!(p.requirements(), ["v2"]);
        assert_eq!(p.revision(), 2);
        assert_eq!(hist.best_value(), values[2]);
    }

    #[test]
    fn unusable_review_is_a_failure_with_history() {
        let script = Script::new()
            .with(ScriptedBehavior::point(Matcher::contains([REVIEW_HEADER]), "it is the tone"))
            .with(ScriptedBehavior::cycle(Matcher::Any, ["alpha", "omega"]));
        let h = Harness::new(cfg(), script);
        let err = h.orchestrator().refine_until_stable(None, prompt("x")).unwrap_err();
        match err {
            OrchestratorError::ReviewFailure { attempts, history, prompt: p } => {
                assert_eq!(attempts, 3);
                assert!(history.steps.is_empty());
                assert_eq!(p.revision(), 0);
            }
            other => panic!("{other}"),
        }
        assert_eq!(h.warnings(), ["review-unusable"; 3]);
    }

    #[test]
    fn reviewer_disabled_reports_exhausted_without_steps() {
        let mut c = cfg();
        c.toggles.reviewer = false;
        let h = Harness::new(c, Script::new().with(ScriptedBehavior::cycle(Matcher::Any, ["alpha", "omega"])));
        let (_, hist) = h.orchestrator().refine_until_stable(None, prompt("x")).unwrap();
        assert_eq!(hist.outcome, RefinementOutcome::Exhausted);
        assert!(hist.steps.is_empty());
    }
}
