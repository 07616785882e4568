//! Coarse-to-fine planning: pick a strategy, then draft a concrete plan.
//!
//! Both steps go through the [`Researcher`] trait. The free functions
//! [`propose_strategy`] and [`draft_plan`] wrap any implementation with the
//! engine's conventions: the root always establishes a baseline without
//! consulting the researcher, and drafts are validated and regenerated with
//! the validation error as feedback, at most [`MAX_ATTEMPTS`] times.

use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::agents::chat::{ChatBackend, ChatMessage, EndpointError};
use crate::agents::plan::{parse_and_validate, PlanDocument, PlanError, PlanRules, SECTION_HEADERS};
use crate::agents::tools::{search_datasets, search_literature, DatasetProvider, LiteratureProvider};
use crate::model::{ExperimentPlan, ExperimentTree, NodeId, StrategyKind, TaskDefinition};

pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum ResearchError {
    #[error("endpoint error: {0}")]
    Endpoint(#[from] EndpointError),
    #[error("no strategy label in {attempts} replies; last reply: {last}")]
    UnparseableStrategy { attempts: usize, last: String },
    #[error("plan rejected after {attempts} drafts: {source}")]
    PlanValidation {
        attempts: usize,
        #[source]
        source: PlanError,
    },
    #[error("illegal strategy: {0}")]
    IllegalStrategy(String),
}

/// Everything a researcher sees when planning one iteration.
#[derive(Clone, Copy, Debug)]
pub struct ResearchRequest<'a> {
    pub task: &'a TaskDefinition,
    pub tree: &'a ExperimentTree,
    /// The selected node the new plan refines; `None` for the root.
    pub parent: Option<NodeId>,
    /// Id the new node will receive.
    pub new_node: NodeId,
    /// Rendered memory context for `parent`.
    pub context: &'a str,
    pub rules: PlanRules<'a>,
    pub master_seed: u64,
}

impl ResearchRequest<'_> {
    pub fn at_root(&self) -> bool {
        self.parent.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyChoice {
    pub strategy: StrategyKind,
    pub rationale: String,
}

pub trait Researcher: Send + Sync {
    fn name(&self) -> &str;

    /// Chooses one of [`StrategyKind::REFINEMENTS`] for a non-root node.
    fn propose_strategy(&self, req: &ResearchRequest<'_>) -> Result<StrategyChoice, ResearchError>;

    /// Writes a plan document. `feedback` carries the validation error of the
    /// previous draft, if any.
    fn draft_plan(
        &self,
        choice: &StrategyChoice,
        req: &ResearchRequest<'_>,
        feedback: Option<&str>,
    ) -> Result<PlanDocument, ResearchError>;
}

/// The strategy for the next node. The root is always a baseline.
pub fn propose_strategy(researcher: &dyn Researcher, req: &ResearchRequest<'_>) -> Result<StrategyChoice, ResearchError> {
    if req.at_root() {
        return Ok(StrategyChoice {
            strategy: StrategyKind::EstablishBaseline,
            rationale: "initial round of experiments to establish a baseline".into(),
        });
    }
    let choice = researcher.propose_strategy(req)?;
    if choice.strategy == StrategyKind::EstablishBaseline {
        return Err(ResearchError::IllegalStrategy("Establish Baseline is only legal at the root".into()));
    }
    Ok(choice)
}

/// Drafts, parses and validates a plan, feeding each rejection back to the
/// researcher.
pub fn draft_plan(
    researcher: &dyn Researcher,
    choice: &StrategyChoice,
    req: &ResearchRequest<'_>,
) -> Result<(PlanDocument, ExperimentPlan), ResearchError> {
    let mut feedback: Option<String> = None;
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let doc = researcher.draft_plan(choice, req, feedback.as_deref())?;
        match parse_and_validate(&doc.text, &req.rules) {
            Ok(plan) if plan.strategy != choice.strategy => {
                let e = PlanError::Validation(format!(
                    "strategy: plan says {} but {} was chosen",
                    plan.strategy, choice.strategy
                ));
                log::debug!("draft {attempt} rejected: {e}");
                feedback = Some(e.to_string());
                last = Some(e);
            }
            Ok(plan) => return Ok((doc, plan)),
            Err(e) => {
                log::debug!("draft {attempt} rejected: {e}");
                feedback = Some(e.to_string());
                last = Some(e);
            }
        }
    }
    Err(ResearchError::PlanValidation { attempts: MAX_ATTEMPTS, source: last.expect("at least one attempt") })
}

/// The earliest refinement label mentioned in `reply`.
pub fn parse_strategy_reply(reply: &str) -> Option<StrategyKind> {
    let lower = reply.to_lowercase();
    StrategyKind::REFINEMENTS
        .into_iter()
        .flat_map(|s| {
            [s.label().to_lowercase(), s.slug().to_string()]
                .into_iter()
                .filter_map(|needle| lower.find(&needle))
                .map(move |pos| (pos, s))
                .collect::<Vec<_>>()
        })
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, s)| s)
}

/// A researcher backed by a chat model.
pub struct LlmResearcher {
    backend: Arc<dyn ChatBackend>,
    literature: Option<Arc<dyn LiteratureProvider>>,
    datasets: Option<Arc<dyn DatasetProvider>>,
    search_k: usize,
}

impl LlmResearcher {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend, literature: None, datasets: None, search_k: 3 }
    }

    pub fn with_tools(
        mut self,
        literature: Arc<dyn LiteratureProvider>,
        datasets: Arc<dyn DatasetProvider>,
        k: usize,
    ) -> Self {
        self.literature = Some(literature);
        self.datasets = Some(datasets);
        self.search_k = k;
        self
    }

    fn system_prompt() -> ChatMessage {
        ChatMessage::system(
            "You are a research scientist improving a fine-tuned language model through a \
             sequence of experiments. Each experiment trains a small batch of configurations \
             and is scored on a held-out evaluation set.",
        )
    }

    fn task_brief(req: &ResearchRequest<'_>) -> String {
        let t = req.task;
        let c = &t.constraints;
        format!(
            "Task `{}`: {}\nPrimary metric: {} in [{}, {}]\nBase model: {}\n\
             Limits: at most {} training samples per dataset, {} configurations per experiment \
             ({} for the baseline grid).\nExisting datasets: {}",
            t.task_id,
            t.description.trim(),
            t.primary_metric.name,
            t.primary_metric.lo,
            t.primary_metric.hi,
            t.base_model_id,
            c.max_train_samples,
            c.max_parallel_configs,
            c.max_baseline_grid.max(c.max_parallel_configs),
            if req.rules.known_datasets.is_empty() {
                "(none)".to_string()
            } else {
                req.rules.known_datasets.iter().cloned().collect::<Vec<_>>().join(", ")
            }
        )
    }

    fn tool_notes(&self, req: &ResearchRequest<'_>) -> String {
        let mut out = String::new();
        let query = &req.task.description;
        if let Some(lit) = &self.literature {
            match search_literature(query, lit.as_ref(), self.search_k) {
                Ok(hits) if !hits.is_empty() => {
                    out.push_str("\nRelated literature:\n");
                    for p in hits {
                        let _ = writeln!(out, "- {} ({}): {}", p.title, p.source_id, crate::util::clip(&p.abstract_text, 300));
                    }
                }
                Ok(_) => {}
                Err(e) => log::warn!("literature search failed: {e}"),
            }
        }
        if let Some(ds) = &self.datasets {
            match search_datasets(query, ds.as_ref(), self.search_k) {
                Ok(hits) if !hits.is_empty() => {
                    out.push_str("\nCandidate datasets:\n");
                    for d in hits {
                        let size = d.size.map_or(String::new(), |s| format!(", {s} records"));
                        let _ = writeln!(out, "- {}{size}: {}", d.source_id, d.description);
                    }
                }
                Ok(_) => {}
                Err(e) => log::warn!("dataset search failed: {e}"),
            }
        }
        out
    }
}

impl Researcher for LlmResearcher {
    fn name(&self) -> &str {
        "llm"
    }

    fn propose_strategy(&self, req: &ResearchRequest<'_>) -> Result<StrategyChoice, ResearchError> {
        let options: Vec<&str> = StrategyKind::REFINEMENTS.iter().map(|s| s.label()).collect();
        let mut messages = vec![
            Self::system_prompt(),
            ChatMessage::user(format!(
                "{}\n\nExperiment history:\n{}\n{}\nChoose the next improvement strategy for node {}. \
                 Answer with exactly one of: {}. Then explain why on the following lines.",
                Self::task_brief(req),
                req.context,
                self.tool_notes(req),
                req.parent.map_or("root".to_string(), |p| p.to_string()),
                options.join(", ")
            )),
        ];
        let mut last = String::new();
        for _ in 0..MAX_ATTEMPTS {
            let reply = self.backend.complete(&messages)?;
            if let Some(strategy) = parse_strategy_reply(&reply) {
                return Ok(StrategyChoice { strategy, rationale: reply.trim().to_string() });
            }
            messages.push(ChatMessage::assistant(reply.clone()));
            messages.push(ChatMessage::user(format!("That is not one of the allowed strategies. Reply with one of: {}.", options.join(", "))));
            last = reply;
        }
        Err(ResearchError::UnparseableStrategy { attempts: MAX_ATTEMPTS, last: crate::util::clip(&last, 200) })
    }

    fn draft_plan(
        &self,
        choice: &StrategyChoice,
        req: &ResearchRequest<'_>,
        feedback: Option<&str>,
    ) -> Result<PlanDocument, ResearchError> {
        let mut prompt = format!(
            "{}\n\nExperiment history:\n{}\n{}\nStrategy: {} (slug `{}`)\nReasoning so far: {}\n\n\
             Write the plan for node {}. Use the sections {} in that order, then a ```json block \
             holding the plan object with fields mission, strategy, data_spec {{seed, steps, outputs}}, \
             configs, rationale. Every config's dataset_path must be `datasets/<name>.jsonl`, produced \
             by data_spec.outputs or already existing.",
            Self::task_brief(req),
            req.context,
            self.tool_notes(req),
            choice.strategy,
            choice.strategy.slug(),
            choice.rationale,
            req.new_node,
            SECTION_HEADERS.join(", ")
        );
        if let Some(f) = feedback {
            let _ = write!(prompt, "\n\nYour previous draft was rejected: {f}\nFix that problem.");
        }
        let reply = self.backend.complete(&[Self::system_prompt(), ChatMessage::user(prompt)])?;
        Ok(PlanDocument::new(reply))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::chat::{FnBackend, ScriptedBackend};
    use crate::agents::plan::render_plan;
    use crate::aidp::OperatorRegistry;
    use crate::search::tests::plan_with;
    use std::collections::BTreeSet;

    struct Fixture {
        task: TaskDefinition,
        tree: ExperimentTree,
        registry: OperatorRegistry,
        known: BTreeSet<String>,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                task: crate::agents::plan::tests::task(),
                tree: ExperimentTree::new(),
                registry: OperatorRegistry::with_builtins(),
                known: ["datasets/train.jsonl".to_string()].into_iter().collect(),
            }
        }

        fn req(&self, parent: Option<NodeId>) -> ResearchRequest<'_> {
            ResearchRequest {
                task: &self.task,
                tree: &self.tree,
                parent,
                new_node: NodeId(2),
                context: "(history)",
                rules: PlanRules {
                    task: &self.task,
                    at_root: parent.is_none(),
                    registry: &self.registry,
                    known_datasets: &self.known,
                },
                master_seed: 0,
            }
        }
    }

    #[test]
    fn root_is_forced_without_a_model_call() {
        let f = Fixture::new();
        let backend = Arc::new(ScriptedBackend::new(["Construct Synthetic Data"]));
        let r = LlmResearcher::new(backend.clone());
        let c = propose_strategy(&r, &f.req(None)).unwrap();
        assert_eq!(c.strategy, StrategyKind::EstablishBaseline);
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn strategy_labels_parse() {
        let f = Fixture::new();
        let r = LlmResearcher::new(Arc::new(ScriptedBackend::new(["Refine Data Pipeline\nbecause the data is noisy"])));
        assert_eq!(propose_strategy(&r, &f.req(Some(NodeId(1)))).unwrap().strategy, StrategyKind::RefineDataPipeline);
        assert_eq!(
            parse_strategy_reply("I'd adjust_training_scheme rather than refine data pipeline"),
            Some(StrategyKind::AdjustTrainingScheme)
        );
    }

    #[test]
    fn unknown_labels_exhaust_retries() {
        let f = Fixture::new();
        let backend = Arc::new(ScriptedBackend::new(["Try Harder"]));
        let r = LlmResearcher::new(backend.clone());
        assert!(matches!(
            propose_strategy(&r, &f.req(Some(NodeId(1)))),
            Err(ResearchError::UnparseableStrategy { attempts: 3, .. })
        ));
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn drafts_are_regenerated_with_feedback() {
        let f = Fixture::new();
        let good = render_plan(&plan_with(4, 1e-4)).text;
        let bad = render_plan(&plan_with(7, 1e-4)).text;
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        let backend = FnBackend(move |m: &[ChatMessage]| {
            let prompt = m.last().unwrap().content.clone();
            let mut log = log.lock().unwrap();
            log.push(prompt.contains("rejected"));
            Ok(if log.len() == 1 { bad.clone() } else { good.clone() })
        });
        let r = LlmResearcher::new(Arc::new(backend));
        let choice = StrategyChoice { strategy: StrategyKind::AdjustTrainingScheme, rationale: String::new() };
        let (_, plan) = draft_plan(&r, &choice, &f.req(Some(NodeId(1)))).unwrap();
        assert_eq!(plan.configs.len(), 4);
        assert_eq!(*seen.lock().unwrap(), vec![false, true]);
    }

    #[test]
    fn persistent_violations_fail_the_draft() {
        let f = Fixture::new();
        let bad = render_plan(&plan_with(7, 1e-4)).text;
        let r = LlmResearcher::new(Arc::new(ScriptedBackend::new([bad])));
        let choice = StrategyChoice { strategy: StrategyKind::AdjustTrainingScheme, rationale: String::new() };
        match draft_plan(&r, &choice, &f.req(Some(NodeId(1)))) {
            Err(ResearchError::PlanValidation { source, .. }) => assert!(source.to_string().contains("config count")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
