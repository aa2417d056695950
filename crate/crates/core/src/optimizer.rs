//! Prompt optimization: a Pareto-pool search loop for single payloads
//! (sub-agent prompts, judge prompts) and a joint accept/reject loop for whole
//! prompt bundles, sharing rollout-budget accounting.
//!
//! Budget discipline: every train-task evaluation and every re-simulated
//! episode costs exactly one rollout; held-out metric computations are free.
//! A candidate whose evaluation the budget cuts short is discarded rather than
//! inserted half-scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rubric::{CheckVerdict, Domain, RubricSpec, Verdict};
use crate::tracemodel::Trace;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

// ---------------------------------------------------------------------------
// Candidate pool
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Candidate<P> {
    pub payload: P,
    /// Score per train task, index-aligned with the task list.
    pub per_task_scores: Vec<f64>,
    pub parent: Option<usize>,
    pub rollouts_spent_at_creation: usize,
}

impl<P> Candidate<P> {
    pub fn train_mean(&self) -> f64 {
        if self.per_task_scores.is_empty() {
            return 0.0;
        }
        self.per_task_scores.iter().sum::<f64>() / self.per_task_scores.len() as f64
    }
}

/// `a` weakly dominates `b` when it is at least as good on every task and
/// strictly better on one.
fn dominates(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strictly_better = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly_better = true;
        }
    }
    strictly_better
}

#[derive(Debug)]
pub struct CandidatePool<P> {
    pub candidates: Vec<Candidate<P>>,
    /// Indices of non-dominated candidates, ordered by creation.
    pub pareto_front: Vec<usize>,
    pub rollout_budget: usize,
    pub rollouts_used: usize,
}

impl<P> CandidatePool<P> {
    pub fn new(rollout_budget: usize) -> Self {
        CandidatePool {
            candidates: Vec::new(),
            pareto_front: Vec::new(),
            rollout_budget,
            rollouts_used: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.rollout_budget - self.rollouts_used
    }

    /// Debit one rollout. Callers must check `remaining` first.
    pub fn spend_rollout(&mut self) {
        assert!(
            self.rollouts_used < self.rollout_budget,
            "rollout budget exceeded: this is a bookkeeping bug"
        );
        self.rollouts_used += 1;
    }

    pub fn insert(&mut self, candidate: Candidate<P>) -> usize {
        let id = self.candidates.len();
        self.candidates.push(candidate);
        self.recompute_front();
        id
    }

    fn recompute_front(&mut self) {
        self.pareto_front = (0..self.candidates.len())
            .filter(|&i| {
                !self.candidates.iter().enumerate().any(|(j, other)| {
                    j != i
                        && dominates(&other.per_task_scores, &self.candidates[i].per_task_scores)
                })
            })
            .collect();
    }

    /// Uniform draw over the front; creation order breaks nothing here because
    /// the front vector is already creation-ordered.
    pub fn sample_front(&self, rng: &mut ChaCha8Rng) -> Option<usize> {
        if self.pareto_front.is_empty() {
            return None;
        }
        Some(self.pareto_front[rng.gen_range(0..self.pareto_front.len())])
    }
}

// ---------------------------------------------------------------------------
// Generic payload search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rollouts: usize,
    pub best_heldout_score: f64,
}

/// Render a curve as the CSV the reporting tools consume.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("rollouts,best_heldout_score\n");
    for point in curve {
        out.push_str(&format!("{},{}\n", point.rollouts, point.best_heldout_score));
    }
    out
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome<P> {
    pub best: P,
    pub best_heldout_score: f64,
    pub seed_heldout_score: f64,
    pub curve: Vec<CurvePoint>,
    pub rollouts_used: usize,
    /// True when the train-best candidate differs from the held-out-best one:
    /// the search surface rewards something held-out data does not.
    pub train_heldout_divergence: bool,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolConfig {
    pub rollout_budget: usize,
    pub seed: u64,
}

/// Context handed to a proposer: the parent it mutates and where that parent
/// is weak.
pub struct ProposalContext<'a> {
    pub parent_train_scores: &'a [f64],
    pub parent_train_mean: f64,
    /// Train-task indices scoring below the parent's mean, worst first.
    pub weak_task_indices: Vec<usize>,
}

/// Pareto-pool payload search. Evaluates the seed first, then repeatedly
/// samples a front member, proposes a variant, and evaluates it on every
/// train task (one rollout per task evaluation). The returned payload is the
/// held-out argmax over fully evaluated candidates, which can never fall
/// below the seed's held-out score because the seed competes in the pool.
pub fn optimize_payload<P: Clone, T>(
    seed_payload: P,
    train: &[T],
    heldout: &[T],
    eval: &mut dyn FnMut(&P, &T) -> f64,
    heldout_eval: &mut dyn FnMut(&P, &T) -> f64,
    propose: &mut dyn FnMut(&P, &ProposalContext, &mut ChaCha8Rng) -> P,
    config: &PoolConfig,
) -> Result<OptimizeOutcome<P>, OptimizerError> {
    if train.is_empty() || heldout.is_empty() {
        return Err(OptimizerError::InvalidInput(
            "train and held-out task sets must be nonempty".into(),
        ));
    }
    if config.rollout_budget == 0 {
        return Err(OptimizerError::InvalidInput("rollout budget must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pool: CandidatePool<P> = CandidatePool::new(config.rollout_budget);
    let mut heldout_means: Vec<f64> = Vec::new();
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut best_heldout = f64::NEG_INFINITY;

    let heldout_mean = |payload: &P, heldout_eval: &mut dyn FnMut(&P, &T) -> f64| {
        heldout.iter().map(|t| heldout_eval(payload, t)).sum::<f64>() / heldout.len() as f64
    };

    loop {
        let (payload, parent) = if pool.candidates.is_empty() {
            (seed_payload.clone(), None)
        } else {
            let parent_id = pool.sample_front(&mut rng).expect("nonempty pool has a front");
            let parent = &pool.candidates[parent_id];
            let mean = parent.train_mean();
            let mut weak: Vec<usize> = (0..parent.per_task_scores.len())
                .filter(|&i| parent.per_task_scores[i] < mean)
                .collect();
            weak.sort_by(|&a, &b| {
                parent.per_task_scores[a]
                    .total_cmp(&parent.per_task_scores[b])
                    .then(a.cmp(&b))
            });
            let ctx = ProposalContext {
                parent_train_scores: &parent.per_task_scores,
                parent_train_mean: mean,
                weak_task_indices: weak,
            };
            (propose(&parent.payload, &ctx, &mut rng), Some(parent_id))
        };

        // Train evaluation, one rollout per task; a partial pass is discarded.
        if pool.remaining() < train.len() {
            break;
        }
        let created_at = pool.rollouts_used;
        let mut scores = Vec::with_capacity(train.len());
        for task in train {
            pool.spend_rollout();
            scores.push(eval(&payload, task));
        }

        let h = heldout_mean(&payload, heldout_eval);
        heldout_means.push(h);
        pool.insert(Candidate {
            payload,
            per_task_scores: scores,
            parent,
            rollouts_spent_at_creation: created_at,
        });
        if h > best_heldout {
            best_heldout = h;
        }
        curve.push(CurvePoint { rollouts: pool.rollouts_used, best_heldout_score: h.max(best_heldout) });

        if pool.remaining() < train.len() {
            break;
        }
    }

    if pool.candidates.is_empty() {
        // Budget too small for even one full train pass.
        let seed_h = heldout_mean(&seed_payload, heldout_eval);
        return Ok(OptimizeOutcome {
            best: seed_payload,
            best_heldout_score: seed_h,
            seed_heldout_score: seed_h,
            curve: Vec::new(),
            rollouts_used: pool.rollouts_used,
            train_heldout_divergence: false,
            pool_size: 0,
        });
    }

    // Best-so-far curve shape: each point is the running maximum.
    let mut running = f64::NEG_INFINITY;
    for point in &mut curve {
        running = running.max(point.best_heldout_score);
        point.best_heldout_score = running;
    }

    let argmax = |values: &[f64]| {
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = i;
            }
        }
        best
    };
    let heldout_best_id = argmax(&heldout_means);
    let train_means: Vec<f64> = pool.candidates.iter().map(|c| c.train_mean()).collect();
    let train_best_id = argmax(&train_means);

    Ok(OptimizeOutcome {
        best: pool.candidates[heldout_best_id].payload.clone(),
        best_heldout_score: heldout_means[heldout_best_id],
        seed_heldout_score: heldout_means[0],
        curve,
        rollouts_used: pool.rollouts_used,
        train_heldout_divergence: heldout_best_id != train_best_id,
        pool_size: pool.candidates.len(),
    })
}

// ---------------------------------------------------------------------------
// Failure identification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub trace_id: String,
    pub check_id: String,
    pub domain: Domain,
    pub evidence: String,
}

/// Collect every failed check across a scored batch, ordered heaviest domain
/// first so proposers see the most consequential failures at the top.
pub fn identify_failures(
    traces: &[Trace],
    verdicts: &[Verdict],
    spec: &RubricSpec,
) -> Vec<FailureSummary> {
    debug_assert_eq!(traces.len(), verdicts.len());
    let mut failures = Vec::new();
    for (trace, verdict) in traces.iter().zip(verdicts) {
        for check in &spec.checks {
            if verdict.get(&check.check_id) != Some(CheckVerdict::Fail) {
                continue;
            }
            let cited = cite_turn(trace, check.domain);
            failures.push(FailureSummary {
                trace_id: trace.session_id.clone(),
                check_id: check.check_id.clone(),
                domain: check.domain,
                evidence: format!("{} Cited turn: {}", check.fail_description, cited),
            });
        }
    }
    failures.sort_by(|a, b| {
        let wa = spec.domain_weights.get(&a.domain).copied().unwrap_or(0.0);
        let wb = spec.domain_weights.get(&b.domain).copied().unwrap_or(0.0);
        wb.total_cmp(&wa)
            .then_with(|| a.trace_id.cmp(&b.trace_id))
            .then_with(|| a.check_id.cmp(&b.check_id))
    });
    failures
}

/// The turn a failure summary cites: action-bearing checks cite the last
/// assistant turn with tool or item evidence, context checks cite the last
/// user turn, and anything else cites the final turn.
fn cite_turn(trace: &Trace, domain: Domain) -> String {
    let snippet = |text: &str| {
        let mut s = text.chars().take(120).collect::<String>();
        if text.chars().count() > 120 {
            s.push_str("...");
        }
        s
    };
    let turn = match domain {
        Domain::ShoppingExecution | Domain::Safety => trace
            .turns
            .iter()
            .rev()
            .find(|t| {
                t.role == crate::tracemodel::Role::Assistant
                    && (!t.tool_results.is_empty() || !t.items.is_empty())
            })
            .or_else(|| trace.assistant_turns().last()),
        Domain::Personalization => trace.user_turns().last(),
        Domain::ConversationalQuality => trace.assistant_turns().last(),
    };
    turn.map(|t| snippet(&t.text)).unwrap_or_else(|| "(no turns)".into())
}


// Re-simulation and the two full optimizers build on the agent runtime and
// user simulator; they live below in their own module.
pub use bundle_opt::*;

mod bundle_opt {
    use super::*;
    use crate::agentruntime::{
        observation_block, observation_line, parse_directives, parse_preferences_note,
        parse_result_line, parse_selection_task, run_episode, Directives, EpisodeConfig,
        NodeAction, NodePolicy, PromptBundle, Scaling, SimulatedUser,
        SubstitutionPolicy as SubPolicy, Verbosity,
    };
    use crate::backend::{CompletionBackend, CompletionRequest, Message};
    use crate::judge::{attributes_ok, oracle_judge, JudgePrompt};
    use crate::rubric::{activate_for, aggregate, TraceScore};
    use crate::tracemodel::SubagentExample;
    use crate::usersim::{persona_from_episode, EquivalenceChecker};
    use crate::worldsim::{item_matches_phrase, CatalogItem, World};
    use std::cell::RefCell;
    use std::collections::{BTreeMap, BTreeSet, VecDeque};
    use std::fmt::Write as _;

    // -----------------------------------------------------------------------
    // Proposers
    // -----------------------------------------------------------------------

    /// Produces the next payload to try from the current one plus the failure
    /// summaries observed under it.
    pub trait Proposer<P> {
        fn propose(
            &mut self,
            current: &P,
            failures: &[FailureSummary],
            rng: &mut ChaCha8Rng,
        ) -> P;
    }

    /// Always re-proposes the current payload; the no-progress baseline.
    pub struct IdentityProposer;

    impl<P: Clone> Proposer<P> for IdentityProposer {
        fn propose(&mut self, current: &P, _: &[FailureSummary], _: &mut ChaCha8Rng) -> P {
            current.clone()
        }
    }

    /// Replays a fixed queue of payloads, then echoes the current one.
    pub struct SequenceProposer<P> {
        queue: VecDeque<P>,
    }

    impl<P> SequenceProposer<P> {
        pub fn new(payloads: impl IntoIterator<Item = P>) -> Self {
            SequenceProposer { queue: payloads.into_iter().collect() }
        }
    }

    impl<P: Clone> Proposer<P> for SequenceProposer<P> {
        fn propose(&mut self, current: &P, _: &[FailureSummary], _: &mut ChaCha8Rng) -> P {
            self.queue.pop_front().unwrap_or_else(|| current.clone())
        }
    }

    /// One mutable axis of the directive grammar.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    pub enum DirectiveKey {
        Verbosity,
        PassPreferences,
        UsePreferences,
        MaxResults,
        SubstitutionPolicy,
        Scaling,
        PreferCheapest,
    }

    pub const DIRECTIVE_KEYS: [DirectiveKey; 7] = [
        DirectiveKey::Verbosity,
        DirectiveKey::PassPreferences,
        DirectiveKey::UsePreferences,
        DirectiveKey::MaxResults,
        DirectiveKey::SubstitutionPolicy,
        DirectiveKey::Scaling,
        DirectiveKey::PreferCheapest,
    ];

    /// Search breadths the mutating proposer draws from. Enumeration oracles
    /// in tests range over the same menu.
    pub const MAX_RESULTS_MENU: [usize; 4] = [1, 3, 5, 8];

    fn pick_other<T: PartialEq + Copy>(menu: &[T], current: T, rng: &mut ChaCha8Rng) -> T {
        let others: Vec<T> = menu.iter().copied().filter(|v| *v != current).collect();
        others[rng.gen_range(0..others.len())]
    }

    impl DirectiveKey {
        /// Rewrite this directive to a different value.
        pub fn mutate(self, d: &mut Directives, rng: &mut ChaCha8Rng) {
            match self {
                DirectiveKey::Verbosity => {
                    d.verbosity = pick_other(
                        &[Verbosity::Low, Verbosity::Med, Verbosity::High],
                        d.verbosity,
                        rng,
                    );
                }
                DirectiveKey::PassPreferences => d.pass_preferences = !d.pass_preferences,
                DirectiveKey::UsePreferences => d.use_preferences = !d.use_preferences,
                DirectiveKey::MaxResults => {
                    d.max_results = pick_other(&MAX_RESULTS_MENU, d.max_results, rng);
                }
                DirectiveKey::SubstitutionPolicy => {
                    d.substitution_policy = pick_other(
                        &[SubPolicy::Ask, SubPolicy::Allow, SubPolicy::Forbid],
                        d.substitution_policy,
                        rng,
                    );
                }
                DirectiveKey::Scaling => {
                    d.scaling = match d.scaling {
                        Scaling::Household => Scaling::Literal,
                        Scaling::Literal => Scaling::Household,
                    };
                }
                DirectiveKey::PreferCheapest => d.prefer_cheapest = !d.prefer_cheapest,
            }
        }
    }

    /// Directive axes worth mutating given a failed check. Unknown checks
    /// fall back to their domain's broadest lever.
    fn keys_for_failure(f: &FailureSummary) -> &'static [DirectiveKey] {
        match f.check_id.as_str() {
            "attribute_satisfaction" | "dietary_prefs" | "preferred_brands" => {
                &[DirectiveKey::UsePreferences]
            }
            "substitution_discipline" | "clarification" => &[DirectiveKey::SubstitutionPolicy],
            "context_consistent_scaling" | "quantity" => &[DirectiveKey::Scaling],
            "cart_completeness" | "overall_success" | "no_extras_or_dupes" => {
                &[DirectiveKey::SubstitutionPolicy, DirectiveKey::MaxResults]
            }
            "info_integrity" | "safety_compliance" | "tone_brand" | "context_retention" => {
                &[DirectiveKey::Verbosity]
            }
            _ => match f.domain {
                Domain::Personalization => {
                    &[DirectiveKey::UsePreferences, DirectiveKey::PassPreferences]
                }
                Domain::ShoppingExecution => &[DirectiveKey::SubstitutionPolicy],
                Domain::ConversationalQuality | Domain::Safety => &[DirectiveKey::Verbosity],
            },
        }
    }

    fn sample_distinct<T: Copy + PartialEq>(
        pool: &[T],
        want: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<T> {
        let mut remaining: Vec<T> = Vec::new();
        for v in pool {
            if !remaining.contains(v) {
                remaining.push(*v);
            }
        }
        let mut chosen = Vec::new();
        while chosen.len() < want && !remaining.is_empty() {
            let idx = rng.gen_range(0..remaining.len());
            chosen.push(remaining.swap_remove(idx));
        }
        chosen
    }

    /// Seeded mutation over a single node prompt's directive grammar: rewrite
    /// one or two directives per proposal, steering toward the axes implicated
    /// by the failure summaries.
    pub struct DirectiveMutationProposer;

    impl Proposer<String> for DirectiveMutationProposer {
        fn propose(
            &mut self,
            current: &String,
            failures: &[FailureSummary],
            rng: &mut ChaCha8Rng,
        ) -> String {
            let mut d = parse_directives(current);
            let mut targets: Vec<DirectiveKey> = Vec::new();
            for f in failures {
                for k in keys_for_failure(f) {
                    if !targets.contains(k) {
                        targets.push(*k);
                    }
                }
            }
            if targets.is_empty() {
                targets = DIRECTIVE_KEYS.to_vec();
            }
            let flips = if rng.gen_bool(0.5) { 1 } else { 2 };
            for key in sample_distinct(&targets, flips, rng) {
                key.mutate(&mut d, rng);
            }
            d.to_prompt()
        }
    }

    /// Directive slots worth mutating across the bundle given a failed check:
    /// the same axes as the single-prompt map, placed on the nodes that own
    /// the behavior.
    fn slots_for_failure(f: &FailureSummary) -> Vec<(&'static str, DirectiveKey)> {
        match f.check_id.as_str() {
            "attribute_satisfaction" | "dietary_prefs" | "preferred_brands" => vec![
                ("orchestrator", DirectiveKey::PassPreferences),
                ("item_selection", DirectiveKey::UsePreferences),
            ],
            "substitution_discipline" | "clarification" => {
                vec![("item_selection", DirectiveKey::SubstitutionPolicy)]
            }
            "context_consistent_scaling" | "quantity" => {
                vec![("quantity_adjustment", DirectiveKey::Scaling)]
            }
            "cart_completeness" | "overall_success" | "no_extras_or_dupes" => vec![
                ("item_selection", DirectiveKey::SubstitutionPolicy),
                ("item_selection", DirectiveKey::MaxResults),
            ],
            "info_integrity" | "safety_compliance" | "tone_brand" | "context_retention" => {
                vec![("orchestrator", DirectiveKey::Verbosity)]
            }
            _ => match f.domain {
                Domain::Personalization => vec![
                    ("orchestrator", DirectiveKey::PassPreferences),
                    ("item_selection", DirectiveKey::UsePreferences),
                ],
                Domain::ShoppingExecution => {
                    vec![("item_selection", DirectiveKey::SubstitutionPolicy)]
                }
                Domain::ConversationalQuality | Domain::Safety => {
                    vec![("orchestrator", DirectiveKey::Verbosity)]
                }
            },
        }
    }

    /// Seeded joint mutation over a prompt bundle: rewrite one or two
    /// (node, directive) slots per proposal. Failure summaries focus the slot
    /// pool, which is what lets coupled fixes (pass preferences downstream AND
    /// read them) surface as a single proposal.
    pub struct BundleMutationProposer;

    impl Proposer<PromptBundle> for BundleMutationProposer {
        fn propose(
            &mut self,
            current: &PromptBundle,
            failures: &[FailureSummary],
            rng: &mut ChaCha8Rng,
        ) -> PromptBundle {
            let mut slots: Vec<(&'static str, DirectiveKey)> = Vec::new();
            for f in failures {
                for slot in slots_for_failure(f) {
                    if !slots.contains(&slot) {
                        slots.push(slot);
                    }
                }
            }
            if slots.is_empty() {
                for node in crate::tracemodel::REGISTERED_NODES {
                    for key in DIRECTIVE_KEYS {
                        slots.push((node, key));
                    }
                }
            }
            let flips = if rng.gen_bool(0.5) { 1 } else { 2 };
            let mut bundle = current.clone();
            for (node, key) in sample_distinct(&slots, flips, rng) {
                let mut d = bundle.directives(node);
                key.mutate(&mut d, rng);
                bundle = bundle.with_prompt(node, d.to_prompt());
            }
            bundle
        }
    }

    fn failure_report(failures: &[FailureSummary]) -> String {
        let mut report = String::new();
        for f in failures.iter().take(12) {
            let _ = writeln!(
                report,
                "- [{:?}] {} on {}: {}",
                f.domain, f.check_id, f.trace_id, f.evidence
            );
        }
        if report.is_empty() {
            report.push_str("- none observed\n");
        }
        report
    }

    /// Reflective single-prompt proposer: asks a completion backend to rewrite
    /// the prompt given the failures. Empty replies leave the prompt unchanged.
    pub struct LlmPromptProposer<'a> {
        pub backend: &'a dyn CompletionBackend,
    }

    impl Proposer<String> for LlmPromptProposer<'_> {
        fn propose(
            &mut self,
            current: &String,
            failures: &[FailureSummary],
            _rng: &mut ChaCha8Rng,
        ) -> String {
            let request = CompletionRequest::new(vec![
                Message::system(
                    "You tune the prompt of one node in a grocery shopping assistant. \
                     Reply with the revised prompt text and nothing else.",
                ),
                Message::user(format!(
                    "Current prompt:\n{current}\n\nObserved failures:\n{}\nRevise the prompt \
                     to address the failures.",
                    failure_report(failures)
                )),
            ]);
            match self.backend.complete(&request) {
                Ok(text) if !text.trim().is_empty() => text.trim().to_string(),
                _ => current.clone(),
            }
        }
    }

    /// Reflective bundle proposer: asks a completion backend for a revised
    /// bundle as JSON. Unparseable or incomplete replies leave the bundle
    /// unchanged, so a flaky model degrades to no-op proposals.
    pub struct LlmBundleProposer<'a> {
        pub backend: &'a dyn CompletionBackend,
    }

    impl Proposer<PromptBundle> for LlmBundleProposer<'_> {
        fn propose(
            &mut self,
            current: &PromptBundle,
            failures: &[FailureSummary],
            _rng: &mut ChaCha8Rng,
        ) -> PromptBundle {
            let request = CompletionRequest::new(vec![
                Message::system(
                    "You tune the node prompts of a grocery shopping assistant. Reply with a \
                     JSON object mapping every node name to its revised prompt, nothing else.",
                ),
                Message::user(format!(
                    "Current bundle:\n{}\n\nObserved failures:\n{}\nRevise the bundle to \
                     address the failures.",
                    current.to_json(),
                    failure_report(failures)
                )),
            ]);
            let reply = match self.backend.complete(&request) {
                Ok(text) => text,
                Err(_) => return current.clone(),
            };
            let json = match (reply.find('{'), reply.rfind('}')) {
                (Some(a), Some(b)) if a < b => &reply[a..=b],
                _ => return current.clone(),
            };
            match PromptBundle::from_json(json) {
                Ok(bundle) if bundle.validate().is_ok() => bundle,
                _ => current.clone(),
            }
        }
    }

    // -----------------------------------------------------------------------
    // Invocation-level scoring
    // -----------------------------------------------------------------------

    /// Score one node invocation against its micro checks. Checks that do not
    /// apply to what the node did come back N/A, so callers can hand the
    /// non-N/A set to `aggregate` as the active set.
    ///
    /// Only nodes with a defined micro rubric are judgeable.
    pub fn judge_node_invocation(
        node_name: &str,
        input_context: &str,
        actions: &[NodeAction],
    ) -> Result<Verdict, OptimizerError> {
        match node_name {
            "item_selection" => Ok(judge_item_selection(input_context, actions)),
            "quantity_adjustment" => Ok(judge_quantity(input_context, actions)),
            other => Err(OptimizerError::InvalidInput(format!(
                "no invocation-level scorer for node {other}"
            ))),
        }
    }

    fn judge_item_selection(input_context: &str, actions: &[NodeAction]) -> Verdict {
        let mut verdict = Verdict::default();
        let task = observation_line(input_context, "TASK: ").unwrap_or("");
        let Some(goal) = parse_selection_task(task) else {
            // An unreadable task supports no judgment; everything is N/A and
            // the example scores zero for every prompt alike.
            verdict.set("attribute_satisfaction", CheckVerdict::Na);
            verdict.set("substitution_discipline", CheckVerdict::Na);
            verdict.set("tool_groundedness", CheckVerdict::Na);
            return verdict;
        };
        let results: Vec<CatalogItem> = observation_block(input_context, "RESULTS:")
            .iter()
            .filter_map(|l| parse_result_line(l))
            .collect();
        let prefs = parse_preferences_note(&observation_block(input_context, "CONTEXT:").join("\n"));
        let dietary: BTreeSet<String> = prefs.map(|p| p.dietary).unwrap_or_default();

        let selections: Vec<(&str, bool)> = actions
            .iter()
            .filter_map(|a| match a {
                NodeAction::SelectItem { item_id, substitution } => {
                    Some((item_id.as_str(), *substitution))
                }
                _ => None,
            })
            .collect();
        let asked_substitution = actions
            .iter()
            .any(|a| matches!(a, NodeAction::AskUser { substitution: true, .. }));
        let refused = actions.iter().any(|a| matches!(a, NodeAction::Unavailable { .. }));

        let is_direct = |item: &CatalogItem| {
            item_matches_phrase(item, &goal.description) && attributes_ok(&goal, item, &results)
        };
        let diet_ok =
            |item: &CatalogItem| dietary.iter().all(|t| item.attribute_tags.contains(t));
        let direct_exists = results.iter().any(is_direct);
        let compliant_exists =
            !dietary.is_empty() && results.iter().any(|i| is_direct(i) && diet_ok(i));
        let find = |id: &str| results.iter().find(|i| i.item_id == id);

        // Groundedness: every selected id must come from the result rows.
        verdict.set(
            "tool_groundedness",
            if selections.is_empty() {
                CheckVerdict::Na
            } else if selections.iter().all(|(id, _)| find(id).is_some()) {
                CheckVerdict::Pass
            } else {
                CheckVerdict::Fail
            },
        );

        // Attributes: the choice must meet the best standard the results can
        // honor. A demanded attribute no result carries is not held against
        // the choice.
        verdict.set(
            "attribute_satisfaction",
            if selections.is_empty() {
                CheckVerdict::Na
            } else {
                let ok = selections.iter().all(|(id, _)| {
                    let Some(item) = find(id) else { return false };
                    if compliant_exists {
                        is_direct(item) && diet_ok(item)
                    } else if direct_exists {
                        is_direct(item)
                    } else {
                        true
                    }
                });
                if ok { CheckVerdict::Pass } else { CheckVerdict::Fail }
            },
        );

        // Substitution discipline applies whenever the request had no direct
        // answer or the node treated it as a substitution. Committing an item
        // without asking fails; so does refusing while results were on offer.
        let substitution_in_play = !direct_exists
            || asked_substitution
            || refused
            || selections.iter().any(|(_, sub)| *sub);
        verdict.set(
            "substitution_discipline",
            if !substitution_in_play {
                CheckVerdict::Na
            } else {
                let silent_commit = selections.iter().any(|(_, sub)| *sub)
                    || (!direct_exists && !selections.is_empty());
                let refused_despite_options = refused && !results.is_empty();
                let stalled = !direct_exists
                    && selections.is_empty()
                    && !asked_substitution
                    && !refused;
                if silent_commit || refused_despite_options || stalled {
                    CheckVerdict::Fail
                } else {
                    CheckVerdict::Pass
                }
            },
        );
        verdict
    }

    fn judge_quantity(input_context: &str, actions: &[NodeAction]) -> Verdict {
        let hint: Option<u32> = observation_line(input_context, "QTY_HINT: ")
            .filter(|v| *v != "none")
            .and_then(|v| v.parse().ok());
        let household: Option<u32> = observation_line(input_context, "HOUSEHOLD: ")
            .filter(|v| *v != "unknown")
            .and_then(|v| v.parse().ok());
        let per_person = observation_line(input_context, "ITEM_TAGS: ")
            .map(|tags| tags.split(',').any(|t| t.trim() == "per_person"))
            .unwrap_or(false);
        let expected = match (hint, per_person, household) {
            (Some(q), _, _) => q.max(1),
            (None, true, Some(n)) => n.max(1),
            _ => 1,
        };
        let answered = actions.iter().find_map(|a| match a {
            NodeAction::SetQuantity { quantity } => Some(*quantity),
            _ => None,
        });
        let mut verdict = Verdict::default();
        verdict.set(
            "context_consistent_scaling",
            if answered == Some(expected) { CheckVerdict::Pass } else { CheckVerdict::Fail },
        );
        verdict
    }

    /// Run a node prompt over one logged invocation and aggregate its micro
    /// verdicts into a score. Policy errors and contract mismatches score 0.
    pub fn score_node_invocation(
        node_name: &str,
        prompt: &str,
        example: &SubagentExample,
        micro_spec: &RubricSpec,
        policy: &mut dyn NodePolicy,
    ) -> (f64, Verdict) {
        let reply = match policy.act(node_name, prompt, &example.input_context) {
            Ok(reply) => reply,
            Err(_) => return (0.0, Verdict::default()),
        };
        let verdict =
            match judge_node_invocation(node_name, &example.input_context, &reply.actions) {
                Ok(v) => v,
                Err(_) => return (0.0, Verdict::default()),
            };
        let active: BTreeSet<String> = verdict
            .checks
            .iter()
            .filter(|(_, v)| **v != CheckVerdict::Na)
            .map(|(id, _)| id.clone())
            .collect();
        let score = aggregate(&verdict, micro_spec, &active).map(|s| s.reward).unwrap_or(0.0);
        (score, verdict)
    }

    // -----------------------------------------------------------------------
    // Sub-agent optimization
    // -----------------------------------------------------------------------

    /// Search node prompts over a logged invocation dataset, scoring each
    /// candidate on every train example (one rollout apiece) and selecting on
    /// the held-out mean micro score. Train-side failures feed the proposer.
    #[allow(clippy::too_many_arguments)]
    pub fn optimize_subagent(
        node_name: &str,
        seed_prompt: &str,
        train: &[SubagentExample],
        heldout: &[SubagentExample],
        micro_spec: &RubricSpec,
        proposer: &mut dyn Proposer<String>,
        policy: &mut dyn NodePolicy,
        config: &PoolConfig,
    ) -> Result<OptimizeOutcome<String>, OptimizerError> {
        judge_node_invocation(node_name, "", &[])?;
        if train.is_empty() || heldout.is_empty() {
            return Err(OptimizerError::InvalidInput(
                "train and held-out example sets must be nonempty".into(),
            ));
        }
        for ex in train {
            if heldout.contains(ex) {
                return Err(OptimizerError::InvalidInput(format!(
                    "example {}#{} appears in both train and held-out splits",
                    ex.trace_id, ex.turn_index
                )));
            }
        }

        let policy = RefCell::new(policy);
        // Failures observed per candidate prompt; duplicates from re-proposed
        // prompts are harmless because lookups only steer mutation targets.
        let failures: RefCell<BTreeMap<String, Vec<FailureSummary>>> =
            RefCell::new(BTreeMap::new());

        let mut eval = |prompt: &String, ex: &SubagentExample| -> f64 {
            let (score, verdict) =
                score_node_invocation(node_name, prompt, ex, micro_spec, *policy.borrow_mut());
            let mut sink = failures.borrow_mut();
            let entry = sink.entry(prompt.clone()).or_default();
            for check in &micro_spec.checks {
                if verdict.get(&check.check_id) == Some(CheckVerdict::Fail) {
                    entry.push(FailureSummary {
                        trace_id: ex.trace_id.clone(),
                        check_id: check.check_id.clone(),
                        domain: check.domain,
                        evidence: ex.input_context.lines().next().unwrap_or("").to_string(),
                    });
                }
            }
            score
        };
        let mut heldout_eval = |prompt: &String, ex: &SubagentExample| -> f64 {
            score_node_invocation(node_name, prompt, ex, micro_spec, *policy.borrow_mut()).0
        };
        let mut propose = |parent: &String, _ctx: &ProposalContext, rng: &mut ChaCha8Rng| {
            let map = failures.borrow();
            let parent_failures = map.get(parent).map(Vec::as_slice).unwrap_or(&[]);
            proposer.propose(parent, parent_failures, rng)
        };

        optimize_payload(
            seed_prompt.to_string(),
            train,
            heldout,
            &mut eval,
            &mut heldout_eval,
            &mut propose,
            config,
        )
    }

    // -----------------------------------------------------------------------
    // Re-simulation
    // -----------------------------------------------------------------------

    /// Rollout harness shared by every episode-level evaluation: the world,
    /// the action-equivalence checker gating logged replay, the node policy
    /// that executes prompts, and the episode shape.
    pub struct Simulator<'a> {
        pub world: &'a World,
        pub checker: &'a dyn EquivalenceChecker,
        pub policy: &'a mut dyn NodePolicy,
        pub max_turns: usize,
        pub context_budget: usize,
    }

    impl<'a> Simulator<'a> {
        pub fn new(
            world: &'a World,
            checker: &'a dyn EquivalenceChecker,
            policy: &'a mut dyn NodePolicy,
        ) -> Self {
            let defaults = EpisodeConfig::new("");
            Simulator {
                world,
                checker,
                policy,
                max_turns: defaults.max_turns,
                context_budget: defaults.context_budget,
            }
        }

        /// Roll one logged episode under a bundle: the simulated user replays
        /// the logged turns while the agent's actions stay equivalent to the
        /// log, then synthesizes from the episode's persona. Re-running the
        /// bundle that produced the log reproduces it exactly.
        pub fn resimulate(
            &mut self,
            logged: &Trace,
            bundle: &PromptBundle,
        ) -> Result<Trace, OptimizerError> {
            let persona = persona_from_episode(logged);
            let mut user = SimulatedUser {
                persona,
                logged: Some(logged),
                checker: self.checker,
                world: self.world,
            };
            let config = EpisodeConfig {
                session_id: logged.session_id.clone(),
                max_turns: self.max_turns,
                context_budget: self.context_budget,
            };
            run_episode(bundle, self.world, &mut user, self.policy, &config)
                .map_err(|e| OptimizerError::Runtime(e.to_string()))
        }
    }

    // -----------------------------------------------------------------------
    // Trajectory judging
    // -----------------------------------------------------------------------

    /// A judged trajectory: the verdict vector and its aggregate score.
    #[derive(Debug, Clone)]
    pub struct JudgedTrace {
        pub verdict: Verdict,
        pub score: TraceScore,
    }

    /// Verdict producer the bundle optimizer scores trajectories with.
    pub trait TraceJudge {
        fn spec(&self) -> &RubricSpec;
        fn judge(&mut self, trace: &Trace) -> Result<JudgedTrace, OptimizerError>;
    }

    /// Rule-based judge over a rubric: deterministic and free of any backend.
    pub struct OracleTraceJudge<'a> {
        pub world: &'a World,
        pub spec: RubricSpec,
    }

    impl TraceJudge for OracleTraceJudge<'_> {
        fn spec(&self) -> &RubricSpec {
            &self.spec
        }

        fn judge(&mut self, trace: &Trace) -> Result<JudgedTrace, OptimizerError> {
            let verdict = oracle_judge(trace, self.world, &self.spec);
            let active = activate_for(&self.spec, trace, self.world);
            let score = aggregate(&verdict, &self.spec, &active)
                .map_err(|e| OptimizerError::Runtime(e.to_string()))?;
            Ok(JudgedTrace { verdict, score })
        }
    }

    /// Prompted judge over a completion backend, for runs where trajectory
    /// scoring itself goes through a model.
    pub struct LlmTraceJudge<'a> {
        pub world: &'a World,
        pub spec: RubricSpec,
        pub prompt: JudgePrompt,
        pub backend: &'a dyn CompletionBackend,
    }

    impl TraceJudge for LlmTraceJudge<'_> {
        fn spec(&self) -> &RubricSpec {
            &self.spec
        }

        fn judge(&mut self, trace: &Trace) -> Result<JudgedTrace, OptimizerError> {
            let verdict =
                crate::judge::llm_judge(trace, &self.spec, &self.prompt, self.backend, self.world)
                    .map_err(|e| OptimizerError::Runtime(e.to_string()))?;
            let active = activate_for(&self.spec, trace, self.world);
            let score = aggregate(&verdict, &self.spec, &active)
                .map_err(|e| OptimizerError::Runtime(e.to_string()))?;
            Ok(JudgedTrace { verdict, score })
        }
    }

    // -----------------------------------------------------------------------
    // Joint bundle optimization
    // -----------------------------------------------------------------------

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum Decision {
        Accepted,
        Rejected,
    }

    /// One accept/reject entry in the bundle optimizer's log.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct AcceptanceRecord {
        pub iteration: usize,
        pub proposed_digest: String,
        pub train_score: f64,
        pub heldout_score: f64,
        pub decision: Decision,
        pub reason: String,
        pub rollouts_used: usize,
    }

    /// Append-only JSON-lines rendering of the acceptance log.
    pub fn acceptance_log_to_jsonl(log: &[AcceptanceRecord]) -> String {
        let mut out = String::new();
        for record in log {
            out.push_str(&serde_json::to_string(record).expect("acceptance record serializes"));
            out.push('\n');
        }
        out
    }

    #[derive(Debug, Clone)]
    pub struct MamutConfig {
        pub rollout_budget: usize,
        pub seed: u64,
        /// Seed episodes re-simulated per proposal evaluation.
        pub batch_size: usize,
        /// Check whose held-out Pass regressing to Fail vetoes a proposal.
        pub safety_check: String,
    }

    impl MamutConfig {
        pub fn new(rollout_budget: usize, seed: u64) -> Self {
            MamutConfig {
                rollout_budget,
                seed,
                batch_size: 8,
                safety_check: "safety_compliance".into(),
            }
        }
    }

    #[derive(Debug)]
    pub struct MamutOutcome {
        /// The last accepted bundle; the seed bundle when nothing was accepted.
        pub best: PromptBundle,
        pub log: Vec<AcceptanceRecord>,
        /// Held-out score of the incumbent bundle after each evaluation.
        pub curve: Vec<CurvePoint>,
        pub rollouts_used: usize,
        pub seed_heldout_score: f64,
        pub best_heldout_score: f64,
    }

    struct HeldoutAssessment {
        mean: f64,
        /// Episodes whose safety check the bundle passes outright.
        safety_passing: BTreeSet<String>,
        per_episode: Vec<f64>,
    }

    fn assess_heldout(
        bundle: &PromptBundle,
        heldout: &[Trace],
        sim: &mut Simulator,
        judge: &mut dyn TraceJudge,
        safety_check: &str,
    ) -> Result<HeldoutAssessment, OptimizerError> {
        let mut rewards = Vec::with_capacity(heldout.len());
        let mut safety_passing = BTreeSet::new();
        for episode in heldout {
            let trace = sim.resimulate(episode, bundle)?;
            let judged = judge.judge(&trace)?;
            rewards.push(judged.score.reward);
            if judged.verdict.get(safety_check) == Some(CheckVerdict::Pass) {
                safety_passing.insert(episode.session_id.clone());
            }
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        Ok(HeldoutAssessment { mean, safety_passing, per_episode: rewards })
    }

    /// Joint bundle search by accept/reject: each iteration re-simulates a
    /// sampled seed batch under the incumbent to identify failures, proposes a
    /// bundle update, scores it on the batch (one rollout per episode) and on
    /// held-out, and accepts only a strict held-out improvement that regresses
    /// no episode's safety check. Held-out scoring is the selection metric and
    /// costs no budget.
    pub fn mamut_optimize(
        bundle0: &PromptBundle,
        seed_episodes: &[Trace],
        heldout_episodes: &[Trace],
        judge: &mut dyn TraceJudge,
        proposer: &mut dyn Proposer<PromptBundle>,
        sim: &mut Simulator,
        config: &MamutConfig,
    ) -> Result<MamutOutcome, OptimizerError> {
        bundle0
            .validate()
            .map_err(|e| OptimizerError::InvalidInput(e.to_string()))?;
        if seed_episodes.is_empty() || heldout_episodes.is_empty() {
            return Err(OptimizerError::InvalidInput(
                "seed and held-out episode sets must be nonempty".into(),
            ));
        }
        if config.batch_size == 0 {
            return Err(OptimizerError::InvalidInput("batch size must be >= 1".into()));
        }
        let seed_ids: BTreeSet<&str> =
            seed_episodes.iter().map(|t| t.session_id.as_str()).collect();
        if let Some(shared) = heldout_episodes
            .iter()
            .find(|t| seed_ids.contains(t.session_id.as_str()))
        {
            return Err(OptimizerError::InvalidInput(format!(
                "episode {} appears in both seed and held-out sets",
                shared.session_id
            )));
        }
        let batch_size = config.batch_size.min(seed_episodes.len());
        if config.rollout_budget < 2 * batch_size {
            return Err(OptimizerError::InvalidInput(format!(
                "budget {} cannot cover one iteration of {} batch re-simulations",
                config.rollout_budget,
                2 * batch_size
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pool: CandidatePool<PromptBundle> = CandidatePool::new(config.rollout_budget);

        let mut current = bundle0.clone();
        let mut incumbent =
            assess_heldout(&current, heldout_episodes, sim, judge, &config.safety_check)?;
        let seed_heldout_score = incumbent.mean;
        pool.insert(Candidate {
            payload: current.clone(),
            per_task_scores: incumbent.per_episode.clone(),
            parent: None,
            rollouts_spent_at_creation: 0,
        });
        let mut accepted_parent = 0usize;
        let mut curve = vec![CurvePoint { rollouts: 0, best_heldout_score: incumbent.mean }];
        let mut log: Vec<AcceptanceRecord> = Vec::new();
        let mut iteration = 0usize;

        while pool.remaining() >= 2 * batch_size {
            iteration += 1;

            // The incumbent's view of a fresh batch, for failure reflection.
            let batch: Vec<&Trace> =
                rand::seq::index::sample(&mut rng, seed_episodes.len(), batch_size)
                    .iter()
                    .map(|i| &seed_episodes[i])
                    .collect();
            let mut batch_traces = Vec::with_capacity(batch_size);
            let mut batch_verdicts = Vec::with_capacity(batch_size);
            for episode in &batch {
                pool.spend_rollout();
                let trace = sim.resimulate(episode, &current)?;
                let judged = judge.judge(&trace)?;
                batch_traces.push(trace);
                batch_verdicts.push(judged.verdict);
            }
            let failures = identify_failures(&batch_traces, &batch_verdicts, judge.spec());

            let proposal = proposer.propose(&current, &failures, &mut rng);
            proposal.validate().map_err(|e| {
                OptimizerError::Runtime(format!("proposer produced an invalid bundle: {e}"))
            })?;

            let mut train_rewards = Vec::with_capacity(batch_size);
            for episode in &batch {
                pool.spend_rollout();
                let trace = sim.resimulate(episode, &proposal)?;
                let judged = judge.judge(&trace)?;
                train_rewards.push(judged.score.reward);
            }
            let train_score = train_rewards.iter().sum::<f64>() / train_rewards.len() as f64;

            let assessment =
                assess_heldout(&proposal, heldout_episodes, sim, judge, &config.safety_check)?;
            let regressed = incumbent
                .safety_passing
                .iter()
                .find(|id| !assessment.safety_passing.contains(*id))
                .cloned();

            let (decision, reason) = if let Some(episode_id) = regressed {
                (
                    Decision::Rejected,
                    format!(
                        "safety_veto: held-out episode {episode_id} regressed {} Pass->Fail",
                        config.safety_check
                    ),
                )
            } else if assessment.mean > incumbent.mean {
                (Decision::Accepted, "heldout_improved".to_string())
            } else {
                (Decision::Rejected, "no_gain".to_string())
            };

            log.push(AcceptanceRecord {
                iteration,
                proposed_digest: proposal.digest(),
                train_score,
                heldout_score: assessment.mean,
                decision,
                reason,
                rollouts_used: pool.rollouts_used,
            });

            if decision == Decision::Accepted {
                current = proposal;
                incumbent = assessment;
                accepted_parent = pool.insert(Candidate {
                    payload: current.clone(),
                    per_task_scores: incumbent.per_episode.clone(),
                    parent: Some(accepted_parent),
                    rollouts_spent_at_creation: pool.rollouts_used,
                });
            }
            curve.push(CurvePoint {
                rollouts: pool.rollouts_used,
                best_heldout_score: incumbent.mean,
            });
        }

        Ok(MamutOutcome {
            best: current,
            log,
            curve,
            rollouts_used: pool.rollouts_used,
            seed_heldout_score,
            best_heldout_score: incumbent.mean,
        })
    }
}
