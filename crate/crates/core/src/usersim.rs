//! Hybrid simulated user: replays logged responses while the agent's actions
//! stay equivalent to the log, and switches permanently to persona-driven
//! synthesis the moment they diverge.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CompletionBackend;
use crate::goals::{self, GoalItem};
use crate::tracemodel::{final_cart_lenient, Role, Trace, Turn};
use crate::worldsim::{item_matches_phrase, Money, ToolRequest, World};

#[derive(Debug, Error)]
pub enum UserSimError {
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("invalid persona: {0}")]
    InvalidPersona(String),
}

// ---------------------------------------------------------------------------
// Persona
// ---------------------------------------------------------------------------

/// One thing the simulated user wants to end up with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaGoal {
    pub description: String,
    #[serde(default)]
    pub required_attributes: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_quantity: Option<u32>,
}

/// The latent constraints a synthesized user holds: what they want, what
/// they refuse, and how long they will put up with a session going nowhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_cap: Option<Money>,
    #[serde(default)]
    pub dietary: BTreeSet<String>,
    #[serde(default = "default_household")]
    pub household_size: u32,
    pub goal_items: Vec<PersonaGoal>,
    #[serde(default)]
    pub preferred_brands: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred_store: Option<String>,
    #[serde(default = "default_patience")]
    pub patience: u32,
}

fn default_household() -> u32 {
    1
}

pub const DEFAULT_PATIENCE: u32 = 12;

fn default_patience() -> u32 {
    DEFAULT_PATIENCE
}

impl Persona {
    pub fn validate(&self) -> Result<(), UserSimError> {
        if self.patience < 1 {
            return Err(UserSimError::InvalidPersona("patience must be >= 1".into()));
        }
        if self.goal_items.is_empty() {
            return Err(UserSimError::InvalidPersona(
                "shopping personas need at least one goal item".into(),
            ));
        }
        if self.household_size < 1 {
            return Err(UserSimError::InvalidPersona("household_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(document: &str) -> Result<Persona, UserSimError> {
        let persona: Persona = serde_json::from_str(document)
            .map_err(|e| UserSimError::InvalidPersona(e.to_string()))?;
        persona.validate()?;
        Ok(persona)
    }

    fn goal_as_item(goal: &PersonaGoal) -> GoalItem {
        GoalItem {
            description: goal.description.clone(),
            required_attributes: goal.required_attributes.clone(),
            desired_quantity: goal.desired_quantity,
            servings: None,
        }
    }
}

/// Derive a persona from a logged episode: dialogue-stated goals, budget and
/// restrictions, merged with the profile preferences block.
pub fn persona_from_episode(logged: &Trace) -> Persona {
    let statements: Vec<&str> = logged.user_turns().map(|t| t.text.as_str()).collect();
    let extracted = goals::extract_goals(&statements);
    let prefs = &logged.user_preferences;

    let mut dietary = prefs.dietary.clone();
    dietary.extend(extracted.dietary.iter().cloned());
    let mut preferred_brands = prefs.preferred_brands.clone();
    preferred_brands.extend(extracted.preferred_brands.iter().cloned());

    Persona {
        budget_cap: extracted.budget_cap,
        dietary,
        household_size: prefs.household_size,
        goal_items: extracted
            .items
            .iter()
            .map(|g| PersonaGoal {
                description: g.description.clone(),
                required_attributes: g.required_attributes.clone(),
                desired_quantity: g.desired_quantity.or(g.servings),
            })
            .collect(),
        preferred_brands,
        preferred_store: prefs.preferred_store.clone(),
        patience: DEFAULT_PATIENCE,
    }
}

// ---------------------------------------------------------------------------
// Action equivalence
// ---------------------------------------------------------------------------

/// What an agent did in a turn, as far as the user simulator cares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentAction {
    Tool(ToolRequest),
    Message(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceVerdict {
    pub equivalent: bool,
    pub reason: String,
}

impl EquivalenceVerdict {
    pub fn equivalent() -> Self {
        EquivalenceVerdict { equivalent: true, reason: String::new() }
    }

    pub fn different(reason: impl Into<String>) -> Self {
        let reason = reason.into();
        debug_assert!(!reason.is_empty());
        EquivalenceVerdict { equivalent: false, reason }
    }
}

/// Pluggable action comparison; the reference implementation is canonical
/// equality, and an inference-backed checker can stand in for it.
pub trait EquivalenceChecker {
    fn check(&self, logged: &AgentAction, new: &AgentAction) -> EquivalenceVerdict;
}

/// Deterministic reference checker: same tool and canonically equal
/// arguments, or same normalized message text.
pub struct CanonicalChecker;

fn normalize_text(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn canonical_arg(value: &crate::worldsim::ArgValue) -> String {
    use crate::worldsim::ArgValue;
    match value {
        ArgValue::Bool(b) => format!("bool:{b}"),
        ArgValue::Int(n) => format!("int:{n}"),
        ArgValue::Text(s) => format!("text:{}", normalize_text(s)),
    }
}

impl EquivalenceChecker for CanonicalChecker {
    fn check(&self, logged: &AgentAction, new: &AgentAction) -> EquivalenceVerdict {
        match (logged, new) {
            (AgentAction::Tool(a), AgentAction::Tool(b)) => {
                if a.tool_name != b.tool_name {
                    return EquivalenceVerdict::different(format!(
                        "tool {:?} vs {:?}",
                        a.tool_name, b.tool_name
                    ));
                }
                // Arguments live in ordered maps, so one pass finds the first
                // differing key on either side.
                for (key, value) in &a.arguments {
                    match b.arguments.get(key) {
                        None => {
                            return EquivalenceVerdict::different(format!(
                                "argument {key} missing from the new action"
                            ));
                        }
                        Some(other) if canonical_arg(value) != canonical_arg(other) => {
                            return EquivalenceVerdict::different(format!(
                                "argument {key} differs"
                            ));
                        }
                        Some(_) => {}
                    }
                }
                for key in b.arguments.keys() {
                    if !a.arguments.contains_key(key) {
                        return EquivalenceVerdict::different(format!(
                            "argument {key} missing from the logged action"
                        ));
                    }
                }
                EquivalenceVerdict::equivalent()
            }
            (AgentAction::Message(a), AgentAction::Message(b)) => {
                if normalize_text(a) == normalize_text(b) {
                    EquivalenceVerdict::equivalent()
                } else {
                    EquivalenceVerdict::different("message text differs")
                }
            }
            _ => EquivalenceVerdict::different("one action is a tool call, the other a message"),
        }
    }
}

/// Inference-backed checker: asks a model whether the two actions mean the
/// same thing. Anything other than a clear yes is treated as divergence, so
/// backend trouble degrades to synthesis rather than a wrong replay.
pub struct InferenceChecker<'a> {
    pub backend: &'a dyn CompletionBackend,
}

fn describe_action(action: &AgentAction) -> String {
    match action {
        AgentAction::Tool(req) => serde_json::to_string(req).unwrap_or_default(),
        AgentAction::Message(text) => format!("message: {text}"),
    }
}

impl EquivalenceChecker for InferenceChecker<'_> {
    fn check(&self, logged: &AgentAction, new: &AgentAction) -> EquivalenceVerdict {
        use crate::backend::{CompletionRequest, Message};
        let prompt = format!(
            "Do these two shopping-assistant actions mean the same thing?\n\
             Logged: {}\nNew: {}\nAnswer YES or NO, then a short reason.",
            describe_action(logged),
            describe_action(new)
        );
        let request = CompletionRequest::new(vec![Message::user(prompt)]);
        match self.backend.complete(&request) {
            Ok(reply) => {
                let normalized = reply.trim().to_lowercase();
                if normalized.starts_with("yes") {
                    EquivalenceVerdict::equivalent()
                } else {
                    EquivalenceVerdict::different(reply.trim().to_string())
                }
            }
            Err(e) => EquivalenceVerdict::different(format!("checker backend failed: {e}")),
        }
    }
}

/// Compare one action pair with the supplied checker.
pub fn action_equivalent(
    logged: &AgentAction,
    new: &AgentAction,
    checker: &dyn EquivalenceChecker,
) -> EquivalenceVerdict {
    checker.check(logged, new)
}

// ---------------------------------------------------------------------------
// Turn production
// ---------------------------------------------------------------------------

/// How a produced user turn came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnMode {
    Replayed,
    Synthesized,
}

/// Why a terminating turn ended the session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    Satisfied,
    PatienceExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserTurn {
    pub message: String,
    pub terminate: bool,
    pub mode: TurnMode,
    pub end_reason: Option<EndReason>,
}

/// The comparable actions of an assistant turn: every tool call, or the
/// message text when the turn called no tools.
fn turn_actions(turn: &Turn) -> Vec<AgentAction> {
    if turn.tool_calls.is_empty() {
        vec![AgentAction::Message(turn.text.clone())]
    } else {
        turn.tool_calls.iter().map(|req| AgentAction::Tool(req.clone())).collect()
    }
}

/// The single action a driver reports for a turn.
pub fn primary_action(turn: &Turn) -> AgentAction {
    turn.tool_calls
        .first()
        .map(|req| AgentAction::Tool(req.clone()))
        .unwrap_or_else(|| AgentAction::Message(turn.text.clone()))
}

/// Walk the prefix against the log and find where replay broke, if anywhere.
/// Before the divergence point, user turns must match the log exactly.
fn divergence_point(
    prefix: &Trace,
    logged: &Trace,
    checker: &dyn EquivalenceChecker,
) -> Result<Option<usize>, UserSimError> {
    for (i, turn) in prefix.turns.iter().enumerate() {
        let Some(logged_turn) = logged.turns.get(i) else {
            // The log ran out while the conversation kept going.
            return Ok(Some(i));
        };
        if turn.role != logged_turn.role {
            return Ok(Some(i));
        }
        match turn.role {
            Role::User => {
                if turn.text != logged_turn.text {
                    return Err(UserSimError::ContractViolation(format!(
                        "prefix user turn {i} does not match the logged turn it claims to replay"
                    )));
                }
            }
            Role::Assistant => {
                let ours = turn_actions(turn);
                let theirs = turn_actions(logged_turn);
                if ours.len() != theirs.len() {
                    return Ok(Some(i));
                }
                for (a, b) in theirs.iter().zip(&ours) {
                    if !checker.check(a, b).equivalent {
                        return Ok(Some(i));
                    }
                }
            }
        }
    }
    Ok(None)
}

/// Items the final assistant turn put forward, resolved against the store.
fn items_proposed_last<'w>(prefix: &Trace, world: &'w World) -> Vec<&'w crate::worldsim::CatalogItem> {
    let Some(turn) = prefix.turns.iter().rev().find(|t| t.role == Role::Assistant) else {
        return Vec::new();
    };
    let store_id = prefix
        .first_selected_store()
        .map(|s| s.store_id.clone())
        .unwrap_or_default();
    let catalog = world.catalog(&store_id).unwrap_or(&[]);
    let mut ids: Vec<&str> = Vec::new();
    for attempt in &turn.items {
        if let Some(id) = attempt.selected_item_id.as_deref() {
            ids.push(id);
        }
    }
    for result in &turn.tool_results {
        if result.is_ok() {
            for line in &result.added_items {
                if !ids.contains(&line.item_id.as_str()) {
                    ids.push(&line.item_id);
                }
            }
        }
    }
    ids.into_iter().filter_map(|id| catalog.iter().find(|c| c.item_id == id)).collect()
}

struct SynthesisState<'a> {
    unmet: Vec<&'a PersonaGoal>,
    cart_total: Option<Money>,
    over_budget: bool,
    /// (item name, missing tag) for every cart item breaking a restriction.
    dietary_violations: Vec<(String, String)>,
    satisfied: bool,
}

fn assess<'a>(persona: &'a Persona, prefix: &Trace, world: &World) -> SynthesisState<'a> {
    let cart = final_cart_lenient(prefix);
    let catalog = world.catalog(&cart.store_id).unwrap_or(&[]);
    let cart_items: Vec<(&crate::worldsim::CatalogItem, u32)> = cart
        .lines
        .iter()
        .filter_map(|l| catalog.iter().find(|c| c.item_id == l.item_id).map(|c| (c, l.quantity)))
        .collect();

    let mut unmet = Vec::new();
    for goal in &persona.goal_items {
        let as_item = Persona::goal_as_item(goal);
        let met = cart_items.iter().any(|(item, _)| {
            item_matches_phrase(item, &goal.description)
                && crate::judge::attributes_ok(&as_item, item, catalog)
        });
        if !met {
            unmet.push(goal);
        }
    }

    // The persona's restrictions apply to the whole basket: anything the
    // agent put in the cart must carry every dietary tag.
    let mut dietary_violations = Vec::new();
    for (item, _) in &cart_items {
        for tag in &persona.dietary {
            if !item.attribute_tags.contains(tag) {
                dietary_violations.push((item.name.clone(), tag.clone()));
            }
        }
    }

    let cart_total = world.cart_total(&cart).ok();
    let over_budget = match (persona.budget_cap, cart_total) {
        (Some(cap), Some(total)) => total > cap,
        (Some(_), None) => !cart.lines.is_empty(),
        (None, _) => false,
    };

    let satisfied =
        unmet.is_empty() && !over_budget && dietary_violations.is_empty();
    SynthesisState { unmet, cart_total, over_budget, dietary_violations, satisfied }
}

fn cents_to_dollars(cents: Money) -> String {
    if cents % 100 == 0 {
        format!("${}", cents / 100)
    } else {
        format!("${}.{:02}", cents / 100, cents % 100)
    }
}

fn list_phrase(parts: &[String]) -> String {
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        _ => format!("{} and {}", parts[..parts.len() - 1].join(", "), parts[parts.len() - 1]),
    }
}

fn goal_request_phrase(goal: &PersonaGoal) -> String {
    let mut words: Vec<String> = Vec::new();
    if let Some(qty) = goal.desired_quantity {
        words.push(qty.to_string());
    }
    for attr in &goal.required_attributes {
        words.push(attr.clone());
    }
    words.push(goal.description.clone());
    words.join(" ")
}

/// Answer the question in the agent's last message from persona fields.
fn answer_clarification(persona: &Persona, question: &str, state: &SynthesisState) -> String {
    let q = question.to_lowercase();
    if q.contains("budget") || q.contains("spend") || q.contains("price range") {
        return match persona.budget_cap {
            Some(cap) => format!("Keep it under {}.", cents_to_dollars(cap)),
            None => "No strict budget, just don't go wild.".to_string(),
        };
    }
    if q.contains("how many") || q.contains("people") || q.contains("servings") || q.contains("household") {
        return format!("It's for {} of us.", persona.household_size);
    }
    if q.contains("dietary") || q.contains("allerg") || q.contains("restriction") {
        return if persona.dietary.is_empty() {
            "No restrictions.".to_string()
        } else {
            let tags: Vec<String> = persona.dietary.iter().cloned().collect();
            format!("Everything needs to be {}.", list_phrase(&tags))
        };
    }
    if q.contains("brand") {
        return if persona.preferred_brands.is_empty() {
            "Any brand is fine.".to_string()
        } else {
            let brands: Vec<String> = persona.preferred_brands.iter().cloned().collect();
            format!("I prefer {} brand.", list_phrase(&brands))
        };
    }
    if q.contains("store") || q.contains("where") {
        return match &persona.preferred_store {
            Some(store) => format!("My usual store is {store}."),
            None => "Whichever store has everything.".to_string(),
        };
    }
    // Form questions ("whole cake or a slice?"): answer from the goal that
    // mentions either form, defaulting to what the persona required.
    for goal in &persona.goal_items {
        for form in ["slice", "whole", "inflated"] {
            if q.contains(form) && goal.required_attributes.contains(form) {
                return format!("The {form} one, please.");
            }
        }
    }
    if q.contains("instead") {
        // A substitute on offer and no violation in sight yet: accept it. If
        // it turns out to break a constraint, next turn's objection handles it.
        return "Sure, that works.".to_string();
    }
    if q.contains(" or ") {
        // A choice the persona has no stake in: take the first offer.
        return "The first option works.".to_string();
    }
    // The question touched nothing the persona knows; restate what's left.
    match state.unmet.split_first() {
        Some((first, _)) => format!("I just need {}.", goal_request_phrase(first)),
        None => "That covers it, I think.".to_string(),
    }
}

fn synthesize(persona: &Persona, prefix: &Trace, world: &World) -> UserTurn {
    let state = assess(persona, prefix, world);
    let user_turns_so_far = prefix.user_turns().count() as u32;

    // (a) Patience comes first: this turn is the persona's last.
    if user_turns_so_far + 1 >= persona.patience && !state.satisfied {
        return UserTurn {
            message: "This is taking too long, let's stop here.".to_string(),
            terminate: true,
            mode: TurnMode::Synthesized,
            end_reason: Some(EndReason::PatienceExhausted),
        };
    }

    // (b) Object to the newest constraint violation, naming the constraint.
    let proposed = items_proposed_last(prefix, world);
    for item in &proposed {
        for tag in &persona.dietary {
            if !item.attribute_tags.contains(tag) {
                return UserTurn {
                    message: format!(
                        "Please remove the {} - everything I buy needs to be {tag}.",
                        item.name
                    ),
                    terminate: false,
                    mode: TurnMode::Synthesized,
                    end_reason: None,
                };
            }
        }
        if !persona.preferred_brands.is_empty() {
            let matches_goal = persona
                .goal_items
                .iter()
                .any(|g| item_matches_phrase(item, &g.description));
            let brand_ok = persona
                .preferred_brands
                .iter()
                .any(|b| b.eq_ignore_ascii_case(&item.brand));
            if matches_goal && !brand_ok {
                let brands: Vec<String> = persona.preferred_brands.iter().cloned().collect();
                return UserTurn {
                    message: format!(
                        "Please remove the {} - I stick to {} brand.",
                        item.name,
                        list_phrase(&brands)
                    ),
                    terminate: false,
                    mode: TurnMode::Synthesized,
                    end_reason: None,
                };
            }
        }
    }
    if state.over_budget {
        let cap = persona.budget_cap.expect("over_budget implies a cap");
        let total = state.cart_total.map(cents_to_dollars).unwrap_or_else(|| "that".to_string());
        return UserTurn {
            message: format!(
                "That's {total} now - over my {} budget, please remove something.",
                cents_to_dollars(cap)
            ),
            terminate: false,
            mode: TurnMode::Synthesized,
            end_reason: None,
        };
    }
    // A restriction break that slipped in on an earlier turn still blocks
    // satisfaction, so object to it even though it wasn't just proposed.
    if let Some((name, tag)) = state.dietary_violations.first() {
        return UserTurn {
            message: format!("Please remove the {name} - everything I buy needs to be {tag}."),
            terminate: false,
            mode: TurnMode::Synthesized,
            end_reason: None,
        };
    }

    // (c) Everything's in the cart and within budget: confirm and stop. This
    // outranks answering a question so "Anything else?" gets a goodbye, not
    // an answer.
    if state.satisfied {
        return UserTurn {
            message: "That's everything - looks good, thanks!".to_string(),
            terminate: true,
            mode: TurnMode::Synthesized,
            end_reason: Some(EndReason::Satisfied),
        };
    }

    // (d) Answer a question if the agent asked one.
    let last_agent_text = prefix
        .turns
        .iter()
        .rev()
        .find(|t| t.role == Role::Assistant)
        .map(|t| t.text.as_str())
        .unwrap_or("");
    if last_agent_text.contains('?') {
        return UserTurn {
            message: answer_clarification(persona, last_agent_text, &state),
            terminate: false,
            mode: TurnMode::Synthesized,
            end_reason: None,
        };
    }

    // (e) Ask for what's still missing.
    let wanted: Vec<String> = state.unmet.iter().map(|g| goal_request_phrase(g)).collect();
    UserTurn {
        message: format!("I need {}.", list_phrase(&wanted)),
        terminate: false,
        mode: TurnMode::Synthesized,
        end_reason: None,
    }
}

/// Produce the next user turn. Replays the logged user's message while every
/// agent action so far matches the log; the first mismatch switches the
/// session permanently to persona synthesis.
pub fn next_user_turn(
    persona: &Persona,
    episode_prefix: &Trace,
    logged_episode: Option<&Trace>,
    last_agent_action: &AgentAction,
    checker: &dyn EquivalenceChecker,
    world: &World,
) -> Result<UserTurn, UserSimError> {
    // The reported action must describe the prefix's own final agent turn.
    if let Some(last) = episode_prefix.turns.iter().rev().find(|t| t.role == Role::Assistant) {
        let pinned = primary_action(last);
        if !checker.check(&pinned, last_agent_action).equivalent {
            return Err(UserSimError::ContractViolation(
                "last_agent_action does not match the prefix's final agent turn".into(),
            ));
        }
    }

    if let Some(logged) = logged_episode {
        let diverged = divergence_point(episode_prefix, logged, checker)?;
        if diverged.is_none() {
            let next_idx = episode_prefix.turns.len();
            if let Some(next) = logged.turns.get(next_idx) {
                if next.role == Role::User {
                    let last_logged_turn = next_idx + 1 == logged.turns.len();
                    return Ok(UserTurn {
                        message: next.text.clone(),
                        terminate: last_logged_turn,
                        mode: TurnMode::Replayed,
                        end_reason: None,
                    });
                }
            }
            // Log exhausted or misshapen at the seam: fall through to
            // synthesis, the permanent mode from here on.
        }
    }
    Ok(synthesize(persona, episode_prefix, world))
}

/// First user message of a fresh episode: the logged opener when one exists,
/// otherwise a request naming every goal (and the budget, when the persona
/// has one).
pub fn opening_message(persona: &Persona, logged_episode: Option<&Trace>) -> UserTurn {
    if let Some(logged) = logged_episode {
        if let Some(first) = logged.turns.first() {
            if first.role == Role::User {
                return UserTurn {
                    message: first.text.clone(),
                    terminate: false,
                    mode: TurnMode::Replayed,
                    end_reason: None,
                };
            }
        }
    }
    let wanted: Vec<String> =
        persona.goal_items.iter().map(goal_request_phrase).collect();
    let mut message = format!("Hi! I need {}.", list_phrase(&wanted));
    if let Some(cap) = persona.budget_cap {
        message.push_str(&format!(" Keep it under {}.", cents_to_dollars(cap)));
    }
    if !persona.dietary.is_empty() {
        let tags: Vec<String> = persona.dietary.iter().cloned().collect();
        message.push_str(&format!(" Everything should be {}.", list_phrase(&tags)));
    }
    UserTurn { message, terminate: false, mode: TurnMode::Synthesized, end_reason: None }
}
