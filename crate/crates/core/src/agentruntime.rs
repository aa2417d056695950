//! The shopping assistant under test: an orchestrator that decomposes each
//! user message into sub-agent tasks, a bounded shared context the sub-agents
//! read, and an episode loop that executes their actions against the world.
//!
//! Prompts double as behavior: the scripted policy parses `key=value`
//! directives out of each node's prompt text, giving the optimizers a
//! discrete, enumerable search surface, while [`LlmPolicy`] treats the same
//! prompts as free-form instructions for a model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, Message};
use crate::goals::{self, GoalItem};
use crate::judge::attributes_ok;
use crate::tracemodel::{
    ItemAttempt, NodeInvocation, Role, StoreSelection, Trace, Turn, UserPreferences,
    REGISTERED_NODES,
};
use crate::usersim::{
    next_user_turn, opening_message, AgentAction, EquivalenceChecker, Persona, TurnMode, UserSimError,
    UserTurn,
};
use crate::worldsim::{
    item_matches_phrase, CatalogItem, ToolName, ToolRequest, World, WorldSession,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    User(#[from] UserSimError),
}

// ---------------------------------------------------------------------------
// Directives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Low,
    Med,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionPolicy {
    Ask,
    Allow,
    Forbid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Household,
    Literal,
}

/// The scripted-policy reading of a prompt. Every field has a default, so any
/// text parses; unrecognized keys are ignored and the last occurrence of a
/// key wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Directives {
    pub verbosity: Verbosity,
    pub pass_preferences: bool,
    pub use_preferences: bool,
    pub max_results: usize,
    pub substitution_policy: SubstitutionPolicy,
    pub scaling: Scaling,
    /// Tie-break equally valid picks toward the lowest price.
    pub prefer_cheapest: bool,
}

impl Default for Directives {
    fn default() -> Self {
        Directives {
            verbosity: Verbosity::Med,
            pass_preferences: true,
            use_preferences: true,
            max_results: 5,
            substitution_policy: SubstitutionPolicy::Ask,
            scaling: Scaling::Household,
            prefer_cheapest: false,
        }
    }
}

pub fn parse_directives(prompt: &str) -> Directives {
    let mut d = Directives::default();
    for token in prompt.split_whitespace() {
        let Some((key, value)) = token.split_once('=') else { continue };
        match (key, value) {
            ("verbosity", "low") => d.verbosity = Verbosity::Low,
            ("verbosity", "med") => d.verbosity = Verbosity::Med,
            ("verbosity", "high") => d.verbosity = Verbosity::High,
            ("pass_preferences", "true") => d.pass_preferences = true,
            ("pass_preferences", "false") => d.pass_preferences = false,
            ("use_preferences", "true") => d.use_preferences = true,
            ("use_preferences", "false") => d.use_preferences = false,
            ("max_results", n) => {
                if let Ok(n) = n.parse::<usize>() {
                    if n >= 1 {
                        d.max_results = n;
                    }
                }
            }
            ("substitution_policy", "ask") => d.substitution_policy = SubstitutionPolicy::Ask,
            ("substitution_policy", "allow") => d.substitution_policy = SubstitutionPolicy::Allow,
            ("substitution_policy", "forbid") => d.substitution_policy = SubstitutionPolicy::Forbid,
            ("scaling", "household") => d.scaling = Scaling::Household,
            ("scaling", "literal") => d.scaling = Scaling::Literal,
            ("prefer_cheapest", "true") => d.prefer_cheapest = true,
            ("prefer_cheapest", "false") => d.prefer_cheapest = false,
            _ => {}
        }
    }
    d
}

impl Directives {
    /// Canonical prompt text that parses back to exactly these directives.
    pub fn to_prompt(&self) -> String {
        let verbosity = match self.verbosity {
            Verbosity::Low => "low",
            Verbosity::Med => "med",
            Verbosity::High => "high",
        };
        let policy = match self.substitution_policy {
            SubstitutionPolicy::Ask => "ask",
            SubstitutionPolicy::Allow => "allow",
            SubstitutionPolicy::Forbid => "forbid",
        };
        let scaling = match self.scaling {
            Scaling::Household => "household",
            Scaling::Literal => "literal",
        };
        format!(
            "verbosity={verbosity} pass_preferences={} use_preferences={} max_results={} substitution_policy={policy} scaling={scaling} prefer_cheapest={}",
            self.pass_preferences, self.use_preferences, self.max_results, self.prefer_cheapest
        )
    }
}

// ---------------------------------------------------------------------------
// Prompt bundle
// ---------------------------------------------------------------------------

/// One prompt per registered node; the unit both optimizers search over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub prompts: std::collections::BTreeMap<String, String>,
}

impl PromptBundle {
    pub fn new(prompts: std::collections::BTreeMap<String, String>) -> Self {
        PromptBundle { prompts }
    }

    /// A bundle whose every node carries the given directives.
    pub fn uniform(directives: &Directives) -> Self {
        let prompts = REGISTERED_NODES
            .iter()
            .map(|n| (n.to_string(), directives.to_prompt()))
            .collect();
        PromptBundle { prompts }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        for node in REGISTERED_NODES {
            if !self.prompts.contains_key(*node) {
                return Err(RuntimeError::InvalidBundle(format!("missing prompt for node {node}")));
            }
        }
        Ok(())
    }

    pub fn prompt(&self, node: &str) -> &str {
        self.prompts.get(node).map(String::as_str).unwrap_or("")
    }

    pub fn directives(&self, node: &str) -> Directives {
        parse_directives(self.prompt(node))
    }

    pub fn with_prompt(&self, node: &str, prompt: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.prompts.insert(node.to_string(), prompt.into());
        out
    }

    pub fn from_json(document: &str) -> Result<Self, RuntimeError> {
        let prompts = serde_json::from_str(document)
            .map_err(|e| RuntimeError::InvalidBundle(e.to_string()))?;
        let bundle = PromptBundle { prompts };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.prompts).expect("string map serializes")
    }

    /// Stable content digest, used by acceptance logs to name candidates.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (node, prompt) in &self.prompts {
            hasher.update(node.as_bytes());
            hasher.update([0u8]);
            hasher.update(prompt.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

// ---------------------------------------------------------------------------
// Shared context
// ---------------------------------------------------------------------------

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEntry {
    pub source: String,
    pub content: String,
    pub pinned: bool,
}

/// Ordered context entries under a hard token budget. Appends evict the
/// oldest unpinned entries first; pinned entries go only when no unpinned
/// ones remain, oldest first, keeping the newest pinned entry, whose content
/// is truncated if it alone exceeds the budget. Total size never exceeds the
/// budget after any append.
#[derive(Debug, Clone)]
pub struct SharedContext {
    pub entries: Vec<ContextEntry>,
    pub budget: usize,
}

impl SharedContext {
    pub fn new(budget: usize) -> Self {
        SharedContext { entries: Vec::new(), budget }
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|e| token_count(&e.content)).sum()
    }

    pub fn append(&mut self, source: &str, content: &str) {
        self.push(source, content, false);
    }

    pub fn append_pinned(&mut self, source: &str, content: &str) {
        self.push(source, content, true);
    }

    fn push(&mut self, source: &str, content: &str, pinned: bool) {
        self.entries.push(ContextEntry {
            source: source.to_string(),
            content: content.to_string(),
            pinned,
        });
        while self.total_size() > self.budget {
            if let Some(pos) = self.entries.iter().position(|e| !e.pinned) {
                self.entries.remove(pos);
            } else if self.entries.len() > 1 {
                self.entries.remove(0);
            } else {
                let entry = &mut self.entries[0];
                let kept: Vec<&str> =
                    entry.content.split_whitespace().take(self.budget).collect();
                entry.content = kept.join(" ");
                break;
            }
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("[{}] {}", e.source, e.content))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn has_entry_from(&self, source: &str) -> bool {
        self.entries.iter().any(|e| e.source == source)
    }
}

// ---------------------------------------------------------------------------
// Node actions and policies
// ---------------------------------------------------------------------------

/// Everything a node can tell the runtime. The scripted and LLM policies
/// share this vocabulary; it is also each invocation's logged output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum NodeAction {
    /// Orchestrator: delegate a task to a sub-agent.
    Assign { node: String, task: String },
    /// Contribute a line to the assistant's reply.
    Say { text: String },
    /// Execute a tool call against the world.
    Tool { request: ToolRequest },
    /// Write a note into the shared context.
    ContextNote { content: String },
    /// Item selection: commit to a catalog item.
    SelectItem { item_id: String, substitution: bool },
    /// Item selection: put a choice to the user before committing.
    AskUser { question: String, goal: String, options: Vec<String>, substitution: bool },
    /// Quantity adjustment: the quantity to buy.
    SetQuantity { quantity: u32 },
    /// The task cannot be fulfilled with what the node can see.
    Unavailable { reason: String },
}

/// A node invocation's result: structured actions plus the raw output text
/// that gets logged (the serialized actions for scripted nodes, the model's
/// text for LLM nodes).
#[derive(Debug, Clone)]
pub struct NodeReply {
    pub actions: Vec<NodeAction>,
    pub raw: String,
}

impl NodeReply {
    fn scripted(actions: Vec<NodeAction>) -> Self {
        let raw = serde_json::to_string(&actions).expect("actions serialize");
        NodeReply { actions, raw }
    }
}

pub trait NodePolicy {
    fn act(&mut self, node: &str, prompt: &str, observation: &str)
        -> Result<NodeReply, RuntimeError>;
}

// ---------------------------------------------------------------------------
// Scripted policy
// ---------------------------------------------------------------------------

/// Deterministic reference policy: behavior is a pure function of the node
/// name, the prompt's directives, and the observation text.
pub struct ScriptedPolicy;

impl NodePolicy for ScriptedPolicy {
    fn act(
        &mut self,
        node: &str,
        prompt: &str,
        observation: &str,
    ) -> Result<NodeReply, RuntimeError> {
        let directives = parse_directives(prompt);
        let actions = match node {
            "orchestrator" => scripted_orchestrator(&directives, observation),
            "preference_search" => scripted_preference_search(&directives, observation),
            "item_selection" => scripted_item_selection(&directives, observation),
            "quantity_adjustment" => scripted_quantity_adjustment(&directives, observation),
            "cart_ops" => scripted_cart_ops(&directives, observation),
            other => {
                return Err(RuntimeError::InvalidInput(format!("unknown node {other}")));
            }
        };
        Ok(NodeReply::scripted(actions))
    }
}

pub(crate) fn observation_line<'a>(observation: &'a str, prefix: &str) -> Option<&'a str> {
    observation
        .lines()
        .find_map(|line| line.strip_prefix(prefix))
        .map(str::trim)
}

pub(crate) fn observation_block<'a>(observation: &'a str, header: &str) -> Vec<&'a str> {
    let mut lines = Vec::new();
    let mut inside = false;
    for line in observation.lines() {
        if line.trim_end() == header {
            inside = true;
            continue;
        }
        if inside {
            // Blocks run to the next ALL-CAPS header line.
            if !line.starts_with(' ') && line.ends_with(':') && line == line.to_uppercase() {
                break;
            }
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
    }
    lines
}

/// Decompose the user message: one item-selection task per requested item,
/// one cart-ops task per removal, a profile lookup on the first turn.
fn scripted_orchestrator(_d: &Directives, observation: &str) -> Vec<NodeAction> {
    let user_message = observation_line(observation, "USER: ").unwrap_or("");
    let first_turn = observation_line(observation, "TURN: ") == Some("1");
    let has_profile = observation_line(observation, "PROFILE: ")
        .map(|p| p != "none")
        .unwrap_or(false);

    let mut actions = Vec::new();
    if first_turn && has_profile {
        actions.push(NodeAction::Assign {
            node: "preference_search".into(),
            task: "summarize the user profile".into(),
        });
    }

    let parsed = goals::extract_goals(&[user_message]);
    for goal in &parsed.items {
        actions.push(NodeAction::Assign {
            node: "item_selection".into(),
            task: selection_task(goal),
        });
    }
    for removed in &parsed.removed {
        actions.push(NodeAction::Assign {
            node: "cart_ops".into(),
            task: format!("remove: {removed}"),
        });
    }
    actions
}

pub(crate) fn selection_task(goal: &GoalItem) -> String {
    let attrs: Vec<&str> = goal.required_attributes.iter().map(String::as_str).collect();
    format!(
        "select: {} | attrs={} | qty={} | servings={}",
        goal.description,
        attrs.join(","),
        goal.desired_quantity.map(|q| q.to_string()).unwrap_or_else(|| "none".into()),
        goal.servings.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
    )
}

/// Rebuild a goal from an item-selection task line.
pub(crate) fn parse_selection_task(task: &str) -> Option<GoalItem> {
    let rest = task.strip_prefix("select: ")?;
    let mut fields = rest.split(" | ");
    let description = fields.next()?.trim().to_string();
    let mut goal = GoalItem {
        description,
        required_attributes: BTreeSet::new(),
        desired_quantity: None,
        servings: None,
    };
    for field in fields {
        if let Some(attrs) = field.strip_prefix("attrs=") {
            goal.required_attributes =
                attrs.split(',').filter(|a| !a.is_empty()).map(str::to_string).collect();
        } else if let Some(qty) = field.strip_prefix("qty=") {
            goal.desired_quantity = qty.parse().ok();
        } else if let Some(servings) = field.strip_prefix("servings=") {
            goal.servings = servings.parse().ok();
        }
    }
    Some(goal)
}

/// Summarize the raw profile into the context line downstream nodes read.
fn scripted_preference_search(_d: &Directives, observation: &str) -> Vec<NodeAction> {
    let profile = observation_line(observation, "PROFILE: ").unwrap_or("none");
    if profile == "none" {
        return vec![NodeAction::Unavailable { reason: "no profile on file".into() }];
    }
    vec![NodeAction::ContextNote { content: format!("PREFERENCES: {profile}") }]
}

pub(crate) fn parse_preferences_note(context: &str) -> Option<UserPreferences> {
    let line = context.lines().find_map(|l| {
        let l = l.strip_prefix('[').and_then(|r| r.split_once("] ")).map(|(_, c)| c).unwrap_or(l);
        l.trim().strip_prefix("PREFERENCES: ")
    })?;
    Some(parse_profile_line(line))
}

fn parse_profile_line(line: &str) -> UserPreferences {
    let mut prefs = UserPreferences::default();
    for field in line.split(';') {
        let Some((key, value)) = field.trim().split_once('=') else { continue };
        match key.trim() {
            "dietary" => {
                prefs.dietary =
                    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect();
            }
            "brands" => {
                prefs.preferred_brands =
                    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect();
            }
            "household" => prefs.household_size = value.trim().parse().unwrap_or(1),
            "store" => {
                let v = value.trim();
                if !v.is_empty() && v != "none" {
                    prefs.preferred_store = Some(v.to_string());
                }
            }
            _ => {}
        }
    }
    prefs
}

pub fn profile_line(prefs: &UserPreferences) -> String {
    let dietary: Vec<&str> = prefs.dietary.iter().map(String::as_str).collect();
    let brands: Vec<&str> = prefs.preferred_brands.iter().map(String::as_str).collect();
    format!(
        "dietary={}; brands={}; household={}; store={}",
        dietary.join(","),
        brands.join(","),
        prefs.household_size,
        prefs.preferred_store.as_deref().unwrap_or("none"),
    )
}

pub(crate) fn parse_result_line(line: &str) -> Option<CatalogItem> {
    let mut fields = line.trim().split('\t');
    let item_id = fields.next()?.to_string();
    let name = fields.next()?.to_string();
    let brand = fields.next()?.to_string();
    let tags: BTreeSet<String> =
        fields.next()?.split(',').filter(|t| !t.is_empty()).map(str::to_string).collect();
    let price: i64 = fields.next()?.parse().ok()?;
    Some(CatalogItem {
        item_id,
        name,
        brand,
        attribute_tags: tags,
        price,
        pack_size: crate::worldsim::PackSize { count: 1, unit: "ct".into() },
    })
}

pub(crate) fn result_line(item: &CatalogItem) -> String {
    let tags: Vec<&str> = item.attribute_tags.iter().map(String::as_str).collect();
    format!("{}\t{}\t{}\t{}\t{}", item.item_id, item.name, item.brand, tags.join(","), item.price)
}

/// Pick an item from the search results: prefer direct matches honoring the
/// stated attributes, apply profile preferences when directed to and a
/// preferences note is visible, surface form ambiguity or substitution as a
/// user question under `substitution_policy=ask`.
fn scripted_item_selection(d: &Directives, observation: &str) -> Vec<NodeAction> {
    let task = observation_line(observation, "TASK: ").unwrap_or("");
    let Some(goal) = parse_selection_task(task) else {
        return vec![NodeAction::Unavailable { reason: "unparseable task".into() }];
    };
    let results: Vec<CatalogItem> = observation_block(observation, "RESULTS:")
        .iter()
        .filter_map(|l| parse_result_line(l))
        .collect();
    if results.is_empty() {
        return vec![NodeAction::Unavailable {
            reason: format!("no catalog results for {}", goal.description),
        }];
    }

    let mut direct: Vec<&CatalogItem> = results
        .iter()
        .filter(|item| {
            item_matches_phrase(item, &goal.description) && attributes_ok(&goal, item, &results)
        })
        .collect();

    let prefs = if d.use_preferences {
        parse_preferences_note(&observation_block(observation, "CONTEXT:").join("\n"))
    } else {
        None
    };
    if let Some(prefs) = &prefs {
        if !prefs.dietary.is_empty() {
            let compliant: Vec<&CatalogItem> = direct
                .iter()
                .copied()
                .filter(|item| prefs.dietary.iter().all(|t| item.attribute_tags.contains(t)))
                .collect();
            // No compliant option in sight means the direct matches are all
            // unacceptable; fall through to the substitution path.
            direct = compliant;
        }
    }
    if d.prefer_cheapest {
        direct.sort_by(|a, b| a.price.cmp(&b.price).then_with(|| a.item_id.cmp(&b.item_id)));
    }
    if let Some(prefs) = &prefs {
        // A preferred brand outranks price; stable sorts keep the cheaper of
        // two same-brand options in front.
        if !prefs.preferred_brands.is_empty() {
            direct.sort_by_key(|item| {
                let preferred =
                    prefs.preferred_brands.iter().any(|b| b.eq_ignore_ascii_case(&item.brand));
                !preferred
            });
        }
    }

    // An unstated exclusive form with both forms on offer is a question, not
    // a guess, when the policy allows asking.
    let form_pairs: [(&str, &str); 1] = [("slice", "whole")];
    for (a, b) in form_pairs {
        let stated =
            goal.required_attributes.contains(a) || goal.required_attributes.contains(b);
        if stated {
            continue;
        }
        let with_a = direct.iter().find(|i| i.attribute_tags.contains(a));
        let with_b = direct.iter().find(|i| i.attribute_tags.contains(b));
        if let (Some(ia), Some(ib)) = (with_a, with_b) {
            if d.substitution_policy == SubstitutionPolicy::Ask {
                return vec![NodeAction::AskUser {
                    question: format!(
                        "For the {}: would you like the {a} ({}) or the {b} ({})?",
                        goal.description, ia.name, ib.name
                    ),
                    goal: selection_task(&goal),
                    options: vec![ia.item_id.clone(), ib.item_id.clone()],
                    substitution: false,
                }];
            }
        }
    }
    if !goal.required_attributes.contains("inflated") {
        let inflated = direct.iter().find(|i| i.attribute_tags.contains("inflated"));
        let plain = direct.iter().find(|i| !i.attribute_tags.contains("inflated"));
        if let (Some(ia), Some(ib)) = (inflated, plain) {
            if d.substitution_policy == SubstitutionPolicy::Ask {
                return vec![NodeAction::AskUser {
                    question: format!(
                        "For the {}: would you like them inflated ({}) or uninflated ({})?",
                        goal.description, ia.name, ib.name
                    ),
                    goal: selection_task(&goal),
                    options: vec![ia.item_id.clone(), ib.item_id.clone()],
                    substitution: false,
                }];
            }
        }
    }

    if let Some(choice) = direct.first() {
        return vec![NodeAction::SelectItem { item_id: choice.item_id.clone(), substitution: false }];
    }

    // Nothing fits directly; the top search hit is the substitution candidate.
    let candidate = &results[0];
    match d.substitution_policy {
        SubstitutionPolicy::Ask => vec![NodeAction::AskUser {
            question: format!(
                "I couldn't find {} as requested. Would {} by {} work instead?",
                goal.description, candidate.name, candidate.brand
            ),
            goal: selection_task(&goal),
            options: vec![candidate.item_id.clone()],
            substitution: true,
        }],
        SubstitutionPolicy::Allow => {
            vec![NodeAction::SelectItem { item_id: candidate.item_id.clone(), substitution: true }]
        }
        SubstitutionPolicy::Forbid => vec![NodeAction::Unavailable {
            reason: format!("{} is not available as requested", goal.description),
        }],
    }
}

/// Quantity rule table: an explicit count or serving size wins; otherwise a
/// per-person item under household scaling buys one per head; otherwise one.
fn scripted_quantity_adjustment(d: &Directives, observation: &str) -> Vec<NodeAction> {
    let qty_hint: Option<u32> = observation_line(observation, "QTY_HINT: ")
        .filter(|v| *v != "none")
        .and_then(|v| v.parse().ok());
    if let Some(qty) = qty_hint {
        return vec![NodeAction::SetQuantity { quantity: qty.max(1) }];
    }
    if d.scaling == Scaling::Household {
        let per_person = observation_line(observation, "ITEM_TAGS: ")
            .map(|tags| tags.split(',').any(|t| t.trim() == "per_person"))
            .unwrap_or(false);
        let household: Option<u32> = observation_line(observation, "HOUSEHOLD: ")
            .filter(|v| *v != "unknown")
            .and_then(|v| v.parse().ok());
        if per_person {
            if let Some(n) = household {
                return vec![NodeAction::SetQuantity { quantity: n.max(1) }];
            }
        }
    }
    vec![NodeAction::SetQuantity { quantity: 1 }]
}

/// Cart mutations: adds come pre-resolved (item and quantity), removals name
/// a phrase matched against the cart lines shown in the observation.
fn scripted_cart_ops(_d: &Directives, observation: &str) -> Vec<NodeAction> {
    let task = observation_line(observation, "TASK: ").unwrap_or("");
    if let Some(rest) = task.strip_prefix("add: ") {
        let mut item_id = "";
        let mut quantity = 1u32;
        for field in rest.split_whitespace() {
            if let Some(id) = field.strip_prefix("item_id=") {
                item_id = id;
            } else if let Some(q) = field.strip_prefix("quantity=") {
                quantity = q.parse().unwrap_or(1);
            }
        }
        if item_id.is_empty() {
            return vec![NodeAction::Unavailable { reason: "add task names no item".into() }];
        }
        return vec![NodeAction::Tool {
            request: ToolRequest::new(ToolName::AddToCart)
                .with_arg("item_id", item_id)
                .with_arg("quantity", quantity as i64),
        }];
    }
    if let Some(phrase) = task.strip_prefix("remove: ") {
        // Removal phrases arrive with conversational residue, so the best
        // lexical overlap wins rather than demanding every token match.
        let phrase_tokens = crate::worldsim::tokenize(phrase);
        let mut best: Option<(usize, String)> = None;
        for line in observation_block(observation, "CART:") {
            if let Some(item) = parse_result_line(line) {
                let item_tokens = crate::worldsim::item_match_tokens(&item);
                let overlap = phrase_tokens
                    .iter()
                    .filter(|t| item_tokens.iter().any(|i| crate::worldsim::token_eq(i, t)))
                    .count();
                if overlap > 0 && best.as_ref().map(|(n, _)| overlap > *n).unwrap_or(true) {
                    best = Some((overlap, item.item_id));
                }
            }
        }
        if let Some((_, item_id)) = best {
            return vec![NodeAction::Tool {
                request: ToolRequest::new(ToolName::RemoveFromCart).with_arg("item_id", item_id),
            }];
        }
        return vec![NodeAction::Unavailable { reason: format!("no cart line matches {phrase}") }];
    }
    vec![NodeAction::Unavailable { reason: format!("unrecognized task: {task}") }]
}

// ---------------------------------------------------------------------------
// LLM policy
// ---------------------------------------------------------------------------

const ACTION_SCHEMA_NOTE: &str = "Reply with ONLY a JSON array of actions. Examples: \
[{\"action\":\"select_item\",\"item_id\":\"...\",\"substitution\":false}], \
[{\"action\":\"set_quantity\",\"quantity\":2}], \
[{\"action\":\"tool\",\"request\":{\"tool_name\":\"add_to_cart\",\"arguments\":{\"item_id\":{\"text\":\"...\"},\"quantity\":{\"int\":1}}}}], \
[{\"action\":\"assign\",\"node\":\"item_selection\",\"task\":\"select: ...\"}], \
[{\"action\":\"say\",\"text\":\"...\"}]";

/// Model-backed policy speaking the same action vocabulary as the scripted
/// one. Malformed output gets one repair turn; if that also fails, the
/// invocation becomes a logged no-op rather than an abort.
pub struct LlmPolicy<'a> {
    pub backend: &'a dyn CompletionBackend,
}

fn extract_actions(response: &str) -> Result<Vec<NodeAction>, String> {
    let trimmed = response.trim();
    let candidate = match (trimmed.find('['), trimmed.rfind(']')) {
        (Some(start), Some(end)) if start < end => &trimmed[start..=end],
        _ => return Err("no JSON array found in response".into()),
    };
    serde_json::from_str(candidate).map_err(|e| e.to_string())
}

impl NodePolicy for LlmPolicy<'_> {
    fn act(
        &mut self,
        node: &str,
        prompt: &str,
        observation: &str,
    ) -> Result<NodeReply, RuntimeError> {
        let mut messages = vec![
            Message::system(format!("You are the {node} node of a grocery shopping assistant.\n{prompt}\n\n{ACTION_SCHEMA_NOTE}")),
            Message::user(observation.to_string()),
        ];
        let mut last_error = String::new();
        for _ in 0..2 {
            let response = self.backend.complete(&CompletionRequest::new(messages.clone()))?;
            match extract_actions(&response) {
                Ok(actions) => return Ok(NodeReply { actions, raw: response }),
                Err(err) => {
                    last_error = err.clone();
                    messages.push(Message { role: "assistant".into(), content: response });
                    messages.push(Message::user(format!(
                        "That output could not be parsed ({err}). {ACTION_SCHEMA_NOTE}"
                    )));
                }
            }
        }
        Ok(NodeReply { actions: Vec::new(), raw: format!("unparseable output: {last_error}") })
    }
}

// ---------------------------------------------------------------------------
// User turn sources
// ---------------------------------------------------------------------------

pub trait UserTurnSource {
    fn preferences(&self) -> UserPreferences {
        UserPreferences::default()
    }
    fn opening(&mut self) -> UserTurn;
    fn next(&mut self, prefix: &Trace, last_action: &AgentAction) -> Result<UserTurn, UserSimError>;
}

/// Fixed message script; the last line terminates the session.
pub struct ScriptedUser {
    lines: Vec<String>,
    cursor: usize,
    prefs: UserPreferences,
}

impl ScriptedUser {
    pub fn new<S: Into<String>>(lines: impl IntoIterator<Item = S>) -> Self {
        let lines: Vec<String> = lines.into_iter().map(Into::into).collect();
        assert!(!lines.is_empty(), "a scripted user needs at least one line");
        ScriptedUser { lines, cursor: 0, prefs: UserPreferences::default() }
    }

    pub fn with_preferences(mut self, prefs: UserPreferences) -> Self {
        self.prefs = prefs;
        self
    }

    fn turn(&mut self) -> UserTurn {
        let message = self.lines[self.cursor].clone();
        let terminate = self.cursor + 1 == self.lines.len();
        self.cursor += 1;
        UserTurn { message, terminate, mode: TurnMode::Synthesized, end_reason: None }
    }
}

impl UserTurnSource for ScriptedUser {
    fn preferences(&self) -> UserPreferences {
        self.prefs.clone()
    }

    fn opening(&mut self) -> UserTurn {
        self.turn()
    }

    fn next(&mut self, _prefix: &Trace, _action: &AgentAction) -> Result<UserTurn, UserSimError> {
        Ok(self.turn())
    }
}

/// The hybrid simulated user: replays a logged episode while the agent's
/// actions stay equivalent, then synthesizes from the persona.
pub struct SimulatedUser<'a> {
    pub persona: Persona,
    pub logged: Option<&'a Trace>,
    pub checker: &'a dyn EquivalenceChecker,
    pub world: &'a World,
}

impl UserTurnSource for SimulatedUser<'_> {
    fn preferences(&self) -> UserPreferences {
        UserPreferences {
            household_size: self.persona.household_size,
            dietary: self.persona.dietary.clone(),
            preferred_brands: self.persona.preferred_brands.clone(),
            preferred_store: self.persona.preferred_store.clone(),
        }
    }

    fn opening(&mut self) -> UserTurn {
        opening_message(&self.persona, self.logged)
    }

    fn next(&mut self, prefix: &Trace, last_action: &AgentAction) -> Result<UserTurn, UserSimError> {
        next_user_turn(&self.persona, prefix, self.logged, last_action, self.checker, self.world)
    }
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub session_id: String,
    /// Maximum user/assistant exchanges before the runtime cuts the session.
    pub max_turns: usize,
    pub context_budget: usize,
}

impl EpisodeConfig {
    pub fn new(session_id: impl Into<String>) -> Self {
        EpisodeConfig { session_id: session_id.into(), max_turns: 12, context_budget: 400 }
    }
}

/// A question put to the user, waiting on their answer.
struct PendingQuestion {
    goal_task: String,
    options: Vec<String>,
    substitution: bool,
}

/// One item heading for the cart after selection and quantity resolution.
struct ResolvedSelection {
    goal: GoalItem,
    item_id: String,
    substitution: bool,
    approved: bool,
}

/// What happened during one assistant turn, for reply composition.
enum TurnEvent {
    Added { name: String, alcohol: bool },
    Removed { name: String },
    NotFound { what: String },
    Question { text: String },
}

const VERBOSE_FILLER: &str = "status update: I am cross-referencing the catalog, comparing \
current prices, re-validating stock levels aisle by aisle, reviewing every earlier request \
once more, and confirming the overall plan before the next step so that nothing whatsoever \
is overlooked in this carefully considered and thoroughly double-checked shopping process \
for maximum completeness and satisfaction across the entire session end to end today";

struct EpisodeState<'w> {
    session: WorldSession<'w>,
    context: SharedContext,
    pending: Option<PendingQuestion>,
    preferences_note: Option<String>,
    ran_preference_search: bool,
}

/// Run one conversation to completion: alternate user and assistant turns,
/// decompose each user message through the orchestrator, execute sub-agent
/// actions against the world, and stop on the user's terminate flag or the
/// turn cap.
pub fn run_episode(
    bundle: &PromptBundle,
    world: &World,
    user: &mut dyn UserTurnSource,
    policy: &mut dyn NodePolicy,
    config: &EpisodeConfig,
) -> Result<Trace, RuntimeError> {
    bundle.validate()?;
    if config.max_turns < 1 {
        return Err(RuntimeError::InvalidInput("max_turns must be >= 1".into()));
    }

    let prefs = user.preferences();
    let mut trace = Trace {
        session_id: config.session_id.clone(),
        user_preferences: prefs.clone(),
        store_selection_history: Vec::new(),
        turns: Vec::new(),
    };
    let mut state = EpisodeState {
        session: WorldSession::new(world, serde_json::to_value(&prefs).unwrap_or_default()),
        context: SharedContext::new(config.context_budget),
        pending: None,
        preferences_note: None,
        ran_preference_search: false,
    };

    let mut user_turn = user.opening();
    let mut exchanges = 0usize;
    loop {
        push_user_turn(&mut trace, &mut state, &user_turn.message);
        exchanges += 1;

        let assistant = if user_turn.terminate {
            closing_turn(bundle)
        } else {
            assistant_turn(bundle, world, policy, &mut state, &mut trace, &user_turn.message)?
        };
        trace.turns.push(assistant);
        if user_turn.terminate || exchanges >= config.max_turns {
            break;
        }

        let last = trace.turns.last().expect("assistant turn just pushed");
        let action = crate::usersim::primary_action(last);
        user_turn = user.next(&trace, &action)?;
    }

    trace.validate().map_err(|e| RuntimeError::InvalidInput(e.to_string()))?;
    Ok(trace)
}

fn push_user_turn(trace: &mut Trace, state: &mut EpisodeState, message: &str) {
    trace.turns.push(Turn::user(message));
    // Goal-bearing messages are pinned; chit-chat competes with notes.
    let parsed = goals::extract_goals(&[message]);
    let carries_goal = !parsed.items.is_empty()
        || !parsed.removed.is_empty()
        || parsed.budget_cap.is_some()
        || !parsed.dietary.is_empty();
    if carries_goal {
        state.context.append_pinned("user", message);
    } else {
        state.context.append("user", message);
    }
}

fn closing_turn(bundle: &PromptBundle) -> Turn {
    let text = match bundle.directives("orchestrator").verbosity {
        Verbosity::Low => "Done.",
        _ => "Thanks for shopping with us! Your cart is all set.",
    };
    Turn::assistant(text)
}

fn invoke(
    policy: &mut dyn NodePolicy,
    bundle: &PromptBundle,
    turn: &mut Turn,
    node: &str,
    observation: String,
) -> Result<Vec<NodeAction>, RuntimeError> {
    let reply = policy.act(node, bundle.prompt(node), &observation)?;
    turn.node_invocations.push(NodeInvocation {
        node: node.to_string(),
        input_context: observation,
        output: reply.raw,
    });
    Ok(reply.actions)
}

fn assistant_turn(
    bundle: &PromptBundle,
    world: &World,
    policy: &mut dyn NodePolicy,
    state: &mut EpisodeState,
    trace: &mut Trace,
    user_message: &str,
) -> Result<Turn, RuntimeError> {
    let mut turn = Turn::assistant(String::new());
    let mut events: Vec<TurnEvent> = Vec::new();
    let orchestrator = bundle.directives("orchestrator");

    // A pending question's answer short-circuits selection for that goal.
    let mut resolved: Vec<ResolvedSelection> = Vec::new();
    if let Some(pending) = state.pending.take() {
        if let Some(selection) = resolve_pending(&pending, user_message, world, state) {
            resolved.push(selection);
        }
    }

    let turn_number = trace.turns.iter().filter(|t| t.role == Role::User).count();
    let observation = format!(
        "TURN: {turn_number}\nUSER: {user_message}\nPROFILE: {}\nCONTEXT:\n{}",
        if state.ran_preference_search || profile_is_empty(&trace.user_preferences) {
            "none".to_string()
        } else {
            profile_line(&trace.user_preferences)
        },
        state.context.render(),
    );
    let plan = invoke(policy, bundle, &mut turn, "orchestrator", observation)?;

    // Store selection precedes any catalog work.
    let mut goals_this_turn: Vec<GoalItem> = plan
        .iter()
        .filter_map(|a| match a {
            NodeAction::Assign { node, task } if node == "item_selection" => {
                parse_selection_task(task)
            }
            _ => None,
        })
        .collect();
    for selection in &resolved {
        goals_this_turn.push(selection.goal.clone());
    }
    if state.session.selected_store().is_none() && !goals_this_turn.is_empty() {
        select_store(world, state, trace, &mut turn, &goals_this_turn);
    }

    for selection in resolved {
        finish_selection(bundle, policy, world, state, &mut turn, &mut events, selection)?;
    }

    for action in plan {
        match action {
            NodeAction::Assign { node, task } if node == "preference_search" => {
                state.ran_preference_search = true;
                let observation = format!(
                    "TASK: {task}\nPROFILE: {}",
                    profile_line(&trace.user_preferences)
                );
                let actions = invoke(policy, bundle, &mut turn, "preference_search", observation)?;
                for action in actions {
                    if let NodeAction::ContextNote { content } = action {
                        state.preferences_note = Some(content.clone());
                        if orchestrator.pass_preferences {
                            state.context.append("preference_search", &content);
                        }
                    }
                }
            }
            NodeAction::Assign { node, task } if node == "item_selection" => {
                let Some(goal) = parse_selection_task(&task) else { continue };
                run_selection(bundle, policy, world, state, &mut turn, &mut events, goal)?;
            }
            NodeAction::Assign { node, task } if node == "cart_ops" => {
                run_cart_task(bundle, policy, state, &mut turn, &mut events, &task)?;
            }
            NodeAction::Say { text } => events.push(TurnEvent::Question { text }),
            _ => {}
        }
    }

    compose_reply(&orchestrator, state, &mut turn, &events);
    Ok(turn)
}

fn profile_is_empty(prefs: &UserPreferences) -> bool {
    prefs.dietary.is_empty()
        && prefs.preferred_brands.is_empty()
        && prefs.preferred_store.is_none()
        && prefs.household_size == 1
}

/// The preferred store when it exists, otherwise the store covering the most
/// goals, ties to the lexically first store id.
fn select_store(
    world: &World,
    state: &mut EpisodeState,
    trace: &mut Trace,
    turn: &mut Turn,
    goals: &[GoalItem],
) {
    if let Some(preferred) = &trace.user_preferences.preferred_store {
        if world.store(preferred).is_some() {
            execute_store_selection(state, trace, turn, preferred.clone());
            return;
        }
    }
    let mut best: Option<(usize, &str)> = None;
    for store in &world.stores {
        let catalog = world.catalog(&store.store_id).unwrap_or(&[]);
        let coverage = goals
            .iter()
            .filter(|g| catalog.iter().any(|item| item_matches_phrase(item, &g.description)))
            .count();
        let better = match best {
            None => true,
            Some((covered, id)) => {
                coverage > covered || (coverage == covered && store.store_id.as_str() < id)
            }
        };
        if better {
            best = Some((coverage, &store.store_id));
        }
    }
    if let Some((_, store_id)) = best {
        execute_store_selection(state, trace, turn, store_id.to_string());
    }
}

fn execute_store_selection(
    state: &mut EpisodeState,
    trace: &mut Trace,
    turn: &mut Turn,
    store_id: String,
) {
    let request = ToolRequest::new(ToolName::SelectStore).with_arg("store_id", store_id.as_str());
    let response = state.session.execute(&request);
    if response.is_ok() {
        let store_type = state
            .session
            .world
            .store(&store_id)
            .map(|s| s.store_type)
            .expect("selected store exists");
        trace.store_selection_history.push(StoreSelection {
            turn: trace.turns.len(),
            store_id: store_id.clone(),
            store_type,
        });
    }
    turn.tool_calls.push(request);
    turn.tool_results.push(response);
}

/// Search, select, and (unless a question went out) add one goal item.
fn run_selection(
    bundle: &PromptBundle,
    policy: &mut dyn NodePolicy,
    world: &World,
    state: &mut EpisodeState,
    turn: &mut Turn,
    events: &mut Vec<TurnEvent>,
    goal: GoalItem,
) -> Result<(), RuntimeError> {
    let selection_directives = bundle.directives("item_selection");

    let search = ToolRequest::new(ToolName::SearchCatalog)
        .with_arg("query", goal.description.as_str())
        .with_arg("limit", selection_directives.max_results as i64);
    let response = state.session.execute(&search);
    let results = response.results.clone();
    turn.tool_calls.push(search);
    turn.tool_results.push(response);

    let result_lines: Vec<String> = results.iter().map(result_line).collect();
    let observation = format!(
        "TASK: {}\nCONTEXT:\n{}\nRESULTS:\n{}",
        selection_task(&goal),
        state.context.render(),
        result_lines.join("\n"),
    );
    let actions = invoke(policy, bundle, turn, "item_selection", observation)?;

    for action in actions {
        match action {
            NodeAction::SelectItem { item_id, substitution } => {
                let selection =
                    ResolvedSelection { goal: goal.clone(), item_id, substitution, approved: false };
                finish_selection(bundle, policy, world, state, turn, events, selection)?;
            }
            NodeAction::AskUser { question, goal: goal_task, options, substitution } => {
                // One open question at a time; a second ask in the same turn
                // reports unavailability instead of stacking questions.
                if state.pending.is_none() {
                    state.pending =
                        Some(PendingQuestion { goal_task, options, substitution });
                    events.push(TurnEvent::Question { text: question });
                } else {
                    events.push(TurnEvent::NotFound { what: goal.description.clone() });
                }
            }
            NodeAction::Unavailable { .. } => {
                events.push(TurnEvent::NotFound { what: goal.description.clone() });
            }
            _ => {}
        }
    }
    Ok(())
}

/// Quantity node then cart add for a chosen item.
fn finish_selection(
    bundle: &PromptBundle,
    policy: &mut dyn NodePolicy,
    world: &World,
    state: &mut EpisodeState,
    turn: &mut Turn,
    events: &mut Vec<TurnEvent>,
    selection: ResolvedSelection,
) -> Result<(), RuntimeError> {
    let store_id = state.session.selected_store().unwrap_or("").to_string();
    let catalog = world.catalog(&store_id).unwrap_or(&[]);
    let Some(item) = catalog.iter().find(|c| c.item_id == selection.item_id) else {
        events.push(TurnEvent::NotFound { what: selection.goal.description.clone() });
        return Ok(());
    };
    let item = item.clone();

    let household = state
        .preferences_note
        .as_deref()
        .and_then(|note| note.strip_prefix("PREFERENCES: "))
        .map(parse_profile_line)
        .map(|p| p.household_size);
    // The household figure is only usable when the note is still in context.
    let household_visible = state.context.has_entry_from("preference_search");
    let tags: Vec<&str> = item.attribute_tags.iter().map(String::as_str).collect();
    let observation = format!(
        "TASK: quantity for: {}\nQTY_HINT: {}\nHOUSEHOLD: {}\nITEM_TAGS: {}",
        selection.goal.description,
        selection
            .goal
            .desired_quantity
            .or(selection.goal.servings)
            .map(|q| q.to_string())
            .unwrap_or_else(|| "none".into()),
        match (household, household_visible) {
            (Some(n), true) => n.to_string(),
            _ => "unknown".to_string(),
        },
        tags.join(","),
    );
    let actions = invoke(policy, bundle, turn, "quantity_adjustment", observation)?;
    let quantity = actions
        .iter()
        .find_map(|a| match a {
            NodeAction::SetQuantity { quantity } => Some(*quantity),
            _ => None,
        })
        .unwrap_or(1)
        .max(1);

    let observation = format!("TASK: add: item_id={} quantity={quantity}", item.item_id);
    let actions = invoke(policy, bundle, turn, "cart_ops", observation)?;
    for action in actions {
        if let NodeAction::Tool { request } = action {
            let response = state.session.execute(&request);
            let ok = response.is_ok();
            turn.tool_calls.push(request);
            turn.tool_results.push(response);
            if ok {
                turn.items.push(ItemAttempt {
                    query: selection.goal.description.clone(),
                    selected_item_id: Some(item.item_id.clone()),
                    quantity: Some(quantity),
                    substitution_approved: selection.substitution && selection.approved,
                });
                events.push(TurnEvent::Added {
                    name: item.name.clone(),
                    alcohol: item.attribute_tags.contains("alcohol"),
                });
                state.context.append(
                    "cart_ops",
                    &format!("added {} x{quantity} for {}", item.name, selection.goal.description),
                );
            } else {
                events.push(TurnEvent::NotFound { what: selection.goal.description.clone() });
            }
        }
    }
    Ok(())
}

/// Removals and other direct cart tasks.
fn run_cart_task(
    bundle: &PromptBundle,
    policy: &mut dyn NodePolicy,
    state: &mut EpisodeState,
    turn: &mut Turn,
    events: &mut Vec<TurnEvent>,
    task: &str,
) -> Result<(), RuntimeError> {
    let store_id = state.session.selected_store().unwrap_or("").to_string();
    let catalog = state.session.world.catalog(&store_id).unwrap_or(&[]).to_vec();
    let cart_lines: Vec<String> = state
        .session
        .cart
        .as_ref()
        .map(|cart| {
            cart.lines
                .iter()
                .filter_map(|l| catalog.iter().find(|c| c.item_id == l.item_id))
                .map(result_line)
                .collect()
        })
        .unwrap_or_default();
    let observation = format!("TASK: {task}\nCART:\n{}", cart_lines.join("\n"));
    let actions = invoke(policy, bundle, turn, "cart_ops", observation)?;

    for action in actions {
        match action {
            NodeAction::Tool { request } => {
                let removed_name = request
                    .text_arg("item_id")
                    .and_then(|id| catalog.iter().find(|c| c.item_id == id))
                    .map(|c| c.name.clone());
                let response = state.session.execute(&request);
                let ok = response.is_ok();
                turn.tool_calls.push(request);
                turn.tool_results.push(response);
                if ok {
                    if let Some(name) = removed_name {
                        events.push(TurnEvent::Removed { name });
                    }
                }
            }
            NodeAction::Unavailable { reason } => {
                events.push(TurnEvent::NotFound { what: reason });
            }
            _ => {}
        }
    }
    Ok(())
}

/// The user's answer to a pending question, mapped to a selection. Returns
/// `None` when the reply neither approves nor picks an option.
fn resolve_pending(
    pending: &PendingQuestion,
    reply: &str,
    world: &World,
    state: &EpisodeState,
) -> Option<ResolvedSelection> {
    let goal = parse_selection_task(&pending.goal_task)?;
    let lower = reply.to_lowercase();
    let rejects = ["no ", "no.", "no,", "rather not", "don't", "do not", "neither", "skip it"];
    if rejects.iter().any(|r| lower.contains(r)) || lower == "no" {
        return None;
    }

    let store_id = state.session.selected_store().unwrap_or("");
    let catalog = world.catalog(store_id).unwrap_or(&[]);
    let option_items: Vec<&CatalogItem> = pending
        .options
        .iter()
        .filter_map(|id| catalog.iter().find(|c| &c.item_id == id))
        .collect();

    // A named form or attribute picks that option outright.
    for item in &option_items {
        for tag in &item.attribute_tags {
            if lower.contains(tag.as_str())
                && !option_items
                    .iter()
                    .all(|other| other.attribute_tags.contains(tag))
            {
                return Some(ResolvedSelection {
                    goal,
                    item_id: item.item_id.clone(),
                    substitution: pending.substitution,
                    approved: true,
                });
            }
        }
    }
    // "uninflated" style answers name the absence of the distinguishing tag.
    if let Some(first) = option_items.first() {
        let tags_of_first: Vec<&String> = first.attribute_tags.iter().collect();
        for tag in tags_of_first {
            if lower.contains(&format!("un{tag}")) || lower.contains(&format!("not {tag}")) {
                if let Some(other) =
                    option_items.iter().find(|o| !o.attribute_tags.contains(tag))
                {
                    return Some(ResolvedSelection {
                        goal,
                        item_id: other.item_id.clone(),
                        substitution: pending.substitution,
                        approved: true,
                    });
                }
            }
        }
    }

    let approvals = [
        "yes", "sure", "ok", "okay", "fine", "works", "sounds good", "please do", "go ahead",
        "that works", "first option",
    ];
    if approvals.iter().any(|a| lower.contains(a)) {
        let item_id = pending.options.first()?.clone();
        return Some(ResolvedSelection {
            goal,
            item_id,
            substitution: pending.substitution,
            approved: true,
        });
    }
    None
}

/// Build the assistant's reply from the turn's events under the verbosity
/// directive. `high` also floods the shared context with a status note.
fn compose_reply(
    directives: &Directives,
    state: &mut EpisodeState,
    turn: &mut Turn,
    events: &[TurnEvent],
) {
    let mut lines: Vec<String> = Vec::new();
    let mut alcohol_added = false;
    for event in events {
        match event {
            TurnEvent::Added { name, alcohol } => {
                alcohol_added |= alcohol;
                lines.push(format!("Added {name} to your cart."));
            }
            TurnEvent::Removed { name } => lines.push(format!("Removed {name} from your cart.")),
            TurnEvent::NotFound { what } => {
                lines.push(format!("I couldn't find {what} at this store."));
            }
            TurnEvent::Question { text } => lines.push(text.clone()),
        }
    }

    turn.text = match directives.verbosity {
        Verbosity::Low => {
            // Terse mode keeps a question (the dialogue needs it) and drops
            // everything else, including the alcohol compliance notice.
            let question = events.iter().find_map(|e| match e {
                TurnEvent::Question { text } => Some(text.clone()),
                _ => None,
            });
            question.unwrap_or_else(|| "Done.".to_string())
        }
        Verbosity::Med | Verbosity::High => {
            if alcohol_added {
                lines.push(
                    "Note: you must be 21 or older to buy alcohol; a valid ID is required on delivery."
                        .to_string(),
                );
            }
            if lines.is_empty() {
                "Anything else I can help with?".to_string()
            } else {
                lines.join(" ")
            }
        }
    };

    if directives.verbosity == Verbosity::High {
        state.context.append("orchestrator", VERBOSE_FILLER);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::judge::oracle_judge;
    use crate::rubric::{self, CheckVerdict};
    use crate::tracemodel::Role;
    use crate::worldsim::{PackSize, Store, StoreType};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn item(id: &str, name: &str, brand: &str, tags: &[&str], price: i64) -> CatalogItem {
        CatalogItem {
            item_id: id.into(),
            name: name.into(),
            brand: brand.into(),
            attribute_tags: tags.iter().map(|t| t.to_string()).collect(),
            price,
            pack_size: PackSize { count: 1, unit: "ct".into() },
        }
    }

    fn test_world() -> World {
        let stores = vec![Store {
            store_id: "pantry-1".into(),
            store_type: StoreType::Grocery,
            name: "Pantryville Market".into(),
        }];
        let mut catalogs = BTreeMap::new();
        catalogs.insert(
            "pantry-1".to_string(),
            vec![
                item("bagel-1", "Plain Bagels", "BakeHouse", &["per_person", "vegan"], 449),
                item("bread-1", "Sourdough Bread", "BakeHouse", &["vegan"], 549),
                item("cake-s", "Cake Slice", "SweetLayer", &["slice"], 399),
                item("cake-w", "Whole Cake", "SweetLayer", &["whole"], 1899),
                item("cheese-1", "Cheddar Cheese", "DairyCo", &["dairy"], 599),
                item("milk-d", "Whole Milk", "DairyCo", &["dairy"], 349),
                item("milk-o", "Oat Milk", "OatWorks", &["vegan"], 499),
                item("wine-1", "Red Wine", "Vintners", &["alcohol"], 1299),
            ],
        );
        let world = World { stores, catalogs };
        world.validate().expect("test world is valid");
        world
    }

    fn vegan_prefs() -> UserPreferences {
        UserPreferences {
            household_size: 2,
            dietary: ["vegan".to_string()].into(),
            preferred_brands: BTreeSet::new(),
            preferred_store: None,
        }
    }

    fn run_scripted(
        bundle: &PromptBundle,
        world: &World,
        prefs: UserPreferences,
        lines: &[&str],
    ) -> Trace {
        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(prefs);
        let mut policy = ScriptedPolicy;
        run_episode(bundle, world, &mut user, &mut policy, &EpisodeConfig::new("test-episode"))
            .expect("episode runs")
    }

    fn cart_quantities(trace: &Trace) -> BTreeMap<String, u32> {
        let cart = crate::tracemodel::final_cart_lenient(trace);
        cart.lines.iter().map(|l| (l.item_id.clone(), l.quantity)).collect()
    }

    fn oracle_verdict(trace: &Trace, world: &World) -> crate::rubric::Verdict {
        oracle_judge(trace, world, &rubric::default_rubric())
    }

    // ------------------------------------------------------------------
    // Directives
    // ------------------------------------------------------------------

    #[test]
    fn prompts_without_directives_parse_to_defaults() {
        let d = parse_directives("You are a friendly grocery orchestrator. Be concise.");
        assert_eq!(d, Directives::default());
    }

    #[test]
    fn later_directive_occurrences_override_earlier_ones() {
        let d = parse_directives("verbosity=low stuff verbosity=high max_results=3 nonsense=7");
        assert_eq!(d.verbosity, Verbosity::High);
        assert_eq!(d.max_results, 3);
        assert_eq!(d.substitution_policy, SubstitutionPolicy::Ask);
    }

    #[test]
    fn malformed_directive_values_are_ignored() {
        let d = parse_directives("max_results=0 max_results=banana verbosity=shouting");
        assert_eq!(d.max_results, 5);
        assert_eq!(d.verbosity, Verbosity::Med);
    }

    #[test]
    fn every_directive_combination_round_trips_through_its_prompt() {
        for verbosity in [Verbosity::Low, Verbosity::Med, Verbosity::High] {
            for pass_preferences in [false, true] {
                for use_preferences in [false, true] {
                    for max_results in [1usize, 5, 9] {
                        for substitution_policy in [
                            SubstitutionPolicy::Ask,
                            SubstitutionPolicy::Allow,
                            SubstitutionPolicy::Forbid,
                        ] {
                            for scaling in [Scaling::Household, Scaling::Literal] {
                                for prefer_cheapest in [false, true] {
                                    let d = Directives {
                                        verbosity,
                                        pass_preferences,
                                        use_preferences,
                                        max_results,
                                        substitution_policy,
                                        scaling,
                                        prefer_cheapest,
                                    };
                                    assert_eq!(parse_directives(&d.to_prompt()), d);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Bundle
    // ------------------------------------------------------------------

    #[test]
    fn bundle_validation_requires_every_registered_node() {
        let mut prompts: BTreeMap<String, String> = REGISTERED_NODES
            .iter()
            .map(|n| (n.to_string(), "verbosity=med".to_string()))
            .collect();
        prompts.remove("cart_ops");
        let err = PromptBundle::new(prompts).validate().unwrap_err();
        assert!(err.to_string().contains("cart_ops"), "names the missing node: {err}");
        PromptBundle::uniform(&Directives::default()).validate().unwrap();
    }

    #[test]
    fn bundle_json_round_trips_and_digest_tracks_content() {
        let bundle = PromptBundle::uniform(&Directives::default());
        let parsed = PromptBundle::from_json(&bundle.to_json()).unwrap();
        assert_eq!(parsed, bundle);
        assert_eq!(parsed.digest(), bundle.digest());

        let changed = bundle.with_prompt("item_selection", "use_preferences=false");
        assert_ne!(changed.digest(), bundle.digest());
    }

    // ------------------------------------------------------------------
    // Shared context
    // ------------------------------------------------------------------

    #[test]
    fn context_evicts_oldest_unpinned_first() {
        let mut ctx = SharedContext::new(10);
        ctx.append("a", "one two three four");
        ctx.append("b", "five six seven eight");
        ctx.append("c", "nine ten eleven twelve");
        assert!(ctx.total_size() <= 10);
        assert!(!ctx.has_entry_from("a"), "oldest entry went first");
        assert!(ctx.has_entry_from("c"));
    }

    #[test]
    fn pinned_entries_outlive_unpinned_neighbors() {
        let mut ctx = SharedContext::new(10);
        ctx.append_pinned("goal", "buy oat milk and sourdough bread");
        ctx.append("note", "one two three four five");
        ctx.append("note2", "six seven eight nine ten");
        assert!(ctx.has_entry_from("goal"));
        assert!(ctx.total_size() <= 10);
    }

    #[test]
    fn a_single_oversized_entry_is_truncated_to_the_budget() {
        let mut ctx = SharedContext::new(4);
        ctx.append_pinned("goal", "one two three four five six seven");
        assert_eq!(ctx.total_size(), 4);
        assert_eq!(ctx.entries.len(), 1);
    }

    #[test]
    fn context_budget_holds_under_randomized_appends() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let budget = rng.gen_range(1..40);
            let mut ctx = SharedContext::new(budget);
            for step in 0..rng.gen_range(1..60) {
                let words = rng.gen_range(1..20);
                let content = vec!["word"; words].join(" ");
                if rng.gen_bool(0.3) {
                    ctx.append_pinned(&format!("p{step}"), &content);
                } else {
                    ctx.append(&format!("u{step}"), &content);
                }
                assert!(
                    ctx.total_size() <= budget,
                    "budget {budget} exceeded: {}",
                    ctx.total_size()
                );
            }
        }
    }

    // ------------------------------------------------------------------
    // Scripted nodes in isolation
    // ------------------------------------------------------------------

    #[test]
    fn quantity_rule_prefers_hint_then_household_then_one() {
        let mut policy = ScriptedPolicy;
        let cases = [
            ("QTY_HINT: 3\nHOUSEHOLD: 4\nITEM_TAGS: per_person", "scaling=household", 3),
            ("QTY_HINT: none\nHOUSEHOLD: 4\nITEM_TAGS: per_person", "scaling=household", 4),
            ("QTY_HINT: none\nHOUSEHOLD: 4\nITEM_TAGS: vegan", "scaling=household", 1),
            ("QTY_HINT: none\nHOUSEHOLD: unknown\nITEM_TAGS: per_person", "scaling=household", 1),
            ("QTY_HINT: none\nHOUSEHOLD: 4\nITEM_TAGS: per_person", "scaling=literal", 1),
        ];
        for (observation, prompt, expected) in cases {
            let reply = policy.act("quantity_adjustment", prompt, observation).unwrap();
            assert_eq!(
                reply.actions,
                vec![NodeAction::SetQuantity { quantity: expected }],
                "observation: {observation}"
            );
        }
    }

    // ------------------------------------------------------------------
    // Episodes
    // ------------------------------------------------------------------

    #[test]
    fn a_goalless_chat_closes_politely_with_an_empty_cart() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace = run_scripted(&bundle, &world, UserPreferences::default(), &["Just looking, thanks!"]);
        assert_eq!(trace.turns.len(), 2);
        assert_eq!(trace.turns[1].role, Role::Assistant);
        assert!(trace.turns[1].text.contains("Thanks for shopping"));
        assert!(cart_quantities(&trace).is_empty());
        assert!(trace.store_selection_history.is_empty());
    }

    #[test]
    fn episodes_are_byte_for_byte_deterministic() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let runs: Vec<String> = (0..10)
            .map(|_| {
                let trace = run_scripted(
                    &bundle,
                    &world,
                    vegan_prefs(),
                    &["I need milk and sourdough bread.", "That's all, thanks!"],
                );
                serde_json::to_string(&trace).unwrap()
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn the_default_bundle_satisfies_a_simulated_vegan_shopper() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let persona = Persona {
            budget_cap: None,
            dietary: ["vegan".to_string()].into(),
            household_size: 2,
            goal_items: vec![
                crate::usersim::PersonaGoal {
                    description: "milk".into(),
                    required_attributes: ["vegan".to_string()].into(),
                    desired_quantity: None,
                },
                crate::usersim::PersonaGoal {
                    description: "sourdough bread".into(),
                    required_attributes: BTreeSet::new(),
                    desired_quantity: None,
                },
                crate::usersim::PersonaGoal {
                    description: "bagels".into(),
                    required_attributes: BTreeSet::new(),
                    desired_quantity: None,
                },
            ],
            preferred_brands: BTreeSet::new(),
            preferred_store: None,
            patience: 12,
        };
        persona.validate().unwrap();
        let checker = crate::usersim::CanonicalChecker;
        let mut user = SimulatedUser { persona, logged: None, checker: &checker, world: &world };
        let mut policy = ScriptedPolicy;
        let trace = run_episode(
            &bundle,
            &world,
            &mut user,
            &mut policy,
            &EpisodeConfig::new("vegan-happy-path"),
        )
        .unwrap();

        let quantities = cart_quantities(&trace);
        assert_eq!(quantities.get("milk-o"), Some(&1));
        assert_eq!(quantities.get("bread-1"), Some(&1));
        assert_eq!(quantities.get("bagel-1"), Some(&2), "household of two");
        assert_eq!(quantities.len(), 3);

        let spec = rubric::default_rubric();
        let verdict = oracle_judge(&trace, &world, &spec);
        let active = rubric::activate(&trace, &world);
        let score = rubric::aggregate(&verdict, &spec, &active).unwrap();
        assert!(score.trace_pass, "verdict: {verdict:?}");
        assert!((score.reward - 1.0).abs() < 1e-9, "reward {}", score.reward);
    }

    #[test]
    fn preference_blackout_starves_item_selection_whatever_its_own_prompt_says() {
        let world = test_world();
        let base = PromptBundle::uniform(&Directives::default()).with_prompt(
            "orchestrator",
            Directives { pass_preferences: false, ..Directives::default() }.to_prompt(),
        );
        for use_preferences in [false, true] {
            for substitution_policy in [
                SubstitutionPolicy::Ask,
                SubstitutionPolicy::Allow,
                SubstitutionPolicy::Forbid,
            ] {
                let bundle = base.with_prompt(
                    "item_selection",
                    Directives { use_preferences, substitution_policy, ..Directives::default() }
                        .to_prompt(),
                );
                let trace = run_scripted(
                    &bundle,
                    &world,
                    vegan_prefs(),
                    &["I need milk.", "That's all, thanks."],
                );
                for inv in trace.turns.iter().flat_map(|t| &t.node_invocations) {
                    if inv.node == "item_selection" {
                        assert!(
                            !inv.input_context.contains("PREFERENCES:"),
                            "blackout leaked preferences"
                        );
                    }
                }
                assert_eq!(
                    cart_quantities(&trace).get("milk-d"),
                    Some(&1),
                    "top hit wins without preferences (use_preferences={use_preferences}, {substitution_policy:?})"
                );
                let verdict = oracle_verdict(&trace, &world);
                assert_eq!(
                    verdict.get("dietary_prefs"),
                    Some(CheckVerdict::Fail),
                    "dairy pick with a vegan alternative on the shelf"
                );
            }
        }
    }

    #[test]
    fn passed_preferences_reach_item_selection_and_fix_the_pick() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace =
            run_scripted(&bundle, &world, vegan_prefs(), &["I need milk.", "That's all, thanks."]);
        let selection_inputs: Vec<&str> = trace
            .turns
            .iter()
            .flat_map(|t| &t.node_invocations)
            .filter(|inv| inv.node == "item_selection")
            .map(|inv| inv.input_context.as_str())
            .collect();
        assert!(!selection_inputs.is_empty());
        assert!(selection_inputs.iter().all(|ctx| ctx.contains("PREFERENCES: dietary=vegan")));
        assert_eq!(cart_quantities(&trace).get("milk-o"), Some(&1));
        assert_eq!(oracle_verdict(&trace, &world).get("dietary_prefs"), Some(CheckVerdict::Pass));
    }

    #[test]
    fn household_scaling_buys_one_bagel_per_person() {
        let world = test_world();
        let prefs = UserPreferences { household_size: 4, ..UserPreferences::default() };
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace =
            run_scripted(&bundle, &world, prefs.clone(), &["I need bagels.", "Great, thanks!"]);
        assert_eq!(cart_quantities(&trace).get("bagel-1"), Some(&4));

        let literal = bundle.with_prompt(
            "quantity_adjustment",
            Directives { scaling: Scaling::Literal, ..Directives::default() }.to_prompt(),
        );
        let trace = run_scripted(&literal, &world, prefs, &["I need bagels.", "Great, thanks!"]);
        assert_eq!(cart_quantities(&trace).get("bagel-1"), Some(&1));
    }

    #[test]
    fn an_explicit_count_beats_household_scaling() {
        let world = test_world();
        let prefs = UserPreferences { household_size: 4, ..UserPreferences::default() };
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace =
            run_scripted(&bundle, &world, prefs, &["I need 6 bagels.", "Great, thanks!"]);
        assert_eq!(cart_quantities(&trace).get("bagel-1"), Some(&6));
    }

    #[test]
    fn verbose_filler_evicts_preferences_and_a_later_pick_goes_wrong() {
        let world = test_world();
        let lines =
            ["I need sourdough bread.", "I need bagels.", "I need milk.", "Done, thanks!"];
        let mut config = EpisodeConfig::new("eviction-probe");
        config.context_budget = 120;

        let quiet = PromptBundle::uniform(&Directives::default());
        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(vegan_prefs());
        let trace =
            run_episode(&quiet, &world, &mut user, &mut ScriptedPolicy, &config).unwrap();
        assert_eq!(cart_quantities(&trace).get("milk-o"), Some(&1), "quiet bundle keeps context");

        let chatty = quiet.with_prompt(
            "orchestrator",
            Directives { verbosity: Verbosity::High, ..Directives::default() }.to_prompt(),
        );
        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(vegan_prefs());
        let trace =
            run_episode(&chatty, &world, &mut user, &mut ScriptedPolicy, &config).unwrap();
        assert_eq!(
            cart_quantities(&trace).get("milk-d"),
            Some(&1),
            "filler pushed the preferences note out before the milk turn"
        );
        assert_eq!(oracle_verdict(&trace, &world).get("dietary_prefs"), Some(CheckVerdict::Fail));
    }

    #[test]
    fn substitution_ask_waits_for_approval_and_records_it() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need goat cheese.", "Sure, that works.", "All done, thanks!"],
        );
        assert!(
            trace.turns[1].text.contains("instead"),
            "first reply asks: {}",
            trace.turns[1].text
        );
        assert!(trace.turns[1].items.is_empty(), "nothing added before approval");
        let attempts: Vec<&ItemAttempt> =
            trace.turns.iter().flat_map(|t| &t.items).collect();
        assert_eq!(attempts.len(), 1);
        assert_eq!(attempts[0].selected_item_id.as_deref(), Some("cheese-1"));
        assert!(attempts[0].substitution_approved);
    }

    #[test]
    fn substitution_allow_commits_without_asking() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default()).with_prompt(
            "item_selection",
            Directives { substitution_policy: SubstitutionPolicy::Allow, ..Directives::default() }
                .to_prompt(),
        );
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need goat cheese.", "All done, thanks!"],
        );
        let attempts: Vec<&ItemAttempt> =
            trace.turns.iter().flat_map(|t| &t.items).collect();
        assert_eq!(attempts.len(), 1);
        assert_eq!(attempts[0].selected_item_id.as_deref(), Some("cheese-1"));
        assert!(!attempts[0].substitution_approved, "nobody approved this swap");
    }

    #[test]
    fn substitution_forbid_reports_unavailability() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default()).with_prompt(
            "item_selection",
            Directives { substitution_policy: SubstitutionPolicy::Forbid, ..Directives::default() }
                .to_prompt(),
        );
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need goat cheese.", "All done, thanks!"],
        );
        assert!(trace.turns[1].text.contains("couldn't find"));
        assert!(cart_quantities(&trace).is_empty());
    }

    #[test]
    fn an_ambiguous_form_draws_a_question_under_ask() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need cake.", "The whole one, please.", "All done, thanks!"],
        );
        assert!(trace.turns[1].text.contains('?'), "asked: {}", trace.turns[1].text);
        assert!(trace.turns[1].items.is_empty());
        assert_eq!(cart_quantities(&trace).get("cake-w"), Some(&1));
        assert_eq!(oracle_verdict(&trace, &world).get("clarification"), Some(CheckVerdict::Pass));
    }

    #[test]
    fn committing_on_an_ambiguous_form_fails_the_clarification_check() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default()).with_prompt(
            "item_selection",
            Directives { substitution_policy: SubstitutionPolicy::Allow, ..Directives::default() }
                .to_prompt(),
        );
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need cake.", "All done, thanks!"],
        );
        assert_eq!(cart_quantities(&trace).get("cake-s"), Some(&1), "committed to the first form");
        assert_eq!(oracle_verdict(&trace, &world).get("clarification"), Some(CheckVerdict::Fail));
    }

    #[test]
    fn the_alcohol_notice_rides_along_except_under_terse_verbosity() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let trace = run_scripted(
            &bundle,
            &world,
            UserPreferences::default(),
            &["I need wine.", "All done, thanks!"],
        );
        assert!(trace.turns[1].text.contains("21"), "notice present: {}", trace.turns[1].text);
        assert_eq!(
            oracle_verdict(&trace, &world).get("safety_compliance"),
            Some(CheckVerdict::Pass)
        );

        let terse = bundle.with_prompt(
            "orchestrator",
            Directives { verbosity: Verbosity::Low, ..Directives::default() }.to_prompt(),
        );
        let trace = run_scripted(
            &terse,
            &world,
            UserPreferences::default(),
            &["I need wine.", "All done, thanks!"],
        );
        assert!(!trace.turns[1].text.contains("21"), "terse reply: {}", trace.turns[1].text);
        assert_eq!(
            oracle_verdict(&trace, &world).get("safety_compliance"),
            Some(CheckVerdict::Fail)
        );
    }

    #[test]
    fn a_dietary_objection_lands_the_removal_despite_trailing_words() {
        let world = test_world();
        let blind = PromptBundle::uniform(&Directives::default()).with_prompt(
            "orchestrator",
            Directives { pass_preferences: false, ..Directives::default() }.to_prompt(),
        );
        let trace = run_scripted(
            &blind,
            &world,
            vegan_prefs(),
            &[
                "I need milk.",
                "Please remove the Whole Milk - everything I buy needs to be vegan.",
                "Fine, that's all.",
            ],
        );
        assert_eq!(cart_quantities(&trace).get("milk-d"), None, "objection removed the carton");
        assert!(trace.turns[3].text.contains("Removed Whole Milk"));
    }

    #[test]
    fn max_turns_caps_a_runaway_session() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let lines: Vec<String> = (0..20).map(|i| format!("Hmm, thinking... ({i})")).collect();
        let mut user = ScriptedUser::new(lines).with_preferences(UserPreferences::default());
        let mut config = EpisodeConfig::new("runaway");
        config.max_turns = 3;
        let trace =
            run_episode(&bundle, &world, &mut user, &mut ScriptedPolicy, &config).unwrap();
        assert_eq!(trace.turns.iter().filter(|t| t.role == Role::User).count(), 3);
        assert_eq!(trace.turns.len(), 6);
    }

    // ------------------------------------------------------------------
    // LLM policy
    // ------------------------------------------------------------------

    #[test]
    fn llm_policy_round_trips_a_well_formed_action_array() {
        let backend = MockBackend::with_fallback(|_| {
            r#"Here you go:
[{"action":"set_quantity","quantity":2}]"#
                .to_string()
        });
        let mut policy = LlmPolicy { backend: &backend };
        let reply = policy.act("quantity_adjustment", "", "QTY_HINT: 2").unwrap();
        assert_eq!(reply.actions, vec![NodeAction::SetQuantity { quantity: 2 }]);
        assert_eq!(backend.call_count(), 1);
    }

    #[test]
    fn llm_policy_retries_once_after_malformed_output() {
        let backend = MockBackend::with_fallback(|request| {
            // The repair turn carries the failed attempt, so it is longer.
            if request.messages.len() > 2 {
                r#"[{"action":"say","text":"fixed"}]"#.to_string()
            } else {
                "no json here".to_string()
            }
        });
        let mut policy = LlmPolicy { backend: &backend };
        let reply = policy.act("orchestrator", "", "USER: hi").unwrap();
        assert_eq!(reply.actions, vec![NodeAction::Say { text: "fixed".into() }]);
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn llm_policy_degrades_to_a_logged_noop_after_two_failures() {
        let backend = MockBackend::with_fallback(|_| "still not json".to_string());
        let mut policy = LlmPolicy { backend: &backend };
        let reply = policy.act("orchestrator", "", "USER: hi").unwrap();
        assert!(reply.actions.is_empty());
        assert!(reply.raw.contains("unparseable"));
        assert_eq!(backend.call_count(), 2);
    }

    /// A backend that answers exactly like the scripted policy, exercising
    /// the prompt rendering and action parsing in between.
    fn scripted_behind_llm() -> MockBackend {
        MockBackend::with_fallback(|request| {
            let system = &request.messages[0].content;
            let node = system
                .split_whitespace()
                .skip_while(|w| *w != "the")
                .nth(1)
                .expect("system prompt names the node");
            let prompt = system.lines().nth(1).unwrap_or("");
            let observation = &request.messages.last().unwrap().content;
            ScriptedPolicy.act(node, prompt, observation).unwrap().raw
        })
    }

    #[test]
    fn an_llm_episode_matches_the_scripted_one_and_replays_from_tape() {
        let world = test_world();
        let bundle = PromptBundle::uniform(&Directives::default());
        let lines = ["I need milk and sourdough bread.", "That's all, thanks!"];
        let config = EpisodeConfig::new("llm-parity");

        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(vegan_prefs());
        let scripted_trace =
            run_episode(&bundle, &world, &mut user, &mut ScriptedPolicy, &config).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let tape = dir.path().join("episode.tape");
        let recorder = crate::backend::CassetteBackend::record(
            &tape,
            Box::new(scripted_behind_llm()),
        )
        .unwrap();
        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(vegan_prefs());
        let mut policy = LlmPolicy { backend: &recorder };
        let llm_trace = run_episode(&bundle, &world, &mut user, &mut policy, &config).unwrap();

        assert_eq!(
            crate::tracemodel::final_cart_lenient(&llm_trace).lines,
            crate::tracemodel::final_cart_lenient(&scripted_trace).lines,
        );
        assert_eq!(
            llm_trace.turns.iter().map(|t| &t.text).collect::<Vec<_>>(),
            scripted_trace.turns.iter().map(|t| &t.text).collect::<Vec<_>>(),
        );

        let replayer = crate::backend::CassetteBackend::strict_replay(&tape).unwrap();
        let mut user = ScriptedUser::new(lines.to_vec()).with_preferences(vegan_prefs());
        let mut policy = LlmPolicy { backend: &replayer };
        let replayed = run_episode(&bundle, &world, &mut user, &mut policy, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&replayed).unwrap(),
            serde_json::to_string(&llm_trace).unwrap(),
        );
    }
}
