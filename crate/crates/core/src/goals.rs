//! Deterministic extraction of shopping goals from user dialogue.
//!
//! The simulated user's persona and the reference judge both need to know what
//! the user actually asked for: which items, with which attributes, in what
//! quantity, under what budget. Both consume this module so their notions of
//! "the user's final goal" can never drift apart. Extraction is a fixed
//! pattern set over lowercased text; later statements supersede earlier ones
//! item by item, so a clarification rewrites the goal it refines instead of
//! adding a duplicate.

use std::collections::BTreeSet;

use regex::Regex;
use std::sync::OnceLock;

use crate::worldsim::Money;

/// Attribute words recognized inside an item request. These become required
/// attributes on the goal and are stripped from its description.
pub const ATTRIBUTE_LEXICON: &[&str] = &[
    "organic",
    "vegan",
    "vegetarian",
    "gluten-free",
    "dairy-free",
    "sugar-free",
    "low-sodium",
    "unsalted",
    "decaf",
    "inflated",
    "slice",
    "whole",
];

/// Diet words that, stated about the speaker, become standing dietary
/// constraints rather than per-item attributes.
pub const DIETARY_LEXICON: &[&str] =
    &["vegan", "vegetarian", "gluten-free", "dairy-free", "nut-free", "kosher", "halal"];

/// One requested item in the user's final goal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalItem {
    /// Lowercased description with attribute words removed, e.g. "taco shells".
    pub description: String,
    pub required_attributes: BTreeSet<String>,
    pub desired_quantity: Option<u32>,
    /// Head count from a "for N people" clause in the same sentence.
    pub servings: Option<u32>,
}

impl GoalItem {
    /// Matching key: sorted description tokens. "chocolate cake" and
    /// "cake, chocolate" refine the same goal.
    pub fn key(&self) -> String {
        let mut tokens = crate::worldsim::tokenize(&self.description);
        tokens.sort();
        tokens.join(" ")
    }
}

/// The user's final goal after every statement has been applied in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GoalState {
    pub budget_cap: Option<Money>,
    pub dietary: BTreeSet<String>,
    pub preferred_brands: BTreeSet<String>,
    pub items: Vec<GoalItem>,
    /// Normalized phrases the user asked to drop and never re-requested.
    pub removed: Vec<String>,
}

impl GoalState {
    pub fn item_by_key(&self, key: &str) -> Option<&GoalItem> {
        self.items.iter().find(|g| g.key() == key)
    }
}

fn regexes() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(Patterns::new)
}

struct Patterns {
    budget: Regex,
    request: Regex,
    removal: Regex,
    dietary: Regex,
    brand: Regex,
    servings: Regex,
    leading_qty: Regex,
    word_numbers: Vec<(&'static str, u32)>,
}

impl Patterns {
    fn new() -> Self {
        Patterns {
            budget: Regex::new(
                r"(?:under|less than|at most|no more than|budget of|budget is|keep it under)\s*\$\s*(\d+(?:\.\d{1,2})?)",
            )
            .unwrap(),
            request: Regex::new(
                r"(?:i need|we need|i want|i'd like|i would like|please add|can you add|add|get me|get|buy|grab|pick up|make that|make it|i'm making|i am making|we're making|we are making|making)\s+(.+)",
            )
            .unwrap(),
            removal: Regex::new(
                r"(?:remove|skip|forget|cancel|drop|don't need|do not need|no longer need)\s+(?:the\s+)?(.+)",
            )
            .unwrap(),
            dietary: Regex::new(
                r"(?:i'm|i am|we're|we are|my family is|everyone here is|my household is)\s+(?:all\s+|strictly\s+)?([a-z-]+)|([a-z-]+)\s+(?:household|diet)\b",
            )
            .unwrap(),
            brand: Regex::new(r"(?:prefer|stick to|only buy)\s+([A-Za-z][\w']*)(?:\s+brand)?")
                .unwrap(),
            servings: Regex::new(r"for\s+(\d+)\s+(?:people|guests|of us)").unwrap(),
            leading_qty: Regex::new(r"^(\d+)\s+(.+)$").unwrap(),
            word_numbers: vec![
                ("a dozen", 12),
                ("one", 1),
                ("two", 2),
                ("three", 3),
                ("four", 4),
                ("five", 5),
                ("six", 6),
                ("seven", 7),
                ("eight", 8),
                ("nine", 9),
                ("ten", 10),
                ("eleven", 11),
                ("twelve", 12),
            ],
        }
    }
}

/// Parse a dollar amount like "12" or "12.50" into cents.
fn dollars_to_cents(text: &str) -> Option<Money> {
    let (dollars, cents) = match text.split_once('.') {
        Some((d, c)) => {
            let cents: Money = match c.len() {
                1 => c.parse::<Money>().ok()? * 10,
                2 => c.parse::<Money>().ok()?,
                _ => return None,
            };
            (d.parse::<Money>().ok()?, cents)
        }
        None => (text.parse::<Money>().ok()?, 0),
    };
    Some(dollars * 100 + cents)
}

/// Strip articles, pleasantries, and attribute words; pull out the quantity.
pub(crate) fn parse_item_phrase(phrase: &str) -> Option<GoalItem> {
    let p = regexes();
    let mut text = phrase.trim().trim_end_matches(['.', '!', '?']).trim().to_string();
    for filler in ["please", "thanks", "thank you"] {
        if let Some(stripped) = text.strip_suffix(filler) {
            text = stripped.trim().to_string();
        }
    }
    let servings = p.servings.captures(&text).and_then(|c| c[1].parse().ok());
    text = p.servings.replace(&text, "").trim().to_string();

    let mut quantity: Option<u32> = None;
    if let Some(caps) = p.leading_qty.captures(&text) {
        quantity = caps[1].parse().ok();
        text = caps[2].to_string();
    } else {
        for (word, n) in &p.word_numbers {
            if let Some(rest) = text.strip_prefix(&format!("{word} ")) {
                quantity = Some(*n);
                text = rest.to_string();
                break;
            }
        }
    }
    for article in ["a ", "an ", "the ", "some "] {
        if let Some(rest) = text.strip_prefix(article) {
            text = rest.to_string();
            break;
        }
    }
    if let Some(caps) = p.leading_qty.captures(&text.clone()) {
        if quantity.is_none() {
            quantity = caps[1].parse().ok();
            text = caps[2].to_string();
        }
    }

    let mut required = BTreeSet::new();
    let mut description_tokens = Vec::new();
    for raw in text.split_whitespace() {
        let mut token =
            raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase();
        if token.is_empty() {
            continue;
        }
        if token == "full" {
            // "a full cake" names the same form as "a whole cake".
            token = "whole".to_string();
        }
        if ATTRIBUTE_LEXICON.contains(&token.as_str()) {
            required.insert(token);
        } else if token == "of" && description_tokens.is_empty() {
            // "slice of cake": the attribute consumed the head word.
            continue;
        } else {
            description_tokens.push(token);
        }
    }
    if description_tokens.is_empty() {
        return None;
    }
    Some(GoalItem {
        description: description_tokens.join(" "),
        required_attributes: required,
        desired_quantity: quantity,
        servings,
    })
}

/// Split a request tail like "milk, eggs and 2 loaves of bread" into phrases.
fn split_item_list(tail: &str) -> Vec<String> {
    let mut phrases = Vec::new();
    for chunk in tail.split(',') {
        for piece in chunk.split(" and ") {
            let piece = piece.trim();
            if !piece.is_empty() {
                phrases.push(piece.to_string());
            }
        }
    }
    phrases
}

fn upsert(items: &mut Vec<GoalItem>, new_item: GoalItem) {
    let key = new_item.key();
    match items.iter_mut().find(|g| g.key() == key) {
        Some(existing) => {
            // Later statements supersede: refreshed attributes always win, a
            // quantity only when the new statement gives one.
            existing.required_attributes = new_item.required_attributes;
            if new_item.desired_quantity.is_some() {
                existing.desired_quantity = new_item.desired_quantity;
            }
            if new_item.servings.is_some() {
                existing.servings = new_item.servings;
            }
        }
        None => items.push(new_item),
    }
}

/// Returns the normalized removal key when the phrase named anything.
fn remove_matching(items: &mut Vec<GoalItem>, phrase: &str) -> Option<String> {
    let mut tokens = crate::worldsim::tokenize(phrase);
    tokens.retain(|t| !ATTRIBUTE_LEXICON.contains(&t.as_str()));
    if tokens.is_empty() {
        return None;
    }
    items.retain(|g| {
        let goal_tokens = crate::worldsim::tokenize(&g.description);
        !tokens.iter().all(|t| goal_tokens.contains(t))
    });
    Some(tokens.join(" "))
}

/// Apply one user statement to the goal state.
pub fn apply_statement(state: &mut GoalState, statement: &str) {
    let p = regexes();
    let lower = statement.to_lowercase();

    if let Some(caps) = p.budget.captures(&lower) {
        if let Some(cents) = dollars_to_cents(&caps[1]) {
            state.budget_cap = Some(cents);
        }
    }

    for caps in p.dietary.captures_iter(&lower) {
        let word = caps.get(1).or_else(|| caps.get(2)).map(|m| m.as_str()).unwrap_or("");
        if DIETARY_LEXICON.contains(&word) {
            state.dietary.insert(word.to_string());
        }
    }

    for caps in p.brand.captures_iter(statement) {
        let candidate = &caps[1];
        // Bare "prefer X" only counts when X looks like a brand name; the
        // "X brand" form is unambiguous.
        let suffixed = caps.get(0).map(|m| m.as_str().ends_with("brand")).unwrap_or(false);
        let capitalized = candidate.chars().next().map(|c| c.is_uppercase()).unwrap_or(false);
        let lexicon_word = ATTRIBUTE_LEXICON.contains(&candidate.to_lowercase().as_str());
        if (suffixed || capitalized) && !lexicon_word {
            state.preferred_brands.insert(candidate.to_string());
        }
    }

    // Sentence-by-sentence so one removal can't swallow a following request.
    for sentence in lower.split(['.', '!', '?', ';']) {
        let sentence = sentence.trim();
        if sentence.is_empty() {
            continue;
        }
        if let Some(caps) = p.removal.captures(sentence) {
            for phrase in split_item_list(&caps[1]) {
                if let Some(key) = remove_matching(&mut state.items, &phrase) {
                    if !state.removed.contains(&key) {
                        state.removed.push(key);
                    }
                }
            }
            continue;
        }
        if let Some(caps) = p.request.captures(sentence) {
            let tail = &caps[1];
            if tail.trim_start().starts_with('$') {
                continue;
            }
            for phrase in split_item_list(tail) {
                // Budget clauses ride along in item lists ("milk, keep it
                // under $5") and are not items.
                if phrase.contains('$') || p.budget.is_match(&phrase) {
                    continue;
                }
                if let Some(goal) = parse_item_phrase(&phrase) {
                    // A fresh request cancels an earlier removal of the same item.
                    let goal_tokens = crate::worldsim::tokenize(&goal.description);
                    state.removed.retain(|key| {
                        !key.split(' ').all(|t| goal_tokens.iter().any(|g| g == t))
                    });
                    upsert(&mut state.items, goal);
                }
            }
        }
    }
}

/// Fold a sequence of user statements into the final goal state.
pub fn extract_goals<S: AsRef<str>>(statements: &[S]) -> GoalState {
    let mut state = GoalState::default();
    for statement in statements {
        apply_statement(&mut state, statement.as_ref());
    }
    state
}
