//! Deterministic grocery-world environment: stores, catalogs, carts, and the
//! tool API agents call.
//!
//! A [`World`] is immutable after load. Episodes own their cart state through a
//! [`WorldSession`], so any number of episodes can run against the same world
//! in parallel. Every operation is a pure function of its inputs: identical
//! `(world, request)` pairs produce byte-identical responses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Money is integer cents throughout; floating point never touches a price.
pub type Money = i64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no such cart line: {0}")]
    NoSuchLine(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid world fixture: {0}")]
    InvalidWorld(String),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreType {
    Grocery,
    Convenience,
    Drug,
    Liquor,
    Specialty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Store {
    pub store_id: String,
    pub store_type: StoreType,
    pub name: String,
}

/// A positive count with a unit label, e.g. `6 ct` or `12 oz`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackSize {
    pub count: u32,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub name: String,
    pub brand: String,
    #[serde(default)]
    pub attribute_tags: BTreeSet<String>,
    /// Price in cents.
    pub price: Money,
    pub pack_size: PackSize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartLine {
    pub item_id: String,
    pub quantity: u32,
}

/// A cart holds at most one line per item; inserts merge by summing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cart {
    pub store_id: String,
    #[serde(default)]
    pub lines: Vec<CartLine>,
}

impl Cart {
    pub fn new(store_id: impl Into<String>) -> Self {
        Cart { store_id: store_id.into(), lines: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn line(&self, item_id: &str) -> Option<&CartLine> {
        self.lines.iter().find(|l| l.item_id == item_id)
    }

    pub fn quantity(&self, item_id: &str) -> u32 {
        self.line(item_id).map(|l| l.quantity).unwrap_or(0)
    }

    /// Stable digest of the cart contents, echoed by every mutation response.
    pub fn digest(&self) -> String {
        let mut canonical = format!("store={}", self.store_id);
        for line in &self.lines {
            canonical.push_str(&format!(";{}={}", line.item_id, line.quantity));
        }
        let hash = Sha256::digest(canonical.as_bytes());
        hex::encode(&hash[..8])
    }
}

/// Scalar argument value for tool calls. The grammar is deliberately small so
/// that argument canonicalization (case-folded text, sorted keys, exact
/// numerics) stays well defined.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Bool(bool),
    Int(i64),
    Text(String),
}

impl ArgValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            ArgValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(n) => Some(*n),
            _ => None,
        }
    }
}

impl From<&str> for ArgValue {
    fn from(s: &str) -> Self {
        ArgValue::Text(s.to_string())
    }
}

impl From<String> for ArgValue {
    fn from(s: String) -> Self {
        ArgValue::Text(s)
    }
}

impl From<i64> for ArgValue {
    fn from(n: i64) -> Self {
        ArgValue::Int(n)
    }
}

impl From<u32> for ArgValue {
    fn from(n: u32) -> Self {
        ArgValue::Int(n as i64)
    }
}

impl From<bool> for ArgValue {
    fn from(b: bool) -> Self {
        ArgValue::Bool(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    SelectStore,
    SearchCatalog,
    AddToCart,
    RemoveFromCart,
    SetQuantity,
    GetCart,
    GetPreferences,
}

impl ToolName {
    pub fn is_cart_mutation(&self) -> bool {
        matches!(self, ToolName::AddToCart | ToolName::RemoveFromCart | ToolName::SetQuantity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub tool_name: ToolName,
    #[serde(default)]
    pub arguments: BTreeMap<String, ArgValue>,
}

impl ToolRequest {
    pub fn new(tool_name: ToolName) -> Self {
        ToolRequest { tool_name, arguments: BTreeMap::new() }
    }

    pub fn with_arg(mut self, key: &str, value: impl Into<ArgValue>) -> Self {
        self.arguments.insert(key.to_string(), value.into());
        self
    }

    pub fn text_arg(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(|v| v.as_text())
    }

    pub fn int_arg(&self, key: &str) -> Option<i64> {
        self.arguments.get(key).and_then(|v| v.as_int())
    }
}

/// Tool response as a keyed record. Every cart mutation echoes the resulting
/// cart digest; `add_to_cart` additionally reports the lines it added.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ToolResponse {
    pub tool_name: Option<ToolName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub added_items: Vec<CartLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<CatalogItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cart: Option<Cart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cart_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<serde_json::Value>,
}

impl ToolResponse {
    fn for_tool(tool_name: ToolName) -> Self {
        ToolResponse { tool_name: Some(tool_name), ..Default::default() }
    }

    fn error_for(tool_name: ToolName, err: &WorldError) -> Self {
        ToolResponse { tool_name: Some(tool_name), error: Some(err.to_string()), ..Default::default() }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// Immutable world fixture: stores plus one catalog per store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub stores: Vec<Store>,
    pub catalogs: BTreeMap<String, Vec<CatalogItem>>,
}

impl World {
    /// Parse and validate a world fixture document.
    pub fn from_json(document: &str) -> Result<World, WorldError> {
        let world: World = serde_json::from_str(document)
            .map_err(|e| WorldError::InvalidWorld(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let mut store_ids = BTreeSet::new();
        for store in &self.stores {
            if !store_ids.insert(store.store_id.clone()) {
                return Err(WorldError::InvalidWorld(format!(
                    "duplicate store_id {}",
                    store.store_id
                )));
            }
        }
        for (store_id, catalog) in &self.catalogs {
            if !store_ids.contains(store_id) {
                return Err(WorldError::InvalidWorld(format!(
                    "catalog references unknown store {store_id}"
                )));
            }
            let mut item_ids = BTreeSet::new();
            for item in catalog {
                if !item_ids.insert(item.item_id.clone()) {
                    return Err(WorldError::InvalidWorld(format!(
                        "duplicate item_id {} in store {store_id}",
                        item.item_id
                    )));
                }
                if item.price < 0 {
                    return Err(WorldError::InvalidWorld(format!(
                        "negative price on item {}",
                        item.item_id
                    )));
                }
                if item.pack_size.count == 0 {
                    return Err(WorldError::InvalidWorld(format!(
                        "zero pack size on item {}",
                        item.item_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn store(&self, store_id: &str) -> Option<&Store> {
        self.stores.iter().find(|s| s.store_id == store_id)
    }

    pub fn catalog(&self, store_id: &str) -> Result<&[CatalogItem], WorldError> {
        if self.store(store_id).is_none() {
            return Err(WorldError::NotFound(format!("store {store_id}")));
        }
        Ok(self.catalogs.get(store_id).map(|c| c.as_slice()).unwrap_or(&[]))
    }

    pub fn item(&self, store_id: &str, item_id: &str) -> Result<&CatalogItem, WorldError> {
        self.catalog(store_id)?
            .iter()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| WorldError::NotFound(format!("item {item_id} in store {store_id}")))
    }

    /// Lexical-overlap ranked search, filtered to items carrying every
    /// requested attribute tag. Ranking is a total order: descending overlap
    /// score between query tokens and item-name tokens, ties broken by
    /// ascending `item_id`.
    pub fn search_catalog(
        &self,
        store_id: &str,
        query: &str,
        filters: &BTreeSet<String>,
        limit: usize,
    ) -> Result<Vec<CatalogItem>, WorldError> {
        if limit == 0 {
            return Err(WorldError::InvalidArgument("limit must be >= 1".into()));
        }
        let catalog = self.catalog(store_id)?;
        let query_tokens = tokenize(query);
        let mut scored: Vec<(usize, &CatalogItem)> = catalog
            .iter()
            .filter(|item| filters.iter().all(|f| item.attribute_tags.contains(f)))
            .map(|item| (lexical_overlap(&query_tokens, &tokenize(&item.name)), item))
            .collect();
        scored.sort_by(|(sa, ia), (sb, ib)| sb.cmp(sa).then_with(|| ia.item_id.cmp(&ib.item_id)));
        Ok(scored.into_iter().take(limit).map(|(_, item)| item.clone()).collect())
    }

    /// Total cart value in cents. Validity of the cart against this world is a
    /// precondition; an unknown item is reported rather than silently skipped.
    pub fn cart_total(&self, cart: &Cart) -> Result<Money, WorldError> {
        let mut total: Money = 0;
        for line in &cart.lines {
            let item = self.item(&cart.store_id, &line.item_id)?;
            total += item.price * line.quantity as Money;
        }
        Ok(total)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn lexical_overlap(query_tokens: &[String], name_tokens: &[String]) -> usize {
    let name_set: BTreeSet<&String> = name_tokens.iter().collect();
    let query_set: BTreeSet<&String> = query_tokens.iter().collect();
    query_set.iter().filter(|t| name_set.contains(**t)).count()
}

/// Token match tolerant of singular/plural surface forms.
pub fn token_eq(a: &str, b: &str) -> bool {
    a == b
        || (a.len() == b.len() + 1 && a.starts_with(b) && a.ends_with('s'))
        || (b.len() == a.len() + 1 && b.starts_with(a) && b.ends_with('s'))
}

/// All searchable text of an item: name, brand, and attribute tags.
pub fn item_match_tokens(item: &CatalogItem) -> Vec<String> {
    let mut tokens = tokenize(&item.name);
    tokens.extend(tokenize(&item.brand));
    for tag in &item.attribute_tags {
        tokens.push(tag.to_lowercase());
        tokens.extend(tokenize(tag));
    }
    tokens
}

/// True when every content word of the phrase appears in the item's text.
pub fn item_matches_phrase(item: &CatalogItem, phrase: &str) -> bool {
    let phrase_tokens = tokenize(phrase);
    if phrase_tokens.is_empty() {
        return false;
    }
    let targets = item_match_tokens(item);
    phrase_tokens.iter().all(|p| targets.iter().any(|t| token_eq(p, t)))
}

// ---------------------------------------------------------------------------
// Cart operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CartOp {
    Add { item_id: String, quantity: u32 },
    Remove { item_id: String },
    SetQuantity { item_id: String, quantity: u32 },
}

/// Apply one cart mutation. `Add` merges into an existing line by summing
/// quantities, `Remove` deletes the line, `SetQuantity` replaces the quantity.
/// The response carries `added_items` for adds and the new cart digest for
/// every successful mutation.
pub fn apply_cart_op(
    world: &World,
    cart: &Cart,
    op: &CartOp,
) -> Result<(Cart, ToolResponse), WorldError> {
    let mut next = cart.clone();
    let (tool_name, item_id) = match op {
        CartOp::Add { item_id, quantity } => {
            if *quantity == 0 {
                return Err(WorldError::InvalidArgument("quantity must be >= 1".into()));
            }
            world.item(&cart.store_id, item_id)?;
            match next.lines.iter_mut().find(|l| l.item_id == *item_id) {
                Some(line) => line.quantity += quantity,
                None => next.lines.push(CartLine { item_id: item_id.clone(), quantity: *quantity }),
            }
            (ToolName::AddToCart, item_id.clone())
        }
        CartOp::Remove { item_id } => {
            let before = next.lines.len();
            next.lines.retain(|l| l.item_id != *item_id);
            if next.lines.len() == before {
                return Err(WorldError::NoSuchLine(item_id.clone()));
            }
            (ToolName::RemoveFromCart, item_id.clone())
        }
        CartOp::SetQuantity { item_id, quantity } => {
            if *quantity == 0 {
                return Err(WorldError::InvalidArgument("quantity must be >= 1".into()));
            }
            world.item(&cart.store_id, item_id)?;
            match next.lines.iter_mut().find(|l| l.item_id == *item_id) {
                Some(line) => line.quantity = *quantity,
                None => return Err(WorldError::NoSuchLine(item_id.clone())),
            }
            (ToolName::SetQuantity, item_id.clone())
        }
    };

    let mut response = ToolResponse::for_tool(tool_name);
    response.item_id = Some(item_id.clone());
    if let CartOp::Add { quantity, .. } = op {
        response.quantity = Some(*quantity);
        response.added_items = vec![CartLine { item_id, quantity: *quantity }];
    }
    if let CartOp::SetQuantity { quantity, .. } = op {
        response.quantity = Some(*quantity);
    }
    response.cart_digest = Some(next.digest());
    Ok((next, response))
}

// ---------------------------------------------------------------------------
// Tool session
// ---------------------------------------------------------------------------

/// Per-episode tool surface. Holds the selected store and the episode's cart;
/// executes [`ToolRequest`]s and never aborts — failures come back as error
/// responses so the runtime can log them.
#[derive(Debug, Clone)]
pub struct WorldSession<'w> {
    pub world: &'w World,
    pub cart: Option<Cart>,
    preferences: serde_json::Value,
}

impl<'w> WorldSession<'w> {
    pub fn new(world: &'w World, preferences: serde_json::Value) -> Self {
        WorldSession { world, cart: None, preferences }
    }

    pub fn selected_store(&self) -> Option<&str> {
        self.cart.as_ref().map(|c| c.store_id.as_str())
    }

    pub fn execute(&mut self, request: &ToolRequest) -> ToolResponse {
        match self.try_execute(request) {
            Ok(response) => response,
            Err(err) => ToolResponse::error_for(request.tool_name, &err),
        }
    }

    fn try_execute(&mut self, request: &ToolRequest) -> Result<ToolResponse, WorldError> {
        match request.tool_name {
            ToolName::SelectStore => {
                let store_id = request
                    .text_arg("store_id")
                    .ok_or_else(|| WorldError::InvalidArgument("missing store_id".into()))?;
                let store = self
                    .world
                    .store(store_id)
                    .ok_or_else(|| WorldError::NotFound(format!("store {store_id}")))?;
                // Selecting a store opens a fresh cart for it.
                self.cart = Some(Cart::new(store.store_id.clone()));
                let mut response = ToolResponse::for_tool(ToolName::SelectStore);
                response.store_id = Some(store.store_id.clone());
                Ok(response)
            }
            ToolName::SearchCatalog => {
                let store_id = self.require_store()?.to_string();
                let query = request.text_arg("query").unwrap_or("").to_string();
                let filters: BTreeSet<String> = request
                    .text_arg("filters")
                    .map(|f| {
                        f.split(',')
                            .map(|s| s.trim().to_string())
                            .filter(|s| !s.is_empty())
                            .collect()
                    })
                    .unwrap_or_default();
                let limit = request.int_arg("limit").unwrap_or(5).max(1) as usize;
                let results = self.world.search_catalog(&store_id, &query, &filters, limit)?;
                let mut response = ToolResponse::for_tool(ToolName::SearchCatalog);
                response.results = results;
                Ok(response)
            }
            ToolName::AddToCart | ToolName::RemoveFromCart | ToolName::SetQuantity => {
                let cart = self
                    .cart
                    .as_ref()
                    .ok_or_else(|| WorldError::InvalidArgument("no store selected".into()))?;
                let item_id = request
                    .text_arg("item_id")
                    .ok_or_else(|| WorldError::InvalidArgument("missing item_id".into()))?
                    .to_string();
                let op = match request.tool_name {
                    ToolName::AddToCart => CartOp::Add {
                        item_id,
                        quantity: request.int_arg("quantity").unwrap_or(1).max(0) as u32,
                    },
                    ToolName::RemoveFromCart => CartOp::Remove { item_id },
                    _ => CartOp::SetQuantity {
                        item_id,
                        quantity: request.int_arg("quantity").unwrap_or(1).max(0) as u32,
                    },
                };
                let (next, response) = apply_cart_op(self.world, cart, &op)?;
                self.cart = Some(next);
                Ok(response)
            }
            ToolName::GetCart => {
                let mut response = ToolResponse::for_tool(ToolName::GetCart);
                let cart = self.cart.clone().unwrap_or_else(|| Cart::new(""));
                response.cart_digest = Some(cart.digest());
                response.cart = Some(cart);
                Ok(response)
            }
            ToolName::GetPreferences => {
                let mut response = ToolResponse::for_tool(ToolName::GetPreferences);
                response.preferences = Some(self.preferences.clone());
                Ok(response)
            }
        }
    }

    fn require_store(&self) -> Result<&str, WorldError> {
        self.selected_store()
            .ok_or_else(|| WorldError::InvalidArgument("no store selected".into()))
    }
}
