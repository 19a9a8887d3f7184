//! The strategy pool and prompt composition.
//!
//! A strategy is a reusable prompt-improvement move. Suffix strategies
//! append fixed guidance (think step by step, re-read the question, …) to
//! the current prompt; rewrite strategies hand the current prompt to an
//! optimizer model together with a rewrite instruction and use its answer
//! as the new prompt. Ordered combinations of strategies are the actions
//! the search stage explores.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ChatMessage, ModelHandle};

/// Name of a strategy, unique within a pool.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyId(pub String);

impl StrategyId {
    pub fn new(name: impl Into<String>) -> Self {
        StrategyId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StrategyId {
    fn from(s: &str) -> Self {
        StrategyId(s.to_string())
    }
}

/// How a strategy transforms the current prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyMode {
    /// Append the template text to the prompt (or substitute `{prompt}` if
    /// the template carries the placeholder).
    Suffix,
    /// Ask an optimizer model to rewrite the prompt; the template is the
    /// rewrite instruction and must contain `{prompt}` exactly once.
    Rewrite,
}

/// One prompt-improvement move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub strategy_id: StrategyId,
    pub mode: StrategyMode,
    pub template: String,
}

#[derive(Debug, thiserror::Error)]
pub enum StrategyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse strategy pool: {0}")]
    PoolParse(#[from] serde_json::Error),
    #[error("duplicate strategy id '{0}'")]
    DuplicateStrategyId(StrategyId),
    #[error("strategy '{id}' has a bad template: {reason}")]
    BadTemplate { id: StrategyId, reason: String },
    #[error("unknown strategy id '{0}'")]
    UnknownStrategy(StrategyId),
    #[error("strategy '{0}' appears more than once in a combination")]
    ComboRepeat(StrategyId),
    #[error("strategy '{0}' is a rewrite strategy but no optimizer model was provided")]
    MissingOptimizer(StrategyId),
    #[error("optimizer returned an empty rewrite for strategy '{0}'")]
    OptimizerEmptyResponse(StrategyId),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A validated collection of strategies with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyPool {
    strategies: Vec<Strategy>,
}

static BUILTIN: OnceLock<StrategyPool> = OnceLock::new();

impl StrategyPool {
    /// The eight strategies shipped with the engine: Reasoning,
    /// Reinterpretation, SelfCriticism, and Rephrasing as suffixes;
    /// Simplification, RolePrompting, Decomposition, and Caption as
    /// optimizer rewrites.
    pub fn builtin() -> &'static StrategyPool {
        BUILTIN.get_or_init(|| {
            StrategyPool::from_json_str(include_str!("../resources/strategies.json"))
                .expect("embedded strategy pool must be valid")
        })
    }

    pub fn new(strategies: Vec<Strategy>) -> Result<Self, StrategyError> {
        let pool = StrategyPool { strategies };
        pool.validate()?;
        Ok(pool)
    }

    /// Parses a pool from JSON: either an array of strategy objects or a
    /// single strategy object (treated as a one-strategy pool).
    pub fn from_json_str(text: &str) -> Result<Self, StrategyError> {
        let strategies = match serde_json::from_str::<Vec<Strategy>>(text) {
            Ok(v) => v,
            Err(_) => vec![serde_json::from_str::<Strategy>(text)?],
        };
        Self::new(strategies)
    }

    pub fn from_file(path: &Path) -> Result<Self, StrategyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    fn validate(&self) -> Result<(), StrategyError> {
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i]
                .iter()
                .any(|other| other.strategy_id == s.strategy_id)
            {
                return Err(StrategyError::DuplicateStrategyId(s.strategy_id.clone()));
            }
            if s.template.trim().is_empty() {
                return Err(StrategyError::BadTemplate {
                    id: s.strategy_id.clone(),
                    reason: "template is empty".into(),
                });
            }
            if s.mode == StrategyMode::Rewrite {
                let occurrences = s.template.matches("{prompt}").count();
                if occurrences != 1 {
                    return Err(StrategyError::BadTemplate {
                        id: s.strategy_id.clone(),
                        reason: format!(
                            "rewrite template must contain {{prompt}} exactly once, found {occurrences}"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &StrategyId) -> Option<&Strategy> {
        self.strategies.iter().find(|s| &s.strategy_id == id)
    }

    pub fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn ids(&self) -> Vec<StrategyId> {
        self.strategies
            .iter()
            .map(|s| s.strategy_id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }
}

/// An ordered combination of distinct strategies. The empty combination is
/// the do-nothing action (the base prompt as-is); order matters because
/// strategies are applied sequentially.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyCombo(Vec<StrategyId>);

impl StrategyCombo {
    pub fn empty() -> Self {
        StrategyCombo(Vec::new())
    }

    pub fn new(ids: Vec<StrategyId>) -> Result<Self, StrategyError> {
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(StrategyError::ComboRepeat(id.clone()));
            }
        }
        Ok(StrategyCombo(ids))
    }

    pub fn ids(&self) -> &[StrategyId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Display label: `(base)` for the empty combination, otherwise the ids
    /// joined with `+` in application order.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            "(base)".to_string()
        } else {
            self.0
                .iter()
                .map(|id| id.as_str())
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

impl fmt::Display for StrategyCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// A prompt text plus where it came from: the base prompt it grew out of,
/// the strategy combination that produced it, and how many refinement
/// iterations have touched it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub text: String,
    pub base_prompt: String,
    pub combo: StrategyCombo,
    pub eso_iteration: u32,
    pub lineage_note: String,
}

impl PromptCandidate {
    /// Wraps a raw prompt as an unmodified candidate.
    pub fn base(text: impl Into<String>) -> Self {
        let text = text.into();
        PromptCandidate {
            base_prompt: text.clone(),
            text,
            combo: StrategyCombo::empty(),
            eso_iteration: 0,
            lineage_note: String::new(),
        }
    }
}

/// Strips decoration an optimizer model tends to wrap a prompt in: code
/// fences, then symmetric surrounding quotes, then whitespace.
pub(crate) fn clean_model_prompt(text: &str) -> String {
    let mut t = text.trim();
    if let Some(stripped) = t.strip_prefix("```") {
        // A language tag can only sit before a newline; single-line fences
        // carry the content directly.
        let body = match stripped.find('\n') {
            Some(first_newline) => &stripped[first_newline + 1..],
            None => stripped,
        };
        let body = body.trim_end();
        t = body.strip_suffix("```").map(str::trim_end).unwrap_or(body);
    }
    t = t.trim();
    for quote in ['"', '\''] {
        if t.len() >= 2 && t.starts_with(quote) && t.ends_with(quote) {
            t = t[1..t.len() - 1].trim();
            break;
        }
    }
    t.to_string()
}

fn apply_one(
    base_text: &str,
    strategy: &Strategy,
    optimizer: Option<&ModelHandle>,
) -> Result<String, StrategyError> {
    match strategy.mode {
        StrategyMode::Suffix => {
            if strategy.template.contains("{prompt}") {
                Ok(strategy.template.replace("{prompt}", base_text))
            } else {
                Ok(format!("{base_text}\n{}", strategy.template))
            }
        }
        StrategyMode::Rewrite => {
            let handle = optimizer
                .ok_or_else(|| StrategyError::MissingOptimizer(strategy.strategy_id.clone()))?;
            let instruction = strategy.template.replace("{prompt}", base_text);
            let message = ChatMessage::text(handle.model.template_role, instruction);
            let reply = handle.complete_text(vec![message])?;
            let cleaned = clean_model_prompt(&reply);
            if cleaned.is_empty() {
                return Err(StrategyError::OptimizerEmptyResponse(
                    strategy.strategy_id.clone(),
                ));
            }
            Ok(cleaned)
        }
    }
}

/// Applies a single strategy to a base prompt. Rewrite strategies need the
/// optimizer handle; suffix strategies never touch a model.
pub fn apply_strategy(
    base_prompt: &str,
    strategy: &Strategy,
    optimizer: Option<&ModelHandle>,
) -> Result<PromptCandidate, StrategyError> {
    let text = apply_one(base_prompt, strategy, optimizer)?;
    Ok(PromptCandidate {
        text,
        base_prompt: base_prompt.to_string(),
        combo: StrategyCombo(vec![strategy.strategy_id.clone()]),
        eso_iteration: 0,
        lineage_note: format!("{}({:?})", strategy.strategy_id, strategy.mode).to_lowercase(),
    })
}

/// Applies an ordered strategy combination left to right, threading the
/// intermediate prompt through each step. The empty combination returns the
/// base prompt unchanged.
pub fn compose_combo(
    pool: &StrategyPool,
    base_prompt: &str,
    combo: &StrategyCombo,
    optimizer: Option<&ModelHandle>,
) -> Result<PromptCandidate, StrategyError> {
    let mut text = base_prompt.to_string();
    let mut notes = Vec::new();
    for id in combo.ids() {
        let strategy = pool
            .get(id)
            .ok_or_else(|| StrategyError::UnknownStrategy(id.clone()))?;
        text = apply_one(&text, strategy, optimizer)?;
        notes.push(format!("{}({:?})", id, strategy.mode).to_lowercase());
    }
    Ok(PromptCandidate {
        text,
        base_prompt: base_prompt.to_string(),
        combo: combo.clone(),
        eso_iteration: 0,
        lineage_note: notes.join(" -> "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        BackendKind, CompletionRequest, CompletionResult, ModelBackend, ModelRef, TokenUsage,
    };
    use std::sync::Arc;

    /// Test backend that answers with a fixed function of the request text.
    struct FnBackend<F: Fn(&str) -> String + Send + Sync>(F);

    impl<F: Fn(&str) -> String + Send + Sync> ModelBackend for FnBackend<F> {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
            let text = req
                .messages
                .iter()
                .map(|m| m.text.as_str())
                .collect::<Vec<_>>()
                .join("\n");
            Ok(CompletionResult {
                text: (self.0)(&text),
                usage: TokenUsage::default(),
                latency_ms: 0,
                backend_kind: BackendKind::Simulated,
                retries: 0,
            })
        }

        fn kind(&self) -> BackendKind {
            BackendKind::Simulated
        }
    }

    fn fn_handle(f: impl Fn(&str) -> String + Send + Sync + 'static) -> ModelHandle {
        ModelHandle::new(
            ModelRef::optimizer("test-optimizer", "simulated"),
            Arc::new(FnBackend(f)),
        )
    }

    #[test]
    fn builtin_pool_shape() {
        let pool = StrategyPool::builtin();
        assert_eq!(pool.len(), 8);
        let mode_of = |name: &str| pool.get(&StrategyId::from(name)).unwrap().mode;
        for suffix in [
            "Reasoning",
            "Reinterpretation",
            "SelfCriticism",
            "Rephrasing",
        ] {
            assert_eq!(mode_of(suffix), StrategyMode::Suffix, "{suffix}");
        }
        for rewrite in [
            "Simplification",
            "RolePrompting",
            "Decomposition",
            "Caption",
        ] {
            assert_eq!(mode_of(rewrite), StrategyMode::Rewrite, "{rewrite}");
        }
        let simplification = pool.get(&StrategyId::from("Simplification")).unwrap();
        assert!(simplification
            .template
            .contains("optimizing prompts to help smaller models"));
        let reasoning = pool.get(&StrategyId::from("Reasoning")).unwrap();
        assert!(reasoning
            .template
            .starts_with("Please carefully understand the question"));
    }

    #[test]
    fn pool_validation() {
        let dup = r#"[
            {"strategy_id": "A", "mode": "suffix", "template": "x"},
            {"strategy_id": "A", "mode": "suffix", "template": "y"}
        ]"#;
        assert!(matches!(
            StrategyPool::from_json_str(dup),
            Err(StrategyError::DuplicateStrategyId(_))
        ));

        let no_placeholder =
            r#"[{"strategy_id": "R", "mode": "rewrite", "template": "rewrite it"}]"#;
        assert!(matches!(
            StrategyPool::from_json_str(no_placeholder),
            Err(StrategyError::BadTemplate { .. })
        ));

        let single = r#"{"strategy_id": "S", "mode": "suffix", "template": "be careful"}"#;
        assert_eq!(StrategyPool::from_json_str(single).unwrap().len(), 1);
    }

    #[test]
    fn combo_rejects_repeats_and_orders() {
        let a = StrategyId::from("A");
        let b = StrategyId::from("B");
        assert!(StrategyCombo::new(vec![a.clone(), b.clone()]).is_ok());
        assert!(matches!(
            StrategyCombo::new(vec![a.clone(), a.clone()]),
            Err(StrategyError::ComboRepeat(_))
        ));
        let ab = StrategyCombo::new(vec![a.clone(), b.clone()]).unwrap();
        let ba = StrategyCombo::new(vec![b, a]).unwrap();
        assert_ne!(ab, ba);
        assert_eq!(ab.label(), "A+B");
        assert_eq!(StrategyCombo::empty().label(), "(base)");
    }

    #[test]
    fn suffix_application_appends() {
        let pool = StrategyPool::builtin();
        let reasoning = pool.get(&StrategyId::from("Reasoning")).unwrap();
        let out = apply_strategy("Name the color.", reasoning, None).unwrap();
        assert!(out.text.starts_with("Name the color.\n"));
        assert!(out.text.ends_with(reasoning.template.as_str()));
        assert_eq!(out.combo.ids().len(), 1);
    }

    #[test]
    fn rewrite_requires_optimizer_and_substitutes_prompt() {
        let pool = StrategyPool::builtin();
        let simplification = pool.get(&StrategyId::from("Simplification")).unwrap();
        assert!(matches!(
            apply_strategy("Base prompt.", simplification, None),
            Err(StrategyError::MissingOptimizer(_))
        ));

        let handle = fn_handle(|req| {
            assert!(req.contains("My prompt is: Base prompt.."));
            assert!(!req.contains("{prompt}"));
            "  ```\nRewritten prompt.\n```  ".to_string()
        });
        let out = apply_strategy("Base prompt.", simplification, Some(&handle)).unwrap();
        assert_eq!(out.text, "Rewritten prompt.");
    }

    #[test]
    fn empty_rewrite_is_an_error() {
        let pool = StrategyPool::builtin();
        let simplification = pool.get(&StrategyId::from("Simplification")).unwrap();
        let handle = fn_handle(|_| "``````".to_string());
        assert!(matches!(
            apply_strategy("Base.", simplification, Some(&handle)),
            Err(StrategyError::OptimizerEmptyResponse(_))
        ));
    }

    #[test]
    fn compose_combo_chains_in_order() {
        let pool = StrategyPool::new(vec![
            Strategy {
                strategy_id: "One".into(),
                mode: StrategyMode::Suffix,
                template: "first".into(),
            },
            Strategy {
                strategy_id: "Two".into(),
                mode: StrategyMode::Suffix,
                template: "second".into(),
            },
        ])
        .unwrap();
        let combo = StrategyCombo::new(vec!["One".into(), "Two".into()]).unwrap();
        let out = compose_combo(&pool, "base", &combo, None).unwrap();
        assert_eq!(out.text, "base\nfirst\nsecond");
        let reversed = StrategyCombo::new(vec!["Two".into(), "One".into()]).unwrap();
        let out2 = compose_combo(&pool, "base", &reversed, None).unwrap();
        assert_eq!(out2.text, "base\nsecond\nfirst");
        assert_eq!(
            compose_combo(&pool, "base", &StrategyCombo::empty(), None)
                .unwrap()
                .text,
            "base"
        );
        let unknown = StrategyCombo::new(vec!["Nope".into()]).unwrap();
        assert!(matches!(
            compose_combo(&pool, "base", &unknown, None),
            Err(StrategyError::UnknownStrategy(_))
        ));
    }

    #[test]
    fn clean_model_prompt_strips_decoration() {
        assert_eq!(clean_model_prompt("plain"), "plain");
        assert_eq!(clean_model_prompt("```\nwrapped\n```"), "wrapped");
        assert_eq!(clean_model_prompt("```text\nwrapped\n```"), "wrapped");
        assert_eq!(clean_model_prompt("\"quoted\""), "quoted");
        assert_eq!(clean_model_prompt("  ' spaced '  "), "spaced");
    }
}
