//! Regulation rule tables and report/message templates on disk.

use std::path::Path;

use petition_core::workflow::{RegulationRule, RuleTable, Templates, WorkflowError};
use thiserror::Error;

/// The table used when no rule file is configured.
pub const DEFAULT_RULES: &str = include_str!("../assets/rules.jsonl");

pub const REPORT_TEMPLATE_FILE: &str = "report.txt";
pub const MESSAGE_TEMPLATE_FILE: &str = "message.txt";

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("rule table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
}

/// Parses a line-delimited rule table and requires a rule for every class.
pub fn parse_rule_table(text: &str) -> Result<RuleTable, RulesError> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rule: RegulationRule =
            serde_json::from_str(line).map_err(|e| RulesError::Parse { line: i + 1, reason: e.to_string() })?;
        if rule.department.trim().is_empty() {
            return Err(RulesError::Parse { line: i + 1, reason: "department is empty".into() });
        }
        rules.push(rule);
    }
    let table = RuleTable::new(rules)?;
    table.check_complete()?;
    Ok(table)
}

pub fn load_rule_table(path: &Path) -> Result<RuleTable, RulesError> {
    parse_rule_table(&read(path)?)
}

pub fn default_rule_table() -> RuleTable {
    parse_rule_table(DEFAULT_RULES).expect("shipped rule table is valid")
}

/// `report.txt` and `message.txt` from `dir`.
pub fn load_templates(dir: &Path) -> Result<Templates, RulesError> {
    let report = read(&dir.join(REPORT_TEMPLATE_FILE))?;
    let message = read(&dir.join(MESSAGE_TEMPLATE_FILE))?;
    Ok(Templates::parse(&report, &message)?)
}

fn read(path: &Path) -> Result<String, RulesError> {
    std::fs::read_to_string(path).map_err(|source| RulesError::Io { path: path.display().to_string(), source })
}
