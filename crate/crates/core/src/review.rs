//! Reviewer: per-group coherence checks and the group-review-refine loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{ChatBackend, Purpose};
use crate::grouping::{place_mcs, synthesize_intent, Group, GroupingError, GroupingState, Placement};
use crate::intent::{ask_structured, extract_json_object, field, IntentProfile, StructuredFailure};
use crate::purifier::McsId;

const REVIEW_TEMPLATE: &str = include_str!("../assets/prompts/review.v1.txt");

pub const DEFAULT_MAX_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_intent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outliers: Vec<McsId>,
}

impl ReviewDecision {
    pub fn accept() -> Self {
        Self { verdict: Verdict::Accept, core_intent: None, outliers: vec![] }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("unusable review of {group} ({reason}); last response: {last_raw:?}")]
    ReviewParseFailure { group: String, reason: String, last_raw: String },
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error("group {0} does not exist")]
    UnknownGroup(String),
    #[error("decision for {0} is not a REJECT with a non-empty coherent subset")]
    NotRejected(String),
}

fn render_review_prompt(group: &Group, profiles: &BTreeMap<McsId, IntentProfile>) -> String {
    let mut members = String::new();
    for m in &group.members {
        let summary = profiles.get(m).map_or("", |p| p.summary.as_str());
        members.push_str(&format!("- {m}: {summary}\n"));
    }
    REVIEW_TEMPLATE
        .replace("{{group_id}}", &group.group_id)
        .replace("{{category}}", group.rep_intent.category.label())
        .replace("{{members}}", &members)
}

fn parse_review(raw: &str, group: &Group) -> Result<ReviewDecision, String> {
    let map = extract_json_object(raw).ok_or("no JSON object")?;
    let verdict = match field(&map, "verdict") {
        Some(Value::String(v)) if v.trim().eq_ignore_ascii_case("accept") => Verdict::Accept,
        Some(Value::String(v)) if v.trim().eq_ignore_ascii_case("reject") => Verdict::Reject,
        other => return Err(format!("verdict must be ACCEPT or REJECT, got {other:?}")),
    };
    let core_intent = match field(&map, "core_intent") {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        _ => None,
    };
    let listed = match field(&map, "outliers") {
        None | Some(Value::Null) => vec![],
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::trim).ok_or("outliers must be strings"))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err("outliers must be a list".into()),
    };
    let mut outliers = Vec::new();
    for id in &listed {
        let member = group.members.iter().find(|m| m.0 == *id).ok_or_else(|| format!("`{id}` is not a member"))?;
        if !outliers.contains(member) {
            outliers.push(member.clone());
        }
    }
    // Report outliers in member order.
    outliers.sort_by_key(|o| group.members.iter().position(|m| m == o));
    match verdict {
        Verdict::Accept if !outliers.is_empty() => Err("ACCEPT must not list outliers".into()),
        Verdict::Accept => Ok(ReviewDecision { verdict, core_intent, outliers }),
        Verdict::Reject if outliers.is_empty() => Err("REJECT must name at least one outlier".into()),
        Verdict::Reject if outliers.len() == group.members.len() => {
            Err("every member is an outlier, so no coherent subset remains".into())
        }
        Verdict::Reject => Ok(ReviewDecision { verdict, core_intent, outliers }),
    }
}

/// Singletons are accepted without a call.
pub fn review_group(
    group: &Group,
    profiles: &BTreeMap<McsId, IntentProfile>,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<ReviewDecision, ReviewError> {
    if group.members.len() <= 1 {
        return Ok(ReviewDecision::accept());
    }
    let prompt = render_review_prompt(group, profiles);
    ask_structured(backend, Purpose::Review, &group.group_id, prompt, retries, |raw| parse_review(raw, group)).map_err(
        |f| match f {
            StructuredFailure::Backend(e) => ReviewError::Grouping(GroupingError::Backend(e)),
            StructuredFailure::Unparsable { reason, last_raw } => {
                ReviewError::ReviewParseFailure { group: group.group_id.clone(), reason, last_raw }
            }
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Excise { group_id: String, outliers: Vec<McsId> },
    Resynthesize { group_id: String },
    ResetToMember { group_id: String, mcs_id: McsId },
    JoinGroup { mcs_id: McsId, from: String, to: String },
    NewGroup { mcs_id: McsId, from: String, to: String },
}

/// Applies a REJECT: removes the outliers, refreshes the shrunken group's
/// intent and re-places each outlier among same-category groups other than
/// the rejected one. Returns the actions taken and the touched group ids.
pub fn excise_and_regroup(
    state: &mut GroupingState,
    rejected: &str,
    decision: &ReviewDecision,
    profiles: &BTreeMap<McsId, IntentProfile>,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<(Vec<Action>, BTreeSet<String>), ReviewError> {
    let group = state.group_mut(rejected).ok_or_else(|| ReviewError::UnknownGroup(rejected.to_string()))?;
    let keeps_some = group.members.iter().any(|m| !decision.outliers.contains(m));
    let all_members = decision.outliers.iter().all(|o| group.members.contains(o));
    if decision.verdict != Verdict::Reject || decision.outliers.is_empty() || !keeps_some || !all_members {
        return Err(ReviewError::NotRejected(rejected.to_string()));
    }
    group.members.retain(|m| !decision.outliers.contains(m));
    for o in &decision.outliers {
        state.assignment.remove(o);
    }

    let mut actions = vec![Action::Excise { group_id: rejected.to_string(), outliers: decision.outliers.clone() }];
    let mut touched = BTreeSet::from([rejected.to_string()]);

    let group = state.group(rejected).expect("checked above").clone();
    if let [sole] = group.members.as_slice() {
        let profile = profiles.get(sole).ok_or_else(|| GroupingError::UnknownMcs(sole.clone()))?;
        state.group_mut(rejected).expect("checked above").rep_intent = profile.clone();
        actions.push(Action::ResetToMember { group_id: rejected.to_string(), mcs_id: sole.clone() });
    } else {
        let intent = synthesize_intent(&group, profiles, backend, retries)?;
        state.group_mut(rejected).expect("checked above").rep_intent = intent;
        actions.push(Action::Resynthesize { group_id: rejected.to_string() });
    }

    for outlier in &decision.outliers {
        let placement = place_mcs(state, outlier, profiles, Some(rejected), backend, retries)?;
        touched.insert(placement.group_id().to_string());
        actions.push(match placement {
            Placement::Joined(to) => Action::JoinGroup { mcs_id: outlier.clone(), from: rejected.to_string(), to },
            Placement::Opened(to) => Action::NewGroup { mcs_id: outlier.clone(), from: rejected.to_string(), to },
        });
    }
    Ok((actions, touched))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDecision {
    pub group_id: String,
    pub members: Vec<McsId>,
    pub decision: ReviewDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub decisions: Vec<GroupDecision>,
    pub actions: Vec<Action>,
    /// Member lists of every group once the round's actions are applied.
    pub groups_after: BTreeMap<String, Vec<McsId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("refinement aborted in round {}: {error}", trace.rounds.len() + 1)]
pub struct RefinementFailure {
    pub error: ReviewError,
    pub trace: RefinementTrace,
}

/// Reviews every group not accepted since it last changed, applies the
/// REJECTs, and repeats until a round is all-ACCEPT or `max_rounds` is hit.
pub fn refinement_loop(
    initial: GroupingState,
    profiles: &BTreeMap<McsId, IntentProfile>,
    backend: &dyn ChatBackend,
    max_rounds: usize,
    retries: usize,
) -> Result<(GroupingState, RefinementTrace), RefinementFailure> {
    let mut state = initial;
    let mut trace = RefinementTrace::default();
    let mut pending: BTreeSet<String> = state.groups.iter().map(|g| g.group_id.clone()).collect();
    for round_index in 1..=max_rounds.max(1) {
        let mut decisions = Vec::new();
        for group in state.groups.iter().filter(|g| pending.contains(&g.group_id)) {
            match review_group(group, profiles, backend, retries) {
                Ok(decision) => decisions.push(GroupDecision {
                    group_id: group.group_id.clone(),
                    members: group.members.clone(),
                    decision,
                }),
                Err(error) => return Err(RefinementFailure { error, trace }),
            }
        }
        let mut actions = Vec::new();
        let mut touched = BTreeSet::new();
        for d in decisions.iter().filter(|d| d.decision.verdict == Verdict::Reject) {
            match excise_and_regroup(&mut state, &d.group_id, &d.decision, profiles, backend, retries) {
                Ok((a, t)) => {
                    actions.extend(a);
                    touched.extend(t);
                }
                Err(error) => return Err(RefinementFailure { error, trace }),
            }
        }
        debug_assert!(state.is_partition());
        let all_accept = actions.is_empty();
        trace.rounds.push(RoundRecord {
            round_index,
            decisions,
            actions,
            groups_after: state.groups.iter().map(|g| (g.group_id.clone(), g.members.clone())).collect(),
        });
        if all_accept {
            trace.converged = true;
            break;
        }
        pending = touched;
    }
    Ok((state, trace))
}
