//! Intent-driven greedy grouping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendError, ChatBackend, Purpose};
use crate::intent::{ask_structured, extract_json_object, field, IntentError, IntentProfile, StructuredFailure};
use crate::purifier::McsId;

const JUDGE_TEMPLATE: &str = include_str!("../assets/prompts/judge.v1.txt");
const SYNTHESIZE_TEMPLATE: &str = include_str!("../assets/prompts/synthesize.v1.txt");

/// Re-asks allowed after an unusable judgment.
pub const JUDGE_RETRIES: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub members: Vec<McsId>,
    pub rep_intent: IntentProfile,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingState {
    pub groups: Vec<Group>,
    pub assignment: BTreeMap<McsId, String>,
}

impl GroupingState {
    pub fn group(&self, id: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    pub fn group_mut(&mut self, id: &str) -> Option<&mut Group> {
        self.groups.iter_mut().find(|g| g.group_id == id)
    }

    /// Groups are never deleted, so ids stay dense.
    fn next_group_id(&self) -> String {
        format!("G{}", self.groups.len() + 1)
    }

    pub fn open_group(&mut self, mcs: McsId, profile: IntentProfile) -> String {
        let id = self.next_group_id();
        self.assignment.insert(mcs.clone(), id.clone());
        self.groups.push(Group { group_id: id.clone(), members: vec![mcs], rep_intent: profile });
        id
    }

    /// True when every group is non-empty and `assignment` agrees with the
    /// member lists, each MCS appearing exactly once.
    pub fn is_partition(&self) -> bool {
        let mut seen = BTreeMap::new();
        for g in &self.groups {
            if g.members.is_empty() {
                return false;
            }
            for m in &g.members {
                if seen.insert(m, &g.group_id).is_some() {
                    return false;
                }
            }
        }
        seen.len() == self.assignment.len() && seen.iter().all(|(m, g)| self.assignment.get(*m) == Some(*g))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Existing(String),
    New,
}

#[derive(Debug, thiserror::Error)]
pub enum GroupingError {
    #[error("unusable judgment for {subject} ({reason}); last response: {last_raw:?}")]
    JudgmentParseFailure { subject: String, reason: String, last_raw: String },
    #[error("intent synthesis for {group}: {source}")]
    Synthesis { group: String, source: IntentError },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no intent profile for {0}")]
    UnknownMcs(McsId),
}

pub fn category_filter<'a>(state: &'a GroupingState, profile: &IntentProfile) -> Vec<&'a Group> {
    state.groups.iter().filter(|g| g.rep_intent.category == profile.category).collect()
}

fn render_judge_prompt(profile: &IntentProfile, candidates: &[&Group]) -> String {
    let mut listing = String::new();
    for (i, g) in candidates.iter().enumerate() {
        listing.push_str(&format!("{}. {}: {}\n", i + 1, g.group_id, g.rep_intent.summary));
    }
    JUDGE_TEMPLATE
        .replace("{{category}}", profile.category.label())
        .replace("{{summary}}", &profile.summary)
        .replace("{{what}}", &profile.what)
        .replace("{{how}}", &profile.how)
        .replace("{{why}}", &profile.why)
        .replace("{{candidates}}", &listing)
}

fn parse_choice(raw: &str, candidates: &[&Group]) -> Result<Choice, String> {
    let map = extract_json_object(raw).ok_or("no JSON object")?;
    let choice = match field(&map, "choice") {
        Some(Value::String(s)) => s.trim().to_string(),
        _ => return Err("missing string field `choice`".into()),
    };
    if choice.eq_ignore_ascii_case("new") {
        return Ok(Choice::New);
    }
    candidates
        .iter()
        .find(|g| g.group_id.eq_ignore_ascii_case(&choice))
        .map(|g| Choice::Existing(g.group_id.clone()))
        .ok_or_else(|| format!("`{choice}` is not one of the listed groups"))
}

/// Picks the best candidate group for `profile`, or NEW. No backend call
/// is made when there are no candidates.
pub fn comparative_judgment(
    subject: &McsId,
    profile: &IntentProfile,
    candidates: &[&Group],
    backend: &dyn ChatBackend,
) -> Result<Choice, GroupingError> {
    if candidates.is_empty() {
        return Ok(Choice::New);
    }
    let prompt = render_judge_prompt(profile, candidates);
    ask_structured(backend, Purpose::Judge, &subject.0, prompt, JUDGE_RETRIES, |raw| parse_choice(raw, candidates))
        .map_err(|f| match f {
            StructuredFailure::Backend(e) => GroupingError::Backend(e),
            StructuredFailure::Unparsable { reason, last_raw } => {
                GroupingError::JudgmentParseFailure { subject: subject.0.clone(), reason, last_raw }
            }
        })
}

fn render_synthesis_prompt(group: &Group, profiles: &BTreeMap<McsId, IntentProfile>) -> String {
    let mut members = String::new();
    for (i, m) in group.members.iter().enumerate() {
        let summary = profiles.get(m).map_or("", |p| p.summary.as_str());
        members.push_str(&format!("{}. {}\n", i + 1, summary));
    }
    SYNTHESIZE_TEMPLATE
        .replace("{{group_id}}", &group.group_id)
        .replace("{{category}}", group.rep_intent.category.label())
        .replace("{{members}}", &members)
}

fn parse_synthesis(raw: &str, group: &Group) -> Result<IntentProfile, IntentError> {
    let map = extract_json_object(raw).ok_or(IntentError::NoStructuredPayload)?;
    let text = |name| match field(&map, name) {
        Some(Value::String(s)) => s.trim().to_string(),
        _ => String::new(),
    };
    let summary = text("summary");
    if summary.is_empty() {
        return Err(IntentError::MissingField("summary"));
    }
    Ok(IntentProfile {
        category: group.rep_intent.category,
        summary,
        what: text("what"),
        how: text("how"),
        why: text("why"),
    })
}

/// New representative intent for a group of two or more members. The
/// category always stays the group's own.
pub fn synthesize_intent(
    group: &Group,
    profiles: &BTreeMap<McsId, IntentProfile>,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<IntentProfile, GroupingError> {
    let prompt = render_synthesis_prompt(group, profiles);
    ask_structured(backend, Purpose::Synthesize, &group.group_id, prompt, retries, |raw| parse_synthesis(raw, group))
        .map_err(|f| GroupingError::Synthesis { group: group.group_id.clone(), source: f.into() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    Joined(String),
    Opened(String),
}

impl Placement {
    pub fn group_id(&self) -> &str {
        match self {
            Placement::Joined(g) | Placement::Opened(g) => g,
        }
    }
}

/// One step of the greedy loop: filter by category (skipping `exclude`),
/// judge, then join and re-synthesize or open a new group.
pub fn place_mcs(
    state: &mut GroupingState,
    mcs: &McsId,
    profiles: &BTreeMap<McsId, IntentProfile>,
    exclude: Option<&str>,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<Placement, GroupingError> {
    let profile = profiles.get(mcs).ok_or_else(|| GroupingError::UnknownMcs(mcs.clone()))?;
    let candidates: Vec<&Group> = category_filter(state, profile)
        .into_iter()
        .filter(|g| Some(g.group_id.as_str()) != exclude)
        .collect();
    match comparative_judgment(mcs, profile, &candidates, backend)? {
        Choice::New => Ok(Placement::Opened(state.open_group(mcs.clone(), profile.clone()))),
        Choice::Existing(id) => {
            let group = state.group_mut(&id).expect("judged group exists");
            group.members.push(mcs.clone());
            let snapshot = group.clone();
            state.assignment.insert(mcs.clone(), id.clone());
            let intent = synthesize_intent(&snapshot, profiles, backend, retries)?;
            state.group_mut(&id).expect("judged group exists").rep_intent = intent;
            Ok(Placement::Joined(id))
        }
    }
}

pub fn greedy_grouping(
    order: &[McsId],
    profiles: &BTreeMap<McsId, IntentProfile>,
    backend: &dyn ChatBackend,
    retries: usize,
) -> Result<GroupingState, GroupingError> {
    let mut state = GroupingState::default();
    let Some((first, rest)) = order.split_first() else {
        return Ok(state);
    };
    let profile = profiles.get(first).ok_or_else(|| GroupingError::UnknownMcs(first.clone()))?;
    state.open_group(first.clone(), profile.clone());
    for mcs in rest {
        place_mcs(&mut state, mcs, profiles, None, backend, retries)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MeteredBackend, ReplayRecord, ScriptedBackend};
    use crate::intent::{ChangeCategory, DEFAULT_RETRIES};

    fn profiles(cats: &[ChangeCategory]) -> (Vec<McsId>, BTreeMap<McsId, IntentProfile>) {
        let ids: Vec<McsId> = (1..=cats.len()).map(|i| McsId(format!("m{i}"))).collect();
        let map = ids
            .iter()
            .zip(cats)
            .map(|(id, c)| (id.clone(), IntentProfile::new(*c, format!("change {id}"))))
            .collect();
        (ids, map)
    }

    fn choice(g: &str) -> String {
        format!("{{\"choice\": \"{g}\"}}")
    }

    fn members(state: &GroupingState) -> Vec<Vec<&str>> {
        state.groups.iter().map(|g| g.members.iter().map(|m| m.0.as_str()).collect()).collect()
    }

    #[test]
    fn empty_and_single() {
        let backend = ScriptedBackend::new([]);
        let (ids, map) = profiles(&[ChangeCategory::Test]);
        assert_eq!(greedy_grouping(&[], &map, &backend, 2).unwrap(), GroupingState::default());
        let state = greedy_grouping(&ids, &map, &backend, 2).unwrap();
        assert_eq!(members(&state), vec![vec!["m1"]]);
        assert_eq!(state.groups[0].rep_intent, map[&ids[0]]);
    }

    #[test]
    fn four_change_trace() {
        use ChangeCategory::*;
        let (ids, map) = profiles(&[BugFix, Feature, BugFix, Feature]);
        // m2: no Feature group yet, so NEW without a call.
        // m3: candidates [G1] -> judge says G1 -> synthesize G1.
        // m4: candidates [G2] -> judge says NEW.
        let backend = MeteredBackend::new(ScriptedBackend::new([
            ReplayRecord::new(Purpose::Judge, "m3", 0, choice("G1")),
            ReplayRecord::new(Purpose::Synthesize, "G1", 0, r#"{"summary": "Fix both", "category": "Feature"}"#),
            ReplayRecord::new(Purpose::Judge, "m4", 0, choice("NEW")),
        ]));
        let state = greedy_grouping(&ids, &map, &backend, DEFAULT_RETRIES).unwrap();
        assert_eq!(members(&state), vec![vec!["m1", "m3"], vec!["m2"], vec!["m4"]]);
        assert_eq!(state.groups[0].rep_intent.summary, "Fix both");
        assert_eq!(state.groups[0].rep_intent.category, BugFix);
        assert!(state.is_partition());
        let ledger = backend.ledger();
        assert_eq!(ledger.requests(Purpose::Judge), 2);
        assert_eq!(ledger.requests(Purpose::Synthesize), 1);
    }

    #[test]
    fn category_filter_preserves_order() {
        use ChangeCategory::*;
        let mut state = GroupingState::default();
        for (i, c) in [BugFix, Test, BugFix, Feature, BugFix].into_iter().enumerate() {
            state.open_group(McsId(format!("m{i}")), IntentProfile::new(c, "s"));
        }
        let ids: Vec<&str> =
            category_filter(&state, &IntentProfile::new(BugFix, "x")).iter().map(|g| g.group_id.as_str()).collect();
        assert_eq!(ids, vec!["G1", "G3", "G5"]);
        assert!(category_filter(&state, &IntentProfile::new(Performance, "x")).is_empty());
    }

    #[test]
    fn judge_picks_listed_group() {
        use ChangeCategory::*;
        let mut state = GroupingState::default();
        for i in 0..3 {
            state.open_group(McsId(format!("m{i}")), IntentProfile::new(BugFix, "s"));
        }
        let candidates = category_filter(&state, &IntentProfile::new(BugFix, "x"));
        let backend = ScriptedBackend::new([ReplayRecord::new(Purpose::Judge, "m9", 0, choice("G2"))]);
        let got = comparative_judgment(&McsId::from("m9"), &IntentProfile::new(BugFix, "x"), &candidates, &backend);
        assert_eq!(got.unwrap(), Choice::Existing("G2".into()));
    }

    #[test]
    fn unlisted_group_is_a_parse_failure_after_one_retry() {
        use ChangeCategory::*;
        let mut state = GroupingState::default();
        state.open_group(McsId::from("m1"), IntentProfile::new(BugFix, "s"));
        let candidates = category_filter(&state, &IntentProfile::new(BugFix, "x"));
        let backend = MeteredBackend::new(ScriptedBackend::new([
            ReplayRecord::new(Purpose::Judge, "m2", 0, choice("G7")),
            ReplayRecord::new(Purpose::Judge, "m2", 1, choice("G7")),
        ]));
        let got = comparative_judgment(&McsId::from("m2"), &IntentProfile::new(BugFix, "x"), &candidates, &backend);
        assert!(matches!(got, Err(GroupingError::JudgmentParseFailure { .. })));
        assert_eq!(backend.ledger().requests(Purpose::Judge), 2);
    }

    #[test]
    fn third_member_costs_one_synthesis() {
        use ChangeCategory::*;
        let (ids, map) = profiles(&[Test, Test, Test]);
        let backend = MeteredBackend::new(ScriptedBackend::new([
            ReplayRecord::new(Purpose::Judge, "m2", 0, choice("G1")),
            ReplayRecord::new(Purpose::Synthesize, "G1", 0, r#"{"summary": "Cover parser"}"#),
            ReplayRecord::new(Purpose::Judge, "m3", 0, choice("G1")),
            ReplayRecord::new(Purpose::Synthesize, "G1", 1, r#"{"summary": "Cover parser and lexer"}"#),
        ]));
        let state = greedy_grouping(&ids, &map, &backend, 2).unwrap();
        assert_eq!(members(&state), vec![vec!["m1", "m2", "m3"]]);
        assert_eq!(state.groups[0].rep_intent.summary, "Cover parser and lexer");
        assert_eq!(backend.ledger().requests(Purpose::Synthesize), 2);
    }
}
