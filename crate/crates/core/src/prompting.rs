//! Prompt assembly for the ICL, X-ICL and NLE-generation families, and
//! parsing of completions back into labels and NLEs.
//!
//! A rendered prompt is the meta-prompt, a blank line, then one block per
//! demonstration followed by the query block, blocks separated by a line
//! holding `=====`.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Instance, Label, NleRecord, TaskKind};

pub const BLOCK_DELIMITER: &str = "=====";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    Icl,
    Xicl,
    NlegenZero,
    NlegenFew,
    NlegenZeroShort,
}

impl PromptFamily {
    pub fn is_nlegen(self) -> bool {
        matches!(
            self,
            PromptFamily::NlegenZero | PromptFamily::NlegenFew | PromptFamily::NlegenZeroShort
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt spec invariant violated: {0}")]
    SpecInvariantViolated(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instance: Instance,
    pub label: Label,
    pub nle: Option<NleRecord>,
}

impl Demonstration {
    /// Labelled with the instance's gold label.
    pub fn new(instance: Instance, nle: Option<NleRecord>) -> Result<Self, PromptError> {
        if let Some(n) = &nle {
            if n.instance_id != instance.id {
                return Err(PromptError::SpecInvariantViolated(format!(
                    "NLE for {} attached to demonstration {}",
                    n.instance_id, instance.id
                )));
            }
        }
        Ok(Demonstration {
            label: instance.gold_label,
            instance,
            nle,
        })
    }

    /// Drops the NLE, for ICL prompts.
    pub fn without_nle(&self) -> Self {
        Demonstration {
            nle: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub family: PromptFamily,
    pub meta_prompt: String,
    pub demonstrations: Vec<Demonstration>,
    pub query: Instance,
    pub query_label: Option<Label>,
}

impl PromptSpec {
    /// Spec using the shipped meta-prompt for `family` and the query's task.
    pub fn new(
        family: PromptFamily,
        demonstrations: Vec<Demonstration>,
        query: Instance,
        query_label: Option<Label>,
    ) -> Self {
        PromptSpec {
            meta_prompt: meta_prompt(family, query.task),
            family,
            demonstrations,
            query,
            query_label,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let fail = |msg: String| Err(PromptError::SpecInvariantViolated(msg));
        let task = self.query.task;
        for d in &self.demonstrations {
            if d.instance.task != task || !task.contains(d.label) {
                return fail(format!("demonstration {} does not belong to task {task}", d.instance.id));
            }
        }
        let with_nle = self.demonstrations.iter().filter(|d| d.nle.is_some()).count();
        match self.family {
            PromptFamily::Icl if with_nle > 0 => return fail("icl demonstrations carry NLEs".into()),
            PromptFamily::Xicl if with_nle < self.demonstrations.len() => {
                return fail("xicl demonstration without an NLE".into())
            }
            PromptFamily::NlegenZero | PromptFamily::NlegenZeroShort if !self.demonstrations.is_empty() => {
                return fail("zero-shot generation takes no demonstrations".into())
            }
            PromptFamily::NlegenFew if self.demonstrations.is_empty() || with_nle < self.demonstrations.len() => {
                return fail("few-shot generation needs demonstrations that all carry NLEs".into())
            }
            _ => {}
        }
        match (self.family.is_nlegen(), self.query_label) {
            (true, None) => fail("NLE generation needs the query label".into()),
            (_, Some(l)) if !task.contains(l) => fail(format!("query label {l} not in task {task}")),
            _ => Ok(()),
        }
    }
}

const NLI_ZERO: &str = include_str!("../data/prompts/nli_zero.txt");
const NLI_FEW: &str = include_str!("../data/prompts/nli_few.txt");
const NLI_ZERO_SHORT: &str = include_str!("../data/prompts/nli_zero_short.txt");
const NLI_CLASSIFY: &str = include_str!("../data/prompts/nli_classify.txt");
const PARA_ZERO: &str = include_str!("../data/prompts/paraphrase_zero.txt");
const PARA_FEW: &str = include_str!("../data/prompts/paraphrase_few.txt");
const PARA_ZERO_SHORT: &str = include_str!("../data/prompts/paraphrase_zero_short.txt");
const PARA_CLASSIFY: &str = include_str!("../data/prompts/paraphrase_classify.txt");

/// Sentence appended to the zero-shot generation meta-prompt for short NLEs.
pub const SHORT_SUFFIX: &str = "Limit the explanation to at most one short sentence.";

/// The shipped meta-prompt text for a family and task. Classification
/// families end with a line describing the expected answer format.
pub fn meta_prompt(family: PromptFamily, task: TaskKind) -> String {
    let nli = task == TaskKind::Nli;
    let pick = |a: &str, b: &str| if nli { a.to_string() } else { b.to_string() };
    let labels = task
        .labels()
        .iter()
        .map(|l| l.prompt_form())
        .collect::<Vec<_>>()
        .join(", ");
    match family {
        PromptFamily::NlegenZero => pick(NLI_ZERO, PARA_ZERO),
        PromptFamily::NlegenFew => pick(NLI_FEW, PARA_FEW),
        PromptFamily::NlegenZeroShort => pick(NLI_ZERO_SHORT, PARA_ZERO_SHORT),
        PromptFamily::Icl => format!(
            "{}\nAnswer with 'Label:' followed by one of {labels}.",
            pick(NLI_CLASSIFY, PARA_CLASSIFY)
        ),
        PromptFamily::Xicl => format!(
            "{}\nAnswer with 'Label:' followed by one of {labels}, then 'NLE:' and a one-sentence explanation.",
            pick(NLI_CLASSIFY, PARA_CLASSIFY)
        ),
    }
}

/// One `Premise:/Hypothesis:/Label:/NLE:` (or `Q1:/Q2:/...`) block.
pub fn render_demonstration(demo: &Demonstration, with_nle: bool) -> String {
    let (fa, fb) = demo.instance.task.field_names();
    let mut out = format!(
        "{fa}: {}\n{fb}: {}\nLabel: {}",
        demo.instance.text_a,
        demo.instance.text_b,
        demo.label.prompt_form()
    );
    if with_nle {
        if let Some(nle) = &demo.nle {
            out.push_str("\nNLE: ");
            out.push_str(&nle.text);
        }
    }
    out
}

fn render_query(spec: &PromptSpec) -> String {
    let (fa, fb) = spec.query.task.field_names();
    let mut out = format!("{fa}: {}\n{fb}: {}", spec.query.text_a, spec.query.text_b);
    if let (true, Some(label)) = (spec.family.is_nlegen(), spec.query_label) {
        out.push_str("\nLabel: ");
        out.push_str(label.prompt_form());
    }
    out
}

pub fn render(spec: &PromptSpec) -> Result<String, PromptError> {
    spec.validate()?;
    let with_nle = spec.family != PromptFamily::Icl;
    let blocks: Vec<String> = spec
        .demonstrations
        .iter()
        .map(|d| render_demonstration(d, with_nle))
        .chain(std::iter::once(render_query(spec)))
        .collect();
    Ok(format!(
        "{}\n\n{}",
        spec.meta_prompt,
        blocks.join(&format!("\n{BLOCK_DELIMITER}\n"))
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub label: Option<Label>,
    pub nle: Option<String>,
    pub raw: String,
}

fn label_regex(task: TaskKind) -> &'static Regex {
    static NLI: OnceLock<Regex> = OnceLock::new();
    static PARA: OnceLock<Regex> = OnceLock::new();
    let cell = if task == TaskKind::Nli { &NLI } else { &PARA };
    cell.get_or_init(|| {
        let mut spellings: Vec<&str> = task.labels().iter().flat_map(|l| l.spellings().iter().copied()).collect();
        spellings.sort_by_key(|s| std::cmp::Reverse(s.len()));
        let alts: Vec<String> = spellings.iter().map(|s| regex::escape(s)).collect();
        Regex::new(&format!(r"(?i)\b({})\b", alts.join("|"))).expect("label regex")
    })
}

fn find_label(text: &str, task: TaskKind) -> Option<Label> {
    let m = label_regex(task).find(text)?;
    m.as_str().parse().ok()
}

/// Strips a case-insensitive `key:` prefix (after optional markdown emphasis).
fn after_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let t = line.trim_start().trim_start_matches(['*', '#', '-', ' ']);
    let head = t.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = t[key.len()..].trim_start_matches('*');
    rest.strip_prefix(':').map(|r| r.trim_start_matches('*'))
}

pub fn parse_completion(raw: &str, task: TaskKind, family: PromptFamily) -> ParsedCompletion {
    if family.is_nlegen() {
        let trimmed = raw.trim();
        let body = after_key(trimmed, "NLE").unwrap_or(trimmed).trim();
        return ParsedCompletion {
            label: None,
            nle: (!body.is_empty()).then(|| body.to_string()),
            raw: raw.to_string(),
        };
    }

    let lines: Vec<&str> = raw.lines().collect();
    let label = lines
        .iter()
        .find_map(|l| after_key(l, "Label"))
        .and_then(|rest| find_label(rest, task))
        .or_else(|| {
            let first = lines.iter().find(|l| !l.trim().is_empty())?;
            find_label(first, task)
        });

    let nle = if family == PromptFamily::Xicl {
        lines.iter().position(|l| after_key(l, "NLE").is_some()).and_then(|start| {
            let mut parts = vec![after_key(lines[start], "NLE").unwrap_or("").trim()];
            for l in &lines[start + 1..] {
                if after_key(l, "Label").is_some() {
                    break;
                }
                parts.push(l.trim());
            }
            let text = parts.join(" ").trim().to_string();
            (!text.is_empty()).then_some(text)
        })
    } else {
        None
    };

    ParsedCompletion {
        label,
        nle,
        raw: raw.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::shipped;
    use proptest::prelude::*;

    fn inst(id: &str, a: &str, b: &str, label: Label) -> Instance {
        Instance {
            id: id.into(),
            task: TaskKind::Nli,
            text_a: a.into(),
            text_b: b.into(),
            gold_label: label,
        }
    }

    fn fewshot_nli() -> Vec<Demonstration> {
        let (ds, bank) = shipped::esnli_fewshot();
        ds.instances
            .into_iter()
            .zip(bank)
            .map(|(i, n)| Demonstration::new(i, Some(n)).unwrap())
            .collect()
    }

    #[test]
    fn xicl_completion() {
        let p = parse_completion("Label: entailment\nNLE: The boy peers out...", TaskKind::Nli, PromptFamily::Xicl);
        assert_eq!(p.label, Some(Label::Entailment));
        assert_eq!(p.nle.as_deref(), Some("The boy peers out..."));
    }

    #[test]
    fn icl_completion_fallbacks() {
        let p = parse_completion("ENTAILMENT.", TaskKind::Nli, PromptFamily::Icl);
        assert_eq!(p.label, Some(Label::Entailment));
        assert_eq!(p.nle, None);
        let p = parse_completion("I am not sure.", TaskKind::Nli, PromptFamily::Icl);
        assert_eq!(p.label, None);
        assert_eq!(p.raw, "I am not sure.");
    }

    #[test]
    fn label_line_wins_over_first_line() {
        let p = parse_completion(
            "This is not a contradiction.\nLabel: neutral",
            TaskKind::Nli,
            PromptFamily::Icl,
        );
        assert_eq!(p.label, Some(Label::Neutral));
    }

    #[test]
    fn paraphrase_synonyms() {
        for raw in ["Label: not duplicate", "Label: Non-duplicate", "label: NOT_DUPLICATE"] {
            let p = parse_completion(raw, TaskKind::Paraphrase, PromptFamily::Icl);
            assert_eq!(p.label, Some(Label::NotDuplicate), "{raw}");
        }
        let p = parse_completion("Label: duplicate", TaskKind::Paraphrase, PromptFamily::Icl);
        assert_eq!(p.label, Some(Label::Duplicate));
    }

    #[test]
    fn nli_labels_are_not_found_in_paraphrase_answers() {
        let p = parse_completion("Label: entailment", TaskKind::Paraphrase, PromptFamily::Icl);
        assert_eq!(p.label, None);
    }

    #[test]
    fn nle_may_precede_label() {
        let p = parse_completion(
            "NLE: Both ask the same thing.\nLabel: duplicate",
            TaskKind::Paraphrase,
            PromptFamily::Xicl,
        );
        assert_eq!(p.label, Some(Label::Duplicate));
        assert_eq!(p.nle.as_deref(), Some("Both ask the same thing."));
    }

    #[test]
    fn nlegen_takes_whole_completion() {
        let p = parse_completion("  NLE: A kid cannot be in two places.\n", TaskKind::Nli, PromptFamily::NlegenFew);
        assert_eq!(p.nle.as_deref(), Some("A kid cannot be in two places."));
        assert_eq!(p.label, None);
        let p = parse_completion("   ", TaskKind::Nli, PromptFamily::NlegenZero);
        assert_eq!(p.nle, None);
    }

    #[test]
    fn fewshot_nli_prompt_shape() {
        let query = inst("q", "A boy peers out of an open window.", "The boy looks out the window.", Label::Entailment);
        let spec = PromptSpec::new(PromptFamily::NlegenFew, fewshot_nli(), query, Some(Label::Entailment));
        let out = render(&spec).unwrap();
        assert!(out.starts_with("Assume that you're an expert working on natural language inference tasks"));
        assert_eq!(out.matches("\n=====\n").count(), 3);
        assert_eq!(out.matches("NLE: ").count(), 3);
        assert!(out.ends_with("Hypothesis: The boy looks out the window.\nLabel: entailment"));
        assert_eq!(out, render(&spec).unwrap());
    }

    #[test]
    fn fewshot_paraphrase_prompt_has_two_blocks() {
        let (ds, bank) = shipped::qqp_fewshot();
        let demos: Vec<Demonstration> = ds
            .instances
            .iter()
            .cloned()
            .zip(bank)
            .map(|(i, n)| Demonstration::new(i, Some(n)).unwrap())
            .collect();
        let query = ds.instances[0].clone();
        let spec = PromptSpec::new(PromptFamily::NlegenFew, demos, query, Some(Label::Duplicate));
        let out = render(&spec).unwrap();
        assert!(out.starts_with("Assume that you're an expert working on paraphrasing identification tasks"));
        assert_eq!(out.matches("NLE: ").count(), 2);
        assert!(out.contains("Label: not duplicate\nNLE: completely different questions"));
    }

    #[test]
    fn icl_omits_nles_and_ends_at_hypothesis() {
        let demos: Vec<Demonstration> = fewshot_nli().iter().map(Demonstration::without_nle).collect();
        let query = inst("q", "P.", "H.", Label::Neutral);
        let out = render(&PromptSpec::new(PromptFamily::Icl, demos, query, None)).unwrap();
        assert!(!out.contains("NLE:"));
        assert!(out.ends_with("Premise: P.\nHypothesis: H."));
        assert!(out.contains("Answer with 'Label:' followed by one of entailment, neutral, contradiction.\n\n"));
    }

    #[test]
    fn spec_invariants() {
        let q = inst("q", "P.", "H.", Label::Neutral);
        let icl_with_nle = PromptSpec::new(PromptFamily::Icl, fewshot_nli(), q.clone(), None);
        assert!(render(&icl_with_nle).is_err());
        let bare: Vec<Demonstration> = fewshot_nli().iter().map(Demonstration::without_nle).collect();
        assert!(render(&PromptSpec::new(PromptFamily::Xicl, bare, q.clone(), None)).is_err());
        assert!(render(&PromptSpec::new(PromptFamily::NlegenZero, fewshot_nli(), q.clone(), Some(Label::Neutral))).is_err());
        assert!(render(&PromptSpec::new(PromptFamily::NlegenFew, vec![], q.clone(), Some(Label::Neutral))).is_err());
        assert!(render(&PromptSpec::new(PromptFamily::NlegenZero, vec![], q.clone(), None)).is_err());
        assert!(render(&PromptSpec::new(PromptFamily::NlegenZero, vec![], q, Some(Label::Duplicate))).is_err());
    }

    #[test]
    fn demonstration_rejects_foreign_nle() {
        let i = inst("a", "P.", "H.", Label::Neutral);
        assert!(Demonstration::new(i, Some(NleRecord::human("b", "text"))).is_err());
    }

    #[test]
    fn short_variant_extends_zero_shot() {
        for task in [TaskKind::Nli, TaskKind::Paraphrase] {
            assert_eq!(
                meta_prompt(PromptFamily::NlegenZeroShort, task),
                format!("{} {SHORT_SUFFIX}", meta_prompt(PromptFamily::NlegenZero, task))
            );
        }
    }

    fn label_strategy() -> impl Strategy<Value = (TaskKind, Label)> {
        prop_oneof![
            Just((TaskKind::Nli, Label::Entailment)),
            Just((TaskKind::Nli, Label::Neutral)),
            Just((TaskKind::Nli, Label::Contradiction)),
            Just((TaskKind::Paraphrase, Label::Duplicate)),
            Just((TaskKind::Paraphrase, Label::NotDuplicate)),
        ]
    }

    proptest! {
        #[test]
        fn label_nle_fixed_point((task, label) in label_strategy(), text in "[A-Za-z0-9,.;:'!? -]{0,60}[A-Za-z0-9.]") {
            let text = crate::text::normalize_whitespace(&text);
            let raw = format!("Label: {}\nNLE: {}", label.prompt_form(), text);
            let p = parse_completion(&raw, task, PromptFamily::Xicl);
            prop_assert_eq!(p.label, Some(label));
            prop_assert_eq!(p.nle, Some(text));
        }

        #[test]
        fn distinct_orderings_render_distinctly(perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
            let demos = fewshot_nli();
            let reordered: Vec<Demonstration> = perm.iter().map(|&i| demos[i].clone()).collect();
            let q = inst("q", "P.", "H.", Label::Neutral);
            let a = render(&PromptSpec::new(PromptFamily::Xicl, demos, q.clone(), None)).unwrap();
            let b = render(&PromptSpec::new(PromptFamily::Xicl, reordered, q, None)).unwrap();
            prop_assert_eq!(a == b, perm == vec![0, 1, 2]);
        }
    }
}
