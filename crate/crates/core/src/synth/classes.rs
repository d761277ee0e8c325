use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::attributes::{conflicts, AttributeRegistry};
use super::signal::Findings;
use crate::{Error, Result};

/// Paraphrase templates per question type.
pub const PARAPHRASES: usize = 6;
/// Templates `0..SEEN_PARAPHRASES` are the "seen" expressions; the rest are
/// held out for unseen-expression evaluation.
pub const SEEN_PARAPHRASES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    SingleVerify,
    SingleChoose,
    SingleQuery,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] =
        [QuestionType::SingleVerify, QuestionType::SingleChoose, QuestionType::SingleQuery];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::SingleVerify => "single_verify",
            QuestionType::SingleChoose => "single_choose",
            QuestionType::SingleQuery => "single_query",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown question type {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    #[serde(rename = "P-A")]
    Scaffold,
    #[serde(rename = "P-B")]
    Bare,
    #[serde(rename = "P-C")]
    Clarified,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] =
        [PromptVariant::Scaffold, PromptVariant::Bare, PromptVariant::Clarified];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Scaffold => "P-A",
            PromptVariant::Bare => "P-B",
            PromptVariant::Clarified => "P-C",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskClass {
    pub id: usize,
    pub question_type: QuestionType,
    pub attributes: Vec<usize>,
    pub answer: String,
}

impl TaskClass {
    /// Stable textual identity built from (type, attribute keys, answer).
    pub fn key(&self, attrs: &AttributeRegistry) -> String {
        let names: Vec<&str> = self
            .attributes
            .iter()
            .map(|&a| attrs.get(a).map(|s| s.key.as_str()).unwrap_or("?"))
            .collect();
        format!("{}|{}|{}", self.question_type, names.join("+"), self.answer)
    }
}

const VERIFY: [&str; PARAPHRASES] = [
    "Does this ECG show {a}?",
    "Is {a} present in this ECG?",
    "Does this ECG reveal signs of {a}?",
    "Can {a} be seen in this ECG?",
    "Is there evidence of {a} in this ECG?",
    "Does the ECG indicate {a}?",
];

const CHOOSE: [&str; PARAPHRASES] = [
    "Which {n} does this ECG show, {a} or {b}?",
    "Which {n} is present in this ECG, {a} or {b}?",
    "Does this ECG show {a} or {b}?",
    "Which of {a} or {b} can be seen in this ECG?",
    "Among {a} and {b}, which {n} appears in this ECG?",
    "Which {n} does the ECG indicate, {a} or {b}?",
];

const QUERY: [&str; PARAPHRASES] = [
    "What is the {s} of this ECG?",
    "Which {s} does this ECG show?",
    "What {s} is shown in this ECG?",
    "Can you tell the {s} of this ECG?",
    "What {s} can be seen in this ECG?",
    "How would you describe the {s} in this ECG?",
];

pub const SCAFFOLD_QUESTION: &str = "question:";
pub const SCAFFOLD_ANSWER: &str = "answer:";
pub const CLARIFICATION: &str = "The answer can be both, none or in question.";

/// Attribute space plus the attribute-answer classes built over it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub attributes: AttributeRegistry,
    pub classes: Vec<TaskClass>,
}

impl ClassRegistry {
    /// Verify classes (yes/no per presence attribute), choose classes over
    /// compatible same-family pairs, query classes per attribute value.
    pub fn build(attributes: AttributeRegistry, types: &[QuestionType]) -> Self {
        let mut classes = Vec::new();
        let mut push = |qt, attrs: Vec<usize>, answer: String| {
            let id = classes.len();
            classes.push(TaskClass { id, question_type: qt, attributes: attrs, answer });
        };
        let presence: Vec<_> = attributes.iter().filter(|a| !a.is_valued()).collect();
        for qt in QuestionType::ALL {
            if !types.contains(&qt) {
                continue;
            }
            match qt {
                QuestionType::SingleVerify => {
                    for a in &presence {
                        push(qt, vec![a.id], "yes".into());
                        push(qt, vec![a.id], "no".into());
                    }
                }
                QuestionType::SingleChoose => {
                    for (i, a) in presence.iter().enumerate() {
                        for b in &presence[i + 1..] {
                            if a.family != b.family || conflicts(a.motif, b.motif) {
                                continue;
                            }
                            for ans in ["both", "none", a.name.as_str(), b.name.as_str()] {
                                push(qt, vec![a.id, b.id], ans.to_lowercase());
                            }
                        }
                    }
                }
                QuestionType::SingleQuery => {
                    for a in attributes.iter().filter(|a| a.is_valued()) {
                        for v in &a.values {
                            push(qt, vec![a.id], v.clone());
                        }
                    }
                }
            }
        }
        Self { attributes, classes }
    }

    pub fn class(&self, id: usize) -> Result<&TaskClass> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::Sampling(format!("unknown class {id}")))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The bare question of `cls` under paraphrase `paraphrase_id`.
    pub fn question(&self, cls: &TaskClass, paraphrase_id: usize) -> Result<String> {
        if paraphrase_id >= PARAPHRASES {
            return Err(Error::UnknownParaphrase(paraphrase_id));
        }
        let name = |i: usize| -> Result<String> {
            let id = *cls
                .attributes
                .get(i)
                .ok_or_else(|| Error::Generation(format!("class {} lacks attribute {i}", cls.id)))?;
            Ok(self.attributes.get(id)?.name.clone())
        };
        let first = self.attributes.get(cls.attributes[0])?;
        let text = match cls.question_type {
            QuestionType::SingleVerify => VERIFY[paraphrase_id].replace("{a}", &name(0)?),
            QuestionType::SingleChoose => CHOOSE[paraphrase_id]
                .replace("{n}", first.family.noun())
                .replace("{a}", &name(0)?)
                .replace("{b}", &name(1)?),
            QuestionType::SingleQuery => QUERY[paraphrase_id].replace("{s}", &first.name),
        };
        Ok(text)
    }

    /// Question text under a prompt variant.
    pub fn render_question(
        &self,
        cls: &TaskClass,
        paraphrase_id: usize,
        variant: PromptVariant,
    ) -> Result<String> {
        let q = self.question(cls, paraphrase_id)?;
        Ok(match variant {
            PromptVariant::Scaffold => format!("{SCAFFOLD_QUESTION} {q} {SCAFFOLD_ANSWER}"),
            PromptVariant::Bare => q,
            PromptVariant::Clarified => format!("{q} {CLARIFICATION}"),
        })
    }

    /// The answer a record with `findings` gives to the question of `cls`.
    pub fn derive_answer(&self, cls: &TaskClass, findings: &Findings) -> Result<String> {
        let has = |i: usize| findings.present.contains(&cls.attributes[i]);
        Ok(match cls.question_type {
            QuestionType::SingleVerify => if has(0) { "yes" } else { "no" }.to_string(),
            QuestionType::SingleChoose => match (has(0), has(1)) {
                (true, true) => "both".into(),
                (false, false) => "none".into(),
                (true, false) => self.attributes.get(cls.attributes[0])?.name.to_lowercase(),
                (false, true) => self.attributes.get(cls.attributes[1])?.name.to_lowercase(),
            },
            QuestionType::SingleQuery => {
                let attr = self.attributes.get(cls.attributes[0])?;
                let v = findings.values.get(&attr.id).copied().unwrap_or(attr.default_value);
                attr.values[v].clone()
            }
        })
    }

    /// Every distinct text a prompt may contain, for vocabulary building.
    pub fn all_texts(&self) -> Result<Vec<String>> {
        let mut out = vec![SCAFFOLD_QUESTION.to_string(), SCAFFOLD_ANSWER.to_string(), CLARIFICATION.to_string()];
        for cls in &self.classes {
            for p in 0..PARAPHRASES {
                out.push(self.question(cls, p)?);
            }
            out.push(cls.answer.clone());
        }
        Ok(out)
    }
}
