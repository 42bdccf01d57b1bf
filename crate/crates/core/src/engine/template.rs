//! In-context instruction layouts. Each variant decides which classes its
//! two exemplars come from and how they are questioned and answered; the
//! query always asks about the class under test.

use std::sync::Arc;

use crate::config::MAX_CONTEXT_LENGTH;
use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::retrieval::{Exemplar, ExemplarPair};
use crate::types::{ClassId, PredictionRecord};

/// Classes involved in one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roles {
    /// Class the query is asked about.
    pub under_test: ClassId,
    /// Most likely alternative, shown as the counter-example.
    pub contrast: ClassId,
    /// Next alternative, used by layouts that show two counter-examples.
    pub second_contrast: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarSlot {
    pub item_id: String,
    pub class: ClassId,
    pub class_name: String,
    pub answer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySlot {
    pub item_id: String,
    pub class: ClassId,
    pub class_name: String,
}

/// A fully rendered instruction ready for a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub exemplars: Vec<ExemplarSlot>,
    pub query: QuerySlot,
    pub template_variant: String,
    /// 1-based repeat index within an ensembled decision.
    pub repeat: usize,
    pub rendered_text: String,
}

impl Instruction {
    pub fn answers(&self) -> Vec<bool> {
        self.exemplars.iter().map(|e| e.answer).collect()
    }
}

pub trait InstructionTemplate: Named + Send + Sync {
    /// Clean classes the two exemplars of a pair are retrieved from.
    fn exemplar_classes(&self, roles: &Roles) -> (ClassId, ClassId);

    /// Display order, questioned class and answer for one retrieved pair.
    fn layout<'p>(&self, pair: &'p ExemplarPair, roles: &Roles) -> [(&'p Exemplar, ClassId, bool); 2];
}

pub struct PosNeg;
pub struct TwoPositive;
pub struct TwoNegative;
pub struct TwoIncorrect;

impl Named for PosNeg {
    fn name(&self) -> &'static str {
        "pos_neg"
    }
}

impl InstructionTemplate for PosNeg {
    fn exemplar_classes(&self, roles: &Roles) -> (ClassId, ClassId) {
        (roles.under_test, roles.contrast)
    }

    fn layout<'p>(&self, pair: &'p ExemplarPair, roles: &Roles) -> [(&'p Exemplar, ClassId, bool); 2] {
        [
            (&pair.positive, roles.under_test, true),
            (&pair.negative, roles.under_test, false),
        ]
    }
}

impl Named for TwoPositive {
    fn name(&self) -> &'static str {
        "two_positive"
    }
}

impl InstructionTemplate for TwoPositive {
    fn exemplar_classes(&self, roles: &Roles) -> (ClassId, ClassId) {
        (roles.under_test, roles.contrast)
    }

    fn layout<'p>(&self, pair: &'p ExemplarPair, _roles: &Roles) -> [(&'p Exemplar, ClassId, bool); 2] {
        [
            (&pair.positive, pair.positive.clean_label, true),
            (&pair.negative, pair.negative.clean_label, true),
        ]
    }
}

impl Named for TwoNegative {
    fn name(&self) -> &'static str {
        "two_negative"
    }
}

impl InstructionTemplate for TwoNegative {
    /// Both exemplars are counter-examples; with no second alternative the
    /// engine draws two distinct images of the contrast class.
    fn exemplar_classes(&self, roles: &Roles) -> (ClassId, ClassId) {
        (roles.contrast, roles.second_contrast.unwrap_or(roles.contrast))
    }

    fn layout<'p>(&self, pair: &'p ExemplarPair, roles: &Roles) -> [(&'p Exemplar, ClassId, bool); 2] {
        [
            (&pair.positive, roles.under_test, false),
            (&pair.negative, roles.under_test, false),
        ]
    }
}

impl Named for TwoIncorrect {
    fn name(&self) -> &'static str {
        "two_incorrect"
    }
}

impl InstructionTemplate for TwoIncorrect {
    fn exemplar_classes(&self, roles: &Roles) -> (ClassId, ClassId) {
        (roles.under_test, roles.contrast)
    }

    /// The counter-example is answered True and shown first.
    fn layout<'p>(&self, pair: &'p ExemplarPair, roles: &Roles) -> [(&'p Exemplar, ClassId, bool); 2] {
        [
            (&pair.negative, roles.under_test, true),
            (&pair.positive, roles.under_test, false),
        ]
    }
}

pub fn registry() -> Registry<dyn InstructionTemplate> {
    let mut reg: Registry<dyn InstructionTemplate> = Registry::new("template variant");
    reg.register(Arc::new(PosNeg))
        .register(Arc::new(TwoPositive))
        .register(Arc::new(TwoNegative))
        .register(Arc::new(TwoIncorrect));
    reg
}

fn answer_word(answer: bool) -> &'static str {
    if answer {
        "True"
    } else {
        "False"
    }
}

pub fn render_exemplar(class_name: &str, answer: bool) -> String {
    format!(
        "Question: This image <IMG> shows a photo of {class_name}, True or False? Answer: {};",
        answer_word(answer)
    )
}

pub fn render_query(class_name: &str) -> String {
    format!("Question: This image <IMG> shows a photo of {class_name}, True or False? Answer:")
}

fn class_name(names: &[String], class: ClassId) -> Result<String> {
    names.get(class.index()).cloned().ok_or(Error::Index {
        index: class.index(),
        num_classes: names.len(),
    })
}

/// Lays out `pairs` (one per in-context step) followed by the query.
pub fn build_instruction(
    pairs: &[ExemplarPair],
    query: &PredictionRecord,
    roles: &Roles,
    class_names: &[String],
    template: &dyn InstructionTemplate,
    context_length: usize,
    repeat: usize,
) -> Result<Instruction> {
    if context_length > MAX_CONTEXT_LENGTH {
        return Err(Error::Length {
            got: context_length,
            max: MAX_CONTEXT_LENGTH,
        });
    }
    if context_length == 0 || pairs.len() != context_length {
        return Err(Error::InvalidInput(format!(
            "expected {context_length} exemplar pairs, got {}",
            pairs.len()
        )));
    }
    let mut exemplars = Vec::with_capacity(2 * pairs.len());
    let mut lines = Vec::with_capacity(2 * pairs.len() + 1);
    for pair in pairs {
        for (exemplar, asked, answer) in template.layout(pair, roles) {
            let name = class_name(class_names, asked)?;
            lines.push(render_exemplar(&name, answer));
            exemplars.push(ExemplarSlot {
                item_id: exemplar.item_id.clone(),
                class: asked,
                class_name: name,
                answer,
            });
        }
    }
    let query_name = class_name(class_names, roles.under_test)?;
    lines.push(render_query(&query_name));
    Ok(Instruction {
        exemplars,
        query: QuerySlot {
            item_id: query.item_id().to_owned(),
            class: roles.under_test,
            class_name: query_name,
        },
        template_variant: template.name().to_owned(),
        repeat,
        rendered_text: lines.join("\n"),
    })
}
