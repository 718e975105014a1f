//! Prompt templates. Each template is a pair of committed text files
//! (`templates/<id>.system.txt`, `templates/<id>.user.txt`) compiled into the
//! binary. Placeholders are written `${name}`; everything else, including
//! literal braces, is copied byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    DistillSeed,
    DistillSeedNoBody,
    ExpandBreadth,
    ExpandDepth,
    StructureOutput,
    Taxonomy,
    Explain,
    Compare,
    Combine,
    Critique,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::DistillSeed,
        TemplateId::DistillSeedNoBody,
        TemplateId::ExpandBreadth,
        TemplateId::ExpandDepth,
        TemplateId::StructureOutput,
        TemplateId::Taxonomy,
        TemplateId::Explain,
        TemplateId::Compare,
        TemplateId::Combine,
        TemplateId::Critique,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::DistillSeed => "distill-seed",
            TemplateId::DistillSeedNoBody => "distill-seed-no-body",
            TemplateId::ExpandBreadth => "expand-breadth",
            TemplateId::ExpandDepth => "expand-depth",
            TemplateId::StructureOutput => "structure-output",
            TemplateId::Taxonomy => "taxonomy",
            TemplateId::Explain => "explain",
            TemplateId::Compare => "compare",
            TemplateId::Combine => "combine",
            TemplateId::Critique => "critique",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let (system, user) = match self {
            TemplateId::DistillSeed => (
                include_str!("../../templates/distill-seed.system.txt"),
                include_str!("../../templates/distill-seed.user.txt"),
            ),
            TemplateId::DistillSeedNoBody => (
                include_str!("../../templates/distill-seed-no-body.system.txt"),
                include_str!("../../templates/distill-seed-no-body.user.txt"),
            ),
            TemplateId::ExpandBreadth => (
                include_str!("../../templates/expand-breadth.system.txt"),
                include_str!("../../templates/expand-breadth.user.txt"),
            ),
            TemplateId::ExpandDepth => (
                include_str!("../../templates/expand-depth.system.txt"),
                include_str!("../../templates/expand-depth.user.txt"),
            ),
            TemplateId::StructureOutput => (
                include_str!("../../templates/structure-output.system.txt"),
                include_str!("../../templates/structure-output.user.txt"),
            ),
            TemplateId::Taxonomy => (
                include_str!("../../templates/taxonomy.system.txt"),
                include_str!("../../templates/taxonomy.user.txt"),
            ),
            TemplateId::Explain => (
                include_str!("../../templates/explain.system.txt"),
                include_str!("../../templates/explain.user.txt"),
            ),
            TemplateId::Compare => (
                include_str!("../../templates/compare.system.txt"),
                include_str!("../../templates/compare.user.txt"),
            ),
            TemplateId::Combine => (
                include_str!("../../templates/combine.system.txt"),
                include_str!("../../templates/combine.user.txt"),
            ),
            TemplateId::Critique => (
                include_str!("../../templates/critique.system.txt"),
                include_str!("../../templates/critique.user.txt"),
            ),
        };
        PromptTemplate {
            id: self,
            system_text: strip_final_newline(system),
            user_text: strip_final_newline(user),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GatewayError::UnknownTemplate(s.to_string()))
    }
}

fn strip_final_newline(s: &'static str) -> &'static str {
    s.strip_suffix('\n').unwrap_or(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub system_text: &'static str,
    pub user_text: &'static str,
}

impl PromptTemplate {
    /// Placeholder names used anywhere in the template.
    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for text in [self.system_text, self.user_text] {
            for seg in segments(text) {
                if let Segment::Placeholder(name) = seg {
                    names.insert(name.to_string());
                }
            }
        }
        names
    }

    pub fn render(&self, bindings: &Bindings) -> Result<RenderedPrompt, GatewayError> {
        Ok(RenderedPrompt {
            system: substitute(self.system_text, bindings)?,
            user: substitute(self.user_text, bindings)?,
        })
    }
}

/// Renders `template` with `bindings`. Unused bindings are ignored.
pub fn render_prompt(template: TemplateId, bindings: &Bindings) -> Result<RenderedPrompt, GatewayError> {
    template.template().render(bindings)
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) if is_ident(&after[..end]) => {
                if start > 0 {
                    out.push(Segment::Literal(&rest[..start]));
                }
                out.push(Segment::Placeholder(&after[..end]));
                rest = &after[end + 1..];
            }
            _ => {
                out.push(Segment::Literal(&rest[..start + 2]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Literal(rest));
    }
    out
}

fn substitute(text: &str, bindings: &Bindings) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(text.len());
    for seg in segments(text) {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Placeholder(name) => match bindings.get(name) {
                Some(value) => out.push_str(value),
                None => return Err(GatewayError::UnboundPlaceholder(name.to_string())),
            },
        }
    }
    Ok(out)
}
