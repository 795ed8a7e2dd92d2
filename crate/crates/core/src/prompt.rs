//! Relation prompt rendering.
//!
//! A prompt describes the hop-`i` relation between a target node and the
//! pooled token of its hop-`i` neighbors of one type. It carries exactly two
//! `[PH]` markers, which a backend replaces with the bound embeddings.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{SchemaDef, TypeIdx};
use crate::pathstats::MetaPathProfile;

pub const PLACEHOLDER: &str = "[PH]";

pub const PRETRAIN_STEPS: &str = "Steps: 1. Analyze relations based on path proportions and connection types. 2. Calculate the similarity (0-1) with justification.";
const STEP_ONE: &str = "Steps: 1. Analyze relations based on path proportions and connection types.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PretrainLink,
    FinetuneClassify,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PretrainLink => "pretrain_link",
            TemplateId::FinetuneClassify => "finetune_classify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain_link" | "pretrain" => Some(TemplateId::PretrainLink),
            "finetune_classify" | "finetune" => Some(TemplateId::FinetuneClassify),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptInstance {
    pub template_id: TemplateId,
    pub rendered_text: String,
    /// (source node type, endpoint node type), in marker order.
    pub placeholder_roles: (TypeIdx, TypeIdx),
    /// Rendered pattern strings with their proportions rounded to 2 decimals.
    pub path_lines: Vec<(String, f64)>,
}

impl PromptInstance {
    pub fn placeholder_count(&self) -> usize {
        self.rendered_text.matches(PLACEHOLDER).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundPrompt {
    pub prompt: PromptInstance,
    pub placeholder_vectors: Vec<Vec<f64>>,
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

/// "a", "a and b", "a, b, and c"; `conj` is "and" or "or".
fn join_list(items: &[String], conj: &str) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} {conj} {b}"),
        [init @ .., last] => format!("{}, {conj} {last}", init.join(", ")),
    }
}

fn format_proportion(p: f64) -> String {
    format!("{p:.2}")
}

/// First schema-admissible type sequence of `hop` edges from `src` to
/// `dst`, searching node types in declaration order.
fn schema_pattern(schema: &SchemaDef, src: TypeIdx, dst: TypeIdx, hop: usize) -> Option<Vec<TypeIdx>> {
    fn go(schema: &SchemaDef, path: &mut Vec<TypeIdx>, dst: TypeIdx, left: usize) -> bool {
        let last = *path.last().unwrap();
        if left == 0 {
            return last == dst;
        }
        for t in 0..schema.node_types.len() {
            if schema.connects(last, t) {
                path.push(t);
                if go(schema, path, dst, left - 1) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    let mut path = vec![src];
    go(schema, &mut path, dst, hop).then_some(path)
}

fn render_pattern(schema: &SchemaDef, p: &[TypeIdx]) -> String {
    p.iter()
        .map(|&t| schema.type_name(t))
        .collect::<Vec<_>>()
        .join("-")
}

/// Render the relation prompt for `(src_type -> dst_type)` at `hop`.
///
/// Path lines come from the profile's patterns ending at `dst_type`. When
/// there are none, a single schema-admissible pattern is listed with
/// proportion 0.00.
pub fn build_relation_prompt(
    schema: &SchemaDef,
    src_type: TypeIdx,
    dst_type: TypeIdx,
    hop: usize,
    profile: &MetaPathProfile,
    template: TemplateId,
) -> Result<PromptInstance> {
    let n_types = schema.node_types.len();
    if dst_type >= n_types {
        return Err(Error::UnknownNodeType(format!("#{dst_type}")));
    }
    if src_type >= n_types {
        return Err(Error::UnknownNodeType(format!("#{src_type}")));
    }
    if profile.hop != hop {
        return Err(Error::Config(format!(
            "profile is for hop {} but the prompt is for hop {hop}",
            profile.hop
        )));
    }
    let src = schema.type_name(src_type);
    let dst = schema.type_name(dst_type);

    let mut path_lines: Vec<(String, f64)> = profile
        .ending_at(dst_type)
        .map(|(p, st)| {
            let rounded: f64 = format_proportion(st.proportion).parse().expect("formatted float");
            (render_pattern(schema, p), rounded)
        })
        .collect();
    if path_lines.is_empty() {
        let pattern = schema_pattern(schema, src_type, dst_type, hop)
            .map(|p| render_pattern(schema, &p))
            .unwrap_or_else(|| "none".to_string());
        path_lines.push((pattern, 0.0));
    }

    let type_names: Vec<String> = schema.node_types.clone();
    let relations: Vec<String> = schema
        .edge_types
        .iter()
        .map(|e| format!("[{} {} {}]", e.src, e.name, e.dst))
        .collect();

    let mut text = String::new();
    write!(
        text,
        "Given a heterogeneous graph about {}, there are {} types of nodes: {}.",
        schema.domain_blurb,
        count_word(n_types),
        join_list(&type_names, "and"),
    )
    .unwrap();
    if !relations.is_empty() {
        write!(
            text,
            " The relationships between different nodes include: {}.",
            relations.join(", ")
        )
        .unwrap();
    }
    let paths = path_lines
        .iter()
        .map(|(p, x)| format!("{p} (proportion of paths: {})", format_proportion(*x)))
        .collect::<Vec<_>>()
        .join(", ");
    let entities = format!(
        "Given {} {src} {PLACEHOLDER} and {} {dst} {PLACEHOLDER}",
        article(src),
        article(dst)
    );
    match template {
        TemplateId::PretrainLink => {
            write!(
                text,
                " {entities}, calculate the similarity based on these paths: {paths}. {PRETRAIN_STEPS}"
            )
            .unwrap();
        }
        TemplateId::FinetuneClassify => {
            let labels = schema.labels_for(src).ok_or_else(|| {
                Error::Schema(format!("node type `{src}` has no class label vocabulary"))
            })?;
            let noun = schema.label_noun.as_deref().unwrap_or("category");
            let task = format!(
                "the first {src}'s primary {noun} ({})",
                join_list(labels, "or")
            );
            write!(
                text,
                " {entities}, classify {task} based on these paths: {paths}. {STEP_ONE} 2. Classify {task} with justification."
            )
            .unwrap();
        }
    }

    Ok(PromptInstance {
        template_id: template,
        rendered_text: text,
        placeholder_roles: (src_type, dst_type),
        path_lines,
    })
}

/// Recover `(pattern, proportion)` pairs from rendered prompt text.
pub fn parse_path_lines(text: &str) -> Vec<(String, f64)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"([^\s,:()\[\]]+) \(proportion of paths: (\d+\.\d{2})\)").expect("valid regex")
    });
    re.captures_iter(text)
        .map(|c| (c[1].to_string(), c[2].parse().expect("matched digits")))
        .collect()
}

/// Pair a prompt with its two placeholder embeddings, both of length `dim`.
pub fn bind_placeholders(p: PromptInstance, vecs: Vec<Vec<f64>>, dim: usize) -> Result<BoundPrompt> {
    let markers = p.placeholder_count();
    if vecs.len() != markers {
        return Err(Error::Placeholder(format!(
            "prompt has {markers} markers but {} vectors were given",
            vecs.len()
        )));
    }
    if let Some((i, v)) = vecs.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(Error::Placeholder(format!(
            "vector {i} has dimension {} but the encoder expects {dim}",
            v.len()
        )));
    }
    Ok(BoundPrompt { prompt: p, placeholder_vectors: vecs })
}
