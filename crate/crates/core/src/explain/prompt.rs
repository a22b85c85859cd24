use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ig::AttributionReport;
use crate::cohort::Subtype;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Higher,
    Lower,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Higher => "higher",
            Direction::Lower => "lower",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub attribution: f64,
    pub z_score: Option<f64>,
    /// Sign of the z-score; `None` when the deviation is unavailable.
    pub direction: Option<Direction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub features: Vec<RankedFeature>,
    pub warning: Option<String>,
}

/// Top `top_k` features by absolute attribution, ties by name.
pub fn rank_salient_features(report: &AttributionReport, top_k: usize) -> Ranking {
    let mut all: Vec<&_> = report.features.iter().collect();
    all.sort_by(|a, b| {
        b.attribution
            .abs()
            .total_cmp(&a.attribution.abs())
            .then_with(|| a.name.cmp(&b.name))
    });
    let warning = (top_k > all.len()).then(|| {
        format!(
            "requested top {top_k} features but only {} exist; returning all of them",
            all.len()
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let features = all
        .into_iter()
        .take(top_k)
        .map(|f| RankedFeature {
            name: f.name.clone(),
            attribution: f.attribution,
            z_score: f.z_score,
            direction: f.z_score.map(|z| if z < 0.0 { Direction::Lower } else { Direction::Higher }),
        })
        .collect();
    Ranking { features, warning }
}

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/prompt.txt");

/// Prompt template with four named sections:
///
/// * `[risk]` uses `{subtype}` and `{probability}`;
/// * `[feature]` uses `{rank}`, `{feature}`, `{z}`, `{direction}`, `{attribution}`;
/// * `[missing_feature]` is used when a feature has no z-score;
/// * `[question]` closes the prompt after the numbered descriptions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub risk: String,
    pub feature: String,
    pub missing_feature: String,
    pub question: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with('#') && sections.is_empty() {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                sections.push((name.to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                if !t.is_empty() {
                    if !body.is_empty() {
                        body.push(' ');
                    }
                    body.push_str(t);
                }
            } else if !t.is_empty() {
                return Err(Error::Config(format!("prompt template text before the first section: {t:?}")));
            }
        }
        let mut take = |name: &str| -> Result<String> {
            let i = sections
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("prompt template lacks a [{name}] section")))?;
            Ok(sections.remove(i).1)
        };
        let out = Self {
            risk: take("risk")?,
            feature: take("feature")?,
            missing_feature: take("missing_feature")?,
            question: take("question")?,
        };
        if let Some((n, _)) = sections.first() {
            return Err(Error::Config(format!("unknown or repeated prompt template section [{n}]")));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn fill(template: &str, values: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Rendered prompt: one risk statement followed by one sentence per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub subject_id: String,
    pub segments: Vec<String>,
    pub question: String,
    pub features: Vec<RankedFeature>,
    pub warning: Option<String>,
}

impl PromptDocument {
    /// Numbered segments, a blank line, then the question.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.segments.iter().enumerate() {
            out.push_str(&format!("{}. {s}\n", i + 1));
        }
        if !self.question.is_empty() {
            out.push('\n');
            out.push_str(&self.question);
            out.push('\n');
        }
        out
    }

    /// Recovers the numbered segments from rendered text.
    pub fn parse_segments(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for line in text.lines() {
            let Some((num, rest)) = line.split_once(". ") else { break };
            if num.parse::<usize>().ok() != Some(out.len() + 1) {
                break;
            }
            out.push(rest.to_string());
        }
        out
    }
}

pub fn build_prompt(
    subject_id: &str,
    ranking: &Ranking,
    predicted: Subtype,
    probability: f64,
    template: &PromptTemplate,
) -> PromptDocument {
    let mut warning = ranking.warning.clone();
    if ranking.features.len() != 10 {
        let w = format!("prompt built from {} features instead of 10", ranking.features.len());
        log::warn!("{w}");
        warning.get_or_insert(w);
    }
    let head = [
        ("subtype", predicted.name().to_string()),
        ("probability", format!("{probability:.2}")),
    ];
    let mut segments = vec![fill(&template.risk, &head)];
    for (i, f) in ranking.features.iter().enumerate() {
        let mut values = vec![
            ("rank", (i + 1).to_string()),
            ("feature", f.name.clone()),
            ("attribution", format!("{:.2}", f.attribution)),
        ];
        let body = match (f.z_score, f.direction) {
            (Some(z), Some(d)) => {
                values.push(("z", format!("{:.2}", z.abs())));
                values.push(("direction", d.to_string()));
                &template.feature
            }
            _ => &template.missing_feature,
        };
        segments.push(fill(body, &values));
    }
    PromptDocument {
        subject_id: subject_id.to_string(),
        segments,
        question: fill(&template.question, &head),
        features: ranking.features.clone(),
        warning,
    }
}
