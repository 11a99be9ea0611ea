use serde::{Deserialize, Serialize};

use super::{Demonstration, DomainError, LabelSpace};

const INPUT: &str = "{input}";
const LABEL: &str = "{label}";

/// Layout of demonstrations and the query inside a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub demo_format: String,
    pub query_format: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
}

fn default_delimiter() -> String {
    ">".to_string()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            demo_format: "{input} > {label}\n".to_string(),
            query_format: "{input} >".to_string(),
            delimiter: default_delimiter(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |msg: String| Err(DomainError::Template(msg));
        if self.delimiter.is_empty() {
            return err("delimiter is empty".into());
        }
        for placeholder in [INPUT, LABEL] {
            let n = self.demo_format.matches(placeholder).count();
            if n != 1 {
                return err(format!("demo_format must contain {placeholder} exactly once (found {n})"));
            }
        }
        let label_at = self.demo_format.find(LABEL).unwrap_or_default();
        let input_at = self.demo_format.find(INPUT).unwrap_or_default();
        if input_at > label_at {
            return err("demo_format must place {input} before {label}".into());
        }
        let before_label = self.demo_format[..label_at].trim_end();
        if !before_label.ends_with(&self.delimiter) || before_label.ends_with(INPUT) {
            return err(format!("demo_format must put the delimiter {:?} right before {{label}}", self.delimiter));
        }
        let n = self.query_format.matches(INPUT).count();
        if n != 1 {
            return err(format!("query_format must contain {INPUT} exactly once (found {n})"));
        }
        if self.query_format.contains(LABEL) {
            return err("query_format must not contain {label}".into());
        }
        if !self.query_format.ends_with(&self.delimiter) {
            return err(format!("query_format must end with the delimiter {:?}", self.delimiter));
        }
        Ok(())
    }
}

/// A rendered prompt and the offsets right after each delimiter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledPrompt {
    pub text: String,
    /// K+1 byte offsets; offset j is where the j-th label (or, last, the query
    /// prediction) begins.
    pub cut_points: Vec<usize>,
}

impl AssembledPrompt {
    pub fn prefix(&self, j: usize) -> &str {
        &self.text[..self.cut_points[j]]
    }
}

/// Renders demonstrations followed by the query.
pub fn assemble_prompt(
    template: &PromptTemplate,
    demos: &[Demonstration],
    query_text: &str,
    labels: &LabelSpace,
) -> Result<AssembledPrompt, DomainError> {
    template.validate()?;
    let label_at = template.demo_format.find(LABEL).unwrap_or_default();
    let (head, tail) = template.demo_format.split_at(label_at);
    let tail = &tail[LABEL.len()..];

    let mut text = String::new();
    let mut cut_points = Vec::with_capacity(demos.len() + 1);
    for demo in demos {
        let label = demo
            .label
            .ok_or_else(|| DomainError::Template(format!("demonstration {:?} has no label", demo.text)))?;
        labels.check_label(label)?;
        text.push_str(&head.replacen(INPUT, &demo.text, 1));
        let trimmed = text.trim_end().len();
        cut_points.push(trimmed);
        // whitespace between the delimiter and the label stays with the label
        text.push_str(labels.labels()[label].as_str());
        text.push_str(tail);
    }
    text.push_str(&template.query_format.replacen(INPUT, query_text, 1));
    cut_points.push(text.len());
    Ok(AssembledPrompt { text, cut_points })
}
