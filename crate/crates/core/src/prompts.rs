//! Prompt templates. Built-in defaults live in `prompts/*.txt`; a directory
//! with files of the same names overrides them one by one.

use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSet {
    pub system: String,
    pub element_tags: String,
    pub describe_object: String,
    pub describe_element: String,
    pub summarize: String,
    pub reason_local: String,
    pub reason_remote_targets: String,
    pub reason_feasibility: String,
    pub reason_remote_score: String,
    pub reason_remote_scene: String,
    pub reason_direct: String,
    pub qa: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            system: include_str!("../prompts/system.txt").into(),
            element_tags: include_str!("../prompts/element_tags.txt").into(),
            describe_object: include_str!("../prompts/describe_object.txt").into(),
            describe_element: include_str!("../prompts/describe_element.txt").into(),
            summarize: include_str!("../prompts/summarize.txt").into(),
            reason_local: include_str!("../prompts/reason_local.txt").into(),
            reason_remote_targets: include_str!("../prompts/reason_remote_targets.txt").into(),
            reason_feasibility: include_str!("../prompts/reason_feasibility.txt").into(),
            reason_remote_score: include_str!("../prompts/reason_remote_score.txt").into(),
            reason_remote_scene: include_str!("../prompts/reason_remote_scene.txt").into(),
            reason_direct: include_str!("../prompts/reason_direct.txt").into(),
            qa: include_str!("../prompts/qa.txt").into(),
        }
    }
}

impl PromptSet {
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = PromptSet::default();
        let slots: [(&str, &mut String); 12] = [
            ("system", &mut set.system),
            ("element_tags", &mut set.element_tags),
            ("describe_object", &mut set.describe_object),
            ("describe_element", &mut set.describe_element),
            ("summarize", &mut set.summarize),
            ("reason_local", &mut set.reason_local),
            ("reason_remote_targets", &mut set.reason_remote_targets),
            ("reason_feasibility", &mut set.reason_feasibility),
            ("reason_remote_score", &mut set.reason_remote_score),
            ("reason_remote_scene", &mut set.reason_remote_scene),
            ("reason_direct", &mut set.reason_direct),
            ("qa", &mut set.qa),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(set)
    }

    pub fn digest(&self) -> String {
        crate::canonical::digest_of(self)
    }
}

/// Replaces each `{name}` with its value. Braces not naming a provided
/// variable (e.g. JSON examples in the template) are left untouched.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_owned();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
