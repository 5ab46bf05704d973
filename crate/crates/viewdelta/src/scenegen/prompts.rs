//! Prompt construction from template banks.
//!
//! Class prompts either join the class names raw (probability `p_raw`) or
//! fill a uniformly chosen template containing the `{classes}` placeholder.
//! "All" prompts always draw from a dedicated template bank of phrasings
//! that ask about any change.

use rand::Rng;

use crate::scenegen::GenError;

pub const CLASS_PLACEHOLDER: &str = "{classes}";

const BUILTIN_CLASS_TEMPLATES: &str = include_str!("../../data/class_templates.txt");
const BUILTIN_ALL_TEMPLATES: &str = include_str!("../../data/all_templates.txt");

/// A pair of template lists: one for class prompts (each line must contain
/// `{classes}`), one for "all" prompts (free-form lines).
#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub class_templates: Vec<String>,
    pub all_templates: Vec<String>,
}

fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

impl TemplateBank {
    /// The banks compiled into the crate.
    pub fn builtin() -> Self {
        let bank = TemplateBank {
            class_templates: parse_lines(BUILTIN_CLASS_TEMPLATES),
            all_templates: parse_lines(BUILTIN_ALL_TEMPLATES),
        };
        debug_assert!(bank.validate().is_ok());
        bank
    }

    /// Load banks from two plain-text files, one template per line. Blank
    /// lines and lines starting with `#` are ignored.
    pub fn load(
        class_path: &std::path::Path,
        all_path: &std::path::Path,
    ) -> Result<Self, GenError> {
        let bank = TemplateBank {
            class_templates: parse_lines(&std::fs::read_to_string(class_path)?),
            all_templates: parse_lines(&std::fs::read_to_string(all_path)?),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.class_templates.is_empty() || self.all_templates.is_empty() {
            return Err(GenError::EmptyBank);
        }
        for t in &self.class_templates {
            if !t.contains(CLASS_PLACEHOLDER) {
                return Err(GenError::Other(format!(
                    "class template missing `{CLASS_PLACEHOLDER}`: {t:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Join class names for interpolation: "a", "a and b", "a, b and c".
pub fn join_classes(classes: &[String]) -> String {
    match classes {
        [] => String::new(),
        [one] => one.clone(),
        [head @ .., last] => format!("{} and {last}", head.join(", ")),
    }
}

/// Build a prompt for a class-conditioned pair. With probability `p_raw` the
/// prompt is the raw comma-joined class list; otherwise a uniformly chosen
/// template is filled in.
pub fn make_class_prompt<R: Rng>(
    classes: &[String],
    bank: &TemplateBank,
    rng: &mut R,
    p_raw: f64,
) -> Result<String, GenError> {
    if classes.is_empty() {
        return Err(GenError::Other("prompt needs at least one class".into()));
    }
    if bank.class_templates.is_empty() {
        return Err(GenError::EmptyBank);
    }
    if rng.gen::<f64>() < p_raw {
        return Ok(classes.join(", "));
    }
    let idx = rng.gen_range(0..bank.class_templates.len());
    Ok(bank.class_templates[idx].replace(CLASS_PLACEHOLDER, &join_classes(classes)))
}

/// Build a prompt for an "all" pair: always a uniformly chosen template.
pub fn make_all_prompt<R: Rng>(bank: &TemplateBank, rng: &mut R) -> Result<String, GenError> {
    if bank.all_templates.is_empty() {
        return Err(GenError::EmptyBank);
    }
    let idx = rng.gen_range(0..bank.all_templates.len());
    Ok(bank.all_templates[idx].clone())
}
