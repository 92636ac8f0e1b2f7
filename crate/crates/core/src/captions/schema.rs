use serde::{Deserialize, Serialize};

use crate::data::ObjectType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Appearance,
    Environment,
}

/// One schema entry plus the sentence used to render it in template captions.
/// `sentence` contains exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub sentence: String,
}

impl AttributeSpec {
    fn new(name: &str, kind: AttributeKind, sentence: &str) -> Self {
        debug_assert_eq!(sentence.matches("{}").count(), 1);
        Self {
            name: name.to_string(),
            kind,
            sentence: sentence.to_string(),
        }
    }

    pub fn render(&self, value: &str) -> String {
        self.sentence.replacen("{}", value, 1)
    }

    /// Inverse of [`AttributeSpec::render`].
    pub fn match_sentence<'a>(&self, sentence: &'a str) -> Option<&'a str> {
        let (prefix, suffix) = self.sentence.split_once("{}")?;
        let value = sentence.strip_prefix(prefix)?.strip_suffix(suffix)?;
        (!value.is_empty()).then_some(value)
    }
}

/// Ordered attribute list for one object type. Appearance entries come first,
/// environment entries last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub object_type: ObjectType,
    pub attributes: Vec<AttributeSpec>,
}

pub const ENVIRONMENT_FIELDS: [&str; 4] = ["view", "illumination", "capture time", "target clarity"];

impl AttributeSchema {
    pub fn for_object(object_type: ObjectType) -> Self {
        match object_type {
            ObjectType::Person => Self::person(),
            ObjectType::Vehicle => Self::vehicle(),
        }
    }

    pub fn person() -> Self {
        use AttributeKind::Appearance as A;
        let mut attributes = vec![
            AttributeSpec::new("gender", A, "The person is a {}."),
            AttributeSpec::new("age", A, "The person appears to be {}."),
            AttributeSpec::new("upper clothing", A, "On the upper body the person wears {}."),
            AttributeSpec::new("lower clothing", A, "On the lower body the person wears {}."),
            AttributeSpec::new("hairstyle", A, "The person has {}."),
            AttributeSpec::new("footwear", A, "On the feet the person wears {}."),
            AttributeSpec::new("backpack", A, "Backpack: {}."),
            AttributeSpec::new("handbag", A, "Handbag: {}."),
            AttributeSpec::new("holding", A, "In hand: {}."),
        ];
        attributes.extend(environment());
        Self {
            object_type: ObjectType::Person,
            attributes,
        }
    }

    pub fn vehicle() -> Self {
        use AttributeKind::Appearance as A;
        let mut attributes = vec![
            AttributeSpec::new("vehicle type", A, "The vehicle is a {}."),
            AttributeSpec::new("color", A, "The body color is {}."),
            AttributeSpec::new("brand", A, "The brand appears to be {}."),
            AttributeSpec::new("roof", A, "On the roof there is {}."),
            AttributeSpec::new("lights", A, "The lights are {}."),
            AttributeSpec::new("wheels", A, "The wheels are {}."),
        ];
        attributes.extend(environment());
        Self {
            object_type: ObjectType::Vehicle,
            attributes,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn spec(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn is_environment(&self, name: &str) -> bool {
        self.spec(name)
            .map(|a| a.kind == AttributeKind::Environment)
            .unwrap_or(false)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(format!("duplicate attribute '{}'", a.name));
            }
        }
        for env in ENVIRONMENT_FIELDS {
            if !seen.contains(env) {
                return Err(format!("missing environment attribute '{env}'"));
            }
        }
        Ok(())
    }
}

fn environment() -> Vec<AttributeSpec> {
    use AttributeKind::Environment as E;
    vec![
        AttributeSpec::new("view", E, "The view is {}."),
        AttributeSpec::new("illumination", E, "The illumination is {}."),
        AttributeSpec::new("capture time", E, "The capture time is {}."),
        AttributeSpec::new("target clarity", E, "The target clarity is {}."),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schemas_validate() {
        AttributeSchema::person().validate().unwrap();
        AttributeSchema::vehicle().validate().unwrap();
    }

    #[test]
    fn sentence_round_trip() {
        let s = AttributeSchema::person();
        let spec = s.spec("upper clothing").unwrap();
        let sentence = spec.render("red jacket");
        assert_eq!(spec.match_sentence(&sentence), Some("red jacket"));
        assert_eq!(spec.match_sentence("The view is front."), None);
    }
}
