//! Span vocabulary shared by the detection modules and the condenser.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Templated,
    Copied,
    Both,
}

impl Label {
    pub fn is_templated(self) -> bool {
        matches!(self, Label::Templated | Label::Both)
    }

    pub fn is_copied(self) -> bool {
        matches!(self, Label::Copied | Label::Both)
    }

    pub fn from_flags(templated: bool, copied: bool) -> Option<Label> {
        match (templated, copied) {
            (true, true) => Some(Label::Both),
            (true, false) => Some(Label::Templated),
            (false, true) => Some(Label::Copied),
            (false, false) => None,
        }
    }

    pub fn union(self, other: Label) -> Label {
        Label::from_flags(
            self.is_templated() || other.is_templated(),
            self.is_copied() || other.is_copied(),
        )
        .expect("labels always carry a flag")
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Templated => "templated",
            Label::Copied => "copied",
            Label::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Reference,
    Frequency,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Reference => "reference",
            Module::Frequency => "frequency",
        })
    }
}

impl std::str::FromStr for Module {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "reference" => Ok(Module::Reference),
            "frequency" => Ok(Module::Frequency),
            other => Err(format!("unknown module {other:?} (reference|frequency)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Deleted outright (templated text).
    Remove,
    /// Copied text retained as the first instance of its group.
    KeepFirstInstanceKept,
    /// Copied text deleted because an earlier instance exists.
    KeepFirstInstanceRemoved,
}

impl Action {
    pub fn removes(self) -> bool {
        !matches!(self, Action::KeepFirstInstanceKept)
    }
}

/// Content identity used to de-duplicate copied text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CopyGroup {
    /// Text aligned against a source note; the range is in source coordinates.
    Source { note_id: String, start: usize, end: usize },
    /// A normalized chunk repeated within one patient's notes.
    Chunk { patient_id: String, key: String },
}

/// A detection from either module, in original-note coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlaggedSpan {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub module: Module,
    pub source_id: Option<String>,
    /// Present whenever the label carries the copied flag.
    pub group: Option<CopyGroup>,
}

impl FlaggedSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}
