use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Vision,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Text, Modality::Vision];

    pub fn byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Vision => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Vision),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Text => Modality::Vision,
            Modality::Vision => Modality::Text,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "t" => Ok(Modality::Text),
            "vision" | "v" => Ok(Modality::Vision),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}
