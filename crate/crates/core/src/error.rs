use thiserror::Error;

pub type Result<T, E = BldaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BldaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class {class} has no labeled samples")]
    MissingClass { class: usize },

    #[error("unestimated cells: {}", format_cells(.0))]
    UnestimatedCells(Vec<(usize, usize)>),

    #[error("anchor distributions have not been estimated")]
    MissingAnchors,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BldaError {
    /// Stable machine-readable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            BldaError::Domain(_) => "E_DOMAIN",
            BldaError::Contract(_) => "E_CONTRACT",
            BldaError::MissingClass { .. } => "E_MISSING_CLASS",
            BldaError::UnestimatedCells(_) => "E_UNESTIMATED",
            BldaError::MissingAnchors => "E_NO_ANCHORS",
            BldaError::Parse { .. } => "E_PARSE",
            BldaError::Config(_) => "E_CONFIG",
            BldaError::Io { .. } => "E_IO",
            BldaError::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BldaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

fn format_cells(cells: &[(usize, usize)]) -> String {
    cells
        .iter()
        .map(|(c, l)| format!("({c},{l})"))
        .collect::<Vec<_>>()
        .join(" ")
}
