use thiserror::Error;

/// Errors produced anywhere in the conversion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: {detail}", layer_suffix(.layer))]
    Shape { layer: Option<String>, detail: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("layer `{layer}` references unknown layer `{missing}`")]
    DanglingReference { layer: String, missing: String },

    #[error("layer `{layer}`: weight slice {offset}+{length} lies outside the {blob_len}-byte blob")]
    WeightSlice {
        layer: String,
        offset: usize,
        length: usize,
        blob_len: usize,
    },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("layer `{layer}`: {detail}")]
    Unsupported { layer: String, detail: String },

    #[error("no activation statistics for layer `{0}`")]
    MissingStats(String),

    #[error("layer `{layer}`: channel {channel} has non-positive maximum {value}")]
    NonPositiveMax { layer: String, channel: usize, value: f32 },

    #[error("activation sampling needs at least one sample")]
    EmptySamples,

    #[error("invalid coding configuration: {0}")]
    Coding(String),

    #[error("input value {value} at index {index} lies outside [0, 1]")]
    InputRange { index: usize, value: f32 },

    #[error("layer `{layer}`: cannot {action} while {phase}")]
    Phase {
        layer: String,
        action: &'static str,
        phase: &'static str,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn layer_suffix(layer: &Option<String>) -> String {
    match layer {
        Some(id) => format!(" in layer `{id}`"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: None,
            detail: detail.into(),
        }
    }

    /// Attach a layer id to a shape error that was raised by a bare kernel.
    pub fn in_layer(self, id: &str) -> Self {
        match self {
            Error::Shape { layer: None, detail } => Error::Shape {
                layer: Some(id.to_string()),
                detail,
            },
            other => other,
        }
    }

    /// True for errors caused by bad inputs rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
