use thiserror::Error;

/// Crate-wide error type. Every failure names the module it came from so the
/// CLI can print a single structured line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("autograd: shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("autograd: non-finite value in {op}{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },
    #[error("autograd: contract violation: {0}")]
    Contract(String),
    #[error("autograd: backward called on a stale tape (no new forward pass recorded)")]
    StaleTape,

    #[error("timeseries_io: parse error in {file} at row {row}: {msg}")]
    Parse {
        file: String,
        row: usize,
        msg: String,
    },
    #[error("timeseries_io: unknown diagnosis token '{0}'")]
    Label(String),
    #[error("timeseries_io: manifest error: {0}")]
    Manifest(String),
    #[error("timeseries_io: cohort inconsistency: {0}")]
    Cohort(String),
    #[error("timeseries_io: cohort spec error: {0}")]
    CohortSpec(String),

    #[error("connectome: degenerate window {window}: ROI {roi} is constant (zero variance)")]
    DegenerateWindow { window: usize, roi: usize },
    #[error("connectome: {0}")]
    Connectome(String),

    #[error("graph_distance: {0}")]
    Distance(String),
    #[error("graph_distance: incompatible persistence summaries: sizes {0} vs {1}")]
    IncompatibleSummary(usize, usize),

    #[error("revrin: degenerate scale for feature {feature}: IQR is zero or near zero")]
    DegenerateScale { feature: usize },
    #[error("revrin: state mismatch: {0}")]
    RevrinState(String),

    #[error("patch_embed: series too short: T={t} < patch length L={l}")]
    TooShort { t: usize, l: usize },

    #[error("reprogram: config error: {0}")]
    ReprogramConfig(String),

    #[error("backbone: {0}")]
    Backbone(String),

    #[error("train_eval: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Coarse module tag for structured CLI output.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            ShapeMismatch { .. } | NonFinite { .. } | Contract(_) | StaleTape => "tensor_autograd",
            Parse { .. } | Label(_) | Manifest(_) | Cohort(_) | CohortSpec(_) => "timeseries_io",
            DegenerateWindow { .. } | Connectome(_) => "connectome",
            Distance(_) | IncompatibleSummary(..) => "graph_distance",
            DegenerateScale { .. } | RevrinState(_) => "revrin",
            TooShort { .. } => "patch_embed",
            ReprogramConfig(_) => "reprogram",
            Backbone(_) => "backbone",
            Train(_) => "train_eval",
            Io(_) | Json(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
