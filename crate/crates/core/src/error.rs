use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("noise model `{model}` is incompatible with a mark space of {marks} mark(s)")]
    MarkModelMismatch { model: String, marks: usize },

    #[error("cells {first} and {second} overlap; orthogonality needs disjoint cells")]
    OverlappingCells { first: usize, second: usize },

    #[error("misaligned input: {0}")]
    Misaligned(String),

    #[error("grid with {steps} steps cannot host a dyadic system of level {level}")]
    GridNotDyadic { steps: usize, level: usize },

    #[error("degenerate design matrix for {context} (even after ridge)")]
    DegenerateDesign { context: String },

    #[error("every cell was dropped (mean conditional variance below threshold)")]
    AllCellsDropped,

    #[error("non-finite state value at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("perturbation leaves the control set at path {path}, step {step}")]
    PerturbationExitsControlSet { path: usize, step: usize },

    #[error("control value outside the shrunken control set at path {path}, step {step}")]
    ControlOutsideMargin { path: usize, step: usize },

    #[error("admissibility proxy failure: {0}")]
    Admissibility(String),

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("utility domain violation at path {path}: terminal wealth {wealth}")]
    DomainViolation { path: usize, wealth: f64 },

    #[error("derivative callback mismatch: {0}")]
    CallbackMismatch(String),

    #[error("adjoint bundle does not cover step {0}")]
    MissingAnchor(usize),

    #[error("unknown {registry} entry `{name}`")]
    UnknownEntry { registry: &'static str, name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Config problems map to exit status 2, everything else to 1.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::UnknownEntry { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
