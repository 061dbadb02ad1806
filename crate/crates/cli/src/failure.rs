//! Exit-code categories and error classification.

use std::fmt;

use compmech_core::corpus::CorpusError;
use compmech_core::intervention::InterventionError;
use compmech_core::model::ModelError;
use compmech_core::tokenizer::TokenizerError;
use compmech_core::tracer::TraceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Other,
    Usage,
    Input,
    Schema,
    Numeric,
    Resource,
}

impl Category {
    pub fn code(self) -> u8 {
        match self {
            Category::Other => 1,
            Category::Usage => 2,
            Category::Input => 3,
            Category::Schema => 4,
            Category::Numeric => 5,
            Category::Resource => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Other => "internal",
            Category::Usage => "usage",
            Category::Input => "input",
            Category::Schema => "schema",
            Category::Numeric => "numeric",
            Category::Resource => "resource",
        }
    }
}

/// An error raised by the CLI itself with an explicit category.
#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl Failure {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn model(e: &ModelError) -> Category {
    match e {
        ModelError::Io { .. } | ModelError::TokenOutOfRange { .. } | ModelError::SequenceLength { .. } => {
            Category::Input
        }
        ModelError::Container(_)
        | ModelError::MissingTensor(_)
        | ModelError::Shape { .. }
        | ModelError::Dtype { .. }
        | ModelError::Config(_) => Category::Schema,
        ModelError::InvalidEdit(_) => Category::Usage,
        ModelError::NotCaptured(_) | ModelError::Tensor(_) => Category::Other,
    }
}

fn corpus(e: &CorpusError) -> Category {
    match e {
        CorpusError::Io { .. } | CorpusError::TooFewScored { .. } => Category::Input,
        CorpusError::Json(_)
        | CorpusError::Schema { .. }
        | CorpusError::Template(_)
        | CorpusError::Alignment(_)
        | CorpusError::Embeddings(_) => Category::Schema,
        CorpusError::Model(m) => model(m),
    }
}

fn intervention(e: &InterventionError) -> Category {
    match e {
        InterventionError::Model(m) => model(m),
        InterventionError::MissingAttribute(_) => Category::Schema,
        InterventionError::Invalid(_) => Category::Usage,
    }
}

fn trace(e: &TraceError) -> Category {
    match e {
        TraceError::Model(m) => model(m),
        TraceError::MissingGroup { .. } => Category::Schema,
        TraceError::UnknownHead(_) => Category::Usage,
        TraceError::EmptyDataset => Category::Input,
        TraceError::Intervention(i) => intervention(i),
    }
}

/// First recognised error in the chain decides the category.
pub fn classify(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.category;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model(e);
        }
        if let Some(e) = cause.downcast_ref::<CorpusError>() {
            return corpus(e);
        }
        if let Some(e) = cause.downcast_ref::<TraceError>() {
            return trace(e);
        }
        if let Some(e) = cause.downcast_ref::<InterventionError>() {
            return intervention(e);
        }
        if let Some(e) = cause.downcast_ref::<TokenizerError>() {
            return match e {
                TokenizerError::Io { .. } => Category::Input,
                _ => Category::Schema,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return Category::Schema;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Input;
        }
    }
    Category::Other
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn categories_survive_context() {
        let err = anyhow::Error::from(Failure::new(Category::Numeric, "mismatch")).context("verifying");
        assert_eq!(classify(&err), Category::Numeric);
        let err = Err::<(), _>(ModelError::MissingTensor("wte".into())).context("loading").unwrap_err();
        assert_eq!(classify(&err), Category::Schema);
        let err = Err::<(), _>(TraceError::Model(ModelError::Io {
            path: "x".into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        }))
        .context("tracing")
        .unwrap_err();
        assert_eq!(classify(&err), Category::Input);
    }

    #[test]
    fn codes_are_distinct() {
        let all = [
            Category::Other,
            Category::Usage,
            Category::Input,
            Category::Schema,
            Category::Numeric,
            Category::Resource,
        ];
        let mut codes: Vec<u8> = all.iter().map(|c| c.code()).collect();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
    }
}
