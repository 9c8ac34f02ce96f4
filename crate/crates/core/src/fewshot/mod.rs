//! Episodic few-shot evaluation on frozen encoder embeddings.

mod classifier;
mod dataset;
mod eval;

pub use classifier::{fit_classifier, l2_normalized, lr_objective, svm_objective, Classifier, ClassifierKind, FitSettings};
pub use dataset::{sample_episode, ClassIndex, Episode, LabeledDataset, LabeledItem, Protocol};
pub use eval::{
    embed, evaluate, evaluate_with, export_embeddings, format_table, write_embeddings_csv, write_reports_csv, EvalReport,
};

#[derive(Debug, thiserror::Error)]
pub enum FewshotError {
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("encoder must be frozen before embedding")]
    Unfrozen,
    #[error("encoder: {0}")]
    Encoder(String),
}
