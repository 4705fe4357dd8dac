mod data;
mod model;
mod recipe;
mod train;

pub use data::Dataset;
pub use model::Classifier;
pub use recipe::TrainRecipe;
pub use train::{evaluate, mixup, smooth_targets, train_epochs, EpochRecord, History, StepRecord};
