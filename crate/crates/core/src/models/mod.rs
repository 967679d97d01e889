//! Model builders, synthetic data, augmentation and training.

pub mod arch;
pub mod augment;
pub mod dataset;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use arch::{
    build_autoencoder, build_classifier, build_decoder, build_discriminator, build_encoder,
    init_weights, AutoencoderConfig, ClassifierConfig, DiscriminatorConfig,
};
pub use augment::{apply_affine, augment, AffineParams, AugmentationPolicy};
pub use dataset::{gen_dataset, split_indices, DatasetConfig, DatasetManifest, Split};
pub use optim::{Adam, AdamConfig, PlateauScheduler};
pub use synthetic::{class_names, gen_ood, gen_phantom, OodFamily, SyntheticSample};
pub use train::{
    generator_step_allowed, latent_mean, reconstruction_mse, train_adversarial, train_autoencoder,
    train_classifier, write_history_jsonl, AdversarialTraining, AutoencoderTraining,
    ClassifierTraining, EpochRecord, LabelSmoothing, TrainedAdversarial, TrainedAutoencoder,
    TrainedClassifier,
};
