//! Rare-positive active learning over multimodal raster tilesets.
//!
//! The crate is organised around the lifecycle of a search for scarce
//! objects in aerial imagery:
//!
//! - [`tilestore`] crops per-modality orthomosaics into labeled tiles and
//!   persists them.
//! - [`classifier`] is the probabilistic binary model trained on tiles.
//! - [`ranking`] orders tiles by the distance of a domain metric to a target.
//! - [`engine`] runs the active-learning loop and its baseline strategies.
//! - [`experiments`] holds the passive and active benchmark protocols.
//! - [`mapping`] turns detections into clustered object maps.
//! - [`protocol`] defines the JSON wire types shared by the service and client.

pub mod classifier;
pub mod engine;
pub mod experiments;
pub mod mapping;
pub mod protocol;
pub mod ranking;
pub mod seeds;
pub mod tilestore;

pub use classifier::{ClassifierConfig, ClassifierState, FeatureTable, ProbabilisticClassifier};
pub use engine::{ActiveSession, Labeler, RunLog, SessionConfig, Strategy, StrategyKind};
pub use ranking::{RankOrder, RankingSpec};
pub use tilestore::{Band, CropGeometry, Label, LabelSource, Modality, Orthomosaic, Tile, Tileset};
