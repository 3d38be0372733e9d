//! Plane matching head: transformer over plane embeddings, dual-softmax
//! assignment, mutual-nearest-neighbour extraction, labels and loss.

mod assign;
mod labels;
mod loss;
mod model;
pub mod scalar;
mod tensor;

pub use crate::raster::mask_iou;
pub use crate::render::project_primitive_mask;
pub use assign::{assignment_matrix, extract_correspondences, raw_similarity_assignment, AssignmentMatrix, Match};
pub use labels::{generate_labels, iou_matrix, labels_from_ious, project_map_masks, MatchLabels};
pub use loss::{loss_gradient, loss_value, matching_loss, MatchProblem, LOG_FLOOR};
pub use model::{
    attention_score, matcher_forward, rope_matrix, similarity_and_matchability, BlockWeights, LayerWeights, Linear,
    MatchError, MatcherOutput, MatcherWeights,
};
pub use scalar::{Dual, Scalar};
pub use tensor::{dot, Mat};
