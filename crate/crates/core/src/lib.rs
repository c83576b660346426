//! Vertebral compression fracture detection from spine CT.
//!
//! The pipeline runs in three stages. Segmentation follows the spinal cord
//! through axial slices, reformats a virtual sagittal section along it and cuts
//! vertebra-scale patches down the column. A patch CNN scores every patch. An
//! LSTM reads the resulting probability sequence and decides the study.
//! Procedural phantoms supply volumes with known ground truth.

pub mod classifiers;
pub mod cohort;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod segmentation;
pub mod volume;
