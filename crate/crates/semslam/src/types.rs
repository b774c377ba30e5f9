//! Labeled point cloud types and the semantic class configuration.

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;

use crate::{Error, Result};

/// Reserved id for points without a semantic label.
pub const UNLABELED: u16 = 0;

/// A LiDAR return with its semantic class, the segmentation confidence
/// P(y|u), and a normalized position within the sweep used for deskewing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vector3<f64>,
    pub label: u16,
    pub confidence: f64,
    pub time_offset: f64,
}

impl LabeledPoint {
    pub fn new(position: Vector3<f64>, label: u16) -> Self {
        Self {
            position,
            label,
            confidence: 1.0,
            time_offset: 0.0,
        }
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub points: Vec<LabeledPoint>,
    pub index: usize,
    pub duration: f64,
}

impl Scan {
    pub fn new(points: Vec<LabeledPoint>, index: usize) -> Self {
        Self {
            points,
            index,
            duration: 0.1,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// SemanticKITTI class ids used by the defaults.
pub mod labels {
    pub const CAR: u16 = 10;
    pub const TRUCK: u16 = 18;
    pub const ROAD: u16 = 40;
    pub const SIDEWALK: u16 = 48;
    pub const BUILDING: u16 = 50;
    pub const FENCE: u16 = 51;
    pub const VEGETATION: u16 = 70;
    pub const POLE: u16 = 80;
    pub const TRAFFIC_SIGN: u16 = 81;
    pub const MOVING_CAR: u16 = 252;
    pub const MOVING_PERSON: u16 = 254;
}

/// Which classes are dynamic (removed before registration), which are
/// critical (downsampling immunity), and how label confidences enter the
/// residual weight.
#[derive(Debug, Clone)]
pub struct SemanticConfig {
    pub dynamic_labels: BTreeSet<u16>,
    pub critical_labels: BTreeSet<u16>,
    /// Weight used when either side of a correspondence is unlabeled.
    pub kappa_neutral: f64,
    /// (p_min, p_max); confidences are clamped into this open interval so a
    /// mismatch never fully annihilates a residual.
    pub confidence_clamp: (f64, f64),
    pub label_names: HashMap<u16, String>,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        // SemanticKITTI moving-* classes.
        let dynamic_labels: BTreeSet<u16> = (252..=259).collect();
        let critical_labels: BTreeSet<u16> =
            [labels::POLE, labels::TRAFFIC_SIGN].into_iter().collect();
        let label_names = [
            (labels::CAR, "car"),
            (labels::TRUCK, "truck"),
            (labels::ROAD, "road"),
            (labels::SIDEWALK, "sidewalk"),
            (labels::BUILDING, "building"),
            (labels::FENCE, "fence"),
            (labels::VEGETATION, "vegetation"),
            (labels::POLE, "pole"),
            (labels::TRAFFIC_SIGN, "traffic-sign"),
            (labels::MOVING_CAR, "moving-car"),
            (labels::MOVING_PERSON, "moving-person"),
        ]
        .into_iter()
        .map(|(id, name)| (id, name.to_string()))
        .collect();
        Self {
            dynamic_labels,
            critical_labels,
            kappa_neutral: 1.0,
            confidence_clamp: (0.05, 0.95),
            label_names,
        }
    }
}

impl SemanticConfig {
    pub fn validate(&self) -> Result<()> {
        let (p_min, p_max) = self.confidence_clamp;
        if !(0.0 < p_min && p_min < p_max && p_max < 1.0) {
            return Err(Error::Config(format!(
                "confidence_clamp: require 0 < p_min < p_max < 1, got ({p_min}, {p_max})"
            )));
        }
        if !(0.0..=1.0).contains(&self.kappa_neutral) {
            return Err(Error::Config(format!(
                "kappa_neutral: must lie in [0,1], got {}",
                self.kappa_neutral
            )));
        }
        if let Some(id) = self.dynamic_labels.intersection(&self.critical_labels).next() {
            return Err(Error::Config(format!(
                "label {id} is both dynamic and critical"
            )));
        }
        Ok(())
    }

    /// Looks up a label id by its display name.
    pub fn label_by_name(&self, name: &str) -> Option<u16> {
        self.label_names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(id, _)| *id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SemanticConfig::default().validate().unwrap();
    }

    #[test]
    fn overlapping_dynamic_and_critical_rejected() {
        let mut cfg = SemanticConfig::default();
        cfg.dynamic_labels.insert(labels::POLE);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_clamp_rejected() {
        let mut cfg = SemanticConfig::default();
        cfg.confidence_clamp = (0.9, 0.1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn label_lookup_by_name() {
        let cfg = SemanticConfig::default();
        assert_eq!(cfg.label_by_name("car"), Some(labels::CAR));
        assert_eq!(cfg.label_by_name("spaceship"), None);
    }
}
