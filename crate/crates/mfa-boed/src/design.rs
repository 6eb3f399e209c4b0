//! Data-collection designs and realized observations.
//!
//! A design is an ordered multiset of measurement targets with per-target
//! relative noise levels. Repeating a target is legal and means independent
//! repeated measurement of the same flow.

use crate::error::{Error, Result};

/// One measurable quantity: an edge mass flow `z_ij = φ_ij · x_i` or an
/// external input `q_i`. Nodes are dense problem indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Edge { from: usize, to: usize },
    Input { node: usize },
}

/// A measurement plan: targets plus their relative noise levels `σ_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    targets: Vec<Target>,
    sigmas: Vec<f64>,
}

impl Design {
    pub fn new(targets: Vec<Target>, sigmas: Vec<f64>) -> Result<Self> {
        if targets.len() != sigmas.len() {
            return Err(Error::LengthMismatch {
                expected: targets.len(),
                got: sigmas.len(),
            });
        }
        for (index, &sigma) in sigmas.iter().enumerate() {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::InvalidSigma { index, sigma });
            }
        }
        Ok(Self { targets, sigmas })
    }

    /// Single-target convenience constructor.
    pub fn single(target: Target, sigma: f64) -> Result<Self> {
        Self::new(vec![target], vec![sigma])
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Concatenate designs into one joint design (used when several
    /// observations are ingested together).
    pub fn joint(designs: &[&Design]) -> Design {
        let mut targets = Vec::new();
        let mut sigmas = Vec::new();
        for d in designs {
            targets.extend_from_slice(&d.targets);
            sigmas.extend_from_slice(&d.sigmas);
        }
        Design { targets, sigmas }
    }
}

/// A realized data vector for a design, with free-text provenance.
#[derive(Debug, Clone)]
pub struct Observation {
    design: Design,
    values: Vec<f64>,
    source: String,
}

impl Observation {
    pub fn new(design: Design, values: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if values.len() != design.len() {
            return Err(Error::ObservationShape {
                n_values: values.len(),
                n_targets: design.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteObservation { index, value });
        }
        Ok(Self {
            design,
            values,
            source: source.into(),
        })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Merge observations into one joint observation; likelihood components
    /// multiply, so inference on the merged observation equals inference on
    /// the list.
    pub fn joint(observations: &[Observation]) -> Observation {
        let designs: Vec<&Design> = observations.iter().map(|o| o.design()).collect();
        let design = Design::joint(&designs);
        let values = observations
            .iter()
            .flat_map(|o| o.values().iter().copied())
            .collect();
        let source = observations
            .iter()
            .map(|o| o.source())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; ");
        Observation { design, values, source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_validates_sigmas() {
        let t = vec![Target::Input { node: 0 }];
        assert!(Design::new(t.clone(), vec![0.1]).is_ok());
        assert!(matches!(
            Design::new(t.clone(), vec![0.0]),
            Err(Error::InvalidSigma { .. })
        ));
        assert!(matches!(
            Design::new(t, vec![-0.1]),
            Err(Error::InvalidSigma { .. })
        ));
    }

    #[test]
    fn repeated_targets_are_legal() {
        let t = Target::Edge { from: 0, to: 1 };
        let d = Design::new(vec![t, t], vec![0.1, 0.1]).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn joint_concatenates_in_order() {
        let a = Design::single(Target::Input { node: 0 }, 0.1).unwrap();
        let b = Design::single(Target::Edge { from: 0, to: 1 }, 0.2).unwrap();
        let j = Design::joint(&[&a, &b]);
        assert_eq!(j.len(), 2);
        assert_eq!(j.sigmas(), &[0.1, 0.2]);
    }

    #[test]
    fn observation_shape_checked() {
        let d = Design::single(Target::Input { node: 0 }, 0.1).unwrap();
        assert!(Observation::new(d.clone(), vec![1.0, 2.0], "x").is_err());
        assert!(Observation::new(d, vec![1.0], "x").is_ok());
    }
}
