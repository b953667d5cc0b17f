use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttributeKind {
    #[serde(rename = "geometric-rotation")]
    Rotation,
    #[serde(rename = "geometric-scale")]
    Scale,
    #[serde(rename = "geometric-shift-x")]
    ShiftX,
    #[serde(rename = "geometric-shift-y")]
    ShiftY,
    #[serde(rename = "object-level")]
    ObjectLevel,
}

impl AttributeKind {
    pub fn is_geometric(self) -> bool {
        !matches!(self, AttributeKind::ObjectLevel)
    }
}

/// A manipulable attribute with its valid range, in natural units
/// (degrees, scale factor, pixels, or the object attribute's own scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub lo: f64,
    pub hi: f64,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, kind: AttributeKind, lo: f64, hi: f64) -> Result<Self> {
        let spec = Self { name: name.into(), kind, lo, hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::InvalidSpec(format!(
                "`{}` needs a finite range with lo < hi, got [{}, {}]",
                self.name, self.lo, self.hi
            )));
        }
        if self.kind == AttributeKind::Scale && self.lo <= 0.0 {
            return Err(Error::InvalidSpec(format!("scale `{}` must stay positive", self.name)));
        }
        Ok(())
    }

    pub fn rotation() -> Self {
        Self { name: "rotation".into(), kind: AttributeKind::Rotation, lo: -45.0, hi: 45.0 }
    }

    pub fn scale() -> Self {
        Self { name: "scale".into(), kind: AttributeKind::Scale, lo: 0.7, hi: 1.3 }
    }

    pub fn shift_x() -> Self {
        Self { name: "shift-x".into(), kind: AttributeKind::ShiftX, lo: -3.0, hi: 3.0 }
    }

    pub fn shift_y() -> Self {
        Self { name: "shift-y".into(), kind: AttributeKind::ShiftY, lo: -3.0, hi: 3.0 }
    }

    pub fn object(name: impl Into<String>, lo: f64, hi: f64) -> Result<Self> {
        Self::new(name, AttributeKind::ObjectLevel, lo, hi)
    }

    /// The identity-pose value for geometric attributes; the midpoint for
    /// object-level ones.
    pub fn canonical(&self) -> f64 {
        match self.kind {
            AttributeKind::Rotation | AttributeKind::ShiftX | AttributeKind::ShiftY => 0.0,
            AttributeKind::Scale => 1.0,
            AttributeKind::ObjectLevel => 0.5 * (self.lo + self.hi),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub fn validate_specs(specs: &[AttributeSpec]) -> Result<()> {
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.kind == s.kind && s.kind.is_geometric()) {
            return Err(Error::InvalidSpec(format!("duplicate geometric attribute `{}`", s.name)));
        }
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::InvalidSpec(format!("duplicate attribute name `{}`", s.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_declared_ranges() {
        let r = AttributeSpec::rotation();
        assert_eq!((r.lo, r.hi), (-45.0, 45.0));
        let s = AttributeSpec::scale();
        assert_eq!((s.lo, s.hi), (0.7, 1.3));
        assert_eq!(r.canonical(), 0.0);
        assert_eq!(s.canonical(), 1.0);
    }

    #[test]
    fn inverted_range_is_rejected() {
        assert!(AttributeSpec::new("x", AttributeKind::Rotation, 5.0, -5.0).is_err());
        assert!(AttributeSpec::new("x", AttributeKind::Rotation, 1.0, 1.0).is_err());
        assert!(AttributeSpec::new("s", AttributeKind::Scale, 0.0, 2.0).is_err());
    }

    #[test]
    fn duplicate_geometric_kinds_are_rejected() {
        let mut b = AttributeSpec::rotation();
        b.name = "rotation-2".into();
        assert!(validate_specs(&[AttributeSpec::rotation(), b]).is_err());
        assert!(validate_specs(&[AttributeSpec::rotation(), AttributeSpec::scale()]).is_ok());
    }

    #[test]
    fn serde_uses_kebab_kind_names() {
        let s = serde_json::to_string(&AttributeSpec::rotation()).unwrap();
        assert!(s.contains("geometric-rotation"));
    }
}
