use serde::{Deserialize, Serialize};

use super::DiffError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named, contiguous, non-overlapping segments covering a flat vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a segment after the existing ones.
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Result<(), DiffError> {
        let name = name.into();
        if self.segment(&name).is_some() {
            return Err(DiffError::Layout(format!("duplicate segment `{name}`")));
        }
        let offset = self.len();
        self.segments.push(Segment { name, offset, len });
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, len: usize) -> Result<Self, DiffError> {
        self.push(name, len)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Flat indices of the named segments, in the order given.
    pub fn indices(&self, names: &[&str]) -> Result<Vec<usize>, DiffError> {
        let mut out = Vec::new();
        for name in names {
            let s = self
                .segment(name)
                .ok_or_else(|| DiffError::Layout(format!("unknown segment `{name}`")))?;
            out.extend(s.offset..s.offset + s.len);
        }
        Ok(out)
    }
}

/// Flat parameter vector with a named-segment layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Pack segment contents in layout order.
    pub fn pack(layout: Layout, parts: &[(&str, &[f64])]) -> Result<Self, DiffError> {
        let mut pv = Self::zeros(layout);
        for (name, data) in parts {
            pv.set(name, data)?;
        }
        Ok(pv)
    }

    pub fn get(&self, name: &str) -> Result<&[f64], DiffError> {
        let s = self
            .layout
            .segment(name)
            .ok_or_else(|| DiffError::Layout(format!("unknown segment `{name}`")))?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<(), DiffError> {
        let s = self
            .layout
            .segment(name)
            .ok_or_else(|| DiffError::Layout(format!("unknown segment `{name}`")))?
            .clone();
        if data.len() != s.len {
            return Err(DiffError::Layout(format!(
                "segment `{name}` has length {}, got {}",
                s.len,
                data.len()
            )));
        }
        self.values[s.offset..s.offset + s.len].copy_from_slice(data);
        Ok(())
    }

    /// Split back into `(name, values)` pairs.
    pub fn unpack(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .segments()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    self.values[s.offset..s.offset + s.len].to_vec(),
                )
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segments_are_contiguous() {
        let l = Layout::new()
            .with("phi", 3)
            .unwrap()
            .with("psi", 5)
            .unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(l.segment("psi").unwrap().offset, 3);
        assert_eq!(
            l.indices(&["psi", "phi"]).unwrap(),
            vec![3, 4, 5, 6, 7, 0, 1, 2]
        );
        assert!(l.clone().with("phi", 1).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(a in prop::collection::vec(-1e3f64..1e3, 0..6),
                                 b in prop::collection::vec(-1e3f64..1e3, 0..6)) {
            let l = Layout::new().with("a", a.len()).unwrap().with("b", b.len()).unwrap();
            let pv = ParamVector::pack(l, &[("a", &a), ("b", &b)]).unwrap();
            let parts = pv.unpack();
            prop_assert_eq!(&parts[0].1, &a);
            prop_assert_eq!(&parts[1].1, &b);
            let mut again = ParamVector::zeros(pv.layout.clone());
            for (name, v) in &parts {
                again.set(name, v).unwrap();
            }
            prop_assert_eq!(again, pv);
        }
    }
}
