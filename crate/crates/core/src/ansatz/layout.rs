use serde::{Deserialize, Serialize};

/// A named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of named tensors making up all variational parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate tensor {name}");
        let offset = self.total;
        let spec = TensorSpec { name, shape: shape.to_vec(), offset };
        self.total += spec.len();
        self.tensors.push(spec);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn slice<'a>(&self, params: &'a [f64], name: &str) -> Option<&'a [f64]> {
        self.get(name).map(|t| &params[t.range()])
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64], name: &str) -> Option<&'a mut [f64]> {
        self.get(name).map(|t| &mut params[t.range()])
    }

    /// Name of the tensor owning flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        assert_eq!(l.add("a", &[2, 3]), 0);
        assert_eq!(l.add("b", &[4]), 6);
        assert_eq!(l.total, 10);
        assert_eq!(l.owner(7).unwrap().name, "b");
        let p: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(l.slice(&p, "b").unwrap(), &[6.0, 7.0, 8.0, 9.0]);
    }
}
