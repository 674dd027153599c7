use crate::error::{Error, Result};

/// Masked entries are pushed to this value before normalisation so that they
/// come out as exact zeros.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Contract(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numerical { op })
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Softmax of `logits / t`, restricted to unmasked entries (`mask[i] == true`
/// means the entry takes part). Masked entries come out as exactly zero.
pub fn softmax(logits: &[f64], t: f64, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::Contract("mask length differs from logits".into()));
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::Domain("softmax over an all-masked vector".into()));
        }
    }
    if logits.is_empty() {
        return Err(Error::Domain("softmax over an empty vector".into()));
    }
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, t, mask, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { op: "softmax" });
    }
    Ok(out)
}

/// Unchecked kernel shared with the graph op. Caller guarantees ≥1 unmasked entry.
pub(crate) fn softmax_into(logits: &[f64], t: f64, mask: Option<&[bool]>, out: &mut Vec<f64>) {
    out.clear();
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    out.extend(logits.iter().enumerate().map(|(i, &l)| if on(i) { l / t } else { MASK_SENTINEL }));
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v = if on(i) { *v / sum } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_uniform_output() {
        let p = softmax(&[1.0; 4], 1.0, None).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn ln3_gives_three_quarters() {
        let p = softmax(&[3f64.ln(), 0.0], 1.0, None).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn huge_temperature_flattens() {
        let p = softmax(&[2.0, 0.0, 0.0], 1e6, None).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let p = softmax(&[5.0, 1.0, 2.0], 1.0, Some(&[true, false, true])).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(softmax(&[1.0], 0.0, None), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[1.0, 2.0], 1.0, Some(&[false, false])), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
