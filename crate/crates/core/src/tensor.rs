//! Dense NHWC tensors.

use std::borrow::Cow;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I8 => 3,
        }
    }
}

/// Symmetric per-tensor int8 quantization with a power-of-two scale
/// `s = 2^-exponent`; the zero point is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    pub exponent: i32,
}

impl QuantParams {
    pub const BITWIDTH: u32 = 8;
    pub const QMIN: i32 = -128;
    pub const QMAX: i32 = 127;

    pub fn new(exponent: i32) -> Self {
        QuantParams { exponent }
    }

    pub fn scale(self) -> f64 {
        2f64.powi(-self.exponent)
    }

    /// Representable interval `[-128 s, 127 s]`.
    pub fn range(self) -> (f64, f64) {
        let s = self.scale();
        (Self::QMIN as f64 * s, Self::QMAX as f64 * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::F32,
            Data::F64(_) => DType::F64,
            Data::I8(_) => DType::I8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
    quant: Option<QuantParams>,
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("empty shape"));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(shape_err!("zero extent in {shape:?}"));
        }
        acc.checked_mul(d).ok_or_else(|| shape_err!("extent overflow in {shape:?}"))
    })
}

impl Tensor {
    /// f32 tensor with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: f32) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: Data::F32(vec![fill; n]), quant: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, 0.0)
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Tensor::from_data(shape, Data::F32(data), None)
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::from_data(shape, Data::F64(data), None)
    }

    pub fn from_i8(shape: &[usize], data: Vec<i8>, quant: QuantParams) -> Result<Self> {
        Tensor::from_data(shape, Data::I8(data), Some(quant))
    }

    pub fn from_data(shape: &[usize], data: Data, quant: Option<QuantParams>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} holds {n} elements, data has {}", data.len()));
        }
        match (&data, quant) {
            (Data::I8(_), None) => return Err(shape_err!("i8 tensor requires quant params")),
            (Data::F32(_) | Data::F64(_), Some(_)) => {
                return Err(shape_err!("float tensor must not carry quant params"))
            }
            _ => {}
        }
        Ok(Tensor { shape: shape.to_vec(), data, quant })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn into_data(self) -> Data {
        self.data
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Data::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.data {
            Data::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            Data::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            Data::I8(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to f64; i8 tensors are dequantized.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            Data::I8(v) => {
                let s = self.quant.expect("i8 tensor without quant").scale();
                v.iter().map(|&q| q as f64 * s).collect()
            }
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            Data::F32(v) => v.clone(),
            _ => self.to_f64_vec().into_iter().map(|x| x as f32).collect(),
        }
    }

    /// Float conversion to f32 (dequantizing i8).
    pub fn to_f32(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Data::F32(self.to_f32_vec()), quant: None }
    }

    pub fn to_f64(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Data::F64(self.to_f64_vec()), quant: None }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = checked_numel(shape)?;
        if n != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), quant: self.quant })
    }

    /// Bitwise equality, including NaN payloads and signed zeros.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.quant != other.quant {
            return false;
        }
        match (&self.data, &other.data) {
            (Data::F32(a), Data::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::F64(a), Data::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::I8(a), Data::I8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    GlorotUniform,
    Zeros,
}

/// Fan-in and fan-out of a kernel laid out with output units on the last axis.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    let fan_out = *shape.last().unwrap_or(&1);
    let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    (fan_in.max(1), fan_out)
}

/// Glorot-uniform draws `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn init_weights(shape: &[usize], rng: &mut Rng, scheme: InitScheme) -> Result<Tensor> {
    let n = checked_numel(shape)?;
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::GlorotUniform => {
            let (fan_in, fan_out) = fans(shape);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.uniform(-a, a) as f32).collect()
        }
    };
    Tensor::from_f32(shape, data)
}

/// Float element types the reference runtime is generic over.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn view(t: &Tensor) -> Option<&[Self]>;
    fn wrap(shape: &[usize], data: Vec<Self>) -> Tensor;

    /// Borrows when the dtype already matches, converts otherwise.
    fn cow(t: &Tensor) -> Cow<'_, [Self]> {
        match Self::view(t) {
            Some(v) => Cow::Borrowed(v),
            None => Cow::Owned(t.to_f64_vec().into_iter().map(Self::of).collect()),
        }
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn view(t: &Tensor) -> Option<&[Self]> {
        t.as_f32()
    }
    fn wrap(shape: &[usize], data: Vec<Self>) -> Tensor {
        Tensor { shape: shape.to_vec(), data: Data::F32(data), quant: None }
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn view(t: &Tensor) -> Option<&[Self]> {
        t.as_f64()
    }
    fn wrap(shape: &[usize], data: Vec<Self>) -> Tensor {
        Tensor { shape: shape.to_vec(), data: Data::F64(data), quant: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn new_fills() {
        let t = Tensor::new(&[2, 2], 0.0).unwrap();
        assert_eq!(t.as_f32().unwrap(), &[0.0; 4]);
        let t = Tensor::new(&[1, 3, 3, 12], 1.0).unwrap();
        assert_eq!(t.numel(), 108);
        assert!(t.as_f32().unwrap().iter().all(|&x| x == 1.0));
        assert_eq!(t.dtype(), DType::F32);
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(matches!(Tensor::new(&[0], 1.0), Err(crate::Error::Shape(_))));
        assert!(matches!(Tensor::new(&[usize::MAX, 3], 1.0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn dtype_quant_invariant() {
        assert!(Tensor::from_data(&[2], Data::I8(vec![1, 2]), None).is_err());
        assert!(Tensor::from_data(&[2], Data::F32(vec![1.0, 2.0]), Some(QuantParams::new(3))).is_err());
        assert!(Tensor::from_f32(&[3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_weights(&[3, 3, 12, 16], &mut Rng::new(9), InitScheme::GlorotUniform).unwrap();
        let b = init_weights(&[3, 3, 12, 16], &mut Rng::new(9), InitScheme::GlorotUniform).unwrap();
        assert!(a.bitwise_eq(&b));
        let z = init_weights(&[3, 3, 12, 16], &mut Rng::new(9), InitScheme::Zeros).unwrap();
        assert!(z.as_f32().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn glorot_variance() {
        // 10^6 draws of U(-a, a) have variance a^2 / 3.
        let shape = [3, 3, 12, 16];
        let (fi, fo) = fans(&shape);
        assert_eq!((fi, fo), (108, 16));
        let a2 = 6.0 / (fi + fo) as f64;
        let mut rng = Rng::new(2024);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        while n < 1_000_000 {
            let t = init_weights(&shape, &mut rng, InitScheme::GlorotUniform).unwrap();
            for &x in t.as_f32().unwrap() {
                sum += x as f64;
                sq += (x as f64) * (x as f64);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expected = a2 / 3.0;
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    proptest! {
        #[test]
        fn reshape_preserves_data(a in 1usize..6, b in 1usize..6, c in 1usize..6) {
            let n = a * b * c;
            let t = Tensor::from_f32(&[a, b, c], (0..n).map(|i| i as f32).collect()).unwrap();
            let r = t.reshape(&[c, a * b]).unwrap();
            prop_assert_eq!(r.numel(), n);
            prop_assert_eq!(r.as_f32().unwrap(), t.as_f32().unwrap());
            prop_assert!(t.reshape(&[n + 1]).is_err());
        }
    }
}
